#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "hemaseg/hemaseg.hpp"

using namespace hemaseg;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("hemaseg_test_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::size_t lines(const std::string& s) { return std::size_t(std::count(s.begin(), s.end(), '\n')); }

ViTConfig tiny_vit(std::size_t p = 8) {
  ViTConfig v;
  v.patch_size = p;
  v.embed_dim = 16;
  v.mlp_dim = 32;
  v.num_layers = 3;
  v.num_heads = 2;
  return v;
}

RunConfig tiny_run(const fs::path& out) {
  RunConfig c;
  c.seed = 5;
  c.out = out.string();
  c.data.pretrain_sources = 10;
  c.data.source_size = 64;
  c.data.segment_images = 6;
  c.pretrain.mae.vit = tiny_vit();
  c.pretrain.mae.mask_ratio = 0.5;
  c.pretrain.epochs = 2;
  c.pretrain.batch = 4;
  c.segment.unetr.vit = tiny_vit();
  c.segment.unetr.feature_size = 4;
  c.segment.epochs = 2;
  c.segment.warmup_epochs = 0.5;
  c.segment.decay_end_epoch = 1;
  c.segment.batch = 4;
  c.segment.folds = 2;
  c.sweep.grid_p = {8};
  c.sweep.grid_r = {0.5};
  c.sweep.grid_f = {4};
  c.export_.max_images = 2;
  return c;
}

TEST(Config, ShippedTinyConfigLoads) {
  const RunConfig c = load_config(fs::path(HEMASEG_SOURCE_DIR) / "configs" / "tiny.json");
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.pretrain.mae.vit.patch_size, 4u);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, DumpParsesBackToTheSameConfig) {
  RunConfig c = tiny_run("x");
  c.segment.unetr.taps_override = {1, 2};
  c.segment.unetr.vit.patch_size = 4;
  c.segment.unetr.encoder_init = EncoderInit::pretrained;
  c.segment.pretrained = "mae.hsck";
  c.pretrain.mae.loss = ReconstructionLoss::l2;
  const std::string text = dump_config(c);
  EXPECT_EQ(dump_config(parse_config(text)), text);
}

TEST(Config, ErrorsNameTheField) {
  try {
    parse_config(R"({"pretrain": {"mae": {"vit": {"patch_sise": 4}}}})");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("pretrain.mae.vit.patch_sise"), std::string::npos) << e.what();
  }
  try {
    parse_config(R"({"segment": {"epochs": -3}})");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("segment.epochs"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_config("{not json"), ConfigError);
  RunConfig c;
  c.pretrain.mae.mask_ratio = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RunConfig{};
  c.segment.unetr.freeze_epochs = 300;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RunConfig{};
  c.data.tile_size = 32;
  c.data.source_size = 256;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Checkpoint, ByteRoundTrip) {
  MaskedAutoencoder<float> m(MAEConfig{.vit = tiny_vit()});
  nn::initialize<float>(m, 1);
  Checkpoint c;
  c.config = "{}";
  store_module<float>(c, m, "mae");
  c.put_u64("state.epoch", 3);
  c.put("state.loss", Tensor<double>(Shape{2}, {0.1, 0.2}));
  const std::string bytes = serialize(c);
  std::istringstream is(bytes);
  const Checkpoint back = read_checkpoint(is);
  EXPECT_EQ(back, c);
  EXPECT_EQ(serialize(back), bytes);
  EXPECT_EQ(back.get_u64("state.epoch"), 3u);
  std::istringstream truncated(bytes.substr(0, bytes.size() - 5));
  EXPECT_THROW(read_checkpoint(truncated), FormatError);
  EXPECT_THROW(c.put_u64("state.epoch", 4), std::invalid_argument);
  EXPECT_THROW(c.get<float>("state.epoch"), FormatError);
}

TEST(Checkpoint, MismatchLeavesModelUntouched) {
  MaskedAutoencoder<float> small(MAEConfig{.vit = tiny_vit()});
  nn::initialize<float>(small, 1);
  Checkpoint c;
  store_module<float>(c, small, "mae");
  ViTConfig wider = tiny_vit();
  wider.embed_dim = 24;
  MaskedAutoencoder<float> other(MAEConfig{.vit = wider});
  nn::initialize<float>(other, 2);
  Checkpoint before;
  store_module<float>(before, other, "mae");
  try {
    restore_module<float>(other, c, "mae");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("mae.encoder.patch_embed.weight"), std::string::npos);
  }
  Checkpoint after;
  store_module<float>(after, other, "mae");
  EXPECT_EQ(serialize(after), serialize(before));
}

TEST(Export, PaletteIsABijection) {
  for (std::size_t a = 0; a < kNumClasses; ++a) {
    for (std::size_t b = a + 1; b < kNumClasses; ++b) EXPECT_NE(kPalette[a], kPalette[b]);
    EXPECT_NE(kPalette[a], kUnlabeledColor);
  }
  LabelMap m(3, 4);
  for (std::size_t i = 0; i < m.codes.size(); ++i) m.codes[i] = i < 9 ? std::uint8_t(i) : kUnlabeled;
  EXPECT_EQ(palette_inverse(render_labels(m)), m);
  m.codes[0] = 9;
  EXPECT_THROW(render_labels(m), FormatError);
  RgbImage odd{1, 1, {1, 2, 3}};
  EXPECT_THROW(palette_inverse(odd), FormatError);
}

TEST(Export, BackgroundOnlyPpm) {
  const auto dir = scratch("ppm");
  save_ppm(dir / "bg.ppm", render_labels(LabelMap(64, 64, 0)));
  const std::string bytes = slurp(dir / "bg.ppm");
  const std::string header = "P6\n64 64\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 64 * 64 * 3);
  EXPECT_EQ(bytes.substr(0, header.size()), header);
  const RgbImage img = load_ppm(dir / "bg.ppm");
  for (std::size_t r = 0; r < 64; ++r) {
    for (std::size_t c = 0; c < 64; ++c) ASSERT_EQ(img.at(r, c), kPalette[0]);
  }
  fs::remove_all(dir);
}

TEST(Export, ChannelRenderingScalesJointly) {
  MultiChannelImage img(16, 1, 2);
  img.at(12, 0, 0) = 0.2f;
  img.at(13, 0, 1) = 0.6f;
  img.at(14, 0, 0) = 0.4f;
  const RgbImage out = render_channels(img, {12, 13, 14});
  EXPECT_EQ(out.at(0, 0), (Rgb{85, 0, 170}));
  EXPECT_EQ(out.at(0, 1), (Rgb{0, 255, 0}));
  EXPECT_THROW(render_channels(img, {12, 13, 16}), std::invalid_argument);
}

TEST(Pretrain, DeterministicAndResumable) {
  RunConfig c = tiny_run("unused");
  c.pretrain.epochs = 3;
  const PretrainData data = pretrain_data(c);
  ASSERT_EQ(data.val.size(), 1u);

  Pretrainer a(c.pretrain, c.seed), b(c.pretrain, c.seed);
  a.run(data.train, data.val);
  b.run(data.train, data.val);
  EXPECT_EQ(a.trace(), b.trace());
  EXPECT_EQ(serialize(a.checkpoint("{}")), serialize(b.checkpoint("{}")));
  ASSERT_EQ(a.trace().size(), 6u);

  Pretrainer first(c.pretrain, c.seed);
  first.run_epoch(data.train, data.val);
  const std::string saved = serialize(first.checkpoint("{}"));
  Pretrainer resumed(c.pretrain, c.seed);
  std::istringstream is(saved);
  resumed.restore(read_checkpoint(is));
  resumed.run(data.train, data.val);
  EXPECT_EQ(resumed.trace(), a.trace());
  EXPECT_EQ(serialize(resumed.checkpoint("{}")), serialize(a.checkpoint("{}")));
}

TEST(Pretrain, LossDropsOnRepeatedBatch) {
  RunConfig c = tiny_run("unused");
  c.pretrain.mae.norm_pix = false;
  Pretrainer t(c.pretrain, 1);
  const auto items = pretrain_data(c).train.subset({0, 1, 2, 3}).materialize();
  const double first = t.train_batch(items, 3e-3);
  double last = first;
  for (int i = 0; i < 30; ++i) last = t.train_batch(items, 3e-3);
  EXPECT_LT(last, 0.7 * first);
}

TEST(Commands, PretrainTrainEvalPipeline) {
  const auto dir = scratch("pipeline");
  RunConfig c = tiny_run(dir);
  std::ostringstream log;
  cmd_pretrain(c, log);
  const std::string loss = slurp(dir / "pretrain" / "loss.csv");
  EXPECT_EQ(lines(loss), 1 + 2 * c.pretrain.epochs);
  EXPECT_TRUE(loss.starts_with("epoch,split,loss\n0,train,"));

  c.segment.unetr.encoder_init = EncoderInit::pretrained;
  c.segment.pretrained = (dir / "pretrain" / "checkpoint.hsck").string();
  c.segment.unetr.freeze_epochs = 1;
  const auto records = cmd_train_seg(c, log);
  ASSERT_EQ(records.size(), 2u);
  const std::string folds = slurp(dir / "segment" / "folds.csv");
  EXPECT_EQ(lines(folds), 1 + 2 + 2);
  EXPECT_NE(folds.find("\nmean,"), std::string::npos);
  const std::string epochs = slurp(dir / "segment" / "epochs.csv");
  EXPECT_EQ(lines(epochs), 1 + 2 * c.segment.epochs);
  EXPECT_NE(epochs.find("\n0,0,"), std::string::npos);

  cmd_eval(c, dir / "segment" / "fold0.hsck", log);
  EXPECT_TRUE(fs::exists(dir / "eval" / "eval.csv"));
  EXPECT_TRUE(fs::exists(dir / "eval" / "0_pred.ppm"));
  EXPECT_EQ(load_ppm(dir / "eval" / "0_labels.ppm").width, 64u);

  cmd_eval(c, dir / "pretrain" / "checkpoint.hsck", log);
  bool recon = false;
  for (const auto& e : fs::directory_iterator(dir / "eval")) recon = recon || e.path().string().ends_with("_recon.ppm");
  EXPECT_TRUE(recon);
  fs::remove_all(dir);
}

TEST(Commands, PretrainResumeMatchesUninterruptedRun) {
  const auto dir = scratch("resume");
  RunConfig full = tiny_run(dir / "full"), part = tiny_run(dir / "part");
  std::ostringstream log;
  cmd_pretrain(full, log);
  // Interrupt after one epoch, then let the command pick up the checkpoint.
  Pretrainer t(part.pretrain, part.seed);
  const auto data = pretrain_data(part);
  t.run_epoch(data.train, data.val);
  save_checkpoint(dir / "part" / "pretrain" / "checkpoint.hsck", t.checkpoint(dump_config(part)));
  cmd_pretrain(part, log, true);
  EXPECT_NE(log.str().find("resumed at epoch 1"), std::string::npos);
  EXPECT_EQ(slurp(dir / "part" / "pretrain" / "loss.csv"), slurp(dir / "full" / "pretrain" / "loss.csv"));
  const Checkpoint a = load_checkpoint(dir / "full" / "pretrain" / "checkpoint.hsck");
  const Checkpoint b = load_checkpoint(dir / "part" / "pretrain" / "checkpoint.hsck");
  EXPECT_EQ(a.records, b.records);
  fs::remove_all(dir);
}

TEST(Commands, SweepRowsAndRandomMarker) {
  const auto dir = scratch("sweep");
  RunConfig c = tiny_run(dir);
  c.segment.epochs = 1;
  c.segment.decay_end_epoch = 1;
  c.pretrain.epochs = 1;
  std::ostringstream log;
  cmd_sweep(c, log);
  const std::string csv = slurp(dir / "sweep" / "results.csv");
  EXPECT_EQ(lines(csv), 1 + sweep_row_count(c.sweep, c.segment.folds));
  EXPECT_EQ(sweep_row_count(c.sweep, c.segment.folds), 4u);
  EXPECT_NE(csv.find("\nrandom,8,none,4,0,"), std::string::npos) << csv;
  EXPECT_NE(csv.find("\npretrained,8,0.5,4,1,"), std::string::npos) << csv;
  EXPECT_TRUE(fs::exists(dir / "sweep" / "mae_p8_r0.5.hsck"));
  fs::remove_all(dir);
}

TEST(Commands, SweepCountsForTheFullGrid) {
  SweepConfig s;
  EXPECT_EQ(sweep_pretrain_runs(s), 9u);
  EXPECT_EQ(sweep_row_count(s, 5), 3u * 6u * 5u * 4u);
}

TEST(Commands, GradcheckReportsEveryPrimitive) {
  std::ostringstream os;
  EXPECT_EQ(cmd_gradcheck(os), 0);
  EXPECT_EQ(lines(os.str()), primitive_catalog().size());
  EXPECT_EQ(os.str().find("FAIL"), std::string::npos);
}

TEST(Commands, GenDataWritesManifest) {
  const auto dir = scratch("gen");
  RunConfig c = tiny_run(dir);
  c.data.segment_images = 10;
  std::ostringstream log;
  const auto path = cmd_gen_data(c, log);
  const Manifest m = load_manifest(path);
  EXPECT_EQ(m.size(), 10u);
  for (const auto& e : m.entries) {
    EXPECT_TRUE(fs::exists(path.parent_path() / e.image));
    EXPECT_GE(e.fold, 0);
  }
  // The manifest drives segmentation data with its own folds.
  c.data.manifest = path.string();
  const SegmentData d = segment_data(c);
  EXPECT_EQ(d.items.size(), 10u);
  ASSERT_TRUE(d.folds);
  fs::remove_all(dir);
}

}  // namespace
