#include <filesystem>
#include <map>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "hemaseg/hemaseg.hpp"

using namespace hemaseg;
namespace fs = std::filesystem;

namespace {

MultiChannelImage ramp(std::size_t c, std::size_t h, std::size_t w) {
  MultiChannelImage img(c, h, w);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = float(i) / float(img.pixels.size());
  return img;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("hemaseg_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TEST(Split, DefaultCounts) {
  const auto s = split_indices(23040, 0.8, 0.1, 0.1, CounterRng(1, stream_id("data.split")));
  std::map<Split, std::size_t> n;
  for (auto v : s) ++n[v];
  EXPECT_EQ(n[Split::train], 18432u);
  EXPECT_EQ(n[Split::val], 2304u);
  EXPECT_EQ(n[Split::test], 2304u);
  EXPECT_THROW(split_indices(9, 0.8, 0.1, 0.1, CounterRng(1, 1)), std::invalid_argument);
  EXPECT_THROW(split_indices(100, 0.8, 0.1, 0.2, CounterRng(1, 1)), std::invalid_argument);
}

TEST(Split, TilingMultipliesBySixteen) {
  std::vector<std::size_t> train(18432), held(2304);
  for (std::size_t i = 0; i < train.size(); ++i) train[i] = i;
  for (std::size_t i = 0; i < held.size(); ++i) held[i] = 18432 + i;
  EXPECT_EQ(synthetic_pretrain(0, train).size(), 294912u);
  EXPECT_EQ(synthetic_pretrain(0, held).size(), 36864u);
}

TEST(KFold, SizesDifferByAtMostOne) {
  const auto f = kfold_indices(2383, 5, CounterRng(3, stream_id("data.kfold")));
  std::vector<std::size_t> sizes(5, 0);
  for (auto k : f) ++sizes[k];
  EXPECT_EQ(sizes, (std::vector<std::size_t>{477, 477, 477, 476, 476}));
  EXPECT_THROW(kfold_indices(3, 5, CounterRng(0, 0)), std::invalid_argument);
  EXPECT_THROW(kfold_indices(10, 1, CounterRng(0, 0)), std::invalid_argument);
}

TEST(Sparsify, KeepsFloorOfFraction) {
  DenseLabelMap dense(64, 64, 4);
  const auto s = sparsify_labels(dense, 0.023, CounterRng(1, 1));
  EXPECT_EQ(s.labeled_count(), 94u);
  for (auto c : s.codes) EXPECT_TRUE(c == 4 || c == kUnlabeled);
  EXPECT_EQ(sparsify_labels(dense, 1.0, CounterRng(1, 1)), dense);
  EXPECT_THROW(sparsify_labels(dense, 0.0, CounterRng(1, 1)), std::invalid_argument);
  EXPECT_EQ(sparsify_labels(dense, 0.023, CounterRng(1, 1)), s);
  EXPECT_NE(sparsify_labels(dense, 0.023, CounterRng(1, 2)), s);
}

TEST(Tiles, RowMajorAndInvertible) {
  const auto img = ramp(2, 8, 8);
  const auto tiles = tile_collate(img, 4);
  ASSERT_EQ(tiles.size(), 4u);
  EXPECT_EQ(tiles[1].at(1, 2, 3), img.at(1, 2, 7));
  EXPECT_EQ(tiles[2].at(0, 0, 0), img.at(0, 4, 0));
  EXPECT_EQ(reassemble_tiles(tiles, 2, 2), img);
  EXPECT_EQ(tile_collate(ramp(16, 256, 256)).size(), 16u);
  EXPECT_THROW(tile_collate(ramp(1, 6, 6), 4), ShapeError);
}

TEST(TileSource, MatchesDirectTiling) {
  TileSource src(5, 128, 64, 1);
  const auto [scene, dense] = generate_scene(SceneSpec::for_size(128), CounterRng(5, stream_id("data.source")).fork(3));
  const auto tiles = tile_collate(scene, 64);
  // Evicting and regenerating gives the same tiles.
  EXPECT_EQ(src(13).image, tiles[1]);
  EXPECT_EQ(src(0).image.pixels.shape(), (Shape{16, 64, 64}));
  EXPECT_EQ(src(12).image, tiles[0]);
}

TEST(Flips, ImageAndLabelMoveTogether) {
  const auto img = ramp(3, 5, 7);
  LabelMap lab(5, 7);
  for (std::size_t i = 0; i < lab.codes.size(); ++i) lab.codes[i] = std::uint8_t(i % 9);
  lab.codes[3] = kUnlabeled;
  CounterRng rng(1, 1);
  std::set<std::pair<bool, bool>> seen;
  for (int t = 0; t < 64; ++t) {
    CounterRng probe = rng;
    const FlipPair f = draw_flips(probe);
    seen.insert({f.horizontal, f.vertical});
    const auto [fi, fl] = paired_flip_augment(img, lab, rng);
    for (std::size_t y = 0; y < 5; ++y) {
      for (std::size_t x = 0; x < 7; ++x) {
        const std::size_t sy = f.vertical ? 4 - y : y, sx = f.horizontal ? 6 - x : x;
        ASSERT_EQ(fl.at(y, x), lab.at(sy, sx));
        for (std::size_t c = 0; c < 3; ++c) ASSERT_EQ(fi.at(c, y, x), img.at(c, sy, sx));
      }
    }
  }
  EXPECT_EQ(seen.size(), 4u);
  EXPECT_THROW(paired_flip_augment(img, LabelMap(5, 6), rng), ShapeError);
}

TEST(Scenes, DeterministicAndInRange) {
  const auto a = generate_scene(SceneSpec::for_size(64), CounterRng(1, 2));
  const auto b = generate_scene(SceneSpec::for_size(64), CounterRng(1, 2));
  const auto c = generate_scene(SceneSpec::for_size(64), CounterRng(1, 3));
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_NE(a.second, c.second);
  EXPECT_EQ(a.first.pixels.shape(), (Shape{16, 64, 64}));
  for (float v : a.first.pixels.storage()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
  for (auto code : a.second.codes) ASSERT_LT(code, kNumClasses);
}

TEST(Scenes, EveryClassAppearsAcrossSixteenImages) {
  std::vector<std::size_t> counts(kNumClasses, 0);
  for (std::uint64_t id = 0; id < 16; ++id) {
    for (auto code : synthetic_seg_item(1, id, 64, 1.0).labels.codes) ++counts[code];
  }
  for (std::size_t c = 0; c < kNumClasses; ++c) EXPECT_GT(counts[c], 0u) << kClassNames[c];
}

TEST(Scenes, EmptySpecIsBackgroundOnly) {
  const auto [img, lab] = generate_scene(SceneSpec::empty(32), CounterRng(0, 0));
  EXPECT_EQ(lab, DenseLabelMap(32, 32, 0));
}

TEST(Scenes, OvercrowdedSpecRejected) {
  SceneSpec s = SceneSpec::for_size(64);
  s.rbc.max_count = 500;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Channels, AssembledInInstrumentOrder) {
  ChannelFrames f;
  for (std::size_t a = 0; a < 12; ++a) {
    MultiChannelImage m(1, 2, 2);
    m.pixels.fill(float(a));
    f.angles.push_back(m);
  }
  f.rgb = MultiChannelImage(3, 2, 2);
  for (std::size_t c = 0; c < 3; ++c) f.rgb.at(c, 0, 0) = float(12 + c);
  MultiChannelImage uv(1, 2, 2);
  uv.at(0, 0, 0) = 15;
  f.uv = uv;
  const auto img = assemble_16ch(f);
  for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(img.at(c, 0, 0), float(c));
  f.uv.reset();
  EXPECT_THROW(assemble_16ch(f), std::invalid_argument);
  f.uv = MultiChannelImage(1, 3, 2);
  EXPECT_THROW(assemble_16ch(f), ShapeError);
}

TEST(Io, ImageAndLabelRoundTrip) {
  const auto dir = scratch("io");
  const auto item = synthetic_seg_item(4, 2, 64, 0.023);
  save_image(dir / "a.hsim", item.image);
  save_labels(dir / "a.hslb", item.labels);
  EXPECT_EQ(load_image(dir / "a.hsim"), item.image);
  EXPECT_EQ(load_labels(dir / "a.hslb"), item.labels);
  std::ofstream(dir / "bad.hsim") << "nope";
  EXPECT_THROW(load_image(dir / "bad.hsim"), FormatError);
  EXPECT_THROW(load_labels(dir / "a.hsim"), FormatError);
  fs::remove_all(dir);
}

TEST(Io, ManifestRoundTripAndDuplicates) {
  Manifest m{42, {{0, "images/0.hsim", "labels/0.hslb", Split::train, 3}, {7, "images/7.hsim", "", Split::none, -1}}};
  std::stringstream ss;
  write_manifest(ss, m);
  EXPECT_EQ(read_manifest(ss), m);
  std::stringstream dup("# hemaseg-manifest v1 rng=splitmix64-ctr seed=1\n1\ta\t-\ttrain\t0\n1\tb\t-\tval\t1\n");
  EXPECT_THROW(read_manifest(dup), FormatError);
  std::stringstream headless("1\ta\t-\ttrain\t0\n");
  EXPECT_THROW(read_manifest(headless), FormatError);
}

TEST(Io, SyntheticDatasetOnDisk) {
  const auto dir = scratch("disk");
  RunConfig cfg;
  cfg.seed = 3;
  cfg.segment.folds = 3;
  const auto path = write_synthetic_dataset(dir, cfg, 12);
  const Manifest m = load_manifest(path);
  ASSERT_EQ(m.size(), 12u);
  EXPECT_EQ(m.seed, 3u);
  const auto ds = manifest_segmentation(path, m, manifest_rows(m, Split::train));
  ASSERT_FALSE(ds.empty());
  const SegItem it = ds[0];
  const SegItem direct = synthetic_seg_item(3, it.id, 64, cfg.data.label_fraction);
  EXPECT_EQ(it.image, direct.image);
  EXPECT_EQ(it.labels, direct.labels);
  fs::remove_all(dir);
}

TEST(Dataset, SubsetsBatchesAndStacking) {
  const auto ds = synthetic_segmentation(1, 10, 32, 0.5);
  const auto sub = ds.subset({9, 2});
  EXPECT_EQ(sub.ids, (std::vector<std::uint64_t>{9, 2}));
  EXPECT_EQ(sub[0].labels, ds[9].labels);
  const auto batches = make_batches({0, 1, 2, 3, 4}, 2);
  ASSERT_EQ(batches.size(), 3u);
  EXPECT_EQ(batches[2], (std::vector<std::size_t>{4}));
  const auto a = ds[0], b = ds[1];
  const auto t = stack_images<double>({&a.image, &b.image});
  EXPECT_EQ(t.shape(), (Shape{2, 16, 32, 32}));
  EXPECT_EQ(t[16 * 32 * 32], double(b.image.pixels[0]));
  const auto mat = Dataset<SegItem>::from_items(sub.materialize());
  EXPECT_EQ(mat[1].image, ds[2].image);
}

TEST(Rng, CounterStreamsAreReproducible) {
  CounterRng a(1, 2), b(1, 2);
  for (int i = 0; i < 5; ++i) a.next_u64();
  b.set_counter(5);
  EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(CounterRng(1, 2).fork(3).next_u64(), CounterRng(1, 2).fork(4).next_u64());
  EXPECT_EQ(CounterRng(1, 2).fork(3, 4).next_u64(), CounterRng(1, 2).fork(3).fork(4).next_u64());
  CounterRng c(9, 9);
  std::vector<std::size_t> hits(7, 0);
  for (int i = 0; i < 70000; ++i) ++hits[c.below(7)];
  for (auto h : hits) EXPECT_NEAR(double(h), 10000.0, 400.0);
}

}  // namespace
