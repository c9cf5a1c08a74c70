#pragma once

#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "hemaseg/autodiff/gradcheck.hpp"
#include "hemaseg/checkpoint.hpp"
#include "hemaseg/config.hpp"
#include "hemaseg/dataset.hpp"
#include "hemaseg/export.hpp"
#include "hemaseg/sweep.hpp"
#include "hemaseg/train.hpp"

namespace hemaseg {

namespace fs = std::filesystem;

inline std::ofstream open_text(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  return os;
}

/// Writes <out>/pretrain/{checkpoint.hsck, loss.csv}. The checkpoint is
/// rewritten after every epoch; with `resume` training continues from it.
inline void cmd_pretrain(RunConfig cfg, std::ostream& log, bool resume = false) {
  cfg.mode = "pretrain";
  cfg.validate();
  const fs::path dir = fs::path(cfg.out) / "pretrain";
  const fs::path ckpt = dir / "checkpoint.hsck";
  const std::string snapshot = dump_config(cfg);
  const PretrainData data = pretrain_data(cfg);
  Pretrainer t(cfg.pretrain, cfg.seed);
  log << "pretrain: " << data.train.size() << " train / " << data.val.size() << " val tiles, "
      << nn::count_parameters<float>(t.model()) << " parameters\n";
  if (resume && fs::exists(ckpt)) {
    t.restore(load_checkpoint(ckpt));
    log << "pretrain: resumed at epoch " << t.epoch() << "\n";
  }
  t.run(data.train, data.val, [&](Pretrainer& p) {
    save_checkpoint(ckpt, p.checkpoint(snapshot));
    const auto& tr = p.trace();
    log << "pretrain: epoch " << p.epoch() - 1;
    for (std::size_t i = tr.size() >= 2 && tr[tr.size() - 2].epoch == p.epoch() - 1 ? tr.size() - 2 : tr.size() - 1; i < tr.size(); ++i) {
      log << ' ' << tr[i].split << '=' << format_real(tr[i].loss);
    }
    log << std::endl;
  });
  save_checkpoint(ckpt, t.checkpoint(snapshot));
  auto os = open_text(dir / "loss.csv");
  write_loss_csv(os, t.trace());
}

inline void write_fold_csv(std::ostream& os, const std::vector<RunRecord>& records) {
  os << "fold,accuracy,f1_macro";
  for (std::size_t c = 0; c < kNumClasses; ++c) os << ",f1_class" << c;
  os << '\n';
  auto row = [&](const std::string& label, double acc, double mac, auto per) {
    os << label << ',' << format_real(acc) << ',' << format_real(mac);
    for (std::size_t c = 0; c < kNumClasses; ++c) os << ',' << per(c);
    os << '\n';
  };
  for (const auto& r : records) {
    row(std::to_string(r.fold), r.accuracy, r.f1_macro, [&](std::size_t c) { return r.f1[c] ? format_real(*r.f1[c]) : ""; });
  }
  if (records.size() >= 2) {
    const CvSummary s = cv_aggregate(records);
    row("mean", s.accuracy.mean, s.f1_macro.mean, [&](std::size_t c) { return s.f1[c] ? format_real(s.f1[c]->mean) : ""; });
    row("std", s.accuracy.std, s.f1_macro.std, [&](std::size_t c) { return s.f1[c] ? format_real(s.f1[c]->std) : ""; });
  }
}

/// Writes <out>/segment/{epochs.csv, folds.csv, fold<k>.hsck}.
inline std::vector<RunRecord> cmd_train_seg(RunConfig cfg, std::ostream& log) {
  cfg.mode = "train-seg";
  cfg.validate();
  const fs::path dir = fs::path(cfg.out) / "segment";
  std::optional<Checkpoint> pre;
  if (cfg.segment.unetr.encoder_init == EncoderInit::pretrained) pre = load_checkpoint(cfg.segment.pretrained);
  const SegmentData data = segment_data(cfg);
  Unetr<float> shape_only(cfg.segment.unetr);
  log << "train-seg: " << data.items.size() << " images, " << cfg.segment.folds << " folds, "
      << nn::count_parameters<float>(shape_only) << " parameters\n";
  const auto folds = data.folds ? *data.folds
                                : kfold_indices(data.items.size(), cfg.segment.folds, CounterRng(cfg.seed, stream_id("data.kfold")));
  const std::string snapshot = dump_config(cfg);
  auto epochs = open_text(dir / "epochs.csv");
  write_epoch_csv_header(epochs);
  std::vector<RunRecord> records;
  for (int k = 0; k < int(cfg.segment.folds); ++k) {
    FoldOutcome o = train_fold(data.items, folds, k, cfg.segment, cfg.seed, snapshot, pre ? &*pre : nullptr);
    for (const auto& m : o.epochs) write_epoch_csv_row(epochs, m);
    save_checkpoint(dir / ("fold" + std::to_string(k) + ".hsck"), o.checkpoint);
    log << "train-seg: fold " << k << " accuracy=" << format_real(o.record.accuracy)
        << " macro_f1=" << format_real(o.record.f1_macro) << std::endl;
    records.push_back(o.record);
  }
  auto os = open_text(dir / "folds.csv");
  write_fold_csv(os, records);
  return records;
}

/// Evaluates a checkpoint. A segmentation checkpoint is scored on the test
/// split (all labeled items when the data is synthetic) and its first
/// predictions exported; an MAE checkpoint exports reconstructions.
inline void cmd_eval(RunConfig cfg, const fs::path& checkpoint_path, std::ostream& log) {
  cfg.mode = "eval";
  const Checkpoint c = load_checkpoint(checkpoint_path);
  const Json snap = Json::parse(c.config);
  const std::uint64_t seed = cfg.seed;
  const std::string out = cfg.out;
  const DataConfig data_cfg = cfg.data;
  const ExportConfig export_cfg = cfg.export_;
  apply_json(snap, cfg);
  cfg.seed = seed;
  cfg.out = out;
  cfg.data = data_cfg;
  cfg.export_ = export_cfg;
  cfg.mode = "eval";
  const fs::path dir = fs::path(cfg.out) / "eval";
  const std::array<std::size_t, 3> rgb = {cfg.export_.rgb_channels[0], cfg.export_.rgb_channels[1], cfg.export_.rgb_channels[2]};

  if (c.contains("state.trace.loss")) {
    cfg.segment.unetr.vit = cfg.pretrain.mae.vit;
    cfg.validate();
    Pretrainer t(cfg.pretrain, cfg.seed);
    t.restore(c);
    const PretrainData data = pretrain_data(cfg);
    const auto& eval_set = data.val.empty() ? data.train : data.val;
    log << "eval: reconstruction loss " << format_real(t.evaluate(eval_set)) << "\n";
    const std::size_t n = std::min(cfg.export_.max_images, eval_set.size());
    const CounterRng mask_rng(cfg.seed, stream_id("pretrain.eval_mask"));
    for (std::size_t i = 0; i < n; ++i) {
      const ImageItem it = eval_set[i];
      Tape<float> tape({.grad_enabled = false});
      const Tensor<float> images = stack_images<float>({&it.image});
      auto [pred, masks] = t.model().forward(tape, images, mask_rng, std::vector<std::uint64_t>{it.id});
      const Tensor<float> recon = reconstruct_images(pred.value(), images, masks, cfg.pretrain.mae);
      const std::string stem = std::to_string(it.id);
      save_ppm(dir / (stem + "_input.ppm"), render_channels(it.image, rgb));
      save_ppm(dir / (stem + "_recon.ppm"), render_channels(MultiChannelImage(recon.reshaped(Shape{recon.dim(1), recon.dim(2), recon.dim(3)})), rgb));
    }
    return;
  }

  cfg.validate();
  Unetr<float> model(cfg.segment.unetr);
  restore_module<float>(model, c, "unetr");
  SegmentData data = segment_data(cfg);
  if (!cfg.data.manifest.empty()) {
    const Manifest m = load_manifest(cfg.data.manifest);
    std::vector<std::size_t> rows;
    for (auto i : manifest_rows(m, Split::test)) {
      if (!m.entries[i].label.empty()) rows.push_back(i);
    }
    if (!rows.empty()) data.items = manifest_segmentation(cfg.data.manifest, m, rows);
  }
  ConfusionMatrix cm;
  auto csv = open_text(dir / "eval.csv");
  for (std::size_t i = 0; i < data.items.size(); ++i) {
    const SegItem it = data.items[i];
    Tape<float> tape({.grad_enabled = false});
    const auto pred = argmax_classes(model.forward(tape, stack_images<float>({&it.image})).value()).at(0);
    cm += confusion(pred, it.labels);
    if (i < cfg.export_.max_images) {
      const std::string stem = std::to_string(it.id);
      save_ppm(dir / (stem + "_input.ppm"), render_channels(it.image, rgb));
      save_ppm(dir / (stem + "_pred.ppm"), render_labels(pred));
      save_ppm(dir / (stem + "_labels.ppm"), render_labels(it.labels));
    }
  }
  const RunRecord r = scores(cm, -1);
  write_fold_csv(csv, {r});
  log << "eval: " << data.items.size() << " images accuracy=" << format_real(r.accuracy)
      << " macro_f1=" << format_real(r.f1_macro) << "\n";
}

inline void cmd_sweep(RunConfig cfg, std::ostream& log) {
  cfg.mode = "sweep";
  cfg.validate();
  const fs::path dir = fs::path(cfg.out) / "sweep";
  log << "sweep: " << sweep_pretrain_runs(cfg.sweep) << " MAE runs, "
      << sweep_row_count(cfg.sweep, cfg.segment.folds) << " segmentation runs, " << thread_cap() << " workers\n";
  const auto rows = run_sweep(cfg, dir, &log);
  auto os = open_text(dir / "results.csv");
  write_sweep_csv(os, rows);
}

inline fs::path cmd_gen_data(RunConfig cfg, std::ostream& log) {
  cfg.mode = "gen-data";
  cfg.validate();
  const auto path = write_synthetic_dataset(fs::path(cfg.out) / "data", cfg, cfg.data.segment_images);
  log << "gen-data: wrote " << cfg.data.segment_images << " items to " << path.string() << "\n";
  return path;
}

/// One line per primitive; returns the number of failures.
inline int cmd_gradcheck(std::ostream& log, double tol = 1e-4) {
  int failures = 0;
  for (const auto& entry : primitive_catalog()) {
    const GradcheckReport r = gradcheck(entry, {}, 1);
    log << (r.passed(tol) ? "PASS " : "FAIL ") << entry.name << " max_rel_error=" << format_real(r.max_rel_error) << "\n";
    failures += r.passed(tol) ? 0 : 1;
  }
  return failures;
}

}  // namespace hemaseg
