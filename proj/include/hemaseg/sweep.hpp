#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "hemaseg/checkpoint.hpp"
#include "hemaseg/config.hpp"
#include "hemaseg/dataset.hpp"
#include "hemaseg/metrics.hpp"
#include "hemaseg/train.hpp"

namespace hemaseg {

/// Worker count: HEMASEG_THREADS if set and positive, else hardware concurrency.
inline std::size_t thread_cap() {
  if (const char* env = std::getenv("HEMASEG_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return std::size_t(v);
    } catch (const std::exception&) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(0..n-1) on up to `threads` workers. The first exception is rethrown
/// after all workers stop.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// Result rows

struct SweepRow {
  EncoderInit init = EncoderInit::random;
  std::size_t patch_size = 0;
  std::optional<double> mask_ratio;  // none for random initialization
  std::size_t feature_size = 0;
  RunRecord record;

  [[nodiscard]] auto key() const {
    return std::make_tuple(init == EncoderInit::random ? 0 : 1, patch_size, mask_ratio.value_or(-1.0), feature_size,
                           record.fold);
  }
};

inline void write_sweep_csv(std::ostream& os, std::vector<SweepRow> rows) {
  std::sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) { return a.key() < b.key(); });
  os << "init,patch_size,mask_ratio,feature_size,fold,accuracy,f1_macro";
  for (std::size_t c = 0; c < kNumClasses; ++c) os << ",f1_class" << c;
  os << '\n';
  for (const auto& r : rows) {
    os << (r.init == EncoderInit::random ? "random" : "pretrained") << ',' << r.patch_size << ','
       << (r.mask_ratio ? format_real(*r.mask_ratio) : "none") << ',' << r.feature_size << ',' << r.record.fold << ','
       << format_real(r.record.accuracy) << ',' << format_real(r.record.f1_macro);
    for (const auto& f : r.record.f1) os << ',' << (f ? format_real(*f) : "");
    os << '\n';
  }
}

/// Number of MAE runs and result rows the sweep will produce.
inline std::size_t sweep_pretrain_runs(const SweepConfig& s) { return s.grid_p.size() * s.grid_r.size(); }
inline std::size_t sweep_row_count(const SweepConfig& s, std::size_t folds) {
  return s.grid_p.size() * s.grid_f.size() * folds * (1 + s.grid_r.size());
}

// ---------------------------------------------------------------------------
// Datasets used by the commands

struct PretrainData {
  Dataset<ImageItem> train, val;
};

inline PretrainData pretrain_data(const RunConfig& cfg) {
  if (!cfg.data.manifest.empty()) {
    const Manifest m = load_manifest(cfg.data.manifest);
    return {manifest_images(cfg.data.manifest, m, manifest_rows(m, Split::train)),
            manifest_images(cfg.data.manifest, m, manifest_rows(m, Split::val))};
  }
  const auto splits = split_indices(cfg.data.pretrain_sources, cfg.data.train_frac, cfg.data.val_frac,
                                    cfg.data.test_frac, CounterRng(cfg.seed, stream_id("data.split")));
  std::vector<std::size_t> train, val;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    if (splits[i] == Split::train) train.push_back(i);
    if (splits[i] == Split::val) val.push_back(i);
  }
  return {synthetic_pretrain(cfg.seed, train, cfg.data.source_size, cfg.data.tile_size),
          synthetic_pretrain(cfg.seed, val, cfg.data.source_size, cfg.data.tile_size)};
}

struct SegmentData {
  Dataset<SegItem> items;
  std::optional<std::vector<std::size_t>> folds;  // from the manifest when every row carries one
};

inline SegmentData segment_data(const RunConfig& cfg) {
  if (cfg.data.manifest.empty()) {
    return {synthetic_segmentation(cfg.seed, cfg.data.segment_images, cfg.data.tile_size, cfg.data.label_fraction), {}};
  }
  const Manifest m = load_manifest(cfg.data.manifest);
  std::vector<std::size_t> rows;
  std::vector<std::size_t> folds;
  bool have_folds = true;
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    if (m.entries[i].label.empty()) continue;
    rows.push_back(i);
    have_folds = have_folds && m.entries[i].fold >= 0 && std::size_t(m.entries[i].fold) < cfg.segment.folds;
    folds.push_back(std::size_t(std::max(0, m.entries[i].fold)));
  }
  SegmentData d{manifest_segmentation(cfg.data.manifest, m, rows), {}};
  if (have_folds) d.folds = folds;
  return d;
}

// ---------------------------------------------------------------------------
// Sweep

/// Pretrains one MAE per (p, r) and trains every (p, f) with random and each
/// pretrained encoder under k-fold cross-validation. Checkpoints go to
/// `dir`; the returned rows are in sorted key order.
inline std::vector<SweepRow> run_sweep(const RunConfig& base, const std::filesystem::path& dir, std::ostream* log = nullptr) {
  base.validate();
  const SweepConfig& s = base.sweep;
  std::mutex log_mutex;
  auto note = [&](const std::string& msg) {
    if (!log) return;
    std::lock_guard lock(log_mutex);
    *log << msg << std::endl;
  };
  const std::size_t threads = thread_cap();

  auto cell_config = [&](std::size_t p, std::optional<double> r, std::optional<std::size_t> f) {
    RunConfig c = base;
    c.pretrain.mae.vit.patch_size = p;
    if (r) c.pretrain.mae.mask_ratio = *r;
    c.segment.unetr.vit = c.pretrain.mae.vit;
    c.segment.unetr.taps_override.clear();
    if (f) c.segment.unetr.feature_size = *f;
    return c;
  };
  auto mae_path = [&](std::size_t p, double r) {
    return dir / ("mae_p" + std::to_string(p) + "_r" + format_real(r) + ".hsck");
  };

  // Pre-training per (p, r)
  std::vector<std::pair<std::size_t, double>> pre_jobs;
  for (auto p : s.grid_p) {
    for (auto r : s.grid_r) pre_jobs.emplace_back(p, r);
  }
  const PretrainData pdata = pretrain_data(base);
  parallel_for(pre_jobs.size(), threads, [&](std::size_t j) {
    const auto [p, r] = pre_jobs[j];
    RunConfig c = cell_config(p, r, std::nullopt);
    c.mode = "pretrain";
    c.validate();
    Pretrainer t(c.pretrain, c.seed);
    t.run(pdata.train, pdata.val);
    save_checkpoint(mae_path(p, r), t.checkpoint(dump_config(c)));
    note("sweep: pretrained p=" + std::to_string(p) + " r=" + format_real(r));
  });

  // Segmentation per (init, p, r, f, fold)
  struct SegJob {
    std::size_t p, f;
    std::optional<double> r;
    int fold;
  };
  std::vector<SegJob> jobs;
  for (auto p : s.grid_p) {
    for (auto f : s.grid_f) {
      for (int k = 0; k < int(base.segment.folds); ++k) {
        jobs.push_back({p, f, std::nullopt, k});
        for (auto r : s.grid_r) jobs.push_back({p, f, r, k});
      }
    }
  }
  const SegmentData sdata = segment_data(base);
  const auto folds = sdata.folds ? *sdata.folds
                                 : kfold_indices(sdata.items.size(), base.segment.folds,
                                                 CounterRng(base.seed, stream_id("data.kfold")));
  std::vector<SweepRow> rows(jobs.size());
  parallel_for(jobs.size(), threads, [&](std::size_t j) {
    const SegJob& job = jobs[j];
    RunConfig c = cell_config(job.p, job.r, job.f);
    c.mode = "train-seg";
    std::optional<Checkpoint> pre;
    if (job.r) {
      c.segment.unetr.encoder_init = EncoderInit::pretrained;
      c.segment.pretrained = mae_path(job.p, *job.r).string();
      pre = load_checkpoint(c.segment.pretrained);
    } else {
      c.segment.unetr.encoder_init = EncoderInit::random;
      c.segment.unetr.freeze_epochs = 0;
      c.segment.pretrained.clear();
    }
    c.validate();
    FoldOutcome o = train_fold(sdata.items, folds, job.fold, c.segment, c.seed, dump_config(c), pre ? &*pre : nullptr);
    rows[j] = {c.segment.unetr.encoder_init, job.p, job.r, job.f, o.record};
    note("sweep: " + std::string(job.r ? "pretrained" : "random") + " p=" + std::to_string(job.p) +
         " f=" + std::to_string(job.f) + (job.r ? " r=" + format_real(*job.r) : "") + " fold=" + std::to_string(job.fold) +
         " macro_f1=" + format_real(o.record.f1_macro));
  });
  std::sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) { return a.key() < b.key(); });
  return rows;
}

}  // namespace hemaseg
