#pragma once

#include <cstdint>
#include <cstdio>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "hemaseg/checkpoint.hpp"
#include "hemaseg/config.hpp"
#include "hemaseg/dataset.hpp"
#include "hemaseg/mae.hpp"
#include "hemaseg/metrics.hpp"
#include "hemaseg/optim.hpp"
#include "hemaseg/unetr.hpp"

namespace hemaseg {

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

namespace detail {

template <typename M>
void clear_grads(M& model) {
  model.visit("", [](const std::string&, Parameter<float>& p) { p.grad = Tensor<float>(); });
}

inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch) { return (n + batch - 1) / batch; }

}  // namespace detail

// ---------------------------------------------------------------------------
// MAE pre-training

struct LossRow {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;

  friend bool operator==(const LossRow&, const LossRow&) = default;
};

inline void write_loss_csv(std::ostream& os, const std::vector<LossRow>& rows) {
  os << "epoch,split,loss\n";
  for (const auto& r : rows) os << r.epoch << ',' << r.split << ',' << format_real(r.loss) << '\n';
}

class Pretrainer {
 public:
  Pretrainer(PretrainConfig config, std::uint64_t seed)
      : config_((config.validate(), std::move(config))), seed_(seed), model_(config_.mae), opt_(config_.adam) {
    nn::initialize<float>(model_, seed_);
  }

  [[nodiscard]] MaskedAutoencoder<float>& model() { return model_; }
  [[nodiscard]] const PretrainConfig& config() const { return config_; }
  [[nodiscard]] std::size_t epoch() const { return epoch_; }
  [[nodiscard]] std::size_t step() const { return step_; }
  [[nodiscard]] const std::vector<LossRow>& trace() const { return trace_; }

  /// One optimizer step; returns the batch loss. Masks and flips come from
  /// substreams keyed by (epoch, item id).
  double train_batch(const std::vector<ImageItem>& items, double lr) {
    std::vector<MultiChannelImage> flipped;
    std::vector<std::uint64_t> ids;
    flipped.reserve(items.size());
    for (const auto& it : items) {
      CounterRng fr = CounterRng(seed_, stream_id("pretrain.flip")).fork(epoch_, it.id);
      flipped.push_back(flip_image(it.image, draw_flips(fr)));
      ids.push_back(it.id);
    }
    std::vector<const MultiChannelImage*> ptrs;
    for (const auto& f : flipped) ptrs.push_back(&f);
    const Tensor<float> images = stack_images<float>(ptrs);
    Tape<float> tape;
    detail::clear_grads(model_);
    auto [pred, masks] = model_.forward(tape, images, CounterRng(seed_, stream_id("pretrain.mask")).fork(epoch_), ids);
    Var<float> loss = reconstruction_loss(tape, pred, images, masks, config_.mae);
    const double value = loss.value()[0];
    tape.backward(loss);
    opt_.step(nn::parameters<float>(model_), lr);
    ++step_;
    return value;
  }

  /// Mean loss over `data` with fixed per-item masks and no augmentation.
  double evaluate(const Dataset<ImageItem>& data) {
    if (data.empty()) throw std::invalid_argument("pretrain: empty evaluation set");
    const CounterRng mask_rng(seed_, stream_id("pretrain.eval_mask"));
    double total = 0;
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (const auto& b : make_batches(order, config_.batch)) {
      std::vector<ImageItem> items;
      std::vector<const MultiChannelImage*> ptrs;
      std::vector<std::uint64_t> ids;
      for (auto i : b) items.push_back(data[i]);
      for (const auto& it : items) {
        ptrs.push_back(&it.image);
        ids.push_back(it.id);
      }
      const Tensor<float> images = stack_images<float>(ptrs);
      Tape<float> tape({.grad_enabled = false});
      auto [pred, masks] = model_.forward(tape, images, mask_rng, ids);
      total += double(reconstruction_loss(tape, pred, images, masks, config_.mae).value()[0]) * double(b.size());
    }
    return total / double(data.size());
  }

  /// Trains one epoch over `train`; appends (epoch, train) and, when `val` is
  /// nonempty, (epoch, val) rows to the trace.
  void run_epoch(const Dataset<ImageItem>& train, const Dataset<ImageItem>& val) {
    if (train.empty()) throw std::invalid_argument("pretrain: empty training set");
    const std::size_t total = config_.epochs * detail::steps_per_epoch(train.size(), config_.batch);
    const ScheduleSpec sched = config_.schedule();
    const auto order = CounterRng(seed_, stream_id("pretrain.order")).fork(epoch_).permutation(train.size());
    double sum = 0;
    for (const auto& b : make_batches(order, config_.batch)) {
      std::vector<ImageItem> items;
      for (auto i : b) items.push_back(train[i]);
      sum += train_batch(items, sched.lr(step_, total)) * double(b.size());
    }
    trace_.push_back({epoch_, "train", sum / double(train.size())});
    if (!val.empty()) trace_.push_back({epoch_, "val", evaluate(val)});
    ++epoch_;
  }

  /// Runs the remaining epochs. `on_epoch` is called after each one.
  void run(const Dataset<ImageItem>& train, const Dataset<ImageItem>& val,
           const std::function<void(Pretrainer&)>& on_epoch = {}) {
    while (epoch_ < config_.epochs) {
      run_epoch(train, val);
      if (on_epoch) on_epoch(*this);
    }
  }

  [[nodiscard]] Checkpoint checkpoint(const std::string& config_json) {
    Checkpoint c;
    c.config = config_json;
    store_module<float>(c, model_, "mae");
    store_optimizer(c, opt_, "optim");
    c.put_u64("state.epoch", epoch_);
    c.put_u64("state.step", step_);
    Tensor<double> losses(Shape{trace_.size()});
    Tensor<std::uint64_t> meta(Shape{trace_.size(), 2});
    for (std::size_t i = 0; i < trace_.size(); ++i) {
      losses[i] = trace_[i].loss;
      meta[2 * i] = trace_[i].epoch;
      meta[2 * i + 1] = trace_[i].split == "train" ? 0 : 1;
    }
    c.put("state.trace.loss", losses);
    c.put("state.trace.meta", meta);
    return c;
  }

  void restore(const Checkpoint& c) {
    restore_module<float>(model_, c, "mae");
    restore_optimizer(opt_, c, "optim");
    epoch_ = c.get_u64("state.epoch");
    step_ = c.get_u64("state.step");
    const auto losses = c.get<double>("state.trace.loss");
    const auto meta = c.get<std::uint64_t>("state.trace.meta");
    trace_.clear();
    for (std::size_t i = 0; i < losses.size(); ++i) {
      trace_.push_back({meta[2 * i], meta[2 * i + 1] == 0 ? "train" : "val", losses[i]});
    }
  }

 private:
  PretrainConfig config_;
  std::uint64_t seed_;
  MaskedAutoencoder<float> model_;
  Adam<float> opt_;
  std::size_t epoch_ = 0;
  std::size_t step_ = 0;
  std::vector<LossRow> trace_;
};

// ---------------------------------------------------------------------------
// Segmentation

struct EvalResult {
  double loss = 0.0;  // mean cross-entropy over labeled pixels
  ConfusionMatrix confusion;
  std::vector<LabelMap> predictions;  // kept only when requested
};

struct EpochMetrics {
  int fold = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  bool encoder_frozen = false;
  double train_loss = 0.0;
  double eval_loss = 0.0;
  double accuracy = 0.0;
  double f1_macro = 0.0;
};

inline void write_epoch_csv_header(std::ostream& os) {
  os << "fold,epoch,lr,encoder_frozen,train_loss,eval_loss,accuracy,f1_macro\n";
}

inline void write_epoch_csv_row(std::ostream& os, const EpochMetrics& m) {
  os << m.fold << ',' << m.epoch << ',' << format_real(m.lr) << ',' << (m.encoder_frozen ? 1 : 0) << ','
     << format_real(m.train_loss) << ',' << format_real(m.eval_loss) << ',' << format_real(m.accuracy) << ','
     << format_real(m.f1_macro) << '\n';
}

class SegmentationTrainer {
 public:
  /// Parameters are initialized from `seed` (independent of the fold), then
  /// the encoder is replaced when a pre-trained checkpoint is given.
  SegmentationTrainer(SegmentConfig config, std::uint64_t seed, int fold, const Checkpoint* pretrained = nullptr)
      : config_((config.validate(), std::move(config))), seed_(seed), fold_(fold), model_(config_.unetr), opt_(config_.adam) {
    nn::initialize<float>(model_, seed_);
    if (config_.unetr.encoder_init == EncoderInit::pretrained) {
      if (!pretrained) throw ConfigError("segment.pretrained: pretrained initialization needs a checkpoint");
      load_pretrained_encoder(model_, *pretrained);
    }
  }

  [[nodiscard]] Unetr<float>& model() { return model_; }
  [[nodiscard]] const SegmentConfig& config() const { return config_; }
  [[nodiscard]] std::size_t epoch() const { return epoch_; }
  [[nodiscard]] std::size_t step() const { return step_; }
  [[nodiscard]] bool encoder_frozen() const { return epoch_ < config_.unetr.freeze_epochs; }

  double train_batch(const std::vector<SegItem>& items, double lr) {
    nn::set_frozen<float>(model_.encoder, encoder_frozen());
    std::vector<MultiChannelImage> images;
    std::vector<SparseLabelMask> labels;
    for (const auto& it : items) {
      CounterRng fr = CounterRng(seed_, stream_id("segment.flip")).fork(std::uint64_t(fold_), epoch_, it.id);
      auto [img, lab] = paired_flip_augment(it.image, it.labels, fr);
      images.push_back(std::move(img));
      labels.push_back(std::move(lab));
    }
    std::vector<const MultiChannelImage*> ptrs;
    for (const auto& im : images) ptrs.push_back(&im);
    Tape<float> tape;
    detail::clear_grads(model_);
    Var<float> logits = model_.forward(tape, stack_images<float>(ptrs));
    Var<float> loss = sparse_cross_entropy(tape, logits, labels);
    const double value = loss.value()[0];
    tape.backward(loss);
    opt_.step(nn::parameters<float>(model_), lr);
    ++step_;
    return value;
  }

  /// Runs one epoch at the schedule's rate for the current epoch; returns
  /// the mean training loss over labeled pixels.
  double train_epoch(const Dataset<SegItem>& train) {
    if (train.empty()) throw std::invalid_argument("train_segmentation: empty training set");
    const double lr = current_lr();
    const auto order = CounterRng(seed_, stream_id("segment.order")).fork(std::uint64_t(fold_), epoch_).permutation(train.size());
    double sum = 0, weight = 0;
    for (const auto& b : make_batches(order, config_.batch)) {
      std::vector<SegItem> items;
      double labeled = 0;
      for (auto i : b) {
        items.push_back(train[i]);
        labeled += double(items.back().labels.labeled_count());
      }
      sum += train_batch(items, lr) * labeled;
      weight += labeled;
    }
    ++epoch_;
    return sum / weight;
  }

  [[nodiscard]] double current_lr() const { return config_.schedule().lr(std::min(epoch_, config_.epochs), config_.epochs); }

  EvalResult evaluate(const Dataset<SegItem>& data, bool keep_predictions = false) {
    EvalResult r;
    double sum = 0, weight = 0;
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (const auto& b : make_batches(order, config_.batch)) {
      std::vector<SegItem> items;
      for (auto i : b) items.push_back(data[i]);
      std::vector<const MultiChannelImage*> ptrs;
      std::vector<SparseLabelMask> labels;
      double labeled = 0;
      for (const auto& it : items) {
        ptrs.push_back(&it.image);
        labels.push_back(it.labels);
        labeled += double(it.labels.labeled_count());
      }
      Tape<float> tape({.grad_enabled = false});
      Var<float> logits = model_.forward(tape, stack_images<float>(ptrs));
      if (labeled > 0) {
        sum += double(sparse_cross_entropy(tape, logits, labels).value()[0]) * labeled;
        weight += labeled;
      }
      auto preds = argmax_classes(logits.value());
      for (std::size_t i = 0; i < preds.size(); ++i) {
        r.confusion += confusion(preds[i], labels[i]);
        if (keep_predictions) r.predictions.push_back(std::move(preds[i]));
      }
    }
    r.loss = weight > 0 ? sum / weight : 0.0;
    return r;
  }

  [[nodiscard]] Checkpoint checkpoint(const std::string& config_json) {
    Checkpoint c;
    c.config = config_json;
    store_module<float>(c, model_, "unetr");
    store_optimizer(c, opt_, "optim");
    c.put_u64("state.epoch", epoch_);
    c.put_u64("state.step", step_);
    return c;
  }

  void restore(const Checkpoint& c) {
    restore_module<float>(model_, c, "unetr");
    restore_optimizer(opt_, c, "optim");
    epoch_ = c.get_u64("state.epoch");
    step_ = c.get_u64("state.step");
  }

 private:
  SegmentConfig config_;
  std::uint64_t seed_;
  int fold_;
  Unetr<float> model_;
  Adam<float> opt_;
  std::size_t epoch_ = 0;
  std::size_t step_ = 0;
};

struct FoldOutcome {
  RunRecord record;
  std::vector<EpochMetrics> epochs;
  Checkpoint checkpoint;
};

/// Trains on every item whose fold differs from `fold` and evaluates on the rest.
inline FoldOutcome train_fold(const Dataset<SegItem>& data, const std::vector<std::size_t>& fold_of, int fold,
                              const SegmentConfig& config, std::uint64_t seed, const std::string& config_json,
                              const Checkpoint* pretrained = nullptr) {
  if (fold_of.size() != data.size()) throw std::invalid_argument("train_fold: fold assignment size mismatch");
  std::vector<std::size_t> train_idx, eval_idx;
  for (std::size_t i = 0; i < data.size(); ++i) (int(fold_of[i]) == fold ? eval_idx : train_idx).push_back(i);
  if (train_idx.empty() || eval_idx.empty()) throw std::invalid_argument("train_fold: fold " + std::to_string(fold) + " is empty");
  const auto train = data.subset(train_idx);
  const auto held = data.subset(eval_idx);
  SegmentationTrainer trainer(config, seed, fold, pretrained);
  FoldOutcome out;
  while (trainer.epoch() < config.epochs) {
    EpochMetrics m;
    m.fold = fold;
    m.epoch = trainer.epoch();
    m.lr = trainer.current_lr();
    m.encoder_frozen = trainer.encoder_frozen();
    m.train_loss = trainer.train_epoch(train);
    const EvalResult ev = trainer.evaluate(held);
    m.eval_loss = ev.loss;
    if (ev.confusion.total() > 0) {
      const RunRecord rr = scores(ev.confusion, fold);
      m.accuracy = rr.accuracy;
      m.f1_macro = rr.f1_macro;
    }
    out.epochs.push_back(m);
  }
  out.record = scores(trainer.evaluate(held).confusion, fold);
  out.checkpoint = trainer.checkpoint(config_json);
  return out;
}

/// k-fold cross-validation. Fold assignment comes from `fold_of` when given,
/// otherwise from a seeded shuffle.
inline std::vector<FoldOutcome> train_segmentation(const Dataset<SegItem>& data, const SegmentConfig& config,
                                                   std::uint64_t seed, const std::string& config_json,
                                                   const Checkpoint* pretrained = nullptr,
                                                   std::optional<std::vector<std::size_t>> fold_of = std::nullopt) {
  if (data.size() < config.folds) {
    throw std::invalid_argument("train_segmentation: " + std::to_string(data.size()) + " items cannot fill " +
                                std::to_string(config.folds) + " folds");
  }
  const auto folds = fold_of ? *fold_of : kfold_indices(data.size(), config.folds, CounterRng(seed, stream_id("data.kfold")));
  std::vector<FoldOutcome> out;
  for (std::size_t k = 0; k < config.folds; ++k) out.push_back(train_fold(data, folds, int(k), config, seed, config_json, pretrained));
  return out;
}

}  // namespace hemaseg
