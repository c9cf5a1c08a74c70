#pragma once

#include <cmath>
#include <cstdio>
#include <cstdint>
#include <map>
#include <numbers>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hemaseg/nn/module.hpp"

namespace hemaseg {

struct AdamConfig {
  double lr_peak = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("adam.beta1: must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam.beta2: must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("adam.eps: must be positive");
    if (!(lr_peak > 0.0)) throw ConfigError("adam.lr_peak: must be positive");
  }
};

/// Per-parameter Adam moments. The step counter is per parameter so that a
/// parameter unfrozen mid-run starts its own bias correction from step 1.
template <typename T>
struct AdamSlot {
  Tensor<T> m;
  Tensor<T> v;
  std::uint64_t step = 0;
};

/// Bias-corrected Adam without weight decay. Frozen parameters and parameters
/// without a gradient are skipped, moments included.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig config) : config_((config.validate(), config)) {}

  [[nodiscard]] const AdamConfig& config() const { return config_; }
  [[nodiscard]] std::map<std::string, AdamSlot<T>>& slots() { return slots_; }
  [[nodiscard]] const std::map<std::string, AdamSlot<T>>& slots() const { return slots_; }

  void step(const std::vector<nn::NamedParameter<T>>& params, double lr) {
    if (!(lr >= 0.0)) throw std::invalid_argument("adam: learning rate must be non-negative");
    for (const auto& [name, p] : params) {
      if (p->frozen || p->grad.empty()) continue;
      if (p->grad.shape() != p->shape) throw_shape_mismatch("adam(" + name + ")", p->shape, p->grad.shape());
      AdamSlot<T>& s = slots_[name];
      if (s.m.empty()) {
        s.m = Tensor<T>(p->shape);
        s.v = Tensor<T>(p->shape);
      }
      ++s.step;
      const double b1 = config_.beta1, b2 = config_.beta2;
      const double c1 = 1.0 - std::pow(b1, double(s.step));
      const double c2 = 1.0 - std::pow(b2, double(s.step));
      T* w = p->value.ptr();
      const T* g = p->grad.ptr();
      T* m = s.m.ptr();
      T* v = s.v.ptr();
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const double gi = g[i];
        const double mi = b1 * double(m[i]) + (1.0 - b1) * gi;
        const double vi = b2 * double(v[i]) + (1.0 - b2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double mhat = mi / c1, vhat = vi / c2;
        w[i] = static_cast<T>(double(w[i]) - lr * mhat / (std::sqrt(vhat) + config_.eps));
      }
    }
  }

 private:
  AdamConfig config_;
  std::map<std::string, AdamSlot<T>> slots_;
};

namespace detail {
/// Cosine interpolation from `from` (pct = 0) to `to` (pct = 1).
inline double cosine_anneal(double from, double to, double pct) {
  return to + (from - to) * 0.5 * (1.0 + std::cos(std::numbers::pi * pct));
}
}  // namespace detail

/// One-cycle schedule in optimizer steps: cosine ramp factor·peak -> peak over
/// the first warmup_frac of the run, then cosine decay back to factor·peak.
inline double lr_onecycle_fraction(std::size_t step, std::size_t total_steps, double lr_peak = 1e-3,
                                   double factor = 0.01, double warmup_frac = 0.1) {
  if (total_steps == 0) throw std::invalid_argument("lr_onecycle_fraction: total_steps must be positive");
  if (step > total_steps) {
    throw std::out_of_range("lr_onecycle_fraction: step " + std::to_string(step) + " beyond total " +
                            std::to_string(total_steps));
  }
  if (!(warmup_frac > 0.0 && warmup_frac < 1.0)) throw std::invalid_argument("lr_onecycle_fraction: warmup must be in (0, 1)");
  const double low = factor * lr_peak;
  const double warmup = warmup_frac * double(total_steps);
  const double t = double(step);
  if (t <= warmup) return detail::cosine_anneal(low, lr_peak, t / warmup);
  return detail::cosine_anneal(lr_peak, low, (t - warmup) / (double(total_steps) - warmup));
}

/// Piecewise one-cycle schedule in epochs: cosine ramp factor·peak -> peak over
/// [0, warmup], cosine decay peak -> floor over [warmup, decay_end], then floor.
inline double lr_onecycle_piecewise(double epoch, double lr_peak = 1e-3, double floor_lr = 1e-5,
                                    double warmup_epochs = 10, double decay_end_epoch = 100,
                                    double total_epochs = 200, double factor = 0.01) {
  if (epoch < 0.0) throw std::out_of_range("lr_onecycle_piecewise: negative epoch");
  if (epoch > total_epochs) throw std::out_of_range("lr_onecycle_piecewise: epoch beyond total");
  if (!(warmup_epochs > 0.0 && warmup_epochs < decay_end_epoch)) {
    throw std::invalid_argument("lr_onecycle_piecewise: need 0 < warmup < decay_end");
  }
  if (epoch <= warmup_epochs) return detail::cosine_anneal(factor * lr_peak, lr_peak, epoch / warmup_epochs);
  if (epoch <= decay_end_epoch) {
    return detail::cosine_anneal(lr_peak, floor_lr, (epoch - warmup_epochs) / (decay_end_epoch - warmup_epochs));
  }
  return floor_lr;
}

enum class ScheduleKind { onecycle_fraction, onecycle_piecewise };

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::onecycle_fraction;
  double lr_peak = 1e-3;
  double factor = 0.01;
  double warmup_frac = 0.1;          // fraction schedule
  double warmup_epochs = 10;         // piecewise schedule
  double decay_end_epoch = 100;      // piecewise schedule
  double total_epochs = 200;         // piecewise schedule
  double floor_lr = 1e-5;            // piecewise schedule

  void validate() const {
    if (!(lr_peak > 0.0)) throw ConfigError("schedule.lr_peak: must be positive");
    if (!(factor > 0.0 && factor <= 1.0)) throw ConfigError("schedule.factor: must lie in (0, 1]");
    if (kind == ScheduleKind::onecycle_fraction && !(warmup_frac > 0.0 && warmup_frac < 1.0)) {
      throw ConfigError("schedule.warmup_frac: must lie in (0, 1)");
    }
    if (kind == ScheduleKind::onecycle_piecewise) {
      if (!(warmup_epochs > 0.0 && warmup_epochs < decay_end_epoch && decay_end_epoch <= total_epochs)) {
        throw ConfigError("schedule.warmup_epochs: need 0 < warmup < decay_end <= total");
      }
      if (!(floor_lr > 0.0 && floor_lr <= lr_peak)) throw ConfigError("schedule.floor_lr: must lie in (0, lr_peak]");
    }
  }

  /// `t` is an optimizer step (fraction) or an epoch (piecewise).
  [[nodiscard]] double lr(std::size_t t, std::size_t total_steps) const {
    if (kind == ScheduleKind::onecycle_fraction) return lr_onecycle_fraction(t, total_steps, lr_peak, factor, warmup_frac);
    return lr_onecycle_piecewise(double(t), lr_peak, floor_lr, warmup_epochs, decay_end_epoch, total_epochs, factor);
  }
};

/// Writes "step,lr" rows for t = 0..total.
inline void write_schedule_csv(std::ostream& os, const ScheduleSpec& spec, std::size_t total) {
  os << "step,lr\n";
  char buf[64];
  for (std::size_t t = 0; t <= total; ++t) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", t, spec.lr(t, total));
    os << buf;
  }
}

}  // namespace hemaseg
