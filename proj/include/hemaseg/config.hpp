#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hemaseg/mae.hpp"
#include "hemaseg/optim.hpp"
#include "hemaseg/unetr.hpp"

namespace hemaseg {

using Json = nlohmann::ordered_json;

struct DataConfig {
  std::string manifest;  // on-disk dataset; empty means synthetic, generated on demand
  std::size_t pretrain_sources = 23040;
  std::size_t source_size = 256;
  std::size_t tile_size = 64;
  std::size_t segment_images = 2383;
  double label_fraction = 0.023;
  double train_frac = 0.8;
  double val_frac = 0.1;
  double test_frac = 0.1;

  void validate() const {
    if (tile_size == 0 || source_size % tile_size != 0) {
      throw ConfigError("data.source_size: must be a multiple of data.tile_size");
    }
    if (!(label_fraction > 0.0 && label_fraction <= 1.0)) throw ConfigError("data.label_fraction: must lie in (0, 1]");
    if (train_frac < 0 || val_frac < 0 || test_frac < 0 || std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9) {
      throw ConfigError("data.train_frac: split fractions must be non-negative and sum to 1");
    }
  }
};

struct PretrainConfig {
  MAEConfig mae;
  AdamConfig adam{.lr_peak = 1e-3, .beta1 = 0.9, .beta2 = 0.95, .eps = 1e-8};
  double lr_factor = 0.01;
  double warmup_frac = 0.1;
  std::size_t epochs = 100;
  std::size_t batch = 16;

  [[nodiscard]] ScheduleSpec schedule() const {
    ScheduleSpec s;
    s.kind = ScheduleKind::onecycle_fraction;
    s.lr_peak = adam.lr_peak;
    s.factor = lr_factor;
    s.warmup_frac = warmup_frac;
    return s;
  }

  void validate() const {
    mae.validate();
    adam.validate();
    schedule().validate();
    if (epochs == 0) throw ConfigError("pretrain.epochs: must be positive");
    if (batch == 0) throw ConfigError("pretrain.batch: must be positive");
  }
};

struct SegmentConfig {
  UNETRConfig unetr;
  AdamConfig adam;
  double lr_factor = 0.01;
  double warmup_epochs = 10;
  double decay_end_epoch = 100;
  double floor_lr = 1e-5;
  std::size_t epochs = 200;
  std::size_t batch = 64;
  std::size_t folds = 5;
  std::string pretrained;  // MAE checkpoint path

  [[nodiscard]] ScheduleSpec schedule() const {
    ScheduleSpec s;
    s.kind = ScheduleKind::onecycle_piecewise;
    s.lr_peak = adam.lr_peak;
    s.factor = lr_factor;
    s.warmup_epochs = warmup_epochs;
    s.decay_end_epoch = decay_end_epoch;
    s.total_epochs = double(epochs);
    s.floor_lr = floor_lr;
    return s;
  }

  void validate() const {
    unetr.validate();
    adam.validate();
    schedule().validate();
    if (epochs == 0) throw ConfigError("segment.epochs: must be positive");
    if (batch == 0) throw ConfigError("segment.batch: must be positive");
    if (folds < 2) throw ConfigError("segment.folds: need at least 2");
    if (unetr.freeze_epochs > epochs) throw ConfigError("segment.freeze_epochs: exceeds segment.epochs");
    if (unetr.encoder_init == EncoderInit::pretrained && pretrained.empty()) {
      throw ConfigError("segment.pretrained: a checkpoint path is required for pretrained initialization");
    }
  }
};

struct SweepConfig {
  std::vector<std::size_t> grid_p = {2, 4, 8};
  std::vector<double> grid_r = {0.5, 0.75, 0.9};
  std::vector<std::size_t> grid_f = {16, 32, 64, 128, 256, 512};

  void validate() const {
    if (grid_p.empty() || grid_f.empty()) throw ConfigError("sweep.grid_p: grid must be nonempty");
    for (double r : grid_r) {
      if (!(r > 0.0 && r < 1.0)) throw ConfigError("sweep.grid_r: mask ratios must lie strictly between 0 and 1");
    }
  }
};

struct ExportConfig {
  std::vector<std::size_t> rgb_channels = {12, 13, 14};
  std::size_t max_images = 8;

  void validate() const {
    if (rgb_channels.size() != 3) throw ConfigError("export.rgb_channels: exactly 3 channels required");
    for (auto c : rgb_channels) {
      if (c >= kNumChannels) throw ConfigError("export.rgb_channels: channel out of range");
    }
  }
};

struct RunConfig {
  std::string mode;
  std::uint64_t seed = 0;
  std::string out = "out";
  DataConfig data;
  PretrainConfig pretrain;
  SegmentConfig segment;
  SweepConfig sweep;
  ExportConfig export_;

  void validate() const {
    static const std::set<std::string> modes = {"", "pretrain", "train-seg", "eval", "sweep", "gen-data", "gradcheck"};
    if (!modes.contains(mode)) throw ConfigError("mode: unknown mode '" + mode + "'");
    data.validate();
    pretrain.validate();
    segment.validate();
    sweep.validate();
    export_.validate();
    if (pretrain.mae.vit.image_size != data.tile_size || segment.unetr.vit.image_size != data.tile_size) {
      throw ConfigError("data.tile_size: must equal the model image_size");
    }
  }
};

// ---------------------------------------------------------------------------
// JSON conversion. Reading is strict: unknown keys and wrong types are errors
// naming the offending field.

namespace cfg {

inline void check_keys(const Json& j, const std::string& path, std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ConfigError((path.empty() ? "config" : path) + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError((path.empty() ? "" : path + ".") + key + ": unknown field");
  }
}

template <typename V>
void get(const Json& j, const std::string& path, const char* key, V& out) {
  if (!j.contains(key)) return;
  const std::string field = (path.empty() ? "" : path + ".") + key;
  try {
    if constexpr (std::is_same_v<V, std::size_t> || std::is_same_v<V, std::uint64_t>) {
      if (!j.at(key).is_number_unsigned()) throw ConfigError(field + ": expected a non-negative integer");
    }
    out = j.at(key).template get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(field + ": " + e.what());
  }
}

inline std::string join(const std::string& path, const char* key) { return path.empty() ? key : path + "." + key; }

inline Json to_json(const ViTConfig& c) {
  return Json{{"image_size", c.image_size}, {"channels", c.channels},   {"patch_size", c.patch_size},
              {"embed_dim", c.embed_dim},   {"mlp_dim", c.mlp_dim},     {"num_layers", c.num_layers},
              {"num_heads", c.num_heads},   {"layernorm_eps", c.layernorm_eps}, {"use_cls_token", c.use_cls_token}};
}

inline void from_json(const Json& j, const std::string& path, ViTConfig& c) {
  check_keys(j, path, {"image_size", "channels", "patch_size", "embed_dim", "mlp_dim", "num_layers", "num_heads",
                       "layernorm_eps", "use_cls_token"});
  get(j, path, "image_size", c.image_size);
  get(j, path, "channels", c.channels);
  get(j, path, "patch_size", c.patch_size);
  get(j, path, "embed_dim", c.embed_dim);
  get(j, path, "mlp_dim", c.mlp_dim);
  get(j, path, "num_layers", c.num_layers);
  get(j, path, "num_heads", c.num_heads);
  get(j, path, "layernorm_eps", c.layernorm_eps);
  get(j, path, "use_cls_token", c.use_cls_token);
}

inline Json to_json(const AdamConfig& c) {
  return Json{{"lr", c.lr_peak}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}};
}

inline void from_json(const Json& j, const std::string& path, AdamConfig& c) {
  check_keys(j, path, {"lr", "beta1", "beta2", "eps"});
  get(j, path, "lr", c.lr_peak);
  get(j, path, "beta1", c.beta1);
  get(j, path, "beta2", c.beta2);
  get(j, path, "eps", c.eps);
}

inline Json to_json(const MAEConfig& c) {
  Json j{{"vit", to_json(c.vit)},
         {"mask_ratio", c.mask_ratio},
         {"norm_pix", c.norm_pix},
         {"loss_on_masked_only", c.loss_on_masked_only},
         {"loss", c.loss == ReconstructionLoss::l1 ? "l1" : "l2"},
         {"symmetric", c.symmetric}};
  if (!c.symmetric) j["decoder"] = to_json(c.decoder);
  return j;
}

inline void from_json(const Json& j, const std::string& path, MAEConfig& c) {
  check_keys(j, path, {"vit", "decoder", "mask_ratio", "norm_pix", "loss_on_masked_only", "loss", "symmetric"});
  if (j.contains("vit")) from_json(j["vit"], join(path, "vit"), c.vit);
  if (j.contains("decoder")) from_json(j["decoder"], join(path, "decoder"), c.decoder);
  get(j, path, "mask_ratio", c.mask_ratio);
  get(j, path, "norm_pix", c.norm_pix);
  get(j, path, "loss_on_masked_only", c.loss_on_masked_only);
  get(j, path, "symmetric", c.symmetric);
  std::string loss = c.loss == ReconstructionLoss::l1 ? "l1" : "l2";
  get(j, path, "loss", loss);
  if (loss == "l1") {
    c.loss = ReconstructionLoss::l1;
  } else if (loss == "l2") {
    c.loss = ReconstructionLoss::l2;
  } else {
    throw ConfigError(join(path, "loss") + ": expected \"l1\" or \"l2\"");
  }
}

inline Json to_json(const UNETRConfig& c) {
  Json j{{"vit", to_json(c.vit)},
         {"feature_size", c.feature_size},
         {"num_classes", c.num_classes},
         {"encoder_init", c.encoder_init == EncoderInit::random ? "random" : "pretrained"},
         {"freeze_epochs", c.freeze_epochs}};
  if (!c.taps_override.empty()) j["taps"] = c.taps_override;
  return j;
}

inline void from_json(const Json& j, const std::string& path, UNETRConfig& c) {
  check_keys(j, path, {"vit", "feature_size", "num_classes", "encoder_init", "freeze_epochs", "taps"});
  if (j.contains("vit")) from_json(j["vit"], join(path, "vit"), c.vit);
  get(j, path, "feature_size", c.feature_size);
  get(j, path, "num_classes", c.num_classes);
  get(j, path, "freeze_epochs", c.freeze_epochs);
  get(j, path, "taps", c.taps_override);
  std::string init = c.encoder_init == EncoderInit::random ? "random" : "pretrained";
  get(j, path, "encoder_init", init);
  if (init == "random") {
    c.encoder_init = EncoderInit::random;
  } else if (init == "pretrained") {
    c.encoder_init = EncoderInit::pretrained;
  } else {
    throw ConfigError(join(path, "encoder_init") + ": expected \"random\" or \"pretrained\"");
  }
}

inline Json to_json(const DataConfig& c) {
  return Json{{"manifest", c.manifest},
              {"pretrain_sources", c.pretrain_sources},
              {"source_size", c.source_size},
              {"tile_size", c.tile_size},
              {"segment_images", c.segment_images},
              {"label_fraction", c.label_fraction},
              {"train_frac", c.train_frac},
              {"val_frac", c.val_frac},
              {"test_frac", c.test_frac}};
}

inline void from_json(const Json& j, const std::string& path, DataConfig& c) {
  check_keys(j, path, {"manifest", "pretrain_sources", "source_size", "tile_size", "segment_images", "label_fraction",
                       "train_frac", "val_frac", "test_frac"});
  get(j, path, "manifest", c.manifest);
  get(j, path, "pretrain_sources", c.pretrain_sources);
  get(j, path, "source_size", c.source_size);
  get(j, path, "tile_size", c.tile_size);
  get(j, path, "segment_images", c.segment_images);
  get(j, path, "label_fraction", c.label_fraction);
  get(j, path, "train_frac", c.train_frac);
  get(j, path, "val_frac", c.val_frac);
  get(j, path, "test_frac", c.test_frac);
}

inline Json to_json(const PretrainConfig& c) {
  return Json{{"mae", to_json(c.mae)},         {"adam", to_json(c.adam)}, {"lr_factor", c.lr_factor},
              {"warmup_frac", c.warmup_frac}, {"epochs", c.epochs},      {"batch", c.batch}};
}

inline void from_json(const Json& j, const std::string& path, PretrainConfig& c) {
  check_keys(j, path, {"mae", "adam", "lr_factor", "warmup_frac", "epochs", "batch"});
  if (j.contains("mae")) from_json(j["mae"], join(path, "mae"), c.mae);
  if (j.contains("adam")) from_json(j["adam"], join(path, "adam"), c.adam);
  get(j, path, "lr_factor", c.lr_factor);
  get(j, path, "warmup_frac", c.warmup_frac);
  get(j, path, "epochs", c.epochs);
  get(j, path, "batch", c.batch);
}

inline Json to_json(const SegmentConfig& c) {
  return Json{{"unetr", to_json(c.unetr)},
              {"adam", to_json(c.adam)},
              {"lr_factor", c.lr_factor},
              {"warmup_epochs", c.warmup_epochs},
              {"decay_end_epoch", c.decay_end_epoch},
              {"floor_lr", c.floor_lr},
              {"epochs", c.epochs},
              {"batch", c.batch},
              {"folds", c.folds},
              {"pretrained", c.pretrained}};
}

inline void from_json(const Json& j, const std::string& path, SegmentConfig& c) {
  check_keys(j, path, {"unetr", "adam", "lr_factor", "warmup_epochs", "decay_end_epoch", "floor_lr", "epochs", "batch",
                       "folds", "pretrained"});
  if (j.contains("unetr")) from_json(j["unetr"], join(path, "unetr"), c.unetr);
  if (j.contains("adam")) from_json(j["adam"], join(path, "adam"), c.adam);
  get(j, path, "lr_factor", c.lr_factor);
  get(j, path, "warmup_epochs", c.warmup_epochs);
  get(j, path, "decay_end_epoch", c.decay_end_epoch);
  get(j, path, "floor_lr", c.floor_lr);
  get(j, path, "epochs", c.epochs);
  get(j, path, "batch", c.batch);
  get(j, path, "folds", c.folds);
  get(j, path, "pretrained", c.pretrained);
}

inline Json to_json(const SweepConfig& c) {
  return Json{{"grid_p", c.grid_p}, {"grid_r", c.grid_r}, {"grid_f", c.grid_f}};
}

inline void from_json(const Json& j, const std::string& path, SweepConfig& c) {
  check_keys(j, path, {"grid_p", "grid_r", "grid_f"});
  get(j, path, "grid_p", c.grid_p);
  get(j, path, "grid_r", c.grid_r);
  get(j, path, "grid_f", c.grid_f);
}

inline Json to_json(const ExportConfig& c) {
  return Json{{"rgb_channels", c.rgb_channels}, {"max_images", c.max_images}};
}

inline void from_json(const Json& j, const std::string& path, ExportConfig& c) {
  check_keys(j, path, {"rgb_channels", "max_images"});
  get(j, path, "rgb_channels", c.rgb_channels);
  get(j, path, "max_images", c.max_images);
}

}  // namespace cfg

inline Json to_json(const RunConfig& c) {
  return Json{{"mode", c.mode},
              {"seed", c.seed},
              {"out", c.out},
              {"data", cfg::to_json(c.data)},
              {"pretrain", cfg::to_json(c.pretrain)},
              {"segment", cfg::to_json(c.segment)},
              {"sweep", cfg::to_json(c.sweep)},
              {"export", cfg::to_json(c.export_)}};
}

/// Overlays `j` on `c`; absent keys keep their current values.
inline void apply_json(const Json& j, RunConfig& c) {
  cfg::check_keys(j, "", {"mode", "seed", "out", "data", "pretrain", "segment", "sweep", "export"});
  cfg::get(j, "", "mode", c.mode);
  cfg::get(j, "", "seed", c.seed);
  cfg::get(j, "", "out", c.out);
  if (j.contains("data")) cfg::from_json(j["data"], "data", c.data);
  if (j.contains("pretrain")) cfg::from_json(j["pretrain"], "pretrain", c.pretrain);
  if (j.contains("segment")) cfg::from_json(j["segment"], "segment", c.segment);
  if (j.contains("sweep")) cfg::from_json(j["sweep"], "sweep", c.sweep);
  if (j.contains("export")) cfg::from_json(j["export"], "export", c.export_);
}

inline RunConfig parse_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  RunConfig c;
  apply_json(j, c);
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

inline std::string dump_config(const RunConfig& c) { return to_json(c).dump(2); }

}  // namespace hemaseg
