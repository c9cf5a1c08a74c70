#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "hemaseg/hemaseg.hpp"

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::vector<std::size_t> grid_p, grid_f;
  std::vector<double> grid_r;
  std::optional<std::size_t> folds;
  std::optional<std::string> pretrained;
  std::optional<std::size_t> freeze_epochs;
};

hemaseg::RunConfig resolve(const Overrides& o, const std::string& mode) {
  hemaseg::RunConfig cfg = o.config.empty() ? hemaseg::RunConfig{} : hemaseg::load_config(o.config);
  cfg.mode = mode;
  if (o.seed) cfg.seed = *o.seed;
  if (o.out) cfg.out = *o.out;
  if (!o.grid_p.empty()) cfg.sweep.grid_p = o.grid_p;
  if (!o.grid_r.empty()) cfg.sweep.grid_r = o.grid_r;
  if (!o.grid_f.empty()) cfg.sweep.grid_f = o.grid_f;
  if (o.folds) cfg.segment.folds = *o.folds;
  if (o.pretrained) {
    cfg.segment.pretrained = *o.pretrained;
    cfg.segment.unetr.encoder_init = hemaseg::EncoderInit::pretrained;
    if (!o.freeze_epochs) cfg.segment.unetr.freeze_epochs = std::min<std::size_t>(100, cfg.segment.epochs);
  }
  if (o.freeze_epochs) cfg.segment.unetr.freeze_epochs = *o.freeze_epochs;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked-autoencoder pre-training and sparse-label segmentation of multi-channel blood images"};
  app.require_subcommand(1);
  Overrides o;
  app.add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "RNG seed");
  app.add_option("--out", o.out, "Output directory");
  app.add_option("--grid-p", o.grid_p, "Sweep patch sizes")->delimiter(',');
  app.add_option("--grid-r", o.grid_r, "Sweep mask ratios")->delimiter(',');
  app.add_option("--grid-f", o.grid_f, "Sweep feature sizes")->delimiter(',');
  app.add_option("--folds", o.folds, "Cross-validation folds");
  app.add_option("--pretrained", o.pretrained, "MAE checkpoint for the UNETR encoder");
  app.add_option("--freeze-epochs", o.freeze_epochs, "Epochs with the encoder frozen");

  auto* pretrain = app.add_subcommand("pretrain", "MAE pre-training");
  bool resume = false;
  pretrain->add_flag("--resume", resume, "Continue from the checkpoint in the output directory");
  auto* train = app.add_subcommand("train-seg", "UNETR training with k-fold cross-validation");
  auto* eval = app.add_subcommand("eval", "Score a checkpoint and export images");
  std::string checkpoint;
  eval->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate")->required()->check(CLI::ExistingFile);
  auto* sweep = app.add_subcommand("sweep", "Patch size / mask ratio / feature size sweep");
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic labeled dataset and manifest");
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every autodiff primitive");
  for (auto* s : {pretrain, train, eval, sweep, gen, grad}) s->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    if (grad->parsed()) return hemaseg::cmd_gradcheck(std::cout) == 0 ? 0 : 1;
    const std::string mode = app.get_subcommands().front()->get_name();
    const hemaseg::RunConfig cfg = resolve(o, mode);
    if (pretrain->parsed()) hemaseg::cmd_pretrain(cfg, std::cout, resume);
    if (train->parsed()) hemaseg::cmd_train_seg(cfg, std::cout);
    if (eval->parsed()) hemaseg::cmd_eval(cfg, checkpoint, std::cout);
    if (sweep->parsed()) hemaseg::cmd_sweep(cfg, std::cout);
    if (gen->parsed()) hemaseg::cmd_gen_data(cfg, std::cout);
  } catch (const hemaseg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
