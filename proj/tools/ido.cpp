// ido: train / eval / reference / study from an INI config.
//
// Exit codes: 0 ok, 1 other failure, 2 config error, 3 numerical abort.

#include "ido/cli.hpp"

#include <CLI11.hpp>

int main(int argc, char** argv) {
  CLI::App app{"Iterative diffusion optimisation experiments"};
  app.require_subcommand(1);

  std::string config;
  std::string checkpoint;

  auto* train = app.add_subcommand("train", "train a control; writes train.csv and checkpoint.txt");
  train->add_option("config", config, "experiment config (.ini)")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a control; writes eval.csv");
  eval->add_option("config", config, "experiment config (.ini)")->required();
  eval->add_option("--checkpoint", checkpoint, "checkpoint to evaluate (overrides [eval] checkpoint)");

  auto* reference = app.add_subcommand("reference", "export the preset's reference solution");
  reference->add_option("config", config, "experiment config (.ini)")->required();

  auto* study = app.add_subcommand("study", "tensorisation, gradient variance or y0 sweep study");
  study->add_option("config", config, "experiment config (.ini)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : ido::cli::kConfigError;
  }

  if (train->parsed()) return ido::cli::cmd_train(config);
  if (eval->parsed()) return ido::cli::cmd_eval(config, checkpoint);
  if (reference->parsed()) return ido::cli::cmd_reference(config);
  return ido::cli::cmd_study(config);
}
