#include <CLI11.hpp>

#include "tqn/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Temporal query network experiments on synthetic sequences", "tqn"};
  app.footer(tqn::kExitCodeTable);
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("tqn ") + TQN_VERSION);

  tqn::CommandOptions opt;
  std::string out;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "experiment JSON")->required();
    sub->add_option("--out", out, "output directory, overriding output_dir");
    sub->add_option("--seed-override", opt.seed_overrides, "replace a seed, e.g. train=7 (repeatable)");
  };

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic benchmark");
  add_common(gen);

  auto* train = app.add_subcommand("train", "train one model with the two-stage schedule");
  add_common(train);
  train->add_flag("--resume", opt.resume, "continue from checkpoint.bin in the output directory");
  std::size_t max_epochs = 0;
  auto* max_opt = train->add_option("--max-epochs", max_epochs, "stop after this many epochs (resumable)");

  std::string checkpoint;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint, "defaults to checkpoint.bin in the output directory");

  auto* attend = app.add_subcommand("attend", "export per-query attention over clips");
  add_common(attend);
  attend->add_option("--checkpoint", checkpoint, "defaults to checkpoint.bin in the output directory");
  attend->add_option("--id", opt.ids, "sequence id (repeatable)")->required();

  std::string run_dir;
  auto* report = app.add_subcommand("report", "tabulate finished runs and evaluate comparison gates");
  report->add_option("run_dir", run_dir, "directory holding one subdirectory per run")->required();

  std::size_t seeds = 20;
  auto* grad = app.add_subcommand("grad-check", "finite-difference gradient checks");
  grad->add_option("--seeds", seeds, "random decoder configurations")->check(CLI::PositiveNumber);

  std::string queries, classes;
  auto* schema = app.add_subcommand("validate-schema", "check a query and class CSV pair");
  schema->add_option("--queries", queries)->required();
  schema->add_option("--classes", classes)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? tqn::kExitOk : tqn::kExitConfig;
  }

  if (!out.empty()) opt.out = out;
  if (!checkpoint.empty()) opt.checkpoint = checkpoint;
  if (max_opt->count() > 0) opt.max_epochs = max_epochs;

  if (gen->parsed()) return tqn::cmd_gen_data(opt);
  if (train->parsed()) return tqn::cmd_train(opt);
  if (eval->parsed()) return tqn::cmd_eval(opt);
  if (attend->parsed()) return tqn::cmd_attend(opt);
  if (report->parsed()) return tqn::cmd_report(run_dir, std::cout);
  if (grad->parsed()) return tqn::cmd_grad_check(seeds, std::cout);
  if (schema->parsed()) return tqn::cmd_validate_schema(queries, classes, std::cout);
  return tqn::kExitUnexpected;
}
