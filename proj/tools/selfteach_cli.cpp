// SPDX-License-Identifier: Apache-2.0
//
// selfteach: generate data, train, evaluate, gradient-check and compare
// self-teaching LSTM stacks against the regularization baselines.
//
// Exit codes: 0 success, 1 user/config error, 2 numerical failure.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "selfteach/config.hpp"
#include "selfteach/experiment.hpp"

namespace {

using namespace selfteach;

constexpr int kOk = 0;
constexpr int kUserError = 1;
constexpr int kNumericalError = 2;

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string precision;
};

void add_common(CLI::App *cmd, CommonOptions &opts) {
  cmd->add_option("--config", opts.config_path, "Experiment config (JSON)");
  cmd->add_option("--seed", opts.seed, "Run only this seed (overrides the seed list)");
  cmd->add_option("--out", opts.out_dir, "Output directory (overrides out_dir)");
  cmd->add_option("--precision", opts.precision, "Arithmetic precision")
      ->check(CLI::IsMember({"f32", "f64"}));
}

ExperimentConfig resolve_config(const CommonOptions &opts) {
  ExperimentConfig cfg = opts.config_path.empty() ? ExperimentConfig{} : load_config(opts.config_path);
  if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
  if (!opts.precision.empty()) cfg.precision = parse_precision(opts.precision);
  if (opts.seed) cfg.seeds = {*opts.seed};
  return cfg;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Self-teaching network training laboratory"};
  app.require_subcommand(1);

  CommonOptions common;

  auto *gen = app.add_subcommand("gen-data", "Write train/test_in/test_shift STDS1 datasets");
  add_common(gen, common);

  auto *trn = app.add_subcommand("train", "Train one model per seed; writes metrics.csv and checkpoint.stck");
  add_common(trn, common);
  std::string resume;
  trn->add_option("--resume", resume, "Continue from a checkpoint written by train");

  auto *evl = app.add_subcommand("eval", "Evaluate a checkpoint on the configured datasets");
  add_common(evl, common);
  std::string checkpoint;
  evl->add_option("--checkpoint", checkpoint, "STCK1 checkpoint")->required();

  auto *gck = app.add_subcommand("gradcheck", "Finite-difference check of every loss variant");
  add_common(gck, common);
  bool inject_fault = false;
  gck->add_flag("--inject-gradient-fault", inject_fault,
                "Perturb the analytic gradient (negative control; must fail)");

  auto *cmp = app.add_subcommand("compare", "Run every (variant, lambda, seed) and summarize");
  add_common(cmp, common);
  std::optional<std::size_t> jobs;
  cmp->add_option("--jobs", jobs, "Parallel training runs");

  auto *prm = app.add_subcommand("params", "Print training and inference parameter counts");
  add_common(prm, common);
  std::string preset;
  prm->add_option("--preset", preset, "Named architecture")
      ->check(CLI::IsMember({"small", "large"}));
  std::optional<std::size_t> layers, input_dim, cell, proj, classes, aux_layer;
  bool no_aux = false;
  prm->add_option("--layers", layers);
  prm->add_option("--input-dim", input_dim);
  prm->add_option("--cell", cell);
  prm->add_option("--proj", proj);
  prm->add_option("--classes", classes);
  prm->add_option("--aux-layer", aux_layer);
  prm->add_flag("--no-aux", no_aux, "Count without the auxiliary head");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    return app.exit(e) == 0 ? kOk : kUserError; // --help exits 0
  }

  try {
    auto cfg = resolve_config(common);

    if (*gen) {
      const auto paths = cmd_gen_data(cfg);
      std::cout << "wrote " << paths.train.string() << "\n      " << paths.test_in.string()
                << "\n      " << paths.test_shift.string() << "\n";
      return kOk;
    }
    if (*trn) {
      std::optional<std::filesystem::path> resume_path;
      if (!resume.empty()) resume_path = resume;
      const auto rows = cmd_train(cfg, common.seed, resume_path);
      std::cout << kMetricsHeader << "\n";
      for (const auto &r : rows) std::cout << r.csv() << "\n";
      return kOk;
    }
    if (*evl) {
      std::cout << cmd_eval(cfg, checkpoint).csv();
      return kOk;
    }
    if (*gck) {
      const auto s = cmd_gradcheck(cfg, inject_fault);
      std::cout << s.text << (s.pass ? "gradcheck: PASS\n" : "gradcheck: FAIL\n");
      return s.pass ? kOk : kNumericalError;
    }
    if (*cmp) {
      if (jobs) cfg.compare.jobs = *jobs;
      const auto r = cmd_compare(cfg);
      std::cout << kSummaryHeader << "\n";
      for (const auto &row : r.summary) std::cout << row.csv() << "\n";
      std::cout << r.report;
      if (r.any_failed) {
        std::cerr << "some runs failed; see " << cfg.out_dir << "/runs.csv\n";
        return kNumericalError;
      }
      return kOk;
    }
    if (*prm) {
      StackSpec spec = cfg.stack_spec(LossVariant::self_teach_with_h);
      if (preset == "small") spec = {6, 80, 1024, 512, 9404, true, 3, false};
      if (preset == "large") spec = {6, 80, 1800, 600, 9404, true, 3, false};
      if (layers) spec.layers = *layers;
      if (input_dim) spec.input_dim = *input_dim;
      if (cell) spec.cell = *cell;
      if (proj) spec.proj = *proj;
      if (classes) spec.classes = *classes;
      if (aux_layer) spec.aux_layer = *aux_layer;
      if (no_aux || spec.layers < 2) spec.aux_head = false;
      std::cout << params_report(spec);
      return kOk;
    }
  } catch (const Error &e) {
    std::cerr << "error (" << to_string(e.code()) << "): " << e.what() << "\n";
    return e.code() == ErrorCode::numerical ? kNumericalError : kUserError;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUserError;
  }
  return kOk;
}
