// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "selfteach/checkpoint.hpp"
#include "selfteach/config.hpp"
#include "selfteach/data.hpp"
#include "selfteach/trainer.hpp"

namespace selfteach {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

inline std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

inline std::string fmt_lambda(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

inline constexpr const char *kMetricsHeader =
    "epoch,variant,lambda,aux_layer,seed,train_ce,test_in_ce,test_in_fer,test_shift_ce,"
    "test_shift_fer,wall_seconds";

inline constexpr const char *kSummaryHeader =
    "variant,lambda,runs,failed,status,test_in_ce_mean,test_in_ce_std,test_in_fer_mean,"
    "test_in_fer_std,test_shift_ce_mean,test_shift_ce_std,test_shift_fer_mean,test_shift_fer_std";

struct MetricsRow {
  std::size_t epoch = 0;
  LossVariant variant = LossVariant::baseline;
  double lambda = 0;
  std::size_t aux_layer = 0;
  std::uint64_t seed = 0;
  double train_ce = 0;
  EvalMetrics test_in;
  EvalMetrics test_shift;
  double wall_seconds = 0;

  std::string csv() const {
    std::ostringstream os;
    os << epoch << ',' << to_string(variant) << ',' << fmt_lambda(lambda) << ',' << aux_layer << ','
       << seed << ',' << fmt_real(train_ce) << ',' << fmt_real(test_in.frame_cross_entropy) << ','
       << fmt_real(test_in.frame_error_rate) << ',' << fmt_real(test_shift.frame_cross_entropy)
       << ',' << fmt_real(test_shift.frame_error_rate) << ',' << fmt_real(wall_seconds);
    return os.str();
  }
};

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct DataPaths {
  fs::path train, test_in, test_shift;
};

inline DataPaths data_paths(const ExperimentConfig &cfg) {
  const auto d = cfg.data_dir();
  return {d / "train.stds", d / "test_in.stds", d / "test_shift.stds"};
}

inline DataPaths cmd_gen_data(const ExperimentConfig &cfg) {
  const auto paths = data_paths(cfg);
  const auto train_spec = cfg.data.spec_for(cfg.data.train);
  const auto in_spec = cfg.data.spec_for(cfg.data.test_in);
  const auto shift_spec = cfg.data.spec_for(cfg.data.test_shift);
  // Validate all three before touching the filesystem.
  train_spec.validate();
  in_spec.validate();
  shift_spec.validate();
  fs::create_directories(cfg.data_dir());
  save(generate(train_spec), paths.train);
  save(generate(in_spec), paths.test_in);
  save(generate(shift_spec), paths.test_shift);
  return paths;
}

struct Datasets {
  Dataset train, test_in, test_shift;
};

inline Dataset load_required(const fs::path &p) {
  if (!fs::exists(p))
    fail(ErrorCode::io, "dataset '" + p.string() + "' not found; run gen-data with this config first");
  return load(p);
}

inline Datasets load_datasets(const ExperimentConfig &cfg) {
  const auto p = data_paths(cfg);
  return {load_required(p.train), load_required(p.test_in), load_required(p.test_shift)};
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct RunSpec {
  LossConfig loss;
  std::uint64_t seed = 1;
  fs::path dir;
  std::optional<fs::path> resume;
};

struct RunOutcome {
  bool ok = true;
  std::string status = "ok";
  std::optional<MetricsRow> final_row;
};

namespace detail {

inline void write_text(const fs::path &p, const std::string &s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write '" + p.string() + "'");
  out << s;
}

template <typename Real>
StackParams<Real> obtain_teacher(const ExperimentConfig &cfg, const Dataset &train_data,
                                 std::uint64_t seed, const fs::path &run_dir) {
  if (!cfg.teacher.checkpoint.empty()) {
    auto ck = load_checkpoint(cfg.teacher.checkpoint);
    auto t = get_params<Real>(ck);
    return t.spec.has_aux() ? t.without_aux() : t;
  }
  OptimizerConfig opt = cfg.optimizer;
  opt.seed = seed + cfg.teacher.seed_offset;
  if (cfg.teacher.epochs) opt.epochs = cfg.teacher.epochs;
  const auto spec = cfg.stack_spec(LossVariant::baseline);
  LossConfig base;
  auto result = train(init_params<Real>(spec, opt.seed), train_data, base, opt, cfg.tbptt);
  Checkpoint ck;
  put_params(ck, result.state.params);
  save_checkpoint(ck, run_dir / "teacher.stck");
  return std::move(result.state.params);
}

template <typename Real> RunOutcome run_training(const ExperimentConfig &cfg, const Datasets &data,
                                                 const RunSpec &run) {
  const auto spec = cfg.stack_spec(run.loss.variant);
  OptimizerConfig opt = cfg.optimizer;
  opt.seed = run.seed;
  fs::create_directories(run.dir);

  std::optional<StackParams<Real>> teacher;
  if (uses_teacher(run.loss.variant))
    teacher = obtain_teacher<Real>(cfg, data.train, run.seed, run.dir);

  TrainState<Real> state;
  std::string csv;
  if (run.resume) {
    state = train_state_from_checkpoint<Real>(load_checkpoint(*run.resume));
    require(state.params.spec == spec, ErrorCode::configuration,
            "resume checkpoint architecture does not match the config");
    const auto prev = run.dir / "metrics.csv";
    if (fs::exists(prev)) {
      std::ifstream in(prev, std::ios::binary);
      std::stringstream ss;
      ss << in.rdbuf();
      csv = ss.str();
    }
  } else {
    state = TrainState<Real>(init_params<Real>(spec, run.seed), run.seed);
  }
  if (csv.empty()) csv = std::string(kMetricsHeader) + "\n";

  const auto t0 = std::chrono::steady_clock::now();
  MetricsRow last;
  auto hook = [&](const EpochMetrics &m, const TrainState<Real> &st) {
    MetricsRow row;
    row.epoch = m.epoch;
    row.variant = run.loss.variant;
    row.lambda = run.loss.variant == LossVariant::baseline ? 0.0 : run.loss.lambda;
    row.aux_layer = uses_aux_head(run.loss.variant) ? spec.resolved_aux_layer() : 0;
    row.seed = run.seed;
    row.train_ce = m.train_ce;
    row.test_in = evaluate(st.params, data.test_in);
    row.test_shift = evaluate(st.params, data.test_shift);
    if (cfg.report_wall_time)
      row.wall_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    csv += row.csv() + "\n";
    last = row;
  };

  RunOutcome outcome;
  try {
    train_epochs(state, data.train, run.loss, opt, cfg.tbptt, teacher ? &*teacher : nullptr,
                 EpochHook<Real>(hook));
  } catch (const Error &e) {
    write_text(run.dir / "metrics.csv", csv);
    throw;
  }
  write_text(run.dir / "metrics.csv", csv);
  save_checkpoint(to_checkpoint(state), run.dir / "checkpoint.stck");
  if (last.epoch == 0) {
    // Resumed a run that had already finished: report the stored state.
    last.epoch = state.epoch;
    last.variant = run.loss.variant;
    last.lambda = run.loss.variant == LossVariant::baseline ? 0.0 : run.loss.lambda;
    last.aux_layer = uses_aux_head(run.loss.variant) ? spec.resolved_aux_layer() : 0;
    last.seed = run.seed;
    last.test_in = evaluate(state.params, data.test_in);
    last.test_shift = evaluate(state.params, data.test_shift);
  }
  outcome.final_row = last;
  return outcome;
}

} // namespace detail

/// Trains one model per configured seed (or only `seed_override`) into
/// <out_dir>/seed-<n>/ and returns the final metrics of each.
inline std::vector<MetricsRow> cmd_train(const ExperimentConfig &cfg,
                                         std::optional<std::uint64_t> seed_override = {},
                                         std::optional<fs::path> resume = {}) {
  cfg.validate();
  const auto data = load_datasets(cfg);
  save_config(cfg, fs::path(cfg.out_dir) / "config.json");
  std::vector<std::uint64_t> seeds = seed_override ? std::vector{*seed_override} : cfg.seeds;
  require(!resume || seeds.size() == 1, ErrorCode::configuration,
          "--resume needs a single seed (use --seed)");
  std::vector<MetricsRow> rows;
  for (auto seed : seeds) {
    RunSpec run{cfg.loss, seed, fs::path(cfg.out_dir) / ("seed-" + std::to_string(seed)), resume};
    const auto out = cfg.precision == Precision::f32 ? detail::run_training<float>(cfg, data, run)
                                                     : detail::run_training<double>(cfg, data, run);
    rows.push_back(*out.final_row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalReport {
  EvalMetrics train, test_in, test_shift;

  std::string csv() const {
    std::ostringstream os;
    os << "dataset,frame_ce,frame_error_rate\n";
    os << "train," << fmt_real(train.frame_cross_entropy) << ',' << fmt_real(train.frame_error_rate) << '\n';
    os << "test_in," << fmt_real(test_in.frame_cross_entropy) << ','
       << fmt_real(test_in.frame_error_rate) << '\n';
    os << "test_shift," << fmt_real(test_shift.frame_cross_entropy) << ','
       << fmt_real(test_shift.frame_error_rate) << '\n';
    return os.str();
  }
};

inline EvalReport cmd_eval(const ExperimentConfig &cfg, const fs::path &checkpoint) {
  const auto data = load_datasets(cfg);
  const auto ck = load_checkpoint(checkpoint);
  auto run = [&]<typename Real>() {
    const auto model = get_params<Real>(ck);
    return EvalReport{evaluate(model, data.train), evaluate(model, data.test_in),
                      evaluate(model, data.test_shift)};
  };
  return cfg.precision == Precision::f32 ? run.template operator()<float>()
                                         : run.template operator()<double>();
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct GradcheckSummary {
  bool pass = true;
  std::string text;
};

inline GradcheckSummary cmd_gradcheck(const ExperimentConfig &cfg, bool inject_fault = false) {
  GradcheckSummary out;
  std::ostringstream os;
  const auto counts = param_count(cfg.gradcheck.spec);
  require(counts.training <= 10000, ErrorCode::configuration,
          "gradcheck refuses a stack with " + std::to_string(counts.training) +
              " parameters; the limit is 10000");
  for (auto v : kAllVariants) {
    LossConfig loss;
    loss.variant = v;
    loss.lambda = cfg.gradcheck.lambda;
    loss.teacher_ground_truth = cfg.loss.teacher_ground_truth;
    StackSpec spec = cfg.gradcheck.spec;
    spec.aux_head = uses_aux_head(v) || spec.aux_head;
    GradcheckOptions opts;
    if (inject_fault)
      opts.corrupt = [](StackGradients<double> &g) { g.params.out.b[0] += 0.5; };
    const auto rep = gradcheck(spec, loss, cfg.gradcheck.seed, opts);
    os << to_string(v) << ": " << (rep.pass ? "PASS" : "FAIL") << " worst_rel=" << rep.worst
       << " worst_abs=" << rep.worst_abs << '\n';
    for (const auto &b : rep.blocks)
      os << "  " << b.name << " " << b.max_rel_error << (b.pass ? "" : "  <-- FAIL") << '\n';
    out.pass = out.pass && rep.pass;
  }
  out.text = os.str();
  return out;
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

struct CompareCell {
  LossVariant variant;
  double lambda;
  std::uint64_t seed;
};

struct CompareRunResult {
  CompareCell cell;
  RunOutcome outcome;
};

struct SummaryRow {
  LossVariant variant;
  double lambda = 0;
  std::size_t runs = 0, failed = 0;
  double mean[4] = {0, 0, 0, 0}; // test_in_ce, test_in_fer, test_shift_ce, test_shift_fer
  double sd[4] = {0, 0, 0, 0};

  std::string csv() const {
    std::ostringstream os;
    os << to_string(variant) << ',' << fmt_lambda(lambda) << ',' << runs << ',' << failed << ','
       << (failed == 0 ? "ok" : (failed == runs ? "failed" : "partial"));
    for (int k = 0; k < 4; ++k) os << ',' << fmt_real(mean[k]) << ',' << fmt_real(sd[k]);
    return os.str();
  }
};

struct CompareResult {
  std::vector<CompareRunResult> runs;
  std::vector<SummaryRow> summary;
  std::string report;
  bool any_failed = false;
};

/// Baseline once per seed, every other variant once per (lambda, seed).
inline std::vector<CompareCell> compare_cells(const ExperimentConfig &cfg) {
  std::vector<CompareCell> cells;
  for (auto v : kAllVariants) {
    if (std::find(cfg.compare.variants.begin(), cfg.compare.variants.end(), v) ==
        cfg.compare.variants.end())
      continue;
    const std::vector<double> lambdas =
        v == LossVariant::baseline ? std::vector<double>{0.0} : cfg.compare.lambdas;
    for (double l : lambdas)
      for (auto s : cfg.seeds) cells.push_back({v, l, s});
  }
  return cells;
}

namespace detail {

inline void mean_sd(const std::vector<double> &xs, double &mean, double &sd) {
  mean = sd = 0;
  if (xs.empty()) return;
  for (double x : xs) mean += x;
  mean /= double(xs.size());
  if (xs.size() < 2) return;
  double ss = 0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  sd = std::sqrt(ss / double(xs.size() - 1));
}

inline std::string direction_report(const ExperimentConfig &cfg, const CompareResult &r) {
  std::ostringstream os;
  auto find = [&](LossVariant v, double l, std::uint64_t s) -> const MetricsRow * {
    for (const auto &run : r.runs)
      if (run.cell.variant == v && run.cell.lambda == l && run.cell.seed == s && run.outcome.ok)
        return &*run.outcome.final_row;
    return nullptr;
  };
  os << "Shifted-domain direction check (frame cross-entropy)\n";
  os << "seeds: " << cfg.seeds.size() << "\n";
  for (auto v : {LossVariant::self_teach_with_h, LossVariant::self_teach_no_h}) {
    const SummaryRow *best = nullptr;
    for (const auto &row : r.summary)
      if (row.variant == v && row.failed < row.runs && (!best || row.mean[0] < best->mean[0]))
        best = &row;
    if (!best) continue;
    std::size_t wins = 0, compared = 0;
    for (auto s : cfg.seeds) {
      const auto *st = find(v, best->lambda, s);
      const auto *base = find(LossVariant::baseline, 0.0, s);
      if (!st || !base) continue;
      ++compared;
      wins += st->test_shift.frame_cross_entropy <= base->test_shift.frame_cross_entropy;
    }
    if (compared == 0) continue;
    const bool holds = compared >= 5 ? wins >= 3 : 2 * wins > compared;
    os << to_string(v) << ": best lambda (by mean test_in_ce) = " << fmt_lambda(best->lambda)
       << "; shifted CE <= baseline in " << wins << "/" << compared << " seeds; expectation "
       << (holds ? "met" : "NOT met") << "\n";
  }
  return os.str();
}

} // namespace detail

inline CompareResult cmd_compare(const ExperimentConfig &cfg) {
  cfg.validate();
  const auto data = load_datasets(cfg);
  const fs::path out(cfg.out_dir);
  save_config(cfg, out / "config.json");
  const auto cells = compare_cells(cfg);
  require(!cells.empty(), ErrorCode::configuration, "compare has nothing to run");

  CompareResult result;
  result.runs.resize(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const auto &c = cells[i];
      LossConfig loss = cfg.loss;
      loss.variant = c.variant;
      loss.lambda = c.lambda;
      if (uses_aux_head(c.variant)) loss.aux_layer = 0;
      RunSpec run{loss, c.seed,
                  out / "runs" / std::string(to_string(c.variant)) /
                      ("lambda-" + fmt_lambda(c.lambda)) / ("seed-" + std::to_string(c.seed)),
                  {}};
      CompareRunResult rr{c, {}};
      try {
        rr.outcome = cfg.precision == Precision::f32 ? detail::run_training<float>(cfg, data, run)
                                                     : detail::run_training<double>(cfg, data, run);
      } catch (const Error &e) {
        rr.outcome.ok = false;
        rr.outcome.status = std::string("failed (") + to_string(e.code()) + "): " + e.what();
      }
      result.runs[i] = std::move(rr);
    }
  };
  const std::size_t jobs = std::min(cfg.compare.jobs, cells.size());
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto &t : pool) t.join();
  }

  // Aggregate in cell order, which is already (variant, lambda, seed).
  std::string runs_csv = "variant,lambda,seed,status,test_in_ce,test_in_fer,test_shift_ce,test_shift_fer\n";
  for (const auto &r : result.runs) {
    runs_csv += std::string(to_string(r.cell.variant)) + "," + fmt_lambda(r.cell.lambda) + "," +
                std::to_string(r.cell.seed) + ",";
    if (r.outcome.ok) {
      const auto &m = *r.outcome.final_row;
      runs_csv += "ok," + fmt_real(m.test_in.frame_cross_entropy) + "," +
                  fmt_real(m.test_in.frame_error_rate) + "," +
                  fmt_real(m.test_shift.frame_cross_entropy) + "," +
                  fmt_real(m.test_shift.frame_error_rate) + "\n";
    } else {
      std::string status = r.outcome.status;
      for (auto &ch : status)
        if (ch == ',' || ch == '\n') ch = ';';
      runs_csv += "\"" + status + "\",,,,\n";
      result.any_failed = true;
    }
  }

  for (std::size_t i = 0; i < result.runs.size();) {
    const auto v = result.runs[i].cell.variant;
    const double l = result.runs[i].cell.lambda;
    SummaryRow row{v, l};
    std::vector<double> cols[4];
    for (; i < result.runs.size() && result.runs[i].cell.variant == v &&
           result.runs[i].cell.lambda == l;
         ++i) {
      ++row.runs;
      const auto &o = result.runs[i].outcome;
      if (!o.ok) {
        ++row.failed;
        continue;
      }
      cols[0].push_back(o.final_row->test_in.frame_cross_entropy);
      cols[1].push_back(o.final_row->test_in.frame_error_rate);
      cols[2].push_back(o.final_row->test_shift.frame_cross_entropy);
      cols[3].push_back(o.final_row->test_shift.frame_error_rate);
    }
    for (int k = 0; k < 4; ++k) detail::mean_sd(cols[k], row.mean[k], row.sd[k]);
    result.summary.push_back(row);
  }

  std::string summary_csv = std::string(kSummaryHeader) + "\n";
  for (const auto &row : result.summary) summary_csv += row.csv() + "\n";
  result.report = detail::direction_report(cfg, result);
  detail::write_text(out / "runs.csv", runs_csv);
  detail::write_text(out / "summary.csv", summary_csv);
  detail::write_text(out / "report.txt", result.report);
  return result;
}

// ---------------------------------------------------------------------------
// params
// ---------------------------------------------------------------------------

inline std::string params_report(const StackSpec &spec) {
  const auto c = param_count(spec);
  std::ostringstream os;
  os << "layers=" << spec.layers << " input_dim=" << spec.input_dim << " cell=" << spec.cell
     << " proj=" << spec.proj << " classes=" << spec.classes
     << " aux=" << (spec.has_aux() ? std::to_string(spec.resolved_aux_layer()) : "none") << '\n'
     << "training_params=" << c.training << '\n'
     << "inference_params=" << c.inference << '\n';
  return os.str();
}

} // namespace selfteach
