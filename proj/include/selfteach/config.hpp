// SPDX-License-Identifier: Apache-2.0
#pragma once

// Experiment configuration and its JSON form. Every section is optional in
// the file; missing keys keep the defaults below, unknown keys are rejected.

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "selfteach/data.hpp"
#include "selfteach/losses.hpp"
#include "selfteach/network.hpp"
#include "selfteach/optimizer.hpp"
#include "selfteach/trainer.hpp"

namespace selfteach {

using json = nlohmann::ordered_json;

struct DatasetRef {
  std::size_t n_sequences = 0;
  std::uint64_t seed = 0;
  DomainShift shift;
};

struct DataConfig {
  std::string dir = "data"; // relative to the output directory
  std::size_t classes = 10;
  std::size_t dim = 8;
  std::size_t length = 64;
  double markov_stay_prob = 0.9;
  double noise_sigma = 1.0;
  double means_scale = 1.0;
  std::uint64_t means_seed = 1234;
  std::vector<double> class_means; // classes*dim row-major; empty draws them
  DatasetRef train{1000, 11, {}};
  DatasetRef test_in{200, 22, {}};
  DatasetRef test_shift{200, 22, {ShiftKind::covariate, {}, 1.25, 1.0}};

  Tensor2<double> means() const {
    if (class_means.empty()) return make_class_means(classes, dim, means_scale, means_seed);
    require(class_means.size() == classes * dim, ErrorCode::configuration,
            "data.class_means must hold classes*dim values");
    return Tensor2<double>(classes, dim, class_means);
  }

  DatasetSpec spec_for(const DatasetRef &ref) const {
    DatasetSpec s;
    s.classes = classes;
    s.dim = dim;
    s.length = length;
    s.n_sequences = ref.n_sequences;
    s.markov_stay_prob = markov_stay_prob;
    s.class_means = means();
    s.noise_sigma = noise_sigma;
    s.shift = ref.shift;
    if (s.shift.kind == ShiftKind::covariate && s.shift.offset.empty())
      s.shift.offset.assign(dim, 0.5);
    s.seed = ref.seed;
    return s;
  }
};

struct ModelConfig {
  std::size_t layers = 6;
  std::size_t cell = 16;
  std::size_t proj = 8;
  std::size_t aux_layer = 0; // 0 selects ceil(layers / 2)
  bool share_head = false;
};

struct TeacherConfig {
  std::string checkpoint;     // empty trains a baseline teacher in-process
  std::size_t epochs = 0;     // 0 reuses optimizer.epochs
  std::uint64_t seed_offset = 1000;
};

struct CompareConfig {
  std::vector<LossVariant> variants = {LossVariant::baseline, LossVariant::label_smoothing,
                                       LossVariant::confidence_penalty,
                                       LossVariant::self_teach_with_h,
                                       LossVariant::self_teach_no_h};
  std::vector<double> lambdas = {0.001, 0.005, 0.01, 0.02};
  std::size_t jobs = 1;
};

struct GradcheckConfig {
  StackSpec spec{3, 3, 4, 3, 4, true, 1, false};
  double lambda = 0.5;
  std::uint64_t seed = 1;
};

enum class Precision { f32, f64 };

inline Precision parse_precision(const std::string &s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  fail(ErrorCode::configuration, "precision must be f32 or f64, got '" + s + "'");
}
inline const char *to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

struct ExperimentConfig {
  std::string out_dir = "runs/default";
  Precision precision = Precision::f64;
  std::vector<std::uint64_t> seeds = {1};
  bool report_wall_time = false;
  DataConfig data;
  ModelConfig model;
  LossConfig loss;
  OptimizerConfig optimizer;
  TbpttConfig tbptt;
  TeacherConfig teacher;
  CompareConfig compare;
  GradcheckConfig gradcheck;

  /// Stack for a given loss variant. The auxiliary head exists only for the
  /// self-teaching variants.
  StackSpec stack_spec(LossVariant variant) const {
    StackSpec s;
    s.layers = model.layers;
    s.input_dim = data.dim;
    s.cell = model.cell;
    s.proj = model.proj;
    s.classes = data.classes;
    s.aux_head = uses_aux_head(variant);
    s.aux_layer = model.aux_layer;
    s.share_head = model.share_head && s.aux_head;
    return s;
  }

  std::filesystem::path data_dir() const {
    std::filesystem::path d(data.dir);
    return d.is_absolute() ? d : std::filesystem::path(out_dir) / d;
  }

  void validate() const {
    require(!seeds.empty(), ErrorCode::configuration, "seed list is empty");
    require(data.classes >= 1 && data.dim >= 1 && data.length >= 1, ErrorCode::configuration,
            "data dimensions must be positive");
    loss.validate();
    optimizer.validate();
    tbptt.validate();
    stack_spec(loss.variant).validate();
    require(!compare.variants.empty(), ErrorCode::configuration, "compare.variants is empty");
    require(compare.jobs >= 1, ErrorCode::configuration, "compare.jobs must be >= 1");
    for (double l : compare.lambdas)
      require(l >= 0.0, ErrorCode::configuration, "compare.lambdas must be nonnegative");
  }
};

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

namespace detail {

inline void check_keys(const json &j, std::initializer_list<const char *> allowed,
                       const std::string &section) {
  require(j.is_object(), ErrorCode::configuration, "'" + section + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char *a : allowed) ok = ok || it.key() == a;
    require(ok, ErrorCode::configuration,
            "unknown key '" + it.key() + "' in " + (section.empty() ? "config" : section));
  }
}

template <typename T> void read(const json &j, const char *key, T &out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception &e) {
    fail(ErrorCode::configuration, std::string("bad value for '") + key + "': " + e.what());
  }
}

inline json shift_to_json(const DomainShift &s) {
  json j;
  switch (s.kind) {
  case ShiftKind::none: j["kind"] = "none"; break;
  case ShiftKind::covariate:
    j["kind"] = "covariate";
    j["offset"] = s.offset;
    j["scale"] = s.scale;
    break;
  case ShiftKind::noise:
    j["kind"] = "noise";
    j["sigma_multiplier"] = s.sigma_multiplier;
    break;
  }
  return j;
}

inline DomainShift shift_from_json(const json &j) {
  check_keys(j, {"kind", "offset", "scale", "sigma_multiplier"}, "shift");
  DomainShift s;
  std::string kind = "none";
  read(j, "kind", kind);
  if (kind == "none") s.kind = ShiftKind::none;
  else if (kind == "covariate") s.kind = ShiftKind::covariate;
  else if (kind == "noise") s.kind = ShiftKind::noise;
  else fail(ErrorCode::configuration, "shift.kind must be none, covariate or noise");
  read(j, "offset", s.offset);
  read(j, "scale", s.scale);
  read(j, "sigma_multiplier", s.sigma_multiplier);
  return s;
}

inline json ref_to_json(const DatasetRef &r) {
  json j;
  j["n_sequences"] = r.n_sequences;
  j["seed"] = r.seed;
  j["shift"] = shift_to_json(r.shift);
  return j;
}

inline DatasetRef ref_from_json(const json &j, DatasetRef r, const std::string &name) {
  check_keys(j, {"n_sequences", "seed", "shift"}, "data." + name);
  read(j, "n_sequences", r.n_sequences);
  read(j, "seed", r.seed);
  if (j.contains("shift")) r.shift = shift_from_json(j.at("shift"));
  return r;
}

} // namespace detail

inline json to_json(const ExperimentConfig &c) {
  json j;
  j["out_dir"] = c.out_dir;
  j["precision"] = to_string(c.precision);
  j["seeds"] = c.seeds;
  j["report_wall_time"] = c.report_wall_time;

  auto &d = j["data"];
  d["dir"] = c.data.dir;
  d["classes"] = c.data.classes;
  d["dim"] = c.data.dim;
  d["length"] = c.data.length;
  d["markov_stay_prob"] = c.data.markov_stay_prob;
  d["noise_sigma"] = c.data.noise_sigma;
  d["means_scale"] = c.data.means_scale;
  d["means_seed"] = c.data.means_seed;
  if (!c.data.class_means.empty()) d["class_means"] = c.data.class_means;
  d["train"] = detail::ref_to_json(c.data.train);
  d["test_in"] = detail::ref_to_json(c.data.test_in);
  d["test_shift"] = detail::ref_to_json(c.data.test_shift);

  auto &m = j["model"];
  m["layers"] = c.model.layers;
  m["cell"] = c.model.cell;
  m["proj"] = c.model.proj;
  m["aux_layer"] = c.model.aux_layer;
  m["share_head"] = c.model.share_head;

  auto &l = j["loss"];
  l["variant"] = std::string(to_string(c.loss.variant));
  l["lambda"] = c.loss.lambda;
  l["aux_layer"] = c.loss.aux_layer;
  l["smoothing_prior"] = c.loss.smoothing_prior;
  l["teacher_ground_truth"] = c.loss.teacher_ground_truth;

  auto &o = j["optimizer"];
  o["kind"] = std::string(to_string(c.optimizer.kind));
  o["learning_rate"] = c.optimizer.learning_rate;
  o["momentum"] = c.optimizer.momentum;
  o["beta1"] = c.optimizer.beta1;
  o["beta2"] = c.optimizer.beta2;
  o["epsilon"] = c.optimizer.epsilon;
  o["epochs"] = c.optimizer.epochs;
  o["batch_size"] = c.optimizer.batch_size;

  j["tbptt"] = {{"chunk_len", c.tbptt.chunk_len}, {"carry_state", c.tbptt.carry_state}};
  j["teacher"] = {{"checkpoint", c.teacher.checkpoint},
                  {"epochs", c.teacher.epochs},
                  {"seed_offset", c.teacher.seed_offset}};

  auto &cmp = j["compare"];
  cmp["variants"] = json::array();
  for (auto v : c.compare.variants) cmp["variants"].push_back(std::string(to_string(v)));
  cmp["lambdas"] = c.compare.lambdas;
  cmp["jobs"] = c.compare.jobs;

  const auto &g = c.gradcheck.spec;
  j["gradcheck"] = {{"layers", g.layers},     {"input_dim", g.input_dim}, {"cell", g.cell},
                    {"proj", g.proj},         {"classes", g.classes},     {"aux_layer", g.aux_layer},
                    {"lambda", c.gradcheck.lambda}, {"seed", c.gradcheck.seed}};
  return j;
}

inline ExperimentConfig config_from_json(const json &j) {
  using detail::read;
  detail::check_keys(j,
                     {"out_dir", "precision", "seeds", "report_wall_time", "data", "model", "loss",
                      "optimizer", "tbptt", "teacher", "compare", "gradcheck"},
                     "");
  ExperimentConfig c;
  read(j, "out_dir", c.out_dir);
  if (j.contains("precision")) c.precision = parse_precision(j.at("precision").get<std::string>());
  read(j, "seeds", c.seeds);
  read(j, "report_wall_time", c.report_wall_time);

  if (j.contains("data")) {
    const auto &d = j.at("data");
    detail::check_keys(d,
                       {"dir", "classes", "dim", "length", "markov_stay_prob", "noise_sigma",
                        "means_scale", "means_seed", "class_means", "train", "test_in",
                        "test_shift"},
                       "data");
    read(d, "dir", c.data.dir);
    read(d, "classes", c.data.classes);
    read(d, "dim", c.data.dim);
    read(d, "length", c.data.length);
    read(d, "markov_stay_prob", c.data.markov_stay_prob);
    read(d, "noise_sigma", c.data.noise_sigma);
    read(d, "means_scale", c.data.means_scale);
    read(d, "means_seed", c.data.means_seed);
    read(d, "class_means", c.data.class_means);
    if (d.contains("train")) c.data.train = detail::ref_from_json(d.at("train"), c.data.train, "train");
    if (d.contains("test_in"))
      c.data.test_in = detail::ref_from_json(d.at("test_in"), c.data.test_in, "test_in");
    if (d.contains("test_shift"))
      c.data.test_shift = detail::ref_from_json(d.at("test_shift"), c.data.test_shift, "test_shift");
  }
  if (j.contains("model")) {
    const auto &m = j.at("model");
    detail::check_keys(m, {"layers", "cell", "proj", "aux_layer", "share_head"}, "model");
    read(m, "layers", c.model.layers);
    read(m, "cell", c.model.cell);
    read(m, "proj", c.model.proj);
    read(m, "aux_layer", c.model.aux_layer);
    read(m, "share_head", c.model.share_head);
  }
  if (j.contains("loss")) {
    const auto &l = j.at("loss");
    detail::check_keys(l, {"variant", "lambda", "aux_layer", "smoothing_prior", "teacher_ground_truth"},
                       "loss");
    if (l.contains("variant")) c.loss.variant = parse_variant(l.at("variant").get<std::string>());
    read(l, "lambda", c.loss.lambda);
    read(l, "aux_layer", c.loss.aux_layer);
    read(l, "smoothing_prior", c.loss.smoothing_prior);
    read(l, "teacher_ground_truth", c.loss.teacher_ground_truth);
  }
  if (j.contains("optimizer")) {
    const auto &o = j.at("optimizer");
    detail::check_keys(o,
                       {"kind", "learning_rate", "momentum", "beta1", "beta2", "epsilon", "epochs",
                        "batch_size"},
                       "optimizer");
    if (o.contains("kind")) c.optimizer.kind = parse_optimizer(o.at("kind").get<std::string>());
    read(o, "learning_rate", c.optimizer.learning_rate);
    read(o, "momentum", c.optimizer.momentum);
    read(o, "beta1", c.optimizer.beta1);
    read(o, "beta2", c.optimizer.beta2);
    read(o, "epsilon", c.optimizer.epsilon);
    read(o, "epochs", c.optimizer.epochs);
    read(o, "batch_size", c.optimizer.batch_size);
  }
  if (j.contains("tbptt")) {
    const auto &t = j.at("tbptt");
    detail::check_keys(t, {"chunk_len", "carry_state"}, "tbptt");
    read(t, "chunk_len", c.tbptt.chunk_len);
    read(t, "carry_state", c.tbptt.carry_state);
  }
  if (j.contains("teacher")) {
    const auto &t = j.at("teacher");
    detail::check_keys(t, {"checkpoint", "epochs", "seed_offset"}, "teacher");
    read(t, "checkpoint", c.teacher.checkpoint);
    read(t, "epochs", c.teacher.epochs);
    read(t, "seed_offset", c.teacher.seed_offset);
  }
  if (j.contains("compare")) {
    const auto &cmp = j.at("compare");
    detail::check_keys(cmp, {"variants", "lambdas", "jobs"}, "compare");
    if (cmp.contains("variants")) {
      c.compare.variants.clear();
      for (const auto &v : cmp.at("variants")) c.compare.variants.push_back(parse_variant(v.get<std::string>()));
    }
    read(cmp, "lambdas", c.compare.lambdas);
    read(cmp, "jobs", c.compare.jobs);
  }
  if (j.contains("gradcheck")) {
    const auto &g = j.at("gradcheck");
    detail::check_keys(g, {"layers", "input_dim", "cell", "proj", "classes", "aux_layer", "lambda", "seed"},
                       "gradcheck");
    read(g, "layers", c.gradcheck.spec.layers);
    read(g, "input_dim", c.gradcheck.spec.input_dim);
    read(g, "cell", c.gradcheck.spec.cell);
    read(g, "proj", c.gradcheck.spec.proj);
    read(g, "classes", c.gradcheck.spec.classes);
    read(g, "aux_layer", c.gradcheck.spec.aux_layer);
    read(g, "lambda", c.gradcheck.lambda);
    read(g, "seed", c.gradcheck.seed);
  }
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io, "cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::parse_error &e) {
    fail(ErrorCode::configuration, "config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

inline void save_config(const ExperimentConfig &c, const std::filesystem::path &path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write '" + path.string() + "'");
  out << to_json(c).dump(2) << '\n';
}

} // namespace selfteach
