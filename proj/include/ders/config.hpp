// SPDX-License-Identifier: Apache-2.0
#pragma once

// Experiment configuration: one JSON document, unknown keys rejected, every
// seed explicit. Sections are optional at parse time; a subcommand demands
// the ones it needs.
//
// {
//   "dtype": "f64",
//   "task":          { "kind": "cluster_regression", ..., "seed": 1 },
//   "pretrain_task": { ...task keys, merged over "task"... },
//   "model":         { "d": 32, "d_h": 128, "depth": 2, "activation": "gelu", "embed": true, "seed": 2 },
//   "pretrain":      { ...train keys..., "seed": 3 },
//   "upcycle":       { "method": "vanilla", "n_experts": 4, ..., "seed": 4 },
//   "train":         { "steps": 1000, "batch_size": 64, "lr": 0.001, ..., "seed": 5 },
//   "compress":      { "technique": "sparsify", "drop_rate": 0.9, ..., "seed": 6 },
//   "sweep":         { "sparse_rates": [...], "ranks": [...], "drop_rates": [...], "bit_widths": [...] },
//   "output":        { "dir": "runs/demo" }
// }

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "ders/compress.hpp"
#include "ders/task.hpp"
#include "ders/train.hpp"
#include "ders/upcycle.hpp"

namespace ders {

struct ModelSpec {
  std::size_t d = 32;
  std::size_t d_h = 128;
  std::size_t depth = 2;
  Activation activation = Activation::gelu;
  bool embed = true;
  std::uint64_t seed = 0;
};

struct SweepSpec {
  std::vector<double> sparse_rates{0.9, 0.99, 0.999};
  std::vector<std::size_t> ranks{1, 4, 16};
  std::vector<double> drop_rates{0.5, 0.9, 0.99};
  std::vector<unsigned> bit_widths{1, 2, 4, 8};
};

struct ExperimentConfig {
  Dtype dtype = Dtype::f64;
  std::optional<TaskParams> task;
  std::optional<TaskParams> pretrain_task;  // task with overrides applied
  std::optional<ModelSpec> model;
  std::optional<TrainConfig> pretrain;
  std::optional<UpcycleConfig> upcycle;
  std::optional<TrainConfig> train;
  std::optional<CompressionSpec> compress;
  std::optional<SweepSpec> sweep;
  std::optional<std::string> output_dir;
};

namespace detail {

using json = nlohmann::json;

class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  const json* raw(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string at(const char* key) const { return path_ + "." + key; }

  void count(const char* key, std::size_t& out) {
    if (const json* v = raw(key)) {
      if (!v->is_number_unsigned()) throw ConfigError(at(key) + ": expected a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void number(const char* key, double& out) {
    if (const json* v = raw(key)) {
      if (!v->is_number()) throw ConfigError(at(key) + ": expected a number");
      out = v->get<double>();
    }
  }
  void number(const char* key, std::optional<double>& out) {
    if (const json* v = raw(key)) {
      if (v->is_null()) return;
      if (!v->is_number()) throw ConfigError(at(key) + ": expected a number");
      out = v->get<double>();
    }
  }
  void flag(const char* key, bool& out) {
    if (const json* v = raw(key)) {
      if (!v->is_boolean()) throw ConfigError(at(key) + ": expected true or false");
      out = v->get<bool>();
    }
  }
  void seed(std::uint64_t& out, bool required = true) {
    const json* v = raw("seed");
    if (!v) {
      if (required) throw ConfigError(at("seed") + ": missing (seeds are mandatory)");
      return;
    }
    if (!v->is_number_unsigned()) throw ConfigError(at("seed") + ": expected a non-negative integer");
    out = v->get<std::uint64_t>();
  }
  template <typename E>
  void choice(const char* key, E& out, const std::map<std::string, E>& options) {
    const json* v = raw(key);
    if (!v) return;
    std::string allowed;
    for (const auto& [k, _] : options) allowed += (allowed.empty() ? "" : ", ") + k;
    if (!v->is_string()) throw ConfigError(at(key) + ": expected one of {" + allowed + "}");
    auto it = options.find(v->get<std::string>());
    if (it == options.end())
      throw ConfigError(at(key) + ": unknown value \"" + v->get<std::string>() + "\"; expected one of {" +
                        allowed + "}");
    out = it->second;
  }
  template <typename T>
  void list(const char* key, std::vector<T>& out) {
    const json* v = raw(key);
    if (!v) return;
    if (!v->is_array()) throw ConfigError(at(key) + ": expected an array");
    out.clear();
    for (std::size_t i = 0; i < v->size(); ++i) {
      const json& e = (*v)[i];
      const std::string ep = at(key) + "[" + std::to_string(i) + "]";
      if constexpr (std::is_floating_point_v<T>) {
        if (!e.is_number()) throw ConfigError(ep + ": expected a number");
      } else {
        if (!e.is_number_unsigned()) throw ConfigError(ep + ": expected a non-negative integer");
      }
      out.push_back(e.get<T>());
    }
  }

  /// Rejects keys that no reader asked for.
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(path_ + ": unknown key \"" + it.key() + "\"");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename Fn>
void with_path(const std::string& path, Fn fn) {
  try {
    fn();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    throw ConfigError(msg.rfind(path, 0) == 0 ? msg : path + ": " + msg);
  }
}

inline void read_task(Fields& f, TaskParams& t, bool seed_required) {
  f.choice<TaskKind>("kind", t.kind,
                     {{"cluster_regression", TaskKind::cluster_regression},
                      {"modular_classification", TaskKind::modular_classification}});
  f.count("input_dim", t.input_dim);
  f.count("output_dim", t.output_dim);
  f.count("n_clusters", t.n_clusters);
  f.number("center_scale", t.center_scale);
  f.number("cluster_spread", t.cluster_spread);
  f.number("map_gain", t.map_gain);
  f.number("shift", t.shift);
  f.number("specialization", t.specialization);
  f.number("noise", t.noise);
  f.count("modulus", t.modulus);
  f.count("n_train", t.n_train);
  f.count("n_eval", t.n_eval);
  f.seed(t.seed, seed_required);
  f.finish();
}

inline TrainConfig read_train(const json& j, const std::string& path) {
  TrainConfig c;
  Fields f(j, path);
  f.count("steps", c.steps);
  f.count("batch_size", c.batch_size);
  f.number("lr", c.lr);
  f.choice<OptimizerKind>("optimizer", c.optimizer,
                          {{"sgd", OptimizerKind::sgd}, {"adam", OptimizerKind::adam}});
  f.number("beta1", c.beta1);
  f.number("beta2", c.beta2);
  f.number("eps", c.eps);
  f.choice<LrSchedule>("schedule", c.schedule,
                       {{"constant", LrSchedule::constant},
                        {"cosine", LrSchedule::cosine},
                        {"linear", LrSchedule::linear}});
  f.number("aux_loss_coeff", c.aux_loss_coeff);
  f.count("eval_every", c.eval_every);
  f.seed(c.seed);
  f.finish();
  with_path(path, [&] { validate_train_config(c); });
  return c;
}

inline const std::map<std::string, UpcycleMethod>& method_names() {
  static const std::map<std::string, UpcycleMethod> m{{"vanilla", UpcycleMethod::vanilla},
                                                      {"ders-sm", UpcycleMethod::ders_sm},
                                                      {"ders-lm", UpcycleMethod::ders_lm}};
  return m;
}

inline std::pair<std::size_t, std::size_t> line_col(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

}  // namespace detail

inline UpcycleMethod parse_method(const std::string& s) {
  auto it = detail::method_names().find(s);
  if (it == detail::method_names().end())
    throw ConfigError("unknown method \"" + s + "\"; expected vanilla, ders-sm or ders-lm");
  return it->second;
}

/// Parses and validates a configuration document. `origin` labels messages.
inline ExperimentConfig parse_config(const std::string& text, const std::string& origin = "config") {
  using detail::Fields;
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const auto [line, col] = detail::line_col(text, e.byte == 0 ? 0 : e.byte - 1);
    std::string what = e.what();
    const auto pos = what.find("parse error");
    throw ConfigError(origin + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " +
                      (pos == std::string::npos ? what : what.substr(pos)));
  }

  ExperimentConfig cfg;
  Fields top(root, origin);
  top.choice<Dtype>("dtype", cfg.dtype, {{"f64", Dtype::f64}, {"f32", Dtype::f32}});

  if (const auto* j = top.raw("task")) {
    TaskParams t;
    Fields f(*j, origin + ".task");
    detail::read_task(f, t, true);
    detail::with_path(origin + ".task", [&] { validate_task_params(t); });
    cfg.task = t;
  }
  if (const auto* j = top.raw("pretrain_task")) {
    if (!cfg.task) throw ConfigError(origin + ".pretrain_task: requires a \"task\" section to override");
    TaskParams t = *cfg.task;
    Fields f(*j, origin + ".pretrain_task");
    detail::read_task(f, t, false);
    detail::with_path(origin + ".pretrain_task", [&] { validate_task_params(t); });
    if (t.kind != cfg.task->kind)
      throw ConfigError(origin + ".pretrain_task.kind: must match task.kind");
    cfg.pretrain_task = t;
  } else if (cfg.task) {
    cfg.pretrain_task = cfg.task;
  }
  if (const auto* j = top.raw("model")) {
    ModelSpec m;
    Fields f(*j, origin + ".model");
    f.count("d", m.d);
    f.count("d_h", m.d_h);
    f.count("depth", m.depth);
    f.choice<Activation>("activation", m.activation,
                         {{"gelu", Activation::gelu}, {"relu", Activation::relu},
                          {"identity", Activation::identity}});
    f.flag("embed", m.embed);
    f.seed(m.seed);
    f.finish();
    if (m.d == 0 || m.d_h == 0 || m.depth == 0)
      throw ConfigError(origin + ".model: d, d_h and depth must be > 0");
    cfg.model = m;
  }
  if (const auto* j = top.raw("pretrain")) cfg.pretrain = detail::read_train(*j, origin + ".pretrain");
  if (const auto* j = top.raw("upcycle")) {
    UpcycleConfig u;
    Fields f(*j, origin + ".upcycle");
    f.choice<UpcycleMethod>("method", u.method, detail::method_names());
    f.count("n_experts", u.n_experts);
    f.count("topk_count", u.topk_count);
    f.number("sparse_rate", u.sparse_rate);
    f.count("rank", u.rank);
    f.choice<LayerPattern>("layer_pattern", u.layer_pattern,
                           {{"every_layer", LayerPattern::every_layer},
                            {"every_other_layer", LayerPattern::every_other_layer}});
    f.flag("parallel_universal", u.parallel_universal);
    f.flag("extended", u.extended);
    f.flag("freeze_shared", u.freeze_shared);
    f.number("lowrank_init_scale", u.lowrank_init_scale);
    f.seed(u.seed);
    f.finish();
    cfg.upcycle = u;
  }
  if (const auto* j = top.raw("train")) cfg.train = detail::read_train(*j, origin + ".train");
  if (const auto* j = top.raw("compress")) {
    CompressionSpec c;
    Fields f(*j, origin + ".compress");
    f.choice<CompressTechnique>("technique", c.technique,
                                {{"dense", CompressTechnique::dense},
                                 {"sparsify", CompressTechnique::sparsify},
                                 {"quantize", CompressTechnique::quantize}});
    f.number("drop_rate", c.drop_rate);
    std::size_t bits = c.bit_width;
    f.count("bit_width", bits);
    c.bit_width = static_cast<unsigned>(bits);
    f.flag("extended", c.extended);
    f.choice<MaskMode>("mask", c.mask,
                       {{"bernoulli", MaskMode::bernoulli}, {"exact_count", MaskMode::exact_count}});
    f.seed(c.seed);
    f.finish();
    cfg.compress = c;
  }
  if (const auto* j = top.raw("sweep")) {
    SweepSpec s;
    Fields f(*j, origin + ".sweep");
    f.list("sparse_rates", s.sparse_rates);
    f.list("ranks", s.ranks);
    f.list("drop_rates", s.drop_rates);
    f.list("bit_widths", s.bit_widths);
    f.finish();
    for (double p : s.sparse_rates)
      if (!(p >= 0.0 && p < 1.0)) throw ConfigError(f.at("sparse_rates") + ": rates must lie in [0, 1)");
    for (double p : s.drop_rates)
      if (!(p >= 0.0 && p < 1.0)) throw ConfigError(f.at("drop_rates") + ": rates must lie in [0, 1)");
    for (std::size_t r : s.ranks)
      if (r == 0) throw ConfigError(f.at("ranks") + ": ranks must be >= 1");
    for (unsigned k : s.bit_widths)
      if (!supported_bit_width(k)) throw ConfigError(f.at("bit_widths") + ": widths must be in {1, 2, 4, 8, 16}");
    cfg.sweep = s;
  }
  if (const auto* j = top.raw("output")) {
    Fields f(*j, origin + ".output");
    if (const auto* d = f.raw("dir")) {
      if (!d->is_string()) throw ConfigError(f.at("dir") + ": expected a string");
      cfg.output_dir = d->get<std::string>();
    }
    f.finish();
  }
  top.finish();

  // Cross-section checks that need model dimensions.
  if (cfg.upcycle && cfg.model) {
    const std::size_t width = cfg.model->embed ? cfg.model->d
                              : cfg.task       ? (cfg.task->kind == TaskKind::modular_classification
                                                      ? 2 * cfg.task->modulus
                                                      : cfg.task->input_dim)
                                               : cfg.model->d;
    detail::with_path(origin + ".upcycle",
                      [&] { validate_upcycle_config(*cfg.upcycle, width, cfg.model->d_h); });
  }
  if (cfg.compress) detail::with_path(origin + ".compress", [&] { validate_compression_spec(*cfg.compress); });
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path.string());
  const std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_config(text, path.string());
}

}  // namespace ders
