// SPDX-License-Identifier: Apache-2.0
#pragma once

// Subcommand implementations shared by the ders tool and the tests.
//
// Artifacts (under the output directory):
//   pretrain-dense      dense.ders, pretrain_metrics.csv
//   upcycle             upcycled.ders, upcycle_params.{json|csv}
//   train               trained.ders, trained_best.ders, train_metrics.csv
//   compress            compressed.ders, compression_report.{json|csv}
//   eval                eval.{json|csv}
//   report-params       param_report.{json|csv}
//   analyze-similarity  similarity.{json|csv}, delta_norms.csv
//   sweep               sweep_sparse_rate.csv, sweep_rank.csv, sweep_compress.csv
// Every checkpoint is accompanied by a .json sidecar. Inputs are read only.

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ders/accounting.hpp"
#include "ders/analysis.hpp"
#include "ders/checkpoint.hpp"
#include "ders/compress.hpp"
#include "ders/config.hpp"
#include "ders/train.hpp"
#include "ders/upcycle.hpp"

namespace ders {

enum class ReportFormat : std::uint8_t { json = 0, csv = 1 };

struct RunOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> checkpoint;
  ReportFormat format = ReportFormat::json;
  std::optional<std::uint64_t> seed;
  std::optional<UpcycleMethod> method;
  std::optional<double> drop_rate;
  std::optional<unsigned> bit_width;
  std::optional<std::size_t> rank;
  bool extended = false;
  bool freeze_shared = false;
};

inline const std::vector<std::string>& subcommand_names() {
  static const std::vector<std::string> names{"pretrain-dense", "upcycle", "train", "compress", "eval",
                                              "report-params", "analyze-similarity", "sweep"};
  return names;
}

inline constexpr std::uint64_t kStreamModelInit = 0x1D17;

inline std::string fmt_num(double v) { return format_double(v); }

inline nlohmann::ordered_json to_json(const CompressionReport& r) {
  nlohmann::ordered_json j;
  j["schema"] = "ders.compression_report";
  j["technique"] = technique_name(r.spec.technique);
  if (r.spec.technique == CompressTechnique::sparsify) {
    j["drop_rate"] = r.spec.drop_rate;
    j["mask"] = r.spec.mask == MaskMode::bernoulli ? "bernoulli" : "exact_count";
  }
  if (r.spec.technique == CompressTechnique::quantize) j["bit_width"] = r.spec.bit_width;
  j["extended"] = r.spec.extended;
  j["seed"] = r.spec.seed;
  j["original_bits"] = r.original_bits;
  auto layers = nlohmann::ordered_json::array();
  for (const auto& l : r.layers) {
    layers.push_back({{"block", l.block},
                      {"deltas_per_matrix", l.deltas_per_matrix},
                      {"stored_values_before", l.stored_values_before},
                      {"stored_values_after", l.stored_values_after},
                      {"stored_bits_before", l.stored_bits_before},
                      {"stored_bits_after", l.stored_bits_after},
                      {"overhead_bits_after", l.overhead_bits_after},
                      {"equivalent_expert_ratio", l.equivalent_expert_ratio}});
  }
  j["layers"] = layers;
  return j;
}

inline std::string to_csv(const CompressionReport& r) {
  std::string out =
      "block,technique,deltas_per_matrix,stored_values_before,stored_values_after,stored_bits_before,"
      "stored_bits_after,overhead_bits_after,equivalent_expert_ratio\n";
  for (const auto& l : r.layers) {
    out += std::to_string(l.block) + "," + technique_name(r.spec.technique) + "," +
           std::to_string(l.deltas_per_matrix) + "," + std::to_string(l.stored_values_before) + "," +
           std::to_string(l.stored_values_after) + "," + std::to_string(l.stored_bits_before) + "," +
           std::to_string(l.stored_bits_after) + "," + std::to_string(l.overhead_bits_after) + "," +
           fmt_num(l.equivalent_expert_ratio) + "\n";
  }
  return out;
}

inline nlohmann::ordered_json to_json(const SimilarityReport& r) {
  auto mat = [](const SimilarityMatrix& s) {
    auto rows = nlohmann::ordered_json::array();
    for (const auto& row : s) {
      auto jr = nlohmann::ordered_json::array();
      for (const auto& v : row) jr.push_back(v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr));
      rows.push_back(jr);
    }
    return rows;
  };
  nlohmann::ordered_json j;
  j["schema"] = "ders.similarity_report";
  j["note"] = r.note;
  auto layers = nlohmann::ordered_json::array();
  for (const auto& l : r.layers) {
    const auto lo = min_offdiag(l.mean);
    layers.push_back({{"block", l.block},
                      {"reference", l.reference},
                      {"min_offdiag_mean", lo ? nlohmann::ordered_json(*lo) : nlohmann::ordered_json(nullptr)},
                      {"w_in", mat(l.w_in)},
                      {"w_out", mat(l.w_out)},
                      {"mean", mat(l.mean)}});
  }
  j["layers"] = layers;
  return j;
}

inline nlohmann::ordered_json eval_json(const EvalResult& r, const SyntheticTask& task) {
  nlohmann::ordered_json j;
  j["schema"] = "ders.eval";
  j["task"] = task_kind_name(task.params.kind);
  j["samples"] = r.samples;
  j["accuracy"] = r.accuracy;
  if (task.classification()) {
    j["cross_entropy"] = r.cross_entropy;
  } else {
    j["mse"] = r.mse;
    j["r2"] = r.r2;
  }
  return j;
}

inline std::string eval_csv(const EvalResult& r, const SyntheticTask& task) {
  return "task,samples,accuracy,mse,r2,cross_entropy\n" + std::string(task_kind_name(task.params.kind)) +
         "," + std::to_string(r.samples) + "," + fmt_num(r.accuracy) + "," + fmt_num(r.mse) + "," +
         fmt_num(r.r2) + "," + fmt_num(r.cross_entropy) + "\n";
}

class Pipeline {
 public:
  Pipeline(ExperimentConfig cfg, RunOptions opts, std::ostream& log)
      : cfg_(std::move(cfg)), opts_(std::move(opts)), log_(log) {
    if (opts_.out_dir.empty()) opts_.out_dir = cfg_.output_dir.value_or("out");
    set_default_dtype(cfg_.dtype);
  }

  void run(const std::string& sub) {
    if (sub == "pretrain-dense") return pretrain_dense();
    if (sub == "upcycle") return upcycle_cmd();
    if (sub == "train") return train_cmd();
    if (sub == "compress") return compress_cmd();
    if (sub == "eval") return eval_cmd();
    if (sub == "report-params") return report_params();
    if (sub == "analyze-similarity") return analyze_similarity();
    if (sub == "sweep") return sweep();
    throw ConfigError("unknown subcommand \"" + sub + "\"");
  }

  std::filesystem::path path(const std::string& name) const { return opts_.out_dir / name; }

  // Stage helpers, also used by the acceptance suite.

  const SyntheticTask& pretrain_task() {
    if (!pretrain_task_) pretrain_task_ = make_task(*need(cfg_.pretrain_task, "task"));
    return *pretrain_task_;
  }
  const SyntheticTask& task() {
    if (!task_) task_ = make_task(*need(cfg_.task, "task"));
    return *task_;
  }

  TrainResult pretrain_model() {
    const ModelSpec ms = *need(cfg_.model, "model");
    TrainConfig tc = *need(cfg_.pretrain, "pretrain");
    if (opts_.seed) tc.seed = *opts_.seed;
    const SyntheticTask& t = pretrain_task();
    RngStream rng(opts_.seed.value_or(ms.seed), stream_id({kStreamModelInit}));
    Model dense = make_dense_model(t.input_dim(), t.output_dim(), ms.d, ms.d_h, ms.depth, ms.activation,
                                   rng, ms.embed);
    dense.seeds["model"] = opts_.seed.value_or(ms.seed);
    dense.seeds["task"] = t.params.seed;
    TrainResult r = train_loop(dense, t, tc);
    for (Model* m : {&r.final_model, &r.best_model}) {
      m->seeds.erase("train");
      m->seeds["pretrain"] = tc.seed;
    }
    return r;
  }

  UpcycleConfig upcycle_config() const {
    UpcycleConfig u = *need(cfg_.upcycle, "upcycle");
    if (opts_.seed) u.seed = *opts_.seed;
    if (opts_.method) u.method = *opts_.method;
    if (opts_.drop_rate) u.sparse_rate = *opts_.drop_rate;
    if (opts_.rank) u.rank = *opts_.rank;
    if (opts_.extended) u.extended = true;
    if (opts_.freeze_shared) u.freeze_shared = true;
    return u;
  }

  TrainConfig train_config() const {
    TrainConfig tc = *need(cfg_.train, "train");
    if (opts_.seed) tc.seed = *opts_.seed;
    return tc;
  }

  CompressionSpec compression_spec() const {
    CompressionSpec c = *need(cfg_.compress, "compress");
    if (opts_.seed) c.seed = *opts_.seed;
    if (opts_.drop_rate && opts_.bit_width)
      throw ConfigError("--drop-rate and --bit-width select different techniques; pass one");
    if (opts_.drop_rate) {
      c.technique = CompressTechnique::sparsify;
      c.drop_rate = *opts_.drop_rate;
    }
    if (opts_.bit_width) {
      c.technique = CompressTechnique::quantize;
      c.bit_width = *opts_.bit_width;
    }
    if (opts_.extended) c.extended = true;
    validate_compression_spec(c);
    return c;
  }

 private:
  template <typename T>
  static const T* need(const std::optional<T>& v, const char* section) {
    if (!v) throw ConfigError(std::string("config: missing section \"") + section + "\"");
    return &*v;
  }

  Model input(const char* default_name) {
    const auto p = opts_.checkpoint.value_or(path(default_name));
    if (!std::filesystem::exists(p)) throw StateError("input checkpoint " + p.string() + " does not exist");
    return load_checkpoint(p).model;
  }

  void save(const Model& m, const std::string& name) {
    save_checkpoint(m, path(name), cfg_.dtype);
    log_ << "wrote " << path(name).string() << "\n";
  }

  void write_text(const std::string& name, const std::string& text) {
    atomic_write_text(path(name), text);
    log_ << "wrote " << path(name).string() << "\n";
  }

  std::string ext() const { return opts_.format == ReportFormat::json ? ".json" : ".csv"; }

  void emit_params(const Model& m, const std::string& stem) {
    const ParamReport rep = count_report(m, dtype_bits(cfg_.dtype));
    write_text(stem + ext(), opts_.format == ReportFormat::json ? to_json(rep).dump(2) + "\n" : to_csv(rep));
  }

  void pretrain_dense() {
    TrainResult r = pretrain_model();
    save(r.final_model, "dense.ders");
    write_text("pretrain_metrics.csv", trace_csv(r.trace));
    log_ << "pretrain eval accuracy " << fmt_num(r.trace.back().eval_metric.value_or(0.0)) << "\n";
  }

  void upcycle_cmd() {
    const UpcycleConfig u = upcycle_config();
    const Model dense = input("dense.ders");
    const Model moe = upcycle(dense, u);
    save(moe, "upcycled.ders");
    emit_params(moe, "upcycle_params");
  }

  void train_cmd() {
    const TrainConfig tc = train_config();
    const Model start = input("upcycled.ders");
    const SyntheticTask& t = task();
    if (start.input_dim != t.input_dim() || start.output_dim != t.output_dim())
      throw ConfigError("task dimensions do not match the checkpoint");
    TrainResult r = train_loop(start, t, tc);
    save(r.final_model, "trained.ders");
    save(r.best_model, "trained_best.ders");
    write_text("train_metrics.csv", trace_csv(r.trace));
    log_ << "best eval accuracy " << fmt_num(r.best_metric) << " at step " << r.best_step << "\n";
  }

  void compress_cmd() {
    const CompressionSpec spec = compression_spec();
    const Model trained = input("trained.ders");
    CompressionReport rep;
    const Model c = ders_compress(trained, spec, &rep, dtype_bits(cfg_.dtype));
    save(c, "compressed.ders");
    write_text("compression_report" + ext(),
               opts_.format == ReportFormat::json ? to_json(rep).dump(2) + "\n" : to_csv(rep));
  }

  void eval_cmd() {
    const SyntheticTask& t = task();
    const Model m = input("trained.ders");
    if (m.input_dim != t.input_dim() || m.output_dim != t.output_dim())
      throw ConfigError("task dimensions do not match the checkpoint");
    const EvalResult r = evaluate(m, t.eval, t.classification());
    const std::string text =
        opts_.format == ReportFormat::json ? eval_json(r, t).dump(2) + "\n" : eval_csv(r, t);
    write_text("eval" + ext(), text);
    log_ << text;
  }

  void report_params() { emit_params(input("upcycled.ders"), "param_report"); }

  void analyze_similarity() {
    const Model m = input("trained.ders");
    const SimilarityReport rep = cosine_report(m);
    write_text("similarity" + ext(),
               opts_.format == ReportFormat::json ? to_json(rep).dump(2) + "\n" : to_csv(rep));
    write_text("delta_norms.csv", to_csv(delta_stats(m)));
  }

  void sweep() {
    const SweepSpec sw = *need(cfg_.sweep, "sweep");
    const TrainConfig tc = train_config();
    const UpcycleConfig base_u = upcycle_config();
    const SyntheticTask& t = task();
    const Model dense = input("dense.ders");
    const unsigned K = dtype_bits(cfg_.dtype);

    auto run_upcycled = [&](const UpcycleConfig& u) {
      const Model moe = upcycle(dense, u);
      const ParamReport rep = count_report(moe, K);
      const TrainResult r = train_loop(moe, t, tc);
      return std::tuple{rep, r.final_model,
                        evaluate(r.final_model, t.eval, t.classification()).accuracy};
    };

    std::string sm = "method,sparse_rate,added_params,trainable_values,eval_accuracy\n";
    for (double p : sw.sparse_rates) {
      UpcycleConfig u = base_u;
      u.method = UpcycleMethod::ders_sm;
      u.sparse_rate = p;
      const auto [rep, m, acc] = run_upcycled(u);
      sm += "ders-sm," + fmt_num(p) + "," + std::to_string(rep.added_params_values_only) + "," +
            std::to_string(rep.totals.trainable_values) + "," + fmt_num(acc) + "\n";
    }
    write_text("sweep_sparse_rate.csv", sm);

    std::string lm = "method,rank,added_params,trainable_values,eval_accuracy\n";
    for (std::size_t r : sw.ranks) {
      UpcycleConfig u = base_u;
      u.method = UpcycleMethod::ders_lm;
      u.rank = r;
      const auto [rep, m, acc] = run_upcycled(u);
      lm += "ders-lm," + std::to_string(r) + "," + std::to_string(rep.added_params_values_only) + "," +
            std::to_string(rep.totals.trainable_values) + "," + fmt_num(acc) + "\n";
    }
    write_text("sweep_rank.csv", lm);

    UpcycleConfig u = base_u;
    u.method = UpcycleMethod::vanilla;
    const auto [vrep, vanilla, vacc] = run_upcycled(u);
    CompressionSpec cs = cfg_.compress.value_or(CompressionSpec{});
    if (opts_.seed) cs.seed = *opts_.seed;
    std::string cc = "technique,drop_rate,bit_width,eval_accuracy,delta_vs_uncompressed,equivalent_expert_ratio\n";
    cc += "none,,," + fmt_num(vacc) + ",0,1\n";
    auto compress_row = [&](const CompressionSpec& spec) {
      CompressionReport rep;
      const Model c = ders_compress(vanilla, spec, &rep, K);
      const double acc = evaluate(c, t.eval, t.classification()).accuracy;
      double ratio = 0.0;
      for (const auto& l : rep.layers) ratio += l.equivalent_expert_ratio;
      ratio /= static_cast<double>(rep.layers.size());
      const bool sp = spec.technique == CompressTechnique::sparsify;
      cc += std::string(technique_name(spec.technique)) + "," + (sp ? fmt_num(spec.drop_rate) : "") + "," +
            (sp ? "" : std::to_string(spec.bit_width)) + "," + fmt_num(acc) + "," + fmt_num(acc - vacc) +
            "," + fmt_num(ratio) + "\n";
    };
    for (double p : sw.drop_rates) {
      CompressionSpec s = cs;
      s.technique = CompressTechnique::sparsify;
      s.drop_rate = p;
      compress_row(s);
    }
    for (unsigned k : sw.bit_widths) {
      CompressionSpec s = cs;
      s.technique = CompressTechnique::quantize;
      s.bit_width = k;
      compress_row(s);
    }
    write_text("sweep_compress.csv", cc);
  }

  ExperimentConfig cfg_;
  RunOptions opts_;
  std::ostream& log_;
  std::optional<SyntheticTask> pretrain_task_;
  std::optional<SyntheticTask> task_;
};

}  // namespace ders
