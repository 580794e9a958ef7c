#pragma once

#include <set>
#include <string>

#include <json.hpp>

#include "hct/model_config.hpp"
#include "hct/synthbench.hpp"
#include "hct/train_config.hpp"

namespace hct {

using nlohmann::json;

namespace config_detail {

inline void reject_unknown(const json& j, const std::string& section, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(section + ": expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items())
    if (!ok.count(key)) throw ConfigError(section + ": unknown key '" + key + "'");
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(section + "." + key + ": " + e.what());
  }
}

}  // namespace config_detail

inline void from_json(const json& j, HumanRegion& r) {
  config_detail::reject_unknown(j, "bench.human_region", {"height", "width"});
  config_detail::read(j, "height", r.height, "bench.human_region");
  config_detail::read(j, "width", r.width, "bench.human_region");
}

inline void from_json(const json& j, BenchSpec& s) {
  using namespace config_detail;
  reject_unknown(j, "bench", {"n_cls", "M", "H", "W", "D", "n_source", "n_target", "human_region", "sigma", "rho_source",
                              "rho_target", "shared_context_fraction", "seed"});
  const std::string sec = "bench";
  read(j, "n_cls", s.n_cls, sec);
  read(j, "M", s.M, sec);
  read(j, "H", s.H, sec);
  read(j, "W", s.W, sec);
  read(j, "D", s.D, sec);
  read(j, "n_source", s.n_source, sec);
  read(j, "n_target", s.n_target, sec);
  if (j.contains("human_region")) from_json(j.at("human_region"), s.human_region);
  read(j, "sigma", s.sigma, sec);
  read(j, "rho_source", s.rho_source, sec);
  read(j, "rho_target", s.rho_target, sec);
  read(j, "shared_context_fraction", s.shared_context_fraction, sec);
  read(j, "seed", s.seed, sec);
}

inline void to_json(json& j, const AblationFlags& f) {
  j = json{{"no_hm_encoder", f.no_hm_encoder},
           {"no_ctx_encoder", f.no_ctx_encoder},
           {"no_decoder", f.no_decoder},
           {"no_prototypes", f.no_prototypes},
           {"no_masking", f.no_masking}};
}

inline void from_json(const json& j, AblationFlags& f) {
  using namespace config_detail;
  reject_unknown(j, "model.ablation", {"no_hm_encoder", "no_ctx_encoder", "no_decoder", "no_prototypes", "no_masking"});
  read(j, "no_hm_encoder", f.no_hm_encoder, "model.ablation");
  read(j, "no_ctx_encoder", f.no_ctx_encoder, "model.ablation");
  read(j, "no_decoder", f.no_decoder, "model.ablation");
  read(j, "no_prototypes", f.no_prototypes, "model.ablation");
  read(j, "no_masking", f.no_masking, "model.ablation");
}

/// Applies one comma-list token such as "no_prototypes".
inline void apply_ablation_token(AblationFlags& f, const std::string& token) {
  if (token == "no_hm_encoder") f.no_hm_encoder = true;
  else if (token == "no_ctx_encoder") f.no_ctx_encoder = true;
  else if (token == "no_decoder") f.no_decoder = true;
  else if (token == "no_prototypes") f.no_prototypes = true;
  else if (token == "no_masking") f.no_masking = true;
  else if (token == "backbone") f.no_hm_encoder = f.no_ctx_encoder = f.no_decoder = true;
  else if (!token.empty()) throw ConfigError("unknown ablation flag '" + token + "'");
}

inline void to_json(json& j, const ModelConfig& m) {
  j = json{{"M", m.M},
           {"D", m.D},
           {"D_v", m.Dv},
           {"n_cls", m.n_cls},
           {"L_e", m.L_e},
           {"L_d", m.L_d},
           {"mask_threshold", m.mask_threshold},
           {"ablation", m.ablation},
           {"shared_proto_stream", m.shared_proto_stream},
           {"decoder_self_attention", m.decoder_self_attention},
           {"trn_subsets", m.trn_subsets},
           {"proto_keep_fraction", m.proto_keep_fraction}};
  if (m.K)
    j["K"] = *m.K;
  else
    j["K"] = "2*ncls";
}

inline void from_json(const json& j, ModelConfig& m) {
  using namespace config_detail;
  const std::string sec = "model";
  reject_unknown(j, sec, {"M", "D", "D_v", "n_cls", "L_e", "L_d", "K", "mask_threshold", "ablation", "shared_proto_stream",
                          "decoder_self_attention", "trn_subsets", "proto_keep_fraction"});
  read(j, "M", m.M, sec);
  read(j, "D", m.D, sec);
  read(j, "D_v", m.Dv, sec);
  read(j, "n_cls", m.n_cls, sec);
  read(j, "L_e", m.L_e, sec);
  read(j, "L_d", m.L_d, sec);
  if (j.contains("K")) {
    const auto& k = j.at("K");
    if (k.is_string()) {
      if (k.get<std::string>() != "2*ncls") throw ConfigError("model.K: expected an integer or \"2*ncls\"");
      m.K.reset();
    } else if (k.is_number_unsigned()) {
      m.K = k.get<std::size_t>();
    } else {
      throw ConfigError("model.K: expected an integer or \"2*ncls\"");
    }
  }
  read(j, "mask_threshold", m.mask_threshold, sec);
  if (j.contains("ablation")) from_json(j.at("ablation"), m.ablation);
  read(j, "shared_proto_stream", m.shared_proto_stream, sec);
  read(j, "decoder_self_attention", m.decoder_self_attention, sec);
  read(j, "trn_subsets", m.trn_subsets, sec);
  read(j, "proto_keep_fraction", m.proto_keep_fraction, sec);
}

inline void to_json(json& j, const StageConfig& s) {
  j = json{{"optimizer", s.optimizer == OptimizerKind::Sgd ? "sgd" : "adam"},
           {"lr0", s.lr0},
           {"weight_decay", s.weight_decay},
           {"momentum", s.momentum},
           {"epochs", s.epochs}};
}

inline void read_stage(const json& j, StageConfig& s, const std::string& sec) {
  using namespace config_detail;
  reject_unknown(j, sec, {"optimizer", "lr0", "weight_decay", "momentum", "epochs"});
  if (j.contains("optimizer")) {
    const auto o = j.at("optimizer").get<std::string>();
    if (o == "sgd") s.optimizer = OptimizerKind::Sgd;
    else if (o == "adam") s.optimizer = OptimizerKind::Adam;
    else throw ConfigError(sec + ".optimizer: expected \"sgd\" or \"adam\"");
  }
  read(j, "lr0", s.lr0, sec);
  read(j, "weight_decay", s.weight_decay, sec);
  read(j, "momentum", s.momentum, sec);
  read(j, "epochs", s.epochs, sec);
}

inline void to_json(json& j, const TrainConfig& t) {
  j = json{{"lambda_hm", t.lambda_hm},
           {"lambda_ctx", t.lambda_ctx},
           {"lambda_hc", t.lambda_hc},
           {"lambda_H", t.lambda_H},
           {"stage1", t.stage1},
           {"stage2", t.stage2},
           {"batch_pairs", t.batch_pairs},
           {"grl_gamma", t.grl_gamma},
           {"lr_decay", {{"alpha", t.lr_alpha}, {"beta", t.lr_beta}}},
           {"seed", t.seed},
           {"context_classifier_epochs", t.context_classifier_epochs},
           {"prototype_refresh_epochs", t.prototype_refresh_epochs},
           {"stage2_warm_start", t.stage2_warm_start}};
}

inline void from_json(const json& j, TrainConfig& t) {
  using namespace config_detail;
  const std::string sec = "train";
  reject_unknown(j, sec, {"lambda_hm", "lambda_ctx", "lambda_hc", "lambda_H", "stage1", "stage2", "batch_pairs", "grl_gamma",
                          "lr_decay", "seed", "context_classifier_epochs", "prototype_refresh_epochs", "stage2_warm_start"});
  read(j, "lambda_hm", t.lambda_hm, sec);
  read(j, "lambda_ctx", t.lambda_ctx, sec);
  read(j, "lambda_hc", t.lambda_hc, sec);
  read(j, "lambda_H", t.lambda_H, sec);
  if (j.contains("stage1")) read_stage(j.at("stage1"), t.stage1, "train.stage1");
  if (j.contains("stage2")) read_stage(j.at("stage2"), t.stage2, "train.stage2");
  read(j, "batch_pairs", t.batch_pairs, sec);
  read(j, "grl_gamma", t.grl_gamma, sec);
  if (j.contains("lr_decay")) {
    const auto& d = j.at("lr_decay");
    reject_unknown(d, "train.lr_decay", {"alpha", "beta"});
    read(d, "alpha", t.lr_alpha, "train.lr_decay");
    read(d, "beta", t.lr_beta, "train.lr_decay");
  }
  read(j, "seed", t.seed, sec);
  read(j, "context_classifier_epochs", t.context_classifier_epochs, sec);
  read(j, "prototype_refresh_epochs", t.prototype_refresh_epochs, sec);
  read(j, "stage2_warm_start", t.stage2_warm_start, sec);
}

enum class RatioDenominator { Attribution, Mask, Union };

struct EvalConfig {
  bool human_ratio = true;
  bool davies_bouldin = true;
  double threshold_coef = 0.5;
  RatioDenominator denominator = RatioDenominator::Attribution;
  bool dump_attributions = false;

  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

inline const char* denominator_name(RatioDenominator d) {
  switch (d) {
    case RatioDenominator::Attribution: return "attribution";
    case RatioDenominator::Mask: return "mask";
    case RatioDenominator::Union: return "union";
  }
  return "?";
}

inline void to_json(json& j, const EvalConfig& e) {
  j = json{{"human_ratio", e.human_ratio},
           {"davies_bouldin", e.davies_bouldin},
           {"threshold_coef", e.threshold_coef},
           {"human_ratio_denominator", denominator_name(e.denominator)},
           {"dump_attributions", e.dump_attributions}};
}

inline void from_json(const json& j, EvalConfig& e) {
  using namespace config_detail;
  const std::string sec = "eval";
  reject_unknown(j, sec, {"human_ratio", "davies_bouldin", "threshold_coef", "human_ratio_denominator", "dump_attributions"});
  read(j, "human_ratio", e.human_ratio, sec);
  read(j, "davies_bouldin", e.davies_bouldin, sec);
  read(j, "threshold_coef", e.threshold_coef, sec);
  if (j.contains("human_ratio_denominator")) {
    const auto d = j.at("human_ratio_denominator").get<std::string>();
    if (d == "attribution") e.denominator = RatioDenominator::Attribution;
    else if (d == "mask") e.denominator = RatioDenominator::Mask;
    else if (d == "union") e.denominator = RatioDenominator::Union;
    else throw ConfigError("eval.human_ratio_denominator: expected attribution, mask or union");
  }
  read(j, "dump_attributions", e.dump_attributions, sec);
  if (!(e.threshold_coef > 0.0 && e.threshold_coef <= 1.0)) throw ConfigError("eval.threshold_coef outside (0,1]");
}

struct PathsConfig {
  std::string data = "data";
  std::string out = "runs/default";
};

/// The whole declarative run description.
struct RunConfig {
  BenchSpec bench;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  PathsConfig paths;

  /// Copies the benchmark geometry into the model and checks both.
  void finalize() {
    bench.validate();
    model.n_cls = bench.n_cls;
    model.M = bench.M;
    model.D = bench.D;
    model.validate();
    train.validate();
  }
};

inline void to_json(json& j, const RunConfig& c) {
  j = json{{"bench", c.bench},
           {"model", c.model},
           {"train", c.train},
           {"eval", c.eval},
           {"paths", {{"data", c.paths.data}, {"out", c.paths.out}}}};
}

inline RunConfig parse_run_config(const json& j) {
  using namespace config_detail;
  reject_unknown(j, "config", {"bench", "model", "train", "eval", "paths"});
  RunConfig c;
  if (j.contains("bench")) from_json(j.at("bench"), c.bench);
  if (j.contains("model")) from_json(j.at("model"), c.model);
  if (j.contains("train")) from_json(j.at("train"), c.train);
  if (j.contains("eval")) from_json(j.at("eval"), c.eval);
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    reject_unknown(p, "paths", {"data", "out"});
    read(p, "data", c.paths.data, "paths");
    read(p, "out", c.paths.out, "paths");
  }
  // Geometry comes from the benchmark; a model section that disagrees is an error.
  if (j.contains("model")) {
    const auto& m = j.at("model");
    if ((m.contains("M") && c.model.M != c.bench.M) || (m.contains("D") && c.model.D != c.bench.D) ||
        (m.contains("n_cls") && c.model.n_cls != c.bench.n_cls))
      throw ConfigError("model: M, D and n_cls must match the bench section");
  }
  c.finalize();
  return c;
}

inline RunConfig parse_run_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_run_config(j);
}

}  // namespace hct
