#pragma once

#include <cstddef>
#include <optional>
#include <string>

#include "hct/synthbench.hpp"

namespace hct {

/// Component switches; together they select the ablation rows.
struct AblationFlags {
  bool no_hm_encoder = false;
  bool no_ctx_encoder = false;
  bool no_decoder = false;
  bool no_prototypes = false;
  bool no_masking = false;

  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

enum class Variant {
  Backbone,    // pooled backbone features, classifier + one discriminator
  HmEnc,       // human encoder only
  CtxEnc,      // context encoder only
  LateFusion,  // human and context heads, probabilities averaged
  Full,
};

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Backbone: return "Backbone";
    case Variant::HmEnc: return "Backbone+HmEnc";
    case Variant::CtxEnc: return "Backbone+CtxEnc";
    case Variant::LateFusion: return "Backbone+HmEnc+CtxEnc";
    case Variant::Full: return "Full";
  }
  return "?";
}

inline Variant resolve_variant(const AblationFlags& f) {
  const bool hm = !f.no_hm_encoder, ctx = !f.no_ctx_encoder, dec = !f.no_decoder;
  if (!hm && dec) throw ConfigError("ablation: the decoder needs the human encoder (set no_decoder with no_hm_encoder)");
  if (hm && dec) return Variant::Full;
  if (hm && ctx) return Variant::LateFusion;
  if (hm) return Variant::HmEnc;
  if (ctx) return Variant::CtxEnc;
  return Variant::Backbone;
}

struct ModelConfig {
  std::size_t n_cls = 6;
  std::size_t M = 5;
  std::size_t D = 32;
  std::size_t Dv = 16;
  std::size_t L_e = 2;
  std::size_t L_d = 2;
  std::optional<std::size_t> K;  // unset: 2 * n_cls
  double mask_threshold = 0.5;
  AblationFlags ablation;
  bool shared_proto_stream = true;
  bool decoder_self_attention = false;
  std::size_t trn_subsets = 3;
  double proto_keep_fraction = 0.5;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;

  std::size_t prototype_count() const { return K ? *K : 2 * n_cls; }
  Variant variant() const { return resolve_variant(ablation); }
  bool uses_hm() const { return !ablation.no_hm_encoder; }
  bool uses_ctx_stream() const {
    const Variant v = variant();
    return v == Variant::Full || v == Variant::CtxEnc || v == Variant::LateFusion;
  }
  bool uses_prototypes() const { return uses_ctx_stream() && !ablation.no_ctx_encoder && !ablation.no_prototypes; }
  /// Encoder depth actually run; zero when the decoder reads unencoded tokens.
  std::size_t encoder_layers() const { return ablation.no_ctx_encoder ? 0 : L_e; }

  void validate() const {
    if (n_cls < 2) throw ConfigError("model: n_cls must be at least 2");
    if (M < 2) throw ConfigError("model: M must be at least 2");
    if (D == 0 || Dv == 0) throw ConfigError("model: zero feature width");
    if (L_d == 0 && !ablation.no_decoder) throw ConfigError("model: L_d must be at least 1");
    if (L_e == 0 && !ablation.no_ctx_encoder) throw ConfigError("model: L_e must be at least 1");
    if (prototype_count() == 0) throw ConfigError("model: K must be positive");
    if (!(mask_threshold > 0.0 && mask_threshold < 1.0)) throw ConfigError("model: mask threshold outside (0,1)");
    if (trn_subsets == 0) throw ConfigError("model: trn_subsets must be positive");
    if (!(proto_keep_fraction > 0.0 && proto_keep_fraction <= 1.0)) throw ConfigError("model: keep fraction outside (0,1]");
    resolve_variant(ablation);
  }
};

}  // namespace hct
