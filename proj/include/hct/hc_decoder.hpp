#pragma once

#include <string>
#include <vector>

#include "hct/model_config.hpp"
#include "hct/nn.hpp"

namespace hct::hc_decoder {

inline std::string layer_name(std::size_t l) { return "dec.l" + std::to_string(l); }
inline std::string disc_name(std::size_t l, std::size_t g) {
  return "disc.hc.l" + std::to_string(l) + ".g" + std::to_string(g);
}

inline void init(ParamStore& ps, const ModelConfig& cfg, Stream& rng) {
  for (std::size_t l = 1; l <= cfg.L_d; ++l) {
    const auto name = layer_name(l);
    if (cfg.decoder_self_attention) {
      nn::init_layer_norm(ps, name + ".ln0", cfg.Dv);
      nn::init_attention(ps, name + ".self", cfg.Dv, rng);
    }
    nn::init_layer_norm(ps, name + ".ln1", cfg.Dv);
    nn::init_attention(ps, name + ".cross", cfg.Dv, rng);
    nn::init_layer_norm(ps, name + ".ln2", cfg.Dv);
    nn::init_ffn(ps, name + ".ffn", cfg.Dv, 2 * cfg.Dv, rng);
    for (std::size_t g = 1; g < cfg.M; ++g) nn::init_discriminator(ps, disc_name(l, g), cfg.Dv, cfg.Dv, rng);
  }
}

struct Output {
  std::vector<Var> layers;          // Z_1^hc .. Z_Ld^hc, each (M-1) x D_v
  Var final;
  std::vector<Var> cross_weights;   // per layer, (M-1) x M
};

/// Human temporal features query the final context tokens in every layer.
/// `logit_scale` multiplies attention logits (0 gives uniform weights).
inline Output decode(Binder& b, const ModelConfig& cfg, const Var& z_hm, const Var& z_ctx, double logit_scale = 1.0) {
  if (z_hm.cols() != z_ctx.cols())
    throw ShapeError("hc_decode: human width " + std::to_string(z_hm.cols()) + " vs context width " +
                     std::to_string(z_ctx.cols()));
  Output out;
  Var z = z_hm;
  for (std::size_t l = 1; l <= cfg.L_d; ++l) {
    const auto name = layer_name(l);
    if (cfg.decoder_self_attention) {
      Var zn = nn::layer_norm(b, name + ".ln0", z);
      z = add(z, nn::attention(b, name + ".self", zn, zn).output);
    }
    auto ca = nn::attention(b, name + ".cross", nn::layer_norm(b, name + ".ln1", z), z_ctx, logit_scale);
    z = add(z, ca.output);
    z = add(z, nn::ffn(b, name + ".ffn", nn::layer_norm(b, name + ".ln2", z)));
    out.layers.push_back(z);
    out.cross_weights.push_back(ca.weights);
  }
  out.final = z;
  return out;
}

inline std::size_t discriminator_count(const ModelConfig& cfg) { return cfg.L_d * (cfg.M - 1); }

/// lambda/(L_d (M-1)) times the domain cross-entropy of every (layer, granularity) row.
inline Var alignment_loss(Binder& b, const Output& o, Domain domain, double lambda, double grl) {
  if (lambda == 0.0) return zero_scalar(b.tape());
  std::vector<Var> terms;
  const std::size_t rows = o.final.rows();
  for (std::size_t l = 1; l <= o.layers.size(); ++l)
    for (std::size_t g = 1; g <= rows; ++g)
      terms.push_back(
          nn::domain_loss(b, disc_name(l, g), gather_rows(o.layers[l - 1], {g - 1}), static_cast<int>(domain), grl));
  return scale(sum(concat(terms, 0)), lambda / static_cast<double>(o.layers.size() * rows));
}

}  // namespace hct::hc_decoder
