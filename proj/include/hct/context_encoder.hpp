#pragma once

#include <optional>
#include <string>
#include <vector>

#include "hct/model_config.hpp"
#include "hct/nn.hpp"

namespace hct::context_encoder {

inline std::string layer_name(std::size_t l) { return "ctx.l" + std::to_string(l); }
inline std::string proto_stream_name(std::size_t l) { return "ctx.l" + std::to_string(l) + ".proto"; }
inline std::string disc_name(std::size_t l) { return "disc.ctx.l" + std::to_string(l); }

inline void init_block(ParamStore& ps, const std::string& name, std::size_t dv, bool cross, Stream& rng) {
  nn::init_layer_norm(ps, name + ".ln1", dv);
  nn::init_attention(ps, name + ".self", dv, rng);
  if (cross) nn::init_attention(ps, name + ".cross", dv, rng);
  nn::init_layer_norm(ps, name + ".ln2", dv);
  nn::init_ffn(ps, name + ".ffn", dv, 2 * dv, rng);
}

inline void init(ParamStore& ps, const ModelConfig& cfg, Stream& rng) {
  nn::init_affine(ps, "ctx.proj", cfg.D, cfg.Dv, rng);
  Tensor pos({cfg.M, cfg.Dv});
  for (auto& v : pos.data()) v = rng.uniform(-0.1, 0.1);
  ps.set("ctx.pos", std::move(pos));
  const bool protos = cfg.uses_prototypes();
  for (std::size_t l = 1; l <= cfg.encoder_layers(); ++l) {
    init_block(ps, layer_name(l), cfg.Dv, protos, rng);
    if (protos && !cfg.shared_proto_stream) init_block(ps, proto_stream_name(l), cfg.Dv, true, rng);
    nn::init_discriminator(ps, disc_name(l), cfg.Dv, cfg.Dv, rng);
  }
}

struct Tokens {
  Var clips;                     // M x D_v
  std::optional<Var> prototypes; // K x D_v
};

/// Layer-0 tokens: projected mean context feature of each clip plus its slot
/// encoding, and projected prototypes. An empty context set pools to zero.
inline Tokens inputs(Binder& b, const ModelConfig& cfg, const std::vector<std::optional<Var>>& context_sets,
                     const Tensor* bank) {
  std::vector<Var> pooled;
  for (const auto& s : context_sets) {
    if (s && s->rows() > 0)
      pooled.push_back(mean(*s, 0));
    else
      pooled.push_back(b.constant(Tensor({1, cfg.D})));
  }
  Tokens t;
  t.clips = add(nn::affine(b, "ctx.proj", concat(pooled, 0)), b("ctx.pos"));
  if (bank && cfg.uses_prototypes()) t.prototypes = nn::affine(b, "ctx.proj", b.constant(*bank));
  return t;
}

struct LayerTrace {
  Var self_weights;
  std::optional<Var> cross_weights;
};

struct Output {
  std::vector<Var> layers;  // Z_1 .. Z_Le
  Var final;                // Z_Le (Z_0 when the encoder is ablated)
  std::vector<LayerTrace> traces;
};

struct StreamStep {
  Var next;
  LayerTrace trace;
};

// One sub-layer pass for the stream `x` attending to `other`: pre-norm self
// attention plus cross attention, residual, then a residual FFN.
inline StreamStep block(Binder& b, const std::string& name, const Var& x, const std::optional<Var>& other) {
  Var xn = nn::layer_norm(b, name + ".ln1", x);
  auto sa = nn::attention(b, name + ".self", xn, xn);
  Var u = add(x, sa.output);
  StreamStep step;
  step.trace.self_weights = sa.weights;
  if (other) {
    Var on = nn::layer_norm(b, name + ".ln1", *other);
    auto ca = nn::attention(b, name + ".cross", xn, on);
    u = add(u, ca.output);
    step.trace.cross_weights = ca.weights;
  }
  step.next = add(u, nn::ffn(b, name + ".ffn", nn::layer_norm(b, name + ".ln2", u)));
  return step;
}

inline Output encode(Binder& b, const ModelConfig& cfg, const Tokens& tokens) {
  Output out;
  Var z = tokens.clips;
  std::optional<Var> c = tokens.prototypes;
  for (std::size_t l = 1; l <= cfg.encoder_layers(); ++l) {
    auto zs = block(b, layer_name(l), z, c);
    if (c) {
      const std::string pname = cfg.shared_proto_stream ? layer_name(l) : proto_stream_name(l);
      c = block(b, pname, *c, z).next;
    }
    z = zs.next;
    out.layers.push_back(z);
    out.traces.push_back(zs.trace);
  }
  out.final = z;
  return out;
}

/// lambda/L_e times the per-layer domain cross-entropy on the clip tokens.
inline Var alignment_loss(Binder& b, const Output& o, Domain domain, double lambda, double grl) {
  if (lambda == 0.0 || o.layers.empty()) return zero_scalar(b.tape());
  std::vector<Var> terms;
  for (std::size_t l = 1; l <= o.layers.size(); ++l)
    terms.push_back(nn::domain_loss(b, disc_name(l), o.layers[l - 1], static_cast<int>(domain), grl));
  return scale(sum(concat(terms, 0)), lambda / static_cast<double>(o.layers.size()));
}

}  // namespace hct::context_encoder
