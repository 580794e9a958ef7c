// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hct/ablation.hpp"

using namespace hct;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = true;
  std::vector<std::string> notes;

  void require(bool ok, const std::string& what) {
    pass = pass && ok;
    notes.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
  }
  void note(const std::string& what) { notes.push_back("info " + what); }
};

std::string fmt(const char* f, double a) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string fmt(const char* f, double a, double b) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

std::string fmt(const char* f, double a, double b, double c) {
  char buf[200];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

Tensor random_tensor(Shape s, Stream& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

Var weighted_sum(Tape& t, const Var& y, Stream& rng) { return sum(mul(y, t.constant(random_tensor(y.shape(), rng)))); }

// ---------------------------------------------------------------- criterion 1

using Build = std::function<Var(Tape&, const Var&, Stream&)>;

struct OpProbe {
  OpKind kind;
  Shape shape;
  Build build;
};

std::vector<OpProbe> op_probes() {
  return {
      {OpKind::MatMul, {3, 4}, [](Tape& t, const Var& x, Stream& r) { return weighted_sum(t, matmul(x, t.constant(random_tensor({4, 2}, r))), r); }},
      {OpKind::Add, {2, 5}, [](Tape& t, const Var& x, Stream& r) { return weighted_sum(t, add(x, t.constant(random_tensor({2, 5}, r))), r); }},
      {OpKind::Mul, {2, 3}, [](Tape& t, const Var& x, Stream& r) { return weighted_sum(t, mul(x, x), r); }},
      {OpKind::Concat, {2, 3}, [](Tape& t, const Var& x, Stream& r) { return weighted_sum(t, concat({x, t.constant(random_tensor({1, 3}, r))}, 0), r); }},
      {OpKind::MeanPool, {4, 3}, [](Tape& t, const Var& x, Stream& r) { return weighted_sum(t, mean(x, 0), r); }},
      {OpKind::Softmax, {3, 5}, [](Tape& t, const Var& x, Stream& r) { return weighted_sum(t, softmax(x), r); }},
      {OpKind::Relu, {3, 4}, [](Tape& t, const Var& x, Stream& r) { return weighted_sum(t, relu(x), r); }},
      {OpKind::Affine, {2, 4},
       [](Tape& t, const Var& x, Stream& r) {
         return weighted_sum(t, affine(x, t.constant(random_tensor({4, 3}, r)), t.constant(random_tensor({3}, r))), r);
       }},
      {OpKind::LayerNorm, {3, 6},
       [](Tape& t, const Var& x, Stream& r) {
         return weighted_sum(t, layer_norm(x, t.constant(random_tensor({6}, r, 0.5, 1.5)), t.constant(random_tensor({6}, r))), r);
       }},
      {OpKind::CrossEntropy, {4, 3}, [](Tape&, const Var& x, Stream&) { return cross_entropy(x, {0, 2, 1, 2}); }},
      {OpKind::GradReverse, {2, 3}, [](Tape& t, const Var& x, Stream& r) { return weighted_sum(t, grad_reverse(x, -1.0), r); }},
      {OpKind::Transpose, {2, 3}, [](Tape& t, const Var& x, Stream& r) { return weighted_sum(t, transpose(x), r); }},
      {OpKind::Scale, {2, 3}, [](Tape& t, const Var& x, Stream& r) { return weighted_sum(t, scale(x, -1.7), r); }},
      {OpKind::Sum, {2, 3}, [](Tape&, const Var& x, Stream&) { return sum(mul(x, x)); }},
      {OpKind::GatherRows, {4, 2}, [](Tape& t, const Var& x, Stream& r) { return weighted_sum(t, gather_rows(x, {3, 0, 3}), r); }},
  };
}

/// Toy model state for the whole-loss checks.
struct Toy {
  synth::Benchmark bench;
  ModelState st;
  std::vector<PreparedVideo> src, tgt;
};

Toy make_toy() {
  BenchSpec spec;
  spec.n_cls = 2;
  spec.M = 3;
  spec.H = 2;
  spec.W = 2;
  spec.D = 8;
  spec.human_region = {1, 1};
  spec.n_source = 8;
  spec.n_target = 8;
  spec.seed = 21;
  Toy toy;
  toy.bench = synth::generate_dataset(spec);
  toy.st.model.n_cls = 2;
  toy.st.model.M = 3;
  toy.st.model.D = 8;
  toy.st.model.Dv = 8;
  toy.st.model.K = 4;
  toy.st.model.L_e = 1;
  toy.st.model.L_d = 1;
  toy.st.train.seed = 21;
  toy.st.train.context_classifier_epochs = 2;
  Stream rng(21, 77);
  model::init_params(toy.st.params, toy.st.model, rng);
  toy.src = prepare_dataset(toy.bench.source, toy.st.model);
  toy.tgt = prepare_dataset(toy.bench.target, toy.st.model);
  training::build_prototype_banks(toy.st, toy.src, toy.tgt, 5);
  return toy;
}

Verdict criterion_gradients() {
  Verdict v;
  const auto t0 = Clock::now();
  double worst_op = 0.0;
  std::set<OpKind> covered;
  const auto probes = op_probes();
  for (std::size_t i = 0; i < probes.size(); ++i) {
    double worst = 0.0;
    for (int p = 0; p < 5; ++p) {
      Stream pr(900 + i, static_cast<std::uint64_t>(p));
      const Tensor point = random_tensor(probes[i].shape, pr);
      const std::uint64_t build_seed = 1000 * i + static_cast<std::uint64_t>(p);
      worst = std::max(worst, grad_check(
                                  [&](Tape& t, const Var& x) {
                                    Stream r(build_seed, 1);
                                    return probes[i].build(t, x, r);
                                  },
                                  point));
    }
    covered.insert(probes[i].kind);
    if (worst >= 1e-4) v.note(std::string(op_name(probes[i].kind)) + fmt(" max rel err %.2e", worst));
    worst_op = std::max(worst_op, worst);
  }
  v.require(covered.size() == probes.size(), fmt("%.0f differentiable op kinds covered", static_cast<double>(covered.size())));
  v.require(worst_op < 1e-4, fmt("per-op max relative error %.2e < 1e-4", worst_op));

  // Whole training objective with respect to one clip feature map. The
  // reversal is switched off (coefficient -1 makes the layer an identity in
  // both directions) so the analytic gradient is the true one.
  Toy toy = make_toy();
  const std::vector<const PreparedVideo*> batch{&toy.src[0], &toy.src[1], &toy.tgt[0], &toy.tgt[1]};
  auto loss_value = [&]() {
    Tape t;
    Binder b(t, toy.st.params);
    Stream rng(3, 3);
    return training::total_loss(b, toy.st, batch, model::Stage::Context, -1.0, rng).breakdown.total;
  };
  double worst_loss = 0.0;
  std::size_t coords = 0;
  for (std::size_t vi = 0; vi < batch.size(); ++vi) {
    Tape t;
    Binder b(t, toy.st.params);
    Stream rng(3, 3);
    std::vector<model::Graph> graphs;
    auto loss = training::total_loss(b, toy.st, batch, model::Stage::Context, -1.0, rng, true, &graphs);
    t.backward(loss.total);
    const Tensor analytic = t.grad(graphs[vi].clips[1]);
    VideoRecord& rec = vi < 2 ? toy.bench.source.videos[vi] : toy.bench.target.videos[vi - 2];
    Tensor& clip = rec.clips[1];
    for (std::size_t k = 0; k < clip.size(); ++k) {
      const double orig = clip[k];
      clip[k] = orig + 1e-5;
      const double up = loss_value();
      clip[k] = orig - 1e-5;
      const double down = loss_value();
      clip[k] = orig;
      const double numeric = (up - down) / 2e-5;
      worst_loss = std::max(worst_loss, std::abs(analytic[k] - numeric) / std::max(1.0, std::abs(numeric)));
      ++coords;
    }
  }
  v.require(worst_loss < 1e-4, fmt("total loss w.r.t. clip maps (%.0f coords) max rel err %.2e < 1e-4",
                                   static_cast<double>(coords), worst_loss));
  const double secs = seconds_since(t0);
  v.require(secs < 60.0, fmt("runtime %.1f s < 60 s", secs));
  return v;
}

// ---------------------------------------------------------------- criterion 2

Verdict criterion_grl() {
  Verdict v;
  // Feature f = a x; discriminator logits f * (w, 0); target domain 1.
  auto feature_grad = [](double coef) {
    Tape t;
    auto a = t.leaf(Tensor::matrix(1, 1, {0.7}));
    auto w = t.leaf(Tensor::matrix(1, 2, {1.3, 0.0}));
    auto f = matmul(t.constant(Tensor::matrix(1, 1, {2.0})), a);
    t.backward(cross_entropy(matmul(grad_reverse(f, coef), w), {1}));
    return std::pair{t.grad(a)[0], t.grad(w)[0]};
  };
  const auto plain = feature_grad(-1.0);
  double worst = 0.0, worst_disc = 0.0;
  for (int i = 0; i <= 20; ++i) {
    const double p = i / 20.0;
    const double c = grl_coefficient(p);
    const auto rev = feature_grad(c);
    worst = std::max(worst, std::abs(rev.first + c * plain.first));
    worst_disc = std::max(worst_disc, std::abs(rev.second - plain.second));
  }
  v.require(worst <= 1e-10, fmt("feature gradient = -grl_coefficient(p) * plain, max deviation %.2e", worst));
  v.require(worst_disc <= 1e-10, fmt("discriminator gradient unaffected, max deviation %.2e", worst_disc));
  return v;
}

// ---------------------------------------------------------------- criterion 3

Verdict criterion_structure() {
  Verdict v;
  Stream rng(31, 0);
  bool partition_ok = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t h = 1 + rng.below(6), w = 1 + rng.below(6);
    std::vector<double> g(h * w);
    for (auto& x : g) x = rng.uniform();
    HumanMask m(h, w, g);
    const double lo = 0.05 + 0.9 * rng.uniform(), hi = std::min(0.99, lo + 0.3 * rng.uniform());
    auto a = masking::partition(m, lo), b = masking::partition(m, hi);
    std::set<std::size_t> all(a.human.begin(), a.human.end());
    for (auto j : a.context) partition_ok = partition_ok && all.insert(j).second;
    partition_ok = partition_ok && all.size() == h * w && *all.rbegin() == h * w - 1;
    partition_ok = partition_ok && std::includes(a.human.begin(), a.human.end(), b.human.begin(), b.human.end());
  }
  v.require(partition_ok, "1000 random masks: complete, disjoint, monotone in the threshold");

  double worst_row = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    Tape t;
    const std::size_t n = 1 + rng.below(6), m = 1 + rng.below(6), d = 1 + rng.below(8);
    auto q = t.constant(random_tensor({n, d}, rng, -3, 3)), k = t.constant(random_tensor({m, d}, rng, -3, 3));
    auto att = scaled_dot_product_attention(q, k, k);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < m; ++j) s += att.weights.value().at(i, j);
      worst_row = std::max(worst_row, std::abs(s - 1.0));
    }
  }
  v.require(worst_row <= 1e-9, fmt("attention row sums within %.1e of one", worst_row));

  bool shapes_ok = true, count_ok = true;
  for (std::size_t M : {3u, 5u})
    for (std::size_t Le : {1u, 2u})
      for (std::size_t Ld : {1u, 2u}) {
        ModelConfig cfg;
        cfg.n_cls = 3;
        cfg.M = M;
        cfg.D = 12;
        cfg.Dv = 6;
        cfg.L_e = Le;
        cfg.L_d = Ld;
        cfg.K = 4;
        ParamStore ps;
        Stream r(32, M * 100 + Le * 10 + Ld);
        model::init_params(ps, cfg, r);
        VideoRecord video;
        video.label = 0;
        for (std::size_t i = 0; i < M; ++i) {
          video.clips.push_back(random_tensor({4, cfg.D}, r));
          video.masks.emplace_back(2, 2, std::vector<double>{1, 0, 0, 1});
        }
        const auto pv = prepare_video(video, cfg, HumanMask(2, 2, {1, 0, 0, 1}));
        const Tensor bank = random_tensor({4, cfg.D}, r);
        Tape t;
        Binder b(t, ps);
        auto g = model::forward(b, cfg, pv, &bank, r);
        shapes_ok = shapes_ok && g.hm->z.shape() == Shape{M - 1, cfg.Dv} && g.ctx->final.shape() == Shape{M, cfg.Dv} &&
                    g.ctx->layers.size() == Le && g.hc->layers.size() == Ld && g.hc->final.shape() == Shape{M - 1, cfg.Dv};
        count_ok = count_ok && model::discriminator_count(ps) == Ld * (M - 1) + Le + 2 * (M - 1) + 1;
      }
  v.require(shapes_ok, "Z_hm (M-1 x Dv), Z_ctx (M x Dv), Z_hc (M-1 x Dv) for M in {3,5}, L_e, L_d in {1,2}");
  v.require(count_ok, "discriminator count = L_d(M-1) + L_e + 2(M-1) + 1");

  Toy toy = make_toy();
  double worst_sum = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    Tape t;
    Binder b(t, toy.st.params);
    Stream r(40, s);
    auto loss = training::total_loss(b, toy.st, {&toy.src[s % 8], &toy.tgt[(s + 3) % 8]}, model::Stage::Context, 0.5, r);
    const auto& d = loss.breakdown;
    worst_sum = std::max(worst_sum, std::abs(d.hm + d.ctx + d.hc + d.video - d.total));
  }
  v.require(worst_sum <= 1e-12, fmt("loss breakdown sums to the total within %.1e", worst_sum));
  return v;
}

// ---------------------------------------------------------------- criterion 4

Verdict criterion_kmeans() {
  Verdict v;
  bool monotone = true;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Stream rng(seed, 41);
    const std::size_t n = 20 + rng.below(80), d = 1 + rng.below(6), K = 1 + rng.below(10);
    Tensor x({n, d});
    for (auto& e : x.data()) e = rng.normal();
    auto r = prototypes::kmeans(x, K, rng);
    for (std::size_t i = 1; i < r.inertia_trace.size(); ++i)
      monotone = monotone && r.inertia_trace[i] <= r.inertia_trace[i - 1] * (1 + 1e-12);
  }
  v.require(monotone, "objective non-increasing over 100 random runs");

  Stream rng(42, 0);
  Tensor x({60, 5});
  for (auto& e : x.data()) e = 2.0 * rng.normal() + 0.5;
  auto one = prototypes::kmeans(x, 1, rng);
  double worst = 0.0;
  for (std::size_t k = 0; k < 5; ++k) {
    double m = 0;
    for (std::size_t i = 0; i < 60; ++i) m += x.at(i, k) / 60.0;
    worst = std::max(worst, std::abs(one.centroids.at(0, k) - m));
  }
  v.require(worst <= 1e-9, fmt("K=1 centroid equals the mean within %.1e", worst));

  Tensor blobs({80, 3});
  std::vector<double> m1(3, 0.0), m2(3, 0.0);
  for (std::size_t i = 0; i < 80; ++i)
    for (std::size_t k = 0; k < 3; ++k) {
      blobs.at(i, k) = 0.1 * rng.normal() + (k == 0 ? (i < 40 ? 4.0 : -4.0) : 0.0);
      (i < 40 ? m1 : m2)[k] += blobs.at(i, k) / 40.0;
    }
  auto two = prototypes::kmeans(blobs, 2, rng);
  const std::size_t a = two.centroids.at(0, 0) > 0 ? 0 : 1;
  double dev = 0.0;
  for (std::size_t k = 0; k < 3; ++k)
    dev = std::max({dev, std::abs(two.centroids.at(a, k) - m1[k]), std::abs(two.centroids.at(1 - a, k) - m2[k])});
  v.require(dev <= 0.1, fmt("two blobs recovered within %.3f of the closed-form means", dev));
  return v;
}

// ------------------------------------------------------------ criteria 5 to 7

struct SeedRuns {
  std::vector<eval::MetricsReport> full, hm, bb;
  double seconds = 0.0;
};

SeedRuns run_seed_matrix() {
  SeedRuns out;
  const auto t0 = Clock::now();
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  AblationFlags full{}, hm{false, true, true, false, false}, bb{true, true, true, false, false};
  const std::vector<std::pair<std::string, AblationFlags>> variants{{"Full", full}, {"Backbone+HmEnc", hm}, {"Backbone", bb}};
  std::vector<eval::MetricsReport> results(seeds.size() * variants.size());
  std::vector<synth::Benchmark> benches(seeds.size());
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    BenchSpec spec;
    spec.seed = seeds[s];
    benches[s] = synth::generate_dataset(spec);
  }
  parallel_for(results.size(), worker_threads(), [&](std::size_t job) {
    const std::size_t s = job / variants.size(), k = job % variants.size();
    const auto& bench = benches[s];
    ModelConfig mc;
    mc.n_cls = bench.source.n_cls;
    mc.M = bench.source.M;
    mc.D = bench.source.D;
    TrainConfig tc;
    tc.seed = seeds[s];
    const auto t1 = Clock::now();
    results[job] = run_variant(bench, variants[k].first, mc, tc, EvalConfig{}, variants[k].second).metrics;
    std::fprintf(stderr, "  seed %llu %-15s src %.3f tgt %.3f HR %.3f DBI %.3f (%.0f s)\n",
                 static_cast<unsigned long long>(seeds[s]), variants[k].first.c_str(), results[job].source_accuracy,
                 results[job].target_accuracy, *results[job].human_ratio, *results[job].davies_bouldin, seconds_since(t1));
  });
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    out.full.push_back(results[s * 3]);
    out.hm.push_back(results[s * 3 + 1]);
    out.bb.push_back(results[s * 3 + 2]);
  }
  out.seconds = seconds_since(t0);
  return out;
}

double mean_of(const std::vector<eval::MetricsReport>& rs, double (*get)(const eval::MetricsReport&)) {
  double s = 0;
  for (const auto& r : rs) s += get(r);
  return s / static_cast<double>(rs.size());
}

double src_acc(const eval::MetricsReport& m) { return m.source_accuracy; }
double tgt_acc(const eval::MetricsReport& m) { return m.target_accuracy; }
double hr_of(const eval::MetricsReport& m) { return *m.human_ratio; }
double dbi_of(const eval::MetricsReport& m) { return *m.davies_bouldin; }

Verdict criterion_spurious(const SeedRuns& r) {
  Verdict v;
  const double bb_src = mean_of(r.bb, src_acc), bb_tgt = mean_of(r.bb, tgt_acc);
  const double full_tgt = mean_of(r.full, tgt_acc), hm_tgt = mean_of(r.hm, tgt_acc);
  v.note(fmt("seed-mean target accuracy: Full %.3f, Backbone+HmEnc %.3f, Backbone %.3f", full_tgt, hm_tgt, bb_tgt));
  v.require(bb_src - bb_tgt >= 0.15, fmt("(a) Backbone source %.3f - target %.3f >= 0.15", bb_src, bb_tgt));
  v.require(full_tgt - bb_tgt >= 0.10, fmt("(b) Full %.3f - Backbone %.3f >= 0.10", full_tgt, bb_tgt));
  v.require(full_tgt >= hm_tgt && hm_tgt >= bb_tgt,
            fmt("(c) Full %.3f >= Backbone+HmEnc %.3f >= Backbone %.3f", full_tgt, hm_tgt, bb_tgt));
  v.require(r.seconds < 900.0, fmt("3-seed runtime %.0f s < 900 s", r.seconds));
  return v;
}

Verdict criterion_human_ratio(const SeedRuns& r) {
  Verdict v;
  const double full = mean_of(r.full, hr_of), bb = mean_of(r.bb, hr_of);
  v.require(full - bb >= 0.10, fmt("Full Human Ratio %.3f - Backbone %.3f >= 0.10", full, bb));
  return v;
}

Verdict criterion_dbi(const SeedRuns& r) {
  Verdict v;
  for (std::size_t s = 0; s < r.full.size(); ++s)
    v.note(fmt("seed %.0f: Full DBI %.3f, Backbone DBI %.3f", static_cast<double>(s + 1), dbi_of(r.full[s]), dbi_of(r.bb[s])));
  const double full = mean_of(r.full, dbi_of), bb = mean_of(r.bb, dbi_of);
  v.require(full < bb, fmt("seed-mean Full DBI %.3f < Backbone DBI %.3f", full, bb));
  return v;
}

// ---------------------------------------------------------------- criterion 8

BenchSpec small_spec() {
  BenchSpec s;
  s.n_cls = 3;
  s.M = 3;
  s.H = 3;
  s.W = 3;
  s.D = 12;
  s.n_source = 30;
  s.n_target = 30;
  s.seed = 8;
  return s;
}

ModelConfig small_model() {
  ModelConfig m;
  m.n_cls = 3;
  m.M = 3;
  m.D = 12;
  m.Dv = 8;
  m.L_e = 1;
  m.L_d = 1;
  return m;
}

TrainConfig small_train() {
  TrainConfig t;
  t.seed = 8;
  t.batch_pairs = 6;
  t.stage1.epochs = 3;
  t.stage2.epochs = 3;
  t.context_classifier_epochs = 2;
  return t;
}

Verdict criterion_determinism() {
  Verdict v;
  struct Run {
    std::string checkpoint, metrics;
  };
  auto once = [] {
    const auto bench = synth::generate_dataset(small_spec());
    auto r = run_variant(bench, "Full", small_model(), small_train(), EvalConfig{}, AblationFlags{});
    std::ostringstream os;
    checkpoint::write(os, r.train.state);
    return Run{os.str(), json(r.metrics).dump()};
  };
  const Run a = once();
  // Second and third runs concurrently, to show threads do not leak state.
  std::vector<Run> others(2);
  parallel_for(2, 2, [&](std::size_t i) { others[i] = once(); });
  bool ckpt = true, metrics = true;
  for (const auto& o : others) {
    ckpt = ckpt && o.checkpoint == a.checkpoint;
    metrics = metrics && o.metrics == a.metrics;
  }
  v.require(ckpt, fmt("three runs give bit-identical checkpoints (%.0f bytes)", static_cast<double>(a.checkpoint.size())));
  v.require(metrics, "three runs give identical metrics");
  return v;
}

// ---------------------------------------------------------------- criterion 9

Verdict criterion_ablation_rows() {
  Verdict v;
  BenchSpec spec;
  spec.n_source = 120;
  spec.n_target = 120;
  spec.seed = 9;
  const auto bench = synth::generate_dataset(spec);
  ModelConfig mc;
  TrainConfig tc;
  tc.seed = 9;
  tc.stage1.epochs = 6;
  tc.stage2.epochs = 6;
  EvalConfig ec;
  ec.human_ratio = false;
  ec.davies_bouldin = false;
  const auto rows = run_ablation(bench, mc, tc, ec);
  const std::string csv = eval::metrics_csv(rows);
  std::stringstream in(csv);
  std::string line;
  std::getline(in, line);
  std::map<std::string, double> target;
  while (std::getline(in, line)) {
    std::stringstream cells(line);
    std::string name, src, tgt;
    std::getline(cells, name, ',');
    std::getline(cells, src, ',');
    std::getline(cells, tgt, ',');
    target[name] = std::stod(tgt);
  }
  for (const char* row : {"Backbone", "Backbone+HmEnc", "Backbone+CtxEnc", "Backbone+HmEnc+CtxEnc", "Full"})
    v.require(target.count(row) == 1, std::string("row ") + row + " present");
  for (const char* row : {"Full-Prototypes", "Full-Masking"}) {
    const bool ok = target.count(row) == 1 && std::isfinite(target[row]);
    v.require(ok, std::string("row ") + row + (ok ? fmt(" present, target accuracy %.3f", target[row]) : " missing"));
  }
  if (target.count("Full") && target.count("Full-Prototypes") && target.count("Full-Masking"))
    v.note(fmt("directional (not gated): Full %.3f vs Full-Prototypes %.3f, Full-Masking %.3f", target["Full"],
               target["Full-Prototypes"], target["Full-Masking"]));
  return v;
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](int id, const char* title, const std::function<Verdict()>& fn) {
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v.require(false, std::string("exception: ") + e.what());
    }
    std::printf("[%s] criterion %d: %s (%.1f s)\n", v.pass ? "PASS" : "FAIL", id, title, seconds_since(t0));
    for (const auto& n : v.notes) std::printf("       %s\n", n.c_str());
    std::fflush(stdout);
    failures += v.pass ? 0 : 1;
  };

  report(1, "gradient correctness", criterion_gradients);
  report(2, "gradient reversal min-max property", criterion_grl);
  report(3, "structural invariants", criterion_structure);
  report(4, "k-means oracle", criterion_kmeans);

  SeedRuns runs;
  std::string matrix_error;
  try {
    runs = run_seed_matrix();
  } catch (const std::exception& e) {
    matrix_error = e.what();
  }
  auto on_runs = [&](Verdict (*fn)(const SeedRuns&)) {
    return [&, fn] {
      if (!matrix_error.empty()) throw std::runtime_error("seed matrix failed: " + matrix_error);
      return fn(runs);
    };
  };
  report(5, "spurious-correlation reproduction (3 seeds)", on_runs(criterion_spurious));
  report(6, "Human Ratio gap", on_runs(criterion_human_ratio));
  report(7, "Davies-Bouldin ordering", on_runs(criterion_dbi));
  report(8, "determinism", criterion_determinism);
  report(9, "ablation rows", criterion_ablation_rows);

  std::printf("%d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
