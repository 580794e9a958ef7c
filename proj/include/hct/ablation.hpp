#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "hct/evalsuite.hpp"

namespace hct {

/// Worker cap from HCT_THREADS, else the hardware count.
inline std::size_t worker_threads() {
  if (const char* env = std::getenv("HCT_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || n < 1) throw ConfigError("HCT_THREADS must be a positive integer");
    return static_cast<std::size_t>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs job(i) for i in [0, n) on up to `threads` workers; rethrows the first failure.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& job) {
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  auto worker = [&] {
    for (std::size_t i; (i = next++) < n;) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct AblationRow {
  std::string name;
  AblationFlags flags;
};

inline std::vector<AblationRow> ablation_rows() {
  AblationFlags bb{true, true, true, false, false};
  AblationFlags hm{false, true, true, false, false};
  AblationFlags ctx{true, false, true, false, false};
  AblationFlags late{false, false, true, false, false};
  AblationFlags full{};
  AblationFlags no_proto = full, no_mask = full;
  no_proto.no_prototypes = true;
  no_mask.no_masking = true;
  return {{"Backbone", bb},
          {"Backbone+HmEnc", hm},
          {"Backbone+CtxEnc", ctx},
          {"Backbone+HmEnc+CtxEnc", late},
          {"Full", full},
          {"Full-Prototypes", no_proto},
          {"Full-Masking", no_mask}};
}

struct AblationResult {
  eval::MetricsReport metrics;
  TrainResult train;
};

inline AblationResult run_variant(const synth::Benchmark& bench, const std::string& name, ModelConfig model,
                                  const TrainConfig& train, const EvalConfig& ec, const AblationFlags& flags) {
  model.ablation = flags;
  AblationResult r{{}, training::two_stage_train(bench.source, bench.target, model, train)};
  r.metrics = eval::evaluate(r.train.state, bench.source, bench.target, bench.target_labels, ec);
  r.metrics.variant = name;
  return r;
}

/// Trains and evaluates every row independently; rows run concurrently.
inline std::vector<eval::MetricsReport> run_ablation(const synth::Benchmark& bench, const ModelConfig& model,
                                               const TrainConfig& train, const EvalConfig& ec,
                                               std::size_t threads = worker_threads()) {
  const auto rows = ablation_rows();
  std::vector<eval::MetricsReport> out(rows.size());
  parallel_for(rows.size(), threads, [&](std::size_t i) {
    out[i] = run_variant(bench, rows[i].name, model, train, ec, rows[i].flags).metrics;
  });
  return out;
}

}  // namespace hct
