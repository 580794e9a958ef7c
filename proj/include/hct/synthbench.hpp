#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "hct/diffcore.hpp"
#include "hct/io.hpp"
#include "hct/masking.hpp"
#include "hct/rng.hpp"

namespace hct {

enum class Domain : int { Source = 0, Target = 1 };

inline const char* domain_name(Domain d) { return d == Domain::Source ? "source" : "target"; }

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// One video: M clip feature maps, one human mask per clip, label and domain.
struct VideoRecord {
  std::vector<Tensor> clips;      // M tensors of shape (H*W) x D
  std::vector<HumanMask> masks;   // M masks of H x W
  int label = -1;                 // -1 when withheld
  Domain domain = Domain::Source;

  std::size_t num_clips() const { return clips.size(); }
  std::size_t positions() const { return clips.empty() ? 0 : clips.front().rows(); }
  std::size_t feature_dim() const { return clips.empty() ? 0 : clips.front().cols(); }
};

struct Dataset {
  std::size_t n_cls = 0, M = 0, H = 0, W = 0, D = 0;
  Domain domain = Domain::Source;
  std::vector<VideoRecord> videos;
};

struct HumanRegion {
  std::size_t height = 2;
  std::size_t width = 2;
};

struct BenchSpec {
  std::size_t n_cls = 6;
  std::size_t M = 5;
  std::size_t H = 4;
  std::size_t W = 4;
  std::size_t D = 32;
  std::size_t n_source = 600;
  std::size_t n_target = 600;
  HumanRegion human_region;
  double sigma = 0.3;
  double rho_source = 1.0;
  double rho_target = 0.0;
  double shared_context_fraction = 0.4;
  std::uint64_t seed = 1;

  void validate() const {
    if (n_cls < 2) throw ConfigError("bench: n_cls must be at least 2");
    if (M < 2) throw ConfigError("bench: M must be at least 2");
    if (H == 0 || W == 0) throw ConfigError("bench: empty spatial grid");
    if (D < 4 * n_cls) throw ConfigError("bench: D must be at least 4*n_cls to hold orthogonal latents");
    if (n_source == 0 || n_target == 0) throw ConfigError("bench: empty split");
    if (human_region.height == 0 || human_region.width == 0 || human_region.height > H || human_region.width > W)
      throw ConfigError("bench: human_region does not fit inside H x W");
    if (!(sigma >= 0.0)) throw ConfigError("bench: sigma must be nonnegative");
    for (double r : {rho_source, rho_target, shared_context_fraction})
      if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("bench: correlation out of [0,1]");
  }
};

inline void to_json(nlohmann::json& j, const BenchSpec& s) {
  j = nlohmann::json{{"n_cls", s.n_cls},
                     {"M", s.M},
                     {"H", s.H},
                     {"W", s.W},
                     {"D", s.D},
                     {"n_source", s.n_source},
                     {"n_target", s.n_target},
                     {"human_region", {{"height", s.human_region.height}, {"width", s.human_region.width}}},
                     {"sigma", s.sigma},
                     {"rho_source", s.rho_source},
                     {"rho_target", s.rho_target},
                     {"shared_context_fraction", s.shared_context_fraction},
                     {"seed", s.seed}};
}

namespace synth {

/// Orthonormal latent directions: per class a human plane (u, v), a tool
/// direction and a scene direction.
struct LatentBasis {
  std::size_t n_cls = 0;
  std::size_t D = 0;
  std::vector<std::vector<double>> human_u, human_v, tool, scene;
  std::vector<double> phase_step;    // per-class clip-to-clip rotation
  std::vector<std::size_t> derangement;  // target scene remap
};

inline constexpr double kHumanAmplitude = 2.0;
/// Probability that a video's tool is its own class's tool (else uniform over tools).
inline constexpr double kToolReliability = 1.0;
inline constexpr std::uint64_t kBasisStream = 0xB0B0B0B0ULL;

inline LatentBasis make_basis(const BenchSpec& spec) {
  spec.validate();
  Stream rng(spec.seed, kBasisStream);
  const std::size_t need = 4 * spec.n_cls;
  std::vector<std::vector<double>> dirs;
  while (dirs.size() < need) {
    std::vector<double> v(spec.D);
    for (auto& x : v) x = rng.normal();
    for (const auto& u : dirs) {
      double dot = 0.0;
      for (std::size_t k = 0; k < spec.D; ++k) dot += v[k] * u[k];
      for (std::size_t k = 0; k < spec.D; ++k) v[k] -= dot * u[k];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-6) continue;
    for (auto& x : v) x /= norm;
    dirs.push_back(std::move(v));
  }
  LatentBasis b;
  b.n_cls = spec.n_cls;
  b.D = spec.D;
  for (std::size_t c = 0; c < spec.n_cls; ++c) {
    b.human_u.push_back(dirs[4 * c]);
    b.human_v.push_back(dirs[4 * c + 1]);
    b.tool.push_back(dirs[4 * c + 2]);
    b.scene.push_back(dirs[4 * c + 3]);
    // Rotation by a non-multiple of 2*pi/M per clip: the clip mean of the human signal is zero.
    const std::size_t m = 1 + c % (spec.M - 1);
    b.phase_step.push_back(2.0 * std::numbers::pi * static_cast<double>(m) / static_cast<double>(spec.M));
  }
  std::vector<std::size_t> perm(spec.n_cls);
  for (;;) {
    for (std::size_t c = 0; c < spec.n_cls; ++c) perm[c] = c;
    rng.shuffle(perm);
    bool fixed = false;
    for (std::size_t c = 0; c < spec.n_cls; ++c) fixed = fixed || perm[c] == c;
    if (!fixed) break;
  }
  b.derangement = perm;
  return b;
}

/// Scene type drawn for a video of class `label` in `domain`.
inline std::size_t draw_scene(const BenchSpec& spec, const LatentBasis& basis, std::size_t label, Domain domain,
                              Stream& rng) {
  const double rho = domain == Domain::Source ? spec.rho_source : spec.rho_target;
  const std::size_t mapped = domain == Domain::Source ? label : basis.derangement[label];
  if (rng.uniform() < rho) return mapped;
  return static_cast<std::size_t>(rng.below(spec.n_cls));
}

inline VideoRecord generate_video(const BenchSpec& spec, const LatentBasis& basis, Domain domain, std::size_t index) {
  Stream rng(spec.seed, (static_cast<std::uint64_t>(domain) + 1) << 40 | index);
  const std::size_t P = spec.H * spec.W;
  VideoRecord v;
  v.domain = domain;
  const std::size_t label = index % spec.n_cls;
  v.label = static_cast<int>(label);
  const std::size_t scene = draw_scene(spec, basis, label, domain, rng);
  const std::size_t tool = rng.uniform() < kToolReliability ? label : static_cast<std::size_t>(rng.below(spec.n_cls));
  const std::size_t top = static_cast<std::size_t>(rng.below(spec.H - spec.human_region.height + 1));
  const std::size_t left = static_cast<std::size_t>(rng.below(spec.W - spec.human_region.width + 1));
  const double phase0 = rng.uniform(0.0, 2.0 * std::numbers::pi);

  std::vector<double> mask(P, 0.0);
  for (std::size_t r = top; r < top + spec.human_region.height; ++r)
    for (std::size_t c = left; c < left + spec.human_region.width; ++c) mask[r * spec.W + c] = 1.0;

  const double f = spec.shared_context_fraction;
  for (std::size_t i = 0; i < spec.M; ++i) {
    const double phi = phase0 + basis.phase_step[label] * static_cast<double>(i);
    const double a = kHumanAmplitude * std::cos(phi), b = kHumanAmplitude * std::sin(phi);
    Tensor clip({P, spec.D});
    for (std::size_t p = 0; p < P; ++p) {
      double* row = clip.data().data() + p * spec.D;
      if (mask[p] == 1.0) {
        for (std::size_t k = 0; k < spec.D; ++k) row[k] = a * basis.human_u[label][k] + b * basis.human_v[label][k];
      } else {
        for (std::size_t k = 0; k < spec.D; ++k) row[k] = f * basis.tool[tool][k] + (1.0 - f) * basis.scene[scene][k];
      }
      for (std::size_t k = 0; k < spec.D; ++k) row[k] += spec.sigma * rng.normal();
    }
    v.clips.push_back(std::move(clip));
    v.masks.emplace_back(spec.H, spec.W, mask);
  }
  return v;
}

inline Dataset generate_split(const BenchSpec& spec, const LatentBasis& basis, Domain domain) {
  Dataset ds;
  ds.n_cls = spec.n_cls;
  ds.M = spec.M;
  ds.H = spec.H;
  ds.W = spec.W;
  ds.D = spec.D;
  ds.domain = domain;
  const std::size_t n = domain == Domain::Source ? spec.n_source : spec.n_target;
  ds.videos.reserve(n);
  for (std::size_t i = 0; i < n; ++i) ds.videos.push_back(generate_video(spec, basis, domain, i));
  return ds;
}

struct Benchmark {
  Dataset source;         // labeled
  Dataset target;         // labels withheld (-1)
  std::vector<int> target_labels;  // evaluation only
};

inline Benchmark generate_dataset(const BenchSpec& spec) {
  spec.validate();
  const LatentBasis basis = make_basis(spec);
  Benchmark b;
  b.source = generate_split(spec, basis, Domain::Source);
  b.target = generate_split(spec, basis, Domain::Target);
  for (auto& v : b.target.videos) {
    b.target_labels.push_back(v.label);
    v.label = -1;
  }
  return b;
}

/// Human-only nearest-latent classifier: the class whose human plane holds
/// the most energy over all human positions of all clips.
inline int oracle_human_classify(const VideoRecord& v, const LatentBasis& basis, double threshold = 0.5) {
  std::vector<double> energy(basis.n_cls, 0.0);
  for (std::size_t i = 0; i < v.num_clips(); ++i) {
    const auto part = masking::partition(v.masks[i], threshold);
    for (std::size_t p : part.human) {
      const double* x = v.clips[i].data().data() + p * basis.D;
      for (std::size_t c = 0; c < basis.n_cls; ++c) {
        double du = 0.0, dv = 0.0;
        for (std::size_t k = 0; k < basis.D; ++k) {
          du += x[k] * basis.human_u[c][k];
          dv += x[k] * basis.human_v[c][k];
        }
        energy[c] += du * du + dv * dv;
      }
    }
  }
  return static_cast<int>(std::max_element(energy.begin(), energy.end()) - energy.begin());
}

// Dataset file: magic, version, N_cls, M, H, W, D, count, domain; then per
// video the label (-1 when withheld), M*H*W*D features and M*H*W mask values.
inline constexpr char kDatasetMagic[9] = "HCTDATA\0";
inline constexpr char kLabelMagic[9] = "HCTLABL\0";
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void write_dataset(const std::filesystem::path& path, const Dataset& ds) {
  auto os = io::open_out(path);
  io::write_magic(os, kDatasetMagic);
  io::write_le<std::uint32_t>(os, kDatasetVersion);
  for (std::size_t v : {ds.n_cls, ds.M, ds.H, ds.W, ds.D}) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(v));
  io::write_le<std::uint64_t>(os, ds.videos.size());
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.domain));
  for (const auto& v : ds.videos) {
    io::write_le<std::int32_t>(os, v.label);
    for (const auto& c : v.clips) io::write_doubles(os, c.values());
    for (const auto& m : v.masks) io::write_doubles(os, m.grid);
  }
  os.flush();
  if (!os) throw IoError("write failed: " + path.string());
}

inline Dataset read_dataset(const std::filesystem::path& path) {
  auto is = io::open_in(path);
  io::expect_magic(is, kDatasetMagic, path.string());
  const auto version = io::read_le<std::uint32_t>(is);
  if (version != kDatasetVersion) throw IoError("unsupported dataset version " + std::to_string(version));
  Dataset ds;
  ds.n_cls = io::read_le<std::uint32_t>(is);
  ds.M = io::read_le<std::uint32_t>(is);
  ds.H = io::read_le<std::uint32_t>(is);
  ds.W = io::read_le<std::uint32_t>(is);
  ds.D = io::read_le<std::uint32_t>(is);
  const auto count = io::read_le<std::uint64_t>(is);
  const auto tag = io::read_le<std::uint32_t>(is);
  if (tag > 1) throw IoError("bad domain tag in " + path.string());
  ds.domain = static_cast<Domain>(tag);
  const std::size_t P = ds.H * ds.W;
  ds.videos.reserve(count);
  for (std::uint64_t n = 0; n < count; ++n) {
    VideoRecord v;
    v.domain = ds.domain;
    v.label = io::read_le<std::int32_t>(is);
    for (std::size_t i = 0; i < ds.M; ++i) {
      Tensor c({P, ds.D});
      io::read_doubles(is, c.data().data(), c.size());
      v.clips.push_back(std::move(c));
    }
    for (std::size_t i = 0; i < ds.M; ++i) {
      std::vector<double> g(P);
      io::read_doubles(is, g.data(), P);
      v.masks.emplace_back(ds.H, ds.W, std::move(g));
    }
    ds.videos.push_back(std::move(v));
  }
  return ds;
}

inline void write_labels(const std::filesystem::path& path, const std::vector<int>& labels) {
  auto os = io::open_out(path);
  io::write_magic(os, kLabelMagic);
  io::write_le<std::uint32_t>(os, kDatasetVersion);
  io::write_le<std::uint64_t>(os, labels.size());
  for (int l : labels) io::write_le<std::int32_t>(os, l);
}

/// Evaluation-only loader for withheld target labels.
inline std::vector<int> read_eval_labels(const std::filesystem::path& path) {
  auto is = io::open_in(path);
  io::expect_magic(is, kLabelMagic, path.string());
  if (io::read_le<std::uint32_t>(is) != kDatasetVersion) throw IoError("unsupported label file version");
  const auto n = io::read_le<std::uint64_t>(is);
  std::vector<int> labels(n);
  for (auto& l : labels) l = io::read_le<std::int32_t>(is);
  return labels;
}

inline constexpr const char* kSourceFile = "source.bin";
inline constexpr const char* kTargetFile = "target.bin";
inline constexpr const char* kTargetLabelFile = "target_labels.eval.bin";
inline constexpr const char* kSpecFile = "bench.json";

inline void write_benchmark(const std::filesystem::path& dir, const Benchmark& b, const BenchSpec& spec) {
  std::filesystem::create_directories(dir);
  write_dataset(dir / kSourceFile, b.source);
  write_dataset(dir / kTargetFile, b.target);
  write_labels(dir / kTargetLabelFile, b.target_labels);
  io::write_file(dir / kSpecFile, nlohmann::json(spec).dump(2) + "\n");
}

}  // namespace synth
}  // namespace hct
