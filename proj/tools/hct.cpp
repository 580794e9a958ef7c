// hct: generate / train / eval / attribute / ablate / report.

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "hct/ablation.hpp"

namespace fs = std::filesystem;
using namespace hct;

namespace {

constexpr const char* kArtifactVersion = "hct-artifact-1";
constexpr const char* kCheckpointFile = "model.ckpt";
constexpr const char* kTraceFile = "loss.csv";
constexpr const char* kManifestFile = "manifest.json";
constexpr const char* kMetricsFile = "metrics.json";
constexpr const char* kAblationFile = "ablation.csv";

struct Options {
  std::string config;
  std::string data;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string ablation;
};

/// SHA-1 of "blob <size>\0<content>", as git computes object ids.
std::string git_blob_hash(const std::string& content) {
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1 || EVP_DigestUpdate(ctx, header.data(), header.size()) != 1 ||
      EVP_DigestUpdate(ctx, content.data(), content.size()) != 1 || EVP_DigestFinal_ex(ctx, md, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("sha1 failed");
  }
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

RunConfig load_config(const Options& o) {
  RunConfig c = o.config.empty() ? parse_run_config(json::object()) : parse_run_config(io::read_file(o.config));
  if (o.seed) {
    c.bench.seed = *o.seed;
    c.train.seed = *o.seed;
  }
  std::stringstream ss(o.ablation);
  for (std::string tok; std::getline(ss, tok, ',');) apply_ablation_token(c.model.ablation, tok);
  c.finalize();
  return c;
}

fs::path data_dir(const Options& o, const RunConfig& c) { return o.data.empty() ? fs::path(c.paths.data) : fs::path(o.data); }
fs::path out_dir(const Options& o, const RunConfig& c) { return o.out.empty() ? fs::path(c.paths.out) : fs::path(o.out); }

void check_geometry(const Dataset& ds, const BenchSpec& b) {
  if (ds.n_cls != b.n_cls || ds.M != b.M || ds.H != b.H || ds.W != b.W || ds.D != b.D)
    throw ConfigError("dataset geometry (n_cls, M, H, W, D) does not match the bench section of the config");
}

struct LoadedData {
  Dataset source, target;
  std::string source_hash, target_hash;
};

LoadedData load_unlabelled(const fs::path& dir, const BenchSpec& b) {
  LoadedData d;
  const auto src_bytes = io::read_file(dir / synth::kSourceFile);
  const auto tgt_bytes = io::read_file(dir / synth::kTargetFile);
  d.source_hash = git_blob_hash(src_bytes);
  d.target_hash = git_blob_hash(tgt_bytes);
  d.source = synth::read_dataset(dir / synth::kSourceFile);
  d.target = synth::read_dataset(dir / synth::kTargetFile);
  check_geometry(d.source, b);
  check_geometry(d.target, b);
  return d;
}

void write_json(const fs::path& path, const json& j) { io::write_file(path, j.dump(2) + "\n"); }

int cmd_generate(const Options& o) {
  const auto c = load_config(o);
  const auto dir = o.out.empty() ? fs::path(c.paths.data) : fs::path(o.out);
  fs::create_directories(dir);
  synth::write_benchmark(dir, synth::generate_dataset(c.bench), c.bench);
  std::cout << "wrote " << c.bench.n_source << " source and " << c.bench.n_target << " target videos to " << dir.string()
            << "\n";
  return 0;
}

int cmd_train(const Options& o) {
  const auto c = load_config(o);
  const auto data = load_unlabelled(data_dir(o, c), c.bench);
  const auto dir = out_dir(o, c);
  fs::create_directories(dir);
  auto r = training::two_stage_train(data.source, data.target, c.model, c.train, [](const TraceRow& row) {
    if (row.step % 200 == 0) std::cerr << "stage " << row.stage << " step " << row.step << " loss " << row.total << "\n";
  });
  checkpoint::save(dir / kCheckpointFile, r.state);
  training::write_trace_csv(dir / kTraceFile, r.trace);
  json manifest{{"artifact_version", kArtifactVersion},
                {"command", "train"},
                {"variant", variant_name(c.model.variant())},
                {"seed", c.train.seed},
                {"config", c},
                {"dataset", {{"source", data.source_hash}, {"target", data.target_hash}}},
                {"checkpoint", git_blob_hash(io::read_file(dir / kCheckpointFile))},
                {"steps", {{"stage1", r.stage1_steps}, {"total", r.trace.size()}}}};
  write_json(dir / kManifestFile, manifest);
  std::cout << "checkpoint " << (dir / kCheckpointFile).string() << " " << manifest["checkpoint"].get<std::string>() << "\n";
  return 0;
}

ModelState load_run(const fs::path& dir, const RunConfig& c) {
  auto st = checkpoint::load(dir / kCheckpointFile);
  if (st.model.M != c.bench.M || st.model.D != c.bench.D || st.model.n_cls != c.bench.n_cls)
    throw ConfigError("checkpoint geometry does not match the config");
  return st;
}

int cmd_eval(const Options& o) {
  const auto c = load_config(o);
  const auto ddir = data_dir(o, c);
  const auto data = load_unlabelled(ddir, c.bench);
  const auto dir = out_dir(o, c);
  const auto st = load_run(dir, c);
  const auto labels = synth::read_eval_labels(ddir / synth::kTargetLabelFile);
  const auto m = eval::evaluate(st, data.source, data.target, labels, c.eval);
  json j = m;
  j["dataset"] = {{"source", data.source_hash}, {"target", data.target_hash}};
  j["human_ratio_denominator"] = denominator_name(c.eval.denominator);
  write_json(dir / kMetricsFile, j);
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_attribute(const Options& o) {
  const auto c = load_config(o);
  const auto ddir = data_dir(o, c);
  const auto data = load_unlabelled(ddir, c.bench);
  const auto dir = out_dir(o, c);
  const auto st = load_run(dir, c);
  const auto preds = training::predict_all(st, data.target);
  const auto avg = dataset_average_mask(data.target);
  const auto adir = dir / "attributions";
  fs::create_directories(adir);
  double total = 0.0;
  std::size_t keyframes = 0, skipped = 0;
  json per_video = json::array();
  for (std::size_t i = 0; i < data.target.videos.size(); ++i) {
    const auto& v = data.target.videos[i];
    const auto map = eval::attribution_map(v, st, preds[i].label, avg, c.eval.threshold_coef);
    char name[32];
    std::snprintf(name, sizeof name, "target_%05zu.bin", i);
    eval::dump_attribution(adir / name, map);
    const auto hr = eval::human_ratio(map, v.masks, st.model.mask_threshold, c.eval.denominator);
    total += hr.ratio * static_cast<double>(hr.keyframes);
    keyframes += hr.keyframes;
    skipped += hr.skipped;
    per_video.push_back({{"video", i}, {"predicted", preds[i].label}, {"human_ratio", hr.ratio}});
  }
  json j{{"human_ratio", keyframes ? total / static_cast<double>(keyframes) : 0.0},
         {"keyframes", keyframes},
         {"skipped_keyframes", skipped},
         {"threshold_coef", c.eval.threshold_coef},
         {"denominator", denominator_name(c.eval.denominator)},
         {"grid", {st.model.M, c.bench.H, c.bench.W}},
         {"videos", per_video}};
  write_json(dir / "human_ratio.json", j);
  std::cout << "human ratio " << j["human_ratio"].get<double>() << " over " << keyframes << " keyframes\n";
  return 0;
}

int cmd_ablate(const Options& o) {
  const auto c = load_config(o);
  const auto ddir = data_dir(o, c);
  const auto data = load_unlabelled(ddir, c.bench);
  synth::Benchmark bench{data.source, data.target, synth::read_eval_labels(ddir / synth::kTargetLabelFile)};
  const auto dir = out_dir(o, c);
  fs::create_directories(dir);
  auto rows = run_ablation(bench, c.model, c.train, c.eval);
  io::write_file(dir / kAblationFile, eval::metrics_csv(rows));
  write_json(dir / kManifestFile, json{{"artifact_version", kArtifactVersion},
                                       {"command", "ablate"},
                                       {"seed", c.train.seed},
                                       {"config", c},
                                       {"dataset", {{"source", data.source_hash}, {"target", data.target_hash}}}});
  std::cout << "wrote " << (dir / kAblationFile).string() << "\n";
  return 0;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

int cmd_report(const Options& o) {
  const fs::path dir = o.out.empty() ? fs::path(load_config(o).paths.out) : fs::path(o.out);
  std::stringstream in(io::read_file(dir / kAblationFile));
  std::string line;
  if (!std::getline(in, line) || line.rfind("variant,", 0) != 0) throw IoError("not an ablation CSV: " + (dir / kAblationFile).string());
  std::printf("%-24s %10s %10s %12s %8s\n", "variant", "source", "target", "human_ratio", "DBI");
  auto pct = [](const std::string& s) {
    if (s.empty()) return std::string("-");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", 100.0 * std::stod(s));
    return std::string(buf);
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != 5) throw IoError("malformed ablation row: " + line);
    std::string dbi = "-";
    if (!cells[4].empty()) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.3f", std::stod(cells[4]));
      dbi = buf;
    }
    std::printf("%-24s %10s %10s %12s %8s\n", cells[0].c_str(), pct(cells[1]).c_str(), pct(cells[2]).c_str(),
                pct(cells[3]).c_str(), dbi.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Human-centric domain adaptive action recognition on a synthetic benchmark"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON run config");
    sub->add_option("--data", o.data, "dataset directory");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--seed", seed, "overrides bench.seed and train.seed");
    sub->add_option("--ablation", o.ablation, "comma list: no_hm_encoder,no_ctx_encoder,no_decoder,no_prototypes,no_masking,backbone");
  };
  std::map<std::string, std::function<int(const Options&)>> commands{
      {"generate", cmd_generate}, {"train", cmd_train},   {"eval", cmd_eval},
      {"attribute", cmd_attribute}, {"ablate", cmd_ablate}, {"report", cmd_report}};
  const std::map<std::string, std::string> help{{"generate", "write a synthetic benchmark"},
                                                {"train", "two-stage training; writes checkpoint, loss CSV and manifest"},
                                                {"eval", "accuracy, Human Ratio and DBI of a trained run"},
                                                {"attribute", "dump attribution maps and the Human Ratio"},
                                                {"ablate", "train every ablation row and write a comparison CSV"},
                                                {"report", "print an ablation CSV as a table"}};
  for (const auto& [name, _] : commands) add_common(app.add_subcommand(name, help.at(name)));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  for (auto* sub : app.get_subcommands()) {
    if (sub->count("--seed")) o.seed = seed;
    try {
      worker_threads();
      return commands.at(sub->get_name())(o);
    } catch (const ConfigError& e) {
      std::cerr << "config error: " << e.what() << "\n";
      return 1;
    } catch (const IoError& e) {
      std::cerr << "i/o error: " << e.what() << "\n";
      return 2;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 3;
    }
  }
  return 1;
}
