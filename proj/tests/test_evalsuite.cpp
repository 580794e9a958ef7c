#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "hct/evalsuite.hpp"

using namespace hct;
namespace fs = std::filesystem;

namespace {

AttributionMap map_of(std::size_t h, std::size_t w, std::vector<std::vector<double>> clips) {
  AttributionMap m;
  m.height = h;
  m.width = w;
  m.clips = std::move(clips);
  return m;
}

BenchSpec small_bench() {
  BenchSpec s;
  s.n_cls = 3;
  s.M = 3;
  s.H = 3;
  s.W = 3;
  s.D = 12;
  s.n_source = 30;
  s.n_target = 15;
  s.seed = 11;
  return s;
}

ModelConfig small_model(const BenchSpec& b) {
  ModelConfig m;
  m.n_cls = b.n_cls;
  m.M = b.M;
  m.D = b.D;
  m.Dv = 6;
  m.L_e = 1;
  m.L_d = 1;
  m.K = 3;
  return m;
}

TrainConfig short_train() {
  TrainConfig t;
  t.seed = 2;
  t.batch_pairs = 5;
  t.stage1.epochs = 4;
  t.stage2.epochs = 1;
  t.context_classifier_epochs = 1;
  return t;
}

}  // namespace

TEST(Accuracy, AllCorrect) {
  EXPECT_EQ(eval::accuracy({0, 1, 2, 1}, {0, 1, 2, 1}), 1.0);
  EXPECT_EQ(eval::accuracy({0, 0}, {1, 1}), 0.0);
  EXPECT_THROW(eval::accuracy({}, {}), EvalError);
  EXPECT_THROW(eval::accuracy({1}, {1, 2}), EvalError);
}

TEST(Accuracy, RandomGuessingIsChance) {
  Stream rng(1, 0);
  std::vector<int> p, y;
  for (int i = 0; i < 10000; ++i) {
    p.push_back(static_cast<int>(rng.below(4)));
    y.push_back(static_cast<int>(rng.below(4)));
  }
  EXPECT_NEAR(eval::accuracy(p, y), 0.25, 0.02);
}

TEST(Accuracy, EqualsConfusionTrace) {
  Stream rng(2, 0);
  std::vector<int> p, y;
  for (int i = 0; i < 500; ++i) {
    y.push_back(static_cast<int>(rng.below(5)));
    p.push_back(rng.uniform() < 0.6 ? y.back() : static_cast<int>(rng.below(5)));
  }
  auto cm = eval::confusion_matrix(p, y, 5);
  std::size_t trace = 0, total = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    trace += cm[i][i];
    for (auto c : cm[i]) total += c;
  }
  EXPECT_EQ(total, 500u);
  EXPECT_DOUBLE_EQ(eval::accuracy(p, y), static_cast<double>(trace) / 500.0);
  EXPECT_THROW(eval::confusion_matrix({7}, {0}, 5), EvalError);
}

TEST(Attribution, LinearScoreOnOnePosition) {
  // score = <w, x_j> for a single position j of a 2x2 grid.
  Stream rng(3, 0);
  Tensor x({4, 3});
  for (auto& v : x.data()) v = rng.normal();
  Tape t;
  auto leaf = t.leaf(x);
  const std::size_t j = 2;
  Tensor w({3, 1});
  for (std::size_t c = 0; c < 3; ++c) w.at(c, 0) = x.at(j, c);
  auto score = sum(matmul(gather_rows(leaf, {j}), t.constant(w)));
  t.backward(score);
  auto map = eval::attribution_from({t.grad(leaf)}, {x}, 2, 2);
  EXPECT_EQ(map.clips[0], (std::vector<double>{0, 0, 1, 0}));
}

TEST(Attribution, NegativeEvidenceIsRectified) {
  Tensor x = Tensor::matrix(2, 1, {1.0, 2.0});
  Tensor g = Tensor::matrix(2, 1, {-3.0, 0.5});
  auto map = eval::attribution_from({g}, {x}, 1, 2);
  EXPECT_EQ(map.clips[0], (std::vector<double>{0.0, 1.0}));
  EXPECT_THROW(eval::attribution_from({Tensor::matrix(2, 1, {NAN, 0})}, {x}, 1, 2), NumericError);
}

class TrainedFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    spec = new BenchSpec(small_bench());
    bench = new synth::Benchmark(synth::generate_dataset(*spec));
    result = new TrainResult(training::two_stage_train(bench->source, bench->target, small_model(*spec), short_train()));
  }
  static void TearDownTestSuite() {
    delete result;
    delete bench;
    delete spec;
  }
  static BenchSpec* spec;
  static synth::Benchmark* bench;
  static TrainResult* result;
};

BenchSpec* TrainedFixture::spec = nullptr;
synth::Benchmark* TrainedFixture::bench = nullptr;
TrainResult* TrainedFixture::result = nullptr;

TEST_F(TrainedFixture, AttributionValuesInUnitInterval) {
  const auto avg = dataset_average_mask(bench->target);
  for (std::size_t i = 0; i < 5; ++i) {
    auto map = eval::attribution_map(bench->target.videos[i], result->state, 1, avg);
    ASSERT_EQ(map.clips.size(), spec->M);
    for (const auto& c : map.clips) {
      ASSERT_EQ(c.size(), spec->H * spec->W);
      double mx = 0;
      for (double v : c) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        mx = std::max(mx, v);
      }
      EXPECT_TRUE(mx == 0.0 || mx == 1.0);
    }
  }
  EXPECT_THROW(eval::attribution_map(bench->target.videos[0], result->state, 9, avg), EvalError);
}

TEST_F(TrainedFixture, AttributionIgnoresLogitShift) {
  const auto avg = dataset_average_mask(bench->target);
  ModelState shifted = result->state;
  for (auto& b : shifted.params.get_mut("video.cls.b").values()) b += 5.0;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& v = bench->target.videos[i];
    auto a = eval::attribution_map(v, result->state, 0, avg);
    auto b = eval::attribution_map(v, shifted, 0, avg);
    for (std::size_t c = 0; c < a.clips.size(); ++c)
      for (std::size_t j = 0; j < a.clips[c].size(); ++j) EXPECT_NEAR(a.clips[c][j], b.clips[c][j], 1e-12);
  }
}

TEST_F(TrainedFixture, SourceAccuracyBeatsChance) {
  EvalConfig ec;
  auto m = eval::evaluate(result->state, bench->source, bench->target, bench->target_labels, ec);
  EXPECT_GT(m.source_accuracy, 1.0 / static_cast<double>(spec->n_cls));
  ASSERT_TRUE(m.human_ratio && m.davies_bouldin);
  EXPECT_GE(*m.human_ratio, 0.0);
  EXPECT_LE(*m.human_ratio, 1.0);
  EXPECT_EQ(m.variant, "Full");
  EXPECT_THROW(eval::evaluate(result->state, bench->source, bench->target, {0}, ec), EvalError);
  const auto csv = eval::metrics_csv({m});
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "variant,source_accuracy,target_accuracy,human_ratio,davies_bouldin");
}

TEST(HumanRatio, FullNoneAndHalf) {
  const std::vector<HumanMask> masks{HumanMask(2, 2, {1, 1, 0, 0})};
  EXPECT_DOUBLE_EQ(eval::human_ratio(map_of(2, 2, {{1, 0.8, 0, 0}}), masks, 0.5).ratio, 1.0);
  EXPECT_DOUBLE_EQ(eval::human_ratio(map_of(2, 2, {{0, 0, 1, 0.9}}), masks, 0.5).ratio, 0.0);
  EXPECT_DOUBLE_EQ(eval::human_ratio(map_of(2, 2, {{1, 0, 0.7, 0.1}}), masks, 0.5).ratio, 0.5);
}

TEST(HumanRatio, DenominatorChoices) {
  const std::vector<HumanMask> masks{HumanMask(1, 4, {1, 1, 1, 0})};
  const auto map = map_of(1, 4, {{1, 0, 0, 1}});
  EXPECT_DOUBLE_EQ(eval::human_ratio(map, masks, 0.5, RatioDenominator::Attribution).ratio, 0.5);
  EXPECT_DOUBLE_EQ(eval::human_ratio(map, masks, 0.5, RatioDenominator::Mask).ratio, 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(eval::human_ratio(map, masks, 0.5, RatioDenominator::Union).ratio, 0.25);
}

TEST(HumanRatio, InvariantToPositiveRescaling) {
  Stream rng(4, 0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> g(9), mask(9);
    for (auto& v : g) v = rng.uniform();
    for (auto& v : mask) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
    std::vector<double> scaled(g);
    const double k = 0.1 + 5 * rng.uniform();
    for (auto& v : scaled) v *= k;
    const std::vector<HumanMask> masks{HumanMask(3, 3, mask)};
    EXPECT_NEAR(eval::human_ratio(map_of(3, 3, {g}), masks, 0.5).ratio,
                eval::human_ratio(map_of(3, 3, {scaled}), masks, 0.5).ratio, 1e-15);
  }
}

TEST(HumanRatio, EmptyKeyframesAreSkipped) {
  const std::vector<HumanMask> masks{HumanMask(1, 2, {1, 0}), HumanMask(1, 2, {1, 0})};
  auto r = eval::human_ratio(map_of(1, 2, {{0, 0}, {1, 0}}), masks, 0.5);
  EXPECT_EQ(r.skipped, 1u);
  EXPECT_EQ(r.keyframes, 1u);
  EXPECT_DOUBLE_EQ(r.ratio, 1.0);
  EXPECT_THROW(eval::human_ratio(map_of(1, 2, {{1, 0}}), masks, 0.5), EvalError);
}

TEST(DaviesBouldin, PointClustersScoreZero) {
  auto d = eval::davies_bouldin({{0, 0}, {0, 0}, {3, 4}, {3, 4}}, {0, 0, 1, 1});
  EXPECT_DOUBLE_EQ(d.index, 0.0);
}

TEST(DaviesBouldin, HandExample) {
  // Centroids 1 and 11, mean distances to centroid 1 and 1: (1 + 1) / 10.
  auto d = eval::davies_bouldin({{0}, {2}, {10}, {12}}, {0, 0, 1, 1});
  EXPECT_NEAR(d.index, 0.2, 1e-15);
  auto half = eval::davies_bouldin({{0.5}, {1.5}, {10.5}, {11.5}}, {0, 0, 1, 1});
  EXPECT_NEAR(half.index, 0.1, 1e-15);
}

TEST(DaviesBouldin, TranslationInvariantAndScatterLinear) {
  Stream rng(5, 0);
  std::vector<std::vector<double>> f;
  std::vector<int> y;
  for (int i = 0; i < 60; ++i) {
    const int c = i % 3;
    f.push_back({3.0 * c + rng.normal(), -2.0 * c + rng.normal()});
    y.push_back(c);
  }
  const double base = eval::davies_bouldin(f, y).index;
  auto moved = f;
  for (auto& r : moved) {
    r[0] += 17.0;
    r[1] -= 4.0;
  }
  EXPECT_NEAR(eval::davies_bouldin(moved, y).index, base, 1e-12);
  // Shrinking each class about its centroid by one half halves the index.
  std::vector<std::vector<double>> c(3, std::vector<double>(2, 0.0));
  for (std::size_t i = 0; i < f.size(); ++i)
    for (std::size_t k = 0; k < 2; ++k) c[static_cast<std::size_t>(y[i])][k] += f[i][k] / 20.0;
  auto shrunk = f;
  for (std::size_t i = 0; i < f.size(); ++i)
    for (std::size_t k = 0; k < 2; ++k) {
      const double m = c[static_cast<std::size_t>(y[i])][k];
      shrunk[i][k] = m + 0.5 * (f[i][k] - m);
    }
  EXPECT_NEAR(eval::davies_bouldin(shrunk, y).index, 0.5 * base, 1e-12);
}

TEST(DaviesBouldin, CoincidentCentroidsAreInfinite) {
  auto d = eval::davies_bouldin({{1}, {-1}, {2}, {-2}}, {0, 0, 1, 1});
  EXPECT_TRUE(std::isinf(d.index));
  EXPECT_NE(d.diagnostic.find("coincident"), std::string::npos);
  EXPECT_THROW(eval::davies_bouldin({{1}, {2}}, {0, 0}), EvalError);
}

TEST(AttributionFile, FlatDoublesClipMajor) {
  const auto dir = fs::temp_directory_path() / "hct_attr_test";
  fs::create_directories(dir);
  eval::dump_attribution(dir / "a.bin", map_of(1, 2, {{0.25, 1}, {1, 0}}));
  const auto bytes = io::read_file(dir / "a.bin");
  ASSERT_EQ(bytes.size(), 4 * sizeof(double));
  double v[4];
  std::memcpy(v, bytes.data(), sizeof v);
  EXPECT_EQ(v[0], 0.25);
  EXPECT_EQ(v[3], 0.0);
  fs::remove_all(dir);
}
