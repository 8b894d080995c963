#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "blackout/gbt.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace blackout;
using namespace blackout::gbt;

namespace {

std::vector<FlatSample> random_samples(std::mt19937_64& rng, std::size_t n, std::size_t features) {
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> w(0.5, 3.0);
  std::vector<FlatSample> out(n);
  for (auto& s : out) {
    s.features.resize(features);
    for (auto& x : s.features) x = z(rng);
    const double signal = s.features[0] + 0.5 * s.features[1] * s.features[2] + 0.8 * z(rng);
    s.label = signal > 0.2 ? 1 : 0;
    s.weight = w(rng);
  }
  return out;
}

/// Walks every node, checking depth, gain and leaf hessian bounds.
void expect_structure(const Tree& t, const Hyperparameters& hp) {
  EXPECT_LE(t.depth(), hp.max_depth);
  for (const auto& n : t.nodes) {
    if (n.is_leaf()) {
      EXPECT_GE(n.hessian, hp.min_child_weight);
    } else {
      EXPECT_GT(n.gain, 0.0);
    }
  }
}

}  // namespace

TEST(Featurize, LayoutAndLengths) {
  Grid g;
  g.buses = {{0, 10}, {1, 0}, {2, 0}};
  g.lines = {{0, 0, 1, 0.1, 0.2, 1}, {1, 1, 2, 0.3, 0.4, 1}, {2, 0, 2, 0.5, 0.6, 1}};
  const auto grid = std::make_shared<const Grid>(g);
  const GridState st{grid, 0, {0, 4, 6}, {10, 0, 0}};
  const std::vector<LineId> fail{0, 2};
  const auto x = featurize(st, fail);
  EXPECT_EQ(x.size(), 15u);
  EXPECT_EQ(x, (std::vector<double>{0, 4, 6, 10, 0, 0, 0.1, 0.3, 0.5, 0.2, 0.4, 0.6, 1, 0, 1}));
  EXPECT_EQ(feature_length(3, 3), 15u);
  EXPECT_EQ(feature_length(73, 120), 506u);
  const std::vector<LineId> bad{3};
  EXPECT_THROW(featurize(st, bad), PreconditionError);
}

TEST(FlatSamples, LabelsAndLinearWeights) {
  auto set = fixture::incident_load_task(4, 1);
  set.samples[0].blackout_mw = 0.0;
  set.samples[1].blackout_mw = 1e-9;
  set.samples[2].blackout_mw = 10.0;
  set.samples[3].blackout_mw = 30.0;
  const std::vector<std::size_t> idx{0, 1, 2, 3};
  const double mp = mean_positive_blackout(set, idx);
  EXPECT_DOUBLE_EQ(mp, 20.0);
  const auto flat = make_flat_samples(set, idx, mp);
  EXPECT_EQ(flat[0].label, 0);
  EXPECT_EQ(flat[1].label, 0);
  EXPECT_EQ(flat[2].label, 1);
  EXPECT_DOUBLE_EQ(flat[2].weight, 1.5);
  EXPECT_DOUBLE_EQ(flat[3].weight, 2.5);
  EXPECT_DOUBLE_EQ(flat[0].weight, 1.0);
  for (const auto& s : make_flat_samples(set, idx, 0.0)) EXPECT_EQ(s.weight, 1.0);
}

TEST(Train, SeparableOneDimensional) {
  std::vector<FlatSample> data;
  for (int i = -20; i < 20; ++i) data.push_back({{static_cast<double>(i) / 4.0}, i >= 0 ? 1 : 0, 1.0});
  Hyperparameters hp;
  hp.max_depth = 1;
  hp.n_rounds = 10;
  const auto f = train_gbt(data, hp);
  EXPECT_EQ(f.trees.size(), 10u);
  std::vector<int> pred, truth;
  for (const auto& s : data) {
    pred.push_back(predict_gbt(f, s.features).positive ? 1 : 0);
    truth.push_back(s.label);
  }
  EXPECT_EQ(classifier_metrics(pred, truth).accuracy, 1.0);
  EXPECT_EQ(f.trees[0].nodes[0].threshold, -0.125);
}

TEST(Train, GammaAboveRootGainGivesStumps) {
  std::mt19937_64 rng(2);
  const auto data = random_samples(rng, 200, 4);
  Hyperparameters hp;
  hp.gamma = 1e9;
  hp.n_rounds = 5;
  const auto f = train_gbt(data, hp);
  double wpos = 0.0, wall = 0.0;
  for (const auto& s : data) {
    wpos += s.weight * s.label;
    wall += s.weight;
  }
  EXPECT_NEAR(f.base_score, std::log(wpos / (wall - wpos)), 1e-12);
  for (const auto& t : f.trees) {
    ASSERT_EQ(t.nodes.size(), 1u);
    // At the base rate the weighted gradient sum is zero, so every leaf stays near zero.
    EXPECT_NEAR(t.nodes[0].value, 0.0, 1e-9);
  }
  EXPECT_NEAR(predict_gbt(f, data[0].features).probability, wpos / wall, 1e-9);
}

TEST(Train, LossNonIncreasingAndStructure) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 3; ++t) {
    const auto data = random_samples(rng, 500, 6);
    Hyperparameters hp;
    hp.n_rounds = 5;
    TrainReport report;
    const auto f = train_gbt(data, hp, {}, 2, &report);
    ASSERT_EQ(report.train_loss.size(), 6u);
    for (std::size_t r = 1; r < report.train_loss.size(); ++r) {
      EXPECT_LE(report.train_loss[r], report.train_loss[r - 1] + 1e-12);
    }
    for (const auto& tree : f.trees) expect_structure(tree, hp);
    // Independent loss evaluation agrees with the report.
    std::vector<double> m;
    for (const auto& s : data) m.push_back(margin(f, s.features));
    EXPECT_NEAR(logistic_loss(m, data), report.train_loss.back(), 1e-12);
  }
}

TEST(Train, StructureUnderDefaults) {
  std::mt19937_64 rng(4);
  const auto data = random_samples(rng, 800, 5);
  const Hyperparameters hp;
  EXPECT_EQ(hp.max_depth, 8u);
  EXPECT_EQ(hp.min_child_weight, 1.0);
  EXPECT_EQ(hp.gamma, 1.0);
  EXPECT_EQ(hp.lambda, 1.0);
  EXPECT_EQ(hp.n_rounds, 200u);
  Hyperparameters short_run = hp;
  short_run.n_rounds = 30;
  const auto f = train_gbt(data, short_run, {}, 1);
  bool deep = false;
  for (const auto& t : f.trees) {
    expect_structure(t, hp);
    deep = deep || t.depth() >= 3;
  }
  EXPECT_TRUE(deep);
}

TEST(Train, MatchesTreeWalkOracle) {
  std::mt19937_64 rng(5);
  const auto data = random_samples(rng, 400, 5);
  Hyperparameters hp;
  hp.n_rounds = 20;
  const auto f = train_gbt(data, hp);
  const auto j = to_json(f);
  for (const auto& s : data) {
    EXPECT_NEAR(predict_gbt(f, s.features).probability, oracle::forest_probability(j, s.features), 1e-12);
  }
  for (const auto& t : j.at("trees")) EXPECT_LE(oracle::json_depth(t), 8u);
}

TEST(Train, SampleOrderDoesNotMatter) {
  std::mt19937_64 rng(6);
  auto data = random_samples(rng, 300, 4);
  Hyperparameters hp;
  hp.n_rounds = 10;
  const auto a = train_gbt(data, hp);
  std::shuffle(data.begin(), data.end(), rng);
  const auto b = train_gbt(data, hp, {}, 3);
  ASSERT_EQ(a.trees.size(), b.trees.size());
  for (std::size_t t = 0; t < a.trees.size(); ++t) {
    ASSERT_EQ(a.trees[t].nodes.size(), b.trees[t].nodes.size());
    for (std::size_t k = 0; k < a.trees[t].nodes.size(); ++k) {
      const auto& x = a.trees[t].nodes[k];
      const auto& y = b.trees[t].nodes[k];
      EXPECT_EQ(x.feature, y.feature);
      EXPECT_EQ(x.threshold, y.threshold);
      EXPECT_EQ(x.value, y.value);
    }
  }
}

TEST(Train, EarlyStoppingKeepsBestPrefix) {
  std::mt19937_64 rng(7);
  const auto data = random_samples(rng, 400, 4);
  const auto val = random_samples(rng, 200, 4);
  Hyperparameters hp;
  hp.n_rounds = 200;
  hp.early_stopping_rounds = 5;
  TrainReport report;
  const auto f = train_gbt(data, hp, val, 1, &report);
  EXPECT_EQ(f.trees.size(), report.best_rounds);
  EXPECT_LT(report.val_f1.size(), 200u);
  double best = -1.0;
  std::size_t at = 0;
  for (std::size_t r = 0; r < report.val_f1.size(); ++r) {
    if (report.val_f1[r].value_or(0.0) > best) {
      best = report.val_f1[r].value_or(0.0);
      at = r + 1;
    }
  }
  EXPECT_EQ(f.trees.size(), at);
}

TEST(Train, Errors) {
  std::vector<FlatSample> one{{{1.0}, 1, 1.0}, {{2.0}, 1, 1.0}};
  EXPECT_THROW(train_gbt(one, {}), PreconditionError);
  std::vector<FlatSample> bad_w{{{1.0}, 1, 1.0}, {{2.0}, 0, 0.0}};
  EXPECT_THROW(train_gbt(bad_w, {}), PreconditionError);
  EXPECT_THROW(train_gbt({}, {}), PreconditionError);
}

TEST(Predict, ClosedForms) {
  BoostedForest f;
  f.base_score = 0.4;
  f.feature_count = 1;
  const std::vector<double> x{0.0};
  EXPECT_DOUBLE_EQ(predict_gbt(f, x).probability, sigmoid(0.4));
  f.base_score = 0.0;
  Tree t;
  t.nodes.push_back({});
  t.nodes[0].value = 2.0;
  f.trees.push_back(t);
  EXPECT_NEAR(predict_gbt(f, x).probability, 0.8808, 1e-4);
  EXPECT_TRUE(predict_gbt(f, x).positive);
  const std::vector<double> wrong{0.0, 1.0};
  EXPECT_THROW(predict_gbt(f, wrong), PreconditionError);
}

TEST(Metrics, Examples) {
  const std::vector<int> all{1, 0, 1, 1};
  const auto perfect = classifier_metrics(all, all);
  EXPECT_EQ(perfect.accuracy, 1.0);
  EXPECT_EQ(perfect.precision, 1.0);
  EXPECT_EQ(perfect.recall, 1.0);
  EXPECT_EQ(perfect.f1, 1.0);

  const std::vector<int> p{1, 1, 0, 0}, y{1, 0, 1, 0};
  const auto m = classifier_metrics(p, y);
  EXPECT_EQ(m.accuracy, 0.5);
  EXPECT_EQ(m.precision, 0.5);
  EXPECT_EQ(m.recall, 0.5);
  EXPECT_EQ(m.f1, 0.5);

  const std::vector<int> zeros{0, 0}, neg{0, 0};
  const auto d = classifier_metrics(zeros, neg);
  EXPECT_FALSE(d.precision.has_value());
  EXPECT_FALSE(d.recall.has_value());
  EXPECT_FALSE(d.f1.has_value());
  EXPECT_EQ(d.accuracy, 1.0);
  EXPECT_THROW(classifier_metrics(std::vector<int>{}, std::vector<int>{}), PreconditionError);
  EXPECT_THROW(classifier_metrics(p, zeros), PreconditionError);
}

TEST(Metrics, MatchTally) {
  std::mt19937_64 rng(8);
  std::bernoulli_distribution coin(0.4);
  std::vector<int> p(1000), y(1000);
  for (std::size_t i = 0; i < 1000; ++i) {
    p[i] = coin(rng);
    y[i] = coin(rng);
  }
  const auto t = oracle::tally(p, y);
  const auto m = classifier_metrics(p, y);
  EXPECT_EQ(m.tp, t.tp);
  EXPECT_EQ(m.fp, t.fp);
  EXPECT_EQ(m.tn, t.tn);
  EXPECT_EQ(m.fn, t.fn);
  const double prec = static_cast<double>(t.tp) / static_cast<double>(t.tp + t.fp);
  const double rec = static_cast<double>(t.tp) / static_cast<double>(t.tp + t.fn);
  EXPECT_DOUBLE_EQ(*m.precision, prec);
  EXPECT_DOUBLE_EQ(*m.recall, rec);
  EXPECT_DOUBLE_EQ(*m.f1, 2 * prec * rec / (prec + rec));
  EXPECT_DOUBLE_EQ(m.accuracy, static_cast<double>(t.tp + t.tn) / 1000.0);
}

TEST(Checkpoint, JsonRoundTrip) {
  std::mt19937_64 rng(9);
  const auto data = random_samples(rng, 200, 3);
  Hyperparameters hp;
  hp.n_rounds = 8;
  hp.decision_threshold = 0.4;
  const auto f = train_gbt(data, hp);
  const auto back = forest_from_json(nlohmann::json::parse(to_json(f).dump()));
  EXPECT_EQ(to_json(back).dump(), to_json(f).dump());
  EXPECT_EQ(back.params.decision_threshold, 0.4);
  for (const auto& s : data) EXPECT_EQ(margin(back, s.features), margin(f, s.features));

  auto broken = to_json(f);
  ASSERT_TRUE(broken["trees"][0].contains("feature"));
  broken["trees"][0]["feature"] = 99;
  EXPECT_THROW(forest_from_json(broken), ValidationError);
  EXPECT_THROW(forest_from_json({{"format", "other"}}), ValidationError);
}
