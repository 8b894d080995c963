#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "blackout/gnn.hpp"
#include "blackout/neural.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace blackout;
using nn::Activation;
using nn::Matrix;
using nn::Vector;

namespace {

nn::DenseLayer identity_layer(Eigen::Index n, Activation act) {
  return {"id", Matrix::Identity(n, n), Vector::Zero(n), act};
}

nn::Mlp random_stack(std::mt19937_64& rng, std::span<const Eigen::Index> sizes) {
  std::vector<Activation> acts(sizes.size() - 1, Activation::Relu);
  acts.back() = Activation::Identity;
  auto mlp = nn::make_mlp("stack", sizes, acts, rng);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (auto& l : mlp.layers) {
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = u(rng);
  }
  return mlp;
}

double half_sq(const nn::Mlp& mlp, const Matrix& x) { return 0.5 * nn::forward(mlp, x).squaredNorm(); }

}  // namespace

TEST(Dense, IdentityAndRelu) {
  const Vector x = (Vector(2) << -1.0, 2.0).finished();
  EXPECT_EQ(nn::forward(identity_layer(2, Activation::Identity), Matrix(x)).col(0), x);
  const Vector relu = nn::forward(identity_layer(2, Activation::Relu), Matrix(x)).col(0);
  EXPECT_EQ(relu, (Vector(2) << 0.0, 2.0).finished());
  EXPECT_THROW(nn::forward(identity_layer(3, Activation::Relu), Matrix(x)), PreconditionError);
}

TEST(Dense, StackMatchesDirectEvaluation) {
  std::mt19937_64 rng(1);
  const std::array<Eigen::Index, 3> sizes{3, 5, 2};
  const auto mlp = random_stack(rng, sizes);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int t = 0; t < 20; ++t) {
    oracle::Vec x{n(rng), n(rng), n(rng)};
    const Vector xv = Eigen::Map<const Vector>(x.data(), 3);
    const auto want = oracle::dense(mlp.layers[1], oracle::dense(mlp.layers[0], x));
    const Vector got = nn::forward(mlp, Matrix(xv)).col(0);
    for (int i = 0; i < 2; ++i) EXPECT_NEAR(got[i], want[static_cast<std::size_t>(i)], 1e-14);
  }
}

TEST(Dense, LinearGradientClosedForm) {
  std::mt19937_64 rng(2);
  auto layer = nn::make_dense("lin", 3, 2, Activation::Identity, rng);
  const Matrix x = (Matrix(3, 1) << 0.5, -1.0, 2.0).finished();
  nn::LayerCache cache;
  const Matrix y = nn::forward(layer, x, &cache);
  auto grad = nn::DenseGrad::zeros_like(layer);
  const Matrix dx = nn::backward(layer, cache, y, grad);
  EXPECT_TRUE(grad.weights.isApprox(y * x.transpose(), 1e-15));
  EXPECT_TRUE(grad.bias.isApprox(y.col(0), 1e-15));
  EXPECT_TRUE(dx.isApprox(layer.weights.transpose() * y, 1e-15));

  auto zero = nn::DenseGrad::zeros_like(layer);
  const Matrix dx0 = nn::backward(layer, cache, Matrix::Zero(2, 1), zero);
  EXPECT_TRUE(zero.weights.isZero(0.0));
  EXPECT_TRUE(zero.bias.isZero(0.0));
  EXPECT_TRUE(dx0.isZero(0.0));
  EXPECT_THROW(nn::backward(layer, cache, Matrix::Zero(3, 1), zero), PreconditionError);
}

TEST(Dense, StackGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 5; ++t) {
    const std::array<Eigen::Index, 4> sizes{4, 7, 6, 3};
    auto mlp = random_stack(rng, sizes);
    Matrix x = Matrix::Random(4, 5);
    nn::MlpCache cache;
    const Matrix y = nn::forward(mlp, x, &cache);
    auto grad = nn::zeros_like(mlp);
    const Matrix dx = nn::backward(mlp, cache, y, grad);
    const double h = 1e-5;
    double worst = 0.0;
    auto check = [&](double& w, double analytic) {
      const double keep = w;
      w = keep + h;
      const double up = half_sq(mlp, x);
      w = keep - h;
      const double down = half_sq(mlp, x);
      w = keep;
      const double numeric = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6}));
    };
    for (std::size_t k = 0; k < mlp.layers.size(); ++k) {
      auto& l = mlp.layers[k];
      for (Eigen::Index i = 0; i < l.weights.size(); ++i) check(l.weights.data()[i], grad[k].weights.data()[i]);
      for (Eigen::Index i = 0; i < l.bias.size(); ++i) check(l.bias[i], grad[k].bias[i]);
    }
    for (Eigen::Index i = 0; i < x.size(); ++i) check(x.data()[i], dx.data()[i]);
    EXPECT_LT(worst, 1e-4);
  }
}

TEST(Adam, ZeroGradientAndFirstStep) {
  nn::DenseLayer p{"p", Matrix::Constant(1, 1, 0.5), Vector::Constant(1, -0.25), Activation::Identity};
  std::vector<nn::DenseLayer*> params{&p};
  auto state = nn::make_adam(params);
  nn::DenseGrad zero{Matrix::Zero(1, 1), Vector::Zero(1)};
  std::vector<const nn::DenseGrad*> grads{&zero};
  nn::optimizer_step(params, grads, state);
  EXPECT_EQ(state.step, 1u);
  EXPECT_EQ(p.weights(0, 0), 0.5);
  EXPECT_EQ(p.bias[0], -0.25);

  auto fresh = nn::make_adam(params);
  nn::DenseGrad one{Matrix::Constant(1, 1, 1.0), Vector::Constant(1, 1.0)};
  grads = {&one};
  nn::optimizer_step(params, grads, fresh);
  EXPECT_NEAR(0.5 - p.weights(0, 0), 1e-3, 1e-10);
  EXPECT_NEAR(-0.25 - p.bias[0], 1e-3, 1e-10);
}

TEST(Adam, RejectsNonFiniteGradient) {
  nn::DenseLayer p{"weird.block", Matrix::Zero(1, 1), Vector::Zero(1), Activation::Identity};
  std::vector<nn::DenseLayer*> params{&p};
  auto state = nn::make_adam(params);
  nn::DenseGrad bad{Matrix::Constant(1, 1, std::nan("")), Vector::Zero(1)};
  std::vector<const nn::DenseGrad*> grads{&bad};
  try {
    nn::optimizer_step(params, grads, state);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("weird.block"), std::string::npos);
  }
  EXPECT_EQ(state.step, 0u);
}

TEST(Adam, ConvexQuadraticDecreases) {
  const Vector a = (Vector(3) << 1.0, 4.0, 0.5).finished();
  nn::DenseLayer p{"q", Matrix::Constant(1, 1, 5.0), (Vector(3) << 5.0, -4.0, 3.0).finished(), Activation::Identity};
  p.weights = Matrix::Zero(3, 0);
  std::vector<nn::DenseLayer*> params{&p};
  auto state = nn::make_adam(params, {0.01});
  auto loss = [&] { return (a.array() * p.bias.array().square()).sum(); };
  double prev = loss();
  for (int s = 0; s < 100; ++s) {
    nn::DenseGrad g{Matrix::Zero(3, 0), (2.0 * a.array() * p.bias.array()).matrix()};
    std::vector<const nn::DenseGrad*> grads{&g};
    nn::optimizer_step(params, grads, state);
    const double now = loss();
    EXPECT_LT(now, prev);
    prev = now;
  }
}

TEST(Neural, JsonRoundTrip) {
  std::mt19937_64 rng(4);
  const std::array<Eigen::Index, 3> sizes{2, 3, 1};
  auto mlp = random_stack(rng, sizes);
  const auto back = nn::mlp_from_json(nn::to_json(mlp));
  ASSERT_EQ(back.layers.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back.layers[i].weights, mlp.layers[i].weights);
    EXPECT_EQ(back.layers[i].bias, mlp.layers[i].bias);
    EXPECT_EQ(back.layers[i].activation, mlp.layers[i].activation);
  }
}

// ---------------------------------------------------------------------------
// GNN

TEST(Encode, FlagsAndShapes) {
  const auto set = fixture::incident_load_task(3, 1);
  const auto& s = set.samples[0];
  const gnn::FeatureNorms raw;
  const auto plain = gnn::encode_sample(set.state_of(s), {}, physical_topology(set.grid), raw);
  EXPECT_EQ(plain.edge_features.cols(), 8);
  EXPECT_TRUE(plain.edge_features.row(2).isZero(0.0));
  EXPECT_TRUE(plain.edge_features.row(3).isZero(0.0));

  std::vector<StatisticalEdge> five{{0, 2, 0, 1, 1}, {1, 3, 0, 1, 1}, {2, 4, 0, 1, 1}, {3, 5, 0, 1, 1}, {0, 4, 0, 1, 1}};
  const auto topo = augment_topology(set.grid, five);
  ASSERT_EQ(topo.statistical_edges.size(), 5u);
  const auto g = gnn::encode_sample(set.state_of(s), s.failures, topo, raw, s.blackout_mw);
  EXPECT_EQ(g.edge_features.cols(), 13);
  EXPECT_EQ(g.edge_features.row(2).sum(), 2.0);
  for (Eigen::Index k = 0; k < 13; ++k) EXPECT_EQ(g.edge_features(3, k), k >= 8 ? 1.0 : 0.0);
  EXPECT_EQ(g.edge_index[8], (std::pair<std::size_t, std::size_t>{0, 2}));
  EXPECT_EQ(g.node_features(0, 1), set.state_of(s).load[1]);
  const std::vector<LineId> bad{8};
  EXPECT_THROW(gnn::encode_sample(set.state_of(s), bad, topo, raw), PreconditionError);
}

TEST(Encode, NormsFromTrainingIndicesOnly) {
  auto set = fixture::incident_load_task(50, 2);
  std::vector<std::size_t> first{0, 1, 2, 3, 4};
  const auto n = gnn::compute_norms(set, first);
  double mean = 0.0;
  for (auto i : first) mean += set.samples[i].blackout_mw;
  EXPECT_NEAR(n.label_mean, mean / 5.0, 1e-12);
  EXPECT_EQ(n.edge_mean[3], 0.0);
  EXPECT_EQ(n.edge_std[3], 1.0);
}

TEST(Gnn, MatchesStraightLineOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto set = fixture::incident_load_task(10, seed);
    const auto topo = augment_topology(set.grid, {{0, 2, 0, 2, 1.0}});
    const std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    const auto m = gnn::make_model({2, 8}, seed, topo, gnn::compute_norms(set, idx));
    std::vector<gnn::GraphSample> graphs;
    for (const auto& s : set.samples) graphs.push_back(gnn::encode(m, set.state_of(s), s.failures));
    const auto many = gnn::predict_many(m, graphs, 3, 2);
    for (std::size_t i = 0; i < graphs.size(); ++i) {
      const double want = oracle::gnn_forward(m, graphs[i]);
      EXPECT_NEAR(gnn::predict_mw(m, graphs[i]), want, 1e-9 * std::max(1.0, std::abs(want)));
      EXPECT_NEAR(many[i], want, 1e-9 * std::max(1.0, std::abs(want)));
    }
  }
}

TEST(Gnn, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed : {1u, 2u, 3u}) EXPECT_LT(fixture::gnn_gradient_error(2, 8, seed), 1e-4);
  EXPECT_LT(fixture::gnn_gradient_error(1, 3, 9, 2), 1e-4);
}

TEST(Gnn, PermutationInvariant) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) EXPECT_LE(fixture::permutation_gap(seed), 1e-9);
}

TEST(Gnn, ZeroWeightsGiveDenormalizedBias) {
  const auto set = fixture::incident_load_task(20, 3);
  const auto topo = physical_topology(set.grid);
  std::vector<std::size_t> idx(20);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto m = gnn::make_model({4, 8}, 3, topo, gnn::compute_norms(set, idx));
  fixture::zero_message_passing(m, 0.37);
  const double want = 0.37 * m.norms.label_std + m.norms.label_mean;
  for (const auto& s : set.samples) EXPECT_EQ(gnn::predict_mw(m, gnn::encode(m, set.state_of(s), s.failures)), want);
}

TEST(Gnn, ResidualIdentityWhenUpdatesVanish) {
  const auto set = fixture::incident_load_task(2, 4);
  auto m = gnn::make_model({3, 8}, 4, physical_topology(set.grid));
  fixture::zero_message_passing(m, 0.0);
  const auto g = gnn::encode(m, set.state_of(set.samples[0]), set.samples[0].failures);
  const gnn::GraphSample* ptr = &g;
  const auto batch = gnn::GraphBatch::build(std::span(&ptr, 1), m.norms);
  gnn::ForwardCache cache;
  gnn::forward(m, batch, &cache);
  EXPECT_EQ(cache.nodes, nn::forward(m.init_node, batch.node_features));
}

TEST(Gnn, StatisticalEdgeBridgesComponents) {
  // Two disjoint triangles; the statistical edge is the only link between them.
  Grid g;
  for (BusId b = 0; b < 6; ++b) g.buses.push_back({b, 50});
  g.lines = {{0, 0, 1, 0.01, 0.1, 10}, {1, 1, 2, 0.01, 0.1, 10}, {2, 0, 2, 0.01, 0.1, 10},
             {3, 3, 4, 0.01, 0.1, 10}, {4, 4, 5, 0.01, 0.1, 10}, {5, 3, 5, 0.01, 0.1, 10}};
  const auto grid = std::make_shared<const Grid>(g);
  const GridState st{grid, 0, {1, 2, 3, 4, 5, 6}, {21, 0, 0, 0, 0, 0}};
  bool differs = false;
  for (std::uint64_t seed = 0; seed < 5 && !differs; ++seed) {
    const auto plain = gnn::make_model({2, 8}, seed, physical_topology(grid));
    auto bridged = plain;
    bridged.topology = augment_topology(grid, {{0, 3, 0, 3, 1.0}});
    const std::vector<LineId> fail{0, 4};
    differs = std::abs(gnn::predict_mw(plain, gnn::encode(plain, st, fail)) -
                       gnn::predict_mw(bridged, gnn::encode(bridged, st, fail))) > 1e-6;
  }
  EXPECT_TRUE(differs);
}

TEST(Gnn, BatchingDoesNotChangePredictions) {
  const auto set = fixture::incident_load_task(30, 5);
  const auto m = gnn::make_model({2, 8}, 5, physical_topology(set.grid));
  std::vector<gnn::GraphSample> graphs;
  for (const auto& s : set.samples) graphs.push_back(gnn::encode(m, set.state_of(s), s.failures));
  const auto a = gnn::predict_many(m, graphs, 1, 1);
  const auto b = gnn::predict_many(m, graphs, 7, 3);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12 * std::max(1.0, std::abs(a[i])));
}

TEST(Train, SyntheticTaskAndDeterminism) {
  const auto set = fixture::incident_load_task(200, 11);
  const auto topo = physical_topology(set.grid);
  auto config = fixture::synthetic_config(11);
  config.workers = 2;
  const auto a = gnn::train_gnn(set, topo, config);
  ASSERT_EQ(a.log.size(), 201u);
  double best = a.log[0].train_mse;
  for (const auto& e : a.log) best = std::min(best, e.train_mse);
  EXPECT_LE(best, 0.1 * a.log[0].train_mse);
  EXPECT_TRUE(std::isnan(a.log[0].val_mse));

  config.workers = 1;
  const auto b = gnn::train_gnn(set, topo, config);
  EXPECT_EQ(gnn::checkpoint_to_json(a).dump(), gnn::checkpoint_to_json(b).dump());

  const auto restored = gnn::checkpoint_from_json(gnn::checkpoint_to_json(a), set.grid);
  EXPECT_EQ(gnn::checkpoint_to_json(restored).dump(), gnn::checkpoint_to_json(a).dump());
  const auto g = gnn::encode(a.model, set.state_of(set.samples[0]), set.samples[0].failures);
  EXPECT_EQ(gnn::predict_mw(restored.model, g), gnn::predict_mw(a.model, g));
}

TEST(Train, AllZeroLabels) {
  auto set = fixture::incident_load_task(60, 12);
  for (auto& s : set.samples) s.blackout_mw = 0.0;
  auto config = fixture::synthetic_config(12);
  const auto r = gnn::train_gnn(set, physical_topology(set.grid), config);
  const double initial = r.log.front().train_mse;
  EXPECT_LT(r.log[r.best_epoch].train_mse, 1e-4 * initial);
  const auto g = gnn::encode(r.model, set.state_of(set.samples[0]), set.samples[0].failures);
  EXPECT_LT(std::abs(gnn::predict_mw(r.model, g)), 0.01 * std::sqrt(initial));

  config.population = gnn::Population::BlackoutOnly;
  try {
    gnn::train_gnn(set, physical_topology(set.grid), config);
    FAIL();
  } catch (const PreconditionError& e) {
    EXPECT_NE(std::string(e.what()).find("empty population"), std::string::npos);
  }
}

TEST(Train, PopulationFilter) {
  auto set = fixture::incident_load_task(1000, 13);
  for (std::size_t i = 0; i < 1000; ++i) set.samples[i].blackout_mw = i < 824 ? 0.0 : 10.0 + static_cast<double>(i);
  set.samples[0].blackout_mw = 1e-9;
  std::vector<std::size_t> all(1000);
  std::iota(all.begin(), all.end(), std::size_t{0});
  EXPECT_EQ(gnn::filter_population(set, all, gnn::Population::BlackoutOnly, kBlackoutThreshold).size(), 176u);
  EXPECT_EQ(gnn::filter_population(set, all, gnn::Population::Mixed, kBlackoutThreshold).size(), 1000u);
}

TEST(Train, ValidationSelectsBestEpoch) {
  auto set = fixture::incident_load_task(120, 14);
  for (std::size_t i = 80; i < 120; ++i) set.samples[i].split = Split::Validation;
  auto config = fixture::synthetic_config(14);
  config.epochs = 15;
  config.patience = 3;
  const auto r = gnn::train_gnn(set, physical_topology(set.grid), config);
  double best = r.log[0].val_mse;
  std::size_t at = 0;
  for (const auto& e : r.log) {
    if (e.val_mse < best) {
      best = e.val_mse;
      at = e.epoch;
    }
  }
  EXPECT_EQ(r.best_epoch, at);
  EXPECT_LE(r.log.back().epoch, 15u);
  const auto text = gnn::serialize_log(r.log);
  EXPECT_EQ(text.rfind("epoch,train_mse,val_mse\n", 0), 0u);
}
