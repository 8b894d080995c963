#pragma once
// Synthetic datasets shared by unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "blackout/cascade.hpp"
#include "blackout/gbt.hpp"
#include "blackout/gnn.hpp"
#include "blackout/grid.hpp"
#include "blackout/influence.hpp"
#include "blackout/pipeline.hpp"

namespace fixture {

using namespace blackout;

/// 6-bus meshed grid: a ring with two chords.
inline GridPtr small_grid() {
  Grid g;
  g.base_mva = 100.0;
  for (BusId b = 0; b < 6; ++b) g.buses.push_back({b, b % 2 == 0 ? 100.0 : 0.0});
  const std::pair<BusId, BusId> ends[] = {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 5}, {5, 0}, {0, 3}, {1, 4}};
  LineId id = 0;
  for (auto [a, b] : ends) {
    g.lines.push_back({id, a, b, 0.01 * static_cast<double>(id + 1), 0.1 + 0.02 * static_cast<double>(id), 100.0});
    ++id;
  }
  return std::make_shared<const Grid>(std::move(g));
}

/// `n` random N-2 scenarios, each on its own random hour. The label is the
/// total load on buses touched by a failed line.
inline SampleSet incident_load_task(std::size_t n, std::uint64_t seed, Split split = Split::Train) {
  SampleSet set;
  set.grid = small_grid();
  const auto& g = *set.grid;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> load(0.0, 30.0);
  std::uniform_int_distribution<LineId> line(0, g.line_count() - 1);
  for (std::size_t i = 0; i < n; ++i) {
    GridState st{set.grid, static_cast<std::int64_t>(i), std::vector<double>(6), std::vector<double>(6, 0.0)};
    double total = 0.0;
    for (auto& l : st.load) total += (l = load(rng));
    for (BusId b = 0; b < 6; b += 2) st.generation[b] = total / 3.0;
    LineId a = line(rng), b = line(rng);
    while (b == a) b = line(rng);
    std::set<BusId> touched{g.lines[a].from_bus, g.lines[a].to_bus, g.lines[b].from_bus, g.lines[b].to_bus};
    double label = 0.0;
    for (auto t : touched) label += st.load[t];
    set.states.push_back(std::move(st));
    set.samples.push_back({i, {std::min(a, b), std::max(a, b)}, label, split, {}});
  }
  return set;
}

/// Standardized batch MSE, the quantity training differentiates.
inline double batch_loss(const gnn::GnnModel& m, const std::vector<const gnn::GraphSample*>& graphs) {
  const auto b = gnn::GraphBatch::build(graphs, m.norms);
  return (gnn::forward(m, b) - b.labels).squaredNorm() / static_cast<double>(graphs.size());
}

/// Largest relative gap between backprop and central differences over every
/// parameter of a freshly initialized model on a few encoded samples.
inline double gnn_gradient_error(std::size_t layers, std::size_t hidden, std::uint64_t seed, std::size_t count = 4) {
  const auto set = incident_load_task(count, seed);
  auto topo = augment_topology(set.grid, {{0, 2, 0, 2, 1.0}});
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const auto norms = gnn::compute_norms(set, idx);
  auto m = gnn::make_model({layers, hidden}, seed, topo, norms);
  // Nonzero biases keep pre-activations away from the ReLU kink.
  std::mt19937_64 rng(seed + 1);
  std::uniform_real_distribution<double> u(-0.2, 0.2);
  for (auto* p : m.params()) {
    for (Eigen::Index i = 0; i < p->bias.size(); ++i) p->bias[i] = u(rng);
  }
  std::vector<gnn::GraphSample> graphs;
  for (const auto& s : set.samples) {
    graphs.push_back(gnn::encode_sample(set.state_of(s), s.failures, topo, norms, s.blackout_mw));
  }
  std::vector<const gnn::GraphSample*> ptrs;
  for (const auto& g : graphs) ptrs.push_back(&g);
  const auto [grad, loss] = gnn::batch_gradient(m, ptrs, 2, 1);
  const auto blocks = grad.blocks();
  auto params = m.params();
  const double h = 1e-5;
  double worst = 0.0;
  auto check = [&](double& w, double analytic) {
    const double keep = w;
    w = keep + h;
    const double up = batch_loss(m, ptrs);
    w = keep - h;
    const double down = batch_loss(m, ptrs);
    w = keep;
    const double numeric = (up - down) / (2.0 * h);
    const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    worst = std::max(worst, std::abs(analytic - numeric) / scale);
  };
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    for (Eigen::Index r = 0; r < p.weights.rows(); ++r) {
      for (Eigen::Index c = 0; c < p.weights.cols(); ++c) check(p.weights(r, c), blocks[k]->weights(r, c));
    }
    for (Eigen::Index r = 0; r < p.bias.size(); ++r) check(p.bias[r], blocks[k]->bias[r]);
  }
  return worst;
}

/// Prediction gap between a graph and a copy with its node ids permuted.
inline double permutation_gap(std::uint64_t seed) {
  const auto set = incident_load_task(1, seed);
  const auto topo = augment_topology(set.grid, {{0, 2, 0, 2, 1.0}, {2, 5, 2, 4, 1.0}});
  const auto m = gnn::make_model({2, 8}, seed, topo, gnn::compute_norms(set, {0}));
  const auto& s = set.samples[0];
  const auto g = gnn::encode_sample(set.state_of(s), s.failures, topo, m.norms);
  std::vector<std::size_t> perm(static_cast<std::size_t>(g.node_features.cols()));
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  gnn::GraphSample q = g;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    q.node_features.col(static_cast<Eigen::Index>(perm[i])) = g.node_features.col(static_cast<Eigen::Index>(i));
  }
  for (auto& [a, b] : q.edge_index) {
    a = perm[a];
    b = perm[b];
  }
  return std::abs(gnn::predict_mw(m, g) - gnn::predict_mw(m, q));
}

/// Zeroes every message-passing and readout weight and sets the readout bias.
inline void zero_message_passing(gnn::GnnModel& m, double readout_bias) {
  for (auto& l : m.edge_update) {
    l.weights.setZero();
    l.bias.setZero();
  }
  for (auto& l : m.node_update) {
    l.weights.setZero();
    l.bias.setZero();
  }
  m.readout.weights.setZero();
  m.readout.bias[0] = readout_bias;
}

/// A GNN that returns `mw` for every input.
inline gnn::GnnModel constant_gnn(const GridPtr& grid, double mw, std::uint64_t seed = 1) {
  auto m = gnn::make_model({2, 4}, seed, physical_topology(grid));
  zero_message_passing(m, mw);
  return m;
}

/// Positive exactly when line `line` is among the initial failures.
inline gbt::BoostedForest line_classifier(const Grid& g, LineId line) {
  gbt::BoostedForest f;
  f.feature_count = gbt::feature_length(g.bus_count(), g.line_count());
  gbt::Tree t;
  t.nodes.resize(3);
  t.nodes[0].feature = static_cast<int>(2 * g.bus_count() + 2 * g.line_count() + line);
  t.nodes[0].threshold = 0.5;
  t.nodes[0].left = 1;
  t.nodes[0].right = 2;
  t.nodes[1].value = -5.0;
  t.nodes[2].value = 5.0;
  f.trees.push_back(t);
  return f;
}

inline pipeline::PipelineModel full_model(const GridPtr& grid, pipeline::Variant v, double mixed_mw, double blackout_mw) {
  pipeline::PipelineModel m;
  m.variant = v;
  m.classifier = line_classifier(*grid, 0);
  m.mixed_gnn = constant_gnn(grid, mixed_mw);
  m.blackout_gnn = constant_gnn(grid, blackout_mw, 2);
  return m;
}

/// Training settings for the 200-sample regression task.
inline gnn::TrainConfig synthetic_config(std::uint64_t seed) {
  gnn::TrainConfig c;
  c.learning_rate = 3e-3;
  c.batch_size = 20;
  c.epochs = 200;
  c.patience = 0;
  c.seed = seed;
  c.arch = {2, 16};
  return c;
}

}  // namespace fixture
