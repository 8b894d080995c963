#pragma once

// Message-passing blackout-size regressor.
//
//   v ← f_init_V(v),  e ← f_init_E(e)
//   repeat L times:
//     e_ij ← f_E(e_ij, v_i, v_j) + e_ij
//     v_i  ← f_V(v_i, Σ_{edges at i} e) + v_i
//   ŷ = f_final(Σ_i v_i)
//
// Statistical edges take part in message passing exactly like physical lines.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "blackout/cascade.hpp"
#include "blackout/error.hpp"
#include "blackout/grid.hpp"
#include "blackout/influence.hpp"
#include "blackout/neural.hpp"
#include "blackout/parallel.hpp"
#include "json.hpp"

namespace blackout::gnn {

using nn::Matrix;
using nn::Vector;

inline constexpr Eigen::Index kNodeFeatures = 2;  // load, generation
inline constexpr Eigen::Index kEdgeFeatures = 4;  // resistance, reactance, initial failure, is_statistical

/// Standardization constants. The is_statistical flag is never rescaled.
struct FeatureNorms {
  std::array<double, kNodeFeatures> node_mean{0, 0};
  std::array<double, kNodeFeatures> node_std{1, 1};
  std::array<double, kEdgeFeatures> edge_mean{0, 0, 0, 0};
  std::array<double, kEdgeFeatures> edge_std{1, 1, 1, 1};
  double label_mean = 0.0;
  double label_std = 1.0;
};

/// One scenario as a graph. Features are stored one column per node / edge.
struct GraphSample {
  Matrix node_features;  // kNodeFeatures × |V|
  Matrix edge_features;  // kEdgeFeatures × |E_aug|
  std::vector<std::pair<std::size_t, std::size_t>> edge_index;
  double label = 0.0;  // MW
};

namespace detail {

inline double safe_std(double sum, double sum_sq, double n) {
  if (n <= 0.0) return 1.0;
  const double mean = sum / n;
  const double var = std::max(0.0, sum_sq / n - mean * mean);
  const double sd = std::sqrt(var);
  return sd > 1e-12 ? sd : 1.0;
}

}  // namespace detail

/// Mean/std of node features, physical-line features and labels over `indices`.
inline FeatureNorms compute_norms(const SampleSet& set, const std::vector<std::size_t>& indices) {
  FeatureNorms norms;
  const Grid& grid = *set.grid;
  const double n_samples = static_cast<double>(indices.size());
  if (indices.empty()) return norms;

  std::array<double, 2> node_sum{}, node_sq{};
  std::array<double, 3> edge_sum{}, edge_sq{};
  double label_sum = 0.0, label_sq = 0.0;
  for (const auto& l : grid.lines) {
    edge_sum[0] += l.resistance;
    edge_sq[0] += l.resistance * l.resistance;
    edge_sum[1] += l.reactance;
    edge_sq[1] += l.reactance * l.reactance;
  }
  for (auto i : indices) {
    const auto& s = set.samples[i];
    const auto& st = set.state_of(s);
    for (std::size_t b = 0; b < grid.bus_count(); ++b) {
      node_sum[0] += st.load[b];
      node_sq[0] += st.load[b] * st.load[b];
      node_sum[1] += st.generation[b];
      node_sq[1] += st.generation[b] * st.generation[b];
    }
    edge_sum[2] += static_cast<double>(s.failures.size());
    edge_sq[2] += static_cast<double>(s.failures.size());
    label_sum += s.blackout_mw;
    label_sq += s.blackout_mw * s.blackout_mw;
  }
  const double n_nodes = n_samples * static_cast<double>(grid.bus_count());
  const double n_lines = static_cast<double>(grid.line_count());
  for (int f = 0; f < 2; ++f) {
    norms.node_mean[f] = node_sum[f] / n_nodes;
    norms.node_std[f] = detail::safe_std(node_sum[f], node_sq[f], n_nodes);
  }
  for (int f = 0; f < 2; ++f) {
    norms.edge_mean[f] = edge_sum[f] / n_lines;
    norms.edge_std[f] = detail::safe_std(edge_sum[f], edge_sq[f], n_lines);
  }
  norms.edge_mean[2] = edge_sum[2] / (n_samples * n_lines);
  norms.edge_std[2] = detail::safe_std(edge_sum[2], edge_sq[2], n_samples * n_lines);
  norms.label_mean = label_sum / n_samples;
  norms.label_std = detail::safe_std(label_sum, label_sq, n_samples);
  return norms;
}

/// Physical lines first (failed ones flagged, never removed), then the
/// statistical edges with r = x = failure = 0 and is_statistical = 1.
inline GraphSample encode_sample(const GridState& state, std::span<const LineId> failures,
                                 const AugmentedTopology& topology, const FeatureNorms& norms,
                                 double label_mw = 0.0) {
  const Grid& grid = *state.grid;
  const auto nb = static_cast<Eigen::Index>(grid.bus_count());
  const auto nl = grid.line_count();
  const auto ne = static_cast<Eigen::Index>(nl + topology.statistical_edges.size());
  GraphSample g{Matrix(kNodeFeatures, nb), Matrix(kEdgeFeatures, ne), {}, label_mw};
  for (Eigen::Index b = 0; b < nb; ++b) {
    g.node_features(0, b) = (state.load[b] - norms.node_mean[0]) / norms.node_std[0];
    g.node_features(1, b) = (state.generation[b] - norms.node_mean[1]) / norms.node_std[1];
  }
  std::vector<double> failed(nl, 0.0);
  for (auto f : failures) {
    if (f >= nl) throw PreconditionError("failed line id " + std::to_string(f) + " out of range");
    failed[f] = 1.0;
  }
  auto put_edge = [&](Eigen::Index k, double r, double x, double fail, double stat) {
    g.edge_features(0, k) = (r - norms.edge_mean[0]) / norms.edge_std[0];
    g.edge_features(1, k) = (x - norms.edge_mean[1]) / norms.edge_std[1];
    g.edge_features(2, k) = (fail - norms.edge_mean[2]) / norms.edge_std[2];
    g.edge_features(3, k) = (stat - norms.edge_mean[3]) / norms.edge_std[3];
  };
  g.edge_index.reserve(static_cast<std::size_t>(ne));
  for (std::size_t l = 0; l < nl; ++l) {
    const auto& line = grid.lines[l];
    put_edge(static_cast<Eigen::Index>(l), line.resistance, line.reactance, failed[l], 0.0);
    g.edge_index.emplace_back(line.from_bus, line.to_bus);
  }
  for (std::size_t s = 0; s < topology.statistical_edges.size(); ++s) {
    const auto& e = topology.statistical_edges[s];
    if (e.from_bus >= grid.bus_count() || e.to_bus >= grid.bus_count()) {
      throw PreconditionError("statistical edge references an undeclared bus");
    }
    put_edge(static_cast<Eigen::Index>(nl + s), 0.0, 0.0, 0.0, 1.0);
    g.edge_index.emplace_back(e.from_bus, e.to_bus);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Model

struct Architecture {
  std::size_t layers = 4;
  std::size_t hidden = 128;
};

struct GnnModel {
  Architecture arch;
  nn::Mlp init_node;                        // kNodeFeatures → H → H
  nn::Mlp init_edge;                        // kEdgeFeatures → H → H
  std::vector<nn::DenseLayer> edge_update;  // 3H → H, one per layer
  std::vector<nn::DenseLayer> node_update;  // 2H → H, one per layer
  nn::DenseLayer readout;                   // H → 1
  FeatureNorms norms;
  AugmentedTopology topology;

  /// Fixed parameter order shared by gradients and optimizer state.
  std::vector<nn::DenseLayer*> params() {
    std::vector<nn::DenseLayer*> out;
    for (auto& l : init_node.layers) out.push_back(&l);
    for (auto& l : init_edge.layers) out.push_back(&l);
    for (std::size_t i = 0; i < edge_update.size(); ++i) {
      out.push_back(&edge_update[i]);
      out.push_back(&node_update[i]);
    }
    out.push_back(&readout);
    return out;
  }

  double denormalize(double y) const { return y * norms.label_std + norms.label_mean; }
};

inline GnnModel make_model(Architecture arch, std::uint64_t seed, AugmentedTopology topology,
                           FeatureNorms norms = {}) {
  if (arch.layers == 0 || arch.hidden == 0) throw PreconditionError("GNN needs layers >= 1 and hidden >= 1");
  std::mt19937_64 rng(seed);
  const auto h = static_cast<Eigen::Index>(arch.hidden);
  using nn::Activation;
  const std::array<Activation, 2> two_relu{Activation::Relu, Activation::Relu};
  const std::array<Eigen::Index, 3> node_sizes{kNodeFeatures, h, h};
  const std::array<Eigen::Index, 3> edge_sizes{kEdgeFeatures, h, h};
  GnnModel m;
  m.arch = arch;
  m.init_node = nn::make_mlp("init_node", node_sizes, two_relu, rng);
  m.init_edge = nn::make_mlp("init_edge", edge_sizes, two_relu, rng);
  for (std::size_t i = 0; i < arch.layers; ++i) {
    m.edge_update.push_back(nn::make_dense("edge_update." + std::to_string(i), 3 * h, h, Activation::Relu, rng));
    m.node_update.push_back(nn::make_dense("node_update." + std::to_string(i), 2 * h, h, Activation::Relu, rng));
  }
  m.readout = nn::make_dense("readout", h, 1, Activation::Identity, rng);
  m.norms = norms;
  m.topology = std::move(topology);
  return m;
}

struct GnnGrad {
  nn::MlpGrad init_node;
  nn::MlpGrad init_edge;
  std::vector<nn::DenseGrad> edge_update;
  std::vector<nn::DenseGrad> node_update;
  nn::DenseGrad readout;

  static GnnGrad zeros_like(const GnnModel& m) {
    GnnGrad g{nn::zeros_like(m.init_node), nn::zeros_like(m.init_edge), {}, {},
              nn::DenseGrad::zeros_like(m.readout)};
    for (std::size_t i = 0; i < m.edge_update.size(); ++i) {
      g.edge_update.push_back(nn::DenseGrad::zeros_like(m.edge_update[i]));
      g.node_update.push_back(nn::DenseGrad::zeros_like(m.node_update[i]));
    }
    return g;
  }

  GnnGrad& operator+=(const GnnGrad& o) {
    for (std::size_t i = 0; i < init_node.size(); ++i) init_node[i] += o.init_node[i];
    for (std::size_t i = 0; i < init_edge.size(); ++i) init_edge[i] += o.init_edge[i];
    for (std::size_t i = 0; i < edge_update.size(); ++i) {
      edge_update[i] += o.edge_update[i];
      node_update[i] += o.node_update[i];
    }
    readout += o.readout;
    return *this;
  }

  /// Same order as GnnModel::params().
  std::vector<const nn::DenseGrad*> blocks() const {
    std::vector<const nn::DenseGrad*> out;
    for (const auto& g : init_node) out.push_back(&g);
    for (const auto& g : init_edge) out.push_back(&g);
    for (std::size_t i = 0; i < edge_update.size(); ++i) {
      out.push_back(&edge_update[i]);
      out.push_back(&node_update[i]);
    }
    out.push_back(&readout);
    return out;
  }
};

/// Disjoint union of graphs, processed in one pass.
struct GraphBatch {
  Matrix node_features;
  Matrix edge_features;
  std::vector<std::size_t> src;
  std::vector<std::size_t> dst;
  std::vector<std::size_t> graph_of_node;
  std::size_t graph_count = 0;
  Eigen::RowVectorXd labels;  // standardized

  static GraphBatch build(std::span<const GraphSample* const> graphs, const FeatureNorms& norms) {
    GraphBatch b;
    Eigen::Index nodes = 0, edges = 0;
    for (const auto* g : graphs) {
      nodes += g->node_features.cols();
      edges += g->edge_features.cols();
    }
    b.node_features.resize(kNodeFeatures, nodes);
    b.edge_features.resize(kEdgeFeatures, edges);
    b.src.reserve(static_cast<std::size_t>(edges));
    b.dst.reserve(static_cast<std::size_t>(edges));
    b.graph_of_node.reserve(static_cast<std::size_t>(nodes));
    b.labels.resize(static_cast<Eigen::Index>(graphs.size()));
    Eigen::Index node_off = 0, edge_off = 0;
    for (std::size_t gi = 0; gi < graphs.size(); ++gi) {
      const auto& g = *graphs[gi];
      const auto nv = g.node_features.cols();
      const auto ne = g.edge_features.cols();
      if (g.node_features.rows() != kNodeFeatures || g.edge_features.rows() != kEdgeFeatures ||
          static_cast<Eigen::Index>(g.edge_index.size()) != ne) {
        throw PreconditionError("graph sample has inconsistent shapes");
      }
      b.node_features.middleCols(node_off, nv) = g.node_features;
      b.edge_features.middleCols(edge_off, ne) = g.edge_features;
      for (const auto& [i, j] : g.edge_index) {
        if (static_cast<Eigen::Index>(std::max(i, j)) >= nv) throw PreconditionError("edge index out of range");
        b.src.push_back(static_cast<std::size_t>(node_off) + i);
        b.dst.push_back(static_cast<std::size_t>(node_off) + j);
      }
      for (Eigen::Index v = 0; v < nv; ++v) b.graph_of_node.push_back(gi);
      b.labels[static_cast<Eigen::Index>(gi)] = (g.label - norms.label_mean) / norms.label_std;
      node_off += nv;
      edge_off += ne;
    }
    b.graph_count = graphs.size();
    return b;
  }
};

struct LayerCache {
  Matrix edge_input;   // [e; v_src; v_dst]
  Matrix edge_out;     // relu(f_E) before the residual add
  Matrix node_input;   // [v; Σe]
  Matrix node_out;     // relu(f_V) before the residual add
};

struct ForwardCache {
  nn::MlpCache init_node;
  nn::MlpCache init_edge;
  std::vector<LayerCache> layers;
  Matrix nodes;   // final node embeddings
  Matrix pooled;  // H × graphs
};

/// Standardized predictions, one per graph.
inline Eigen::RowVectorXd forward(const GnnModel& m, const GraphBatch& b, ForwardCache* cache = nullptr) {
  const auto h = static_cast<Eigen::Index>(m.arch.hidden);
  const auto ne = static_cast<Eigen::Index>(b.src.size());
  const auto nv = b.node_features.cols();
  Matrix v = nn::forward(m.init_node, b.node_features, cache ? &cache->init_node : nullptr);
  Matrix e = nn::forward(m.init_edge, b.edge_features, cache ? &cache->init_edge : nullptr);
  if (cache) cache->layers.resize(m.arch.layers);

  Matrix edge_in(3 * h, ne);
  Matrix node_in(2 * h, nv);
  for (std::size_t layer = 0; layer < m.arch.layers; ++layer) {
    edge_in.topRows(h) = e;
    for (Eigen::Index k = 0; k < ne; ++k) {
      edge_in.col(k).segment(h, h) = v.col(static_cast<Eigen::Index>(b.src[static_cast<std::size_t>(k)]));
      edge_in.col(k).tail(h) = v.col(static_cast<Eigen::Index>(b.dst[static_cast<std::size_t>(k)]));
    }
    Matrix edge_out = nn::forward(m.edge_update[layer], edge_in);
    e += edge_out;

    node_in.topRows(h) = v;
    node_in.bottomRows(h).setZero();
    for (Eigen::Index k = 0; k < ne; ++k) {
      node_in.col(static_cast<Eigen::Index>(b.src[static_cast<std::size_t>(k)])).tail(h) += e.col(k);
      node_in.col(static_cast<Eigen::Index>(b.dst[static_cast<std::size_t>(k)])).tail(h) += e.col(k);
    }
    Matrix node_out = nn::forward(m.node_update[layer], node_in);
    v += node_out;

    if (cache) {
      auto& lc = cache->layers[layer];
      lc.edge_input = edge_in;
      lc.edge_out = std::move(edge_out);
      lc.node_input = node_in;
      lc.node_out = std::move(node_out);
    }
  }
  Matrix pooled = Matrix::Zero(h, static_cast<Eigen::Index>(b.graph_count));
  for (Eigen::Index i = 0; i < nv; ++i) {
    pooled.col(static_cast<Eigen::Index>(b.graph_of_node[static_cast<std::size_t>(i)])) += v.col(i);
  }
  Eigen::RowVectorXd y = nn::forward(m.readout, pooled).row(0);
  if (cache) {
    cache->nodes = std::move(v);
    cache->pooled = std::move(pooled);
  }
  return y;
}

/// Accumulates dL/dθ into `grad` given dL/dŷ (standardized, one entry per graph).
inline void backward(const GnnModel& m, const GraphBatch& b, const ForwardCache& cache,
                     const Eigen::RowVectorXd& dy, GnnGrad& grad) {
  const auto h = static_cast<Eigen::Index>(m.arch.hidden);
  const auto ne = static_cast<Eigen::Index>(b.src.size());
  const auto nv = b.node_features.cols();
  if (cache.layers.size() != m.arch.layers || dy.size() != static_cast<Eigen::Index>(b.graph_count)) {
    throw PreconditionError("gnn backward: cache does not match batch");
  }

  const Matrix dpooled = nn::backward(m.readout, cache.pooled, Matrix(), Matrix(dy), grad.readout);

  Matrix dv(h, nv);
  for (Eigen::Index i = 0; i < nv; ++i) {
    dv.col(i) = dpooled.col(static_cast<Eigen::Index>(b.graph_of_node[static_cast<std::size_t>(i)]));
  }
  Matrix de = Matrix::Zero(h, ne);

  for (std::size_t layer = m.arch.layers; layer-- > 0;) {
    const auto& lc = cache.layers[layer];
    // v' = relu(W_V [v; Σe'] + b) + v
    const Matrix dnode_in = nn::backward(m.node_update[layer], lc.node_input, lc.node_out, dv, grad.node_update[layer]);
    dv += dnode_in.topRows(h);
    for (Eigen::Index k = 0; k < ne; ++k) {
      de.col(k) += dnode_in.col(static_cast<Eigen::Index>(b.src[static_cast<std::size_t>(k)])).tail(h);
      de.col(k) += dnode_in.col(static_cast<Eigen::Index>(b.dst[static_cast<std::size_t>(k)])).tail(h);
    }
    // e' = relu(W_E [e; v_src; v_dst] + b) + e
    const Matrix dedge_in = nn::backward(m.edge_update[layer], lc.edge_input, lc.edge_out, de, grad.edge_update[layer]);
    de += dedge_in.topRows(h);
    for (Eigen::Index k = 0; k < ne; ++k) {
      dv.col(static_cast<Eigen::Index>(b.src[static_cast<std::size_t>(k)])) += dedge_in.col(k).segment(h, h);
      dv.col(static_cast<Eigen::Index>(b.dst[static_cast<std::size_t>(k)])) += dedge_in.col(k).tail(h);
    }
  }
  nn::backward(m.init_node, cache.init_node, std::move(dv), grad.init_node);
  nn::backward(m.init_edge, cache.init_edge, std::move(de), grad.init_edge);
}

/// Predicted blackout size in MW.
inline double predict_mw(const GnnModel& m, const GraphSample& g) {
  const GraphSample* ptr = &g;
  const auto batch = GraphBatch::build(std::span(&ptr, 1), m.norms);
  return m.denormalize(forward(m, batch)[0]);
}

/// Predictions in MW for many graphs, evaluated in fixed-size chunks.
inline std::vector<double> predict_many(const GnnModel& m, std::span<const GraphSample> graphs,
                                        std::size_t chunk_size = 64, std::size_t workers = 1) {
  std::vector<double> out(graphs.size());
  const auto chunks = (graphs.size() + chunk_size - 1) / chunk_size;
  parallel_for(chunks, workers, [&](std::size_t c) {
    std::vector<const GraphSample*> ptrs;
    const auto begin = c * chunk_size;
    const auto end = std::min(graphs.size(), begin + chunk_size);
    for (auto i = begin; i < end; ++i) ptrs.push_back(&graphs[i]);
    const auto y = forward(m, GraphBatch::build(ptrs, m.norms));
    for (auto i = begin; i < end; ++i) out[i] = m.denormalize(y[static_cast<Eigen::Index>(i - begin)]);
  });
  return out;
}

inline GraphSample encode(const GnnModel& m, const GridState& state, std::span<const LineId> failures,
                          double label_mw = 0.0) {
  return encode_sample(state, failures, m.topology, m.norms, label_mw);
}

// ---------------------------------------------------------------------------
// Training

enum class Population { Mixed, BlackoutOnly };

inline const char* to_string(Population p) { return p == Population::Mixed ? "mixed" : "blackout-only"; }

inline Population parse_population(const std::string& s) {
  if (s == "mixed") return Population::Mixed;
  if (s == "blackout-only") return Population::BlackoutOnly;
  throw ValidationError("unknown population '" + s + "'");
}

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 128;
  std::size_t epochs = 100;
  std::size_t patience = 10;  // epochs without validation improvement; 0 disables
  std::uint64_t seed = 0;
  Architecture arch{};
  Population population = Population::Mixed;
  double blackout_threshold = kBlackoutThreshold;
  std::size_t chunk_size = 16;  // graphs per gradient task; fixed so sums do not depend on workers
  std::size_t workers = 1;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_mse = 0.0;
  double val_mse = 0.0;  // NaN when there is no validation data
};

struct TrainResult {
  GnnModel model;
  nn::AdamState optimizer;
  std::vector<EpochRecord> log;
  std::size_t best_epoch = 0;
  TrainConfig config;
};

inline std::vector<std::size_t> filter_population(const SampleSet& set, std::vector<std::size_t> indices,
                                                  Population population, double threshold) {
  if (population == Population::BlackoutOnly) {
    std::erase_if(indices, [&](std::size_t i) { return !is_blackout(set.samples[i].blackout_mw, threshold); });
  }
  return indices;
}

/// Mean squared error in standardized label units.
inline double mse(const GnnModel& m, const std::vector<GraphSample>& graphs, std::size_t chunk_size,
                  std::size_t workers) {
  if (graphs.empty()) return std::nan("");
  const auto chunks = (graphs.size() + chunk_size - 1) / chunk_size;
  std::vector<double> partial(chunks, 0.0);
  parallel_for(chunks, workers, [&](std::size_t c) {
    std::vector<const GraphSample*> ptrs;
    for (auto i = c * chunk_size; i < std::min(graphs.size(), (c + 1) * chunk_size); ++i) ptrs.push_back(&graphs[i]);
    const auto batch = GraphBatch::build(ptrs, m.norms);
    partial[c] = (forward(m, batch) - batch.labels).squaredNorm();
  });
  double total = 0.0;
  for (auto p : partial) total += p;
  return total / static_cast<double>(graphs.size());
}

/// Pairwise reduction in a fixed tree order.
inline GnnGrad reduce_fixed(std::vector<GnnGrad>& parts) {
  for (std::size_t stride = 1; stride < parts.size(); stride *= 2) {
    for (std::size_t i = 0; i + stride < parts.size(); i += 2 * stride) parts[i] += parts[i + stride];
  }
  return std::move(parts.front());
}

/// Gradient of the batch-mean squared error (standardized labels).
inline std::pair<GnnGrad, double> batch_gradient(const GnnModel& m, std::span<const GraphSample* const> graphs,
                                                 std::size_t chunk_size, std::size_t workers) {
  const auto chunks = (graphs.size() + chunk_size - 1) / chunk_size;
  std::vector<GnnGrad> parts(chunks);
  std::vector<double> losses(chunks, 0.0);
  const double scale = 1.0 / static_cast<double>(graphs.size());
  parallel_for(chunks, workers, [&](std::size_t c) {
    const auto begin = c * chunk_size;
    const auto end = std::min(graphs.size(), begin + chunk_size);
    const auto batch = GraphBatch::build(graphs.subspan(begin, end - begin), m.norms);
    ForwardCache cache;
    const Eigen::RowVectorXd residual = forward(m, batch, &cache) - batch.labels;
    losses[c] = residual.squaredNorm();
    parts[c] = GnnGrad::zeros_like(m);
    backward(m, batch, cache, (2.0 * scale) * residual, parts[c]);
  });
  double loss = 0.0;
  for (auto l : losses) loss += l;
  return {reduce_fixed(parts), loss * scale};
}

/// Mini-batch Adam on standardized MSE; returns the parameters from the epoch
/// with the lowest validation loss (training loss when there is no validation split).
inline TrainResult train_gnn(const SampleSet& set, const AugmentedTopology& topology, const TrainConfig& config,
                             std::vector<EpochRecord>* live_log = nullptr) {
  if (config.batch_size == 0 || config.chunk_size == 0) throw PreconditionError("batch and chunk sizes must be >= 1");
  const auto train_idx =
      filter_population(set, set.indices(Split::Train), config.population, config.blackout_threshold);
  const auto val_idx =
      filter_population(set, set.indices(Split::Validation), config.population, config.blackout_threshold);
  if (train_idx.empty()) throw PreconditionError("empty population: no training samples after filtering");

  const auto norms = compute_norms(set, train_idx);
  auto encode_all = [&](const std::vector<std::size_t>& idx) {
    std::vector<GraphSample> out(idx.size());
    parallel_for(idx.size(), config.workers, [&](std::size_t k) {
      const auto& s = set.samples[idx[k]];
      out[k] = encode_sample(set.state_of(s), s.failures, topology, norms, s.blackout_mw);
    });
    return out;
  };
  const auto train = encode_all(train_idx);
  const auto val = encode_all(val_idx);

  TrainResult result{make_model(config.arch, config.seed, topology, norms), {}, {}, 0, config};
  auto params = result.model.params();
  result.optimizer = nn::make_adam(params, {config.learning_rate});

  auto record = [&](std::size_t epoch) {
    EpochRecord r{epoch, mse(result.model, train, config.chunk_size, config.workers),
                  mse(result.model, val, config.chunk_size, config.workers)};
    result.log.push_back(r);
    if (live_log) live_log->push_back(r);
    return val.empty() ? r.train_mse : r.val_mse;
  };

  double best = record(0);
  GnnModel best_model = result.model;
  nn::AdamState best_opt = result.optimizer;
  std::size_t since_best = 0;
  std::mt19937_64 rng(config.seed ^ 0x5eed5eed5eedULL);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<const GraphSample*> batch;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      batch.clear();
      for (auto i = start; i < std::min(order.size(), start + config.batch_size); ++i) batch.push_back(&train[order[i]]);
      const auto [grad, loss] = batch_gradient(result.model, batch, config.chunk_size, config.workers);
      const auto blocks = grad.blocks();
      nn::optimizer_step(params, blocks, result.optimizer);
    }
    const double score = record(epoch);
    if (score < best) {
      best = score;
      best_model = result.model;
      best_opt = result.optimizer;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (config.patience > 0 && ++since_best >= config.patience) {
      break;
    }
  }
  result.model = std::move(best_model);
  result.optimizer = std::move(best_opt);
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json norms_to_json(const FeatureNorms& n) {
  return {{"node_mean", n.node_mean}, {"node_std", n.node_std}, {"edge_mean", n.edge_mean},
          {"edge_std", n.edge_std},   {"label_mean", n.label_mean}, {"label_std", n.label_std}};
}

inline FeatureNorms norms_from_json(const nlohmann::json& j) {
  FeatureNorms n;
  n.node_mean = j.at("node_mean").get<std::array<double, kNodeFeatures>>();
  n.node_std = j.at("node_std").get<std::array<double, kNodeFeatures>>();
  n.edge_mean = j.at("edge_mean").get<std::array<double, kEdgeFeatures>>();
  n.edge_std = j.at("edge_std").get<std::array<double, kEdgeFeatures>>();
  n.label_mean = j.at("label_mean").get<double>();
  n.label_std = j.at("label_std").get<double>();
  return n;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
          {"epochs", c.epochs},               {"patience", c.patience},
          {"seed", c.seed},                   {"layers", c.arch.layers},
          {"hidden", c.arch.hidden},          {"population", to_string(c.population)},
          {"blackout_threshold", c.blackout_threshold}, {"chunk_size", c.chunk_size}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  base.learning_rate = j.value("learning_rate", base.learning_rate);
  base.batch_size = j.value("batch_size", base.batch_size);
  base.epochs = j.value("epochs", base.epochs);
  base.patience = j.value("patience", base.patience);
  base.seed = j.value("seed", base.seed);
  base.arch.layers = j.value("layers", base.arch.layers);
  base.arch.hidden = j.value("hidden", base.arch.hidden);
  if (j.contains("population")) base.population = parse_population(j.at("population").get<std::string>());
  base.blackout_threshold = j.value("blackout_threshold", base.blackout_threshold);
  base.chunk_size = j.value("chunk_size", base.chunk_size);
  return base;
}

inline nlohmann::json checkpoint_to_json(const TrainResult& r) {
  auto model = r.model;  // params() needs a mutable model
  nlohmann::json layers = nlohmann::json::array();
  for (auto* p : model.params()) layers.push_back(nn::to_json(*p));
  nlohmann::json log = nlohmann::json::array();
  for (const auto& e : r.log) {
    log.push_back({e.epoch, e.train_mse, std::isnan(e.val_mse) ? nlohmann::json(nullptr) : nlohmann::json(e.val_mse)});
  }
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : r.model.topology.statistical_edges) {
    edges.push_back({e.from_bus, e.to_bus, e.line_a, e.line_b, e.score});
  }
  return {{"format", "blackout-gnn"},
          {"version", kCheckpointVersion},
          {"architecture",
           {{"layers", r.model.arch.layers},
            {"hidden", r.model.arch.hidden},
            {"node_features", kNodeFeatures},
            {"edge_features", kEdgeFeatures}}},
          {"train_config", train_config_to_json(r.config)},
          {"norms", norms_to_json(r.model.norms)},
          {"statistical_edges", edges},
          {"best_epoch", r.best_epoch},
          {"log", log},
          {"parameters", layers},
          {"optimizer", nn::to_json(r.optimizer)}};
}

inline TrainResult checkpoint_from_json(const nlohmann::json& j, const GridPtr& grid) {
  if (j.value("format", "") != "blackout-gnn" || j.value("version", 0) != kCheckpointVersion) {
    throw ValidationError("not a v1 GNN checkpoint");
  }
  TrainResult r;
  r.config = train_config_from_json(j.at("train_config"));
  Architecture arch{j.at("architecture").at("layers").get<std::size_t>(),
                    j.at("architecture").at("hidden").get<std::size_t>()};
  std::vector<StatisticalEdge> edges;
  for (const auto& e : j.at("statistical_edges")) {
    edges.push_back({e[0].get<BusId>(), e[1].get<BusId>(), e[2].get<LineId>(), e[3].get<LineId>(), e[4].get<double>()});
  }
  auto topology = augment_topology(grid, edges);
  if (topology.statistical_edges.size() != edges.size()) {
    throw ValidationError("checkpoint statistical edges do not fit this grid");
  }
  r.model = make_model(arch, 0, std::move(topology), norms_from_json(j.at("norms")));
  auto params = r.model.params();
  const auto& stored = j.at("parameters");
  if (stored.size() != params.size()) throw ValidationError("checkpoint parameter block count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto layer = nn::dense_from_json(stored[i]);
    if (layer.weights.rows() != params[i]->weights.rows() || layer.weights.cols() != params[i]->weights.cols()) {
      throw ValidationError("checkpoint shape mismatch for " + params[i]->name);
    }
    *params[i] = std::move(layer);
  }
  r.optimizer = nn::adam_from_json(j.at("optimizer"), params);
  r.best_epoch = j.value("best_epoch", std::size_t{0});
  for (const auto& e : j.at("log")) {
    r.log.push_back({e[0].get<std::size_t>(), e[1].get<double>(), e[2].is_null() ? std::nan("") : e[2].get<double>()});
  }
  return r;
}

/// Training-log CSV: epoch,train_mse,val_mse
inline std::string serialize_log(const std::vector<EpochRecord>& log) {
  std::string out = "epoch,train_mse,val_mse\n";
  for (const auto& e : log) {
    out += std::to_string(e.epoch) + "," + io::format_double(e.train_mse) + "," +
           (std::isnan(e.val_mse) ? std::string() : io::format_double(e.val_mse)) + "\n";
  }
  return out;
}

}  // namespace blackout::gnn
