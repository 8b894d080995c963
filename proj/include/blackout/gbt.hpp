#pragma once

// Gradient-boosted trees for the blackout / no-blackout decision, trained with
// second-order logistic boosting and exact greedy split search.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "blackout/cascade.hpp"
#include "blackout/error.hpp"
#include "blackout/grid.hpp"
#include "blackout/parallel.hpp"
#include "json.hpp"

namespace blackout::gbt {

/// Flat feature vector: bus loads, bus generations, line resistances, line
/// reactances, multi-hot initial-failure mask. Length 2|V| + 3|E|.
inline std::vector<double> featurize(const GridState& state, std::span<const LineId> failures) {
  const Grid& grid = *state.grid;
  const auto nb = grid.bus_count();
  const auto nl = grid.line_count();
  std::vector<double> x;
  x.reserve(2 * nb + 3 * nl);
  x.insert(x.end(), state.load.begin(), state.load.end());
  x.insert(x.end(), state.generation.begin(), state.generation.end());
  for (const auto& l : grid.lines) x.push_back(l.resistance);
  for (const auto& l : grid.lines) x.push_back(l.reactance);
  const auto mask_start = x.size();
  x.resize(x.size() + nl, 0.0);
  for (auto f : failures) {
    if (f >= nl) throw PreconditionError("failed line id " + std::to_string(f) + " out of range");
    x[mask_start + f] = 1.0;
  }
  return x;
}

inline std::size_t feature_length(std::size_t buses, std::size_t lines) { return 2 * buses + 3 * lines; }

struct FlatSample {
  std::vector<double> features;
  int label = 0;
  double weight = 1.0;
};

/// Mean blackout size over the positive samples in `indices` (0 if none).
inline double mean_positive_blackout(const SampleSet& set, std::span<const std::size_t> indices,
                                     double threshold = kBlackoutThreshold) {
  double sum = 0.0;
  std::size_t n = 0;
  for (auto i : indices) {
    if (is_blackout(set.samples[i].blackout_mw, threshold)) {
      sum += set.samples[i].blackout_mw;
      ++n;
    }
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

/// Labels from the blackout threshold. With `mean_positive` > 0 the weight is
/// 1 + blackout_mw / mean_positive; otherwise every weight is 1.
inline std::vector<FlatSample> make_flat_samples(const SampleSet& set, std::span<const std::size_t> indices,
                                                 double mean_positive, double threshold = kBlackoutThreshold) {
  std::vector<FlatSample> out;
  out.reserve(indices.size());
  for (auto i : indices) {
    const auto& s = set.samples[i];
    const double w = mean_positive > 0.0 ? 1.0 + s.blackout_mw / mean_positive : 1.0;
    out.push_back({featurize(set.state_of(s), s.failures), is_blackout(s.blackout_mw, threshold) ? 1 : 0, w});
  }
  return out;
}

struct Hyperparameters {
  std::size_t max_depth = 8;
  double min_child_weight = 1.0;
  double gamma = 1.0;
  double lambda = 1.0;
  double learning_rate = 0.3;
  std::size_t n_rounds = 200;
  std::size_t early_stopping_rounds = 20;  // on validation F1; 0 disables
  double decision_threshold = 0.5;
  bool linear_weighting = true;
};

struct TreeNode {
  int feature = -1;  // -1 for leaves
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;    // leaf output (already scaled by the learning rate)
  double gain = 0.0;     // split gain including the −gamma term
  double hessian = 0.0;  // hessian sum of the samples reaching this node

  bool is_leaf() const { return feature < 0; }
};

struct Tree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root

  double predict(std::span<const double> x) const {
    int k = 0;
    while (!nodes[static_cast<std::size_t>(k)].is_leaf()) {
      const auto& n = nodes[static_cast<std::size_t>(k)];
      k = x[static_cast<std::size_t>(n.feature)] < n.threshold ? n.left : n.right;
    }
    return nodes[static_cast<std::size_t>(k)].value;
  }

  std::size_t depth(int k = 0) const {
    const auto& n = nodes[static_cast<std::size_t>(k)];
    return n.is_leaf() ? 0 : 1 + std::max(depth(n.left), depth(n.right));
  }
};

struct BoostedForest {
  double base_score = 0.0;  // log-odds
  std::vector<Tree> trees;
  Hyperparameters params;
  std::size_t feature_count = 0;
};

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline double margin(const BoostedForest& f, std::span<const double> x) {
  double m = f.base_score;
  for (const auto& t : f.trees) m += t.predict(x);
  return m;
}

struct Prediction {
  double probability = 0.0;
  bool positive = false;
};

inline Prediction predict_gbt(const BoostedForest& f, std::span<const double> x) {
  if (x.size() != f.feature_count) {
    throw PreconditionError("expected " + std::to_string(f.feature_count) + " features, got " +
                            std::to_string(x.size()));
  }
  const double p = sigmoid(margin(f, x));
  return {p, p >= f.params.decision_threshold};
}

/// Weighted mean logistic loss.
inline double logistic_loss(std::span<const double> margins, std::span<const FlatSample> samples) {
  double loss = 0.0, weight = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double z = margins[i];
    // log(1 + e^z) − y·z, computed stably
    const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    loss += samples[i].weight * (softplus - samples[i].label * z);
    weight += samples[i].weight;
  }
  return loss / weight;
}

struct Metrics {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  double accuracy = 0.0;
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> f1;
};

/// Confusion-matrix metrics. Precision, recall and F1 are empty when their
/// denominators vanish.
inline Metrics classifier_metrics(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) throw PreconditionError("predictions and labels differ in length");
  if (predictions.empty()) throw PreconditionError("no predictions to score");
  Metrics m;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool p = predictions[i] != 0, y = labels[i] != 0;
    if (p && y) ++m.tp;
    else if (p) ++m.fp;
    else if (y) ++m.fn;
    else ++m.tn;
  }
  m.accuracy = static_cast<double>(m.tp + m.tn) / static_cast<double>(labels.size());
  if (m.tp + m.fp) m.precision = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp);
  if (m.tp + m.fn) m.recall = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
  if (m.precision && m.recall && *m.precision + *m.recall > 0.0) {
    m.f1 = 2.0 * *m.precision * *m.recall / (*m.precision + *m.recall);
  }
  return m;
}

namespace detail {

struct SplitCandidate {
  double gain = 0.0;
  int feature = -1;
  double threshold = 0.0;
  double left_g = 0.0, left_h = 0.0;
};

inline double leaf_score(double g, double h, double lambda) { return g * g / (h + lambda); }

/// Grows one tree level by level. `position` maps each sample to its node.
inline Tree grow_tree(const std::vector<std::vector<double>>& columns,
                      const std::vector<std::vector<std::uint32_t>>& sorted, std::span<const double> grad,
                      std::span<const double> hess, const Hyperparameters& hp, std::size_t workers) {
  const auto n = grad.size();
  const auto features = columns.size();
  Tree tree;
  std::vector<int> position(n, 0);
  std::vector<double> node_g{std::accumulate(grad.begin(), grad.end(), 0.0)};
  std::vector<double> node_h{std::accumulate(hess.begin(), hess.end(), 0.0)};
  tree.nodes.push_back({});
  tree.nodes[0].hessian = node_h[0];
  std::vector<int> frontier{0};

  for (std::size_t depth = 0; depth < hp.max_depth && !frontier.empty(); ++depth) {
    std::vector<int> slot(tree.nodes.size(), -1);
    for (std::size_t s = 0; s < frontier.size(); ++s) slot[static_cast<std::size_t>(frontier[s])] = static_cast<int>(s);
    const auto nf = frontier.size();

    // best[f][s]: best split of frontier slot s on feature f
    std::vector<std::vector<SplitCandidate>> best(features, std::vector<SplitCandidate>(nf));
    parallel_for(features, workers, [&](std::size_t f) {
      std::vector<double> gl(nf, 0.0), hl(nf, 0.0), last(nf, 0.0);
      std::vector<char> seen(nf, 0);
      auto& out = best[f];
      const auto& col = columns[f];
      for (auto i : sorted[f]) {
        const int s = slot[static_cast<std::size_t>(position[i])];
        if (s < 0) continue;
        const auto su = static_cast<std::size_t>(s);
        const double x = col[i];
        if (seen[su] && x > last[su]) {
          const double g = node_g[static_cast<std::size_t>(frontier[su])];
          const double h = node_h[static_cast<std::size_t>(frontier[su])];
          const double gr = g - gl[su], hr = h - hl[su];
          if (hl[su] >= hp.min_child_weight && hr >= hp.min_child_weight) {
            const double gain = 0.5 * (leaf_score(gl[su], hl[su], hp.lambda) + leaf_score(gr, hr, hp.lambda) -
                                       leaf_score(g, h, hp.lambda)) -
                                hp.gamma;
            if (gain > out[su].gain) {
              double thr = last[su] + (x - last[su]) / 2.0;
              if (!(thr > last[su])) thr = x;
              out[su] = {gain, static_cast<int>(f), thr, gl[su], hl[su]};
            }
          }
        }
        gl[su] += grad[i];
        hl[su] += hess[i];
        last[su] = x;
        seen[su] = 1;
      }
    });

    std::vector<int> next;
    std::vector<std::pair<int, int>> children(tree.nodes.size(), {-1, -1});
    for (std::size_t s = 0; s < nf; ++s) {
      SplitCandidate chosen;
      for (std::size_t f = 0; f < features; ++f) {
        if (best[f][s].gain > chosen.gain) chosen = best[f][s];
      }
      const auto node = static_cast<std::size_t>(frontier[s]);
      if (chosen.feature < 0) continue;
      const int left = static_cast<int>(tree.nodes.size());
      const int right = left + 1;
      tree.nodes[node].feature = chosen.feature;
      tree.nodes[node].threshold = chosen.threshold;
      tree.nodes[node].gain = chosen.gain;
      tree.nodes[node].left = left;
      tree.nodes[node].right = right;
      tree.nodes.push_back({});
      tree.nodes.push_back({});
      node_g.push_back(chosen.left_g);
      node_h.push_back(chosen.left_h);
      node_g.push_back(node_g[node] - chosen.left_g);
      node_h.push_back(node_h[node] - chosen.left_h);
      tree.nodes[static_cast<std::size_t>(left)].hessian = node_h[static_cast<std::size_t>(left)];
      tree.nodes[static_cast<std::size_t>(right)].hessian = node_h[static_cast<std::size_t>(right)];
      next.push_back(left);
      next.push_back(right);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto& node = tree.nodes[static_cast<std::size_t>(position[i])];
      if (node.is_leaf()) continue;
      position[i] = columns[static_cast<std::size_t>(node.feature)][i] < node.threshold ? node.left : node.right;
    }
    frontier = std::move(next);
  }
  for (std::size_t k = 0; k < tree.nodes.size(); ++k) {
    if (tree.nodes[k].is_leaf()) tree.nodes[k].value = -hp.learning_rate * node_g[k] / (node_h[k] + hp.lambda);
  }
  return tree;
}

}  // namespace detail

struct TrainReport {
  std::vector<double> train_loss;  // after each round; entry 0 is the base score alone
  std::vector<std::optional<double>> val_f1;
  std::size_t best_rounds = 0;
};

/// Logistic boosting. When `validation` is non-empty, stops after
/// early_stopping_rounds rounds without a better validation F1 and keeps the
/// best prefix of trees.
inline BoostedForest train_gbt(std::span<const FlatSample> input, const Hyperparameters& hp,
                               std::span<const FlatSample> validation = {}, std::size_t workers = 1,
                               TrainReport* report = nullptr) {
  if (input.empty()) throw PreconditionError("no training samples");
  const auto nfeat = input.front().features.size();
  for (const auto& s : input) {
    if (s.features.size() != nfeat) throw PreconditionError("training samples differ in feature length");
  }
  // Sorting into a canonical order makes tie handling and every floating-point
  // sum independent of the order the caller supplied.
  std::vector<FlatSample> samples(input.begin(), input.end());
  std::sort(samples.begin(), samples.end(), [](const FlatSample& a, const FlatSample& b) {
    return std::tie(a.features, a.label, a.weight) < std::tie(b.features, b.label, b.weight);
  });
  double wpos = 0.0, wall = 0.0;
  bool has_pos = false, has_neg = false;
  for (const auto& s : samples) {
    if (!(s.weight > 0.0)) throw PreconditionError("sample weights must be positive");
    if (s.label) has_pos = true;
    else has_neg = true;
    wpos += s.weight * s.label;
    wall += s.weight;
  }
  if (!has_pos || !has_neg) throw PreconditionError("training data must contain both classes");

  BoostedForest forest;
  forest.params = hp;
  forest.feature_count = nfeat;
  const double p0 = wpos / wall;
  forest.base_score = std::log(p0 / (1.0 - p0));

  const auto n = samples.size();
  std::vector<std::vector<double>> columns(nfeat, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t f = 0; f < nfeat; ++f) columns[f][i] = samples[i].features[f];
  }
  std::vector<std::vector<std::uint32_t>> sorted(nfeat);
  parallel_for(nfeat, workers, [&](std::size_t f) {
    auto& idx = sorted[f];
    idx.resize(n);
    std::iota(idx.begin(), idx.end(), 0u);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return columns[f][a] < columns[f][b]; });
  });

  std::vector<double> margins(n, forest.base_score);
  std::vector<double> val_margins(validation.size(), forest.base_score);
  std::vector<double> grad(n), hess(n);
  std::vector<int> val_labels, val_pred(validation.size());
  for (const auto& s : validation) val_labels.push_back(s.label);
  if (report) report->train_loss.push_back(logistic_loss(margins, samples));

  double best_f1 = -1.0;
  std::size_t best_rounds = 0;
  for (std::size_t round = 0; round < hp.n_rounds; ++round) {
    for (std::size_t i = 0; i < n; ++i) {
      const double p = sigmoid(margins[i]);
      grad[i] = samples[i].weight * (p - samples[i].label);
      hess[i] = samples[i].weight * p * (1.0 - p);
    }
    forest.trees.push_back(detail::grow_tree(columns, sorted, grad, hess, hp, workers));
    const auto& tree = forest.trees.back();
    for (std::size_t i = 0; i < n; ++i) margins[i] += tree.predict(samples[i].features);
    if (report) report->train_loss.push_back(logistic_loss(margins, samples));

    if (!validation.empty()) {
      for (std::size_t i = 0; i < validation.size(); ++i) {
        val_margins[i] += tree.predict(validation[i].features);
        val_pred[i] = sigmoid(val_margins[i]) >= hp.decision_threshold ? 1 : 0;
      }
      const auto f1 = classifier_metrics(val_pred, val_labels).f1;
      if (report) report->val_f1.push_back(f1);
      const double score = f1.value_or(0.0);
      if (score > best_f1) {
        best_f1 = score;
        best_rounds = round + 1;
      } else if (hp.early_stopping_rounds > 0 && round + 1 - best_rounds >= hp.early_stopping_rounds) {
        break;
      }
    }
  }
  if (!validation.empty()) forest.trees.resize(best_rounds);
  if (report) report->best_rounds = forest.trees.size();
  return forest;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json params_to_json(const Hyperparameters& hp) {
  return {{"max_depth", hp.max_depth},
          {"min_child_weight", hp.min_child_weight},
          {"gamma", hp.gamma},
          {"lambda", hp.lambda},
          {"learning_rate", hp.learning_rate},
          {"n_rounds", hp.n_rounds},
          {"early_stopping_rounds", hp.early_stopping_rounds},
          {"decision_threshold", hp.decision_threshold},
          {"sample_weight", hp.linear_weighting ? "linear" : "none"}};
}

inline Hyperparameters params_from_json(const nlohmann::json& j, Hyperparameters hp = {}) {
  hp.max_depth = j.value("max_depth", hp.max_depth);
  hp.min_child_weight = j.value("min_child_weight", hp.min_child_weight);
  hp.gamma = j.value("gamma", hp.gamma);
  hp.lambda = j.value("lambda", hp.lambda);
  hp.learning_rate = j.value("learning_rate", hp.learning_rate);
  hp.n_rounds = j.value("n_rounds", hp.n_rounds);
  hp.early_stopping_rounds = j.value("early_stopping_rounds", hp.early_stopping_rounds);
  hp.decision_threshold = j.value("decision_threshold", hp.decision_threshold);
  if (j.contains("sample_weight")) {
    const auto w = j.at("sample_weight").get<std::string>();
    if (w != "linear" && w != "none") throw ValidationError("sample_weight must be 'linear' or 'none'");
    hp.linear_weighting = w == "linear";
  }
  return hp;
}

namespace detail {

inline nlohmann::json node_to_json(const Tree& t, int k) {
  const auto& n = t.nodes[static_cast<std::size_t>(k)];
  if (n.is_leaf()) return {{"leaf", n.value}, {"hessian", n.hessian}};
  return {{"feature", n.feature}, {"threshold", n.threshold}, {"gain", n.gain}, {"hessian", n.hessian},
          {"left", node_to_json(t, n.left)}, {"right", node_to_json(t, n.right)}};
}

inline int node_from_json(const nlohmann::json& j, Tree& t) {
  const int k = static_cast<int>(t.nodes.size());
  t.nodes.push_back({});
  if (j.contains("leaf")) {
    t.nodes.back().value = j.at("leaf").get<double>();
    t.nodes.back().hessian = j.value("hessian", 0.0);
    return k;
  }
  TreeNode n;
  n.feature = j.at("feature").get<int>();
  n.threshold = j.at("threshold").get<double>();
  n.gain = j.value("gain", 0.0);
  n.hessian = j.value("hessian", 0.0);
  n.left = node_from_json(j.at("left"), t);
  n.right = node_from_json(j.at("right"), t);
  t.nodes[static_cast<std::size_t>(k)] = n;
  return k;
}

}  // namespace detail

inline nlohmann::json to_json(const BoostedForest& f) {
  auto trees = nlohmann::json::array();
  for (const auto& t : f.trees) trees.push_back(detail::node_to_json(t, 0));
  return {{"format", "blackout-gbt"}, {"version", kCheckpointVersion}, {"base_score", f.base_score},
          {"feature_count", f.feature_count}, {"params", params_to_json(f.params)}, {"trees", trees}};
}

inline BoostedForest forest_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "blackout-gbt" || j.value("version", 0) != kCheckpointVersion) {
    throw ValidationError("not a v1 GBT checkpoint");
  }
  BoostedForest f;
  f.base_score = j.at("base_score").get<double>();
  f.feature_count = j.at("feature_count").get<std::size_t>();
  f.params = params_from_json(j.at("params"));
  for (const auto& t : j.at("trees")) {
    Tree tree;
    detail::node_from_json(t, tree);
    for (const auto& n : tree.nodes) {
      if (!n.is_leaf() && (n.feature < 0 || static_cast<std::size_t>(n.feature) >= f.feature_count)) {
        throw ValidationError("tree split references feature out of range");
      }
    }
    f.trees.push_back(std::move(tree));
  }
  return f;
}

}  // namespace blackout::gbt
