#pragma once

// Dense layers with hand-written backward passes and an Adam optimizer.
// Batches are column-major: one column per item.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "blackout/error.hpp"
#include "json.hpp"

namespace blackout::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation { Relu, Identity };

inline const char* to_string(Activation a) { return a == Activation::Relu ? "relu" : "identity"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::Relu;
  if (s == "identity") return Activation::Identity;
  throw ValidationError("unknown activation '" + s + "'");
}

struct DenseLayer {
  std::string name;
  Matrix weights;  // out × in
  Vector bias;     // out
  Activation activation = Activation::Identity;

  Eigen::Index in() const { return weights.cols(); }
  Eigen::Index out() const { return weights.rows(); }
};

struct DenseGrad {
  Matrix weights;
  Vector bias;

  static DenseGrad zeros_like(const DenseLayer& layer) {
    return {Matrix::Zero(layer.out(), layer.in()), Vector::Zero(layer.out())};
  }
  DenseGrad& operator+=(const DenseGrad& o) {
    weights += o.weights;
    bias += o.bias;
    return *this;
  }
};

/// Uniform ±sqrt(6 / (fan_in + fan_out)), zero bias.
inline DenseLayer make_dense(std::string name, Eigen::Index in, Eigen::Index out, Activation act,
                             std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  DenseLayer layer{std::move(name), Matrix(out, in), Vector::Zero(out), act};
  for (Eigen::Index c = 0; c < in; ++c) {
    for (Eigen::Index r = 0; r < out; ++r) layer.weights(r, c) = dist(rng);
  }
  return layer;
}

/// Cached input and post-activation output of one layer.
struct LayerCache {
  Matrix input;
  Matrix output;
};

inline Matrix forward(const DenseLayer& layer, const Matrix& x, LayerCache* cache = nullptr) {
  if (x.rows() != layer.in()) {
    throw PreconditionError(layer.name + ": expected input size " + std::to_string(layer.in()) +
                            ", got " + std::to_string(x.rows()));
  }
  Matrix y = layer.weights * x;
  y.colwise() += layer.bias;
  if (layer.activation == Activation::Relu) y = y.cwiseMax(0.0);
  if (cache) {
    cache->input = x;
    cache->output = y;
  }
  return y;
}

/// Accumulates parameter gradients into `grad` and returns dL/dx, given the
/// layer's forward input and post-activation output.
inline Matrix backward(const DenseLayer& layer, const Matrix& input, const Matrix& output, Matrix dy,
                       DenseGrad& grad) {
  if (dy.rows() != layer.out() || dy.cols() != input.cols()) {
    throw PreconditionError(layer.name + ": gradient does not match cached forward pass");
  }
  if (layer.activation == Activation::Relu) {
    if (output.cols() != dy.cols()) throw PreconditionError(layer.name + ": stale cache");
    dy = dy.cwiseProduct((output.array() > 0.0).cast<double>().matrix());
  }
  grad.weights.noalias() += dy * input.transpose();
  grad.bias += dy.rowwise().sum();
  return layer.weights.transpose() * dy;
}

inline Matrix backward(const DenseLayer& layer, const LayerCache& cache, Matrix dy, DenseGrad& grad) {
  return backward(layer, cache.input, cache.output, std::move(dy), grad);
}

/// A feed-forward stack.
struct Mlp {
  std::vector<DenseLayer> layers;

  Eigen::Index in() const { return layers.front().in(); }
  Eigen::Index out() const { return layers.back().out(); }
};

using MlpCache = std::vector<LayerCache>;
using MlpGrad = std::vector<DenseGrad>;

inline Mlp make_mlp(const std::string& name, std::span<const Eigen::Index> sizes,
                    std::span<const Activation> activations, std::mt19937_64& rng) {
  if (sizes.size() != activations.size() + 1) throw PreconditionError("mlp shape mismatch");
  Mlp mlp;
  for (std::size_t i = 0; i < activations.size(); ++i) {
    mlp.layers.push_back(
        make_dense(name + "." + std::to_string(i), sizes[i], sizes[i + 1], activations[i], rng));
  }
  return mlp;
}

inline MlpGrad zeros_like(const Mlp& mlp) {
  MlpGrad g;
  for (const auto& l : mlp.layers) g.push_back(DenseGrad::zeros_like(l));
  return g;
}

inline Matrix forward(const Mlp& mlp, const Matrix& x, MlpCache* cache = nullptr) {
  if (cache) cache->resize(mlp.layers.size());
  Matrix h = x;
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    h = forward(mlp.layers[i], h, cache ? &(*cache)[i] : nullptr);
  }
  return h;
}

inline Matrix backward(const Mlp& mlp, const MlpCache& cache, Matrix dy, MlpGrad& grad) {
  if (cache.size() != mlp.layers.size()) throw PreconditionError("stale mlp cache");
  for (std::size_t i = mlp.layers.size(); i-- > 0;) dy = backward(mlp.layers[i], cache[i], std::move(dy), grad[i]);
  return dy;
}

/// Single-input convenience.
inline Vector forward(const Mlp& mlp, const Vector& x, MlpCache& cache) {
  return forward(mlp, Matrix(x), &cache).col(0);
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<DenseGrad> first;
  std::vector<DenseGrad> second;
};

inline AdamState make_adam(std::span<DenseLayer* const> params, AdamConfig config = {}) {
  AdamState s{config, 0, {}, {}};
  for (const auto* p : params) {
    s.first.push_back(DenseGrad::zeros_like(*p));
    s.second.push_back(DenseGrad::zeros_like(*p));
  }
  return s;
}

/// Bias-corrected adaptive-moment update. Parameters are untouched if any
/// gradient is non-finite.
inline void optimizer_step(std::span<DenseLayer* const> params, std::span<const DenseGrad* const> grads,
                           AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.first.size()) {
    throw PreconditionError("optimizer: parameter/gradient/state block counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i]->weights.rows() != params[i]->out() || grads[i]->weights.cols() != params[i]->in() ||
        grads[i]->bias.size() != params[i]->out()) {
      throw PreconditionError("optimizer: gradient shape mismatch for " + params[i]->name);
    }
    if (!grads[i]->weights.allFinite() || !grads[i]->bias.allFinite()) {
      throw ValidationError("optimizer: non-finite gradient in " + params[i]->name);
    }
  }
  ++state.step;
  const auto& c = state.config;
  const double t = static_cast<double>(state.step);
  const double correct1 = 1.0 - std::pow(c.beta1, t);
  const double correct2 = 1.0 - std::pow(c.beta2, t);
  auto update = [&](auto& param, const auto& g, auto& m, auto& v) {
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseProduct(g);
    param.array() -= c.learning_rate * (m.array() / correct1) /
                     ((v.array() / correct2).sqrt() + c.epsilon);
  };
  for (std::size_t i = 0; i < params.size(); ++i) {
    update(params[i]->weights, grads[i]->weights, state.first[i].weights, state.second[i].weights);
    update(params[i]->bias, grads[i]->bias, state.first[i].bias, state.second[i].bias);
  }
}

// ---------------------------------------------------------------------------
// Serialization

namespace detail {

inline nlohmann::json matrix_to_json(const Matrix& m) {
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) flat.push_back(m(r, c));
  }
  return flat;
}

inline Matrix matrix_from_json(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols) {
  const auto flat = j.get<std::vector<double>>();
  if (flat.size() != static_cast<std::size_t>(rows * cols)) throw ValidationError("matrix size mismatch in checkpoint");
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = flat[static_cast<std::size_t>(r * cols + c)];
  }
  return m;
}

}  // namespace detail

inline nlohmann::json to_json(const DenseLayer& l) {
  return {{"name", l.name},
          {"activation", to_string(l.activation)},
          {"in", l.in()},
          {"out", l.out()},
          {"weights", detail::matrix_to_json(l.weights)},
          {"bias", detail::matrix_to_json(l.bias)}};
}

inline DenseLayer dense_from_json(const nlohmann::json& j) {
  const auto in = j.at("in").get<Eigen::Index>();
  const auto out = j.at("out").get<Eigen::Index>();
  DenseLayer l{j.at("name").get<std::string>(), detail::matrix_from_json(j.at("weights"), out, in),
               detail::matrix_from_json(j.at("bias"), out, 1).col(0),
               parse_activation(j.at("activation").get<std::string>())};
  return l;
}

inline nlohmann::json to_json(const Mlp& mlp) {
  auto arr = nlohmann::json::array();
  for (const auto& l : mlp.layers) arr.push_back(to_json(l));
  return arr;
}

inline Mlp mlp_from_json(const nlohmann::json& j) {
  Mlp mlp;
  for (const auto& l : j) mlp.layers.push_back(dense_from_json(l));
  return mlp;
}

inline nlohmann::json to_json(const AdamState& s) {
  auto moments = [](const std::vector<DenseGrad>& v) {
    auto arr = nlohmann::json::array();
    for (const auto& g : v) {
      arr.push_back({{"weights", detail::matrix_to_json(g.weights)}, {"bias", detail::matrix_to_json(g.bias)}});
    }
    return arr;
  };
  return {{"learning_rate", s.config.learning_rate},
          {"beta1", s.config.beta1},
          {"beta2", s.config.beta2},
          {"epsilon", s.config.epsilon},
          {"step", s.step},
          {"first", moments(s.first)},
          {"second", moments(s.second)}};
}

inline AdamState adam_from_json(const nlohmann::json& j, std::span<DenseLayer* const> params) {
  AdamState s = make_adam(params, {j.at("learning_rate").get<double>(), j.at("beta1").get<double>(),
                                   j.at("beta2").get<double>(), j.at("epsilon").get<double>()});
  s.step = j.at("step").get<std::uint64_t>();
  auto load = [&](const nlohmann::json& arr, std::vector<DenseGrad>& out) {
    if (arr.size() != params.size()) throw ValidationError("optimizer state block count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      out[i].weights = detail::matrix_from_json(arr[i].at("weights"), params[i]->out(), params[i]->in());
      out[i].bias = detail::matrix_from_json(arr[i].at("bias"), params[i]->out(), 1).col(0);
    }
  };
  load(j.at("first"), s.first);
  load(j.at("second"), s.second);
  return s;
}

}  // namespace blackout::nn
