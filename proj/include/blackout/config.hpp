#pragma once

// Declarative experiment configuration (JSON). Every field has a default, so
// an empty object is a complete config.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "blackout/cascade.hpp"
#include "blackout/error.hpp"
#include "blackout/gbt.hpp"
#include "blackout/gnn.hpp"
#include "blackout/io.hpp"
#include "blackout/parallel.hpp"
#include "blackout/pipeline.hpp"
#include "json.hpp"

namespace blackout {

struct Thresholds {
  double blackout = kBlackoutThreshold;  // MW
  double verification = 100.0;           // MW, CVR rule
  double severe_low = 10.0;              // MW
  double severe_high = 50.0;             // MW
  pipeline::IncidenceBase severe_incidence = pipeline::IncidenceBase::AllSamples;
};

struct ExperimentConfig {
  std::filesystem::path case_path = "data/example_case.txt";
  std::filesystem::path profiles_path = "data/example_profiles.csv";
  std::filesystem::path out_dir = "out";
  std::uint64_t seed = 42;
  std::size_t workers = 0;  // 0 = hardware parallelism
  std::size_t contingency_size = 2;
  double trace_fraction = 0.01;
  std::vector<std::size_t> statistical_edge_counts{0, 5, 10, 20};
  std::size_t mixed_edges = 10;     // k used by the "+" mixed GNN
  std::size_t blackout_edges = 5;   // k used by the "+" blackout-only GNN
  gnn::TrainConfig gnn_mixed = [] {
    gnn::TrainConfig c;
    c.population = gnn::Population::Mixed;
    return c;
  }();
  gnn::TrainConfig gnn_blackout = [] {
    gnn::TrainConfig c;
    c.population = gnn::Population::BlackoutOnly;
    return c;
  }();
  gbt::Hyperparameters gbt;
  Thresholds thresholds;
  SplitFractions splits;

  std::size_t resolved_workers() const { return workers ? workers : default_workers(); }

  /// Relative paths are taken against `base`.
  void resolve_paths(const std::filesystem::path& base) {
    for (auto* p : {&case_path, &profiles_path, &out_dir}) {
      if (p->is_relative()) *p = base / *p;
      *p = p->lexically_normal();
    }
  }

  /// Copies the shared seed, threshold and worker count into the per-component configs.
  void propagate() {
    for (auto* c : {&gnn_mixed, &gnn_blackout}) {
      c->blackout_threshold = thresholds.blackout;
      c->workers = resolved_workers();
      c->seed = seed;
    }
    gnn_mixed.population = gnn::Population::Mixed;
    gnn_blackout.population = gnn::Population::BlackoutOnly;
  }

  void check() const {
    if (contingency_size == 0) throw ValidationError("contingency_size must be >= 1");
    if (!(trace_fraction > 0.0 && trace_fraction <= 1.0)) throw ValidationError("trace_fraction must be in (0, 1]");
    if (!(splits.train > 0.0 && splits.validation >= 0.0 && splits.train + splits.validation <= 1.0)) {
      throw ValidationError("split fractions must be non-negative and sum to at most 1");
    }
    if (!(thresholds.severe_low < thresholds.severe_high)) throw ValidationError("severe_low must be below severe_high");
    if (!(thresholds.blackout >= 0.0)) throw ValidationError("blackout threshold must be non-negative");
    if (!(thresholds.verification > 0.0)) throw ValidationError("verification threshold must be positive");
    for (const auto* c : {&gnn_mixed, &gnn_blackout}) {
      if (c->batch_size == 0 || c->chunk_size == 0 || c->arch.layers == 0 || c->arch.hidden == 0) {
        throw ValidationError("GNN batch_size, chunk_size, layers and hidden must be >= 1");
      }
      if (!(c->learning_rate > 0.0)) throw ValidationError("GNN learning_rate must be positive");
    }
    if (gbt.max_depth == 0 || gbt.n_rounds == 0) throw ValidationError("gbt max_depth and n_rounds must be >= 1");
    if (!(gbt.learning_rate > 0.0) || gbt.lambda < 0.0 || gbt.gamma < 0.0 || gbt.min_child_weight < 0.0) {
      throw ValidationError("gbt learning_rate must be positive and lambda, gamma, min_child_weight non-negative");
    }
  }
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
  auto gnn_json = [](const gnn::TrainConfig& t) {
    auto j = gnn::train_config_to_json(t);
    j.erase("population");
    j.erase("blackout_threshold");
    j.erase("seed");
    return j;
  };
  return {{"paths",
           {{"case", c.case_path.generic_string()},
            {"profiles", c.profiles_path.generic_string()},
            {"out", c.out_dir.generic_string()}}},
          {"seed", c.seed},
          {"workers", c.workers},
          {"contingency_size", c.contingency_size},
          {"trace_fraction", c.trace_fraction},
          {"statistical_edge_counts", c.statistical_edge_counts},
          {"gnn",
           {{"mixed", gnn_json(c.gnn_mixed)},
            {"blackout_only", gnn_json(c.gnn_blackout)},
            {"mixed_statistical_edges", c.mixed_edges},
            {"blackout_statistical_edges", c.blackout_edges}}},
          {"gbt", gbt::params_to_json(c.gbt)},
          {"thresholds",
           {{"blackout_mw", c.thresholds.blackout},
            {"verification_mw", c.thresholds.verification},
            {"severe_low_mw", c.thresholds.severe_low},
            {"severe_high_mw", c.thresholds.severe_high},
            {"severe_incidence", pipeline::to_string(c.thresholds.severe_incidence)}}},
          {"splits", {{"train", c.splits.train}, {"validation", c.splits.validation}}}};
}

/// Unknown keys are rejected so typos do not silently fall back to defaults.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  const auto defaults = to_json(ExperimentConfig{});
  std::function<void(const nlohmann::json&, const nlohmann::json&, const std::string&)> check_keys =
      [&](const nlohmann::json& given, const nlohmann::json& known, const std::string& where) {
        if (!given.is_object()) throw ValidationError("config: '" + where + "' must be an object");
        for (const auto& [key, value] : given.items()) {
          if (!known.contains(key)) throw ValidationError("config: unknown key '" + where + key + "'");
          if (known.at(key).is_object()) check_keys(value, known.at(key), where + key + ".");
        }
      };
  check_keys(j, defaults, "");

  ExperimentConfig c;
  try {
    if (j.contains("paths")) {
      const auto& p = j.at("paths");
      c.case_path = p.value("case", c.case_path.string());
      c.profiles_path = p.value("profiles", c.profiles_path.string());
      c.out_dir = p.value("out", c.out_dir.string());
    }
    c.seed = j.value("seed", c.seed);
    c.workers = j.value("workers", c.workers);
    c.contingency_size = j.value("contingency_size", c.contingency_size);
    c.trace_fraction = j.value("trace_fraction", c.trace_fraction);
    c.statistical_edge_counts = j.value("statistical_edge_counts", c.statistical_edge_counts);
    if (j.contains("gnn")) {
      const auto& g = j.at("gnn");
      if (g.contains("mixed")) c.gnn_mixed = gnn::train_config_from_json(g.at("mixed"), c.gnn_mixed);
      if (g.contains("blackout_only")) c.gnn_blackout = gnn::train_config_from_json(g.at("blackout_only"), c.gnn_blackout);
      c.mixed_edges = g.value("mixed_statistical_edges", c.mixed_edges);
      c.blackout_edges = g.value("blackout_statistical_edges", c.blackout_edges);
    }
    if (j.contains("gbt")) c.gbt = gbt::params_from_json(j.at("gbt"), c.gbt);
    if (j.contains("thresholds")) {
      const auto& t = j.at("thresholds");
      c.thresholds.blackout = t.value("blackout_mw", c.thresholds.blackout);
      c.thresholds.verification = t.value("verification_mw", c.thresholds.verification);
      c.thresholds.severe_low = t.value("severe_low_mw", c.thresholds.severe_low);
      c.thresholds.severe_high = t.value("severe_high_mw", c.thresholds.severe_high);
      if (t.contains("severe_incidence")) {
        c.thresholds.severe_incidence = pipeline::parse_incidence_base(t.at("severe_incidence").get<std::string>());
      }
    }
    if (j.contains("splits")) {
      c.splits.train = j.at("splits").value("train", c.splits.train);
      c.splits.validation = j.at("splits").value("validation", c.splits.validation);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  c.check();
  return c;
}

/// Reads a config file; relative paths inside it resolve against the
/// current directory.
inline ExperimentConfig load_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace blackout
