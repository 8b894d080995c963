#pragma once

// File-based experiment stages. Each stage reads only config plus files that
// earlier stages wrote under the output directory.
//
//   gen-dataset → dataset.csv, traces.csv
//   stat-edges  → stat_edges_k{k}.csv
//   train       → gnn_mixed_k{k}.json, gnn_blackout_k{k}.json, gbt.json (+ logs)
//   eval        → eval_{name}.csv, eval_{name}_severe.csv, eval_{name}.json, eval_{name}_parity.csv

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "blackout/cascade.hpp"
#include "blackout/config.hpp"
#include "blackout/error.hpp"
#include "blackout/gbt.hpp"
#include "blackout/gnn.hpp"
#include "blackout/influence.hpp"
#include "blackout/io.hpp"
#include "blackout/pipeline.hpp"
#include "json.hpp"

namespace blackout::stages {

namespace fs = std::filesystem;

inline fs::path dataset_path(const ExperimentConfig& c) { return c.out_dir / "dataset.csv"; }
inline fs::path traces_path(const ExperimentConfig& c) { return c.out_dir / "traces.csv"; }
inline fs::path edges_path(const ExperimentConfig& c, std::size_t k) {
  return c.out_dir / ("stat_edges_k" + std::to_string(k) + ".csv");
}

enum class Target { GnnMixed, GnnBlackout, Gbt };

inline Target parse_target(std::string_view s) {
  if (s == "gnn-mixed") return Target::GnnMixed;
  if (s == "gnn-blackout") return Target::GnnBlackout;
  if (s == "gbt") return Target::Gbt;
  throw ValidationError("unknown target '" + std::string(s) + "' (expected gnn-mixed, gnn-blackout or gbt)");
}

inline fs::path checkpoint_path(const ExperimentConfig& c, Target t, std::size_t k = 0) {
  switch (t) {
    case Target::GnnMixed: return c.out_dir / ("gnn_mixed_k" + std::to_string(k) + ".json");
    case Target::GnnBlackout: return c.out_dir / ("gnn_blackout_k" + std::to_string(k) + ".json");
    case Target::Gbt: return c.out_dir / "gbt.json";
  }
  return {};
}

inline GridPtr load_grid(const ExperimentConfig& c) { return load_case(c.case_path); }

inline std::vector<Profile> load_profiles(const ExperimentConfig& c, const Grid& grid) {
  return parse_profiles(io::read_file(c.profiles_path), grid.bus_count());
}

inline SampleSet load_dataset(const ExperimentConfig& c, const GridPtr& grid) {
  const auto path = dataset_path(c);
  if (!fs::exists(path)) throw ValidationError("missing " + path.string() + " (run gen-dataset first)");
  return parse_dataset(io::read_file(path), grid);
}

inline nlohmann::json read_json(const fs::path& path) {
  if (!fs::exists(path)) throw ValidationError("missing " + path.string());
  try {
    return nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { io::write_file(path, j.dump(1) + "\n"); }

// ---------------------------------------------------------------------------
// gen-dataset

/// Profiles whose scenarios feed the trace file: a seeded pick of
/// max(1, round(fraction · P)) profiles, returned in ascending order.
inline std::vector<std::size_t> trace_profiles(std::size_t profile_count, double fraction, std::uint64_t seed) {
  const auto want = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(fraction * static_cast<double>(profile_count))), 1, profile_count);
  std::vector<std::size_t> order(profile_count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto salt = splitmix64(seed ^ 0x7472616365ULL);
  std::vector<std::uint64_t> key(profile_count);
  for (std::size_t p = 0; p < profile_count; ++p) key[p] = splitmix64(salt ^ splitmix64(p));
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return key[a] < key[b]; });
  order.resize(want);
  std::sort(order.begin(), order.end());
  return order;
}

struct DatasetSummary {
  std::size_t samples = 0;
  std::size_t blackouts = 0;
  std::size_t traced_scenarios = 0;
  std::size_t train = 0, validation = 0, test = 0;
};

/// Traces cover training-split scenarios of the sampled profiles only, so
/// statistical edges never see test outcomes.
inline DatasetSummary gen_dataset(const ExperimentConfig& c, std::ostream& log) {
  const auto grid = load_grid(c);
  const auto profiles = load_profiles(c, *grid);
  log << "simulating " << profiles.size() << " profiles x " << binomial(grid->line_count(), c.contingency_size)
      << " contingencies\n";
  const auto set = generate_dataset(grid, profiles, c.contingency_size, c.seed, c.resolved_workers(), c.splits);
  io::write_file(dataset_path(c), serialize_dataset(set));

  const auto chosen = trace_profiles(profiles.size(), c.trace_fraction, c.seed);
  std::vector<std::size_t> traced;
  for (std::size_t i = 0; i < set.samples.size(); ++i) {
    const auto& s = set.samples[i];
    if (s.split == Split::Train && std::binary_search(chosen.begin(), chosen.end(), s.state_index)) {
      traced.push_back(i);
    }
  }
  io::write_file(traces_path(c), serialize_traces(set, traced));

  DatasetSummary out;
  out.samples = set.samples.size();
  out.traced_scenarios = traced.size();
  for (const auto& s : set.samples) {
    if (is_blackout(s.blackout_mw, c.thresholds.blackout)) ++out.blackouts;
    (s.split == Split::Train ? out.train : s.split == Split::Validation ? out.validation : out.test)++;
  }
  log << "wrote " << out.samples << " samples (" << out.blackouts << " blackouts; " << out.train << "/"
      << out.validation << "/" << out.test << " train/val/test) and traces for " << out.traced_scenarios
      << " scenarios\n";
  return out;
}

// ---------------------------------------------------------------------------
// stat-edges

inline std::vector<fs::path> stat_edges(const ExperimentConfig& c, std::ostream& log) {
  const auto path = traces_path(c);
  if (!fs::exists(path)) throw ValidationError("missing " + path.string() + " (run gen-dataset first)");
  const auto grid = load_grid(c);
  const auto traces = parse_traces(io::read_file(path));
  for (const auto& t : traces) {
    for (auto l : t) {
      if (l >= grid->line_count()) throw ValidationError("trace references undeclared line " + std::to_string(l));
    }
  }
  const auto table = cofailure_counts(traces);
  std::vector<fs::path> written;
  for (auto k : c.statistical_edge_counts) {
    const auto sel = select_statistical_edges(table, *grid, k);
    for (const auto& w : sel.warnings) log << "warning: " << w << "\n";
    io::write_file(edges_path(c, k), serialize_edges(sel.edges));
    written.push_back(edges_path(c, k));
    log << "k=" << k << ": " << sel.edges.size() << " statistical edges\n";
  }
  return written;
}

inline AugmentedTopology load_topology(const ExperimentConfig& c, const GridPtr& grid, std::size_t k) {
  if (k == 0) return physical_topology(grid);
  const auto path = edges_path(c, k);
  if (!fs::exists(path)) throw ValidationError("missing " + path.string() + " (run stat-edges first)");
  return augment_topology(grid, parse_edges(io::read_file(path)));
}

// ---------------------------------------------------------------------------
// train

inline fs::path train(const ExperimentConfig& c, Target target, std::size_t k, std::ostream& log) {
  const auto grid = load_grid(c);
  const auto set = load_dataset(c, grid);
  const auto out = checkpoint_path(c, target, k);
  const auto log_path = fs::path(out).replace_extension(".log.csv");

  if (target == Target::Gbt) {
    const auto train_idx = set.indices(Split::Train);
    const auto val_idx = set.indices(Split::Validation);
    const double mean_pos =
        c.gbt.linear_weighting ? gbt::mean_positive_blackout(set, train_idx, c.thresholds.blackout) : 0.0;
    const auto train_samples = gbt::make_flat_samples(set, train_idx, mean_pos, c.thresholds.blackout);
    const auto val_samples = gbt::make_flat_samples(set, val_idx, 0.0, c.thresholds.blackout);
    gbt::TrainReport report;
    const auto forest = gbt::train_gbt(train_samples, c.gbt, val_samples, c.resolved_workers(), &report);
    write_json(out, gbt::to_json(forest));
    std::string csv = "round,train_loss,val_f1\n";
    for (std::size_t r = 0; r < report.train_loss.size(); ++r) {
      csv += std::to_string(r) + "," + io::format_double(report.train_loss[r]) + ",";
      if (r > 0 && r - 1 < report.val_f1.size() && report.val_f1[r - 1]) csv += io::format_double(*report.val_f1[r - 1]);
      csv += "\n";
    }
    io::write_file(log_path, csv);
    log << "gbt: kept " << forest.trees.size() << " trees\n";
    return out;
  }

  auto cfg = target == Target::GnnMixed ? c.gnn_mixed : c.gnn_blackout;
  const auto topology = load_topology(c, grid, k);
  for (const auto& w : topology.warnings) log << "warning: " << w << "\n";
  log << to_string(cfg.population) << " GNN (L=" << cfg.arch.layers << ", width " << cfg.arch.hidden << ", k=" << k
      << ")\n";
  const auto result = gnn::train_gnn(set, topology, cfg, nullptr);
  for (const auto& e : result.log) {
    log << "  epoch " << e.epoch << " train " << e.train_mse << " val " << e.val_mse << "\n";
  }
  write_json(out, gnn::checkpoint_to_json(result));
  io::write_file(log_path, gnn::serialize_log(result.log));
  log << "best epoch " << result.best_epoch << "\n";
  return out;
}

// ---------------------------------------------------------------------------
// eval / predict

struct ModelPaths {
  std::optional<fs::path> mixed;
  std::optional<fs::path> blackout;
  std::optional<fs::path> classifier;
  bool perfect_classifier = false;
};

inline pipeline::PipelineModel assemble(const ExperimentConfig& c, const GridPtr& grid, pipeline::Variant variant,
                                        const ModelPaths& paths) {
  pipeline::PipelineModel m;
  m.variant = variant;
  m.verification_threshold = c.thresholds.verification;
  m.blackout_threshold = c.thresholds.blackout;
  if (paths.perfect_classifier && paths.classifier) {
    throw ValidationError("give either a classifier checkpoint or the perfect classifier, not both");
  }
  if (paths.perfect_classifier) m.classifier = pipeline::PerfectClassifier{};
  if (paths.classifier) {
    auto forest = gbt::forest_from_json(read_json(*paths.classifier));
    const auto expected = gbt::feature_length(grid->bus_count(), grid->line_count());
    if (forest.feature_count != expected) throw ValidationError("classifier was trained on a different grid");
    m.classifier = std::move(forest);
  }
  if (paths.mixed) m.mixed_gnn = gnn::checkpoint_from_json(read_json(*paths.mixed), grid).model;
  if (paths.blackout) m.blackout_gnn = gnn::checkpoint_from_json(read_json(*paths.blackout), grid).model;
  m.check();
  return m;
}

inline pipeline::EvalReport eval(const ExperimentConfig& c, pipeline::Variant variant, const ModelPaths& paths,
                                 const std::string& name, std::ostream& log) {
  const auto grid = load_grid(c);
  const auto model = assemble(c, grid, variant, paths);
  const auto set = load_dataset(c, grid);
  const auto test = set.indices(Split::Test);
  auto report = pipeline::evaluate(model, set, test,
                                   {c.thresholds.severe_low, c.thresholds.severe_high, c.thresholds.severe_incidence,
                                    c.resolved_workers()});
  report.name = name;
  const auto stem = c.out_dir / ("eval_" + name);
  io::write_file(stem.string() + ".csv", pipeline::report_csv(report));
  io::write_file(stem.string() + "_severe.csv", pipeline::severe_csv(report));
  io::write_file(stem.string() + "_parity.csv", pipeline::parity_csv(report));
  write_json(stem.string() + ".json", pipeline::report_json(report));
  auto show = [&](const char* label, const pipeline::CategoryStats& s) {
    log << "  " << label << " n=" << s.count;
    if (s.mae) log << " MAE " << *s.mae << " MedAE " << *s.medae;
    log << "\n";
  };
  log << name << " (" << to_string(variant) << ") on " << test.size() << " test samples\n";
  show("all", report.all);
  show("blackout", report.blackout);
  show("non-blackout", report.non_blackout);
  return report;
}

}  // namespace blackout::stages
