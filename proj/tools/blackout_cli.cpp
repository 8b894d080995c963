// Command-line driver for the cascading-blackout experiment stages.

#include <cstdint>
#include <exception>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "blackout/cascade.hpp"
#include "blackout/config.hpp"
#include "blackout/error.hpp"
#include "blackout/pipeline.hpp"
#include "blackout/stages.hpp"

namespace {

using namespace blackout;

constexpr int kExitInternal = 1;
constexpr int kExitUsage = 2;

struct GlobalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::string out;
};

ExperimentConfig resolve(const GlobalFlags& g) {
  auto c = g.config.empty() ? ExperimentConfig{} : load_config(g.config);
  if (g.seed) c.seed = *g.seed;
  if (g.workers) c.workers = *g.workers;
  if (!g.out.empty()) c.out_dir = g.out;
  c.resolve_paths(std::filesystem::current_path());
  c.propagate();
  c.check();
  return c;
}

const GridState& pick_state(const std::vector<GridState>& states, std::optional<std::int64_t> hour) {
  if (!hour) return states.front();
  for (const auto& s : states) {
    if (s.hour_id == *hour) return s;
  }
  throw ValidationError("no profile with hour id " + std::to_string(*hour));
}

std::vector<GridState> load_states(const ExperimentConfig& c, const GridPtr& grid) {
  std::vector<GridState> out;
  for (const auto& p : stages::load_profiles(c, *grid)) out.push_back(apply_profile(grid, p));
  if (out.empty()) throw ValidationError("profile file has no hours");
  return out;
}

void check_lines(const Grid& grid, const std::vector<LineId>& lines) {
  for (auto l : lines) {
    if (l >= grid.line_count()) {
      throw ValidationError("invalid line id " + std::to_string(l) + " (case has " +
                            std::to_string(grid.line_count()) + " lines)");
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cascading blackout simulation and blackout-size estimation"};
  app.require_subcommand(1);
  GlobalFlags g;
  app.add_option("--config", g.config, "JSON experiment config")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Seed for splits, sampling and initialization");
  app.add_option("--workers", g.workers, "Worker threads (0 = hardware parallelism)");
  app.add_option("--out", g.out, "Output directory");

  // simulate
  auto* sim = app.add_subcommand("simulate", "Run one cascade and persist its trace");
  std::vector<LineId> sim_fail;
  std::optional<std::int64_t> sim_hour;
  sim->add_option("--fail", sim_fail, "Initially failed line ids")->delimiter(',');
  sim->add_option("--hour", sim_hour, "Profile hour id (default: first hour)");

  auto* gen = app.add_subcommand("gen-dataset", "Simulate every contingency under every profile");
  auto* edges = app.add_subcommand("stat-edges", "Select statistical edges for each configured k");

  // train
  auto* train = app.add_subcommand("train", "Train one model component");
  std::string target;
  std::size_t train_k = 0;
  train->add_option("--target", target, "gnn-mixed | gnn-blackout | gbt")->required();
  train->add_option("--stat-edges", train_k, "Number of statistical edges in the GNN topology");

  // eval / predict share the model options
  std::string variant_name = "R";
  std::string mixed_path, blackout_path, classifier_path;
  auto add_model_options = [&](CLI::App* sub) {
    sub->add_option("--variant", variant_name, "R | CR | CVR");
    sub->add_option("--mixed", mixed_path, "Mixed GNN checkpoint");
    sub->add_option("--blackout", blackout_path, "Blackout-only GNN checkpoint");
    sub->add_option("--classifier", classifier_path, "Classifier checkpoint");
  };
  auto* eval = app.add_subcommand("eval", "Evaluate a pipeline variant on the test split");
  add_model_options(eval);
  bool perfect = false;
  std::string eval_name;
  eval->add_flag("--perfect-classifier", perfect, "Use ground-truth labels as the classifier");
  eval->add_option("--name", eval_name, "Report name (default: derived from the variant)");

  auto* pred = app.add_subcommand("predict", "Estimate blackout size for one scenario");
  add_model_options(pred);
  std::vector<LineId> pred_fail;
  std::optional<std::int64_t> pred_hour;
  pred->add_option("--fail", pred_fail, "Initially failed line ids")->delimiter(',');
  pred->add_option("--hour", pred_hour, "Profile hour id (default: first hour)");

  auto* cfg = app.add_subcommand("config", "Show configuration");
  bool dump_defaults = false;
  cfg->add_flag("--dump-defaults", dump_defaults, "Print the built-in defaults");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  auto model_paths = [&] {
    stages::ModelPaths p;
    if (!mixed_path.empty()) p.mixed = mixed_path;
    if (!blackout_path.empty()) p.blackout = blackout_path;
    if (!classifier_path.empty()) p.classifier = classifier_path;
    p.perfect_classifier = perfect;
    return p;
  };

  try {
    if (*cfg) {
      const auto c = dump_defaults ? ExperimentConfig{} : resolve(g);
      std::cout << to_json(c).dump(2) << "\n";
      return 0;
    }
    const auto c = resolve(g);

    if (*sim) {
      const auto grid = stages::load_grid(c);
      check_lines(*grid, sim_fail);
      const auto states = load_states(c, grid);
      const auto& state = pick_state(states, sim_hour);
      const auto r = simulate_cascade(state, sim_fail);
      std::string csv = "scenario_id,round,line_id\n";
      for (const auto& t : r.failure_trace) {
        csv += "0," + std::to_string(t.round) + "," + std::to_string(t.line) + "\n";
      }
      io::write_file(c.out_dir / "simulate_trace.csv", csv);
      std::cout << "hour " << state.hour_id << ": blackout " << io::format_double(r.blackout_mw) << " MW after "
                << r.rounds << " trip rounds\n";
      for (const auto& t : r.failure_trace) std::cout << "  round " << t.round << " line " << t.line << "\n";
    } else if (*gen) {
      stages::gen_dataset(c, std::cerr);
    } else if (*edges) {
      stages::stat_edges(c, std::cerr);
    } else if (*train) {
      const auto path = stages::train(c, stages::parse_target(target), train_k, std::cerr);
      std::cout << path.string() << "\n";
    } else if (*eval) {
      const auto variant = pipeline::parse_variant(variant_name);
      if (eval_name.empty()) eval_name = std::string(pipeline::to_string(variant)) + (perfect ? "_perfect" : "");
      stages::eval(c, variant, model_paths(), eval_name, std::cerr);
      std::cout << (c.out_dir / ("eval_" + eval_name + ".json")).string() << "\n";
    } else if (*pred) {
      const auto grid = stages::load_grid(c);
      check_lines(*grid, pred_fail);
      const auto model = stages::assemble(c, grid, pipeline::parse_variant(variant_name), model_paths());
      const auto states = load_states(c, grid);
      std::cout << io::format_double(pipeline::predict(model, pick_state(states, pred_hour), pred_fail)) << "\n";
    }
    return 0;
  } catch (const InternalError& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
}
