#pragma once

// Cascade simulation (remove → island → rebalance → flow → trip overloads,
// repeated until no line is overloaded) and labeled dataset generation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "blackout/dcflow.hpp"
#include "blackout/error.hpp"
#include "blackout/grid.hpp"
#include "blackout/io.hpp"
#include "blackout/parallel.hpp"

namespace blackout {

/// A sample counts as a blackout iff its shed exceeds this many MW.
inline constexpr double kBlackoutThreshold = 1e-6;

inline bool is_blackout(double mw, double threshold = kBlackoutThreshold) { return mw > threshold; }

struct Scenario {
  std::int64_t profile_id = 0;
  std::vector<LineId> initial_failures;
};

struct TraceEntry {
  std::size_t round = 0;
  LineId line = 0;

  bool operator==(const TraceEntry&) const = default;
};

struct CascadeResult {
  double blackout_mw = 0.0;
  std::vector<double> shed_per_bus;
  std::vector<TraceEntry> failure_trace;
  std::size_t rounds = 0;  // trip rounds after the initial failures

  /// Every line that failed, initial or cascading, ascending.
  std::vector<LineId> failed_lines() const {
    std::vector<LineId> out;
    for (const auto& t : failure_trace) out.push_back(t.line);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }
};

/// Island-level dispatch; vectors are aligned with island.buses.
struct IslandDispatch {
  std::vector<double> load;
  std::vector<double> generation;
  double shed = 0.0;
};

/// Balance one island: if capacity covers load, redispatch generation to the
/// load; otherwise run every unit at capacity and scale all loads by
/// capacity/load. Generator-free islands shed everything.
inline IslandDispatch rebalance_island(const GridState& state, const Island& island) {
  const Grid& grid = *state.grid;
  const auto nb = island.buses.size();
  IslandDispatch out{std::vector<double>(nb), std::vector<double>(nb), 0.0};
  std::vector<double> capacity(nb);
  std::vector<double> gen(nb);
  double load = 0.0;
  double cap = 0.0;
  for (std::size_t i = 0; i < nb; ++i) {
    const auto b = island.buses[i];
    out.load[i] = state.load[b];
    gen[i] = state.generation[b];
    capacity[i] = grid.buses[b].max_generation;
    load += out.load[i];
    cap += capacity[i];
  }
  if (cap >= load) {
    out.generation = redispatch(gen, capacity, load);
    return out;
  }
  const double factor = cap / load;
  out.generation = capacity;
  for (auto& l : out.load) l *= factor;
  out.shed = load - cap;
  return out;
}

inline std::vector<double> net_injections(const GridState& state) {
  std::vector<double> p(state.load.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = state.generation[i] - state.load[i];
  return p;
}

/// Deterministic cascade from an initial set of line outages.
inline CascadeResult simulate_cascade(const GridState& state, std::span<const LineId> initial_failures) {
  const Grid& grid = *state.grid;
  auto active = mask_without(grid, initial_failures);

  CascadeResult result;
  std::vector<LineId> initial(initial_failures.begin(), initial_failures.end());
  std::sort(initial.begin(), initial.end());
  initial.erase(std::unique(initial.begin(), initial.end()), initial.end());
  for (auto id : initial) result.failure_trace.push_back({0, id});

  GridState work = state;
  const std::size_t cap = 2 * grid.line_count();
  for (std::size_t round = 0;; ++round) {
    for (const auto& island : find_islands(grid, active)) {
      const auto d = rebalance_island(work, island);
      for (std::size_t i = 0; i < island.buses.size(); ++i) {
        work.load[island.buses[i]] = d.load[i];
        work.generation[island.buses[i]] = d.generation[i];
      }
    }
    const auto injections = net_injections(work);
    const auto sol = compute_flows(work, active, injections);

    std::vector<LineId> tripped;
    for (const auto& l : grid.lines) {
      if (active[l.id] && std::abs(sol.flows[l.id]) > l.rating) tripped.push_back(l.id);
    }
    if (tripped.empty()) {
      result.rounds = round;
      break;
    }
    if (round + 1 > cap) {
      std::string msg = "cascade exceeded " + std::to_string(cap) + " rounds; trace:";
      for (const auto& t : result.failure_trace) {
        msg += " (" + std::to_string(t.round) + "," + std::to_string(t.line) + ")";
      }
      throw InternalError(msg);
    }
    for (auto id : tripped) {
      active[id] = 0;
      result.failure_trace.push_back({round + 1, id});
    }
  }

  result.shed_per_bus.resize(grid.bus_count());
  for (std::size_t b = 0; b < grid.bus_count(); ++b) {
    result.shed_per_bus[b] = state.load[b] - work.load[b];
    result.blackout_mw += result.shed_per_bus[b];
  }
  return result;
}

// ---------------------------------------------------------------------------
// Contingency enumeration

inline std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  std::uint64_t r = 1;
  for (std::uint64_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

/// All size-k subsets of {0..n-1} in lexicographic order.
inline std::vector<std::vector<LineId>> enumerate_contingencies(std::size_t line_count,
                                                                std::size_t size) {
  if (size == 0) throw PreconditionError("contingency size must be >= 1");
  std::vector<std::vector<LineId>> out;
  if (size > line_count) return out;
  out.reserve(binomial(line_count, size));
  std::vector<LineId> combo(size);
  std::iota(combo.begin(), combo.end(), LineId{0});
  while (true) {
    out.push_back(combo);
    std::size_t i = size;
    while (i > 0 && combo[i - 1] == line_count - size + i - 1) --i;
    if (i == 0) break;
    ++combo[i - 1];
    for (auto j = i; j < size; ++j) combo[j] = combo[j - 1] + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Datasets

enum class Split : std::uint8_t { Train, Validation, Test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s, std::size_t line) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Validation;
  if (s == "test") return Split::Test;
  throw ParseError(line, "unknown split '" + std::string(s) + "'");
}

struct SplitFractions {
  double train = 0.70;
  double validation = 0.15;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Samples are ranked by a seeded hash of their index; the first
/// round(train·n) ranks are train, the next round(val·n) validation, the rest test.
inline std::vector<Split> assign_splits(std::size_t count, std::uint64_t seed,
                                        SplitFractions fractions = {}) {
  std::vector<std::pair<std::uint64_t, std::size_t>> keys(count);
  for (std::size_t i = 0; i < count; ++i) keys[i] = {splitmix64(seed ^ splitmix64(i)), i};
  std::sort(keys.begin(), keys.end());
  const auto n = static_cast<double>(count);
  const auto train_end = static_cast<std::size_t>(std::llround(fractions.train * n));
  const auto val_end = static_cast<std::size_t>(std::llround((fractions.train + fractions.validation) * n));
  std::vector<Split> out(count);
  for (std::size_t r = 0; r < count; ++r) {
    out[keys[r].second] = r < train_end ? Split::Train : r < val_end ? Split::Validation : Split::Test;
  }
  return out;
}

struct Sample {
  std::size_t state_index = 0;  // into SampleSet::states
  std::vector<LineId> failures;
  double blackout_mw = 0.0;
  Split split = Split::Train;
  std::vector<TraceEntry> trace;  // may be empty when read back from a dataset file
};

struct SampleSet {
  GridPtr grid;
  std::vector<GridState> states;
  std::vector<Sample> samples;

  const GridState& state_of(const Sample& s) const { return states[s.state_index]; }

  std::vector<std::size_t> indices(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (samples[i].split == split) out.push_back(i);
    }
    return out;
  }
};

/// One sample per (profile, contingency), ordered profile-major.
inline SampleSet generate_dataset(const GridPtr& grid, const std::vector<Profile>& profiles,
                                  std::size_t contingency_size, std::uint64_t seed,
                                  std::size_t workers = 1, SplitFractions fractions = {}) {
  if (profiles.empty()) throw PreconditionError("no profiles");
  const auto contingencies = enumerate_contingencies(grid->line_count(), contingency_size);
  SampleSet set;
  set.grid = grid;
  for (const auto& p : profiles) set.states.push_back(apply_profile(grid, p));
  const auto per_profile = contingencies.size();
  set.samples.resize(profiles.size() * per_profile);
  const auto splits = assign_splits(set.samples.size(), seed, fractions);
  parallel_for(set.samples.size(), workers, [&](std::size_t i) {
    auto& s = set.samples[i];
    s.state_index = i / per_profile;
    s.failures = contingencies[i % per_profile];
    s.split = splits[i];
    try {
      auto r = simulate_cascade(set.states[s.state_index], s.failures);
      s.blackout_mw = r.blackout_mw;
      s.trace = std::move(r.failure_trace);
    } catch (const InternalError& e) {
      throw InternalError("scenario " + std::to_string(i) + ": " + e.what());
    }
  });
  return set;
}

inline constexpr std::string_view kDatasetMagic = "# blackout-dataset v1";

inline std::string serialize_dataset(const SampleSet& set) {
  const Grid& g = *set.grid;
  std::string out(kDatasetMagic);
  out += "\nsample_id,profile_id,split,blackout_mw";
  for (std::size_t l = 0; l < g.line_count(); ++l) out += ",fail_" + std::to_string(l);
  for (std::size_t b = 0; b < g.bus_count(); ++b) out += ",load_" + std::to_string(b);
  for (std::size_t b = 0; b < g.bus_count(); ++b) out += ",gen_" + std::to_string(b);
  for (std::size_t l = 0; l < g.line_count(); ++l) out += ",r_" + std::to_string(l);
  for (std::size_t l = 0; l < g.line_count(); ++l) out += ",x_" + std::to_string(l);
  out += '\n';
  std::vector<char> mask(g.line_count());
  for (std::size_t i = 0; i < set.samples.size(); ++i) {
    const auto& s = set.samples[i];
    const auto& st = set.state_of(s);
    out += std::to_string(i) + "," + std::to_string(st.hour_id) + "," + to_string(s.split) + "," +
           io::format_double(s.blackout_mw);
    std::fill(mask.begin(), mask.end(), 0);
    for (auto f : s.failures) mask[f] = 1;
    for (auto m : mask) out += m ? ",1" : ",0";
    for (auto v : st.load) out += "," + io::format_double(v);
    for (auto v : st.generation) out += "," + io::format_double(v);
    for (const auto& l : g.lines) out += "," + io::format_double(l.resistance);
    for (const auto& l : g.lines) out += "," + io::format_double(l.reactance);
    out += '\n';
  }
  return out;
}

/// Inverse of serialize_dataset. Line parameters must match `grid`.
inline SampleSet parse_dataset(std::string_view text, const GridPtr& grid) {
  const auto nb = grid->bus_count();
  const auto nl = grid->line_count();
  const auto width = 4 + nl + 2 * nb + 2 * nl;
  SampleSet set;
  set.grid = grid;
  std::map<std::int64_t, std::size_t> state_index;
  bool magic = false;
  bool header = false;
  io::for_each_line(text, [&](std::size_t ln, std::string_view raw) {
    const auto line = io::trim(raw);
    if (!magic) {
      if (line != kDatasetMagic) throw ParseError(ln, "not a v1 dataset file");
      magic = true;
      return;
    }
    if (line.empty()) return;
    const auto f = io::split(line, ',');
    if (f.size() != width) {
      throw ParseError(ln, "expected " + std::to_string(width) + " fields, got " + std::to_string(f.size()));
    }
    if (!header) {
      header = true;
      return;
    }
    if (io::parse_uint(f[0], ln) != set.samples.size()) throw ParseError(ln, "sample ids must be consecutive");
    Sample s;
    const auto profile = io::parse_int(f[1], ln);
    s.split = parse_split(f[2], ln);
    s.blackout_mw = io::parse_double(f[3], ln);
    for (std::size_t l = 0; l < nl; ++l) {
      if (f[4 + l] == "1") s.failures.push_back(l);
      else if (f[4 + l] != "0") throw ParseError(ln, "failure flags must be 0 or 1");
    }
    auto [it, inserted] = state_index.try_emplace(profile, set.states.size());
    if (inserted) {
      GridState st{grid, profile, std::vector<double>(nb), std::vector<double>(nb)};
      for (std::size_t b = 0; b < nb; ++b) {
        st.load[b] = io::parse_double(f[4 + nl + b], ln);
        st.generation[b] = io::parse_double(f[4 + nl + nb + b], ln);
      }
      set.states.push_back(std::move(st));
    }
    for (std::size_t l = 0; l < nl; ++l) {
      if (io::parse_double(f[4 + nl + 2 * nb + l], ln) != grid->lines[l].resistance ||
          io::parse_double(f[4 + 2 * nl + 2 * nb + l], ln) != grid->lines[l].reactance) {
        throw ValidationError("dataset line parameters do not match the case (line " +
                              std::to_string(ln) + ")");
      }
    }
    s.state_index = it->second;
    set.samples.push_back(std::move(s));
  });
  if (!header) throw ParseError(1, "dataset has no header");
  return set;
}

/// Trace CSV: `scenario_id,round,line_id`.
inline std::string serialize_traces(const SampleSet& set, std::span<const std::size_t> sample_ids) {
  std::string out = "scenario_id,round,line_id\n";
  for (auto id : sample_ids) {
    for (const auto& t : set.samples[id].trace) {
      out += std::to_string(id) + "," + std::to_string(t.round) + "," + std::to_string(t.line) + "\n";
    }
  }
  return out;
}

/// Failed-line set per scenario, in order of first appearance.
inline std::vector<std::vector<LineId>> parse_traces(std::string_view text) {
  std::vector<std::vector<LineId>> out;
  std::map<std::uint64_t, std::size_t> index;
  bool header = false;
  io::for_each_line(text, [&](std::size_t ln, std::string_view raw) {
    const auto line = io::trim(raw);
    if (line.empty()) return;
    const auto f = io::split(line, ',');
    if (!header) {
      if (f.size() != 3 || f[0] != "scenario_id" || f[1] != "round" || f[2] != "line_id") {
        throw ParseError(ln, "expected header 'scenario_id,round,line_id'");
      }
      header = true;
      return;
    }
    if (f.size() != 3) throw ParseError(ln, "expected 3 fields");
    const auto scenario = io::parse_uint(f[0], ln);
    io::parse_uint(f[1], ln);
    const auto line_id = io::parse_uint(f[2], ln);
    auto [it, inserted] = index.try_emplace(scenario, out.size());
    if (inserted) out.emplace_back();
    out[it->second].push_back(line_id);
  });
  if (!header) throw ParseError(1, "trace file has no header");
  return out;
}

}  // namespace blackout
