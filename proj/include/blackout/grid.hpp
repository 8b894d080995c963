#pragma once

// Static network description, hourly operating states, and their text formats.
//
// Case file (one record per line, '#' starts a comment):
//   BASE <mva>
//   BUS  <id> <max_gen_mw>
//   LINE <id> <from> <to> <r_pu> <x_pu> <rating_mw>
//
// Profile file (CSV): header `hour,bus_id,load_mw,gen_mw`, one row per (hour, bus).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <queue>
#include <string>
#include <string_view>
#include <vector>

#include "blackout/error.hpp"
#include "blackout/io.hpp"

namespace blackout {

using BusId = std::size_t;
using LineId = std::size_t;

struct Bus {
  BusId id = 0;
  double max_generation = 0.0;  // MW

  bool operator==(const Bus&) const = default;
};

struct Line {
  LineId id = 0;
  BusId from_bus = 0;
  BusId to_bus = 0;
  double resistance = 0.0;  // pu
  double reactance = 0.0;   // pu
  double rating = 0.0;      // MW

  bool touches(BusId b) const noexcept { return from_bus == b || to_bus == b; }
  bool operator==(const Line&) const = default;
};

struct Grid {
  std::vector<Bus> buses;
  std::vector<Line> lines;
  double base_mva = 100.0;

  std::size_t bus_count() const noexcept { return buses.size(); }
  std::size_t line_count() const noexcept { return lines.size(); }

  double total_capacity() const {
    double total = 0.0;
    for (const auto& b : buses) total += b.max_generation;
    return total;
  }

  bool operator==(const Grid&) const = default;
};

using GridPtr = std::shared_ptr<const Grid>;

/// One hour of per-bus load and generation, as read from a profile file.
struct Profile {
  std::int64_t hour_id = 0;
  std::vector<double> load;        // MW per bus
  std::vector<double> generation;  // MW per bus
};

/// A grid at one operating point. Load and generation are balanced.
struct GridState {
  GridPtr grid;
  std::int64_t hour_id = 0;
  std::vector<double> load;
  std::vector<double> generation;

  double total_load() const { return std::accumulate(load.begin(), load.end(), 0.0); }
  double total_generation() const {
    return std::accumulate(generation.begin(), generation.end(), 0.0);
  }
};

/// |Σgen − Σload| allowed after balancing.
inline double balance_tolerance(double total_load) {
  return std::max(1e-6, 1e-9 * std::abs(total_load));
}

// ---------------------------------------------------------------------------
// Diagnostics

enum class DiagnosticKind {
  NonPositiveBase,
  BusIdNotContiguous,
  LineIdNotContiguous,
  NegativeMaxGeneration,
  DanglingReference,
  SelfLoop,
  NegativeResistance,
  NonPositiveReactance,
  NonPositiveRating,
  Disconnected,
};

struct Diagnostic {
  DiagnosticKind kind;
  std::string message;
  std::vector<std::size_t> component_sizes;  // only for Disconnected, largest first
};

inline const char* to_string(DiagnosticKind kind) {
  switch (kind) {
    case DiagnosticKind::NonPositiveBase: return "non-positive base";
    case DiagnosticKind::BusIdNotContiguous: return "bus id not contiguous";
    case DiagnosticKind::LineIdNotContiguous: return "line id not contiguous";
    case DiagnosticKind::NegativeMaxGeneration: return "negative max generation";
    case DiagnosticKind::DanglingReference: return "dangling bus reference";
    case DiagnosticKind::SelfLoop: return "self loop";
    case DiagnosticKind::NegativeResistance: return "negative resistance";
    case DiagnosticKind::NonPositiveReactance: return "non-positive reactance";
    case DiagnosticKind::NonPositiveRating: return "non-positive rating";
    case DiagnosticKind::Disconnected: return "disconnected";
  }
  return "unknown";
}

namespace detail {

inline std::vector<Diagnostic> check_invariants(const Grid& grid) {
  std::vector<Diagnostic> out;
  auto add = [&](DiagnosticKind kind, std::string msg) {
    out.push_back({kind, std::move(msg), {}});
  };
  if (!(grid.base_mva > 0.0)) add(DiagnosticKind::NonPositiveBase, "base MVA must be positive");
  for (std::size_t i = 0; i < grid.buses.size(); ++i) {
    const auto& b = grid.buses[i];
    if (b.id != i) {
      add(DiagnosticKind::BusIdNotContiguous,
          "bus at position " + std::to_string(i) + " has id " + std::to_string(b.id));
    }
    if (!(b.max_generation >= 0.0)) {
      add(DiagnosticKind::NegativeMaxGeneration,
          "bus " + std::to_string(b.id) + " has negative max generation");
    }
  }
  const auto n = grid.buses.size();
  for (std::size_t i = 0; i < grid.lines.size(); ++i) {
    const auto& l = grid.lines[i];
    const auto tag = "line " + std::to_string(l.id);
    if (l.id != i) {
      add(DiagnosticKind::LineIdNotContiguous,
          "line at position " + std::to_string(i) + " has id " + std::to_string(l.id));
    }
    if (l.from_bus >= n || l.to_bus >= n) {
      add(DiagnosticKind::DanglingReference, tag + " references an undeclared bus");
    } else if (l.from_bus == l.to_bus) {
      add(DiagnosticKind::SelfLoop, tag + " is a self loop");
    }
    if (!(l.resistance >= 0.0)) add(DiagnosticKind::NegativeResistance, tag + " has negative resistance");
    if (!(l.reactance > 0.0)) add(DiagnosticKind::NonPositiveReactance, tag + " has non-positive reactance");
    if (!(l.rating > 0.0)) add(DiagnosticKind::NonPositiveRating, tag + " has non-positive rating");
  }
  return out;
}

}  // namespace detail

/// Sizes of the connected components over lines with valid endpoints, largest first.
inline std::vector<std::size_t> component_sizes(const Grid& grid) {
  const auto n = grid.buses.size();
  std::vector<std::vector<BusId>> adj(n);
  for (const auto& l : grid.lines) {
    if (l.from_bus < n && l.to_bus < n) {
      adj[l.from_bus].push_back(l.to_bus);
      adj[l.to_bus].push_back(l.from_bus);
    }
  }
  std::vector<bool> seen(n, false);
  std::vector<std::size_t> sizes;
  for (BusId start = 0; start < n; ++start) {
    if (seen[start]) continue;
    std::size_t size = 0;
    std::queue<BusId> q;
    q.push(start);
    seen[start] = true;
    while (!q.empty()) {
      const auto u = q.front();
      q.pop();
      ++size;
      for (auto v : adj[u]) {
        if (!seen[v]) {
          seen[v] = true;
          q.push(v);
        }
      }
    }
    sizes.push_back(size);
  }
  std::sort(sizes.begin(), sizes.end(), std::greater<>());
  return sizes;
}

/// Every invariant violation plus a "disconnected" entry when BFS from bus 0
/// does not reach every bus. Empty means the grid is usable.
inline std::vector<Diagnostic> validate(const Grid& grid) {
  auto out = detail::check_invariants(grid);
  const auto sizes = component_sizes(grid);
  if (sizes.size() > 1) {
    std::string msg = "grid has " + std::to_string(sizes.size()) + " components of sizes";
    for (auto s : sizes) msg += " " + std::to_string(s);
    out.push_back({DiagnosticKind::Disconnected, std::move(msg), sizes});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Case file

inline Grid parse_case(std::string_view text) {
  Grid grid;
  bool have_base = false;
  io::for_each_line(text, [&](std::size_t ln, std::string_view raw) {
    auto line = raw.substr(0, raw.find('#'));
    const auto tok = io::tokens(line);
    if (tok.empty()) return;
    const auto& kw = tok[0];
    auto expect = [&](std::size_t count) {
      if (tok.size() != count) {
        throw ParseError(ln, std::string(kw) + " expects " + std::to_string(count - 1) +
                                 " fields, got " + std::to_string(tok.size() - 1));
      }
    };
    if (kw == "BASE") {
      expect(2);
      if (have_base) throw ParseError(ln, "duplicate BASE record");
      grid.base_mva = io::parse_double(tok[1], ln);
      have_base = true;
    } else if (kw == "BUS") {
      expect(3);
      grid.buses.push_back({io::parse_uint(tok[1], ln), io::parse_double(tok[2], ln)});
    } else if (kw == "LINE") {
      expect(7);
      grid.lines.push_back({io::parse_uint(tok[1], ln), io::parse_uint(tok[2], ln),
                            io::parse_uint(tok[3], ln), io::parse_double(tok[4], ln),
                            io::parse_double(tok[5], ln), io::parse_double(tok[6], ln)});
    } else {
      throw ParseError(ln, "unknown record '" + std::string(kw) + "'");
    }
  });
  if (!have_base) throw ValidationError("case has no BASE record");
  const auto problems = detail::check_invariants(grid);
  if (!problems.empty()) throw ValidationError(problems.front().message);
  return grid;
}

inline std::string serialize_case(const Grid& grid) {
  std::string out = "BASE " + io::format_double(grid.base_mva) + "\n";
  for (const auto& b : grid.buses) {
    out += "BUS " + std::to_string(b.id) + " " + io::format_double(b.max_generation) + "\n";
  }
  for (const auto& l : grid.lines) {
    out += "LINE " + std::to_string(l.id) + " " + std::to_string(l.from_bus) + " " +
           std::to_string(l.to_bus) + " " + io::format_double(l.resistance) + " " +
           io::format_double(l.reactance) + " " + io::format_double(l.rating) + "\n";
  }
  return out;
}

inline GridPtr load_case(const std::filesystem::path& path) {
  return std::make_shared<const Grid>(parse_case(io::read_file(path)));
}

// ---------------------------------------------------------------------------
// Profiles

/// Hours are returned in order of first appearance.
inline std::vector<Profile> parse_profiles(std::string_view text, std::size_t bus_count) {
  std::vector<Profile> profiles;
  std::map<std::int64_t, std::size_t> index;
  std::vector<std::vector<bool>> seen;
  bool header = false;
  io::for_each_line(text, [&](std::size_t ln, std::string_view raw) {
    const auto line = io::trim(raw);
    if (line.empty() || line.front() == '#') return;
    const auto f = io::split(line, ',');
    if (!header) {
      if (f.size() != 4 || f[0] != "hour" || f[1] != "bus_id" || f[2] != "load_mw" ||
          f[3] != "gen_mw") {
        throw ParseError(ln, "expected header 'hour,bus_id,load_mw,gen_mw'");
      }
      header = true;
      return;
    }
    if (f.size() != 4) throw ParseError(ln, "expected 4 fields");
    const auto hour = io::parse_int(f[0], ln);
    const auto bus = io::parse_uint(f[1], ln);
    const auto load = io::parse_double(f[2], ln);
    const auto gen = io::parse_double(f[3], ln);
    if (bus >= bus_count) throw ParseError(ln, "bus id " + std::to_string(bus) + " out of range");
    if (!(load >= 0.0) || !(gen >= 0.0)) throw ParseError(ln, "load and generation must be >= 0");
    auto [it, inserted] = index.try_emplace(hour, profiles.size());
    if (inserted) {
      profiles.push_back({hour, std::vector<double>(bus_count, 0.0),
                          std::vector<double>(bus_count, 0.0)});
      seen.emplace_back(bus_count, false);
    }
    const auto p = it->second;
    if (seen[p][bus]) throw ParseError(ln, "duplicate row for hour/bus");
    seen[p][bus] = true;
    profiles[p].load[bus] = load;
    profiles[p].generation[bus] = gen;
  });
  if (!header) throw ParseError(1, "missing header");
  for (std::size_t p = 0; p < profiles.size(); ++p) {
    if (std::find(seen[p].begin(), seen[p].end(), false) != seen[p].end()) {
      throw ValidationError("hour " + std::to_string(profiles[p].hour_id) +
                            " does not list every bus");
    }
  }
  return profiles;
}

inline std::string serialize_profiles(const std::vector<Profile>& profiles) {
  std::string out = "hour,bus_id,load_mw,gen_mw\n";
  for (const auto& p : profiles) {
    for (std::size_t b = 0; b < p.load.size(); ++b) {
      out += std::to_string(p.hour_id) + "," + std::to_string(b) + "," +
             io::format_double(p.load[b]) + "," + io::format_double(p.generation[b]) + "\n";
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Balancing

/// Dispatch `target` MW across generators: scale the current dispatch
/// proportionally, clip to capacity, and hand any clipped remainder to units
/// with headroom in proportion to that headroom. Requires target ≤ Σcapacity.
inline std::vector<double> redispatch(const std::vector<double>& generation,
                                      const std::vector<double>& capacity, double target) {
  const auto n = generation.size();
  std::vector<double> out(n, 0.0);
  if (target <= 0.0) return out;
  const double total_gen = std::accumulate(generation.begin(), generation.end(), 0.0);
  const double total_cap = std::accumulate(capacity.begin(), capacity.end(), 0.0);
  if (total_gen > 0.0) {
    for (std::size_t i = 0; i < n; ++i) out[i] = generation[i] * (target / total_gen);
  } else if (total_cap > 0.0) {
    for (std::size_t i = 0; i < n; ++i) out[i] = capacity[i] * (target / total_cap);
  }
  double placed = 0.0;
  double headroom = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::min(out[i], capacity[i]);
    placed += out[i];
    headroom += capacity[i] - out[i];
  }
  const double deficit = target - placed;
  if (deficit > 0.0 && headroom > 0.0) {
    for (std::size_t i = 0; i < n; ++i) {
      out[i] = std::min(capacity[i], out[i] + deficit * (capacity[i] - out[i]) / headroom);
    }
  }
  return out;
}

/// Attach a profile to a grid. Imbalanced profiles (or ones that dispatch a
/// unit above its capacity) get generation rescaled uniformly to total load.
inline GridState apply_profile(const GridPtr& grid, const Profile& profile) {
  const auto n = grid->bus_count();
  if (profile.load.size() != n || profile.generation.size() != n) {
    throw PreconditionError("profile for hour " + std::to_string(profile.hour_id) + " has " +
                            std::to_string(profile.load.size()) + " buses, grid has " +
                            std::to_string(n));
  }
  GridState state{grid, profile.hour_id, profile.load, profile.generation};
  std::vector<double> capacity(n);
  bool over_capacity = false;
  for (std::size_t i = 0; i < n; ++i) {
    capacity[i] = grid->buses[i].max_generation;
    over_capacity = over_capacity || state.generation[i] > capacity[i];
  }
  const double total_load = state.total_load();
  const double tol = balance_tolerance(total_load);
  if (!over_capacity && std::abs(state.total_generation() - total_load) <= tol) return state;

  if (grid->total_capacity() + tol < total_load) {
    throw ValidationError("hour " + std::to_string(profile.hour_id) + ": load " +
                          io::format_double(total_load) + " MW exceeds generation capacity " +
                          io::format_double(grid->total_capacity()) + " MW");
  }
  state.generation = redispatch(state.generation, capacity, total_load);
  if (std::abs(state.total_generation() - total_load) > tol) {
    throw InternalError("rebalance of hour " + std::to_string(profile.hour_id) + " missed target");
  }
  return state;
}

}  // namespace blackout
