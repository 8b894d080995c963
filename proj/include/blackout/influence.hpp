#pragma once

// Statistical topology augmentation: line pairs that often fail together but
// sit far apart on the physical graph become extra bus-to-bus edges.

#include <algorithm>
#include <cstddef>
#include <limits>
#include <map>
#include <queue>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "blackout/error.hpp"
#include "blackout/grid.hpp"
#include "blackout/io.hpp"

namespace blackout {

inline constexpr std::size_t kUnreachable = std::numeric_limits<std::size_t>::max();

using LinePair = std::pair<LineId, LineId>;  // first < second

struct CoFailureTable {
  std::map<LinePair, std::size_t> counts;
  std::size_t scenario_count = 0;

  std::size_t count(LineId a, LineId b) const {
    const auto it = counts.find({std::min(a, b), std::max(a, b)});
    return it == counts.end() ? 0 : it->second;
  }
};

/// Number of scenarios in which each unordered line pair both failed.
/// Repeated ids inside one scenario count once.
inline CoFailureTable cofailure_counts(const std::vector<std::vector<LineId>>& traces) {
  CoFailureTable table;
  table.scenario_count = traces.size();
  std::vector<LineId> lines;
  for (const auto& trace : traces) {
    lines = trace;
    std::sort(lines.begin(), lines.end());
    lines.erase(std::unique(lines.begin(), lines.end()), lines.end());
    for (std::size_t i = 0; i < lines.size(); ++i) {
      for (std::size_t j = i + 1; j < lines.size(); ++j) ++table.counts[{lines[i], lines[j]}];
    }
  }
  return table;
}

/// All-pairs bus hop counts on the full physical graph.
using HopMatrix = std::vector<std::vector<std::size_t>>;

inline HopMatrix bus_distances(const Grid& grid) {
  const auto n = grid.bus_count();
  std::vector<std::vector<BusId>> adj(n);
  for (const auto& l : grid.lines) {
    adj[l.from_bus].push_back(l.to_bus);
    adj[l.to_bus].push_back(l.from_bus);
  }
  HopMatrix dist(n, std::vector<std::size_t>(n, kUnreachable));
  for (BusId s = 0; s < n; ++s) {
    auto& d = dist[s];
    std::queue<BusId> q;
    d[s] = 0;
    q.push(s);
    while (!q.empty()) {
      const auto u = q.front();
      q.pop();
      for (auto v : adj[u]) {
        if (d[v] == kUnreachable) {
          d[v] = d[u] + 1;
          q.push(v);
        }
      }
    }
  }
  return dist;
}

inline std::size_t line_distance(const Grid& grid, const HopMatrix& hops, LineId a, LineId b) {
  if (a == b) throw PreconditionError("line_distance needs two distinct lines");
  const auto& la = grid.lines.at(a);
  const auto& lb = grid.lines.at(b);
  return std::min({hops[la.from_bus][lb.from_bus], hops[la.from_bus][lb.to_bus],
                   hops[la.to_bus][lb.from_bus], hops[la.to_bus][lb.to_bus]});
}

/// Minimum hop count between any endpoint of `a` and any endpoint of `b`;
/// 0 when they share a bus, kUnreachable across components.
inline std::size_t line_distance(const Grid& grid, LineId a, LineId b) {
  return line_distance(grid, bus_distances(grid), a, b);
}

struct StatisticalEdge {
  BusId from_bus = 0;  // endpoint of line_a
  BusId to_bus = 0;    // endpoint of line_b
  LineId line_a = 0;
  LineId line_b = 0;
  double score = 0.0;

  bool operator==(const StatisticalEdge&) const = default;
};

/// Every eligible line pair, best first. A pair is eligible when the lines
/// share no bus, are connected, and the emitted bus pair is at least two hops
/// apart (so it never duplicates a physical line). Score = count × line distance;
/// ties go to the lexicographically smaller (line_a, line_b).
inline std::vector<StatisticalEdge> rank_line_pairs(const CoFailureTable& table, const Grid& grid) {
  const auto hops = bus_distances(grid);
  std::vector<StatisticalEdge> ranked;
  for (const auto& [pair, count] : table.counts) {
    if (count == 0) continue;
    const auto [a, b] = pair;
    const auto distance = line_distance(grid, hops, a, b);
    if (distance == 0 || distance == kUnreachable) continue;
    const auto& la = grid.lines[a];
    const auto& lb = grid.lines[b];
    StatisticalEdge best{};
    std::size_t best_hops = 0;
    bool have = false;
    for (auto u : {la.from_bus, la.to_bus}) {
      for (auto v : {lb.from_bus, lb.to_bus}) {
        const auto h = hops[u][v];
        const auto key = std::minmax(u, v);
        const auto best_key = std::minmax(best.from_bus, best.to_bus);
        if (!have || h > best_hops || (h == best_hops && key < best_key)) {
          best = {u, v, a, b, 0.0};
          best_hops = h;
          have = true;
        }
      }
    }
    if (best_hops < 2) continue;
    best.score = static_cast<double>(count) * static_cast<double>(distance);
    ranked.push_back(best);
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& x, const auto& y) {
    if (x.score != y.score) return x.score > y.score;
    return std::pair(x.line_a, x.line_b) < std::pair(y.line_a, y.line_b);
  });
  return ranked;
}

struct EdgeSelection {
  std::vector<StatisticalEdge> edges;
  std::vector<std::string> warnings;
};

/// Top-k of rank_line_pairs. Returns fewer edges (with a warning) when not
/// enough pairs are eligible.
inline EdgeSelection select_statistical_edges(const CoFailureTable& table, const Grid& grid,
                                              std::size_t k) {
  EdgeSelection out;
  if (k == 0) return out;
  auto ranked = rank_line_pairs(table, grid);
  if (ranked.size() < k) {
    out.warnings.push_back("only " + std::to_string(ranked.size()) + " eligible line pairs for k=" +
                           std::to_string(k));
  }
  ranked.resize(std::min(k, ranked.size()));
  out.edges = std::move(ranked);
  return out;
}

struct AugmentedTopology {
  GridPtr grid;
  std::vector<StatisticalEdge> statistical_edges;
  std::vector<std::string> warnings;

  std::size_t edge_count() const { return grid->line_count() + statistical_edges.size(); }
};

/// Physical lines plus the given statistical edges. Self loops and edges that
/// coincide with a physical line are dropped with a warning.
inline AugmentedTopology augment_topology(const GridPtr& grid, std::vector<StatisticalEdge> edges) {
  AugmentedTopology topo{grid, {}, {}};
  std::set<std::pair<BusId, BusId>> physical;
  for (const auto& l : grid->lines) physical.insert(std::minmax(l.from_bus, l.to_bus));
  for (auto& e : edges) {
    if (e.from_bus >= grid->bus_count() || e.to_bus >= grid->bus_count()) {
      throw ValidationError("statistical edge references an undeclared bus");
    }
    const auto tag = "statistical edge " + std::to_string(e.from_bus) + "-" + std::to_string(e.to_bus);
    if (e.from_bus == e.to_bus) {
      topo.warnings.push_back(tag + " is a self loop; skipped");
    } else if (physical.count(std::minmax(e.from_bus, e.to_bus))) {
      topo.warnings.push_back(tag + " duplicates a physical line; skipped");
    } else {
      topo.statistical_edges.push_back(e);
    }
  }
  return topo;
}

inline AugmentedTopology physical_topology(const GridPtr& grid) { return {grid, {}, {}}; }

/// CSV: from_bus,to_bus,line_a,line_b,score
inline std::string serialize_edges(const std::vector<StatisticalEdge>& edges) {
  std::string out = "from_bus,to_bus,line_a,line_b,score\n";
  for (const auto& e : edges) {
    out += std::to_string(e.from_bus) + "," + std::to_string(e.to_bus) + "," +
           std::to_string(e.line_a) + "," + std::to_string(e.line_b) + "," +
           io::format_double(e.score) + "\n";
  }
  return out;
}

inline std::vector<StatisticalEdge> parse_edges(std::string_view text) {
  std::vector<StatisticalEdge> out;
  bool header = false;
  io::for_each_line(text, [&](std::size_t ln, std::string_view raw) {
    const auto line = io::trim(raw);
    if (line.empty()) return;
    const auto f = io::split(line, ',');
    if (!header) {
      if (line != "from_bus,to_bus,line_a,line_b,score") {
        throw ParseError(ln, "expected header 'from_bus,to_bus,line_a,line_b,score'");
      }
      header = true;
      return;
    }
    if (f.size() != 5) throw ParseError(ln, "expected 5 fields");
    out.push_back({io::parse_uint(f[0], ln), io::parse_uint(f[1], ln), io::parse_uint(f[2], ln),
                   io::parse_uint(f[3], ln), io::parse_double(f[4], ln)});
  });
  if (!header) throw ParseError(1, "edge file has no header");
  return out;
}

}  // namespace blackout
