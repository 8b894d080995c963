#pragma once

// DC power flow on islanded networks: B'θ = P per island, slack angle 0.

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "blackout/error.hpp"
#include "blackout/grid.hpp"

namespace blackout {

/// Active flag per line (1 = in service).
using LineMask = std::vector<std::uint8_t>;

inline LineMask all_lines(const Grid& grid) { return LineMask(grid.line_count(), 1); }

inline LineMask mask_without(const Grid& grid, std::span<const LineId> removed) {
  auto mask = all_lines(grid);
  for (auto id : removed) {
    if (id >= mask.size()) throw PreconditionError("line id " + std::to_string(id) + " out of range");
    mask[id] = 0;
  }
  return mask;
}

struct Island {
  std::vector<BusId> buses;   // ascending
  std::vector<LineId> lines;  // ascending
  BusId slack_bus = 0;
};

/// Connected components of the active network. Isolated buses are singleton
/// islands; slack is the lowest bus id; islands are ordered by slack id.
inline std::vector<Island> find_islands(const Grid& grid, const LineMask& active) {
  const auto n = grid.bus_count();
  std::vector<BusId> parent(n);
  std::iota(parent.begin(), parent.end(), BusId{0});
  auto find = [&](BusId x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  };
  for (const auto& l : grid.lines) {
    if (!active[l.id]) continue;
    auto a = find(l.from_bus);
    auto b = find(l.to_bus);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
  // Roots are the minimum bus of each component, so visiting buses in order
  // yields islands sorted by slack.
  std::vector<std::size_t> island_of_root(n, SIZE_MAX);
  std::vector<Island> islands;
  for (BusId b = 0; b < n; ++b) {
    const auto r = find(b);
    if (island_of_root[r] == SIZE_MAX) {
      island_of_root[r] = islands.size();
      islands.push_back({{}, {}, b});
    }
    islands[island_of_root[r]].buses.push_back(b);
  }
  for (const auto& l : grid.lines) {
    if (active[l.id]) islands[island_of_root[find(l.from_bus)]].lines.push_back(l.id);
  }
  return islands;
}

/// Angles (aligned with island.buses) and MW flows (aligned with island.lines).
struct IslandFlow {
  std::vector<double> angles;
  std::vector<double> flows;
};

inline constexpr double kSolverTolerance = 1e-10;  // pu, on ‖B'θ − P‖∞

/// Solve one island. `injections` is indexed by global bus id, in MW.
inline IslandFlow solve_dc(const GridState& state, const Island& island,
                           std::span<const double> injections) {
  const Grid& grid = *state.grid;
  const auto nb = island.buses.size();
  IslandFlow out{std::vector<double>(nb, 0.0), std::vector<double>(island.lines.size(), 0.0)};

  double net = 0.0;
  double scale = 0.0;
  for (auto b : island.buses) {
    net += injections[b];
    scale += std::abs(injections[b]);
  }
  if (std::abs(net) > balance_tolerance(scale / 2.0)) {
    throw PreconditionError("island with slack " + std::to_string(island.slack_bus) +
                            " has net injection " + io::format_double(net) + " MW");
  }
  if (nb == 1) return out;

  // Local index: position in island.buses; the slack (position 0) is eliminated.
  std::vector<std::size_t> local(grid.bus_count(), SIZE_MAX);
  for (std::size_t i = 0; i < nb; ++i) local[island.buses[i]] = i;
  if (local[island.slack_bus] != 0) throw InternalError("slack is not the first island bus");

  const auto dim = static_cast<Eigen::Index>(nb - 1);
  std::vector<Eigen::Triplet<double>> triplets;
  triplets.reserve(island.lines.size() * 4);
  for (auto id : island.lines) {
    const auto& l = grid.lines[id];
    const double y = 1.0 / l.reactance;
    const auto i = static_cast<Eigen::Index>(local[l.from_bus]) - 1;
    const auto j = static_cast<Eigen::Index>(local[l.to_bus]) - 1;
    if (i >= 0) triplets.emplace_back(i, i, y);
    if (j >= 0) triplets.emplace_back(j, j, y);
    if (i >= 0 && j >= 0) {
      triplets.emplace_back(i, j, -y);
      triplets.emplace_back(j, i, -y);
    }
  }
  Eigen::SparseMatrix<double> bprime(dim, dim);
  bprime.setFromTriplets(triplets.begin(), triplets.end());

  Eigen::VectorXd p(dim);
  for (std::size_t i = 1; i < nb; ++i) p[static_cast<Eigen::Index>(i - 1)] = injections[island.buses[i]] / grid.base_mva;

  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(bprime);
  if (solver.info() != Eigen::Success) {
    throw InternalError("singular B' on island with slack " + std::to_string(island.slack_bus));
  }
  const Eigen::VectorXd theta = solver.solve(p);
  const double residual = (bprime * theta - p).lpNorm<Eigen::Infinity>();
  if (!(residual <= kSolverTolerance)) {
    throw InternalError("DC solve residual " + io::format_double(residual) + " pu exceeds tolerance");
  }
  for (std::size_t i = 1; i < nb; ++i) out.angles[i] = theta[static_cast<Eigen::Index>(i - 1)];
  for (std::size_t k = 0; k < island.lines.size(); ++k) {
    const auto& l = grid.lines[island.lines[k]];
    out.flows[k] =
        grid.base_mva * (out.angles[local[l.from_bus]] - out.angles[local[l.to_bus]]) / l.reactance;
  }
  return out;
}

struct FlowSolution {
  std::vector<double> angles;            // rad per bus, slack of each island = 0
  std::vector<double> flows;             // MW per line, from → to; 0 on inactive lines
  std::vector<std::size_t> island_of;    // island index per bus
  std::vector<Island> islands;
};

/// Per-island solves stitched into one solution.
inline FlowSolution compute_flows(const GridState& state, const LineMask& active,
                                  std::span<const double> injections) {
  const Grid& grid = *state.grid;
  FlowSolution sol{std::vector<double>(grid.bus_count(), 0.0),
                   std::vector<double>(grid.line_count(), 0.0),
                   std::vector<std::size_t>(grid.bus_count(), 0), find_islands(grid, active)};
  for (std::size_t k = 0; k < sol.islands.size(); ++k) {
    const auto& island = sol.islands[k];
    IslandFlow part;
    try {
      part = solve_dc(state, island, injections);
    } catch (const PreconditionError& e) {
      throw PreconditionError("island " + std::to_string(k) + ": " + e.what());
    } catch (const InternalError& e) {
      throw InternalError("island " + std::to_string(k) + ": " + e.what());
    }
    for (std::size_t i = 0; i < island.buses.size(); ++i) {
      sol.angles[island.buses[i]] = part.angles[i];
      sol.island_of[island.buses[i]] = k;
    }
    for (std::size_t i = 0; i < island.lines.size(); ++i) sol.flows[island.lines[i]] = part.flows[i];
  }
  return sol;
}

}  // namespace blackout
