#pragma once

// First-order kinematic-wave traffic simulator on a RoadGraph.
//
// Each segment is one finite-volume cell. Densities are per lane (veh/km/lane),
// flows crossing cell faces are totals over lanes (veh/h). Interface fluxes
// follow the demand/supply form of the Godunov scheme for a triangular
// fundamental diagram; junctions use equal turning fractions, FIFO diverges
// and demand-proportional merges.

#include <cstdint>
#include <limits>
#include <vector>

#include "evtraffic/kernels.hpp"
#include "evtraffic/roadgraph.hpp"

namespace evtraffic {

using kernels::Exec;

struct FundamentalDiagram {
  double free_speed = 120.0;       ///< km/h
  double critical_density = 15.0;  ///< veh/km/lane
  double jam_density = 115.0;      ///< veh/km/lane

  double capacity() const { return free_speed * critical_density; }
  /// Congested-branch wave speed, km/h (positive number, waves travel upstream).
  double wave_speed() const { return capacity() / (jam_density - critical_density); }
  /// Equilibrium flow per lane.
  double flow(double k) const;
  /// Sending function per lane, with capacity reduced to `cap_factor`·capacity.
  double demand(double k, double cap_factor = 1.0) const;
  /// Receiving function per lane.
  double supply(double k, double cap_factor = 1.0) const;
  void validate() const;
};

/// External conditions for one Godunov step. Empty vectors mean "none".
struct Boundary {
  std::vector<double> inflow_demand;    ///< veh/h offered to each cell from outside
  std::vector<double> outflow_supply;   ///< veh/h that may leave each cell with no successor
  std::vector<double> capacity_factor;  ///< per-cell capacity multiplier in [0, 1]
};

struct StepResult {
  std::vector<double> density;
  std::vector<double> boundary_inflow;  ///< veh/h accepted from outside per cell
  std::vector<double> outflow;          ///< veh/h leaving each cell
};

/// Advance densities by `dt_min`. Throws ValidationError when the step breaks
/// the CFL bound dt ≤ Δx / max wave speed.
StepResult godunov_step(const std::vector<double>& density, const RoadGraph& g, const FundamentalDiagram& fd,
                        double dt_min, const Boundary& boundary = {}, Exec exec = Exec::parallel);

struct Incident {
  std::size_t node = 0;
  int start = 0;     ///< output step
  int duration = 1;  ///< output steps
  double capacity_drop = 1.0;
};

struct Scenario {
  RoadGraph graph = RoadGraph::chain(1);
  FundamentalDiagram fd;
  /// demand[t][s]: veh/h offered to the s-th source node (a node without
  /// predecessors, in node order) during output step t. The last row is
  /// held if the horizon is longer.
  std::vector<std::vector<double>> demand;
  std::vector<Incident> incidents;
  std::vector<double> initial_density;  ///< empty: empty road
  double noise_sigma = 0.1;             ///< lognormal demand noise
  std::uint64_t seed = 0;
  std::uint32_t id = 0;
};

struct SimOptions {
  double internal_dt_min = 0.1;
  Exec exec = Exec::parallel;
};

/// Output fields on the Δt grid, stored time-major: value(t, i) = v[t·n + i].
struct TrafficField {
  std::size_t nodes = 0;
  std::size_t steps = 0;
  std::vector<double> speed;    ///< km/h
  std::vector<double> flow;     ///< veh/h/lane
  std::vector<double> density;  ///< veh/km/lane

  double speed_at(std::size_t t, std::size_t i) const { return speed[t * nodes + i]; }
  double flow_at(std::size_t t, std::size_t i) const { return flow[t * nodes + i]; }
  double density_at(std::size_t t, std::size_t i) const { return density[t * nodes + i]; }
};

std::vector<std::size_t> source_nodes(const RoadGraph& g);
void validate(const Scenario& s, int horizon);

TrafficField simulate(const Scenario& scenario, int horizon, const SimOptions& opt = {});
/// Independent scenarios in parallel; element i corresponds to scenarios[i].
std::vector<TrafficField> simulate_all(const std::vector<Scenario>& scenarios, int horizon, const SimOptions& opt = {});

}  // namespace evtraffic
