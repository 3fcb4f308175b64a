#pragma once

// Synthetic highway corpus: a chain with a lane drop, a few recurrent demand
// profiles replayed with independent noise, and a handful of incident runs.

#include <cstdint>
#include <vector>

#include "evtraffic/corpus.hpp"
#include "evtraffic/lwr.hpp"

namespace evtraffic {

struct SyntheticRecipe {
  std::size_t nodes = 12;
  int lanes = 3;
  std::size_t bottleneck = 8;  ///< first node with one lane fewer; ≥ nodes disables the drop
  int horizon = 95;            ///< output steps per scenario
  /// Peak demand (veh/h) of each recurrent profile; one scenario per entry and copy.
  std::vector<double> peaks{2400.0, 3000.0, 3900.0, 4500.0};
  double base_demand = 1800.0;
  int copies = 16;
  int incident_scenarios = 2;
  int incident_start = 8;
  int incident_duration = 20;
  double incident_drop = 0.7;
  double noise_sigma = 0.05;
  int window_in = 20;
  int window_out = 15;
  int stride = 2;
  std::uint64_t seed = 1;

  void validate() const;
  void hash_into(io::Fnv1a& h) const;
};

RoadGraph synthetic_graph(const SyntheticRecipe& r);
/// Recurrent runs first (profile-major), then incident runs. Ids are sequential.
std::vector<Scenario> synthetic_scenarios(const SyntheticRecipe& r);
/// Same recipe on an arbitrary graph: every source node receives the demand
/// profile and incidents sit on node min(bottleneck + 1, n − 1).
std::vector<Scenario> synthetic_scenarios(const SyntheticRecipe& r, const RoadGraph& g);
/// Simulates every scenario and cuts windows; seed and config hash are recorded.
Corpus synthetic_corpus(const SyntheticRecipe& r, Exec exec = Exec::parallel);
Corpus synthetic_corpus(const SyntheticRecipe& r, const RoadGraph& g, Exec exec = Exec::parallel);

}  // namespace evtraffic
