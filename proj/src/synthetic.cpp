#include "evtraffic/synthetic.hpp"

#include <cmath>
#include <random>

#include "evtraffic/binary_io.hpp"
#include "evtraffic/errors.hpp"

namespace evtraffic {

void SyntheticRecipe::validate() const {
  if (nodes < 2) throw ValidationError("synthetic road needs at least two nodes");
  if (lanes < 2 && bottleneck < nodes) throw ValidationError("a lane drop needs at least two lanes");
  if (lanes < 1) throw ValidationError("lanes must be positive");
  if (peaks.empty()) throw ValidationError("at least one demand profile is required");
  for (double p : peaks) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw ValidationError("peak demand must be finite and non-negative");
  }
  if (!(base_demand >= 0.0)) throw ValidationError("base demand must be non-negative");
  if (copies < 1) throw ValidationError("copies must be positive");
  if (incident_scenarios < 0) throw ValidationError("incident scenario count must be non-negative");
  if (incident_scenarios > 0) {
    if (incident_start < 0 || incident_duration < 1 || incident_start + incident_duration > horizon) {
      throw ValidationError("incident window outside the horizon");
    }
    if (!(incident_drop >= 0.0 && incident_drop <= 1.0)) throw ValidationError("incident drop must lie in [0, 1]");
  }
  if (horizon < window_in + window_out) throw ValidationError("horizon shorter than window");
}

void SyntheticRecipe::hash_into(io::Fnv1a& h) const {
  h.update("synthetic-v1");
  h.value(static_cast<std::uint64_t>(nodes));
  h.value(lanes);
  h.value(static_cast<std::uint64_t>(bottleneck));
  h.value(horizon);
  h.value(static_cast<std::uint64_t>(peaks.size()));
  for (double p : peaks) h.value(p);
  for (double v : {base_demand, incident_drop, noise_sigma}) h.value(v);
  for (int v : {copies, incident_scenarios, incident_start, incident_duration, window_in, window_out, stride}) {
    h.value(v);
  }
  h.value(seed);
}

RoadGraph synthetic_graph(const SyntheticRecipe& r) {
  RoadGraph g = RoadGraph::chain(r.nodes, 0.4, r.lanes, 2.0);
  for (std::size_t i = r.bottleneck; i < r.nodes; ++i) g = g.with_lanes(i, r.lanes - 1);
  return g;
}

namespace {

/// Smooth single-peak profile over the horizon.
std::vector<std::vector<double>> profile(double base, double peak, int horizon, std::size_t sources) {
  std::vector<std::vector<double>> d(static_cast<std::size_t>(horizon));
  const double centre = 0.45 * horizon;
  const double width = 0.18 * horizon;
  for (int t = 0; t < horizon; ++t) {
    const double z = (t - centre) / width;
    d[static_cast<std::size_t>(t)].assign(sources, base + (peak - base) * std::exp(-0.5 * z * z));
  }
  return d;
}

std::uint64_t scenario_seed(std::uint64_t seed, std::uint32_t id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), id, 0x5eedu};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

}  // namespace

std::vector<Scenario> synthetic_scenarios(const SyntheticRecipe& r) { return synthetic_scenarios(r, synthetic_graph(r)); }

std::vector<Scenario> synthetic_scenarios(const SyntheticRecipe& r, const RoadGraph& g) {
  r.validate();
  const FundamentalDiagram fd;
  const std::size_t n = g.num_nodes();
  const std::size_t sources = source_nodes(g).size();
  if (sources == 0) throw ValidationError("graph has no source node to feed demand into");
  std::vector<double> k0(n);
  for (std::size_t i = 0; i < n; ++i) k0[i] = r.base_demand / (g.nodes()[i].lanes * fd.free_speed);

  std::vector<Scenario> out;
  auto add = [&](double peak) -> Scenario& {
    Scenario s;
    s.graph = g;
    s.fd = fd;
    s.demand = profile(r.base_demand, peak, r.horizon, sources);
    s.initial_density = k0;
    s.noise_sigma = r.noise_sigma;
    s.id = static_cast<std::uint32_t>(out.size());
    s.seed = scenario_seed(r.seed, s.id);
    out.push_back(std::move(s));
    return out.back();
  };
  for (double peak : r.peaks) {
    for (int c = 0; c < r.copies; ++c) add(peak);
  }
  const std::size_t site = std::min(r.bottleneck + 1, n - 1);
  for (int k = 0; k < r.incident_scenarios; ++k) {
    Scenario& s = add(r.peaks[static_cast<std::size_t>(k) % r.peaks.size()]);
    s.incidents.push_back({site, r.incident_start, r.incident_duration, r.incident_drop});
  }
  return out;
}

Corpus synthetic_corpus(const SyntheticRecipe& r, Exec exec) { return synthetic_corpus(r, synthetic_graph(r), exec); }

Corpus synthetic_corpus(const SyntheticRecipe& r, const RoadGraph& g, Exec exec) {
  const auto scenarios = synthetic_scenarios(r, g);
  SimOptions opt;
  opt.exec = exec;
  const auto fields = simulate_all(scenarios, r.horizon, opt);
  std::vector<SimulatedScenario> runs;
  for (std::size_t k = 0; k < scenarios.size(); ++k) runs.push_back({&scenarios[k], &fields[k]});
  Corpus c = make_corpus(g, runs, r.window_in, r.window_out, r.stride);
  c.seed = r.seed;
  io::Fnv1a h;
  r.hash_into(h);
  g.hash_into(h);
  c.config_hash = h.digest();
  return c;
}

}  // namespace evtraffic
