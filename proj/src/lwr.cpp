#include "evtraffic/lwr.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "evtraffic/errors.hpp"

namespace evtraffic {

double FundamentalDiagram::flow(double k) const {
  return std::max(0.0, std::min(free_speed * k, wave_speed() * (jam_density - k)));
}

double FundamentalDiagram::demand(double k, double cap_factor) const {
  return std::max(0.0, std::min(free_speed * k, cap_factor * capacity()));
}

double FundamentalDiagram::supply(double k, double cap_factor) const {
  return std::max(0.0, std::min(cap_factor * capacity(), wave_speed() * (jam_density - k)));
}

void FundamentalDiagram::validate() const {
  if (!(free_speed > 0.0)) throw ValidationError("free_speed must be positive");
  if (!(critical_density > 0.0)) throw ValidationError("critical_density must be positive");
  if (!(jam_density > critical_density)) throw ValidationError("jam_density must exceed critical_density");
}

namespace {

const double* opt_data(const std::vector<double>& v, std::size_t n, const char* what) {
  if (v.empty()) return nullptr;
  if (v.size() != n) throw ShapeError(std::string("boundary ") + what + " has wrong length");
  return v.data();
}

}  // namespace

StepResult godunov_step(const std::vector<double>& density, const RoadGraph& g, const FundamentalDiagram& fd,
                        double dt_min, const Boundary& boundary, Exec exec) {
  const std::size_t n = g.num_nodes();
  if (density.size() != n) throw ShapeError("density vector does not match the graph");
  const double max_speed = std::max(fd.free_speed, fd.wave_speed()) / 60.0;
  if (!(dt_min > 0.0) || dt_min > g.delta_x() / max_speed * (1.0 + 1e-12)) {
    throw ValidationError("time step " + std::to_string(dt_min) + " min violates the CFL bound " +
                          std::to_string(g.delta_x() / max_speed) + " min");
  }
  const double* in_dem = opt_data(boundary.inflow_demand, n, "inflow_demand");
  const double* out_sup = opt_data(boundary.outflow_supply, n, "outflow_supply");
  const double* capf = opt_data(boundary.capacity_factor, n, "capacity_factor");
  const bool par = exec == Exec::parallel && n >= 256;

  std::vector<double> dem(n), sup(n);
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t i = 0; i < n; ++i) {
    const double c = capf ? capf[i] : 1.0;
    const double lanes = g.nodes()[i].lanes;
    dem[i] = lanes * fd.demand(density[i], c);
    sup[i] = lanes * fd.supply(density[i], c);
  }

  // Merge: each receiving cell scales its incoming requests by one factor.
  std::vector<double> accept(n, 1.0);
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t j = 0; j < n; ++j) {
    double requested = in_dem ? in_dem[j] : 0.0;
    for (auto i : g.predecessors(j)) requested += dem[i] / static_cast<double>(g.successors(i).size());
    if (requested > sup[j]) accept[j] = sup[j] / requested;
  }

  // FIFO diverge: a cell sends at the rate allowed by its most restrictive branch.
  std::vector<double> send(n);
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t i = 0; i < n; ++i) {
    const auto& succ = g.successors(i);
    double theta = 1.0;
    if (succ.empty()) {
      if (out_sup && dem[i] > out_sup[i]) theta = out_sup[i] / dem[i];
    } else {
      for (auto j : succ) theta = std::min(theta, accept[j]);
    }
    send[i] = theta * dem[i];
  }

  StepResult r;
  r.density.resize(n);
  r.boundary_inflow.assign(n, 0.0);
  r.outflow = send;
  const double dt_h = dt_min / 60.0;
#pragma omp parallel for schedule(static) if (par)
  for (std::size_t j = 0; j < n; ++j) {
    double in = 0.0;
    for (auto i : g.predecessors(j)) in += send[i] / static_cast<double>(g.successors(i).size());
    if (in_dem) {
      r.boundary_inflow[j] = accept[j] * in_dem[j];
      in += r.boundary_inflow[j];
    }
    const double lanes = g.nodes()[j].lanes;
    const double k = density[j] + dt_h * (in - send[j]) / (g.delta_x() * lanes);
    r.density[j] = std::clamp(k, 0.0, fd.jam_density);
  }
  return r;
}

std::vector<std::size_t> source_nodes(const RoadGraph& g) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < g.num_nodes(); ++i) {
    if (g.predecessors(i).empty()) out.push_back(i);
  }
  return out;
}

void validate(const Scenario& s, int horizon) {
  s.fd.validate();
  if (horizon < 1) throw ValidationError("horizon must be at least one step");
  const auto sources = source_nodes(s.graph);
  for (std::size_t t = 0; t < s.demand.size(); ++t) {
    if (s.demand[t].size() != sources.size()) {
      throw ValidationError("demand row " + std::to_string(t) + " has " + std::to_string(s.demand[t].size()) +
                            " entries for " + std::to_string(sources.size()) + " source nodes");
    }
    for (double d : s.demand[t]) {
      if (!(d >= 0.0) || !std::isfinite(d)) throw ValidationError("demand must be finite and non-negative");
    }
  }
  for (const auto& inc : s.incidents) {
    if (inc.node >= s.graph.num_nodes()) throw ValidationError("incident on unknown node");
    if (!(inc.capacity_drop >= 0.0 && inc.capacity_drop <= 1.0)) {
      throw ValidationError("incident capacity_drop must lie in [0, 1]");
    }
    if (inc.start < 0 || inc.duration < 1 || inc.start + inc.duration > horizon) {
      throw ValidationError("incident window [" + std::to_string(inc.start) + ", " +
                            std::to_string(inc.start + inc.duration) + ") outside the horizon");
    }
  }
  if (!s.initial_density.empty()) {
    if (s.initial_density.size() != s.graph.num_nodes()) throw ValidationError("initial density has wrong length");
    for (double k : s.initial_density) {
      if (!(k >= 0.0 && k <= s.fd.jam_density)) throw ValidationError("initial density outside [0, jam_density]");
    }
  }
  if (!(s.noise_sigma >= 0.0)) throw ValidationError("noise_sigma must be non-negative");
}

TrafficField simulate(const Scenario& s, int horizon, const SimOptions& opt) {
  validate(s, horizon);
  const RoadGraph& g = s.graph;
  const std::size_t n = g.num_nodes();
  const double sub = g.delta_t() / opt.internal_dt_min;
  const auto substeps = static_cast<int>(std::llround(sub));
  if (substeps < 1 || std::abs(sub - substeps) > 1e-9) {
    throw ValidationError("internal step must divide the output interval delta_t");
  }
  const auto sources = source_nodes(g);

  std::mt19937_64 rng(s.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  TrafficField f;
  f.nodes = n;
  f.steps = static_cast<std::size_t>(horizon);
  f.speed.resize(f.steps * n);
  f.flow.resize(f.steps * n);
  f.density.resize(f.steps * n);

  std::vector<double> k = s.initial_density.empty() ? std::vector<double>(n, 0.0) : s.initial_density;
  std::vector<double> queue(sources.size(), 0.0);  // vehicles waiting to enter
  Boundary b;
  b.inflow_demand.assign(n, 0.0);
  const double dt_h = opt.internal_dt_min / 60.0;

  for (int t = 0; t < horizon; ++t) {
    std::vector<double> arrival(sources.size(), 0.0);
    if (!s.demand.empty()) {
      const auto& row = s.demand[std::min<std::size_t>(static_cast<std::size_t>(t), s.demand.size() - 1)];
      for (std::size_t q = 0; q < sources.size(); ++q) {
        const double noise = s.noise_sigma > 0.0 ? std::exp(s.noise_sigma * gauss(rng) - 0.5 * s.noise_sigma * s.noise_sigma) : 1.0;
        arrival[q] = row[q] * noise;
      }
    }
    b.capacity_factor.clear();
    for (const auto& inc : s.incidents) {
      if (t >= inc.start && t < inc.start + inc.duration) {
        if (b.capacity_factor.empty()) b.capacity_factor.assign(n, 1.0);
        b.capacity_factor[inc.node] = std::min(b.capacity_factor[inc.node], 1.0 - inc.capacity_drop);
      }
    }
    std::vector<double> k_sum(n, 0.0), q_sum(n, 0.0);
    for (int sstep = 0; sstep < substeps; ++sstep) {
      for (std::size_t q = 0; q < sources.size(); ++q) b.inflow_demand[sources[q]] = arrival[q] + queue[q] / dt_h;
      auto r = godunov_step(k, g, s.fd, opt.internal_dt_min, b, opt.exec);
      for (std::size_t q = 0; q < sources.size(); ++q) {
        queue[q] = std::max(0.0, queue[q] + (arrival[q] - r.boundary_inflow[sources[q]]) * dt_h);
      }
      k = std::move(r.density);
      for (std::size_t i = 0; i < n; ++i) {
        k_sum[i] += k[i];
        q_sum[i] += r.outflow[i] / g.nodes()[i].lanes;
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double kd = k_sum[i] / substeps;
      const double qd = q_sum[i] / substeps;
      const std::size_t at = static_cast<std::size_t>(t) * n + i;
      f.density[at] = kd;
      f.flow[at] = qd;
      f.speed[at] = kd > 1e-9 ? std::min(s.fd.free_speed, qd / kd) : s.fd.free_speed;
    }
  }
  return f;
}

std::vector<TrafficField> simulate_all(const std::vector<Scenario>& scenarios, int horizon, const SimOptions& opt) {
  for (const auto& s : scenarios) validate(s, horizon);
  std::vector<TrafficField> out(scenarios.size());
  SimOptions inner = opt;
  inner.exec = Exec::serial;
  const auto count = static_cast<std::ptrdiff_t>(scenarios.size());
#pragma omp parallel for schedule(dynamic) if (opt.exec == Exec::parallel)
  for (std::ptrdiff_t i = 0; i < count; ++i) out[i] = simulate(scenarios[i], horizon, inner);
  return out;
}

}  // namespace evtraffic
