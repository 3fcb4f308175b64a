#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"
#include "evtraffic/corpus.hpp"
#include "evtraffic/errors.hpp"
#include "evtraffic/lwr.hpp"

using namespace evtraffic;

namespace {

double total_vehicles(const std::vector<double>& k, const RoadGraph& g) {
  double s = 0.0;
  for (std::size_t i = 0; i < k.size(); ++i) s += k[i] * g.nodes()[i].lanes * g.delta_x();
  return s;
}

// Position (km, measured from the upstream end) where density first crosses
// the midpoint between the two states, linearly interpolated.
double front_position(const std::vector<double>& k, double kl, double kr, double dx) {
  const double mid = 0.5 * (kl + kr);
  for (std::size_t i = 1; i < k.size(); ++i) {
    if ((k[i - 1] - mid) * (k[i] - mid) <= 0.0 && k[i] != k[i - 1]) {
      const double frac = (mid - k[i - 1]) / (k[i] - k[i - 1]);
      return (static_cast<double>(i - 1) + 0.5 + frac) * dx;
    }
  }
  return std::nan("");
}

// Runs a Riemann problem and returns the measured front speed in km/h.
double riemann_speed(double kl, double kr) {
  const FundamentalDiagram fd;
  const auto g = RoadGraph::chain(160, 0.4, 1);
  std::vector<double> k(160);
  for (std::size_t i = 0; i < k.size(); ++i) k[i] = i < 80 ? kl : kr;
  Boundary b;
  b.inflow_demand.assign(160, 0.0);
  b.inflow_demand[0] = fd.flow(kl);
  b.outflow_supply.assign(160, 0.0);
  b.outflow_supply[159] = fd.flow(kr);
  const double dt = 0.1;
  double x0 = 0.0;
  for (int step = 1; step <= 600; ++step) {
    k = godunov_step(k, g, fd, dt, b).density;
    if (step == 60) x0 = front_position(k, kl, kr, g.delta_x());
  }
  const double x1 = front_position(k, kl, kr, g.delta_x());
  return (x1 - x0) / (540 * dt / 60.0);
}

Scenario bottleneck_scenario(double demand_per_lane) {
  Scenario s;
  s.graph = RoadGraph::chain(40, 0.4, 3);
  for (std::size_t i = 30; i < 40; ++i) s.graph = s.graph.with_lanes(i, 2);
  s.demand = {{3 * demand_per_lane}};
  s.noise_sigma = 0.0;
  return s;
}

}  // namespace

TEST_CASE("fundamental diagram defaults") {
  const FundamentalDiagram fd;
  CHECK(fd.capacity() == doctest::Approx(1800.0));
  CHECK(fd.wave_speed() == doctest::Approx(18.0));
  CHECK(fd.flow(0.0) == 0.0);
  CHECK(fd.flow(115.0) == 0.0);
  CHECK(fd.demand(50.0) == doctest::Approx(1800.0));
  CHECK(fd.supply(5.0) == doctest::Approx(1800.0));
  CHECK(fd.supply(60.0, 0.5) == doctest::Approx(900.0));
  CHECK(fd.demand(60.0, 0.0) == 0.0);
  CHECK_THROWS_AS((FundamentalDiagram{120, 20, 10}.validate()), ValidationError);
}

TEST_CASE("godunov_step basics") {
  const FundamentalDiagram fd;
  const auto ring = RoadGraph::ring(12);
  SUBCASE("uniform density on a ring is stationary") {
    std::vector<double> k(12, 37.5);
    CHECK(godunov_step(k, ring, fd, 0.1).density == k);
  }
  SUBCASE("CFL violation is rejected") {
    std::vector<double> k(12, 10.0);
    CHECK_THROWS_AS(godunov_step(k, ring, fd, 0.25), ValidationError);
    CHECK_NOTHROW(godunov_step(k, ring, fd, 0.2));
  }
  SUBCASE("wrong density length") { CHECK_THROWS_AS(godunov_step({1.0}, ring, fd, 0.1), ShapeError); }
}

TEST_CASE("closed ring conserves vehicles") {
  const FundamentalDiagram fd;
  const auto g = RoadGraph::ring(50, 0.4, 2);
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 115.0);
  std::vector<double> k(50);
  for (auto& v : k) v = u(rng);
  const double before = total_vehicles(k, g);
  for (int s = 0; s < 1000; ++s) k = godunov_step(k, g, fd, 0.1).density;
  CHECK(std::abs(total_vehicles(k, g) - before) / before < 1e-9);
}

TEST_CASE("Riemann shock speeds match Rankine-Hugoniot") {
  const FundamentalDiagram fd;
  for (auto [kl, kr] : {std::pair{15.0, 115.0}, std::pair{10.0, 60.0}, std::pair{10.0, 30.0}}) {
    const double expected = (fd.flow(kr) - fd.flow(kl)) / (kr - kl);
    const double measured = riemann_speed(kl, kr);
    CAPTURE(kl);
    CAPTURE(kr);
    CHECK(std::abs(measured - expected) <= 0.05 * std::abs(expected));
  }
  CHECK(riemann_speed(15.0, 115.0) / 60.0 == doctest::Approx(-0.3).epsilon(0.05));
}

TEST_CASE("free-flow pulse travels at free speed") {
  const FundamentalDiagram fd;
  const auto g = RoadGraph::chain(160, 0.4, 1);
  std::vector<double> k(160, 5.0);
  for (std::size_t i = 20; i < 25; ++i) k[i] = 7.0;
  Boundary b;
  b.inflow_demand.assign(160, 0.0);
  b.inflow_demand[0] = fd.flow(5.0);
  auto centroid = [&](const std::vector<double>& d) {
    double m = 0.0, mx = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      m += d[i] - 5.0;
      mx += (d[i] - 5.0) * (i + 0.5) * g.delta_x();
    }
    return mx / m;
  };
  const double c0 = centroid(k);
  for (int s = 0; s < 100; ++s) k = godunov_step(k, g, fd, 0.1, b).density;
  const double speed = (centroid(k) - c0) / (100 * 0.1 / 60.0);
  CHECK(speed == doctest::Approx(120.0).epsilon(0.05));
}

TEST_CASE("simulate") {
  SUBCASE("zero demand leaves an empty road") {
    Scenario s;
    s.graph = RoadGraph::chain(6);
    s.demand = {{0.0}};
    const auto f = simulate(s, 5);
    for (double v : f.speed) CHECK(v == 120.0);
    for (double q : f.flow) CHECK(q == 0.0);
  }
  SUBCASE("queue behind a lane drop grows at the Rankine-Hugoniot speed") {
    const FundamentalDiagram fd;
    const double arrive = 1620.0;  // per lane on the 3-lane section
    const auto s = bottleneck_scenario(arrive);
    const auto f = simulate(s, 60);
    const double kq = fd.jam_density - (2.0 / 3.0 * fd.capacity()) / fd.wave_speed();
    const double ka = arrive / fd.free_speed;
    const double expected = (2.0 / 3.0 * fd.capacity() - arrive) / (kq - ka) / 60.0;  // km/min
    std::vector<double> ts, xs;
    for (std::size_t t = 5; t < 60; ++t) {
      std::vector<double> k(30);
      for (std::size_t i = 0; i < 30; ++i) k[i] = f.density_at(t, i);
      const double x = front_position(k, ka, kq, 0.4);
      if (std::isnan(x) || x < 2.0 || x > 10.0) continue;
      ts.push_back(static_cast<double>(t) * 2.0);
      xs.push_back(x);
    }
    REQUIRE(ts.size() >= 10);
    const double tm = std::accumulate(ts.begin(), ts.end(), 0.0) / ts.size();
    const double xm = std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size();
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < ts.size(); ++i) {
      sxy += (ts[i] - tm) * (xs[i] - xm);
      sxx += (ts[i] - tm) * (ts[i] - tm);
    }
    CHECK(sxy / sxx == doctest::Approx(expected).epsilon(0.05));
  }
  SUBCASE("full closure stops flow at the incident node") {
    auto s = bottleneck_scenario(1500.0);
    s.incidents = {{20, 10, 5, 1.0}};
    const auto f = simulate(s, 30);
    for (std::size_t t = 10; t < 15; ++t) CHECK(f.flow_at(t, 20) == 0.0);
    CHECK(f.flow_at(9, 20) > 0.0);
    CHECK(f.speed_at(14, 19) < 5.0);
  }
  SUBCASE("field invariants and determinism") {
    auto s = bottleneck_scenario(1700.0);
    s.noise_sigma = 0.1;
    s.seed = 5;
    s.incidents = {{12, 5, 8, 0.6}};
    const auto f = simulate(s, 40);
    for (std::size_t i = 0; i < f.density.size(); ++i) {
      CHECK(f.density[i] >= 0.0);
      CHECK(f.density[i] <= 115.0);
      CHECK(f.speed[i] <= 120.0);
    }
    const auto g = simulate(s, 40, {0.1, Exec::serial});
    CHECK(f.speed == g.speed);
    CHECK(f.flow == g.flow);
    s.seed = 6;
    CHECK(simulate(s, 40).flow != f.flow);
  }
  SUBCASE("serial and parallel agree on a large network") {
    Scenario s;
    s.graph = RoadGraph::chain(300, 0.4, 2);
    s.demand = {{3000.0}};
    s.incidents = {{250, 2, 3, 0.7}};
    const auto a = simulate(s, 8, {0.1, Exec::serial});
    const auto b = simulate(s, 8, {0.1, Exec::parallel});
    CHECK(a.density == b.density);
  }
  SUBCASE("scenario validation") {
    Scenario s = bottleneck_scenario(1000.0);
    s.incidents = {{3, 25, 10, 0.5}};
    CHECK_THROWS_AS(simulate(s, 30), ValidationError);
    s.incidents = {{3, 2, 2, 1.5}};
    CHECK_THROWS_AS(simulate(s, 30), ValidationError);
    s.incidents.clear();
    s.demand = {{-1.0}};
    CHECK_THROWS_AS(simulate(s, 30), ValidationError);
    s.demand = {{1.0, 2.0}};
    CHECK_THROWS_AS(simulate(s, 30), ValidationError);
  }
}

TEST_CASE("make_corpus windows and rarity") {
  Scenario s;
  s.graph = RoadGraph::chain(4);
  s.demand = {{2000.0}};
  const auto f35 = simulate(s, 35);
  const auto f50 = simulate(s, 50);
  CHECK(make_corpus(s.graph, {{&s, &f35}}, 20, 15, 1).samples.size() == 1);
  CHECK(make_corpus(s.graph, {{&s, &f50}}, 20, 15, 5).samples.size() == 4);
  const auto f34 = simulate(s, 34);
  CHECK_THROWS_WITH_AS(make_corpus(s.graph, {{&s, &f34}}, 20, 15, 1), "horizon shorter than window",
                       ValidationError);

  Scenario inc = s;
  inc.id = 7;
  inc.incidents = {{2, 70, 5, 0.8}};
  const auto f = simulate(inc, 100);
  const auto c = make_corpus(inc.graph, {{&inc, &f}}, 20, 15, 5);
  REQUIRE(c.samples.size() == 14);
  for (const auto& smp : c.samples) {
    CHECK(smp.scenario == 7);
    const bool overlaps = static_cast<int>(smp.offset) + 35 > 70 && static_cast<int>(smp.offset) < 75;
    CHECK(smp.rare == overlaps);
    CHECK(smp.speed.size() == 35 * 4);
  }
}

TEST_CASE("corpus file and CSV export") {
  Scenario s;
  s.graph = RoadGraph::chain(3, 0.4, 2).with_lanes(2, 1);
  s.demand = {{2500.0}};
  s.incidents = {{1, 3, 2, 0.5}};
  s.seed = 9;
  const auto f = simulate(s, 40);
  auto c = make_corpus(s.graph, {{&s, &f}}, 20, 15, 2);
  c.seed = 9;
  c.config_hash = 0xabcdef;
  std::stringstream a;
  write_corpus(c, a);
  const auto loaded = read_corpus(a);
  CHECK(loaded.seed == 9);
  CHECK(loaded.config_hash == 0xabcdef);
  CHECK(loaded.graph == c.graph);
  REQUIRE(loaded.samples.size() == c.samples.size());
  CHECK(loaded.samples[1].speed == c.samples[1].speed);
  std::stringstream b;
  write_corpus(loaded, b);
  CHECK(a.str() == b.str());

  std::string bytes = a.str();
  bytes[4] = 9;
  std::istringstream bad(bytes);
  CHECK_THROWS_WITH_AS(read_corpus(bad, "x.evc"), doctest::Contains("version"), ValidationError);
  std::istringstream truncated(a.str().substr(0, a.str().size() - 3));
  CHECK_THROWS_AS(read_corpus(truncated), ValidationError);

  std::ostringstream csv;
  export_corpus_csv(c, csv);
  std::istringstream lines(csv.str());
  std::string line;
  std::getline(lines, line);
  CHECK(line == "sample_id,scenario,offset,rare,node_id,step,speed,flow");
  std::size_t rows = 0;
  while (std::getline(lines, line)) ++rows;
  CHECK(rows == c.samples.size() * 3 * 35);

  const auto merged = merge_corpora(c, c);
  CHECK(merged.samples.size() == 2 * c.samples.size());
  CHECK(merged.samples[c.samples.size()].id == c.samples.size());
}
