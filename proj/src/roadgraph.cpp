#include "evtraffic/roadgraph.hpp"

#include <cmath>
#include <deque>
#include <fstream>
#include <map>
#include <sstream>

#include "evtraffic/errors.hpp"

namespace evtraffic {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  return out;
}

}  // namespace

RoadGraph::RoadGraph(std::vector<Segment> nodes, std::vector<Edge> edges, double delta_t_min)
    : nodes_(std::move(nodes)), edges_(std::move(edges)), delta_t_(delta_t_min) {
  if (nodes_.empty()) throw ValidationError("road graph has no segments");
  if (!(delta_t_ > 0.0)) throw ValidationError("sampling interval delta_t must be positive");
  delta_x_ = nodes_.front().length_km;
  if (!(delta_x_ > 0.0)) throw ValidationError("segment '" + nodes_.front().id + "' has non-positive length");
  std::map<std::string, std::size_t> seen;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto& s = nodes_[i];
    if (!seen.emplace(s.id, i).second) throw ValidationError("duplicate segment id '" + s.id + "'");
    if (std::abs(s.length_km - delta_x_) > 1e-9 * delta_x_) {
      throw ValidationError("segment '" + s.id + "' has length " + std::to_string(s.length_km) +
                            " km; all segments must share the grid length " + std::to_string(delta_x_) + " km");
    }
    if (s.lanes < 1) throw ValidationError("segment '" + s.id + "' must have at least one lane");
  }
  succ_.assign(nodes_.size(), {});
  pred_.assign(nodes_.size(), {});
  for (const auto& e : edges_) {
    if (e.from >= nodes_.size() || e.to >= nodes_.size()) throw ValidationError("edge references unknown segment");
    if (e.from == e.to) throw ValidationError("self-loop on segment '" + nodes_[e.from].id + "'");
    for (auto s : succ_[e.from]) {
      if (s == e.to) {
        throw ValidationError("duplicate edge " + nodes_[e.from].id + " -> " + nodes_[e.to].id);
      }
    }
    succ_[e.from].push_back(e.to);
    pred_[e.to].push_back(e.from);
  }
  // Weak connectivity.
  std::vector<bool> visited(nodes_.size(), false);
  std::deque<std::size_t> queue{0};
  visited[0] = true;
  std::size_t count = 1;
  while (!queue.empty()) {
    const auto u = queue.front();
    queue.pop_front();
    for (const auto* adj : {&succ_[u], &pred_[u]}) {
      for (auto v : *adj) {
        if (!visited[v]) {
          visited[v] = true;
          ++count;
          queue.push_back(v);
        }
      }
    }
  }
  if (count != nodes_.size()) throw ValidationError("road graph is not weakly connected");
}

RoadGraph RoadGraph::chain(std::size_t n, double delta_x_km, int lanes, double delta_t_min) {
  std::vector<Segment> nodes;
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < n; ++i) {
    nodes.push_back({"s" + std::to_string(i), delta_x_km, lanes});
    if (i > 0) edges.push_back({i - 1, i});
  }
  return RoadGraph(std::move(nodes), std::move(edges), delta_t_min);
}

RoadGraph RoadGraph::ring(std::size_t n, double delta_x_km, int lanes, double delta_t_min) {
  if (n < 2) throw ValidationError("a ring needs at least two segments");
  std::vector<Segment> nodes;
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < n; ++i) {
    nodes.push_back({"s" + std::to_string(i), delta_x_km, lanes});
    edges.push_back({i, (i + 1) % n});
  }
  return RoadGraph(std::move(nodes), std::move(edges), delta_t_min);
}

std::size_t RoadGraph::index_of(const std::string& id) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].id == id) return i;
  }
  throw ValidationError("unknown segment id '" + id + "'");
}

RoadGraph RoadGraph::reversed() const {
  std::vector<Edge> rev;
  for (const auto& e : edges_) rev.push_back({e.to, e.from});
  return RoadGraph(nodes_, std::move(rev), delta_t_);
}

RoadGraph RoadGraph::with_lanes(std::size_t node, int lanes) const {
  auto nodes = nodes_;
  nodes.at(node).lanes = lanes;
  return RoadGraph(std::move(nodes), edges_, delta_t_);
}

void RoadGraph::write(io::BinaryWriter& w) const {
  w.f64(delta_t_);
  w.u32(static_cast<std::uint32_t>(nodes_.size()));
  for (const auto& s : nodes_) {
    w.str(s.id);
    w.f64(s.length_km);
    w.u32(static_cast<std::uint32_t>(s.lanes));
  }
  w.u32(static_cast<std::uint32_t>(edges_.size()));
  for (const auto& e : edges_) {
    w.u32(static_cast<std::uint32_t>(e.from));
    w.u32(static_cast<std::uint32_t>(e.to));
  }
}

RoadGraph RoadGraph::read(io::BinaryReader& r) {
  const double dt = r.f64();
  const auto n = r.u32();
  std::vector<Segment> nodes(n);
  for (auto& s : nodes) {
    s.id = r.str();
    s.length_km = r.f64();
    s.lanes = static_cast<int>(r.u32());
  }
  const auto m = r.u32();
  std::vector<Edge> edges(m);
  for (auto& e : edges) {
    e.from = r.u32();
    e.to = r.u32();
  }
  return RoadGraph(std::move(nodes), std::move(edges), dt);
}

void RoadGraph::hash_into(io::Fnv1a& h) const {
  h.value(delta_t_);
  for (const auto& s : nodes_) {
    h.update(s.id);
    h.value(s.length_km);
    h.value(s.lanes);
  }
  for (const auto& e : edges_) {
    h.value(e.from);
    h.value(e.to);
  }
}

bool RoadGraph::operator==(const RoadGraph& other) const {
  if (nodes_.size() != other.nodes_.size() || edges_.size() != other.edges_.size()) return false;
  if (delta_t_ != other.delta_t_) return false;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto &a = nodes_[i], &b = other.nodes_[i];
    if (a.id != b.id || a.length_km != b.length_km || a.lanes != b.lanes) return false;
  }
  for (std::size_t i = 0; i < edges_.size(); ++i) {
    if (edges_[i].from != other.edges_[i].from || edges_[i].to != other.edges_[i].to) return false;
  }
  return true;
}

RoadGraph parse_graph(std::istream& in, const std::string& source) {
  enum class Section { none, grid, nodes, edges } section = Section::none;
  bool nodes_header = false, edges_header = false;
  std::vector<Segment> nodes;
  std::vector<std::pair<std::string, std::string>> edge_pairs;
  std::map<std::string, std::size_t> index;
  double dt = 2.0;
  std::string raw;
  int line_no = 0;
  auto fail = [&](const std::string& msg) -> ValidationError {
    return ValidationError(source + ":" + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = raw.substr(0, raw.find('#'));
    line = trim(line);
    if (line.empty()) continue;
    if (line == "[grid]") {
      section = Section::grid;
      continue;
    }
    if (line == "[nodes]") {
      section = Section::nodes;
      continue;
    }
    if (line == "[edges]") {
      section = Section::edges;
      continue;
    }
    switch (section) {
      case Section::none:
        throw fail("content outside of a [grid], [nodes] or [edges] section");
      case Section::grid: {
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw fail("expected key = value");
        const auto key = trim(line.substr(0, eq));
        const auto val = trim(line.substr(eq + 1));
        if (key != "delta_t_min") throw fail("unknown grid key '" + key + "'");
        try {
          dt = std::stod(val);
        } catch (const std::exception&) {
          throw fail("delta_t_min is not a number");
        }
        if (!(dt > 0.0)) throw fail("delta_t_min must be positive");
        break;
      }
      case Section::nodes: {
        const auto cells = split_csv(line);
        if (!nodes_header) {
          if (cells != std::vector<std::string>{"id", "length_km", "lanes"}) {
            throw fail("nodes table header must be 'id,length_km,lanes'");
          }
          nodes_header = true;
          break;
        }
        if (cells.size() != 3) throw fail("node row needs 3 columns");
        Segment s;
        s.id = cells[0];
        if (s.id.empty()) throw fail("empty segment id");
        try {
          s.length_km = std::stod(cells[1]);
          s.lanes = std::stoi(cells[2]);
        } catch (const std::exception&) {
          throw fail("malformed number in node row");
        }
        if (!(s.length_km > 0.0)) throw fail("segment length must be positive");
        if (s.lanes < 1) throw fail("segment must have at least one lane");
        if (!nodes.empty() && std::abs(s.length_km - nodes.front().length_km) > 1e-9 * nodes.front().length_km) {
          throw fail("segment '" + s.id + "' length differs from the uniform grid length");
        }
        if (!index.emplace(s.id, nodes.size()).second) throw fail("duplicate segment id '" + s.id + "'");
        nodes.push_back(s);
        break;
      }
      case Section::edges: {
        const auto cells = split_csv(line);
        if (!edges_header) {
          if (cells != std::vector<std::string>{"from_id", "to_id"}) {
            throw fail("edges table header must be 'from_id,to_id'");
          }
          edges_header = true;
          break;
        }
        if (cells.size() != 2) throw fail("edge row needs 2 columns");
        if (!index.count(cells[0])) throw fail("edge references unknown segment '" + cells[0] + "'");
        if (!index.count(cells[1])) throw fail("edge references unknown segment '" + cells[1] + "'");
        if (cells[0] == cells[1]) throw fail("self-loop on segment '" + cells[0] + "'");
        edge_pairs.emplace_back(cells[0], cells[1]);
        break;
      }
    }
  }
  std::vector<Edge> edges;
  for (const auto& [f, t] : edge_pairs) edges.push_back({index[f], index[t]});
  try {
    return RoadGraph(std::move(nodes), std::move(edges), dt);
  } catch (const ValidationError& e) {
    throw ValidationError(source + ": " + e.what());
  }
}

RoadGraph load_graph(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open graph file " + path.string());
  return parse_graph(in, path.string());
}

void save_graph(const RoadGraph& g, std::ostream& out) {
  out << "[grid]\ndelta_t_min = " << g.delta_t() << "\n[nodes]\nid,length_km,lanes\n";
  for (const auto& s : g.nodes()) out << s.id << ',' << s.length_km << ',' << s.lanes << '\n';
  out << "[edges]\nfrom_id,to_id\n";
  for (const auto& e : g.edges()) out << g.nodes()[e.from].id << ',' << g.nodes()[e.to].id << '\n';
}

NeighborhoodMask adjacency_power(const RoadGraph& g, int degree) {
  if (degree < 1) throw ValidationError("adjacency degree must be >= 1, got " + std::to_string(degree));
  const std::size_t n = g.num_nodes();
  NeighborhoodMask mask;
  mask.degree = degree;
  mask.n = n;
  mask.upstream.assign(n * n, -1);
  mask.downstream.assign(n * n, -1);
  // Bounded BFS from every node in both directions.
  auto bfs = [&](std::size_t src, bool forward, std::vector<int>& out) {
    std::vector<int> dist(n, -1);
    std::deque<std::size_t> queue{src};
    dist[src] = 0;
    while (!queue.empty()) {
      const auto u = queue.front();
      queue.pop_front();
      if (dist[u] == degree) continue;
      for (auto v : forward ? g.successors(u) : g.predecessors(u)) {
        if (dist[v] < 0) {
          dist[v] = dist[u] + 1;
          queue.push_back(v);
        }
      }
    }
    for (std::size_t j = 0; j < n; ++j) out[src * n + j] = dist[j];
  };
  for (std::size_t i = 0; i < n; ++i) {
    bfs(i, true, mask.downstream);
    bfs(i, false, mask.upstream);
  }
  return mask;
}

int select_degree(double wave_speed, double delta_t, double delta_x, DegreeOptions opt) {
  if (!(wave_speed > 0.0)) throw ValidationError("wave speed must be positive");
  if (!(delta_t > 0.0) || !(delta_x > 0.0)) throw ValidationError("grid steps must be positive");
  const double lower = wave_speed * delta_t;  // CFL distance per interval
  const double upper = 2.0 * lower;
  const double ratio = lower / delta_x;
  constexpr double kTol = 1e-9;
  const double k = opt.closed_lower_bound ? std::ceil(ratio - kTol) : std::floor(ratio + kTol) + 1.0;
  const double kk = std::max(k, 1.0);
  if (!(kk * delta_x < upper * (1.0 - kTol))) {
    std::ostringstream msg;
    msg << "no adjacency degree fits the window (" << lower << ", " << upper << ") km with cell length " << delta_x
        << " km; shorten delta_x or lengthen delta_t";
    throw ValidationError(msg.str());
  }
  return static_cast<int>(kk);
}

int select_degree(double wave_speed, const RoadGraph& g, DegreeOptions opt) {
  return select_degree(wave_speed, g.delta_t(), g.delta_x(), opt);
}

}  // namespace evtraffic
