#pragma once

// Directed road network on a uniform grid, k-hop neighbourhoods, and the
// receptive-field degree rule that ties cell length, sampling interval and
// wave speed together.

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "evtraffic/binary_io.hpp"

namespace evtraffic {

struct Segment {
  std::string id;
  double length_km = 0.4;
  int lanes = 1;
};

struct Edge {
  std::size_t from = 0;  ///< upstream segment
  std::size_t to = 0;    ///< downstream segment
};

class RoadGraph {
 public:
  /// Validates: uniform lengths, lanes ≥ 1, no self-loops or duplicate edges,
  /// weak connectivity. Throws ValidationError on the first violation.
  RoadGraph(std::vector<Segment> nodes, std::vector<Edge> edges, double delta_t_min = 2.0);

  static RoadGraph chain(std::size_t n, double delta_x_km = 0.4, int lanes = 3, double delta_t_min = 2.0);
  static RoadGraph ring(std::size_t n, double delta_x_km = 0.4, int lanes = 3, double delta_t_min = 2.0);

  std::size_t num_nodes() const { return nodes_.size(); }
  const std::vector<Segment>& nodes() const { return nodes_; }
  const std::vector<Edge>& edges() const { return edges_; }
  double delta_x() const { return delta_x_; }
  double delta_t() const { return delta_t_; }
  const std::vector<std::size_t>& successors(std::size_t i) const { return succ_[i]; }
  const std::vector<std::size_t>& predecessors(std::size_t i) const { return pred_[i]; }
  /// Index of the segment with this id, or throws.
  std::size_t index_of(const std::string& id) const;

  /// Same segments with every edge reversed.
  RoadGraph reversed() const;
  /// Copy with a different lane count on one segment.
  RoadGraph with_lanes(std::size_t node, int lanes) const;

  void write(io::BinaryWriter& w) const;
  static RoadGraph read(io::BinaryReader& r);
  void hash_into(io::Fnv1a& h) const;

  bool operator==(const RoadGraph& other) const;

 private:
  std::vector<Segment> nodes_;
  std::vector<Edge> edges_;
  std::vector<std::vector<std::size_t>> succ_;
  std::vector<std::vector<std::size_t>> pred_;
  double delta_x_ = 0.0;
  double delta_t_ = 2.0;
};

/// Parse the text graph format:
///
///     [grid]
///     delta_t_min = 2
///     [nodes]
///     id,length_km,lanes
///     s0,0.4,3
///     [edges]
///     from_id,to_id
///     s0,s1
///
/// `#` starts a comment. Errors name `source` and the offending line.
RoadGraph parse_graph(std::istream& in, const std::string& source = "<graph>");
RoadGraph load_graph(const std::filesystem::path& path);
void save_graph(const RoadGraph& g, std::ostream& out);

/// Hop distances within `degree` directed hops, kept separately for the two
/// directions. Entry (i, j) of `downstream` is the length of the shortest
/// path i → j, of `upstream` the shortest path j → i; −1 when farther than
/// `degree` or unreachable. The diagonal is 0 in both.
struct NeighborhoodMask {
  int degree = 1;
  std::size_t n = 0;
  std::vector<int> upstream;
  std::vector<int> downstream;

  int up(std::size_t i, std::size_t j) const { return upstream[i * n + j]; }
  int down(std::size_t i, std::size_t j) const { return downstream[i * n + j]; }
  bool reaches_upstream(std::size_t i, std::size_t j) const { return up(i, j) >= 0; }
  bool reaches_downstream(std::size_t i, std::size_t j) const { return down(i, j) >= 0; }
  bool reachable(std::size_t i, std::size_t j) const { return up(i, j) >= 0 || down(i, j) >= 0; }
};

NeighborhoodMask adjacency_power(const RoadGraph& g, int degree);

struct DegreeOptions {
  /// Accept k·Δx == wave_speed·Δt at the lower edge of the window.
  bool closed_lower_bound = false;
};

/// Smallest k with wave_speed·Δt < k·Δx < 2·wave_speed·Δt (wave speed in
/// km/min, Δt in minutes, Δx in km).
int select_degree(double wave_speed_km_per_min, const RoadGraph& g, DegreeOptions opt = {});
int select_degree(double wave_speed_km_per_min, double delta_t_min, double delta_x_km, DegreeOptions opt = {});

}  // namespace evtraffic
