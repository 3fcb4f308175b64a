#pragma once

// Sliding-window samples cut from simulated fields, and the corpus file.
//
// Corpus file layout (little-endian):
//   "EVTC" u32 version
//   u32 nodes, u32 window_in, u32 window_out, f64 delta_t, f64 delta_x
//   u64 seed, u64 config_hash
//   graph record
//   u64 sample count, then per sample:
//     u64 id, u32 scenario, u32 offset, u8 rare,
//     f32 speed[window × nodes], f32 flow[window × nodes]   (time-major)

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "evtraffic/lwr.hpp"
#include "evtraffic/roadgraph.hpp"

namespace evtraffic {

struct Sample {
  std::uint64_t id = 0;
  std::uint32_t scenario = 0;
  std::uint32_t offset = 0;
  bool rare = false;  ///< window overlaps an incident; never shown to the model
  std::vector<double> speed;
  std::vector<double> flow;
};

struct Corpus {
  RoadGraph graph = RoadGraph::chain(1);
  int window_in = 20;
  int window_out = 15;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  std::vector<Sample> samples;

  int window() const { return window_in + window_out; }
  std::size_t nodes() const { return graph.num_nodes(); }
  /// Copy with only the listed samples, in the given order.
  Corpus subset(const std::vector<std::size_t>& indices) const;
};

struct SimulatedScenario {
  const Scenario* scenario = nullptr;
  const TrafficField* field = nullptr;
};

/// Window counts per field: floor((H − window) / stride) + 1. Values are
/// rounded to float so an in-memory corpus equals its reloaded copy.
Corpus make_corpus(const RoadGraph& g, const std::vector<SimulatedScenario>& runs, int window_in, int window_out,
                   int stride);

inline constexpr std::uint32_t kCorpusVersion = 1;

void write_corpus(const Corpus& c, std::ostream& out);
Corpus read_corpus(std::istream& in, const std::string& source = "<corpus>");
void save_corpus(const Corpus& c, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path);

/// One row per (sample, node, step):
/// sample_id,scenario,offset,rare,node_id,step,speed,flow
void export_corpus_csv(const Corpus& c, std::ostream& out);

/// Concatenate corpora over the same graph and windows. Ids of `b` are
/// shifted past the largest id in `a`.
Corpus merge_corpora(const Corpus& a, const Corpus& b);

}  // namespace evtraffic
