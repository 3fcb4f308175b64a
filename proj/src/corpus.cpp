#include "evtraffic/corpus.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <ostream>

#include "evtraffic/binary_io.hpp"
#include "evtraffic/errors.hpp"
#include "evtraffic/format.hpp"

namespace evtraffic {

namespace {

constexpr char kMagic[4] = {'E', 'V', 'T', 'C'};

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

Corpus Corpus::subset(const std::vector<std::size_t>& indices) const {
  Corpus c = *this;
  c.samples.clear();
  c.samples.reserve(indices.size());
  for (auto i : indices) c.samples.push_back(samples.at(i));
  return c;
}

Corpus make_corpus(const RoadGraph& g, const std::vector<SimulatedScenario>& runs, int window_in, int window_out,
                   int stride) {
  if (window_in < 1 || window_out < 1) throw ValidationError("window sizes must be positive");
  if (stride < 1) throw ValidationError("stride must be positive");
  const int window = window_in + window_out;
  const std::size_t n = g.num_nodes();
  Corpus c;
  c.graph = g;
  c.window_in = window_in;
  c.window_out = window_out;
  for (const auto& run : runs) {
    const auto& f = *run.field;
    if (f.nodes != n) throw ValidationError("simulated field does not match the corpus graph");
    if (static_cast<int>(f.steps) < window) throw ValidationError("horizon shorter than window");
    for (int off = 0; off + window <= static_cast<int>(f.steps); off += stride) {
      Sample s;
      s.id = c.samples.size();
      s.scenario = run.scenario->id;
      s.offset = static_cast<std::uint32_t>(off);
      for (const auto& inc : run.scenario->incidents) {
        if (inc.start < off + window && off < inc.start + inc.duration) s.rare = true;
      }
      const auto begin = static_cast<std::size_t>(off) * n;
      const auto end = begin + static_cast<std::size_t>(window) * n;
      s.speed.assign(f.speed.begin() + begin, f.speed.begin() + end);
      s.flow.assign(f.flow.begin() + begin, f.flow.begin() + end);
      for (auto& v : s.speed) v = to_f32(v);
      for (auto& v : s.flow) v = to_f32(v);
      c.samples.push_back(std::move(s));
    }
  }
  return c;
}

void write_corpus(const Corpus& c, std::ostream& out) {
  io::BinaryWriter w(out);
  w.bytes(kMagic, 4);
  w.u32(kCorpusVersion);
  w.u32(static_cast<std::uint32_t>(c.nodes()));
  w.u32(static_cast<std::uint32_t>(c.window_in));
  w.u32(static_cast<std::uint32_t>(c.window_out));
  w.f64(c.graph.delta_t());
  w.f64(c.graph.delta_x());
  w.u64(c.seed);
  w.u64(c.config_hash);
  c.graph.write(w);
  w.u64(c.samples.size());
  const std::size_t block = static_cast<std::size_t>(c.window()) * c.nodes();
  for (const auto& s : c.samples) {
    if (s.speed.size() != block || s.flow.size() != block) throw ShapeError("sample block size mismatch");
    w.u64(s.id);
    w.u32(s.scenario);
    w.u32(s.offset);
    w.u8(s.rare ? 1 : 0);
    w.f32_block(s.speed);
    w.f32_block(s.flow);
  }
  if (!out) throw ValidationError("failed writing corpus");
}

Corpus read_corpus(std::istream& in, const std::string& source) {
  io::BinaryReader r(in, source);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw ValidationError(source + ": not a corpus file");
  const auto version = r.u32();
  if (version != kCorpusVersion) {
    throw ValidationError(source + ": unsupported corpus version " + std::to_string(version));
  }
  Corpus c;
  const auto nodes = r.u32();
  c.window_in = static_cast<int>(r.u32());
  c.window_out = static_cast<int>(r.u32());
  const double dt = r.f64();
  const double dx = r.f64();
  c.seed = r.u64();
  c.config_hash = r.u64();
  c.graph = RoadGraph::read(r);
  if (c.graph.num_nodes() != nodes || c.graph.delta_t() != dt || c.graph.delta_x() != dx) {
    throw ValidationError(source + ": header disagrees with embedded graph");
  }
  if (c.window_in < 1 || c.window_out < 1) throw ValidationError(source + ": invalid window sizes");
  const auto count = r.u64();
  const std::size_t block = static_cast<std::size_t>(c.window()) * nodes;
  c.samples.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    Sample s;
    s.id = r.u64();
    s.scenario = r.u32();
    s.offset = r.u32();
    s.rare = r.u8() != 0;
    s.speed = r.f32_block(block);
    s.flow = r.f32_block(block);
    c.samples.push_back(std::move(s));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw ValidationError(source + ": trailing bytes after corpus");
  return c;
}

void save_corpus(const Corpus& c, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot open " + path.string() + " for writing");
  write_corpus(c, out);
}

Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open corpus " + path.string());
  return read_corpus(in, path.string());
}

void export_corpus_csv(const Corpus& c, std::ostream& out) {
  out << "sample_id,scenario,offset,rare,node_id,step,speed,flow\n";
  const std::size_t n = c.nodes();
  for (const auto& s : c.samples) {
    for (std::size_t i = 0; i < n; ++i) {
      for (int t = 0; t < c.window(); ++t) {
        const std::size_t at = static_cast<std::size_t>(t) * n + i;
        out << s.id << ',' << s.scenario << ',' << s.offset << ',' << (s.rare ? 1 : 0) << ','
            << c.graph.nodes()[i].id << ',' << t << ',' << fmt_real(s.speed[at]) << ',' << fmt_real(s.flow[at])
            << '\n';
      }
    }
  }
}

Corpus merge_corpora(const Corpus& a, const Corpus& b) {
  if (!(a.graph == b.graph)) throw ValidationError("cannot merge corpora over different graphs");
  if (a.window_in != b.window_in || a.window_out != b.window_out) {
    throw ValidationError("cannot merge corpora with different windows");
  }
  Corpus c = a;
  std::uint64_t next = 0;
  for (const auto& s : a.samples) next = std::max(next, s.id + 1);
  for (auto s : b.samples) {
    s.id += next;
    c.samples.push_back(std::move(s));
  }
  return c;
}

}  // namespace evtraffic
