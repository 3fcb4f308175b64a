#include "evtraffic/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "evtraffic/binary_io.hpp"
#include "evtraffic/errors.hpp"

namespace evtraffic {

namespace {

constexpr char kMagic[4] = {'E', 'V', 'T', 'M'};

void write_config(io::BinaryWriter& w, const ModelConfig& c) {
  for (int v : {c.hidden_dim, c.degree_speed, c.degree_flow, c.encoder_steps, c.decoder_steps, c.key_dim,
                c.transform_dim, c.batch_size, c.epochs, c.steps}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  for (double v : {c.R_v, c.R_q, c.epsilon, c.flow_loss_weight, c.decay_c, c.input_total_var, c.regularizer_floor,
                   c.gain_nu, c.gain_alpha, c.gain_beta, c.learning_rate, c.grad_clip, c.init_alpha, c.init_std}) {
    w.f64(v);
  }
}

ModelConfig read_config(io::BinaryReader& r) {
  ModelConfig c;
  for (int* v : {&c.hidden_dim, &c.degree_speed, &c.degree_flow, &c.encoder_steps, &c.decoder_steps, &c.key_dim,
                 &c.transform_dim, &c.batch_size, &c.epochs, &c.steps}) {
    *v = static_cast<int>(r.u32());
  }
  for (double* v : {&c.R_v, &c.R_q, &c.epsilon, &c.flow_loss_weight, &c.decay_c, &c.input_total_var,
                    &c.regularizer_floor, &c.gain_nu, &c.gain_alpha, &c.gain_beta, &c.learning_rate, &c.grad_clip,
                    &c.init_alpha, &c.init_std}) {
    *v = r.f64();
  }
  return c;
}

void write_block(io::BinaryWriter& w, const std::string& name, const Tensor& t) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) w.u64(d);
  w.f32_block(t.storage());
}

}  // namespace

void write_checkpoint(const ModelCheckpoint& c, std::ostream& out) {
  io::BinaryWriter w(out);
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  write_config(w, c.config);
  w.u64(c.seed);
  w.u64(c.iteration);
  w.u64(c.config_hash());
  c.graph.write(w);
  w.u32(static_cast<std::uint32_t>(3 * c.params.size()));
  for (std::size_t i = 0; i < c.params.size(); ++i) write_block(w, c.params.names()[i], c.params.tensors()[i]);
  for (std::size_t i = 0; i < c.adam_m.size(); ++i) {
    write_block(w, "adam.m/" + c.adam_m.names()[i], c.adam_m.tensors()[i]);
  }
  for (std::size_t i = 0; i < c.adam_v.size(); ++i) {
    write_block(w, "adam.v/" + c.adam_v.names()[i], c.adam_v.tensors()[i]);
  }
  if (!out) throw ValidationError("failed writing checkpoint");
}

ModelCheckpoint read_checkpoint(std::istream& in, const std::string& source) {
  io::BinaryReader r(in, source);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw ValidationError(source + ": not a checkpoint file");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw ValidationError(source + ": unsupported checkpoint version " + std::to_string(version));
  }
  ModelCheckpoint c;
  c.config = read_config(r);
  c.config.validate();
  c.seed = r.u64();
  c.iteration = r.u64();
  const auto hash = r.u64();
  c.graph = RoadGraph::read(r);
  if (hash != c.config_hash()) throw ValidationError(source + ": config hash mismatch");

  const Model model(c.config, c.graph);
  const auto expected = model.parameter_shapes();
  const auto count = r.u32();
  if (count != 3 * expected.size()) {
    throw ValidationError(source + ": expected " + std::to_string(3 * expected.size()) + " parameter blocks, found " +
                          std::to_string(count));
  }
  for (const char* prefix : {"", "adam.m/", "adam.v/"}) {
    ParameterSet& dst = prefix[0] == '\0' ? c.params : (prefix[5] == 'm' ? c.adam_m : c.adam_v);
    for (const auto& [name, shape] : expected) {
      const std::string got = r.str();
      if (got != prefix + name) {
        throw ValidationError(source + ": expected block '" + prefix + name + "', found '" + got + "'");
      }
      const auto rank = r.u32();
      Shape s(rank);
      for (auto& d : s) d = r.u64();
      if (s != shape) {
        throw ValidationError(source + ": block '" + got + "' has shape " + shape_str(s) + ", expected " +
                              shape_str(shape));
      }
      dst.add(name, Tensor(shape, r.f32_block(shape_numel(shape))));
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) throw ValidationError(source + ": trailing bytes after checkpoint");
  return c;
}

void save_checkpoint(const ModelCheckpoint& c, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot open " + path.string() + " for writing");
  write_checkpoint(c, out);
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint " + path.string());
  return read_checkpoint(in, path.string());
}

}  // namespace evtraffic
