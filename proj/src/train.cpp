#include "evtraffic/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>

#include "evtraffic/errors.hpp"
#include "evtraffic/format.hpp"

namespace evtraffic {

namespace {

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

ParameterSet zeros_like(const ParameterSet& p) {
  ParameterSet z;
  for (std::size_t i = 0; i < p.size(); ++i) z.add(p.names()[i], Tensor(p.tensors()[i].shape()));
  return z;
}

}  // namespace

std::uint64_t ModelCheckpoint::config_hash() const {
  io::Fnv1a h;
  config.hash_into(h);
  graph.hash_into(h);
  h.value(seed);
  return h.digest();
}

ModelCheckpoint initial_checkpoint(const ModelConfig& cfg, const RoadGraph& graph, std::uint64_t seed) {
  const Model model(cfg, graph);
  ModelCheckpoint c;
  c.config = cfg;
  c.graph = graph;
  c.seed = seed;
  c.params = model.init_params(seed);
  c.adam_m = zeros_like(c.params);
  c.adam_v = zeros_like(c.params);
  return c;
}

void adam_step(ParameterSet& params, ParameterSet& m, ParameterSet& v, const std::vector<Tensor>& grads,
               std::uint64_t t, const AdamOptions& opt) {
  if (grads.size() != params.size()) throw ShapeError("gradient count does not match parameters");
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& w = params.tensors()[k].storage();
    auto& mk = m.tensors()[k].storage();
    auto& vk = v.tensors()[k].storage();
    const auto& g = grads[k].storage();
    if (g.size() != w.size()) throw ShapeError("gradient shape mismatch for " + params.names()[k]);
    for (std::size_t i = 0; i < w.size(); ++i) {
      mk[i] = to_f32(opt.beta1 * mk[i] + (1.0 - opt.beta1) * g[i]);
      vk[i] = to_f32(opt.beta2 * vk[i] + (1.0 - opt.beta2) * g[i] * g[i]);
      w[i] = to_f32(w[i] - opt.learning_rate * (mk[i] / c1) / (std::sqrt(vk[i] / c2) + opt.eps));
    }
  }
}

std::vector<std::vector<bool>> teacher_forcing_mask(std::uint64_t seed, std::uint64_t iteration, std::size_t batch,
                                                    int decoder_steps, double decay_c) {
  const double p = scheduled_sampling_prob(iteration, decay_c);
  auto rng = stream_rng(seed, 2, iteration);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::vector<bool>> mask(batch, std::vector<bool>(static_cast<std::size_t>(decoder_steps), true));
  for (auto& row : mask) {
    for (std::size_t s = 1; s < row.size(); ++s) row[s] = u(rng) < p;
  }
  return mask;
}

TrainLog train(const Corpus& data, ModelCheckpoint& ckpt, const std::function<void(const IterationRecord&)>& on_iteration) {
  const ModelConfig& cfg = ckpt.config;
  if (data.samples.empty()) throw ValidationError("training corpus is empty");
  if (!(data.graph == ckpt.graph)) throw ValidationError("corpus graph does not match the model graph");
  if (data.window_in != cfg.encoder_steps || data.window_out != cfg.decoder_steps) {
    throw ValidationError("corpus windows do not match encoder_steps/decoder_steps");
  }
  const Model model(cfg, ckpt.graph);
  const std::size_t n = data.samples.size();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const std::uint64_t per_epoch = (n + bs - 1) / bs;
  const std::uint64_t todo = cfg.steps > 0 ? static_cast<std::uint64_t>(cfg.steps)
                                           : static_cast<std::uint64_t>(cfg.epochs) * per_epoch;
  const AdamOptions adam{cfg.learning_rate};

  TrainLog log;
  std::vector<std::size_t> order;
  std::uint64_t order_epoch = ~std::uint64_t{0};
  double epoch_sum = 0.0;
  std::size_t epoch_count = 0;
  for (std::uint64_t r = 0; r < todo; ++r) {
    const std::uint64_t it = ckpt.iteration;
    const std::uint64_t epoch = it / per_epoch;
    const std::uint64_t b = it % per_epoch;
    if (epoch != order_epoch) {
      order.resize(n);
      std::iota(order.begin(), order.end(), std::size_t{0});
      auto rng = stream_rng(ckpt.seed, 1, epoch);
      std::shuffle(order.begin(), order.end(), rng);
      order_epoch = epoch;
    }
    const std::size_t lo = static_cast<std::size_t>(b) * bs;
    const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                       order.begin() + static_cast<std::ptrdiff_t>(std::min(n, lo + bs)));
    const Batch batch = make_batch(data, idx);
    const double p = scheduled_sampling_prob(it, cfg.decay_c);
    const auto tf = teacher_forcing_mask(ckpt.seed, it, idx.size(), cfg.decoder_steps, cfg.decay_c);

    ad::Tape tape;
    const BoundParams bound(tape, ckpt.params, true);
    const auto res = model.rollout(tape, bound, batch, tf);
    const double loss = res.loss.value().item();
    if (!std::isfinite(loss)) {
      throw NumericalError("non-finite training loss at batch " + std::to_string(b) + " of epoch " +
                           std::to_string(epoch) + " (iteration " + std::to_string(it) + ")");
    }
    tape.backward(res.loss);
    std::vector<Tensor> grads;
    grads.reserve(bound.vars().size());
    double norm2 = 0.0;
    for (const auto& v : bound.vars()) {
      grads.push_back(tape.grad(v));
      for (double g : grads.back().storage()) norm2 += g * g;
    }
    if (!std::isfinite(norm2)) {
      throw NumericalError("non-finite gradient at batch " + std::to_string(b) + " of epoch " +
                           std::to_string(epoch) + " (iteration " + std::to_string(it) + ")");
    }
    if (cfg.grad_clip > 0.0 && std::sqrt(norm2) > cfg.grad_clip) {
      const double s = cfg.grad_clip / std::sqrt(norm2);
      for (auto& g : grads) {
        for (auto& x : g.storage()) x *= s;
      }
    }
    adam_step(ckpt.params, ckpt.adam_m, ckpt.adam_v, grads, it + 1, adam);
    ckpt.iteration = it + 1;

    const IterationRecord rec{it, epoch, b, p, loss};
    log.iterations.push_back(rec);
    if (on_iteration) on_iteration(rec);
    epoch_sum += loss;
    ++epoch_count;
    if (b + 1 == per_epoch || r + 1 == todo) {
      log.epochs.push_back({epoch, it, p, epoch_sum / static_cast<double>(epoch_count)});
      epoch_sum = 0.0;
      epoch_count = 0;
    }
  }
  return log;
}

void write_train_log(const TrainLog& log, std::ostream& out) {
  out << "epoch,iteration,p,loss\n";
  for (const auto& e : log.epochs) {
    out << e.epoch << ',' << e.iteration << ',' << fmt_real(e.p) << ',' << fmt_real(e.loss) << '\n';
  }
}

}  // namespace evtraffic
