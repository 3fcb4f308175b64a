#pragma once

// Training state, Adam, and the scheduled-sampling training loop.

#include <cstdint>
#include <functional>
#include <vector>

#include "evtraffic/corpus.hpp"
#include "evtraffic/model.hpp"

namespace evtraffic {

/// Everything needed to resume training or run inference. Parameters and
/// Adam moments are kept at float precision so the checkpoint file holds
/// them exactly.
struct ModelCheckpoint {
  ModelConfig config;
  RoadGraph graph = RoadGraph::chain(1);
  std::uint64_t seed = 0;
  std::uint64_t iteration = 0;  ///< completed optimiser steps
  ParameterSet params;
  ParameterSet adam_m;
  ParameterSet adam_v;

  std::uint64_t config_hash() const;
};

ModelCheckpoint initial_checkpoint(const ModelConfig& cfg, const RoadGraph& graph, std::uint64_t seed);

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One Adam update with bias correction at step `t` (1-based).
void adam_step(ParameterSet& params, ParameterSet& m, ParameterSet& v, const std::vector<Tensor>& grads,
               std::uint64_t t, const AdamOptions& opt);

struct IterationRecord {
  std::uint64_t iteration = 0;
  std::uint64_t epoch = 0;
  std::uint64_t batch = 0;
  double p = 1.0;  ///< teacher-forcing probability used
  double loss = 0.0;
};

struct EpochRecord {
  std::uint64_t epoch = 0;
  std::uint64_t iteration = 0;  ///< last iteration of the epoch
  double p = 1.0;               ///< teacher-forcing probability at that iteration
  double loss = 0.0;            ///< mean batch loss
};

struct TrainLog {
  std::vector<IterationRecord> iterations;
  std::vector<EpochRecord> epochs;
};

/// Teacher-forcing decisions for a batch at `iteration`: entry [b][s] is true
/// with probability exp(−c·iteration); column 0 is always true.
std::vector<std::vector<bool>> teacher_forcing_mask(std::uint64_t seed, std::uint64_t iteration, std::size_t batch,
                                                    int decoder_steps, double decay_c);

/// Continue training `ckpt` on `data` for cfg.steps iterations (or cfg.epochs
/// epochs). Throws NumericalError naming the batch when the loss is not finite.
TrainLog train(const Corpus& data, ModelCheckpoint& ckpt,
               const std::function<void(const IterationRecord&)>& on_iteration = {});

void write_train_log(const TrainLog& log, std::ostream& out);

}  // namespace evtraffic
