#pragma once

// Uncertainty-aware graph recurrent forecaster.
//
// One recurrent cell maps the step input X = [M_v, M_q, V, A, B] per node and
// the hidden state H to the next step:
//   * a dynamic graph convolution produces M_v', M_q' as a softmax-weighted
//     sum of a node-wise transform f(X_j) over each node's upstream and
//     downstream neighbourhood, plus a bounded node-wise fluctuation r,
//   * a GRU whose dense transforms are static graph convolutions yields H',
//   * a linear head on H' yields the raw NIG parameters (V', A', B').
// All tensors carry a leading batch axis: [batch, nodes, features].

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "evtraffic/autodiff.hpp"
#include "evtraffic/corpus.hpp"
#include "evtraffic/evidential.hpp"
#include "evtraffic/roadgraph.hpp"

namespace evtraffic {

struct ModelConfig {
  int hidden_dim = 64;
  int degree_speed = 2;
  int degree_flow = 11;
  double R_v = 130.0;
  double R_q = 1800.0;
  int encoder_steps = 20;
  int decoder_steps = 15;
  double epsilon = 0.01;
  double flow_loss_weight = 1.0;
  double decay_c = 1.25e-4;

  int key_dim = 8;
  int transform_dim = 16;
  /// Total variance of the NIG attached to observed inputs.
  double input_total_var = 0.4;
  /// Lower clip on the regularizer bracket; NaN disables clipping.
  double regularizer_floor = -1.0;
  /// Raw head outputs are multiplied by these before the positivity transform.
  double gain_nu = 1.0;
  double gain_alpha = 1.0;
  double gain_beta = 16.0;
  /// Initial predicted NIG via the head bias: α and total std (km/h) at ν = 1.
  /// A non-positive init_alpha leaves the bias at zero.
  double init_alpha = 0.0;
  double init_std = 10.0;

  double learning_rate = 1e-3;
  int batch_size = 16;
  int epochs = 50;
  /// When positive, train for exactly this many iterations instead of `epochs`.
  int steps = 0;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 5.0;

  void validate() const;
  void hash_into(io::Fnv1a& h) const;
};

inline constexpr double kSpeedScale = 130.0;
inline constexpr double kFlowScale = 1800.0;
inline constexpr int kInputFeatures = 5;

/// Ordered named parameter tensors.
class ParameterSet {
 public:
  void add(std::string name, Tensor value);
  Tensor& operator[](const std::string& name);
  const Tensor& operator[](const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor>& tensors() { return values_; }
  const std::vector<Tensor>& tensors() const { return values_; }
  std::size_t numel() const;
  bool operator==(const ParameterSet& o) const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::map<std::string, std::size_t> index_;
};

/// Parameters recorded on a tape, addressed by name.
class BoundParams {
 public:
  BoundParams(ad::Tape& tape, const ParameterSet& params, bool trainable);
  /// Bind already-recorded vars, one per name.
  BoundParams(const std::vector<std::string>& names, std::vector<ad::Var> vars);
  const ad::Var& operator[](const std::string& name) const;
  const std::vector<ad::Var>& vars() const { return vars_; }

 private:
  std::vector<ad::Var> vars_;
  std::map<std::string, std::size_t> index_;
};

struct DgcResult {
  ad::Var m_v;  ///< [B, N]
  ad::Var m_q;  ///< [B, N]
  ad::Var w_v;  ///< [B, N, N], row i holds W(j → i)
  ad::Var w_q;
  ad::Var r_v;  ///< [B, N]
  ad::Var r_q;
  ad::Var conv_v;  ///< Σ_j W f(X_j) before adding r
  ad::Var conv_q;
};

struct StepOutput {
  ad::Var m_v;  ///< [B, N]
  ad::Var m_q;  ///< [B, N]
  ad::Var raw;  ///< [B, N, 3] head output before gains
  evidential::NigVars nig;  ///< speed NIG per node, each [B, N]
  ad::Var hidden;  ///< [B, N, H]
};

/// Observations for a batch: speed and flow [B, T, N] with T = encoder + decoder steps.
struct Batch {
  std::size_t size = 0;
  std::size_t steps = 0;
  std::size_t nodes = 0;
  Tensor speed;
  Tensor flow;
};

Batch make_batch(const Corpus& corpus, const std::vector<std::size_t>& indices);

struct RolloutResult {
  std::vector<StepOutput> steps;
  ad::Var loss;  ///< scalar mean training loss
};

class Model {
 public:
  Model(ModelConfig cfg, RoadGraph graph);

  const ModelConfig& config() const { return cfg_; }
  const RoadGraph& graph() const { return graph_; }
  const NeighborhoodMask& speed_mask() const { return mask_v_; }
  const NeighborhoodMask& flow_mask() const { return mask_q_; }

  ParameterSet init_params(std::uint64_t seed) const;
  /// Expected shape of every parameter, in canonical order.
  std::vector<std::pair<std::string, Shape>> parameter_shapes() const;

  /// Input features [B, N, 5] from observed speed/flow [B, N] with the fixed
  /// observation uncertainty.
  ad::Var observed_input(ad::Tape& tape, const Tensor& speed, const Tensor& flow) const;

  DgcResult dgc_forward(const BoundParams& p, const ad::Var& input, const ad::Var& hidden,
                        const NeighborhoodMask& speed_mask, const NeighborhoodMask& flow_mask) const;
  DgcResult dgc_forward(const BoundParams& p, const ad::Var& input, const ad::Var& hidden) const {
    return dgc_forward(p, input, hidden, mask_v_, mask_q_);
  }
  struct GruGates {
    ad::Var update;
    ad::Var reset;
    ad::Var candidate;
    ad::Var next;  ///< H' = u⊙c + (1 − u)⊙H
  };
  GruGates gcgru_gates(const BoundParams& p, const ad::Var& input, const ad::Var& hidden) const;
  ad::Var gcgru_step(const BoundParams& p, const ad::Var& input, const ad::Var& hidden) const {
    return gcgru_gates(p, input, hidden).next;
  }
  /// Raw (V, A, B) per node, [B, N, 3], before gains.
  ad::Var uncertainty_head(const BoundParams& p, const ad::Var& hidden) const;
  /// Apply gains and the positivity transform.
  evidential::NigVars nig_from_head(const ad::Var& m_v, const ad::Var& raw) const;

  StepOutput step(const BoundParams& p, const ad::Var& input, const ad::Var& hidden) const;

  /// Encode the first `encoder_steps` observations, then unroll the decoder.
  /// teacher_forcing[b][s] selects ground truth as the input of decoder step s
  /// (s ≥ 1; step 0 always starts from the last observation).
  RolloutResult rollout(ad::Tape& tape, const BoundParams& p, const Batch& batch,
                        const std::vector<std::vector<bool>>& teacher_forcing) const;

  /// Raw input value fed for observed steps: (V, A, B) before gains.
  const std::array<double, 3>& observed_raw() const { return observed_raw_; }

 private:
  ad::Var static_conv(const ad::Var& z, const Tensor& a_up, const Tensor& a_dn) const;

  ModelConfig cfg_;
  RoadGraph graph_;
  NeighborhoodMask mask_v_;
  NeighborhoodMask mask_q_;
  std::array<double, 3> observed_raw_{};

  struct MaskTensors {
    Tensor up;        ///< [N, N] 1 where j is upstream of i within the degree (j ≠ i)
    Tensor dn;        ///< [N, N]
    Tensor blocked;   ///< [N, N] −inf where unreachable, else 0
    Tensor hop_up;    ///< [degree, N·N] one-hot hop distance
    Tensor hop_dn;
  };
  MaskTensors masks_v_;
  MaskTensors masks_q_;
  Tensor eye_;
  Tensor gru_up_;  ///< row-normalised degree-2 upstream adjacency
  Tensor gru_dn_;

  MaskTensors build_masks(const NeighborhoodMask& m) const;
};

double scheduled_sampling_prob(std::uint64_t iteration, double decay_c);

}  // namespace evtraffic
