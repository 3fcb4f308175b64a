#include "evtraffic/model.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "evtraffic/errors.hpp"

namespace evtraffic {

using ad::Var;

void ModelConfig::validate() const {
  auto need = [](bool ok, const char* msg) {
    if (!ok) throw ValidationError(msg);
  };
  need(hidden_dim >= 1, "hidden_dim must be at least 1");
  need(degree_speed >= 1 && degree_flow >= 1, "neighbourhood degrees must be at least 1");
  need(R_v > 0.0 && R_q > 0.0, "fluctuation bounds must be positive");
  need(encoder_steps >= 1 && decoder_steps >= 1, "encoder_steps and decoder_steps must be at least 1");
  need(epsilon >= 0.0, "epsilon must be non-negative");
  need(flow_loss_weight >= 0.0, "flow_loss_weight must be non-negative");
  need(decay_c >= 0.0, "decay_c must be non-negative");
  need(key_dim >= 1 && transform_dim >= 1, "key_dim and transform_dim must be at least 1");
  need(input_total_var > 0.0, "input_total_var must be positive");
  need(gain_nu > 0.0 && gain_alpha > 0.0 && gain_beta > 0.0, "head gains must be positive");
  need(learning_rate > 0.0, "learning_rate must be positive");
  need(batch_size >= 1, "batch_size must be at least 1");
  need(epochs >= 0 && steps >= 0, "epochs and steps must be non-negative");
  need(grad_clip >= 0.0, "grad_clip must be non-negative");
  need(init_alpha <= 0.0 || (init_alpha > 1.0 && init_std > 0.0), "init_alpha must exceed 1 with a positive init_std");
}

void ModelConfig::hash_into(io::Fnv1a& h) const {
  for (int v : {hidden_dim, degree_speed, degree_flow, encoder_steps, decoder_steps, key_dim, transform_dim,
                batch_size, epochs, steps}) {
    h.value(v);
  }
  for (double v : {R_v, R_q, epsilon, flow_loss_weight, decay_c, input_total_var, regularizer_floor, gain_nu,
                   gain_alpha, gain_beta, learning_rate, grad_clip, init_alpha, init_std}) {
    h.value(v);
  }
}

// ---- parameters -------------------------------------------------------------

void ParameterSet::add(std::string name, Tensor value) {
  if (!index_.emplace(name, names_.size()).second) throw ValidationError("duplicate parameter '" + name + "'");
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
}

Tensor& ParameterSet::operator[](const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return values_[it->second];
}

const Tensor& ParameterSet::operator[](const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return values_[it->second];
}

std::size_t ParameterSet::numel() const {
  std::size_t n = 0;
  for (const auto& t : values_) n += t.size();
  return n;
}

bool ParameterSet::operator==(const ParameterSet& o) const {
  if (names_ != o.names_) return false;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (values_[i].shape() != o.values_[i].shape() || values_[i].storage() != o.values_[i].storage()) return false;
  }
  return true;
}

BoundParams::BoundParams(ad::Tape& tape, const ParameterSet& params, bool trainable) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params.tensors()[i];
    vars_.push_back(trainable ? tape.variable(std::move(t)) : tape.constant(std::move(t)));
    index_.emplace(params.names()[i], i);
  }
}

BoundParams::BoundParams(const std::vector<std::string>& names, std::vector<Var> vars) : vars_(std::move(vars)) {
  if (names.size() != vars_.size()) throw ShapeError("one var per parameter name required");
  for (std::size_t i = 0; i < names.size(); ++i) index_.emplace(names[i], i);
}

const Var& BoundParams::operator[](const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return vars_[it->second];
}

// ---- batches ----------------------------------------------------------------

Batch make_batch(const Corpus& corpus, const std::vector<std::size_t>& indices) {
  Batch b;
  b.size = indices.size();
  b.steps = static_cast<std::size_t>(corpus.window());
  b.nodes = corpus.nodes();
  b.speed = Tensor({b.size, b.steps, b.nodes});
  b.flow = Tensor({b.size, b.steps, b.nodes});
  const std::size_t block = b.steps * b.nodes;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& s = corpus.samples.at(indices[k]);
    if (s.speed.size() != block || s.flow.size() != block) throw ShapeError("sample block size mismatch");
    for (double v : s.speed) {
      if (!std::isfinite(v)) throw ValidationError("sample " + std::to_string(s.id) + " has missing speed values");
    }
    std::copy(s.speed.begin(), s.speed.end(), b.speed.storage().begin() + static_cast<std::ptrdiff_t>(k * block));
    std::copy(s.flow.begin(), s.flow.end(), b.flow.storage().begin() + static_cast<std::ptrdiff_t>(k * block));
  }
  return b;
}

namespace {

// [B, N] slice of a [B, T, N] tensor at time t.
Tensor time_slice(const Tensor& x, std::size_t t) {
  const std::size_t bsz = x.dim(0), steps = x.dim(1), n = x.dim(2);
  Tensor out({bsz, n});
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t i = 0; i < n; ++i) out[b * n + i] = x[(b * steps + t) * n + i];
  }
  return out;
}

}  // namespace

// ---- model ------------------------------------------------------------------

Model::Model(ModelConfig cfg, RoadGraph graph) : cfg_(cfg), graph_(std::move(graph)) {
  cfg_.validate();
  mask_v_ = adjacency_power(graph_, cfg_.degree_speed);
  mask_q_ = adjacency_power(graph_, cfg_.degree_flow);
  masks_v_ = build_masks(mask_v_);
  masks_q_ = build_masks(mask_q_);
  const std::size_t n = graph_.num_nodes();
  eye_ = Tensor({n, n});
  for (std::size_t i = 0; i < n; ++i) eye_[i * n + i] = 1.0;

  const auto m2 = adjacency_power(graph_, 2);
  gru_up_ = Tensor({n, n});
  gru_dn_ = Tensor({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    double cu = 0.0, cd = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      if (m2.reaches_upstream(i, j)) cu += 1.0;
      if (m2.reaches_downstream(i, j)) cd += 1.0;
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      if (m2.reaches_upstream(i, j)) gru_up_[i * n + j] = 1.0 / cu;
      if (m2.reaches_downstream(i, j)) gru_dn_[i * n + j] = 1.0 / cd;
    }
  }

  const double nu = 2.0, alpha = 2.0;
  const double beta = cfg_.input_total_var * nu * (alpha - 1.0) / (nu + 1.0);
  observed_raw_ = {evidential::inverse_positivity(nu) / cfg_.gain_nu,
                   evidential::inverse_positivity(alpha, 1.0) / cfg_.gain_alpha,
                   evidential::inverse_positivity(beta) / cfg_.gain_beta};
}

Model::MaskTensors Model::build_masks(const NeighborhoodMask& m) const {
  const std::size_t n = m.n;
  const auto deg = static_cast<std::size_t>(m.degree);
  MaskTensors t;
  t.up = Tensor({n, n});
  t.dn = Tensor({n, n});
  t.blocked = Tensor({n, n});
  t.hop_up = Tensor({deg, n * n});
  t.hop_dn = Tensor({deg, n * n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t at = i * n + j;
      if (!m.reachable(i, j)) t.blocked[at] = -std::numeric_limits<double>::infinity();
      if (i == j) continue;
      if (m.up(i, j) > 0) {
        t.up[at] = 1.0;
        t.hop_up[static_cast<std::size_t>(m.up(i, j) - 1) * n * n + at] = 1.0;
      }
      if (m.down(i, j) > 0) {
        t.dn[at] = 1.0;
        t.hop_dn[static_cast<std::size_t>(m.down(i, j) - 1) * n * n + at] = 1.0;
      }
    }
  }
  return t;
}

std::vector<std::pair<std::string, Shape>> Model::parameter_shapes() const {
  const std::size_t d = kInputFeatures + static_cast<std::size_t>(cfg_.hidden_dim);
  const std::size_t h = static_cast<std::size_t>(cfg_.hidden_dim);
  const std::size_t k = static_cast<std::size_t>(cfg_.key_dim);
  const std::size_t f = static_cast<std::size_t>(cfg_.transform_dim);
  std::vector<std::pair<std::string, Shape>> s;
  for (const auto& [q, deg] : {std::pair{"v", cfg_.degree_speed}, std::pair{"q", cfg_.degree_flow}}) {
    const std::string p = std::string("dgc.") + q + ".";
    s.push_back({p + "query_up", {d, k}});
    s.push_back({p + "key_up", {d, k}});
    s.push_back({p + "query_dn", {d, k}});
    s.push_back({p + "key_dn", {d, k}});
    s.push_back({p + "hop_up", {1, static_cast<std::size_t>(deg)}});
    s.push_back({p + "hop_dn", {1, static_cast<std::size_t>(deg)}});
    s.push_back({p + "self_w", {d, 1}});
    s.push_back({p + "self_b", {1}});
  }
  s.push_back({"f.w1", {d, f}});
  s.push_back({"f.b1", {f}});
  s.push_back({"f.wv", {f, 1}});
  s.push_back({"f.bv", {1}});
  s.push_back({"f.wq", {f, 1}});
  s.push_back({"f.bq", {1}});
  s.push_back({"r.w", {d, 2}});
  s.push_back({"r.b", {2}});
  for (const char* g : {"update", "reset", "cand"}) {
    s.push_back({std::string("gru.") + g + "_w", {3 * d, h}});
    s.push_back({std::string("gru.") + g + "_b", {h}});
  }
  s.push_back({"head.w", {h, 3}});
  s.push_back({"head.b", {3}});
  return s;
}

ParameterSet Model::init_params(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  ParameterSet ps;
  for (const auto& [name, shape] : parameter_shapes()) {
    Tensor t(shape);
    if (shape.size() == 2 && name.find("hop_") == std::string::npos) {
      double a = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
      if (name == "r.w") a *= 0.1;
      std::uniform_real_distribution<double> u(-a, a);
      for (auto& v : t.storage()) v = static_cast<float>(u(rng));
    }
    ps.add(name, std::move(t));
  }
  if (cfg_.init_alpha > 0.0) {
    const double nu = 1.0, alpha = cfg_.init_alpha;
    const double beta = cfg_.init_std * cfg_.init_std * nu * (alpha - 1.0) / (nu + 1.0);
    auto& b = ps["head.b"];
    b[0] = static_cast<float>(evidential::inverse_positivity(nu) / cfg_.gain_nu);
    b[1] = static_cast<float>(evidential::inverse_positivity(alpha, 1.0) / cfg_.gain_alpha);
    b[2] = static_cast<float>(evidential::inverse_positivity(beta) / cfg_.gain_beta);
  }
  return ps;
}

Var Model::observed_input(ad::Tape& tape, const Tensor& speed, const Tensor& flow) const {
  const std::size_t bsz = speed.dim(0), n = speed.dim(1);
  Tensor x({bsz, n, static_cast<std::size_t>(kInputFeatures)});
  for (std::size_t k = 0; k < bsz * n; ++k) {
    double* row = x.storage().data() + k * kInputFeatures;
    row[0] = speed[k] / kSpeedScale;
    row[1] = flow[k] / kFlowScale;
    row[2] = observed_raw_[0];
    row[3] = observed_raw_[1];
    row[4] = observed_raw_[2];
  }
  return tape.constant(std::move(x));
}

DgcResult Model::dgc_forward(const BoundParams& p, const Var& input, const Var& hidden,
                             const NeighborhoodMask& speed_mask, const NeighborhoodMask& flow_mask) const {
  if (speed_mask.degree != cfg_.degree_speed || flow_mask.degree != cfg_.degree_flow ||
      speed_mask.n != graph_.num_nodes() || flow_mask.n != graph_.num_nodes()) {
    throw ValidationError("neighbourhood masks do not match the model degrees");
  }
  ad::Tape& tape = *input.tape();
  const std::size_t bsz = input.shape()[0], n = input.shape()[1];
  const Var z = ad::concat({input, hidden}, 2);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg_.key_dim));

  auto kernel = [&](const std::string& q, const MaskTensors& mt) {
    const std::string pre = "dgc." + q + ".";
    auto scores = [&](const char* dir) {
      const Var qv = ad::matmul(z, p[pre + "query_" + dir]);
      const Var kv = ad::matmul(z, p[pre + "key_" + dir]);
      return ad::matmul(qv, ad::transpose(kv)) * scale;
    };
    const Var bias_up = ad::reshape(ad::matmul(p[pre + "hop_up"], tape.constant(mt.hop_up)), {n, n});
    const Var bias_dn = ad::reshape(ad::matmul(p[pre + "hop_dn"], tape.constant(mt.hop_dn)), {n, n});
    const Var self = ad::matmul(z, p[pre + "self_w"]) + p[pre + "self_b"];
    const Var logits = scores("up") * tape.constant(mt.up) + bias_up + scores("dn") * tape.constant(mt.dn) +
                       bias_dn + self * tape.constant(eye_) + tape.constant(mt.blocked);
    return ad::softmax(logits, 2);
  };

  DgcResult r;
  r.w_v = kernel("v", masks_v_);
  r.w_q = kernel("q", masks_q_);

  const Var hid = ad::tanh(ad::matmul(z, p["f.w1"]) + p["f.b1"]);
  const Var f_v = ad::sigmoid(ad::matmul(hid, p["f.wv"]) + p["f.bv"]) * kSpeedScale;
  const Var f_q = ad::softplus(ad::matmul(hid, p["f.wq"]) + p["f.bq"]) * kFlowScale;
  r.conv_v = ad::reshape(ad::matmul(r.w_v, f_v), {bsz, n});
  r.conv_q = ad::reshape(ad::matmul(r.w_q, f_q), {bsz, n});

  // r = t·min(R, headroom to the range bound), t ∈ (−1, 1).
  const double inf = std::numeric_limits<double>::infinity();
  const Var fl = ad::tanh(ad::matmul(z, p["r.w"]) + p["r.b"]);
  const Var t_v = ad::reshape(ad::slice(fl, 2, 0, 1), {bsz, n});
  const Var t_q = ad::reshape(ad::slice(fl, 2, 1, 1), {bsz, n});
  r.r_v = ad::clamp(t_v, 0.0, inf) * ad::clamp(kSpeedScale - r.conv_v, -inf, cfg_.R_v) +
          ad::clamp(t_v, -inf, 0.0) * ad::clamp(r.conv_v, -inf, cfg_.R_v);
  r.r_q = ad::clamp(t_q, 0.0, inf) * cfg_.R_q + ad::clamp(t_q, -inf, 0.0) * ad::clamp(r.conv_q, -inf, cfg_.R_q);

  r.m_v = ad::clamp(r.conv_v + r.r_v, 0.0, kSpeedScale);
  r.m_q = ad::clamp(r.conv_q + r.r_q, 0.0, inf);
  return r;
}

Var Model::static_conv(const Var& z, const Tensor& a_up, const Tensor& a_dn) const {
  ad::Tape& tape = *z.tape();
  return ad::concat({z, ad::matmul(tape.constant(a_up), z), ad::matmul(tape.constant(a_dn), z)}, 2);
}

Model::GruGates Model::gcgru_gates(const BoundParams& p, const Var& input, const Var& hidden) const {
  const auto& hs = hidden.shape();
  if (hs.size() != 3 || hs[2] != static_cast<std::size_t>(cfg_.hidden_dim) || input.shape().size() != 3 ||
      input.shape()[2] != static_cast<std::size_t>(kInputFeatures) || input.shape()[0] != hs[0] ||
      input.shape()[1] != hs[1]) {
    throw ShapeError("gcgru_step: input " + shape_str(input.shape()) + " and hidden " + shape_str(hs) +
                     " do not match the model");
  }
  GruGates g;
  const Var zin = static_conv(ad::concat({input, hidden}, 2), gru_up_, gru_dn_);
  g.update = ad::sigmoid(ad::matmul(zin, p["gru.update_w"]) + p["gru.update_b"]);
  g.reset = ad::sigmoid(ad::matmul(zin, p["gru.reset_w"]) + p["gru.reset_b"]);
  const Var zc = static_conv(ad::concat({input, g.reset * hidden}, 2), gru_up_, gru_dn_);
  g.candidate = ad::tanh(ad::matmul(zc, p["gru.cand_w"]) + p["gru.cand_b"]);
  g.next = g.update * g.candidate + (1.0 - g.update) * hidden;
  return g;
}

Var Model::uncertainty_head(const BoundParams& p, const Var& hidden) const {
  return ad::matmul(hidden, p["head.w"]) + p["head.b"];
}

evidential::NigVars Model::nig_from_head(const Var& m_v, const Var& raw) const {
  const Shape bn = m_v.shape();
  auto channel = [&](std::size_t c, double gain) { return ad::reshape(ad::slice(raw, 2, c, 1), bn) * gain; };
  return evidential::positivity_transform(m_v, channel(0, cfg_.gain_nu), channel(1, cfg_.gain_alpha),
                                          channel(2, cfg_.gain_beta));
}

StepOutput Model::step(const BoundParams& p, const Var& input, const Var& hidden) const {
  const DgcResult d = dgc_forward(p, input, hidden);
  StepOutput o;
  o.m_v = d.m_v;
  o.m_q = d.m_q;
  o.hidden = gcgru_step(p, input, hidden);
  o.raw = uncertainty_head(p, o.hidden);
  o.nig = nig_from_head(o.m_v, o.raw);
  return o;
}

RolloutResult Model::rollout(ad::Tape& tape, const BoundParams& p, const Batch& batch,
                             const std::vector<std::vector<bool>>& teacher_forcing) const {
  const auto enc = static_cast<std::size_t>(cfg_.encoder_steps);
  const auto dec = static_cast<std::size_t>(cfg_.decoder_steps);
  if (batch.nodes != graph_.num_nodes()) throw ValidationError("batch node count does not match the model graph");
  if (batch.steps != enc + dec) throw ValidationError("batch window does not match encoder + decoder steps");
  if (batch.size == 0) throw ValidationError("empty batch");
  if (teacher_forcing.size() != batch.size) throw ShapeError("teacher forcing mask needs one row per sample");
  for (const auto& row : teacher_forcing) {
    if (row.size() != dec) throw ShapeError("teacher forcing mask needs one entry per decoder step");
  }
  const std::size_t bsz = batch.size, n = batch.nodes;

  Var h = tape.constant(Tensor({bsz, n, static_cast<std::size_t>(cfg_.hidden_dim)}));
  for (std::size_t t = 0; t + 1 < enc; ++t) {
    h = gcgru_step(p, observed_input(tape, time_slice(batch.speed, t), time_slice(batch.flow, t)), h);
  }
  Var x = observed_input(tape, time_slice(batch.speed, enc - 1), time_slice(batch.flow, enc - 1));

  evidential::RegularizerOptions reg;
  if (!std::isnan(cfg_.regularizer_floor)) reg.bracket_floor = cfg_.regularizer_floor;

  RolloutResult res;
  Var total;
  for (std::size_t s = 0; s < dec; ++s) {
    StepOutput o = step(p, x, h);
    const Tensor v_true = time_slice(batch.speed, enc + s);
    const Tensor q_true = time_slice(batch.flow, enc + s);
    const Var lt = ad::mean(evidential::total_loss(tape.constant(v_true), o.nig, cfg_.epsilon, reg));
    Var term = lt;
    if (cfg_.flow_loss_weight > 0.0) {
      term = term + ad::mean(ad::abs(o.m_q - tape.constant(q_true))) * (cfg_.flow_loss_weight / kFlowScale);
    }
    total = s == 0 ? term : total + term;
    h = o.hidden;

    if (s + 1 < dec) {
      std::size_t forced = 0;
      Tensor mix({bsz, 1, 1});
      for (std::size_t b = 0; b < bsz; ++b) {
        if (teacher_forcing[b][s + 1]) {
          mix[b] = 1.0;
          ++forced;
        }
      }
      const Var truth = forced > 0 ? observed_input(tape, v_true, q_true) : Var{};
      Var pred;
      if (forced < bsz) {
        pred = ad::concat({ad::reshape(o.m_v, {bsz, n, 1}) * (1.0 / kSpeedScale),
                           ad::reshape(o.m_q, {bsz, n, 1}) * (1.0 / kFlowScale), o.raw},
                          2);
      }
      if (forced == bsz) {
        x = truth;
      } else if (forced == 0) {
        x = pred;
      } else {
        Tensor keep = mix;
        for (auto& v : keep.storage()) v = 1.0 - v;
        x = truth * tape.constant(std::move(mix)) + pred * tape.constant(std::move(keep));
      }
    }
    res.steps.push_back(std::move(o));
  }
  res.loss = total * (1.0 / static_cast<double>(dec));
  return res;
}

double scheduled_sampling_prob(std::uint64_t iteration, double decay_c) {
  if (!(decay_c >= 0.0)) throw ValidationError("decay_c must be non-negative");
  return std::exp(-decay_c * static_cast<double>(iteration));
}

}  // namespace evtraffic
