#include "evtraffic/metrics.hpp"

#include <cmath>
#include <numeric>
#include <ostream>

#include "evtraffic/errors.hpp"
#include "evtraffic/evidential.hpp"
#include "evtraffic/format.hpp"

namespace evtraffic {

void check_compatible(const ModelCheckpoint& ckpt, const Corpus& corpus) {
  if (corpus.nodes() != ckpt.graph.num_nodes()) {
    throw ValidationError("corpus has " + std::to_string(corpus.nodes()) + " nodes but the checkpoint expects " +
                          std::to_string(ckpt.graph.num_nodes()));
  }
  if (!(corpus.graph == ckpt.graph)) throw ValidationError("corpus graph does not match the checkpoint graph");
  if (corpus.window_in != ckpt.config.encoder_steps || corpus.window_out != ckpt.config.decoder_steps) {
    throw ValidationError("corpus windows do not match the checkpoint encoder/decoder steps");
  }
}

CorpusPredictions predict(const ModelCheckpoint& ckpt, const Corpus& corpus, Exec exec, std::size_t batch_size) {
  check_compatible(ckpt, corpus);
  if (batch_size == 0) throw ValidationError("batch size must be positive");
  const Model model(ckpt.config, ckpt.graph);
  CorpusPredictions out;
  out.samples = corpus.samples.size();
  out.steps = static_cast<std::size_t>(ckpt.config.decoder_steps);
  out.nodes = corpus.nodes();
  const std::size_t total = out.samples * out.steps * out.nodes;
  for (auto* v : {&out.speed, &out.flow, &out.nu, &out.alpha, &out.beta}) v->assign(total, 0.0);

  const std::size_t batches = (out.samples + batch_size - 1) / batch_size;
  const auto nb = static_cast<std::ptrdiff_t>(batches);
#pragma omp parallel for schedule(dynamic) if (exec == Exec::parallel)
  for (std::ptrdiff_t bb = 0; bb < nb; ++bb) {
    const std::size_t lo = static_cast<std::size_t>(bb) * batch_size;
    const std::size_t hi = std::min(out.samples, lo + batch_size);
    std::vector<std::size_t> idx(hi - lo);
    std::iota(idx.begin(), idx.end(), lo);
    ad::Tape tape(Exec::serial);
    const BoundParams p(tape, ckpt.params, false);
    const std::vector<std::vector<bool>> no_forcing(idx.size(), std::vector<bool>(out.steps, false));
    const auto res = model.rollout(tape, p, make_batch(corpus, idx), no_forcing);
    for (std::size_t t = 0; t < out.steps; ++t) {
      const auto& st = res.steps[t];
      for (std::size_t b = 0; b < idx.size(); ++b) {
        for (std::size_t i = 0; i < out.nodes; ++i) {
          const std::size_t src = b * out.nodes + i;
          const std::size_t dst = out.index(lo + b, t, i);
          out.speed[dst] = st.m_v.value()[src];
          out.flow[dst] = st.m_q.value()[src];
          out.nu[dst] = st.nig.nu.value()[src];
          out.alpha[dst] = st.nig.alpha.value()[src];
          out.beta[dst] = st.nig.beta.value()[src];
        }
      }
    }
  }
  return out;
}

double target_speed(const Corpus& c, std::size_t s, std::size_t t, std::size_t i) {
  return c.samples[s].speed[(static_cast<std::size_t>(c.window_in) + t) * c.nodes() + i];
}

double target_flow(const Corpus& c, std::size_t s, std::size_t t, std::size_t i) {
  return c.samples[s].flow[(static_cast<std::size_t>(c.window_in) + t) * c.nodes() + i];
}

double weighted_mae(const std::vector<double>& pred, const std::vector<double>& truth, const WeightedMaeOptions& opt) {
  if (pred.size() != truth.size()) {
    throw ShapeError("weighted_mae: " + std::to_string(pred.size()) + " predictions for " +
                     std::to_string(truth.size()) + " targets");
  }
  if (pred.empty()) throw ValidationError("weighted_mae of zero points");
  double s = 0.0;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const double coef = truth[k] < opt.congestion_cutoff ? opt.congestion_weight : 1.0;
    s += coef * std::abs(pred[k] - truth[k]);
  }
  return s / static_cast<double>(pred.size());
}

namespace {

struct Accum {
  double abs = 0.0, sq = 0.0, pct = 0.0, wabs = 0.0;
  std::size_t n = 0, n_pct = 0;

  void add(double pred, double truth, double coef) {
    const double e = pred - truth;
    abs += std::abs(e);
    wabs += coef * std::abs(e);
    sq += e * e;
    ++n;
    if (truth >= 1.0) {
      pct += std::abs(e) / truth;
      ++n_pct;
    }
  }
  double mae() const { return abs / static_cast<double>(n); }
  double wmae() const { return wabs / static_cast<double>(n); }
  double rmse() const { return std::sqrt(sq / static_cast<double>(n)); }
  double mape() const { return n_pct ? 100.0 * pct / static_cast<double>(n_pct) : 0.0; }
};

void check_shapes(const CorpusPredictions& p, const Corpus& truth) {
  if (p.samples != truth.samples.size() || p.nodes != truth.nodes() ||
      p.steps != static_cast<std::size_t>(truth.window_out)) {
    throw ShapeError("predictions do not match the corpus");
  }
  if (p.samples == 0) throw ValidationError("no samples to evaluate");
}

}  // namespace

std::vector<ErrorRow> error_metrics(const CorpusPredictions& p, const Corpus& truth, const WeightedMaeOptions& opt) {
  check_shapes(p, truth);
  std::vector<Accum> sv(p.steps + 1), fq(p.steps + 1);
  for (std::size_t s = 0; s < p.samples; ++s) {
    for (std::size_t t = 0; t < p.steps; ++t) {
      for (std::size_t i = 0; i < p.nodes; ++i) {
        const std::size_t k = p.index(s, t, i);
        const double v = target_speed(truth, s, t, i);
        const double coef = v < opt.congestion_cutoff ? opt.congestion_weight : 1.0;
        const double q = target_flow(truth, s, t, i);
        for (std::size_t r : {t, p.steps}) {
          sv[r].add(p.speed[k], v, coef);
          fq[r].add(p.flow[k], q, 1.0);
        }
      }
    }
  }
  std::vector<ErrorRow> rows;
  for (std::size_t r = 0; r <= p.steps; ++r) {
    ErrorRow row;
    row.horizon = r == p.steps ? 0 : static_cast<int>(r + 1);
    row.speed_mae = sv[r].mae();
    row.speed_mape = sv[r].mape();
    row.speed_rmse = sv[r].rmse();
    row.speed_wmae = sv[r].wmae();
    row.flow_mae = fq[r].mae();
    row.flow_mape = fq[r].mape();
    row.flow_rmse = fq[r].rmse();
    rows.push_back(row);
  }
  return rows;
}

std::vector<CalibrationRow> calibration_report(const CorpusPredictions& p, const Corpus& truth) {
  check_shapes(p, truth);
  std::vector<CalibrationRow> rows(p.steps);
  const double count = static_cast<double>(p.samples * p.nodes);
  for (std::size_t t = 0; t < p.steps; ++t) {
    CalibrationRow& row = rows[t];
    row.horizon = static_cast<int>(t + 1);
    double sq = 0.0;
    for (std::size_t s = 0; s < p.samples; ++s) {
      for (std::size_t i = 0; i < p.nodes; ++i) {
        const std::size_t k = p.index(s, t, i);
        const double e = p.speed[k] - target_speed(truth, s, t, i);
        sq += e * e;
        const auto u = evidential::decompose({p.speed[k], p.nu[k], p.alpha[k], p.beta[k]});
        row.data_var += u.data_var;
        row.knowledge_var += u.knowledge_var;
        row.total_var += u.total_var;
        row.data_std += std::sqrt(u.data_var);
        row.knowledge_std += std::sqrt(u.knowledge_var);
        row.total_std += std::sqrt(u.total_var);
      }
    }
    row.rmse = std::sqrt(sq / count);
    for (double* v : {&row.data_var, &row.knowledge_var, &row.total_var, &row.data_std, &row.knowledge_std,
                      &row.total_std}) {
      *v /= count;
    }
  }
  return rows;
}

void write_error_csv(const std::vector<ErrorRow>& rows, std::ostream& out) {
  out << "horizon,speed_mae,speed_mape,speed_rmse,speed_wmae,flow_mae,flow_mape,flow_rmse\n";
  for (const auto& r : rows) {
    out << (r.horizon == 0 ? std::string("all") : std::to_string(r.horizon)) << ',' << fmt_real(r.speed_mae) << ','
        << fmt_real(r.speed_mape) << ',' << fmt_real(r.speed_rmse) << ',' << fmt_real(r.speed_wmae) << ','
        << fmt_real(r.flow_mae) << ',' << fmt_real(r.flow_mape) << ',' << fmt_real(r.flow_rmse) << '\n';
  }
}

void write_calibration_csv(const std::vector<CalibrationRow>& rows, std::ostream& out) {
  out << "horizon,rmse,data_std,knowledge_std,total_std,data_var,knowledge_var,total_var\n";
  for (const auto& r : rows) {
    out << r.horizon << ',' << fmt_real(r.rmse) << ',' << fmt_real(r.data_std) << ',' << fmt_real(r.knowledge_std)
        << ',' << fmt_real(r.total_std) << ',' << fmt_real(r.data_var) << ',' << fmt_real(r.knowledge_var) << ','
        << fmt_real(r.total_var) << '\n';
  }
}

}  // namespace evtraffic
