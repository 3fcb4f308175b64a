#pragma once

// Batched inference over a corpus and the forecast error / calibration
// metrics computed from it.

#include <iosfwd>
#include <vector>

#include "evtraffic/corpus.hpp"
#include "evtraffic/kernels.hpp"
#include "evtraffic/train.hpp"

namespace evtraffic {

/// Free-running decoder outputs, laid out [sample][step][node].
struct CorpusPredictions {
  std::size_t samples = 0;
  std::size_t steps = 0;
  std::size_t nodes = 0;
  std::vector<double> speed;
  std::vector<double> flow;
  std::vector<double> nu;
  std::vector<double> alpha;
  std::vector<double> beta;

  std::size_t index(std::size_t s, std::size_t t, std::size_t i) const { return (s * steps + t) * nodes + i; }
};

/// Rejects corpora whose graph or windows differ from the checkpoint.
void check_compatible(const ModelCheckpoint& ckpt, const Corpus& corpus);

/// Inference with a frozen checkpoint. Exec::parallel spreads batches over
/// threads; Exec::serial is the single-threaded reference. Both give
/// identical results.
CorpusPredictions predict(const ModelCheckpoint& ckpt, const Corpus& corpus, Exec exec = Exec::parallel,
                          std::size_t batch_size = 64);

/// Ground-truth target window of sample s at decoder step t, node i.
double target_speed(const Corpus& c, std::size_t s, std::size_t t, std::size_t i);
double target_flow(const Corpus& c, std::size_t s, std::size_t t, std::size_t i);

struct WeightedMaeOptions {
  double congestion_cutoff = 60.0;  ///< km/h
  double congestion_weight = 4.0;
};

/// mean(coef·|pred − truth|) with coef = weight where truth < cutoff, else 1.
double weighted_mae(const std::vector<double>& pred, const std::vector<double>& truth,
                    const WeightedMaeOptions& opt = {});

struct ErrorRow {
  int horizon = 0;  ///< 1-based decoder step, 0 for all steps
  double speed_mae = 0.0;
  double speed_mape = 0.0;  ///< percent, points with truth < 1 excluded
  double speed_rmse = 0.0;
  double speed_wmae = 0.0;
  double flow_mae = 0.0;
  double flow_mape = 0.0;
  double flow_rmse = 0.0;
};

/// One row per horizon followed by the all-steps row (horizon 0).
std::vector<ErrorRow> error_metrics(const CorpusPredictions& p, const Corpus& truth,
                                    const WeightedMaeOptions& opt = {});

struct CalibrationRow {
  int horizon = 0;
  double rmse = 0.0;
  double data_var = 0.0;  ///< mean over nodes and samples
  double knowledge_var = 0.0;
  double total_var = 0.0;
  double data_std = 0.0;  ///< mean of per-point standard deviations
  double knowledge_std = 0.0;
  double total_std = 0.0;
};

std::vector<CalibrationRow> calibration_report(const CorpusPredictions& p, const Corpus& truth);

void write_error_csv(const std::vector<ErrorRow>& rows, std::ostream& out);
void write_calibration_csv(const std::vector<CalibrationRow>& rows, std::ostream& out);

}  // namespace evtraffic
