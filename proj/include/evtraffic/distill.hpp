#pragma once

// Knowledge-uncertainty ranking, percentile thresholds, preserve/remove
// dataset filtering and online stream filtering.
//
// Report file layout (text, one key per line, then three sections):
//   evtraffic-distill-report 1
//   seed <u64>
//   config_hash <hex16>
//   mode <preserve-lowest|remove-lowest>
//   percentile <real>
//   threshold <real>
//   samples <n>
//   [ranking]            sample_id,ku_mean,congested,rare   (ascending)
//   [kept]               one id per line, ranking order
//   [removed]            one id per line, ranking order
//   [end]

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "evtraffic/corpus.hpp"
#include "evtraffic/metrics.hpp"
#include "evtraffic/train.hpp"

namespace evtraffic {

struct SampleScore {
  std::uint64_t sample_id = 0;
  double ku_mean = 0.0;  ///< km/h, root of the mean knowledge variance
  bool congested = false;  ///< any target speed below the congestion cutoff
  bool rare = false;
};

/// Scores from predictions already computed for `corpus`.
std::vector<SampleScore> score_predictions(const CorpusPredictions& p, const Corpus& corpus,
                                           double congestion_cutoff = 60.0);
std::vector<SampleScore> score_samples(const ModelCheckpoint& ckpt, const Corpus& corpus,
                                       Exec exec = Exec::parallel, double congestion_cutoff = 60.0);

/// Linear interpolation between order statistics at rank pct/100·(n − 1).
double threshold_at_percentile(std::vector<double> values, double pct);
double threshold_at_percentile(const std::vector<SampleScore>& scores, double pct);

/// Scores sorted ascending by ku_mean, ties by sample id.
std::vector<SampleScore> rank_scores(std::vector<SampleScore> scores);

enum class DistillMode { preserve_lowest, remove_lowest };
std::string to_string(DistillMode m);
DistillMode parse_distill_mode(const std::string& s);

struct DistillReport {
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  DistillMode mode = DistillMode::remove_lowest;
  double percentile = 0.0;
  double threshold = 0.0;
  std::vector<SampleScore> ranking;
  std::vector<std::uint64_t> kept;
  std::vector<std::uint64_t> removed;
};

/// Report for `scores` at `pct`: threshold, ranking, and the ids kept and
/// removed by split_preserve_remove with the same arguments.
DistillReport make_report(const std::vector<SampleScore>& scores, double pct, DistillMode mode);

/// preserve-lowest keeps the round(pct·n/100) lowest-ranked samples,
/// remove-lowest drops them. Samples keep their original order. With
/// remove-lowest every kept score is ≥ the threshold and every removed one ≤.
Corpus split_preserve_remove(const Corpus& corpus, const std::vector<SampleScore>& scores, double pct,
                             DistillMode mode);

void write_report(const DistillReport& r, std::ostream& out);
DistillReport read_report(std::istream& in, const std::string& source = "<report>");
void save_report(const DistillReport& r, const std::filesystem::path& path);
DistillReport load_report(const std::filesystem::path& path);

/// sample_id,ku_mean,congested,rare
void write_scores_csv(const std::vector<SampleScore>& scores, std::ostream& out);

struct StreamWindow {
  std::size_t index = 0;
  std::size_t first = 0;  ///< position of the first sample in the stream
  std::size_t count = 0;
  std::size_t accepted = 0;
  std::size_t malformed = 0;
  double rate = 0.0;  ///< accepted / count
};

struct StreamResult {
  Corpus kept;
  std::vector<SampleScore> scores;  ///< well-formed samples, stream order
  std::vector<StreamWindow> log;
  std::size_t malformed = 0;
  std::size_t incoming = 0;
  std::size_t accepted() const { return kept.samples.size(); }
};

/// Keeps samples whose ku_mean exceeds `threshold`. Samples with a wrong block
/// size or non-finite values are skipped and counted.
StreamResult stream_filter(const ModelCheckpoint& ckpt, double threshold, const Corpus& incoming,
                           std::size_t log_window = 100, Exec exec = Exec::parallel);

/// window,first,count,accepted,malformed,rate
void write_stream_log(const std::vector<StreamWindow>& log, std::ostream& out);

}  // namespace evtraffic
