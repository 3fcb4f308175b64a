#include "evtraffic/distill.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include "evtraffic/errors.hpp"
#include "evtraffic/evidential.hpp"
#include "evtraffic/format.hpp"

namespace evtraffic {

std::vector<SampleScore> score_predictions(const CorpusPredictions& p, const Corpus& corpus,
                                           double congestion_cutoff) {
  if (p.samples != corpus.samples.size() || p.nodes != corpus.nodes() ||
      p.steps != static_cast<std::size_t>(corpus.window_out)) {
    throw ShapeError("predictions do not match the corpus");
  }
  std::vector<SampleScore> out(p.samples);
  const std::size_t per = p.steps * p.nodes;
  for (std::size_t s = 0; s < p.samples; ++s) {
    double kv = 0.0;
    bool congested = false;
    for (std::size_t t = 0; t < p.steps; ++t) {
      for (std::size_t i = 0; i < p.nodes; ++i) {
        const std::size_t k = p.index(s, t, i);
        kv += evidential::decompose({p.speed[k], p.nu[k], p.alpha[k], p.beta[k]}).knowledge_var;
        if (target_speed(corpus, s, t, i) < congestion_cutoff) congested = true;
      }
    }
    out[s].sample_id = corpus.samples[s].id;
    out[s].ku_mean = std::sqrt(kv / static_cast<double>(per));
    out[s].congested = congested;
    out[s].rare = corpus.samples[s].rare;
  }
  return out;
}

std::vector<SampleScore> score_samples(const ModelCheckpoint& ckpt, const Corpus& corpus, Exec exec,
                                       double congestion_cutoff) {
  return score_predictions(predict(ckpt, corpus, exec), corpus, congestion_cutoff);
}

double threshold_at_percentile(std::vector<double> values, double pct) {
  if (values.empty()) throw ValidationError("percentile of an empty score set");
  if (!(pct >= 0.0 && pct <= 100.0)) throw ValidationError("percentile must lie in [0, 100]");
  std::sort(values.begin(), values.end());
  const double rank = pct / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

double threshold_at_percentile(const std::vector<SampleScore>& scores, double pct) {
  std::vector<double> v;
  v.reserve(scores.size());
  for (const auto& s : scores) v.push_back(s.ku_mean);
  return threshold_at_percentile(std::move(v), pct);
}

std::vector<SampleScore> rank_scores(std::vector<SampleScore> scores) {
  std::sort(scores.begin(), scores.end(), [](const SampleScore& a, const SampleScore& b) {
    if (a.ku_mean != b.ku_mean) return a.ku_mean < b.ku_mean;
    return a.sample_id < b.sample_id;
  });
  return scores;
}

std::string to_string(DistillMode m) {
  return m == DistillMode::preserve_lowest ? "preserve-lowest" : "remove-lowest";
}

DistillMode parse_distill_mode(const std::string& s) {
  if (s == "preserve-lowest") return DistillMode::preserve_lowest;
  if (s == "remove-lowest") return DistillMode::remove_lowest;
  throw ValidationError("unknown distill mode '" + s + "' (expected preserve-lowest or remove-lowest)");
}

namespace {

std::vector<bool> keep_mask(const std::vector<SampleScore>& scores, double pct, DistillMode mode) {
  if (!(pct >= 0.0 && pct <= 100.0)) throw ValidationError("percentile must lie in [0, 100]");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a].ku_mean != scores[b].ku_mean) return scores[a].ku_mean < scores[b].ku_mean;
    return scores[a].sample_id < scores[b].sample_id;
  });
  const auto low = static_cast<std::size_t>(std::llround(pct * static_cast<double>(scores.size()) / 100.0));
  std::vector<bool> keep(scores.size(), mode == DistillMode::remove_lowest);
  for (std::size_t k = 0; k < low; ++k) keep[order[k]] = mode == DistillMode::preserve_lowest;
  return keep;
}

}  // namespace

DistillReport make_report(const std::vector<SampleScore>& scores, double pct, DistillMode mode) {
  DistillReport r;
  r.mode = mode;
  r.percentile = pct;
  r.threshold = threshold_at_percentile(scores, pct);
  r.ranking = rank_scores(scores);
  const auto keep = keep_mask(r.ranking, pct, mode);
  for (std::size_t k = 0; k < keep.size(); ++k) (keep[k] ? r.kept : r.removed).push_back(r.ranking[k].sample_id);
  return r;
}

Corpus split_preserve_remove(const Corpus& corpus, const std::vector<SampleScore>& scores, double pct,
                             DistillMode mode) {
  if (scores.size() != corpus.samples.size()) {
    throw ValidationError(std::to_string(scores.size()) + " scores for " + std::to_string(corpus.samples.size()) +
                          " samples");
  }
  for (std::size_t k = 0; k < scores.size(); ++k) {
    if (scores[k].sample_id != corpus.samples[k].id) throw ValidationError("scores are not aligned with the corpus");
  }
  const auto keep = keep_mask(scores, pct, mode);
  std::vector<std::size_t> idx;
  for (std::size_t k = 0; k < keep.size(); ++k) {
    if (keep[k]) idx.push_back(k);
  }
  if (idx.empty()) {
    throw ValidationError(to_string(mode) + " at " + fmt_real(pct) + "% leaves no samples");
  }
  return corpus.subset(idx);
}

namespace {

constexpr const char* kReportMagic = "evtraffic-distill-report";
constexpr int kReportVersion = 1;

std::string hex16(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

double parse_real(const std::string& s, const std::string& where) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) throw ValidationError(where + ": bad number '" + s + "'");
  return v;
}

std::uint64_t parse_u64(const std::string& s, const std::string& where, int base = 10) {
  std::size_t used = 0;
  std::uint64_t v = 0;
  try {
    v = std::stoull(s, &used, base);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty() || s[0] == '-') throw ValidationError(where + ": bad integer '" + s + "'");
  return v;
}

}  // namespace

void write_report(const DistillReport& r, std::ostream& out) {
  out << kReportMagic << ' ' << kReportVersion << '\n';
  out << "seed " << r.seed << '\n';
  out << "config_hash " << hex16(r.config_hash) << '\n';
  out << "mode " << to_string(r.mode) << '\n';
  out << "percentile " << fmt_real(r.percentile) << '\n';
  out << "threshold " << fmt_real(r.threshold) << '\n';
  out << "samples " << r.ranking.size() << '\n';
  out << "[ranking]\n";
  for (const auto& s : r.ranking) {
    out << s.sample_id << ',' << fmt_real(s.ku_mean) << ',' << (s.congested ? 1 : 0) << ',' << (s.rare ? 1 : 0)
        << '\n';
  }
  out << "[kept]\n";
  for (auto id : r.kept) out << id << '\n';
  out << "[removed]\n";
  for (auto id : r.removed) out << id << '\n';
  out << "[end]\n";
}

DistillReport read_report(std::istream& in, const std::string& source) {
  DistillReport r;
  std::string line;
  std::size_t lineno = 0;
  auto next = [&]() -> std::string {
    if (!std::getline(in, line)) throw ValidationError(source + ": truncated report");
    ++lineno;
    return line;
  };
  auto where = [&]() { return source + ":" + std::to_string(lineno); };
  auto keyed = [&](const std::string& key) {
    const std::string l = next();
    if (l.rfind(key + ' ', 0) != 0) throw ValidationError(where() + ": expected '" + key + "'");
    return l.substr(key.size() + 1);
  };
  const std::string version = keyed(kReportMagic);
  if (parse_u64(version, where()) != kReportVersion) {
    throw ValidationError(source + ": unsupported report version " + version);
  }
  r.seed = parse_u64(keyed("seed"), where());
  r.config_hash = parse_u64(keyed("config_hash"), where(), 16);
  r.mode = parse_distill_mode(keyed("mode"));
  r.percentile = parse_real(keyed("percentile"), where());
  r.threshold = parse_real(keyed("threshold"), where());
  const auto n = parse_u64(keyed("samples"), where());
  if (next() != "[ranking]") throw ValidationError(where() + ": expected [ranking]");
  for (std::uint64_t k = 0; k < n; ++k) {
    std::istringstream row(next());
    std::string f[4];
    for (auto& x : f) {
      if (!std::getline(row, x, ',')) throw ValidationError(where() + ": ranking row needs 4 fields");
    }
    SampleScore s;
    s.sample_id = parse_u64(f[0], where());
    s.ku_mean = parse_real(f[1], where());
    s.congested = f[2] == "1";
    s.rare = f[3] == "1";
    r.ranking.push_back(s);
  }
  if (next() != "[kept]") throw ValidationError(where() + ": expected [kept]");
  auto* list = &r.kept;
  while (true) {
    const std::string l = next();
    if (l == "[removed]" && list == &r.kept) {
      list = &r.removed;
      continue;
    }
    if (l == "[end]" && list == &r.removed) break;
    list->push_back(parse_u64(l, where()));
  }
  if (r.kept.size() + r.removed.size() != r.ranking.size()) {
    throw ValidationError(source + ": kept and removed lists do not cover the ranking");
  }
  return r;
}

void save_report(const DistillReport& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open " + path.string() + " for writing");
  write_report(r, out);
}

DistillReport load_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open report " + path.string());
  return read_report(in, path.string());
}

void write_scores_csv(const std::vector<SampleScore>& scores, std::ostream& out) {
  out << "sample_id,ku_mean,congested,rare\n";
  for (const auto& s : scores) {
    out << s.sample_id << ',' << fmt_real(s.ku_mean) << ',' << (s.congested ? 1 : 0) << ',' << (s.rare ? 1 : 0)
        << '\n';
  }
}

namespace {

bool well_formed(const Sample& s, std::size_t block) {
  if (s.speed.size() != block || s.flow.size() != block) return false;
  for (std::size_t k = 0; k < block; ++k) {
    if (!std::isfinite(s.speed[k]) || !std::isfinite(s.flow[k])) return false;
  }
  return true;
}

}  // namespace

StreamResult stream_filter(const ModelCheckpoint& ckpt, double threshold, const Corpus& incoming,
                           std::size_t log_window, Exec exec) {
  if (log_window == 0) throw ValidationError("log window must be positive");
  if (std::isnan(threshold)) throw ValidationError("threshold is NaN");
  check_compatible(ckpt, incoming);
  const std::size_t block = static_cast<std::size_t>(incoming.window()) * incoming.nodes();
  std::vector<std::size_t> good;
  std::vector<bool> ok(incoming.samples.size());
  for (std::size_t k = 0; k < incoming.samples.size(); ++k) {
    ok[k] = well_formed(incoming.samples[k], block);
    if (ok[k]) good.push_back(k);
  }
  const Corpus clean = incoming.subset(good);

  StreamResult res;
  res.incoming = incoming.samples.size();
  res.malformed = res.incoming - good.size();
  if (!good.empty()) res.scores = score_samples(ckpt, clean, exec);
  std::vector<bool> accept(res.incoming, false);
  std::vector<std::size_t> kept;
  for (std::size_t g = 0; g < good.size(); ++g) {
    if (res.scores[g].ku_mean > threshold) {
      accept[good[g]] = true;
      kept.push_back(g);
    }
  }
  res.kept = clean.subset(kept);
  for (std::size_t first = 0; first < res.incoming; first += log_window) {
    StreamWindow w;
    w.index = res.log.size();
    w.first = first;
    w.count = std::min(log_window, res.incoming - first);
    for (std::size_t k = first; k < first + w.count; ++k) {
      w.accepted += accept[k] ? 1 : 0;
      w.malformed += ok[k] ? 0 : 1;
    }
    w.rate = static_cast<double>(w.accepted) / static_cast<double>(w.count);
    res.log.push_back(w);
  }
  return res;
}

void write_stream_log(const std::vector<StreamWindow>& log, std::ostream& out) {
  out << "window,first,count,accepted,malformed,rate\n";
  for (const auto& w : log) {
    out << w.index << ',' << w.first << ',' << w.count << ',' << w.accepted << ',' << w.malformed << ','
        << fmt_real(w.rate) << '\n';
  }
}

}  // namespace evtraffic
