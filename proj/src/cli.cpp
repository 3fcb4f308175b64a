#include "evtraffic/cli.hpp"

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <ostream>

#include "evtraffic/checkpoint.hpp"
#include "evtraffic/corpus.hpp"
#include "evtraffic/distill.hpp"
#include "evtraffic/errors.hpp"
#include "evtraffic/format.hpp"
#include "evtraffic/metrics.hpp"
#include "evtraffic/synthetic.hpp"
#include "evtraffic/train.hpp"

namespace evtraffic::cli {

namespace {

namespace fs = std::filesystem;

constexpr const char* kVersion = "evtraffic 1.0.0";

void require_file(const std::string& path, const char* what) {
  if (!fs::is_regular_file(path)) throw ValidationError(std::string(what) + " '" + path + "' does not exist");
}

void require_writable(const std::string& path) {
  if (path.empty()) return;
  const fs::path parent = fs::absolute(path).parent_path();
  if (!fs::is_directory(parent)) throw ValidationError("output directory '" + parent.string() + "' does not exist");
}

std::ofstream open_text(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot open " + path + " for writing");
  return out;
}

struct SimulateArgs {
  SyntheticRecipe recipe;
  std::string graph;
  std::string out;
  std::string csv;
};

struct TrainArgs {
  std::string corpus;
  std::string out;
  std::string log;
  std::string resume;
  ModelConfig cfg;
  int degree_speed = 0;
  int degree_flow = 0;
  std::uint64_t seed = 0;
};

struct EvaluateArgs {
  std::string checkpoint;
  std::string corpus;
  std::string out;
  std::string calibration;
};

struct DistillArgs {
  std::string checkpoint;
  std::string corpus;
  std::string out;
  std::string scores;
  std::string filtered;
  std::string retrain;
  std::string retrain_log;
  std::string test;
  std::string curve;
  std::vector<double> curve_pcts{10.0, 30.0, 50.0, 70.0, 90.0};
  std::string mode = "remove-lowest";
  double pct = 70.0;
  double preserve_lowest = 0.0;
  double remove_lowest = 0.0;
};

struct StreamArgs {
  std::string checkpoint;
  std::string incoming;
  std::string report;
  std::string out;
  std::string log;
  std::string merge;
  std::string merged;
  double threshold = 0.0;
  std::size_t window = 100;
};

int cmd_simulate(const SimulateArgs& a, std::ostream& out) {
  require_writable(a.out);
  require_writable(a.csv);
  RoadGraph g = synthetic_graph(a.recipe);
  if (!a.graph.empty()) {
    require_file(a.graph, "graph file");
    g = load_graph(a.graph);
  }
  const Corpus c = synthetic_corpus(a.recipe, g);
  save_corpus(c, a.out);
  if (!a.csv.empty()) {
    auto f = open_text(a.csv);
    export_corpus_csv(c, f);
  }
  std::size_t rare = 0;
  for (const auto& s : c.samples) rare += s.rare ? 1 : 0;
  const std::size_t scenarios = a.recipe.peaks.size() * static_cast<std::size_t>(a.recipe.copies) +
                                static_cast<std::size_t>(a.recipe.incident_scenarios);
  out << "scenarios " << scenarios << " samples " << c.samples.size() << " rare " << rare << " common "
      << c.samples.size() - rare << '\n';
  return kExitOk;
}

void print_epochs(const TrainLog& log, std::ostream& out) {
  for (const auto& e : log.epochs) {
    out << "epoch " << e.epoch << " iteration " << e.iteration << " p " << fmt_real(e.p) << " loss "
        << fmt_real(e.loss) << '\n';
  }
}

int cmd_train(const TrainArgs& a, const CLI::App& sub, std::ostream& out) {
  require_file(a.corpus, "corpus");
  require_writable(a.out);
  require_writable(a.log);
  const Corpus corpus = load_corpus(a.corpus);
  ModelCheckpoint ckpt;
  if (!a.resume.empty()) {
    require_file(a.resume, "checkpoint");
    ckpt = load_checkpoint(a.resume);
    if (sub.count("--steps")) ckpt.config.steps = a.cfg.steps;
    if (sub.count("--epochs")) ckpt.config.epochs = a.cfg.epochs;
    ckpt.config.validate();
  } else {
    ModelConfig cfg = a.cfg;
    cfg.encoder_steps = corpus.window_in;
    cfg.decoder_steps = corpus.window_out;
    cfg.degree_speed = a.degree_speed > 0 ? a.degree_speed : select_degree(0.3, corpus.graph);
    cfg.degree_flow = a.degree_flow > 0 ? a.degree_flow : select_degree(2.0, corpus.graph);
    cfg.validate();
    ckpt = initial_checkpoint(cfg, corpus.graph, a.seed);
  }
  const TrainLog log = train(corpus, ckpt);
  save_checkpoint(ckpt, a.out);
  if (!a.log.empty()) {
    auto f = open_text(a.log);
    write_train_log(log, f);
  }
  print_epochs(log, out);
  out << "iterations " << ckpt.iteration << " checkpoint " << a.out << '\n';
  return kExitOk;
}

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
  require_file(a.checkpoint, "checkpoint");
  require_file(a.corpus, "corpus");
  require_writable(a.out);
  require_writable(a.calibration);
  const auto ckpt = load_checkpoint(a.checkpoint);
  const auto corpus = load_corpus(a.corpus);
  const auto pred = predict(ckpt, corpus);
  const auto rows = error_metrics(pred, corpus);
  {
    auto f = open_text(a.out);
    write_error_csv(rows, f);
  }
  if (!a.calibration.empty()) {
    auto f = open_text(a.calibration);
    write_calibration_csv(calibration_report(pred, corpus), f);
  }
  const auto& all = rows.back();
  out << "speed mae " << fmt_real(all.speed_mae) << " mape " << fmt_real(all.speed_mape) << " rmse "
      << fmt_real(all.speed_rmse) << " weighted_mae " << fmt_real(all.speed_wmae) << '\n';
  out << "flow mae " << fmt_real(all.flow_mae) << " mape " << fmt_real(all.flow_mape) << " rmse "
      << fmt_real(all.flow_rmse) << '\n';
  return kExitOk;
}

/// Fresh model with the checkpoint's hyperparameters and seed, trained for
/// the same number of iterations on `data`.
ModelCheckpoint retrain(const ModelCheckpoint& base, const Corpus& data, TrainLog* log = nullptr) {
  ModelConfig cfg = base.config;
  if (base.iteration > 0) cfg.steps = static_cast<int>(base.iteration);
  ModelCheckpoint fresh = initial_checkpoint(cfg, base.graph, base.seed);
  TrainLog l = train(data, fresh);
  if (log) *log = std::move(l);
  return fresh;
}

int cmd_distill(const DistillArgs& a, const CLI::App& sub, std::ostream& out) {
  require_file(a.checkpoint, "checkpoint");
  require_file(a.corpus, "corpus");
  for (const auto* p : {&a.out, &a.scores, &a.filtered, &a.retrain, &a.retrain_log, &a.curve}) require_writable(*p);
  if (!a.curve.empty() && a.test.empty()) throw ValidationError("--curve needs a held-out --test corpus");
  if (!a.test.empty()) require_file(a.test, "test corpus");

  DistillMode mode = parse_distill_mode(a.mode);
  double pct = a.pct;
  if (sub.count("--preserve-lowest")) {
    mode = DistillMode::preserve_lowest;
    pct = a.preserve_lowest;
  } else if (sub.count("--remove-lowest")) {
    mode = DistillMode::remove_lowest;
    pct = a.remove_lowest;
  }

  const auto ckpt = load_checkpoint(a.checkpoint);
  const auto corpus = load_corpus(a.corpus);
  const auto scores = score_samples(ckpt, corpus);
  const Corpus filtered = split_preserve_remove(corpus, scores, pct, mode);
  DistillReport report = make_report(scores, pct, mode);
  report.seed = ckpt.seed;
  report.config_hash = ckpt.config_hash();
  save_report(report, a.out);
  if (!a.scores.empty()) {
    auto f = open_text(a.scores);
    write_scores_csv(scores, f);
  }
  if (!a.filtered.empty()) save_corpus(filtered, a.filtered);
  out << "mode " << to_string(mode) << " percentile " << fmt_real(pct) << " threshold " << fmt_real(report.threshold)
      << " kept " << report.kept.size() << " removed " << report.removed.size() << '\n';

  if (!a.retrain.empty()) {
    TrainLog log;
    const auto second = retrain(ckpt, filtered, &log);
    save_checkpoint(second, a.retrain);
    if (!a.retrain_log.empty()) {
      auto f = open_text(a.retrain_log);
      write_train_log(log, f);
    }
    out << "retrained on " << filtered.samples.size() << " samples for " << second.iteration << " iterations\n";
  }

  if (!a.curve.empty()) {
    const auto test = load_corpus(a.test);
    auto f = open_text(a.curve);
    f << "mode,pct,samples,threshold,speed_mae,speed_wmae,speed_rmse\n";
    for (const auto m : {DistillMode::preserve_lowest, DistillMode::remove_lowest}) {
      for (double x : a.curve_pcts) {
        const double th = threshold_at_percentile(scores, x);
        Corpus part;
        try {
          part = split_preserve_remove(corpus, scores, x, m);
        } catch (const ValidationError&) {
          continue;
        }
        const auto model = retrain(ckpt, part);
        const auto& all = error_metrics(predict(model, test), test).back();
        f << to_string(m) << ',' << fmt_real(x) << ',' << part.samples.size() << ',' << fmt_real(th) << ','
          << fmt_real(all.speed_mae) << ',' << fmt_real(all.speed_wmae) << ',' << fmt_real(all.speed_rmse) << '\n';
        out << "curve " << to_string(m) << ' ' << fmt_real(x) << " weighted_mae " << fmt_real(all.speed_wmae)
            << '\n';
      }
    }
  }
  return kExitOk;
}

int cmd_stream(const StreamArgs& a, const CLI::App& sub, std::ostream& out) {
  const bool has_threshold = sub.count("--threshold") > 0;
  if (has_threshold == !a.report.empty()) {
    throw CLI::ValidationError("stream", "exactly one of --threshold or --report is required");
  }
  require_file(a.checkpoint, "checkpoint");
  require_file(a.incoming, "incoming corpus");
  if (!a.merge.empty()) require_file(a.merge, "corpus to merge with");
  if (a.merge.empty() != a.merged.empty()) throw CLI::ValidationError("stream", "--merge and --merged go together");
  for (const auto* p : {&a.out, &a.log, &a.merged}) require_writable(*p);

  const auto ckpt = load_checkpoint(a.checkpoint);
  double threshold = a.threshold;
  if (!has_threshold) {
    require_file(a.report, "report");
    const auto report = load_report(a.report);
    if (report.config_hash != ckpt.config_hash()) {
      throw ValidationError("report " + a.report + " was produced by a different checkpoint");
    }
    threshold = report.threshold;
  }
  const auto incoming = load_corpus(a.incoming);
  const auto res = stream_filter(ckpt, threshold, incoming, a.window);
  save_corpus(res.kept, a.out);
  if (!a.log.empty()) {
    auto f = open_text(a.log);
    write_stream_log(res.log, f);
  }
  if (!a.merge.empty()) save_corpus(merge_corpora(load_corpus(a.merge), res.kept), a.merged);
  const double rate = res.incoming ? static_cast<double>(res.accepted()) / static_cast<double>(res.incoming) : 0.0;
  out << "threshold " << fmt_real(threshold) << " incoming " << res.incoming << " accepted " << res.accepted()
      << " malformed " << res.malformed << " rate " << fmt_real(rate) << '\n';
  if (res.malformed) out << "warning: skipped " << res.malformed << " malformed samples\n";
  return kExitOk;
}

void add_recipe_options(CLI::App& s, SyntheticRecipe& r) {
  s.add_option("--nodes", r.nodes, "Chain length")->capture_default_str();
  s.add_option("--lanes", r.lanes, "Lanes upstream of the lane drop")->capture_default_str();
  s.add_option("--bottleneck", r.bottleneck, "First node after the lane drop")->capture_default_str();
  s.add_option("--horizon", r.horizon, "Output steps per scenario")->capture_default_str();
  s.add_option("--peaks", r.peaks, "Peak demand of each recurrent profile, veh/h")->delimiter(',');
  s.add_option("--base-demand", r.base_demand, "Off-peak demand, veh/h")->capture_default_str();
  s.add_option("--copies", r.copies, "Noisy replays of each profile")->capture_default_str();
  s.add_option("--incidents", r.incident_scenarios, "Scenarios with an incident")->capture_default_str();
  s.add_option("--incident-start", r.incident_start, "Incident start step")->capture_default_str();
  s.add_option("--incident-duration", r.incident_duration, "Incident length in steps")->capture_default_str();
  s.add_option("--incident-drop", r.incident_drop, "Fraction of capacity lost")->capture_default_str();
  s.add_option("--noise", r.noise_sigma, "Lognormal demand noise sigma")->capture_default_str();
  s.add_option("--window-in", r.window_in, "Encoder steps per sample")->capture_default_str();
  s.add_option("--window-out", r.window_out, "Decoder steps per sample")->capture_default_str();
  s.add_option("--stride", r.stride, "Steps between window starts")->capture_default_str();
  s.add_option("--seed", r.seed, "Random seed")->capture_default_str();
}

void add_model_options(CLI::App& s, TrainArgs& a) {
  ModelConfig& c = a.cfg;
  s.add_option("--seed", a.seed, "Initialisation and sampling seed")->capture_default_str();
  s.add_option("--hidden", c.hidden_dim, "Hidden units per node")->capture_default_str();
  s.add_option("--degree-speed", a.degree_speed, "Speed kernel degree (default from the CFL rule)");
  s.add_option("--degree-flow", a.degree_flow, "Flow kernel degree (default from the CFL rule)");
  s.add_option("--key-dim", c.key_dim, "Query/key width")->capture_default_str();
  s.add_option("--transform-dim", c.transform_dim, "Node transform width")->capture_default_str();
  s.add_option("--epsilon", c.epsilon, "Regularizer weight")->capture_default_str();
  s.add_option("--decay-c", c.decay_c, "Scheduled-sampling decay")->capture_default_str();
  s.add_option("--flow-weight", c.flow_loss_weight, "Flow loss weight")->capture_default_str();
  s.add_option("--input-var", c.input_total_var, "Total variance of observed inputs")->capture_default_str();
  s.add_option("--reg-floor", c.regularizer_floor, "Regularizer clip floor (nan disables)")->capture_default_str();
  s.add_option("--gain-nu", c.gain_nu, "Head gain for nu")->capture_default_str();
  s.add_option("--gain-alpha", c.gain_alpha, "Head gain for alpha")->capture_default_str();
  s.add_option("--gain-beta", c.gain_beta, "Head gain for beta")->capture_default_str();
  s.add_option("--lr", c.learning_rate, "Adam learning rate")->capture_default_str();
  s.add_option("--batch-size", c.batch_size, "Samples per batch")->capture_default_str();
  s.add_option("--epochs", c.epochs, "Training epochs")->capture_default_str();
  s.add_option("--steps", c.steps, "Exact iteration count, overrides --epochs when positive")->capture_default_str();
  s.add_option("--grad-clip", c.grad_clip, "Global gradient-norm clip, 0 disables")->capture_default_str();
  s.add_option("--init-alpha", c.init_alpha, "Initial predicted alpha, 0 keeps a zero head bias")->capture_default_str();
  s.add_option("--init-std", c.init_std, "Initial predicted total std in km/h")->capture_default_str();
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Uncertainty-aware traffic forecasting and dataset distillation", "evtraffic"};
  app.set_version_flag("--version", kVersion);
  app.set_config("--config", "", "Read options from a key = value file ([command] sections)");
  app.require_subcommand(1);
  app.fallthrough();
  app.allow_config_extras(CLI::config_extras_mode::error);

  SimulateArgs sim;
  auto* s_sim = app.add_subcommand("simulate", "Simulate scenarios and write a corpus");
  s_sim->add_option("--out", sim.out, "Corpus file to write")->required();
  s_sim->add_option("--csv", sim.csv, "Also export the corpus as CSV");
  s_sim->add_option("--graph", sim.graph, "Graph text file (default: chain with a lane drop)");
  add_recipe_options(*s_sim, sim.recipe);

  TrainArgs tr;
  auto* s_train = app.add_subcommand("train", "Train a model on a corpus");
  s_train->add_option("--corpus", tr.corpus, "Training corpus")->required();
  s_train->add_option("--out", tr.out, "Checkpoint to write")->required();
  s_train->add_option("--log", tr.log, "Per-epoch CSV log");
  s_train->add_option("--resume", tr.resume, "Continue from this checkpoint");
  add_model_options(*s_train, tr);

  EvaluateArgs ev;
  auto* s_eval = app.add_subcommand("evaluate", "Forecast errors and calibration on a corpus");
  s_eval->add_option("--checkpoint", ev.checkpoint, "Trained checkpoint")->required();
  s_eval->add_option("--corpus", ev.corpus, "Test corpus")->required();
  s_eval->add_option("--out", ev.out, "Metrics CSV")->required();
  s_eval->add_option("--calibration", ev.calibration, "Per-horizon calibration CSV");

  DistillArgs di;
  auto* s_dist = app.add_subcommand("distill", "Rank samples by knowledge uncertainty and filter the corpus");
  s_dist->add_option("--checkpoint", di.checkpoint, "Trained checkpoint")->required();
  s_dist->add_option("--corpus", di.corpus, "Corpus to rank")->required();
  s_dist->add_option("--out", di.out, "Report file")->required();
  auto* o_mode = s_dist->add_option("--mode", di.mode, "preserve-lowest or remove-lowest")
                     ->check(CLI::IsMember({"preserve-lowest", "remove-lowest"}))
                     ->capture_default_str();
  auto* o_pct = s_dist->add_option("--pct", di.pct, "Percentage of lowest-ranked samples")
                    ->check(CLI::Range(0.0, 100.0))
                    ->capture_default_str();
  auto* o_pres = s_dist->add_option("--preserve-lowest", di.preserve_lowest, "Shorthand for --mode preserve-lowest --pct")
                     ->check(CLI::Range(0.0, 100.0));
  auto* o_rem = s_dist->add_option("--remove-lowest", di.remove_lowest, "Shorthand for --mode remove-lowest --pct")
                    ->check(CLI::Range(0.0, 100.0));
  o_pres->excludes(o_mode)->excludes(o_pct)->excludes(o_rem);
  o_rem->excludes(o_mode)->excludes(o_pct);
  s_dist->add_option("--scores", di.scores, "Per-sample scores CSV");
  s_dist->add_option("--filtered", di.filtered, "Filtered corpus");
  s_dist->add_option("--retrain", di.retrain, "Retrain from scratch on the filtered corpus and write this checkpoint");
  s_dist->add_option("--retrain-log", di.retrain_log, "Per-epoch CSV log of the retraining");
  s_dist->add_option("--test", di.test, "Held-out corpus for --curve");
  s_dist->add_option("--curve", di.curve, "Preserve/remove curve CSV (one retraining per point)");
  s_dist->add_option("--curve-pcts", di.curve_pcts, "Percentages for --curve")
      ->delimiter(',')
      ->check(CLI::Range(0.0, 100.0));

  StreamArgs st;
  auto* s_stream = app.add_subcommand("stream", "Filter incoming samples against a distillation threshold");
  s_stream->add_option("--checkpoint", st.checkpoint, "Trained checkpoint")->required();
  s_stream->add_option("--incoming", st.incoming, "Incoming corpus")->required();
  s_stream->add_option("--out", st.out, "Corpus of accepted samples")->required();
  s_stream->add_option("--threshold", st.threshold, "Knowledge-uncertainty threshold, km/h");
  s_stream->add_option("--report", st.report, "Take the threshold from this report");
  s_stream->add_option("--log", st.log, "Per-window acceptance CSV");
  s_stream->add_option("--window", st.window, "Samples per log window")->check(CLI::PositiveNumber)->capture_default_str();
  s_stream->add_option("--merge", st.merge, "Corpus to append the accepted samples to");
  s_stream->add_option("--merged", st.merged, "Merged corpus to write");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*s_sim) return cmd_simulate(sim, out);
    if (*s_train) return cmd_train(tr, *s_train, out);
    if (*s_eval) return cmd_evaluate(ev, out);
    if (*s_dist) return cmd_distill(di, *s_dist, out);
    if (*s_stream) return cmd_stream(st, *s_stream, out);
  } catch (const CLI::Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace evtraffic::cli
