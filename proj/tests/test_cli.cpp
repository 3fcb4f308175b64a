#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "doctest.h"
#include "evtraffic/checkpoint.hpp"
#include "evtraffic/cli.hpp"
#include "evtraffic/corpus.hpp"
#include "evtraffic/distill.hpp"
#include "evtraffic/errors.hpp"

using namespace evtraffic;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out;
  std::string err;
};

Run cli_run(std::vector<std::string> args) {
  std::ostringstream out, err;
  Run r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path workdir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "evtraffic-cli-test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string path(const std::string& name) { return (workdir() / name).string(); }

std::string slurp(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::vector<std::string>> read_csv(const std::string& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> row;
    std::istringstream fields(line);
    std::string f;
    while (std::getline(fields, f, ',')) row.push_back(f);
    rows.push_back(row);
  }
  return rows;
}

const std::vector<std::string> kSmallRecipe = {"--nodes",   "6", "--bottleneck", "4",      "--peaks",     "2400,4200",
                                               "--copies",  "2", "--incidents",  "1",      "--horizon",   "24",
                                               "--window-in", "4", "--window-out", "3", "--incident-start", "2",
                                               "--incident-duration", "6", "--stride", "3"};

const std::vector<std::string> kSmallModel = {"--hidden", "4",  "--key-dim", "2", "--transform-dim", "3",
                                              "--batch-size", "4", "--steps", "6"};

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

/// Corpus and checkpoint shared by the later cases.
void ensure_trained() {
  static bool done = false;
  if (done) return;
  REQUIRE(cli_run(cat({"simulate", "--out", path("small.evtc"), "--seed", "3"}, kSmallRecipe)).code == 0);
  REQUIRE(cli_run(cat({"train", "--corpus", path("small.evtc"), "--out", path("small.evtm"), "--log",
                       path("small.log.csv"), "--seed", "5"},
                      kSmallModel))
              .code == 0);
  done = true;
}

}  // namespace

TEST_CASE("usage errors exit with code 1") {
  CHECK(cli_run({}).code == cli::kExitUsage);
  CHECK(cli_run({"bogus"}).code == cli::kExitUsage);
  CHECK(cli_run({"simulate"}).code == cli::kExitUsage);
  CHECK(cli_run({"simulate", "--out", path("x.evtc"), "-n", "3"}).code == cli::kExitUsage);
  CHECK(cli_run({"distill", "--checkpoint", "a", "--corpus", "b", "--out", "c", "--mode", "keep-all"}).code ==
        cli::kExitUsage);
  CHECK(cli_run({"distill", "--checkpoint", "a", "--corpus", "b", "--out", "c", "--pct", "120"}).code ==
        cli::kExitUsage);
  const auto help = cli_run({"train", "--help"});
  CHECK(help.code == cli::kExitOk);
  CHECK(help.out.find("--decay-c") != std::string::npos);
  CHECK(cli_run({"--version"}).code == cli::kExitOk);
}

TEST_CASE("simulate") {
  const std::vector<std::string> minimal = {"--nodes", "10", "--bottleneck", "7", "--peaks", "3000",
                                            "--copies", "1", "--incidents", "0", "--horizon"};
  auto r = cli_run(cat(cat({"simulate", "--out", path("one.evtc"), "--csv", path("one.csv")}, minimal), {"35"}));
  REQUIRE(r.code == 0);
  CHECK(r.out.find("samples 1 rare 0") != std::string::npos);
  const auto c = load_corpus(path("one.evtc"));
  CHECK(c.samples.size() == 1);
  CHECK(c.nodes() == 10);
  CHECK(read_csv(path("one.csv")).size() == 1 + 10 * 35);

  REQUIRE(cli_run(cat(cat({"simulate", "--out", path("one_again.evtc")}, minimal), {"35"})).code == 0);
  CHECK(slurp(path("one.evtc")) == slurp(path("one_again.evtc")));

  r = cli_run(cat(cat({"simulate", "--out", path("short.evtc")}, minimal), {"34"}));
  CHECK(r.code == cli::kExitData);
  CHECK(r.err.find("horizon shorter than window") != std::string::npos);
  CHECK_FALSE(fs::exists(path("short.evtc")));

  CHECK(cli_run({"simulate", "--out", path("missing_dir/x.evtc")}).code == cli::kExitData);
  CHECK(cli_run({"simulate", "--out", path("g.evtc"), "--graph", path("no_such_graph.txt")}).code ==
        cli::kExitData);

  {
    std::ofstream g(path("graph.txt"));
    g << "[grid]\ndelta_t_min = 2\n[nodes]\nid,length_km,lanes\na,0.4,3\nb,0.4,3\nc,0.4,2\nd,0.4,2\n"
         "[edges]\nfrom_id,to_id\na,b\nb,c\nc,d\n";
  }
  r = cli_run({"simulate", "--out", path("g.evtc"), "--graph", path("graph.txt"), "--bottleneck", "2", "--peaks",
               "3000", "--copies", "1", "--incidents", "1", "--horizon", "40"});
  REQUIRE(r.code == 0);
  const auto gc = load_corpus(path("g.evtc"));
  CHECK(gc.nodes() == 4);
  CHECK(gc.graph.nodes()[3].id == "d");
  CHECK(gc.samples.size() == 2 * 3);
}

TEST_CASE("config file with command-line precedence") {
  {
    std::ofstream f(path("sim.toml"));
    f << "[simulate]\nnodes = 6\nbottleneck = 4\npeaks = [2400, 4200]\ncopies = 2\nincidents = 0\nhorizon = 40\n";
  }
  auto r = cli_run({"simulate", "--config", path("sim.toml"), "--out", path("cfg.evtc"), "--copies", "3"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("scenarios 6 ") != std::string::npos);
  CHECK(load_corpus(path("cfg.evtc")).nodes() == 6);
  {
    std::ofstream f(path("flat.toml"));
    f << "nodes = 6\n";
  }
  CHECK(cli_run({"simulate", "--config", path("flat.toml"), "--out", path("cfg2.evtc")}).code == cli::kExitUsage);
}

TEST_CASE("train") {
  ensure_trained();
  const auto ck = load_checkpoint(path("small.evtm"));
  CHECK(ck.iteration == 6);
  CHECK(ck.seed == 5);
  CHECK(ck.config.epsilon == 0.01);
  CHECK(ck.config.decay_c == 1.25e-4);
  CHECK(ck.config.encoder_steps == 4);
  CHECK(ck.config.decoder_steps == 3);
  CHECK(ck.config.degree_speed == 2);
  CHECK(ck.config.degree_flow == 11);

  const auto log = read_csv(path("small.log.csv"));
  REQUIRE(log.size() >= 2);
  CHECK(log[0] == std::vector<std::string>{"epoch", "iteration", "p", "loss"});
  for (std::size_t k = 1; k < log.size(); ++k) {
    const double i = std::stod(log[k][1]);
    CHECK(std::abs(std::stod(log[k][2]) - std::exp(-1.25e-4 * i)) <= 1e-12);
  }

  REQUIRE(cli_run(cat({"train", "--corpus", path("small.evtc"), "--out", path("small2.evtm"), "--log",
                       path("small2.log.csv"), "--seed", "5"},
                      kSmallModel))
              .code == 0);
  CHECK(slurp(path("small.evtm")) == slurp(path("small2.evtm")));
  CHECK(slurp(path("small.log.csv")) == slurp(path("small2.log.csv")));

  auto r = cli_run(cat({"train", "--corpus", path("small.evtc"), "--out", path("eps.evtm"), "--epsilon", "0.05",
                        "--decay-c", "0.01", "--seed", "5"},
                       kSmallModel));
  REQUIRE(r.code == 0);
  const auto eps = load_checkpoint(path("eps.evtm"));
  CHECK(eps.config.epsilon == 0.05);
  CHECK(eps.config.decay_c == 0.01);

  r = cli_run({"train", "--resume", path("small.evtm"), "--corpus", path("small.evtc"), "--out",
               path("resumed.evtm"), "--log", path("resumed.log.csv"), "--steps", "4"});
  REQUIRE(r.code == 0);
  CHECK(load_checkpoint(path("resumed.evtm")).iteration == 10);
  const auto rlog = read_csv(path("resumed.log.csv"));
  REQUIRE(rlog.size() >= 2);
  CHECK(std::stoull(rlog[1][1]) >= 6);
  CHECK(std::stod(rlog.back()[2]) == doctest::Approx(std::exp(-1.25e-4 * 9.0)).epsilon(1e-12));

  {
    std::ofstream f(path("train.toml"));
    f << "[train]\nsteps = 2\nhidden = 4\nkey-dim = 2\ntransform-dim = 3\nbatch-size = 4\n";
  }
  REQUIRE(cli_run({"train", "--config", path("train.toml"), "--corpus", path("small.evtc"), "--out",
                   path("cfg.evtm"), "--steps", "3"})
              .code == 0);
  CHECK(load_checkpoint(path("cfg.evtm")).iteration == 3);

  r = cli_run(cat({"train", "--corpus", path("small.evtc"), "--out", path("nan.evtm"), "--lr", "1e300",
                   "--grad-clip", "0"},
                  kSmallModel));
  CHECK(r.code == cli::kExitNumerical);
  CHECK(r.err.find("batch") != std::string::npos);
  CHECK(cli_run({"train", "--corpus", path("nope.evtc"), "--out", path("x.evtm")}).code == cli::kExitData);
}

TEST_CASE("evaluate") {
  ensure_trained();
  auto r = cli_run({"evaluate", "--checkpoint", path("small.evtm"), "--corpus", path("small.evtc"), "--out",
                    path("metrics.csv"), "--calibration", path("calib.csv")});
  REQUIRE(r.code == 0);
  const auto rows = read_csv(path("metrics.csv"));
  REQUIRE(rows.size() == 1 + 3 + 1);
  CHECK(rows[0][0] == "horizon");
  CHECK(rows.back()[0] == "all");
  for (std::size_t k = 1; k < rows.size(); ++k) CHECK(std::stod(rows[k][4]) >= std::stod(rows[k][1]));
  const auto cal = read_csv(path("calib.csv"));
  REQUIRE(cal.size() == 4);
  for (std::size_t k = 1; k < cal.size(); ++k) {
    CHECK(std::stod(cal[k][7]) == doctest::Approx(std::stod(cal[k][5]) + std::stod(cal[k][6])).epsilon(1e-9));
  }

  REQUIRE(cli_run({"evaluate", "--checkpoint", path("small.evtm"), "--corpus", path("small.evtc"), "--out",
                   path("metrics2.csv")})
              .code == 0);
  CHECK(slurp(path("metrics.csv")) == slurp(path("metrics2.csv")));

  REQUIRE(cli_run({"simulate", "--out", path("seven.evtc"), "--nodes", "7", "--bottleneck", "4", "--peaks", "3000",
                   "--copies", "1", "--incidents", "0", "--horizon", "10", "--window-in", "4", "--window-out", "3"})
              .code == 0);
  r = cli_run({"evaluate", "--checkpoint", path("small.evtm"), "--corpus", path("seven.evtc"), "--out",
               path("m3.csv")});
  CHECK(r.code == cli::kExitData);
  CHECK(r.err.find("nodes") != std::string::npos);
}

TEST_CASE("distill") {
  ensure_trained();
  auto r = cli_run({"distill", "--checkpoint", path("small.evtm"), "--corpus", path("small.evtc"), "--out",
                    path("all.report"), "--preserve-lowest", "100"});
  REQUIRE(r.code == 0);
  const auto corpus = load_corpus(path("small.evtc"));
  const auto all = load_report(path("all.report"));
  CHECK(all.kept.size() == corpus.samples.size());
  CHECK(all.removed.empty());
  CHECK(all.mode == DistillMode::preserve_lowest);

  r = cli_run({"distill", "--checkpoint", path("small.evtm"), "--corpus", path("small.evtc"), "--out",
               path("r70.report"), "--mode", "remove-lowest", "--pct", "70", "--scores", path("scores.csv"),
               "--filtered", path("r70.evtc"), "--retrain", path("r70.evtm"), "--retrain-log", path("r70.log.csv")});
  REQUIRE(r.code == 0);
  const auto rep = load_report(path("r70.report"));
  const auto ck = load_checkpoint(path("small.evtm"));
  CHECK(rep.seed == ck.seed);
  CHECK(rep.config_hash == ck.config_hash());
  CHECK(rep.percentile == 70.0);
  const auto rows = read_csv(path("scores.csv"));
  REQUIRE(rows.size() == corpus.samples.size() + 1);
  std::vector<double> ku;
  for (std::size_t k = 1; k < rows.size(); ++k) ku.push_back(std::stod(rows[k][1]));
  CHECK(rep.threshold == threshold_at_percentile(ku, 70));
  const auto filtered = load_corpus(path("r70.evtc"));
  CHECK(filtered.samples.size() == rep.kept.size());
  CHECK(filtered.samples.size() == corpus.samples.size() - static_cast<std::size_t>(std::llround(0.7 * corpus.samples.size())));
  for (const auto& s : filtered.samples) CHECK(std::find(rep.kept.begin(), rep.kept.end(), s.id) != rep.kept.end());
  const auto second = load_checkpoint(path("r70.evtm"));
  CHECK(second.iteration == ck.iteration);
  CHECK(second.seed == ck.seed);
  CHECK_FALSE(second.params == ck.params);

  REQUIRE(cli_run({"distill", "--checkpoint", path("small.evtm"), "--corpus", path("small.evtc"), "--out",
                   path("r70b.report"), "--remove-lowest", "70"})
              .code == 0);
  CHECK(slurp(path("r70.report")) == slurp(path("r70b.report")));

  r = cli_run({"distill", "--checkpoint", path("small.evtm"), "--corpus", path("small.evtc"), "--out",
               path("none.report"), "--remove-lowest", "100"});
  CHECK(r.code == cli::kExitData);
  CHECK(r.err.find("leaves no samples") != std::string::npos);
  CHECK(cli_run({"distill", "--checkpoint", path("small.evtm"), "--corpus", path("small.evtc"), "--out",
                 path("x.report"), "--remove-lowest", "50", "--mode", "preserve-lowest"})
            .code == cli::kExitUsage);

  r = cli_run({"distill", "--checkpoint", path("small.evtm"), "--corpus", path("small.evtc"), "--out",
               path("c.report"), "--test", path("small.evtc"), "--curve", path("curve.csv"), "--curve-pcts", "50"});
  REQUIRE(r.code == 0);
  const auto curve = read_csv(path("curve.csv"));
  REQUIRE(curve.size() == 3);
  CHECK(curve[0][0] == "mode");
  CHECK(curve[1][0] == "preserve-lowest");
  CHECK(curve[2][0] == "remove-lowest");
}

TEST_CASE("stream") {
  ensure_trained();
  REQUIRE(cli_run({"distill", "--checkpoint", path("small.evtm"), "--corpus", path("small.evtc"), "--out",
                   path("p0.report"), "--remove-lowest", "0"})
              .code == 0);
  REQUIRE(cli_run(cat({"simulate", "--out", path("incoming.evtc"), "--seed", "11"}, kSmallRecipe)).code == 0);
  const auto incoming = load_corpus(path("incoming.evtc"));

  auto r = cli_run({"stream", "--checkpoint", path("small.evtm"), "--incoming", path("incoming.evtc"), "--out",
                    path("kept.evtc")});
  CHECK(r.code == cli::kExitUsage);
  CHECK(r.err.find("threshold") != std::string::npos);

  r = cli_run({"stream", "--checkpoint", path("small.evtm"), "--incoming", path("incoming.evtc"), "--out",
               path("kept.evtc"), "--threshold", "inf", "--log", path("none.csv")});
  REQUIRE(r.code == 0);
  CHECK(load_corpus(path("kept.evtc")).samples.empty());

  r = cli_run({"stream", "--checkpoint", path("small.evtm"), "--incoming", path("incoming.evtc"), "--out",
               path("kept.evtc"), "--threshold", "0", "--window", "4", "--log", path("stream.csv")});
  REQUIRE(r.code == 0);
  CHECK(load_corpus(path("kept.evtc")).samples.size() == incoming.samples.size());
  const auto log = read_csv(path("stream.csv"));
  std::size_t total = 0;
  for (std::size_t k = 1; k < log.size(); ++k) total += std::stoull(log[k][2]);
  CHECK(total == incoming.samples.size());

  r = cli_run({"stream", "--checkpoint", path("small.evtm"), "--incoming", path("incoming.evtc"), "--out",
               path("kept_p0.evtc"), "--report", path("p0.report")});
  REQUIRE(r.code == 0);
  const auto p0 = load_report(path("p0.report"));
  const auto kept = load_corpus(path("kept_p0.evtc"));
  CHECK(kept.samples.size() <= incoming.samples.size());
  const auto scores = score_samples(load_checkpoint(path("small.evtm")), incoming);
  std::size_t above = 0;
  for (const auto& s : scores) above += s.ku_mean > p0.threshold ? 1 : 0;
  CHECK(kept.samples.size() == above);

  REQUIRE(cli_run({"distill", "--checkpoint", path("small.evtm"), "--corpus", path("small.evtc"), "--out",
                   path("r50.report"), "--remove-lowest", "50", "--filtered", path("distilled.evtc")})
              .code == 0);
  r = cli_run({"stream", "--checkpoint", path("small.evtm"), "--incoming", path("incoming.evtc"), "--out",
               path("kept50.evtc"), "--report", path("r50.report"), "--merge", path("distilled.evtc"), "--merged",
               path("merged.evtc")});
  REQUIRE(r.code == 0);
  const auto merged = load_corpus(path("merged.evtc"));
  CHECK(merged.samples.size() ==
        load_corpus(path("distilled.evtc")).samples.size() + load_corpus(path("kept50.evtc")).samples.size());
  CHECK(cli_run({"train", "--resume", path("small.evtm"), "--corpus", path("merged.evtc"), "--out",
                 path("merged.evtm"), "--steps", "1"})
            .code == 0);

  const auto again = cli_run({"stream", "--checkpoint", path("small.evtm"), "--incoming", path("incoming.evtc"),
                              "--out", path("kept50b.evtc"), "--report", path("r50.report")});
  REQUIRE(again.code == 0);
  CHECK(slurp(path("kept50.evtc")) == slurp(path("kept50b.evtc")));

  REQUIRE(cli_run(cat({"train", "--corpus", path("small.evtc"), "--out", path("other.evtm"), "--seed", "6"},
                      kSmallModel))
              .code == 0);
  r = cli_run({"stream", "--checkpoint", path("other.evtm"), "--incoming", path("incoming.evtc"), "--out",
               path("k.evtc"), "--report", path("r50.report")});
  CHECK(r.code == cli::kExitData);
}
