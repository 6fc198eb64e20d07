#include <doctest.h>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "acflow/checkpoint.hpp"
#include "acflow/cli.hpp"
#include "acflow/data.hpp"
#include "acflow/error.hpp"

using namespace acflow;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

std::string shortest(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

// One small trained model shared by every test in this file.
const fs::path& workdir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "acflow_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    const auto r = run({"train", "--synthetic", "gaussian_mixture_grid", "--n", "600", "--hidden", "8",
                        "--components", "3", "--epochs", "2", "--seed", "1", "--out", (d / "model").string()});
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

std::string ckpt() { return (workdir() / "model" / "model.acfw").string(); }

}  // namespace

TEST_CASE("hash helpers") {
  CHECK(cli::sha1_hex("abc") == "a9993e364706816aba3e25717850c26c9cd0d89d");
  CHECK(cli::git_blob_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST_CASE("config parsing") {
  const auto kv = cli::parse_config("# comment\nepochs = 3\n\nmask_dist = \"bernoulli:0.5\"\n");
  CHECK(kv.at("epochs") == "3");
  CHECK(kv.at("mask-dist") == "bernoulli:0.5");
  CHECK_THROWS_AS(cli::parse_config("epochs 3\n"), ParseError);
  CHECK_THROWS_AS(cli::parse_config("epochs = 3\nepochs = 4\n"), ParseError);
  CHECK_THROWS_AS(cli::parse_config("= 3\n"), ParseError);
}

TEST_CASE("usage errors exit with 2") {
  CHECK(run({}).code == cli::exit_usage);
  CHECK(run({"frobnicate"}).code == cli::exit_usage);
  CHECK(run({"train", "--synthetic", "gaussian_mixture_grid", "--out", "x"}).code == cli::exit_usage);
  CHECK(run({"train", "--synthetic", "spiral", "--seed", "1", "--out", "x"}).code == cli::exit_usage);
  CHECK(run({"eval", "--ckpt", ckpt(), "--data", "x.csv", "--metric", "bleu", "--seed", "1", "--out", "x"}).code ==
        cli::exit_usage);
  const fs::path cfg = workdir() / "bad.cfg";
  spit(cfg, "colour = blue\n");
  CHECK(run({"plot", "--config", cfg.string(), "--in", "a.csv", "--out", "x"}).code == cli::exit_usage);
  CHECK(run({"--help"}).code == cli::exit_ok);
}

TEST_CASE("runtime failures exit with 1 and a structured message") {
  const auto r = run({"eval", "--ckpt", (workdir() / "missing.acfw").string(), "--data", "x.csv", "--seed", "1",
                      "--out", (workdir() / "e").string()});
  CHECK(r.code == cli::exit_runtime);
  CHECK(r.err.find("acflow eval: error (load)") != std::string::npos);

  const auto m = run({"sample", "--ckpt", ckpt(), "--mode", "marginal", "--query", "10", "--seed", "1", "--out",
                      (workdir() / "m").string()});
  CHECK(m.code == cli::exit_runtime);
}

TEST_CASE("train writes a rerunnable manifest with the checkpoint hash") {
  const fs::path dir = workdir() / "model";
  for (const char* f : {"model.acfw", "history.csv", "test.csv", "manifest.txt"}) CHECK(fs::exists(dir / f));
  const std::string manifest = slurp(dir / "manifest.txt");
  CHECK(manifest.find("blob " + cli::git_blob_hash(slurp(dir / "model.acfw"))) != std::string::npos);

  const auto r = run({"train", "--config", (dir / "manifest.txt").string(), "--out", (workdir() / "rerun").string()});
  REQUIRE(r.code == 0);
  CHECK(slurp(workdir() / "rerun" / "model.acfw") == slurp(dir / "model.acfw"));
}

TEST_CASE("eval with one mask repetition matches the library call") {
  const fs::path test_csv = workdir() / "model" / "test.csv";
  const fs::path out = workdir() / "eval1";
  REQUIRE(run({"eval", "--ckpt", ckpt(), "--data", test_csv.string(), "--n-masks", "1", "--seed", "4", "--out",
               out.string()})
              .code == 0);
  const auto loaded = load_checkpoint(ckpt());
  const auto ds = data::load_csv(test_csv, {0.0, 0.0}, 0);
  std::vector<std::size_t> rows(ds.rows());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  const auto rep = data::eval_nll(loaded.model, ds, rows, 1, masking::MaskDistribution::bernoulli(0.5), 4);
  const std::string expected = "metric,mean,std,standardized_mean,standardized_std,repetitions,rows,note\nnll," +
                               shortest(rep.mean) + ",0," + shortest(rep.standardized_mean) + ",0,1," +
                               std::to_string(ds.rows()) + ",\n";
  CHECK(slurp(out / "metrics.csv") == expected);
}

TEST_CASE("impute on fully observed rows copies the input") {
  const fs::path in = workdir() / "full.csv";
  spit(in, "x0,x1\n1.50,-2\n0.25,3.0\n");
  const fs::path out = workdir() / "imp";
  REQUIRE(run({"impute", "--ckpt", ckpt(), "--data", in.string(), "--best-guess", "--seed", "2", "--out",
               out.string()})
              .code == 0);
  CHECK(slurp(out / "draw_001.csv") == slurp(in));
  CHECK(slurp(out / "best_guess.csv") == slurp(in));
}

TEST_CASE("impute fills missing cells and keeps observed ones verbatim") {
  const fs::path in = workdir() / "holes.csv";
  spit(in, "x0,x1\n1.50,NA\nNA,3.0\n");
  const fs::path out = workdir() / "imp2";
  REQUIRE(run({"impute", "--ckpt", ckpt(), "--data", in.string(), "--n-samples", "2", "--seed", "2", "--out",
               out.string()})
              .code == 0);
  const std::string draw = slurp(out / "draw_001.csv");
  CHECK(draw.find("1.50,") != std::string::npos);
  CHECK(draw.find(",3.0\n") != std::string::npos);
  CHECK(draw.find("NA") == std::string::npos);
  CHECK(fs::exists(out / "draw_002.csv"));
}

TEST_CASE("joint sampling equals conditional sampling on an empty condition") {
  const fs::path cond = workdir() / "empty_cond.csv";
  spit(cond, "x1,x2\nNA,NA\n");
  const fs::path a = workdir() / "joint", b = workdir() / "cond", c = workdir() / "joint2";
  REQUIRE(run({"sample", "--ckpt", ckpt(), "--mode", "joint", "--n", "50", "--seed", "9", "--out", a.string()}).code == 0);
  REQUIRE(run({"sample", "--ckpt", ckpt(), "--mode", "conditional", "--condition-file", cond.string(), "--n", "50",
               "--seed", "9", "--out", b.string()})
              .code == 0);
  REQUIRE(run({"sample", "--ckpt", ckpt(), "--mode", "joint", "--n", "50", "--seed", "9", "--out", c.string()}).code == 0);
  CHECK(slurp(a / "samples.csv") == slurp(b / "samples.csv"));
  CHECK(slurp(a / "samples.csv") == slurp(c / "samples.csv"));
  REQUIRE(run({"sample", "--config", (a / "manifest.txt").string(), "--out", (workdir() / "joint3").string()}).code == 0);
  CHECK(slurp(a / "samples.csv") == slurp(workdir() / "joint3" / "samples.csv"));
}

TEST_CASE("gibbs writes one row per sweep") {
  const fs::path init = workdir() / "init.csv";
  spit(init, "x0,x1\n0.5,NA\n");
  const fs::path out = workdir() / "gibbs";
  REQUIRE(run({"gibbs", "--ckpt", ckpt(), "--init-file", init.string(), "--blocks", "10,01", "--steps", "7", "--seed",
               "3", "--out", out.string()})
              .code == 0);
  std::istringstream chain(slurp(out / "chain.csv"));
  std::string line;
  std::getline(chain, line);
  CHECK(line == "sweep,x0,x1");
  std::size_t rows = 0;
  while (std::getline(chain, line)) ++rows;
  CHECK(rows == 7);
  CHECK(run({"gibbs", "--ckpt", ckpt(), "--init-file", init.string(), "--blocks", "11,01", "--seed", "3", "--out",
             out.string()})
            .code != 0);
}

TEST_CASE("plot emits SVG") {
  const fs::path out = workdir() / "plot";
  REQUIRE(run({"plot", "--in", (workdir() / "joint" / "samples.csv").string(), "--out", out.string()}).code == 0);
  const std::string svg = slurp(out / "plot.svg");
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("</svg>") != std::string::npos);
  CHECK(fs::exists(out / "manifest.txt"));
  const std::string hist = cli::svg_histogram({0.1, 0.2, 0.2, 0.9}, 4, "x");
  CHECK(hist.find("<rect") != std::string::npos);
}
