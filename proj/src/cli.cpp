#include "acflow/cli.hpp"

#include <openssl/evp.h>

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <optional>
#include <sstream>

#include "acflow/checkpoint.hpp"
#include "acflow/data.hpp"
#include "acflow/error.hpp"
#include "acflow/model.hpp"
#include "acflow/train.hpp"

namespace acflow::cli {

namespace fs = std::filesystem;
using masking::MaskDistribution;

namespace {

// Bad flag values found after CLI11 has accepted the command line.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + '"';
}

std::string csv_row(const std::vector<std::string>& cells) {
  std::string line;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) line += ',';
    line += csv_field(cells[i]);
  }
  return line + '\n';
}

// Cell (r, c) as it appeared in the source file, or its shortest
// round-trip form for generated data.  Missing cells read NA.
std::string source_cell(const data::Dataset& ds, std::size_t r, std::size_t c) {
  if (!ds.present[r][c]) return "NA";
  if (!ds.text.empty()) return ds.text[r * ds.dim() + c];
  return format_double(ds.x(r, c));
}

template <class F>
auto flag_value(std::string_view flag, F parse) -> decltype(parse()) {
  try {
    return parse();
  } catch (const std::exception& e) {
    throw UsageError("--" + std::string(flag) + ": " + e.what());
  }
}

std::vector<std::string> column_names(const CheckpointMeta& meta, std::size_t dim) {
  return meta.names.size() == dim ? meta.names : data::default_names(dim);
}

LoadedCheckpoint open_checkpoint(const fs::path& path, std::string& hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint '" + path.string() + "'");
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  hash = git_blob_hash(bytes);
  return deserialize_checkpoint(bytes);
}

data::Dataset open_data(const fs::path& path, std::size_t dim, bool allow_empty_columns = false) {
  data::Dataset ds = data::load_csv(path, {0.0, 0.0}, 0, allow_empty_columns);
  if (ds.dim() != dim) {
    throw std::invalid_argument("'" + path.string() + "' has " + std::to_string(ds.dim()) +
                                " columns, the model expects " + std::to_string(dim));
  }
  return ds;
}

// Everything a run needs besides its own options.
struct RunState {
  CLI::App* command = nullptr;
  std::ostream* out = nullptr;
  std::ostream* err = nullptr;
  // Extra manifest lines ("# ..."), e.g. checkpoint hashes.
  std::vector<std::string> notes;
};

// Rerunnable record of the invocation: comment lines, then one `key = value`
// per option, so `acflow <command> --config manifest.txt` repeats the run.
void write_manifest(const fs::path& dir, const RunState& state) {
  std::string text = "# acflow " + state.command->get_name() + "\n";
  for (const auto& n : state.notes) text += "# " + n + "\n";
  for (const CLI::Option* opt : state.command->get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name == "config" || name.empty()) continue;
    std::string value;
    if (opt->get_type_size() == 0) {
      value = opt->count() > 0 ? "true" : "false";
    } else if (opt->count() > 0) {
      value = opt->results().back();
    } else {
      value = opt->get_default_str();
    }
    if (value.empty()) continue;
    text += name + " = " + value + "\n";
  }
  write_file(dir / "manifest.txt", text);
}

std::vector<std::size_t> parse_columns(const std::string& text, const std::vector<std::string>& names,
                                       std::size_t want) {
  std::vector<std::size_t> cols;
  if (text.empty()) {
    if (names.size() < want) throw std::invalid_argument("input has too few columns");
    for (std::size_t i = 0; i < want; ++i) cols.push_back(i);
    return cols;
  }
  std::stringstream in(text);
  for (std::string item; std::getline(in, item, ',');) {
    item = trim(item);
    const auto it = std::find(names.begin(), names.end(), item);
    if (it == names.end()) throw std::invalid_argument("no column named '" + item + "'");
    cols.push_back(static_cast<std::size_t>(it - names.begin()));
  }
  if (cols.size() != want) {
    throw std::invalid_argument("expected " + std::to_string(want) + " column name(s), got " +
                                std::to_string(cols.size()));
  }
  return cols;
}

// "10,01" -> two masks of length dim.  Empty text gives one block per dimension.
std::vector<BitMask> parse_blocks(const std::string& text, std::size_t dim) {
  std::vector<BitMask> blocks;
  if (text.empty()) {
    for (std::size_t i = 0; i < dim; ++i) {
      BitMask b(dim);
      b.set(i, true);
      blocks.push_back(b);
    }
    return blocks;
  }
  std::stringstream in(text);
  for (std::string item; std::getline(in, item, ',');) {
    BitMask b = BitMask::parse(trim(item));
    if (b.size() != dim) {
      throw std::invalid_argument("block '" + trim(item) + "' has length " + std::to_string(b.size()) +
                                  ", model dimension is " + std::to_string(dim));
    }
    blocks.push_back(b);
  }
  return blocks;
}

// ------------------------------------------------------------------ train

struct TrainOptions {
  std::string data;
  std::string synthetic;
  std::size_t n = 10000;
  std::string arch;
  std::size_t hidden = 0;
  std::size_t components = 0;
  std::string mode = "conditional";
  std::string mask = "bernoulli:0.5";
  double lambda = 1.0;
  std::size_t epochs = 100;
  std::size_t batch_size = 256;
  double lr = 1e-3;
  double lr_decay = 1.0;
  double grad_clip = 5.0;
  std::size_t patience = 20;
  double valid_frac = 0.1;
  double test_frac = 0.1;
  std::uint64_t seed = 0;
  std::string out;
};

void add_train(CLI::App& app, TrainOptions& o) {
  auto* data = app.add_option("--data", o.data, "CSV file with a header row (NA = missing)");
  auto* synth = app.add_option("--synthetic", o.synthetic,
                               "generated 2-D data: gaussian_mixture_grid, two_moons_like, "
                               "checkerboard, eight_gaussians");
  data->excludes(synth);
  app.add_option("--n", o.n, "number of generated samples")->capture_default_str();
  app.add_option("--arch", o.arch, "architecture file or preset name (synthetic, tabular)");
  app.add_option("--hidden", o.hidden, "override every hidden width");
  app.add_option("--components", o.components, "override the mixture component count");
  app.add_option("--mode", o.mode, "conditional, conditional_missing or marginal")->capture_default_str();
  app.add_option("--mask-dist", o.mask, "bernoulli:P, drop_one, fixed:BITS or block:B:E")
      ->capture_default_str();
  app.add_option("--lambda", o.lambda, "best-guess penalty weight")->capture_default_str();
  app.add_option("--epochs", o.epochs)->capture_default_str();
  app.add_option("--batch-size", o.batch_size)->capture_default_str();
  app.add_option("--lr", o.lr, "Adam learning rate")->capture_default_str();
  app.add_option("--lr-decay", o.lr_decay, "factor applied to the rate after each epoch")
      ->capture_default_str();
  app.add_option("--grad-clip", o.grad_clip, "global gradient norm bound, 0 = off")->capture_default_str();
  app.add_option("--patience", o.patience, "early-stopping patience in epochs, 0 = off")
      ->capture_default_str();
  app.add_option("--valid-frac", o.valid_frac)->capture_default_str();
  app.add_option("--test-frac", o.test_frac)->capture_default_str();
  app.add_option("--seed", o.seed)->required();
  app.add_option("--out", o.out, "output directory")->required();
}

void run_train(const TrainOptions& o, RunState& st) {
  if (o.data.empty() == o.synthetic.empty()) throw UsageError("give exactly one of --data, --synthetic");
  train::TrainConfig cfg;
  cfg.mode = flag_value("mode", [&] { return parse_mode(o.mode); });
  cfg.mask = flag_value("mask-dist", [&] { return MaskDistribution::parse(o.mask); });
  cfg.lambda = o.lambda;
  cfg.epochs = o.epochs;
  cfg.batch_size = o.batch_size;
  cfg.learning_rate = o.lr;
  cfg.lr_decay = o.lr_decay;
  cfg.grad_clip = o.grad_clip;
  cfg.patience = o.patience;
  cfg.seed = o.seed;
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const data::SplitFractions fractions{o.valid_frac, o.test_frac};

  data::Dataset ds;
  if (!o.synthetic.empty()) {
    const auto kind = flag_value("synthetic", [&] { return data::parse_synthetic(o.synthetic); });
    ds = data::gen_synthetic(kind, o.n, o.seed, fractions).data;
  } else {
    ds = data::load_csv(o.data, fractions, o.seed);
  }

  const std::string arch_name = !o.arch.empty() ? o.arch : (o.synthetic.empty() ? "tabular" : "synthetic");
  Architecture arch;
  if (fs::is_regular_file(arch_name)) {
    arch = Architecture::parse(read_file(arch_name));
    if (arch.dim != ds.dim()) {
      throw std::invalid_argument("architecture has dim " + std::to_string(arch.dim) + ", data has " +
                                  std::to_string(ds.dim()) + " columns");
    }
  } else {
    arch = flag_value("arch", [&] { return Architecture::preset(arch_name, ds.dim()); });
  }
  if (o.hidden > 0) arch.set_hidden(o.hidden);
  if (o.components > 0) arch.base.components = o.components;

  const fs::path dir(o.out);
  fs::create_directories(dir);
  AcflowModel model = AcflowModel::create(arch, o.seed);
  std::ostream& err = *st.err;
  const auto result = train::train(model, ds, cfg, [&](const train::EpochRecord& r) {
    err << "epoch " << r.epoch << " train_nll " << format_double(r.train_nll) << " valid_nll "
        << format_double(r.valid_nll) << " lr " << format_double(r.lr) << '\n';
  });

  CheckpointMeta meta;
  meta.config_digest = cfg.digest();
  meta.epoch = result.best_epoch;
  meta.best_valid = result.best_valid;
  meta.names = ds.names;
  const std::string bytes = serialize_checkpoint(model, meta);
  write_file(dir / "model.acfw", bytes);
  std::ofstream history(dir / "history.csv");
  train::write_history_csv(history, result.history);

  std::string test = csv_row(ds.names);
  for (std::size_t r : ds.test) {
    std::vector<std::string> cells;
    for (std::size_t c = 0; c < ds.dim(); ++c) cells.push_back(source_cell(ds, r, c));
    test += csv_row(cells);
  }
  write_file(dir / "test.csv", test);

  st.notes.push_back("checkpoint model.acfw blob " + git_blob_hash(bytes));
  write_manifest(dir, st);
  *st.out << "trained " << result.history.size() << " epochs, best epoch " << result.best_epoch
          << ", best validation NLL " << format_double(result.best_valid) << '\n';
}

// ------------------------------------------------------------------ eval

struct EvalOptions {
  std::string ckpt;
  std::string data;
  std::string metric = "nll";
  std::size_t n_masks = 5;
  std::string mask = "bernoulli:0.5";
  double missing_rate = 0.3;
  std::uint64_t seed = 0;
  std::string out;
};

void add_eval(CLI::App& app, EvalOptions& o) {
  app.add_option("--ckpt", o.ckpt)->required();
  app.add_option("--data", o.data, "CSV file to evaluate (every row is used)")->required();
  app.add_option("--metric", o.metric)
      ->check(CLI::IsMember({"nll", "nrmse", "marginal_nll"}))
      ->capture_default_str();
  app.add_option("--n-masks", o.n_masks, "repetitions with fresh masks")->capture_default_str();
  app.add_option("--mask-dist", o.mask, "distribution of observed masks for nll/marginal_nll")
      ->capture_default_str();
  app.add_option("--missing-rate", o.missing_rate, "MCAR rate hidden from the model for nrmse")
      ->capture_default_str();
  app.add_option("--seed", o.seed)->required();
  app.add_option("--out", o.out, "output directory")->required();
}

struct MetricRow {
  std::string metric;
  double mean = 0.0;
  double spread = 0.0;
  double standardized_mean = 0.0;
  double standardized_spread = 0.0;
  std::size_t repetitions = 0;
  std::size_t rows = 0;
  std::string note;
};

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {std::nan(""), std::nan("")};
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size()))};
}

std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::string text = "metric,mean,std,standardized_mean,standardized_std,repetitions,rows,note\n";
  for (const auto& r : rows) {
    text += csv_row({r.metric, format_double(r.mean), format_double(r.spread),
                     format_double(r.standardized_mean), format_double(r.standardized_spread),
                     std::to_string(r.repetitions), std::to_string(r.rows), r.note});
  }
  return text;
}

void run_eval(const EvalOptions& o, RunState& st) {
  if (o.n_masks == 0) throw UsageError("--n-masks must be at least 1");
  const auto dist = flag_value("mask-dist", [&] { return MaskDistribution::parse(o.mask); });
  std::string hash;
  const LoadedCheckpoint ck = open_checkpoint(o.ckpt, hash);
  const AcflowModel& model = ck.model;
  const data::Dataset ds = open_data(o.data, model.dim());
  std::vector<std::size_t> rows(ds.rows());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;

  std::vector<MetricRow> out;
  if (o.metric == "nll") {
    const auto rep = data::eval_nll(model, ds, rows, o.n_masks, dist, o.seed);
    out.push_back({"nll", rep.mean, rep.std, rep.standardized_mean, rep.standardized_std, o.n_masks,
                   ds.rows(), ""});
  } else if (o.metric == "marginal_nll") {
    std::vector<double> raw;
    std::vector<double> standardized;
    std::size_t used_rows = 0;
    for (std::size_t k = 0; k < o.n_masks; ++k) {
      double total = 0.0;
      double total_std = 0.0;
      std::size_t used = 0;
      for (std::size_t r = 0; r < ds.rows(); ++r) {
        const BitMask b = data::eval_mask(dist, ds.present[r], o.seed, k, r);
        const BitMask query = ds.present[r] & ~b;
        if (query.none()) continue;
        const double lp = model.marginal_log_prob(masking::index(ds.row(r), query), query);
        total -= lp;
        total_std -= lp + model.standardizer().log_scale(query);
        ++used;
      }
      used_rows = used;
      raw.push_back(used ? total / static_cast<double>(used) : std::nan(""));
      standardized.push_back(used ? total_std / static_cast<double>(used) : std::nan(""));
    }
    const auto [m, s] = mean_std(raw);
    const auto [ms, ss] = mean_std(standardized);
    out.push_back({"marginal_nll", m, s, ms, ss, o.n_masks, used_rows,
                   model.marginal_warning().value_or("")});
  } else {
    if (!(o.missing_rate > 0.0 && o.missing_rate < 1.0)) {
      throw UsageError("--missing-rate must lie in (0, 1)");
    }
    const auto& scale = model.standardizer().std();
    std::vector<double> guess_scores;
    std::vector<double> sample_scores;
    const Rng root(o.seed);
    for (std::size_t k = 0; k < o.n_masks; ++k) {
      const Rng stream = root.fork(k);
      const data::Dataset hidden = data::inject_mcar(ds, o.missing_rate, stream.fork(0).seed());
      std::vector<Example> examples;
      std::vector<std::size_t> which;
      std::vector<BitMask> imputed_mask(ds.rows(), BitMask::zeros(ds.dim()));
      for (std::size_t r = 0; r < ds.rows(); ++r) {
        const BitMask u = ds.present[r] & ~hidden.present[r];
        imputed_mask[r] = u;
        if (u.none()) continue;
        const auto x = ds.row(r);
        examples.push_back({{x.begin(), x.end()}, hidden.present[r], ds.present[r]});
        which.push_back(r);
      }
      ad::Tensor guess = ds.x;
      ad::Tensor draw = ds.x;
      Rng sample_rng = stream.fork(1);
      const auto g = model.best_guess(examples);
      const auto s = model.sample(examples, sample_rng);
      for (std::size_t i = 0; i < which.size(); ++i) {
        const auto targets = imputed_mask[which[i]].indices();
        for (std::size_t j = 0; j < targets.size(); ++j) {
          guess(which[i], targets[j]) = g[i][j];
          draw(which[i], targets[j]) = s[i][j];
        }
      }
      guess_scores.push_back(data::eval_nrmse(guess, ds.x, imputed_mask, scale));
      sample_scores.push_back(data::eval_nrmse(draw, ds.x, imputed_mask, scale));
    }
    const auto [gm, gs] = mean_std(guess_scores);
    const auto [sm, ss] = mean_std(sample_scores);
    out.push_back({"nrmse_best_guess", gm, gs, gm, gs, o.n_masks, ds.rows(), ""});
    out.push_back({"nrmse_sample", sm, ss, sm, ss, o.n_masks, ds.rows(), ""});
  }

  const fs::path dir(o.out);
  fs::create_directories(dir);
  const std::string text = metrics_csv(out);
  write_file(dir / "metrics.csv", text);
  st.notes.push_back("checkpoint " + o.ckpt + " blob " + hash);
  write_manifest(dir, st);
  for (const auto& r : out) {
    *st.out << r.metric << " " << format_double(r.mean) << " +- " << format_double(r.spread) << '\n';
    if (!r.note.empty()) *st.err << "warning: " << r.note << '\n';
  }
}

// ------------------------------------------------------------------ impute

struct ImputeOptions {
  std::string ckpt;
  std::string data;
  std::size_t n_samples = 1;
  bool best_guess = false;
  std::uint64_t seed = 0;
  std::string out;
};

void add_impute(CLI::App& app, ImputeOptions& o) {
  app.add_option("--ckpt", o.ckpt)->required();
  app.add_option("--data", o.data, "CSV with NA in the cells to fill")->required();
  app.add_option("--n-samples", o.n_samples, "number of sampled imputations")->capture_default_str();
  app.add_flag("--best-guess", o.best_guess, "also write the best-guess imputation");
  app.add_option("--seed", o.seed)->required();
  app.add_option("--out", o.out, "output directory")->required();
}

std::string filled_csv(const data::Dataset& ds, const std::vector<std::size_t>& which,
                       const std::vector<std::vector<double>>& values) {
  std::vector<const std::vector<double>*> by_row(ds.rows(), nullptr);
  for (std::size_t i = 0; i < which.size(); ++i) by_row[which[i]] = &values[i];
  std::string text = csv_row(ds.names);
  for (std::size_t r = 0; r < ds.rows(); ++r) {
    std::vector<std::string> cells;
    std::size_t j = 0;
    for (std::size_t c = 0; c < ds.dim(); ++c) {
      if (ds.present[r][c]) {
        cells.push_back(source_cell(ds, r, c));
      } else {
        cells.push_back(format_double((*by_row[r])[j++]));
      }
    }
    text += csv_row(cells);
  }
  return text;
}

void run_impute(const ImputeOptions& o, RunState& st) {
  if (o.n_samples == 0 && !o.best_guess) throw UsageError("nothing to do: --n-samples is 0 without --best-guess");
  std::string hash;
  const LoadedCheckpoint ck = open_checkpoint(o.ckpt, hash);
  const AcflowModel& model = ck.model;
  const data::Dataset ds = open_data(o.data, model.dim(), true);

  std::vector<Example> examples;
  std::vector<std::size_t> which;
  for (std::size_t r = 0; r < ds.rows(); ++r) {
    if (ds.present[r].all()) continue;
    const auto x = ds.row(r);
    examples.push_back({{x.begin(), x.end()}, ds.present[r], BitMask::ones(ds.dim())});
    which.push_back(r);
  }

  const fs::path dir(o.out);
  fs::create_directories(dir);
  const Rng root(o.seed);
  const int width = std::max<int>(3, static_cast<int>(std::to_string(o.n_samples).size()));
  for (std::size_t k = 0; k < o.n_samples; ++k) {
    Rng rng = root.fork(k);
    const auto draws = model.sample(examples, rng);
    std::string index = std::to_string(k + 1);
    index.insert(0, static_cast<std::size_t>(width) - std::min<std::size_t>(index.size(), width), '0');
    write_file(dir / ("draw_" + index + ".csv"), filled_csv(ds, which, draws));
  }
  if (o.best_guess) write_file(dir / "best_guess.csv", filled_csv(ds, which, model.best_guess(examples)));
  st.notes.push_back("checkpoint " + o.ckpt + " blob " + hash);
  write_manifest(dir, st);
  *st.out << "imputed " << which.size() << " of " << ds.rows() << " rows\n";
}

// ------------------------------------------------------------------ sample

struct SampleOptions {
  std::string ckpt;
  std::string mode = "joint";
  std::string condition_file;
  std::string query;
  std::size_t n = 1000;
  std::uint64_t seed = 0;
  std::string out;
};

void add_sample(CLI::App& app, SampleOptions& o) {
  app.add_option("--ckpt", o.ckpt)->required();
  app.add_option("--mode", o.mode)
      ->check(CLI::IsMember({"joint", "conditional", "marginal"}))
      ->capture_default_str();
  app.add_option("--condition-file", o.condition_file,
                 "conditional mode: CSV rows of observed values, NA = sample");
  app.add_option("--query", o.query, "marginal mode: mask of the dimensions to sample, e.g. 10");
  app.add_option("--n", o.n, "draws per condition row")->capture_default_str();
  app.add_option("--seed", o.seed)->required();
  app.add_option("--out", o.out, "output directory")->required();
}

void run_sample(const SampleOptions& o, RunState& st) {
  std::string hash;
  const LoadedCheckpoint ck = open_checkpoint(o.ckpt, hash);
  const AcflowModel& model = ck.model;
  const std::size_t d = model.dim();
  const Rng root(o.seed);
  std::string text;

  if (o.mode == "marginal") {
    if (o.query.empty()) throw UsageError("--mode marginal needs --query");
    const BitMask query = flag_value("query", [&] { return BitMask::parse(o.query); });
    if (query.size() != d || query.none()) {
      throw UsageError("--query must be a non-empty mask of length " + std::to_string(d));
    }
    if (model.mode() != TrainingMode::marginal) {
      throw Error("marginal sampling needs a checkpoint trained in marginal mode (this one: " +
                  std::string(mode_name(model.mode())) + ")");
    }
    const auto all = column_names(ck.meta, d);
    std::vector<std::string> names;
    for (std::size_t i : query.indices()) names.push_back(all[i]);
    text = csv_row(names);
    const ConditioningContext ctx{{}, BitMask::zeros(d), query};
    Rng rng = root.fork(0);
    for (const auto& draw : model.cond_sample(ctx, o.n, rng)) {
      std::vector<std::string> cells;
      for (double v : draw) cells.push_back(format_double(v));
      text += csv_row(cells);
    }
  } else {
    data::Dataset cond;
    if (o.mode == "joint") {
      if (!o.condition_file.empty()) throw UsageError("--condition-file needs --mode conditional");
      cond.names = column_names(ck.meta, d);
      cond.x = ad::Tensor::matrix(1, d);
      cond.present.push_back(BitMask::zeros(d));
    } else {
      if (o.condition_file.empty()) throw UsageError("--mode conditional needs --condition-file");
      cond = open_data(o.condition_file, d, true);
    }
    text = csv_row(cond.names);
    for (std::size_t r = 0; r < cond.rows(); ++r) {
      const auto ctx = ConditioningContext::complete(cond.row(r), cond.present[r]);
      Rng rng = root.fork(r);
      for (const auto& draw : model.cond_sample(ctx, o.n, rng)) {
        std::vector<std::string> cells;
        std::size_t j = 0;
        for (std::size_t c = 0; c < d; ++c) {
          cells.push_back(cond.present[r][c] ? source_cell(cond, r, c) : format_double(draw[j++]));
        }
        text += csv_row(cells);
      }
    }
  }

  const fs::path dir(o.out);
  fs::create_directories(dir);
  write_file(dir / "samples.csv", text);
  st.notes.push_back("checkpoint " + o.ckpt + " blob " + hash);
  write_manifest(dir, st);
  *st.out << "wrote " << (dir / "samples.csv").string() << '\n';
}

// ------------------------------------------------------------------ gibbs

struct GibbsOptions {
  std::string ckpt;
  std::string init_file;
  std::string blocks;
  std::size_t steps = 50;
  std::uint64_t seed = 0;
  std::string out;
};

void add_gibbs(CLI::App& app, GibbsOptions& o) {
  app.add_option("--ckpt", o.ckpt)->required();
  app.add_option("--init-file", o.init_file, "CSV whose first row starts the chain")->required();
  app.add_option("--blocks", o.blocks, "comma-separated block masks, e.g. 10,01 (default: one per dimension)");
  app.add_option("--steps", o.steps, "sweeps")->capture_default_str();
  app.add_option("--seed", o.seed)->required();
  app.add_option("--out", o.out, "output directory")->required();
}

void run_gibbs(const GibbsOptions& o, RunState& st) {
  std::string hash;
  const LoadedCheckpoint ck = open_checkpoint(o.ckpt, hash);
  const AcflowModel& model = ck.model;
  const std::size_t d = model.dim();
  const auto blocks = flag_value("blocks", [&] { return parse_blocks(o.blocks, d); });
  const data::Dataset init = open_data(o.init_file, d, true);
  if (init.rows() == 0) throw std::invalid_argument("'" + o.init_file + "' has no rows");

  BitMask covered = BitMask::zeros(d);
  for (const auto& b : blocks) covered = covered | b;
  std::vector<double> x(init.row(0).begin(), init.row(0).end());
  for (std::size_t c = 0; c < d; ++c) {
    if (init.present[0][c]) continue;
    if (!covered[c]) {
      throw std::invalid_argument("column '" + init.names[c] +
                                  "' is missing in the initial row and outside every block");
    }
    x[c] = model.standardizer().mean()[c];
  }
  Rng rng(o.seed);
  const auto chain = model.gibbs_chain(x, blocks, o.steps, rng);

  std::vector<std::string> header{"sweep"};
  header.insert(header.end(), init.names.begin(), init.names.end());
  std::string text = csv_row(header);
  for (std::size_t s = 0; s < chain.size(); ++s) {
    std::vector<std::string> cells{std::to_string(s + 1)};
    for (double v : chain[s]) cells.push_back(format_double(v));
    text += csv_row(cells);
  }
  const fs::path dir(o.out);
  fs::create_directories(dir);
  write_file(dir / "chain.csv", text);
  st.notes.push_back("checkpoint " + o.ckpt + " blob " + hash);
  write_manifest(dir, st);
  *st.out << "ran " << chain.size() << " sweeps over " << blocks.size() << " blocks\n";
}

// ------------------------------------------------------------------ plot

struct PlotOptions {
  std::string in;
  std::string kind = "scatter2d";
  std::string columns;
  std::size_t bins = 64;
  std::string out;
};

void add_plot(CLI::App& app, PlotOptions& o) {
  app.add_option("--in", o.in, "CSV of samples")->required();
  app.add_option("--kind", o.kind)->check(CLI::IsMember({"scatter2d", "hist"}))->capture_default_str();
  app.add_option("--columns", o.columns, "column names to plot (default: the first one or two)");
  app.add_option("--bins", o.bins, "histogram bins")->capture_default_str();
  app.add_option("--out", o.out, "output directory")->required();
}

void run_plot(const PlotOptions& o, RunState& st) {
  if (o.bins == 0) throw UsageError("--bins must be at least 1");
  const data::Dataset ds = data::load_csv(o.in, {0.0, 0.0}, 0);
  const bool scatter = o.kind == "scatter2d";
  const auto cols = flag_value("columns", [&] { return parse_columns(o.columns, ds.names, scatter ? 2 : 1); });
  std::vector<double> xs;
  std::vector<double> ys;
  for (std::size_t r = 0; r < ds.rows(); ++r) {
    if (!ds.present[r][cols[0]] || (scatter && !ds.present[r][cols[1]])) continue;
    xs.push_back(ds.x(r, cols[0]));
    if (scatter) ys.push_back(ds.x(r, cols[1]));
  }
  const std::string svg = scatter ? svg_scatter(xs, ys, ds.names[cols[0]], ds.names[cols[1]])
                                  : svg_histogram(xs, o.bins, ds.names[cols[0]]);
  const fs::path dir(o.out);
  fs::create_directories(dir);
  write_file(dir / "plot.svg", svg);
  st.notes.push_back("input " + o.in + " blob " + git_blob_hash(read_file(o.in)));
  write_manifest(dir, st);
  *st.out << "plotted " << xs.size() << " rows\n";
}

// ------------------------------------------------------------------ svg

constexpr double svg_size = 480.0;
constexpr double svg_margin = 48.0;

std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::pair<double, double> range_of(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 1.0};
  auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  if (*lo == *hi) return {*lo - 0.5, *hi + 0.5};
  return {*lo, *hi};
}

std::string svg_frame(std::string_view x_label, std::string_view y_label, std::pair<double, double> xr,
                      std::pair<double, double> yr) {
  const double lo = svg_margin;
  const double hi = svg_size - svg_margin;
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fixed(svg_size, 0) +
                  "\" height=\"" + fixed(svg_size, 0) + "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<rect x=\"" + fixed(lo) + "\" y=\"" + fixed(lo) + "\" width=\"" + fixed(hi - lo) + "\" height=\"" +
       fixed(hi - lo) + "\" fill=\"none\" stroke=\"black\"/>\n";
  s += "<text x=\"" + fixed(svg_size / 2) + "\" y=\"" + fixed(svg_size - 12) +
       "\" text-anchor=\"middle\">" + xml_escape(x_label) + "</text>\n";
  s += "<text x=\"14\" y=\"" + fixed(svg_size / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 14 " +
       fixed(svg_size / 2) + ")\">" + xml_escape(y_label) + "</text>\n";
  s += "<text x=\"" + fixed(lo) + "\" y=\"" + fixed(hi + 14) + "\" text-anchor=\"start\">" +
       fixed(xr.first) + "</text>\n";
  s += "<text x=\"" + fixed(hi) + "\" y=\"" + fixed(hi + 14) + "\" text-anchor=\"end\">" + fixed(xr.second) +
       "</text>\n";
  s += "<text x=\"" + fixed(lo - 4) + "\" y=\"" + fixed(hi) + "\" text-anchor=\"end\">" + fixed(yr.first) +
       "</text>\n";
  s += "<text x=\"" + fixed(lo - 4) + "\" y=\"" + fixed(lo + 8) + "\" text-anchor=\"end\">" +
       fixed(yr.second) + "</text>\n";
  return s;
}

// ------------------------------------------------------------------ dispatch

std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const LoadError*>(&e)) return "load";
  if (dynamic_cast<const ParseError*>(&e)) return "parse";
  if (dynamic_cast<const NumericalError*>(&e)) return "numerical";
  if (dynamic_cast<const TrainingError*>(&e)) return "training";
  if (dynamic_cast<const std::invalid_argument*>(&e)) return "invalid input";
  return "runtime";
}

// Pulls the value of --config out of the arguments that follow the command.
std::optional<std::string> config_path(const std::vector<std::string>& args) {
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) return args[i + 1];
    if (args[i].starts_with("--config=")) return args[i].substr(9);
  }
  return std::nullopt;
}

}  // namespace

std::map<std::string, std::string> parse_config(std::string_view text) {
  std::map<std::string, std::string> out;
  std::istringstream in{std::string(text)};
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParseError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    std::string key = trim(std::string_view(line).substr(0, eq));
    std::string value = trim(std::string_view(line).substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw ParseError("config line " + std::to_string(line_no) + ": empty key or value");
    }
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
      value = value.substr(1, value.size() - 2);
    }
    std::replace(key.begin(), key.end(), '_', '-');
    if (!out.emplace(key, value).second) {
      throw ParseError("config line " + std::to_string(line_no) + ": key '" + key + "' repeated");
    }
  }
  return out;
}

std::string sha1_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha1(), nullptr) != 1) {
    throw Error("SHA-1 computation failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 0xf];
  }
  return out;
}

std::string git_blob_hash(std::string_view bytes) {
  std::string blob = "blob " + std::to_string(bytes.size());
  blob.push_back('\0');
  blob.append(bytes);
  return sha1_hex(blob);
}

std::string svg_scatter(const std::vector<double>& xs, const std::vector<double>& ys,
                        std::string_view x_label, std::string_view y_label) {
  if (xs.size() != ys.size()) throw std::invalid_argument("svg_scatter: coordinate lengths differ");
  const auto xr = range_of(xs);
  const auto yr = range_of(ys);
  const double span = svg_size - 2 * svg_margin;
  std::string s = svg_frame(x_label, y_label, xr, yr);
  s += "<g fill=\"steelblue\" fill-opacity=\"0.35\">\n";
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double px = svg_margin + (xs[i] - xr.first) / (xr.second - xr.first) * span;
    const double py = svg_size - svg_margin - (ys[i] - yr.first) / (yr.second - yr.first) * span;
    s += "<circle cx=\"" + fixed(px) + "\" cy=\"" + fixed(py) + "\" r=\"1.2\"/>\n";
  }
  return s + "</g>\n</svg>\n";
}

std::string svg_histogram(const std::vector<double>& xs, std::size_t bins, std::string_view label) {
  if (bins == 0) throw std::invalid_argument("svg_histogram: bins must be positive");
  const auto xr = range_of(xs);
  std::vector<std::size_t> counts(bins, 0);
  for (double v : xs) {
    auto k = static_cast<std::size_t>((v - xr.first) / (xr.second - xr.first) * static_cast<double>(bins));
    counts[std::min(k, bins - 1)] += 1;
  }
  const std::size_t top = std::max<std::size_t>(1, *std::max_element(counts.begin(), counts.end()));
  const double span = svg_size - 2 * svg_margin;
  const double width = span / static_cast<double>(bins);
  std::string s = svg_frame(label, "count", xr, {0.0, static_cast<double>(top)});
  s += "<g fill=\"steelblue\" stroke=\"white\" stroke-width=\"0.5\">\n";
  for (std::size_t k = 0; k < bins; ++k) {
    const double h = static_cast<double>(counts[k]) / static_cast<double>(top) * span;
    s += "<rect x=\"" + fixed(svg_margin + static_cast<double>(k) * width) + "\" y=\"" +
         fixed(svg_size - svg_margin - h) + "\" width=\"" + fixed(width) + "\" height=\"" + fixed(h) + "\"/>\n";
  }
  return s + "</g>\n</svg>\n";
}

int run(const std::vector<std::string>& args_in, std::ostream& out, std::ostream& err) {
  CLI::App app{"Arbitrary-conditional flow models: train, evaluate, impute, sample.", "acflow"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  TrainOptions train_opts;
  EvalOptions eval_opts;
  ImputeOptions impute_opts;
  SampleOptions sample_opts;
  GibbsOptions gibbs_opts;
  PlotOptions plot_opts;
  std::string config;
  struct Entry {
    CLI::App* app;
    std::function<void(RunState&)> run;
  };
  std::vector<Entry> commands;
  auto add = [&](const char* name, const char* help, auto adder, auto& opts, auto runner) {
    CLI::App* sub = app.add_subcommand(name, help);
    adder(*sub, opts);
    sub->add_option("--config", config, "file of `key = value` lines, overridden by flags");
    commands.push_back({sub, [&opts, runner](RunState& st) { runner(opts, st); }});
  };
  add("train", "fit a model and write a checkpoint", add_train, train_opts, run_train);
  add("eval", "NLL, marginal NLL or imputation NRMSE of a checkpoint", add_eval, eval_opts, run_eval);
  add("impute", "fill NA cells by sampling and/or the best guess", add_impute, impute_opts, run_impute);
  add("sample", "joint, conditional or marginal draws", add_sample, sample_opts, run_sample);
  add("gibbs", "block Gibbs chain", add_gibbs, gibbs_opts, run_gibbs);
  add("plot", "SVG scatter plot or histogram of a CSV", add_plot, plot_opts, run_plot);

  std::vector<std::string> args = args_in;
  try {
    if (const auto path = config_path(args)) {
      std::vector<std::string> from_file;
      for (const auto& [key, value] : parse_config(read_file(*path))) {
        if (key == "config") throw ParseError("config files cannot name another config file");
        from_file.push_back("--" + key + "=" + value);
      }
      args.insert(args.begin() + 1, from_file.begin(), from_file.end());
    }
  } catch (const Error& e) {
    err << "acflow: " << e.what() << '\n';
    return exit_usage;
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? exit_ok : exit_usage;
  }

  for (auto& c : commands) {
    if (!c.app->parsed()) continue;
    RunState st{c.app, &out, &err, {}};
    try {
      c.run(st);
    } catch (const UsageError& e) {
      err << "acflow " << c.app->get_name() << ": " << e.what() << '\n';
      return exit_usage;
    } catch (const std::exception& e) {
      err << "acflow " << c.app->get_name() << ": error (" << error_kind(e) << "): " << e.what() << '\n';
      return exit_runtime;
    }
    return exit_ok;
  }
  return exit_usage;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace acflow::cli
