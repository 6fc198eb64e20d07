#include "acflow/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "acflow/error.hpp"

namespace acflow::train {

using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

bool all_finite(const std::vector<Tensor>& ts) {
  return std::all_of(ts.begin(), ts.end(), [](const Tensor& t) { return t.all_finite(); });
}

constexpr std::uint64_t validation_stream = 0x76616c6964ULL;

}  // namespace

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be at least 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
  if (!(lr_decay > 0.0)) throw std::invalid_argument("lr_decay must be positive");
  if (grad_clip < 0.0) throw std::invalid_argument("grad_clip must be non-negative");
  if (lambda < 0.0) throw std::invalid_argument("lambda must be non-negative");
}

std::string TrainConfig::digest() const {
  std::ostringstream out;
  out << "epochs=" << epochs << '\n'
      << "batch_size=" << batch_size << '\n'
      << "learning_rate=" << format_double(learning_rate) << '\n'
      << "lr_decay=" << format_double(lr_decay) << '\n'
      << "grad_clip=" << format_double(grad_clip) << '\n'
      << "mask=" << mask.to_string() << '\n'
      << "lambda=" << format_double(lambda) << '\n'
      << "seed=" << seed << '\n'
      << "mode=" << mode_name(mode) << '\n'
      << "patience=" << patience << '\n'
      << "standardize=" << (standardize ? 1 : 0) << '\n';
  return out.str();
}

Example make_example(std::span<const double> x, const BitMask& present, TrainingMode mode,
                     const MaskDistribution& dist, Rng& rng) {
  Example e{{x.begin(), x.end()}, {}, {}};
  switch (mode) {
    case TrainingMode::conditional:
      e.m = BitMask::ones(x.size());
      e.b = masking::sample_mask(dist, e.m, rng);
      break;
    case TrainingMode::conditional_missing:
      e.m = present;
      e.b = masking::sample_mask(dist, e.m, rng);
      break;
    case TrainingMode::marginal: {
      const BitMask drawn = masking::sample_mask(dist, present, rng);
      e.b = BitMask::zeros(x.size());
      e.m = present & ~drawn;
      break;
    }
  }
  return e;
}

void Adam::step_update(ad::ParameterSet& params, const std::vector<Tensor>& grads, double lr) {
  if (m.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      m.emplace_back(params.value(i).shape());
      v.emplace_back(params.value(i).shape());
    }
  }
  ++step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params.at(i).trainable) continue;
    auto w = params.value(i).values();
    const auto g = grads[i].values();
    auto mi = m[i].values();
    auto vi = v[i].values();
    for (std::size_t j = 0; j < w.size(); ++j) {
      mi[j] = beta1 * mi[j] + (1.0 - beta1) * g[j];
      vi[j] = beta2 * vi[j] + (1.0 - beta2) * g[j] * g[j];
      w[j] -= lr * (mi[j] / c1) / (std::sqrt(vi[j] / c2) + eps);
    }
  }
}

double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  double ss = 0.0;
  for (const auto& g : grads) {
    for (double v : g.values()) ss += v * v;
  }
  const double norm = std::sqrt(ss);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads) {
      for (double& v : g.values()) v *= s;
    }
  }
  return norm;
}

BatchResult batch_gradients(const AcflowModel& model, std::span<const Example> examples,
                            double lambda) {
  BatchResult result;
  Tape tape(model.parameters(), true);
  Var total;
  double nll = 0.0;
  for (const auto& idx : group_by_target_count(examples, examples.size())) {
    std::vector<ConditioningContext> contexts;
    std::vector<ConditioningContext> raw;
    for (std::size_t i : idx) {
      raw.push_back(examples[i].context());
      contexts.push_back(model.standardize(raw.back()));
    }
    const auto batch = transforms::ContextBatch::build(contexts);
    if (batch.targets == 0) continue;
    Tensor x = Tensor::matrix(idx.size(), batch.targets);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto t = model.standardize_targets(examples[idx[r]].targets(), raw[r]);
      std::copy(t.begin(), t.end(), x.row(r).begin());
    }
    BatchTerms terms = model.terms(tape, ad::constant(std::move(x)), batch, lambda);
    Var part = ad::sum(terms.loss);
    total = total.defined() ? total + part : part;
    for (double v : terms.log_prob.value().values()) nll -= v;
    result.used += idx.size();
  }
  if (result.used == 0) {
    result.grads = tape.gradients();
    return result;
  }
  const double scale = 1.0 / static_cast<double>(examples.size());
  Var objective = total * scale;
  ad::backward(objective);
  result.loss = objective.value().item();
  result.nll = nll / static_cast<double>(result.used);
  result.grads = tape.gradients();
  return result;
}

double validation_nll(const AcflowModel& model, const data::Dataset& ds, const TrainConfig& cfg) {
  if (ds.valid.empty()) return std::numeric_limits<double>::quiet_NaN();
  const Rng base(cfg.seed ^ validation_stream);
  std::vector<Example> examples;
  examples.reserve(ds.valid.size());
  for (std::size_t i = 0; i < ds.valid.size(); ++i) {
    const std::size_t r = ds.valid[i];
    Rng rng = base.fork(r);
    examples.push_back(make_example(ds.row(r), ds.present[r], cfg.mode, cfg.mask, rng));
  }
  const auto lp = model.cond_log_prob(examples);
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const BitMask u = examples[i].m & ~examples[i].b;
    if (u.none()) continue;
    total -= lp[i] + model.standardizer().log_scale(u);
    ++used;
  }
  return used ? total / static_cast<double>(used) : std::numeric_limits<double>::quiet_NaN();
}

TrainResult train(AcflowModel& model, const data::Dataset& ds, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  TrainResult result;
  if (cfg.epochs == 0) return result;
  if (ds.train.empty()) throw std::invalid_argument("training split is empty");
  if (ds.dim() != model.dim()) {
    throw std::invalid_argument("dataset has " + std::to_string(ds.dim()) + " features, model has " +
                                std::to_string(model.dim()));
  }
  if (cfg.mode == TrainingMode::conditional) {
    for (std::size_t r : ds.train) {
      if (!ds.present[r].all()) {
        throw std::invalid_argument("conditional mode needs complete rows; use conditional_missing");
      }
    }
  }
  if (cfg.standardize) model.set_standardizer(data::fit_standardizer(ds));
  model.set_mode(cfg.mode);

  const Rng root(cfg.seed);
  ad::ParameterSet& params = model.parameters();
  Adam adam;
  double lr = cfg.learning_rate;
  std::vector<Tensor> best = params.snapshot();
  result.best_valid = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;

  std::vector<std::size_t> order = ds.train;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<Tensor> start = params.snapshot();
    const Adam adam_start = adam;

    std::vector<std::size_t> epoch_order = order;
    Rng shuffle = root.fork(2 * epoch);
    std::shuffle(epoch_order.begin(), epoch_order.end(), shuffle.engine());
    const Rng mask_base = root.fork(2 * epoch + 1);

    double nll_sum = 0.0;
    std::size_t nll_count = 0;
    bool failed = false;
    std::string failure;
    for (std::size_t begin = 0; begin < epoch_order.size() && !failed; begin += cfg.batch_size) {
      const std::size_t end = std::min(epoch_order.size(), begin + cfg.batch_size);
      std::vector<Example> batch;
      batch.reserve(end - begin);
      for (std::size_t i = begin; i < end; ++i) {
        const std::size_t r = epoch_order[i];
        Rng rng = mask_base.fork(r);
        batch.push_back(make_example(ds.row(r), ds.present[r], cfg.mode, cfg.mask, rng));
      }
      BatchResult br;
      try {
        br = batch_gradients(model, batch, cfg.lambda);
      } catch (const NumericalError& e) {
        failed = true;
        failure = e.what();
        break;
      }
      if (br.used == 0) continue;
      if (!std::isfinite(br.loss) || !all_finite(br.grads)) {
        failed = true;
        failure = "non-finite loss " + format_double(br.loss) + " at batch starting " +
                  std::to_string(begin);
        break;
      }
      clip_global_norm(br.grads, cfg.grad_clip);
      adam.step_update(params, br.grads, lr);
      nll_sum += br.nll * static_cast<double>(br.used);
      nll_count += br.used;
    }

    if (failed) {
      params.restore(start);
      adam = adam_start;
      if (result.lr_halved) {
        throw TrainingError("training failed twice (epoch " + std::to_string(epoch) +
                            ", learning rate " + format_double(lr) + "): " + failure);
      }
      result.lr_halved = true;
      lr *= 0.5;
      continue;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_nll = nll_count ? nll_sum / static_cast<double>(nll_count)
                              : std::numeric_limits<double>::quiet_NaN();
    rec.valid_nll = validation_nll(model, ds, cfg);
    rec.lr = lr;
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    const double score = std::isnan(rec.valid_nll) ? rec.train_nll : rec.valid_nll;
    if (score < result.best_valid) {
      result.best_valid = score;
      result.best_epoch = epoch;
      best = params.snapshot();
      since_best = 0;
    } else if (++since_best >= cfg.patience && cfg.patience > 0) {
      result.stopped_early = true;
      break;
    }
    lr *= cfg.lr_decay;
  }
  if (!result.history.empty()) params.restore(best);
  return result;
}

void write_history_csv(std::ostream& out, const std::vector<EpochRecord>& history) {
  out << "epoch,train_nll,valid_nll,lr\n";
  for (const auto& r : history) {
    out << r.epoch << ',' << format_double(r.train_nll) << ',' << format_double(r.valid_nll) << ','
        << format_double(r.lr) << '\n';
  }
}

}  // namespace acflow::train
