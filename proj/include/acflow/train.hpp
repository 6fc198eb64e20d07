#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "acflow/data.hpp"
#include "acflow/diffcore/parameters.hpp"
#include "acflow/masking.hpp"
#include "acflow/model.hpp"

namespace acflow::train {

using masking::MaskDistribution;

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 256;
  double learning_rate = 1e-3;
  double lr_decay = 1.0;  // multiplied into the rate after every epoch
  double grad_clip = 5.0;  // global L2 norm; 0 disables clipping
  MaskDistribution mask = MaskDistribution::bernoulli(0.5);
  double lambda = 1.0;
  std::uint64_t seed = 0;
  TrainingMode mode = TrainingMode::conditional;
  std::size_t patience = 20;  // epochs without validation improvement; 0 disables
  bool standardize = true;    // fit the standardizer on the training split

  // Throws std::invalid_argument on out-of-range fields.
  void validate() const;
  // Canonical key=value text of every field, one per line.
  std::string digest() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_nll = 0.0;  // standardized units, mean over examples
  double valid_nll = 0.0;  // standardized units; NaN without a validation split
  double lr = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_valid = 0.0;
  bool stopped_early = false;
  bool lr_halved = false;
};

// Maps a data row to the training example for a mode: conditional uses
// m = 1, conditional_missing uses the row's mask, marginal draws b and then
// trains on b' = 0, m' = m & ~b.
Example make_example(std::span<const double> x, const BitMask& present, TrainingMode mode,
                     const MaskDistribution& dist, Rng& rng);

struct Adam {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<ad::Tensor> m;
  std::vector<ad::Tensor> v;

  void step_update(ad::ParameterSet& params, const std::vector<ad::Tensor>& grads, double lr);
};

// Scales every gradient by min(1, max_norm / ||g||).  Returns the norm
// before clipping.
double clip_global_norm(std::vector<ad::Tensor>& grads, double max_norm);

// Mean loss over a batch (standardized units) with gradients for every
// parameter, grouped by |u| internally.
struct BatchResult {
  double loss = 0.0;
  double nll = 0.0;
  std::size_t used = 0;  // examples with |u| > 0
  std::vector<ad::Tensor> grads;
};
BatchResult batch_gradients(const AcflowModel& model, std::span<const Example> examples,
                            double lambda);

using EpochCallback = std::function<void(const EpochRecord&)>;

// Maximum-likelihood training with fresh masks each epoch, Adam, gradient
// clipping, validation tracking and restoration of the best parameters.
// A non-finite loss aborts the epoch, restores the epoch's starting state
// and halves the rate once; a second one throws TrainingError.
TrainResult train(AcflowModel& model, const data::Dataset& ds, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

// Validation NLL in standardized units with masks fixed by the seed.
double validation_nll(const AcflowModel& model, const data::Dataset& ds, const TrainConfig& cfg);

void write_history_csv(std::ostream& out, const std::vector<EpochRecord>& history);

}  // namespace acflow::train
