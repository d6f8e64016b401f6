#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "asen/dataset.hpp"
#include "asen/model.hpp"

namespace asen {

/// (anchor, positive, negative | attribute); images are record indices into a manifest.
struct Triplet {
  std::size_t anchor = 0;
  std::size_t positive = 0;
  std::size_t negative = 0;
  std::size_t attribute = 0;
  std::size_t anchor_value = 0;
  std::size_t negative_value = 0;

  friend bool operator==(const Triplet&, const Triplet&) = default;
};

struct TrainConfig {
  Real margin = 0.2;
  Real learning_rate = 1e-4;
  Real lr_decay = 0.985;  // multiplied in after every epoch
  std::size_t epochs = 200;
  std::size_t triplets_per_epoch = 100000;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real epsilon = 1e-8;
  std::size_t validation_stride = 1;
  // Worker threads for per-triplet forward/backward; results do not depend on it.
  std::size_t threads = 1;

  void validate() const;
};

struct OptimizerState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::uint64_t step = 0;
};

/// Draws `count` triplets from the images in `pool`: attribute uniform, then a value class
/// with at least two images uniform, anchor/positive uniform inside it, negative uniform
/// among the pool images annotated with a different value.
std::vector<Triplet> sample_triplets(const DatasetManifest& manifest,
                                     std::span<const std::size_t> pool, std::size_t count,
                                     std::uint64_t seed);

/// max(0, margin - s_pos + s_neg); the subgradient at the kink is zero.
Var triplet_margin_loss(Var s_pos, Var s_neg, Real margin);
Real triplet_margin_loss(Real s_pos, Real s_neg, Real margin);

/// Bias-corrected Adam update. grads[i] belongs to params[i]; an empty tensor means zero.
void adam_step(ParameterSet& params, std::span<const Tensor> grads, OptimizerState& state,
               Real lr, const TrainConfig& config);

Real lr_schedule(std::size_t epoch, Real base_lr, Real decay);

/// Loss of one triplet on a fresh tape, ready for backward.
Var triplet_loss(Tape& tape, const AsenModel& model, const Dataset& data, const Triplet& t,
                 Real margin);

/// One pass over `triplets` in mini-batches (mean loss per batch, one Adam step per batch).
/// Returns the mean loss over all triplets.
Real train_epoch(AsenModel& model, const Dataset& data, std::span<const Triplet> triplets,
                 const TrainConfig& config, OptimizerState& state, Real lr);

struct NamedTensor {
  std::string name;
  Tensor value;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct Checkpoint {
  AsenConfig model;
  BackboneConfig backbone;
  std::vector<NamedTensor> params;
  std::size_t epoch = 0;
  Real metric = 0;
  std::string config_hash;
};

std::string config_hash(const AsenConfig& model, const BackboneConfig& backbone,
                        const TrainConfig& train);

Checkpoint snapshot(const AsenModel& model, std::size_t epoch, Real metric,
                    const std::string& hash);
void restore(AsenModel& model, const Checkpoint& checkpoint);
AsenModel model_from_checkpoint(const Checkpoint& checkpoint);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

using Validator = std::function<Real(const AsenModel&)>;

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  Real mean_loss = 0;
  Real lr = 0;
  std::optional<Real> metric;
};

struct FitResult {
  Checkpoint best;
  std::vector<EpochLog> history;
};

/// 1-based epoch of the largest metric; the earliest wins ties.
std::size_t best_epoch(std::span<const std::optional<Real>> metrics);

/// Trains for config.epochs epochs, resampling triplets from the train split with seed ^ epoch,
/// and keeps the snapshot with the best validation metric. The model is left holding the best
/// snapshot. When `log` is set, writes "epoch\tmean_loss\tlr\tval_metric" per epoch.
FitResult fit(AsenModel& model, const Dataset& data, const TrainConfig& config,
              const Validator& validate, std::ostream* log = nullptr);

}  // namespace asen
