#pragma once

// Reverse-mode gradients for the toy transformer and the masked/dense
// finetuning loop used between sparsification rounds.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dtm/model.hpp"

namespace dtm {

enum class Optimizer {
  Sgd,    // plain gradient descent, decoupled weight decay
  AdamW,  // used for pretraining the unmasked base model
};

std::string_view optimizer_name(Optimizer o) noexcept;

struct TrainConfig {
  double learning_rate = 3e-3;
  double weight_decay = 0.01;
  std::size_t batch_size = 16;
  std::size_t seq_len = 128;
  std::size_t masked_steps = 450;
  std::size_t dense_steps = 50;
  std::uint64_t seed = 0;
  Optimizer optimizer = Optimizer::Sgd;

  void validate() const;
};

struct LossAndGrads {
  double loss = 0.0;
  ModelWeights grads;
};

// Mean next-token cross-entropy over every position of every sequence, and its
// exact gradient with respect to the raw weights. With masks applied, masked
// weights receive zero gradient (the forward uses raw * mask).
LossAndGrads loss_and_grads(const ToyModel& model, std::span<const TokenSequence> batch, bool apply_masks = true);

// Loss only (same definition as loss_and_grads).
double batch_loss(const FrozenModel& model, std::span<const TokenSequence> batch);

enum class Phase { Masked, Dense };

struct LossRecord {
  std::size_t step = 0;
  Phase phase = Phase::Masked;
  double loss = 0.0;
};

struct LossTrace {
  std::vector<LossRecord> records;

  std::size_t count(Phase p) const noexcept;
  std::string to_csv() const;  // header: step,phase,loss
};

// Uniformly placed training windows over a token stream; reproducible per seed.
class BatchSampler {
 public:
  BatchSampler(std::span<const Token> stream, std::size_t seq_len, std::uint64_t seed);

  std::vector<TokenSequence> next(std::size_t batch_size);

 private:
  std::span<const Token> stream_;
  std::size_t seq_len_;
  std::mt19937_64 rng_;
};

class Trainer {
 public:
  Trainer(TrainConfig cfg, std::size_t n_params_hint = 0);

  // One optimizer update; returns the pre-update batch loss.
  double step(ToyModel& model, std::span<const TokenSequence> batch, bool apply_masks);

  const TrainConfig& config() const noexcept { return cfg_; }

 private:
  TrainConfig cfg_;
  std::size_t t_ = 0;
  ModelWeights m_, v_;  // AdamW moments, lazily sized
};

// masked_steps updates with masks in the forward and raw weights re-masked
// after every update, then dense_steps updates with masks ignored.
LossTrace train_masked(ToyModel& model, const TrainConfig& cfg, BatchSampler& data);

// Plain training with masks applied throughout; every step tagged Masked.
LossTrace train(ToyModel& model, const TrainConfig& cfg, BatchSampler& data, std::size_t steps);

}  // namespace dtm
