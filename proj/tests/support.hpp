#pragma once

#include <random>

#include "dtm/model.hpp"
#include "dtm/numerics.hpp"

namespace dtm::testing {

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> dist(0.0, sd);
  Matrix m(rows, cols);
  for (double& v : m.values()) v = dist(rng);
  return m;
}

inline TokenSequence random_tokens(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, vocab - 1);
  TokenSequence t(n);
  for (auto& x : t) x = static_cast<Token>(pick(rng));
  return t;
}

inline ModelConfig tiny_config(std::size_t layers = 2) {
  ModelConfig cfg;
  cfg.vocab_size = 32;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_layers = layers;
  cfg.d_ff = 24;
  cfg.max_seq = 64;
  return cfg;
}

inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

}  // namespace dtm::testing
