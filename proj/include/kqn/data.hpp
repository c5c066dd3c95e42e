#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kqn/mlp.hpp"
#include "kqn/rng.hpp"

namespace kqn {

struct Dataset {
  std::vector<Vector> inputs;
  std::vector<Vector> targets;  // equals inputs for autoencoder data

  size_t size() const { return inputs.size(); }
  int dim() const { return inputs.empty() ? 0 : int(inputs.front().size()); }
};

// IDX ubyte tensor file (big-endian dims, magic 0x00 0x00 0x08 ndims).
// Pixels are scaled to [0,1]; samples are flattened over the trailing dims and
// used as autoencoder data (targets = inputs). Malformed or truncated files
// raise FormatError.
Dataset load_idx(const std::string& path);

// CSV matrix file: one sample per row, comma-separated decimal floats, no
// header. Targets equal inputs. Ragged rows, non-numeric fields, or
// non-finite values raise FormatError.
Dataset load_csv(const std::string& path);

enum class SyntheticKind { binary, continuous };

// Deterministic autoencoder stand-in data.
//   binary:     rank-8 latent Bernoulli patterns in {0,1}^dim with a spread of
//               per-coordinate bias logits
//   continuous: rank-8 Gaussian features min-max rescaled into [0,1]
Dataset synthetic_autoencoder(uint64_t seed, int n, int dim, SyntheticKind kind);

// Epoch-permutation sampler: each epoch draws a fresh permutation of the
// dataset and serves floor(n/m) full batches from it; the tail of n mod m
// indices is dropped. Fully deterministic for a fixed seed.
class BatchSampler {
 public:
  BatchSampler(size_t n, size_t batch_size, uint64_t seed);

  size_t batches_per_epoch() const { return n_ / m_; }
  size_t batch_size() const { return m_; }

  std::vector<size_t> next_indices();
  DataBatch next_batch(const Dataset& data);

 private:
  size_t n_ = 0;
  size_t m_ = 0;
  size_t pos_ = 0;
  std::vector<size_t> order_;
  Rng rng_;
};

}  // namespace kqn
