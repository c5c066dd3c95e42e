#include "kqn/data.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>

namespace kqn {

namespace {

uint32_t read_be32(const unsigned char* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) |
         uint32_t(p[3]);
}

}  // namespace

Dataset load_idx(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw FormatError("load_idx: cannot open '" + path + "'");
  }
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 4) {
    throw FormatError("load_idx: '" + path + "' is too short for an IDX header");
  }
  if (bytes[0] != 0 || bytes[1] != 0) {
    throw FormatError("load_idx: bad magic in '" + path + "'");
  }
  if (bytes[2] != 0x08) {
    throw FormatError("load_idx: unsupported element type 0x" +
                      std::to_string(bytes[2]) + " in '" + path + "' (ubyte only)");
  }
  const int ndims = bytes[3];
  if (ndims < 1) {
    throw FormatError("load_idx: zero-dimensional tensor in '" + path + "'");
  }
  if (bytes.size() < 4 + 4 * size_t(ndims)) {
    throw FormatError("load_idx: truncated dimension list in '" + path + "'");
  }
  std::vector<uint64_t> dims(ndims);
  for (int i = 0; i < ndims; ++i) dims[i] = read_be32(&bytes[4 + 4 * i]);
  const uint64_t n = dims[0];
  uint64_t sample_dim = 1;
  for (int i = 1; i < ndims; ++i) sample_dim *= dims[i];
  if (n == 0) {
    throw FormatError("load_idx: '" + path + "' contains zero items");
  }
  if (sample_dim == 0) {
    throw FormatError("load_idx: zero-sized samples in '" + path + "'");
  }
  const uint64_t expect = 4 + 4 * uint64_t(ndims) + n * sample_dim;
  if (bytes.size() != expect) {
    throw FormatError("load_idx: payload size mismatch in '" + path + "': have " +
                      std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(expect));
  }
  Dataset out;
  out.inputs.reserve(n);
  const unsigned char* p = bytes.data() + 4 + 4 * ndims;
  for (uint64_t i = 0; i < n; ++i) {
    Vector x(sample_dim);
    for (uint64_t j = 0; j < sample_dim; ++j) x[j] = double(*p++) / 255.0;
    out.inputs.push_back(std::move(x));
  }
  out.targets = out.inputs;
  return out;
}

Dataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw FormatError("load_csv: cannot open '" + path + "'");
  }
  Dataset out;
  std::string line;
  size_t lineno = 0;
  size_t dim = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    Vector x;
    size_t start = 0;
    while (start <= line.size()) {
      size_t comma = line.find(',', start);
      if (comma == std::string::npos) comma = line.size();
      const std::string field = line.substr(start, comma - start);
      size_t consumed = 0;
      double v = 0.0;
      try {
        v = std::stod(field, &consumed);
      } catch (const std::exception&) {
        throw FormatError("load_csv: '" + path + "' line " + std::to_string(lineno) +
                          ": cannot parse field '" + field + "'");
      }
      while (consumed < field.size() && std::isspace(unsigned(field[consumed]))) ++consumed;
      if (consumed != field.size()) {
        throw FormatError("load_csv: '" + path + "' line " + std::to_string(lineno) +
                          ": trailing junk in field '" + field + "'");
      }
      if (!std::isfinite(v)) {
        throw FormatError("load_csv: '" + path + "' line " + std::to_string(lineno) +
                          ": non-finite value");
      }
      x.push_back(v);
      start = comma + 1;
      if (comma == line.size()) break;
    }
    if (dim == 0) {
      dim = x.size();
    } else if (x.size() != dim) {
      throw FormatError("load_csv: '" + path + "' line " + std::to_string(lineno) +
                        ": row has " + std::to_string(x.size()) +
                        " fields, expected " + std::to_string(dim));
    }
    out.inputs.push_back(std::move(x));
  }
  if (out.inputs.empty()) {
    throw FormatError("load_csv: '" + path + "' contains no samples");
  }
  out.targets = out.inputs;
  return out;
}

Dataset synthetic_autoencoder(uint64_t seed, int n, int dim, SyntheticKind kind) {
  if (n <= 0 || dim <= 0) {
    throw ConfigError("synthetic_autoencoder: n and dim must be positive");
  }
  constexpr int kRank = 8;
  Rng rng(derive_seed(seed, 0xDA7A));
  Dataset out;
  out.inputs.reserve(n);

  if (kind == SyntheticKind::binary) {
    // Per-coordinate bias logits plus a rank-8 sign-latent mixing matrix: the
    // marginals carry a lot of structure (easy to learn), the latent carries
    // the rest. The bias range is skewed negative so most coordinates are
    // usually off, matching the sparsity and gradient scale of the image data
    // this stands in for.
    Matrix mix(kRank, dim);
    for (double& v : mix.data) v = 1.5 * rng.gauss();
    Vector bias(dim);
    for (double& v : bias) v = rng.uniform(-5.0, 1.0);
    for (int i = 0; i < n; ++i) {
      Vector z(kRank);
      for (double& v : z) v = rng.bernoulli(0.5) ? 1.0 : -1.0;
      Vector x(dim);
      for (int j = 0; j < dim; ++j) {
        double logit = bias[j];
        for (int k = 0; k < kRank; ++k) logit += z[k] * mix(k, j);
        const double p = 1.0 / (1.0 + std::exp(-logit));
        x[j] = double(rng.bernoulli(p));
      }
      out.inputs.push_back(std::move(x));
    }
  } else {
    Matrix mix(kRank, dim);
    for (double& v : mix.data) v = rng.gauss();
    std::vector<Vector> raw;
    raw.reserve(n);
    double lo = INFINITY, hi = -INFINITY;
    for (int i = 0; i < n; ++i) {
      Vector z(kRank);
      for (double& v : z) v = rng.gauss();
      Vector x(dim, 0.0);
      for (int j = 0; j < dim; ++j) {
        for (int k = 0; k < kRank; ++k) x[j] += z[k] * mix(k, j);
        lo = std::min(lo, x[j]);
        hi = std::max(hi, x[j]);
      }
      raw.push_back(std::move(x));
    }
    const double span = hi > lo ? hi - lo : 1.0;
    for (Vector& x : raw) {
      for (double& v : x) v = (v - lo) / span;
      out.inputs.push_back(std::move(x));
    }
  }
  out.targets = out.inputs;
  return out;
}

BatchSampler::BatchSampler(size_t n, size_t batch_size, uint64_t seed)
    : n_(n), m_(batch_size), rng_(derive_seed(seed, 0x5A3B1E)) {
  if (m_ == 0 || m_ > n_) {
    throw ConfigError("BatchSampler: batch size " + std::to_string(batch_size) +
                      " invalid for dataset of " + std::to_string(n) + " samples");
  }
  order_.resize(n_);
  std::iota(order_.begin(), order_.end(), size_t(0));
  rng_.shuffle(order_);
}

std::vector<size_t> BatchSampler::next_indices() {
  if (pos_ + m_ > batches_per_epoch() * m_) {
    rng_.shuffle(order_);  // new epoch, drop the tail of the previous one
    pos_ = 0;
  }
  std::vector<size_t> idx(order_.begin() + pos_, order_.begin() + pos_ + m_);
  pos_ += m_;
  return idx;
}

DataBatch BatchSampler::next_batch(const Dataset& data) {
  if (data.size() != n_) {
    throw DimensionError("BatchSampler::next_batch: dataset has " +
                         std::to_string(data.size()) + " samples, sampler expects " +
                         std::to_string(n_));
  }
  DataBatch b;
  for (size_t i : next_indices()) {
    b.inputs.push_back(data.inputs[i]);
    b.targets.push_back(data.targets[i]);
  }
  return b;
}

}  // namespace kqn
