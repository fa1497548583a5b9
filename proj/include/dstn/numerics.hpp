#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "dstn/error.hpp"

namespace dstn {

using Vector = std::vector<double>;

/// Row-major dense matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  void fill(double v);
  /// Reshape keeping capacity; contents are zeroed.
  void reset(std::size_t rows, std::size_t cols);

  Matrix transposed() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// out[m x n] += a[m x k] * b[n x k]^T
void matmul_nt_acc(const Matrix& a, const Matrix& b, Matrix& out);
/// out[m x n] += a[m x k] * b[k x n]
void matmul_nn_acc(const Matrix& a, const Matrix& b, Matrix& out);
/// out[m x n] += a[k x m]^T * b[k x n]
void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out);

/// W x + b.
Vector linear(const Matrix& w, std::span<const double> b, std::span<const double> x);

double relu(double x);
Vector relu(std::span<const double> x);
double sigmoid(double s);

enum class Mode { train, eval };

/// SplitMix64 applied to a (seed, counter) pair: output k of a stream is
/// mix(seed + (k + 1) * 0x9E3779B97F4A7C15). Fully determined by the seed and
/// the number of draws, independent of platform and standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t counter = 0)
      : seed_(seed), counter_(counter) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }
  double normal();

  /// Independent stream derived from this generator's seed and a tag.
  Rng fork(std::uint64_t tag) const;

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

std::uint64_t splitmix64(std::uint64_t x);

/// Inverted dropout. Survivors are scaled by 1/(1-p) in train mode; eval
/// mode returns x unchanged.
Vector dropout(std::span<const double> x, double p, Mode mode, Rng& rng);

/// Fills `mask` with 0 or 1/(1-p) per unit.
void dropout_mask(std::span<double> mask, double p, Rng& rng);

/// Per-parameter Adagrad accumulator.
struct AdagradState {
  std::vector<double> accum;
  double lr = 0.01;
  double eps = 1e-8;

  AdagradState() = default;
  AdagradState(std::size_t n, double lr_, double eps_) : accum(n, 0.0), lr(lr_), eps(eps_) {}
};

/// accum += g^2; param -= lr * g / (sqrt(accum) + eps). Entries with g == 0
/// are left untouched.
void adagrad_step(std::span<double> param, std::span<const double> grad, AdagradState& state);

/// Same rule on a slice [offset, offset + grad.size()) of a larger state.
void adagrad_step(std::span<double> param, std::span<const double> grad, AdagradState& state,
                  std::size_t offset);

// Tensor checkpoint records. One record per line:
//   tensor <name> <rows> <cols> <v_0> ... <v_{rows*cols-1}>
// Values use the shortest decimal form that round-trips exactly.
struct NamedTensor {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
};

std::string format_double(double v);
void write_tensor(std::ostream& os, const std::string& name, std::size_t rows, std::size_t cols,
                  std::span<const double> values);
/// Parses one `tensor` record line.
NamedTensor parse_tensor(const std::string& line);

}  // namespace dstn
