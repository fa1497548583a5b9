#include "dstn/numerics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <ostream>
#include <sstream>

#include "dstn/simd/kernels.hpp"

namespace dstn {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  require(data_.size() == rows * cols, "Matrix: data size does not match shape");
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Matrix::reset(std::size_t rows, std::size_t cols) {
  rows_ = rows;
  cols_ = cols;
  data_.assign(rows * cols, 0.0);
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

void matmul_nn_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  require(a.cols() == b.rows() && out.rows() == a.rows() && out.cols() == b.cols(),
          "matmul_nn_acc: shape mismatch");
  if (a.rows() == 0 || b.cols() == 0 || a.cols() == 0) return;
  simd::gemm_nn(a.rows(), b.cols(), a.cols(), a.data(), a.cols(), b.data(), b.cols(),
                out.data(), out.cols());
}

void matmul_nt_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  require(a.cols() == b.cols() && out.rows() == a.rows() && out.cols() == b.rows(),
          "matmul_nt_acc: shape mismatch");
  if (a.rows() == 0 || b.rows() == 0 || a.cols() == 0) return;
  const Matrix bt = b.transposed();
  simd::gemm_nn(a.rows(), bt.cols(), a.cols(), a.data(), a.cols(), bt.data(), bt.cols(),
                out.data(), out.cols());
}

void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  require(a.rows() == b.rows() && out.rows() == a.cols() && out.cols() == b.cols(),
          "matmul_tn_acc: shape mismatch");
  if (a.cols() == 0 || b.cols() == 0 || a.rows() == 0) return;
  const Matrix at = a.transposed();
  simd::gemm_nn(at.rows(), b.cols(), at.cols(), at.data(), at.cols(), b.data(), b.cols(),
                out.data(), out.cols());
}

Vector linear(const Matrix& w, std::span<const double> b, std::span<const double> x) {
  require(w.cols() == x.size() && w.rows() == b.size(), "linear: shape mismatch");
  Vector out(b.begin(), b.end());
  for (std::size_t r = 0; r < w.rows(); ++r) out[r] += simd::dot(w.row(r).data(), x.data(), x.size());
  return out;
}

double relu(double x) { return x > 0.0 ? x : 0.0; }

Vector relu(std::span<const double> x) {
  Vector out(x.begin(), x.end());
  simd::relu(out.data(), out.size());
  return out;
}

double sigmoid(double s) {
  if (s >= 0.0) return 1.0 / (1.0 + std::exp(-s));
  const double e = std::exp(s);
  return e / (1.0 + e);
}

std::uint64_t splitmix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t Rng::next_u64() {
  ++counter_;
  return splitmix64(seed_ + counter_ * 0x9E3779B97F4A7C15ULL);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t n) {
  require(n > 0, "Rng::below: n must be positive");
  // Rejection sampling removes modulo bias.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  // Box-Muller; the second variate is discarded to keep draws stateless.
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

Rng Rng::fork(std::uint64_t tag) const {
  return Rng(splitmix64(seed_ ^ splitmix64(tag + 0x632BE59BD9B4E019ULL)));
}

void dropout_mask(std::span<double> mask, double p, Rng& rng) {
  require(p >= 0.0 && p < 1.0, "dropout: p must be in [0, 1)");
  const double keep_scale = 1.0 / (1.0 - p);
  for (double& m : mask) m = (p > 0.0 && rng.uniform() < p) ? 0.0 : keep_scale;
}

Vector dropout(std::span<const double> x, double p, Mode mode, Rng& rng) {
  require(p >= 0.0 && p < 1.0, "dropout: p must be in [0, 1)");
  Vector out(x.begin(), x.end());
  if (mode == Mode::eval || p == 0.0) return out;
  Vector mask(x.size());
  dropout_mask(mask, p, rng);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return out;
}

void adagrad_step(std::span<double> param, std::span<const double> grad, AdagradState& state) {
  adagrad_step(param, grad, state, 0);
}

void adagrad_step(std::span<double> param, std::span<const double> grad, AdagradState& state,
                  std::size_t offset) {
  require(param.size() == grad.size() && offset + grad.size() <= state.accum.size(),
          "adagrad_step: shape mismatch");
  simd::adagrad(param.data(), state.accum.data() + offset, grad.data(), grad.size(), state.lr,
                state.eps);
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void write_tensor(std::ostream& os, const std::string& name, std::size_t rows, std::size_t cols,
                  std::span<const double> values) {
  require(values.size() == rows * cols, "write_tensor: shape mismatch");
  os << "tensor " << name << ' ' << rows << ' ' << cols;
  char buf[64];
  for (double v : values) {
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    os << ' ';
    os.write(buf, res.ptr - buf);
  }
  os << '\n';
}

NamedTensor parse_tensor(const std::string& line) {
  NamedTensor t;
  std::size_t pos = 0;
  auto next_token = [&]() -> std::string_view {
    while (pos < line.size() && line[pos] == ' ') ++pos;
    const std::size_t start = pos;
    while (pos < line.size() && line[pos] != ' ') ++pos;
    return std::string_view(line).substr(start, pos - start);
  };
  if (next_token() != "tensor") throw ParseError("tensor record must start with 'tensor'");
  t.name = std::string(next_token());
  auto parse_size = [&](std::string_view tok) {
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || p != tok.data() + tok.size()) throw ParseError("bad tensor shape");
    return v;
  };
  t.rows = parse_size(next_token());
  t.cols = parse_size(next_token());
  t.values.resize(t.rows * t.cols);
  for (double& v : t.values) {
    const std::string_view tok = next_token();
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (tok.empty() || ec != std::errc() || p != tok.data() + tok.size())
      throw ParseError("bad tensor value in '" + t.name + "'");
  }
  if (!next_token().empty()) throw ParseError("trailing values in tensor '" + t.name + "'");
  return t;
}

}  // namespace dstn
