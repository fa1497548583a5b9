#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dstn/numerics.hpp"
#include "dstn/schema.hpp"

namespace dstn {

/// The N x K embedding matrix E; row i is feature i's vector.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(std::size_t rows, std::size_t dim) : e_(rows, dim) {}
  explicit EmbeddingTable(Matrix e) : e_(std::move(e)) {}

  /// Entries uniform in [-scale, scale].
  static EmbeddingTable uniform(std::size_t rows, std::size_t dim, double scale, Rng& rng);

  std::size_t rows() const noexcept { return e_.rows(); }
  std::size_t dim() const noexcept { return e_.cols(); }
  Matrix& matrix() noexcept { return e_; }
  const Matrix& matrix() const noexcept { return e_; }

 private:
  Matrix e_;
};

struct InstanceEmbedding {
  AdGroup group = AdGroup::target;
  Vector x;
};

/// Concatenates per-field vectors in field order: a row copy for univalent
/// and numerical fields, the sum of rows (zero if empty) for multivalent.
InstanceEmbedding embed_instance(const EncodedInstance& inst, const EmbeddingTable& table,
                                 const GroupSchema& schema);

/// Same as embed_instance, writing into `out` (size field_count * K).
void embed_into(const EncodedInstance& inst, const Matrix& table, std::span<double> out);

struct RowGradient {
  std::uint32_t row;
  Vector grad;
};

/// Adjoint of embed_instance: one entry per index occurrence.
std::vector<RowGradient> embed_gradient_scatter(const EncodedInstance& inst,
                                                std::span<const double> upstream,
                                                std::size_t dim);

/// Dense N x K accumulator that remembers which rows were touched, so that
/// clearing and sparse updates cost O(touched).
class RowGradientBuffer {
 public:
  RowGradientBuffer() = default;
  RowGradientBuffer(std::size_t rows, std::size_t dim) : grad_(rows, dim), touched_flag_(rows, 0) {}

  void scatter(const EncodedInstance& inst, std::span<const double> upstream);
  void add_row(std::uint32_t row, std::span<const double> g);
  void clear();

  /// Touched rows in first-touch order.
  const std::vector<std::uint32_t>& touched() const noexcept { return touched_; }
  std::span<const double> row(std::uint32_t r) const { return grad_.row(r); }
  std::span<double> row(std::uint32_t r) { return grad_.row(r); }
  const Matrix& dense() const noexcept { return grad_; }
  std::size_t dim() const noexcept { return grad_.cols(); }

 private:
  Matrix grad_;
  std::vector<std::uint8_t> touched_flag_;
  std::vector<std::uint32_t> touched_;
};

}  // namespace dstn
