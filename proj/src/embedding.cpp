#include "dstn/embedding.hpp"

#include <algorithm>

#include "dstn/error.hpp"
#include "dstn/simd/kernels.hpp"

namespace dstn {

EmbeddingTable EmbeddingTable::uniform(std::size_t rows, std::size_t dim, double scale, Rng& rng) {
  EmbeddingTable t(rows, dim);
  for (double& v : t.e_.values()) v = rng.uniform(-scale, scale);
  return t;
}

void embed_into(const EncodedInstance& inst, const Matrix& table, std::span<double> out) {
  const std::size_t k = table.cols();
  require(out.size() == inst.field_count() * k, "embed_into: output size mismatch");
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t f = 0; f < inst.field_count(); ++f) {
    double* seg = out.data() + f * k;
    for (std::uint32_t idx : inst.field(f)) {
      require(idx < table.rows(), "embedding index out of range");
      const double* row = table.row(idx).data();
      for (std::size_t j = 0; j < k; ++j) seg[j] += row[j];
    }
  }
}

InstanceEmbedding embed_instance(const EncodedInstance& inst, const EmbeddingTable& table,
                                 const GroupSchema& schema) {
  require(inst.field_count() == schema.field_count(), "embed_instance: schema mismatch");
  InstanceEmbedding e;
  e.group = schema.group;
  e.x.resize(schema.field_count() * table.dim());
  embed_into(inst, table.matrix(), e.x);
  return e;
}

std::vector<RowGradient> embed_gradient_scatter(const EncodedInstance& inst,
                                                std::span<const double> upstream,
                                                std::size_t dim) {
  require(upstream.size() == inst.field_count() * dim, "embed_gradient_scatter: size mismatch");
  std::vector<RowGradient> out;
  for (std::size_t f = 0; f < inst.field_count(); ++f) {
    const auto seg = upstream.subspan(f * dim, dim);
    for (std::uint32_t idx : inst.field(f)) out.push_back({idx, Vector(seg.begin(), seg.end())});
  }
  return out;
}

void RowGradientBuffer::add_row(std::uint32_t row, std::span<const double> g) {
  require(row < grad_.rows() && g.size() == grad_.cols(), "RowGradientBuffer: bad row");
  if (!touched_flag_[row]) {
    touched_flag_[row] = 1;
    touched_.push_back(row);
  }
  double* dst = grad_.row(row).data();
  for (std::size_t j = 0; j < g.size(); ++j) dst[j] += g[j];
}

void RowGradientBuffer::scatter(const EncodedInstance& inst, std::span<const double> upstream) {
  const std::size_t k = grad_.cols();
  require(upstream.size() == inst.field_count() * k, "RowGradientBuffer: upstream size mismatch");
  for (std::size_t f = 0; f < inst.field_count(); ++f) {
    const auto seg = upstream.subspan(f * k, k);
    for (std::uint32_t idx : inst.field(f)) add_row(idx, seg);
  }
}

void RowGradientBuffer::clear() {
  for (std::uint32_t r : touched_) {
    auto row = grad_.row(r);
    std::fill(row.begin(), row.end(), 0.0);
    touched_flag_[r] = 0;
  }
  touched_.clear();
}

}  // namespace dstn
