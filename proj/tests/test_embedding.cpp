#include <doctest.h>

#include <cmath>

#include "dstn/embedding.hpp"

using namespace dstn;

namespace {

GroupSchema three_fields() {
  GroupSchema g;
  g.group = AdGroup::clicked;
  g.fields = {{"id", FieldKind::univalent, {}},
              {"title", FieldKind::multivalent, {}},
              {"price", FieldKind::numerical, {1.0}}};
  return g;
}

EncodedInstance make_inst(std::uint32_t id, std::vector<std::uint32_t> bag, std::uint32_t price) {
  EncodedInstance e;
  e.group = AdGroup::clicked;
  const std::uint32_t a[1] = {id};
  const std::uint32_t c[1] = {price};
  e.push_field(a);
  e.push_field(bag);
  e.push_field(c);
  return e;
}

std::span<const double> seg(const Vector& x, std::size_t f, std::size_t k) { return {x.data() + f * k, k}; }

}  // namespace

TEST_CASE("embed_instance: row copy, bag sum, dims") {
  Rng rng(1);
  const EmbeddingTable table = EmbeddingTable::uniform(20, 10, 1.0, rng);
  const GroupSchema g = three_fields();
  const InstanceEmbedding e = embed_instance(make_inst(3, {5, 7}, 11), table, g);
  CHECK(e.group == AdGroup::clicked);
  REQUIRE(e.x.size() == 30);
  const Matrix& m = table.matrix();
  for (std::size_t k = 0; k < 10; ++k) {
    CHECK(seg(e.x, 0, 10)[k] == m(3, k));
    CHECK(seg(e.x, 1, 10)[k] == m(5, k) + m(7, k));
    CHECK(seg(e.x, 2, 10)[k] == m(11, k));
  }
  const InstanceEmbedding empty = embed_instance(make_inst(3, {}, 11), table, g);
  for (double v : seg(empty.x, 1, 10)) CHECK(v == 0.0);
  // Duplicates count with multiplicity.
  const InstanceEmbedding dup = embed_instance(make_inst(3, {5, 5}, 11), table, g);
  for (std::size_t k = 0; k < 10; ++k) CHECK(seg(dup.x, 1, 10)[k] == m(5, k) + m(5, k));
}

TEST_CASE("embed_instance rejects out-of-range indices and schema mismatch") {
  const EmbeddingTable table(4, 2);
  CHECK_THROWS_AS(embed_instance(make_inst(9, {}, 1), table, three_fields()), ContractViolation);
  GroupSchema two = three_fields();
  two.fields.pop_back();
  CHECK_THROWS_AS(embed_instance(make_inst(1, {}, 1), table, two), ContractViolation);
}

TEST_CASE("embed_instance is linear in the table") {
  Rng rng(2);
  const EmbeddingTable t = EmbeddingTable::uniform(15, 4, 1.0, rng);
  Matrix scaled = t.matrix();
  for (double& v : scaled.values()) v *= -2.5;
  const auto inst = make_inst(1, {2, 3, 4}, 6);
  const auto a = embed_instance(inst, t, three_fields());
  const auto b = embed_instance(inst, EmbeddingTable(scaled), three_fields());
  for (std::size_t i = 0; i < a.x.size(); ++i) CHECK(b.x[i] == doctest::Approx(-2.5 * a.x[i]));
}

TEST_CASE("scatter examples") {
  const auto inst = make_inst(3, {5, 7}, 11);
  const Vector up{1, 2, 3, 4, 5, 6};
  const auto rows = embed_gradient_scatter(inst, up, 2);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].row == 3);
  CHECK(rows[0].grad == Vector{1, 2});
  CHECK(rows[1].row == 5);
  CHECK(rows[1].grad == Vector{3, 4});
  CHECK(rows[2].row == 7);
  CHECK(rows[2].grad == Vector{3, 4});
  CHECK(rows[3].row == 11);
  CHECK(rows[3].grad == Vector{5, 6});
  CHECK(embed_gradient_scatter(make_inst(3, {}, 11), up, 2).size() == 2);
}

TEST_CASE("scatter is the adjoint of embed (finite differences)") {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    EmbeddingTable t = EmbeddingTable::uniform(12, 3, 1.0, rng);
    std::vector<std::uint32_t> bag;
    for (std::size_t i = rng.below(4); i > 0; --i) bag.push_back(static_cast<std::uint32_t>(rng.below(12)));
    const auto inst = make_inst(static_cast<std::uint32_t>(rng.below(12)), bag,
                                static_cast<std::uint32_t>(rng.below(12)));
    Vector u(9);
    for (double& v : u) v = rng.uniform(-1, 1);

    Matrix analytic(12, 3);
    for (const RowGradient& rg : embed_gradient_scatter(inst, u, 3))
      for (std::size_t k = 0; k < 3; ++k) analytic(rg.row, k) += rg.grad[k];

    RowGradientBuffer buf(12, 3);
    buf.scatter(inst, u);
    CHECK(buf.dense() == analytic);

    auto f = [&]() {
      const auto e = embed_instance(inst, t, three_fields());
      double s = 0;
      for (std::size_t i = 0; i < 9; ++i) s += u[i] * e.x[i];
      return s;
    };
    double num2 = 0, diff2 = 0, an2 = 0;
    for (std::size_t i = 0; i < t.matrix().size(); ++i) {
      double& w = t.matrix().values()[i];
      const double w0 = w;
      w = w0 + 1e-5;
      const double fp = f();
      w = w0 - 1e-5;
      const double fm = f();
      w = w0;
      const double num = (fp - fm) / 2e-5;
      const double an = analytic.values()[i];
      num2 += num * num;
      an2 += an * an;
      diff2 += (num - an) * (num - an);
    }
    CHECK(std::sqrt(diff2) / std::max({std::sqrt(num2), std::sqrt(an2), 1e-12}) <= 1e-6);
  }
}

TEST_CASE("RowGradientBuffer tracks touched rows and clears") {
  RowGradientBuffer buf(6, 2);
  const auto inst = make_inst(1, {4, 1}, 5);
  buf.scatter(inst, Vector{1, 1, 2, 2, 3, 3});
  CHECK(buf.touched() == std::vector<std::uint32_t>{1, 4, 5});
  CHECK(buf.row(1)[0] == 3.0);
  buf.clear();
  CHECK(buf.touched().empty());
  for (double v : buf.dense().values()) CHECK(v == 0.0);
}
