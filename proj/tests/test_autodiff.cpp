#include "doctest.h"
#include "support/gradcheck.hpp"

#include "ecpec/autodiff.hpp"
#include "ecpec/nn.hpp"
#include "ecpec/params.hpp"

#include <cmath>
#include <functional>
#include <vector>

using namespace ecpec;

namespace {

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

// sum(op(a, b) .* C) with a fixed random C so that every output entry matters.
double check_op(const std::function<ad::Var(ad::Var, ad::Var)>& op, Eigen::Index ar, Eigen::Index ac,
                Eigen::Index br, Eigen::Index bc, std::uint64_t seed = 7) {
  Rng rng(seed);
  ParameterStore store;
  store.set("a", random_matrix(rng, ar, ac));
  store.set("b", random_matrix(rng, br, bc));
  Matrix weights;
  {
    ad::Graph g;
    auto out = op(g.parameter(store, "a"), g.parameter(store, "b"));
    weights = random_matrix(rng, out.rows(), out.cols());
  }
  auto result = testing::check_gradients(store, [&](ad::Graph& g) {
    auto out = op(g.parameter(store, "a"), g.parameter(store, "b"));
    return ad::sum(ad::mul(out, g.constant(weights)));
  });
  return result.max_rel_error;
}

}  // namespace

TEST_CASE("binary arithmetic gradients") {
  CHECK(check_op([](auto a, auto b) { return ad::matmul(a, b); }, 3, 4, 4, 2) < 1e-6);
  CHECK(check_op([](auto a, auto b) { return ad::matmul_nt(a, b); }, 3, 4, 5, 4) < 1e-6);
  CHECK(check_op([](auto a, auto b) { return ad::add(a, b); }, 3, 4, 3, 4) < 1e-6);
  CHECK(check_op([](auto a, auto b) { return ad::sub(a, b); }, 3, 4, 3, 4) < 1e-6);
  CHECK(check_op([](auto a, auto b) { return ad::mul(a, b); }, 3, 4, 3, 4) < 1e-6);
  CHECK(check_op([](auto a, auto b) { return ad::div(a, ad::add_scalar(ad::mul(b, b), 1.0)); }, 3, 4, 3, 4) < 1e-6);
  CHECK(check_op([](auto a, auto b) { return ad::add_row(a, b); }, 3, 4, 1, 4) < 1e-6);
  CHECK(check_op([](auto a, auto b) { return ad::outer_sum(a, b); }, 4, 1, 4, 1) < 1e-6);
  CHECK(check_op([](auto a, auto b) { return ad::concat_cols(a, b); }, 3, 2, 3, 4) < 1e-6);
  CHECK(check_op([](auto a, auto) { return ad::transpose(a); }, 3, 4, 1, 1) < 1e-6);
}

TEST_CASE("unary nonlinearity gradients") {
  CHECK(check_op([](auto a, auto) { return ad::tanh(a); }, 3, 4, 1, 1) < 1e-6);
  CHECK(check_op([](auto a, auto) { return ad::sigmoid(a); }, 3, 4, 1, 1) < 1e-6);
  CHECK(check_op([](auto a, auto) { return ad::gelu(a); }, 3, 4, 1, 1) < 1e-6);
  CHECK(check_op([](auto a, auto) { return ad::relu(a); }, 3, 4, 1, 1) < 1e-6);
  CHECK(check_op([](auto a, auto) { return ad::scale(a, -2.5); }, 3, 4, 1, 1) < 1e-6);
  CHECK(check_op([](auto a, auto) { return ad::softmax_rows(a); }, 3, 4, 1, 1) < 1e-6);
  CHECK(check_op([](auto a, auto) { return ad::log_softmax_rows(a); }, 3, 4, 1, 1) < 1e-6);
  CHECK(check_op([](auto a, auto) { return ad::col_sums(a); }, 3, 4, 1, 1) < 1e-6);
  CHECK(check_op([](auto a, auto) { return ad::mean(a); }, 3, 4, 1, 1) < 1e-6);
}

TEST_CASE("shape manipulation gradients") {
  CHECK(check_op([](auto a, auto) { return ad::slice_rows(a, 1, 2); }, 4, 3, 1, 1) < 1e-6);
  CHECK(check_op([](auto a, auto) { return ad::slice_cols(a, 1, 2); }, 4, 3, 1, 1) < 1e-6);
  CHECK(check_op([](auto a, auto) { return ad::pick(a, 2, 1); }, 4, 3, 1, 1) < 1e-6);
  CHECK(check_op([](auto a, auto) {
          std::vector<int> rows{2, 0, 2};
          return ad::gather_rows(a, rows);
        }, 4, 3, 1, 1) < 1e-6);
  CHECK(check_op([](auto a, auto) {
          std::vector<int> cols{2, 2, 0};
          return ad::select_cols(a, cols);
        }, 4, 3, 1, 1) < 1e-6);
  CHECK(check_op([](auto a, auto b) {
          std::vector<ad::Var> parts{a, b, a};
          return ad::concat_rows(parts);
        }, 2, 3, 4, 3) < 1e-6);
}

TEST_CASE("layer norm and losses") {
  Rng rng(3);
  ParameterStore store;
  store.set("x", random_matrix(rng, 3, 5));
  store.set("g", random_matrix(rng, 1, 5));
  store.set("b", random_matrix(rng, 1, 5));
  const Matrix w = random_matrix(rng, 3, 5);
  auto ln = testing::check_gradients(store, [&](ad::Graph& g) {
    auto y = ad::layer_norm_rows(g.parameter(store, "x"), g.parameter(store, "g"), g.parameter(store, "b"));
    return ad::sum(ad::mul(y, g.constant(w)));
  });
  CHECK(ln.max_rel_error < 1e-6);

  std::vector<double> targets{1, 0, 0, 1, 1};
  auto bce = testing::check_gradients(store, [&](ad::Graph& g) {
    return ad::bce_with_logits(ad::slice_rows(g.parameter(store, "x"), 0, 1), targets);
  });
  CHECK(bce.max_rel_error < 1e-6);

  Mask allowed(1, 5);
  allowed << true, false, true, true, false;
  auto ce = testing::check_gradients(store, [&](ad::Graph& g) {
    return ad::cross_entropy(ad::slice_rows(g.parameter(store, "x"), 1, 1), 3, &allowed);
  });
  CHECK(ce.max_rel_error < 1e-6);
}

TEST_CASE("masked softmax assigns exactly zero to masked entries") {
  Rng rng(11);
  for (int draw = 0; draw < 100; ++draw) {
    ad::Graph g;
    auto x = g.constant(random_matrix(rng, 4, 6, 10.0));
    Mask allowed(4, 6);
    for (Eigen::Index i = 0; i < allowed.size(); ++i) allowed.data()[i] = rng.bernoulli(0.5);
    allowed.row(3).setConstant(false);
    const Matrix& p = ad::softmax_rows(x, allowed).value();
    REQUIRE(p.allFinite());
    for (Eigen::Index i = 0; i < 4; ++i) {
      double row = 0;
      for (Eigen::Index j = 0; j < 6; ++j) {
        if (!allowed(i, j)) CHECK(p(i, j) == 0.0);
        row += p(i, j);
      }
      if (allowed.row(i).any()) CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
      else CHECK(row == 0.0);
    }
  }
}

TEST_CASE("fully masked softmax row backpropagates zeros") {
  ParameterStore store;
  store.set("x", Matrix::Constant(2, 3, 0.5));
  Mask allowed = Mask::Constant(2, 3, false);
  allowed(0, 1) = true;
  ad::Graph g;
  auto x = g.parameter(store, "x");
  auto y = ad::softmax_rows(x, allowed);
  g.backward(ad::sum(ad::mul(y, g.constant(Matrix::Random(2, 3)))));
  GradStore grads;
  g.collect(grads);
  REQUIRE(grads.find("x"));
  CHECK(grads.find("x")->allFinite());
  CHECK(grads.find("x")->row(1).isZero(0));
}

TEST_CASE("attention gradients through the shared layer") {
  Rng rng(5);
  ParameterStore store;
  nn::init_attention(store, "att", 8, rng);
  store.set("q", random_matrix(rng, 3, 8));
  store.set("kv", random_matrix(rng, 4, 8));
  const Matrix w = random_matrix(rng, 3, 8);
  Mask allowed = Mask::Constant(3, 4, true);
  allowed(0, 1) = false;
  allowed(2, 0) = false;
  auto r = testing::check_gradients(store, [&](ad::Graph& g) {
    auto out = nn::multi_head_attention(g, store, "att", g.parameter(store, "q"), g.parameter(store, "kv"), 2, &allowed);
    return ad::sum(ad::mul(out, g.constant(w)));
  });
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("repeated parameter lookups share one node") {
  ParameterStore store;
  store.set("p", Matrix::Constant(1, 1, 2.0));
  ad::Graph g;
  auto a = g.parameter(store, "p");
  auto b = g.parameter(store, "p");
  CHECK(a.id() == b.id());
  g.backward(ad::mul(a, b));
  GradStore grads;
  g.collect(grads);
  CHECK((*grads.find("p"))(0, 0) == doctest::Approx(4.0));
}
