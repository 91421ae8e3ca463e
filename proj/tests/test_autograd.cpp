#include <gtest/gtest.h>

#include <functional>

#include "skeleguide/autograd.hpp"
#include "skeleguide/rng.hpp"

using namespace skeleguide;
using namespace skeleguide::ag;
using M = Mat<double>;

namespace {

M random_mat(Rng& rng, Eigen::Index r, Eigen::Index c, double s = 1.0) {
  M m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = s * rng.normal();
  return m;
}

using Fn = std::function<Var<double>(const std::vector<Var<double>>&)>;

// Largest relative error between backprop and central differences over all inputs.
double fd_error(const Fn& f, const std::vector<M>& inputs, const M& probe, double eps = 1e-6) {
  auto scalar = [&](const std::vector<M>& xs) {
    std::vector<Var<double>> vs;
    for (const auto& x : xs) vs.push_back(constant<double>(x));
    return f(vs).value().cwiseProduct(probe).sum();
  };
  std::vector<Var<double>> leaves;
  for (const auto& x : inputs) leaves.push_back(leaf<double>(x));
  const auto out = f(leaves);
  backward(dot_const(out, probe));
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const M g = leaves[i].grad();
    for (Eigen::Index k = 0; k < inputs[i].size(); ++k) {
      auto plus = inputs, minus = inputs;
      plus[i].data()[k] += eps;
      minus[i].data()[k] -= eps;
      const double num = (scalar(plus) - scalar(minus)) / (2 * eps);
      const double ana = g.data()[k];
      worst = std::max(worst, std::fabs(ana - num) / std::max({std::fabs(ana), std::fabs(num), 1e-6}));
    }
  }
  return worst;
}

struct OpCase {
  std::string name;
  std::vector<std::pair<int, int>> shapes;
  std::pair<int, int> out;
  Fn fn;
};

}  // namespace

TEST(Autograd, OpGradientsMatchFiniteDifferences) {
  const int groups = 2;
  std::vector<OpCase> cases = {
      {"add", {{5, 3}, {5, 3}}, {5, 3}, [](auto& v) { return add(v[0], v[1]); }},
      {"sub", {{5, 3}, {5, 3}}, {5, 3}, [](auto& v) { return sub(v[0], v[1]); }},
      {"mul", {{5, 3}, {5, 3}}, {5, 3}, [](auto& v) { return mul(v[0], v[1]); }},
      {"scale", {{5, 3}}, {5, 3}, [](auto& v) { return scale(v[0], -1.7); }},
      {"add_row", {{5, 3}, {1, 3}}, {5, 3}, [](auto& v) { return add_row(v[0], v[1]); }},
      {"silu", {{4, 3}}, {4, 3}, [](auto& v) { return silu(v[0]); }},
      {"gelu", {{4, 3}}, {4, 3}, [](auto& v) { return gelu(v[0]); }},
      {"matmul_nt", {{4, 3}, {5, 3}}, {4, 5}, [](auto& v) { return matmul_nt(v[0], v[1]); }},
      {"linear", {{4, 3}, {5, 3}, {1, 5}}, {4, 5}, [](auto& v) { return linear(v[0], v[1], v[2]); }},
      {"layer_norm", {{4, 6}}, {4, 6}, [](auto& v) { return layer_norm(v[0]); }},
      {"modulate", {{6, 3}, {2, 3}, {2, 3}}, {6, 3}, [=](auto& v) { return modulate(v[0], v[1], v[2], groups); }},
      {"gated_residual", {{6, 3}, {2, 3}, {6, 3}}, {6, 3},
       [=](auto& v) { return gated_residual(v[0], v[1], v[2], groups); }},
      {"col_slice", {{4, 6}}, {4, 2}, [](auto& v) { return col_slice(v[0], 3, 2); }},
      {"concat_groups", {{4, 3}, {2, 3}, {6, 3}}, {12, 3},
       [=](auto& v) { return concat_groups<double>({v[0], v[1], v[2]}, groups); }},
      {"slice_groups", {{10, 3}}, {4, 3}, [=](auto& v) { return slice_groups(v[0], groups, 1, 2); }},
      {"gather_rows", {{4, 3}}, {5, 3}, [](auto& v) { return gather_rows(v[0], {3, 0, 3, 1, 2}); }},
      {"attention", {{8, 6}, {8, 6}, {8, 6}}, {8, 6},
       [=](auto& v) { return attention(v[0], v[1], v[2], groups, 2); }},
      {"mse", {{4, 3}, {4, 3}}, {1, 1}, [](auto& v) { return mse(v[0], v[1]); }},
      {"composite", {{6, 4}, {4, 4}, {2, 4}}, {6, 4},
       [=](auto& v) {
         auto h = layer_norm(v[0]);
         auto q = matmul_nt(h, v[1]);
         auto a = attention(q, h, q, groups, 2);
         return gated_residual(v[0], v[2], gelu(a), groups);
       }},
  };
  Rng rng(1);
  for (const auto& c : cases) {
    std::vector<M> inputs;
    for (auto [r, k] : c.shapes) inputs.push_back(random_mat(rng, r, k));
    const M probe = random_mat(rng, c.out.first, c.out.second);
    EXPECT_LE(fd_error(c.fn, inputs, probe), 1e-6) << c.name;
  }
}

TEST(Autograd, SharedInputAccumulates) {
  M x(1, 1);
  x(0, 0) = 3.0;
  auto v = leaf<double>(x);
  backward(mul(v, v));
  EXPECT_DOUBLE_EQ(v.grad()(0, 0), 6.0);
}

TEST(Autograd, SoftmaxRowsSumToOne) {
  Rng rng(2);
  auto q = constant<double>(random_mat(rng, 12, 8, 3.0));
  auto k = constant<double>(random_mat(rng, 12, 8, 3.0));
  M probs;
  attention(q, k, q, 3, 4, &probs);
  for (Eigen::Index r = 0; r < probs.rows(); ++r) EXPECT_NEAR(probs.row(r).sum(), 1.0, 1e-12);
}

TEST(Autograd, SingleTokenAttentionReturnsValue) {
  Rng rng(3);
  auto q = constant<double>(random_mat(rng, 1, 4));
  auto k = constant<double>(random_mat(rng, 1, 4));
  const M vv = random_mat(rng, 1, 4);
  EXPECT_EQ(attention(q, k, constant<double>(vv), 1, 2).value(), vv);
}

TEST(Autograd, NoGradGuardSkipsRecording) {
  auto p = leaf<double>(M::Ones(2, 2));
  {
    NoGradGuard guard;
    EXPECT_FALSE(add(p, p).requires_grad());
  }
  EXPECT_TRUE(add(p, p).requires_grad());
}

TEST(Autograd, DetachBlocksGradient) {
  auto p = leaf<double>(M::Ones(2, 2));
  auto y = mul(detach(p), p);
  backward(dot_const(y, M(M::Ones(2, 2))));
  EXPECT_EQ(p.grad(), M::Ones(2, 2));
}

TEST(Autograd, ShapeErrors) {
  auto a = constant<double>(M::Zero(2, 3));
  auto b = constant<double>(M::Zero(3, 2));
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(matmul_nt(a, b), ShapeError);
  EXPECT_THROW(modulate(a, a, a, 3), ShapeError);
  EXPECT_THROW(attention(a, a, a, 1, 2), ShapeError);
  EXPECT_THROW(backward(a), ShapeError);
}
