#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "miclab/gradcheck.hpp"
#include "miclab/rng.hpp"
#include "miclab/tensor.hpp"

using namespace miclab;
using nk::Tensor;
using nk::TensorPtr;

namespace {

TensorPtr randn(std::vector<int> shape, Rng& rng, double sd = 1.0) {
  return Tensor::randn(std::move(shape), rng, sd);
}

// scalar-valued probe: sum(f(x) .* w) with a fixed mixing tensor
TensorPtr mix_sum(const TensorPtr& y, const TensorPtr& w) {
  return nk::sum(nk::mul(y, w));
}

}  // namespace

TEST_CASE("matmul basics") {
  auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto b = Tensor::from({2, 2}, {3, 4, 5, 6});
  auto c = nk::matmul(eye, b);
  CHECK(c->data == std::vector<double>{3, 4, 5, 6});

  auto r = nk::matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4}));
  CHECK(r->data[0] == doctest::Approx(11).epsilon(1e-12));

  CHECK_THROWS_AS(nk::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})),
                  std::invalid_argument);
}

TEST_CASE("matmul gradient matches ones * b^T and finite differences") {
  Rng rng(7);
  auto a = randn({4, 5}, rng);
  auto b = randn({5, 3}, rng);
  a->requires_grad = true;
  auto out = nk::sum(nk::matmul(a, b));
  nk::backward(out);

  // d(sum)/dA = ones(4,3) * B^T
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 5; ++j) {
      double expected = 0.0;
      for (int k = 0; k < 3; ++k) expected += b->data[j * 3 + k];
      CHECK(a->grad[i * 5 + j] == doctest::Approx(expected).epsilon(1e-9));
    }

  double err = nk::grad_check(
      [&](const TensorPtr& x) { return nk::sum(nk::matmul(x, b)); }, a, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("softmax rows") {
  auto s = nk::softmax_rows(Tensor::from({1, 3}, {0, 0, 0}));
  for (double v : s->data) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));

  auto big = nk::softmax_rows(Tensor::from({1, 2}, {1000, 0}));
  CHECK(std::isfinite(big->data[0]));
  CHECK(big->data[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(big->data[1] == doctest::Approx(0.0).epsilon(1e-12));

  auto v = nk::softmax_rows(Tensor::from({1, 3}, {1, 2, 3}));
  CHECK(v->data[0] == doctest::Approx(0.09003057).epsilon(1e-7));
  CHECK(v->data[1] == doctest::Approx(0.24472847).epsilon(1e-7));
  CHECK(v->data[2] == doctest::Approx(0.66524096).epsilon(1e-7));
}

TEST_CASE("softmax rows sum to one for large-range inputs") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = Tensor::zeros({3, 8});
    for (double& v : x->data) v = (rng.next_double() * 2 - 1) * 1e3;
    auto s = nk::softmax_rows(x);
    for (int i = 0; i < 3; ++i) {
      double total = 0.0;
      for (int j = 0; j < 8; ++j) total += s->data[i * 8 + j];
      CHECK(std::fabs(total - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("cross entropy") {
  auto uniform = Tensor::zeros({1, 16});
  auto loss = nk::cross_entropy(uniform, {5}, {true});
  CHECK(loss->scalar() == doctest::Approx(std::log(16.0)).epsilon(1e-9));

  auto confident = Tensor::zeros({1, 4});
  confident->data[2] = 1000.0;
  CHECK(nk::cross_entropy(confident, {2}, {true})->scalar() ==
        doctest::Approx(0.0).epsilon(1e-9));

  CHECK_THROWS_WITH_AS(nk::cross_entropy(uniform, {5}, {false}),
                       "cross_entropy: no supervised positions",
                       std::invalid_argument);
}

TEST_CASE("cross entropy equals mean of independent per-position losses") {
  Rng rng(3);
  auto logits = randn({3, 6}, rng);
  std::vector<int> targets{1, 4, 2};
  auto masked = nk::cross_entropy(logits, targets, {true, false, true});
  auto row = [&](int i) {
    auto single = nk::slice_rows(logits, i, i + 1);
    return nk::cross_entropy(single, {targets[i]}, {true})->scalar();
  };
  double expected = 0.5 * (row(0) + row(2));
  CHECK(masked->scalar() == doctest::Approx(expected).epsilon(1e-12));

  // masked-out rows receive no gradient
  logits->requires_grad = true;
  auto loss = nk::cross_entropy(logits, targets, {true, false, true});
  nk::backward(loss);
  for (int j = 0; j < 6; ++j) CHECK(logits->grad[1 * 6 + j] == 0.0);
}

TEST_CASE("cross entropy invariant to per-row constant shift") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto logits = randn({4, 9}, rng);
    std::vector<int> targets{0, 3, 8, 2};
    std::vector<bool> mask{true, true, false, true};
    double base = nk::cross_entropy(logits, targets, mask)->scalar();
    auto shifted = Tensor::zeros({4, 9});
    for (int i = 0; i < 4; ++i) {
      double c = (rng.next_double() * 2 - 1) * 50;
      for (int j = 0; j < 9; ++j)
        shifted->data[i * 9 + j] = logits->data[i * 9 + j] + c;
    }
    double moved = nk::cross_entropy(shifted, targets, mask)->scalar();
    CHECK(std::fabs(base - moved) < 1e-9);
  }
}

TEST_CASE("grad_check on simple functions") {
  Rng rng(13);
  auto x = randn({3, 3}, rng);
  double err = nk::grad_check(
      [](const TensorPtr& t) { return nk::sum(nk::mul(t, t)); }, x, 1e-5);
  CHECK(err < 1e-6);

  double const_err = nk::grad_check(
      [](const TensorPtr&) { return Tensor::scalar_of(3.0); }, x, 1e-5);
  CHECK(const_err == 0.0);

  CHECK_THROWS_AS(nk::grad_check(
                      [](const TensorPtr&) {
                        return Tensor::scalar_of(
                            std::numeric_limits<double>::quiet_NaN());
                      },
                      x, 1e-5),
                  std::invalid_argument);
  CHECK_THROWS_AS(nk::grad_check(
                      [](const TensorPtr& t) { return nk::sum(t); }, x, 0.0),
                  std::invalid_argument);
}

TEST_CASE("every differentiable op passes grad_check on random inputs") {
  Rng rng(42);
  const double tol = 1e-4;
  for (int trial = 0; trial < 20; ++trial) {
    Rng t = rng.split(trial);
    auto a = randn({3, 4}, t);
    auto b = randn({4, 2}, t);
    auto b_nt = randn({5, 4}, t);
    auto same = randn({3, 4}, t);
    auto bias = randn({4}, t);
    auto w34 = randn({3, 4}, t);
    auto w32 = randn({3, 2}, t);
    auto w35 = randn({3, 5}, t);
    auto w33 = randn({3, 3}, t);
    auto w24 = randn({2, 4}, t);
    auto w32b = randn({3, 2}, t);
    auto w38 = randn({3, 8}, t);
    auto gain = randn({4}, t);
    auto lnb = randn({4}, t);

    CHECK(nk::grad_check([&](const TensorPtr& x) {
            return mix_sum(nk::matmul(x, b), w32);
          }, a) < tol);
    CHECK(nk::grad_check([&](const TensorPtr& x) {
            return mix_sum(nk::matmul(a, x), w32);
          }, b) < tol);
    CHECK(nk::grad_check([&](const TensorPtr& x) {
            return mix_sum(nk::matmul_nt(x, b_nt), w35);
          }, a) < tol);
    CHECK(nk::grad_check([&](const TensorPtr& x) {
            return mix_sum(nk::matmul_nt(a, x), w35);
          }, b_nt) < tol);
    CHECK(nk::grad_check([&](const TensorPtr& x) {
            return mix_sum(nk::add(x, same), w34);
          }, a) < tol);
    CHECK(nk::grad_check([&](const TensorPtr& x) {
            return mix_sum(nk::add_row_broadcast(a, x), w34);
          }, bias) < tol);
    CHECK(nk::grad_check([&](const TensorPtr& x) {
            return mix_sum(nk::scale(x, -1.7), w34);
          }, a) < tol);
    CHECK(nk::grad_check([&](const TensorPtr& x) {
            return mix_sum(nk::mul(x, same), w34);
          }, a) < tol);
    CHECK(nk::grad_check([&](const TensorPtr& x) {
            return mix_sum(nk::gelu(x), w34);
          }, a) < tol);
    CHECK(nk::grad_check([&](const TensorPtr& x) {
            return mix_sum(nk::tanh_op(x), w34);
          }, a) < tol);
    CHECK(nk::grad_check([&](const TensorPtr& x) {
            return mix_sum(nk::layer_norm_rows(x, gain, lnb), w34);
          }, a) < tol);
    CHECK(nk::grad_check([&](const TensorPtr& x) {
            return mix_sum(nk::layer_norm_rows(a, x, lnb), w34);
          }, gain) < tol);
    CHECK(nk::grad_check([&](const TensorPtr& x) {
            return mix_sum(nk::softmax_rows(x), w34);
          }, a) < tol);
    CHECK(nk::grad_check([&](const TensorPtr& x) {
            return mix_sum(nk::causal_softmax_rows(x), w33);
          }, randn({3, 3}, t)) < tol);
    CHECK(nk::grad_check([&](const TensorPtr& x) {
            return nk::cross_entropy(x, {1, 3, 0}, {true, false, true});
          }, randn({3, 4}, t)) < tol);
    CHECK(nk::grad_check([&](const TensorPtr& x) {
            return mix_sum(nk::gather_rows(x, {2, 0, 2}), w34);
          }, randn({3, 4}, t)) < tol);
    CHECK(nk::grad_check([&](const TensorPtr& x) {
            return mix_sum(nk::slice_rows(x, 1, 3), w24);
          }, randn({4, 4}, t)) < tol);
    CHECK(nk::grad_check([&](const TensorPtr& x) {
            return mix_sum(nk::slice_cols(x, 1, 3), w32b);
          }, randn({3, 4}, t)) < tol);
    CHECK(nk::grad_check([&](const TensorPtr& x) {
            return mix_sum(nk::concat_cols({x, same}), w38);
          }, a) < tol);

    // relu away from the kink
    auto relu_in = randn({3, 4}, t);
    for (double& v : relu_in->data)
      if (std::fabs(v) < 1e-2) v += v < 0 ? -0.5 : 0.5;
    CHECK(nk::grad_check([&](const TensorPtr& x) {
            return mix_sum(nk::relu(x), w34);
          }, relu_in) < tol);

    // dropout with a fixed mask stream
    CHECK(nk::grad_check([&](const TensorPtr& x) {
            Rng mask_rng(99);
            return mix_sum(nk::dropout(x, 0.3, mask_rng), w34);
          }, a) < tol);
  }
}

TEST_CASE("compute graph topological order places parents before consumers") {
  Rng rng(21);
  auto x = randn({2, 2}, rng);
  x->requires_grad = true;
  auto y = nk::mul(x, x);
  auto z = nk::add(y, x);
  auto loss = nk::sum(nk::mul(z, y));
  auto graph = nk::ComputeGraph::from_root(*loss);
  auto index_of = [&](nk::Tensor* t) {
    return std::find(graph.topo_order.begin(), graph.topo_order.end(), t) -
           graph.topo_order.begin();
  };
  for (nk::Tensor* t : graph.topo_order)
    for (const auto& p : t->parents)
      CHECK(index_of(p.get()) < index_of(t));
  CHECK(graph.topo_order.back() == loss.get());
}

TEST_CASE("gradient accumulation over shared subexpressions") {
  // d/dx of sum((x*x) + x) = 2x + 1
  Rng rng(31);
  auto x = randn({2, 3}, rng);
  x->requires_grad = true;
  auto y = nk::mul(x, x);
  auto loss = nk::sum(nk::add(y, x));
  nk::backward(loss);
  for (std::size_t i = 0; i < x->size(); ++i)
    CHECK(x->grad[i] == doctest::Approx(2 * x->data[i] + 1).epsilon(1e-12));
}

TEST_CASE("causal softmax zero above diagonal, rows sum to one") {
  Rng rng(17);
  auto x = randn({6, 6}, rng, 3.0);
  auto p = nk::causal_softmax_rows(x);
  for (int i = 0; i < 6; ++i) {
    double total = 0.0;
    for (int j = 0; j < 6; ++j) {
      if (j > i) CHECK(p->data[i * 6 + j] == 0.0);
      total += p->data[i * 6 + j];
    }
    CHECK(std::fabs(total - 1.0) < 1e-9);
  }
}

TEST_CASE("no-grad mode records nothing") {
  Rng rng(23);
  auto x = randn({2, 2}, rng);
  x->requires_grad = true;
  nk::TensorPtr y;
  {
    nk::NoGrad ng;
    y = nk::mul(x, x);
  }
  CHECK(y->parents.empty());
  CHECK_FALSE(y->requires_grad);
  auto z = nk::mul(x, x);  // back to recording
  CHECK(z->parents.size() == 2);
}
