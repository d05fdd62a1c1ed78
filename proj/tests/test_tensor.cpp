#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ctrlseq/tensor.hpp"

using namespace ctrlseq;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t.at(i) = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("matmul basic cases") {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor b = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor c = matmul(eye, b);
  for (std::size_t i = 0; i < 4; ++i) CHECK(c.at(i) == b.at(i));  // identity, bitwise

  Tensor a1 = Tensor::from({1, 2}, {1, 2});
  Tensor b1 = Tensor::from({2, 1}, {3, 4});
  CHECK(matmul(a1, b1).value() == 11.0);

  Tensor bad = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK_THROWS_AS(matmul(bad, bad), DimensionError);
}

TEST_CASE("matmul identity is bitwise for random operands") {
  Rng rng(7);
  Tensor x = random_tensor({5, 9}, rng);
  Tensor eye({5, 5});
  for (std::size_t i = 0; i < 5; ++i) eye.at(i, i) = 1.0;
  Tensor y = matmul(eye, x);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.at(i) == x.at(i));
}

TEST_CASE("softmax values and stabilization") {
  Tensor s0 = softmax(Tensor::from({2}, {0, 0}));
  CHECK(s0.at(0) == Catch::Approx(0.5));
  CHECK(s0.at(1) == Catch::Approx(0.5));

  Tensor s1 = softmax(Tensor::from({3}, {1, 2, 3}));
  CHECK(s1.at(0) == Catch::Approx(0.09003).margin(1e-5));
  CHECK(s1.at(1) == Catch::Approx(0.24473).margin(1e-5));
  CHECK(s1.at(2) == Catch::Approx(0.66524).margin(1e-5));

  Tensor s2 = softmax(Tensor::from({2}, {1000, 0}));
  CHECK(s2.at(0) == 1.0);
  CHECK(s2.at(1) == 0.0);
  CHECK(s2.all_finite());

  CHECK_THROWS_AS(softmax(Tensor({3, 0})), DimensionError);
}

TEST_CASE("softmax rows are distributions") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({4, 7}, rng, -50.0, 50.0);
    Tensor p = softmax(x);
    for (std::size_t i = 0; i < 4; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        CHECK(p.at(i, j) > 0.0);
        total += p.at(i, j);
      }
      CHECK(total == Catch::Approx(1.0).margin(1e-9));
    }
  }
}

TEST_CASE("layer_norm contract") {
  Tensor ones_scale({3}, 1.0), zero_shift({3}, 0.0);
  Tensor constant = Tensor::from({1, 3}, {1, 1, 1});
  Tensor out = layer_norm(constant, ones_scale, zero_shift);
  for (std::size_t j = 0; j < 3; ++j) CHECK(out.at(j) == 0.0);

  Tensor two_scale({2}, 1.0), two_shift({2}, 0.0);
  Tensor r = layer_norm(Tensor::from({1, 2}, {1, 3}), two_scale, two_shift, 1e-9);
  CHECK(r.at(0) == Catch::Approx(-1.0).margin(1e-6));
  CHECK(r.at(1) == Catch::Approx(1.0).margin(1e-6));

  Tensor zero_scale({2}, 0.0);
  Tensor five_shift({2}, 5.0);
  Tensor annihilated = layer_norm(Tensor::from({1, 2}, {-3, 17}), zero_scale, five_shift);
  CHECK(annihilated.at(0) == 5.0);
  CHECK(annihilated.at(1) == 5.0);

  // standardization check on random non-constant rows
  Rng rng(3);
  Tensor h = random_tensor({5, 16}, rng);
  Tensor g({16}, 1.0), s({16}, 0.0);
  Tensor y = layer_norm(h, g, s, 1e-12);
  for (std::size_t i = 0; i < 5; ++i) {
    double mu = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 16; ++j) mu += y.at(i, j);
    mu /= 16.0;
    for (std::size_t j = 0; j < 16; ++j) var += (y.at(i, j) - mu) * (y.at(i, j) - mu);
    var /= 16.0;
    CHECK(std::fabs(mu) < 1e-9);
    CHECK(var == Catch::Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("activations") {
  Tensor r = relu(Tensor::from({3}, {-1, 0, 2}));
  CHECK(r.at(0) == 0.0);
  CHECK(r.at(1) == 0.0);
  CHECK(r.at(2) == 2.0);
  CHECK(sigmoid(Tensor::scalar(0.0)).value() == 0.5);
  CHECK(tanh_op(Tensor::scalar(1.0)).value() == Catch::Approx(0.76159).margin(1e-5));
  CHECK_THROWS_AS(activation_from_string("softsign"), ConfigError);
}

TEST_CASE("cross entropy") {
  Tensor onehot = Tensor::from({1, 3}, {0, 1, 0});
  CHECK(cross_entropy(onehot, {1}, PredKind::Probabilities).value() == 0.0);

  Tensor uniform({2, 4}, 0.25);
  CHECK(cross_entropy(uniform, {0, 3}, PredKind::Probabilities).value() ==
        Catch::Approx(std::log(4.0)));

  Tensor logits = Tensor::from({1, 2}, {1, 2});
  CHECK(cross_entropy(logits, {1}).value() == Catch::Approx(0.31326).margin(1e-5));

  CHECK_THROWS_AS(cross_entropy(logits, {2}), IndexError);
}

TEST_CASE("backward populates gradients") {
  SECTION("sum gives ones") {
    Tensor x = Tensor::from({2, 2}, {3, -1, 2, 8}).set_requires_grad(true);
    Tape tape;
    tape.backward(sum(x));
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  SECTION("sum of squares") {
    Tensor x = Tensor::from({2}, {1, 2}).set_requires_grad(true);
    Tape tape;
    tape.backward(sum(mul(x, x)));
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == 4.0);
  }
  SECTION("off-path tensor gets zero") {
    Tensor x = Tensor::from({2}, {1, 2}).set_requires_grad(true);
    Tensor y = Tensor::from({2}, {5, 5}).set_requires_grad(true);
    Tape tape;
    Tensor unused = mul(y, y);
    tape.backward(sum(x));
    CHECK(y.grad()[0] == 0.0);
    CHECK(y.grad()[1] == 0.0);
  }
  SECTION("non-scalar loss rejected") {
    Tensor x = Tensor::from({2}, {1, 2}).set_requires_grad(true);
    Tape tape;
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
  }
}

TEST_CASE("backward is deterministic") {
  Rng rng(5);
  Tensor x = random_tensor({3, 4}, rng).set_requires_grad(true);
  Tensor w = random_tensor({4, 2}, rng).set_requires_grad(true);
  Tape tape;
  Tensor loss = sum(softmax(matmul(x, w)));
  tape.backward(loss);
  std::vector<double> gx = x.grad(), gw = w.grad();
  tape.backward(loss);
  CHECK(gx == x.grad());
  CHECK(gw == w.grad());
}

TEST_CASE("grad_check oracle cases") {
  SECTION("quadratic form is exact to O(h^2)") {
    Rng rng(13);
    Tensor x = random_tensor({1, 4}, rng).set_requires_grad(true);
    Tensor a = random_tensor({4, 4}, rng);
    auto f = [&]() { return sum(matmul(matmul(x, a), transpose(x))); };
    CHECK(grad_check(f, {x}, 1e-5) < 1e-6);
  }
  SECTION("softmax + cross entropy graph") {
    Rng rng(17);
    Tensor logits = random_tensor({3, 5}, rng).set_requires_grad(true);
    std::vector<std::size_t> targets = {4, 0, 2};
    auto f = [&]() { return cross_entropy(logits, targets); };
    CHECK(grad_check(f, {logits}, 1e-5) < 1e-4);
  }
  SECTION("constant function") {
    Tensor x = Tensor::from({3}, {1, 2, 3}).set_requires_grad(true);
    auto f = [&]() { return Tensor::scalar(42.0); };
    CHECK(grad_check(f, {x}) == 0.0);
  }
  SECTION("non-finite evaluation is reported") {
    Tensor x = Tensor::scalar(1.0).set_requires_grad(true);
    auto f = [&]() { return Tensor::scalar(std::numeric_limits<double>::quiet_NaN()); };
    CHECK_THROWS_AS(grad_check(f, {x}), NumericError);
  }
}

TEST_CASE("grad_check over every differentiable op") {
  Rng rng(23);
  auto check = [&](const char* name, const std::function<Tensor()>& f, std::vector<Tensor> params) {
    INFO(name);
    CHECK(grad_check(f, std::move(params), 1e-5) < 1e-4);
  };

  Tensor a = random_tensor({3, 4}, rng).set_requires_grad(true);
  Tensor b = random_tensor({3, 4}, rng).set_requires_grad(true);
  Tensor v = random_tensor({4}, rng).set_requires_grad(true);
  Tensor w = random_tensor({4, 3}, rng).set_requires_grad(true);
  Tensor probs = softmax(random_tensor({2, 5}, rng));  // positive inputs for log
  Tensor c33 = random_tensor({3, 3}, rng);
  Tensor c4 = random_tensor({4}, rng);

  check("add", [&]() { return sum(add(a, b)); }, {a, b});
  check("add broadcast", [&]() { return sum(add(a, v)); }, {a, v});
  check("sub", [&]() { return sum(sub(a, b)); }, {a, b});
  check("mul", [&]() { return sum(mul(a, b)); }, {a, b});
  check("scale", [&]() { return sum(scale(a, -1.7)); }, {a});
  check("matmul", [&]() { return sum(matmul(a, w)); }, {a, w});
  check("transpose", [&]() { return sum(mul(transpose(a), transpose(b))); }, {a, b});
  check("relu", [&]() { return sum(relu(a)); }, {a});
  check("sigmoid", [&]() { return sum(sigmoid(a)); }, {a});
  check("tanh", [&]() { return sum(tanh_op(a)); }, {a});
  check("softmax", [&]() { return sum(mul(softmax(a), b)); }, {a});
  check("log_softmax", [&]() { return sum(mul(log_softmax(a), b)); }, {a});
  check("log", [&]() { return sum(log_op(probs)); }, {probs});
  check("layer_norm", [&]() { return sum(layer_norm(a, v, c4)); }, {a, v});
  check("mean_rows", [&]() { return sum(mul(mean_rows(a), v)); }, {a});
  check("gather/concat/slice", [&]() {
    Tensor rows = gather_rows(a, {2, 0, 1, 2});
    Tensor joined = concat_rows(rows, a);
    return sum(slice_cols(joined, 1, 3));
  }, {a});
  check("row/pick", [&]() { return pick(row(a, 1), 2); }, {a});
  check("causal_masked", [&]() {
    Tensor s = matmul(a, transpose(b));
    return sum(mul(softmax(causal_masked(s, 0)), c33));
  }, {a, b});
  check("nll_masked", [&]() {
    return nll_masked(matmul(a, w), {0, 2, 1}, {true, false, true});
  }, {a, w});
  check("cross_entropy probs", [&]() {
    return cross_entropy(probs, {3, 1}, PredKind::Probabilities);
  }, {probs});
}

TEST_CASE("layer_norm gradient with trainable scale and shift") {
  Rng rng(29);
  Tensor h = random_tensor({3, 6}, rng).set_requires_grad(true);
  Tensor gamma = random_tensor({6}, rng).set_requires_grad(true);
  Tensor beta = random_tensor({6}, rng).set_requires_grad(true);
  Tensor mixer = random_tensor({3, 6}, rng);
  auto f = [&]() { return sum(mul(layer_norm(h, gamma, beta), mixer)); };
  CHECK(grad_check(f, {h, gamma, beta}, 1e-5) < 1e-4);
}
