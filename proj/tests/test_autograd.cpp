// Copyright (c) 2026 moe_peft contributors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <thread>

#include "moepeft/autograd.hpp"
#include "test_util.hpp"

using namespace moepeft;
using testutil::random_tensor;

TEST_CASE("product rule on scalars") {
  Tensor x = Tensor::scalar(2.0f, true);
  Tensor y = Tensor::scalar(3.0f, true);
  Tape tape;
  Tensor loss = sum_all(mul(x, y));
  tape.backward(loss);
  CHECK(x.grad()[0] == 3.0f);
  CHECK(y.grad()[0] == 2.0f);
}

TEST_CASE("gradient of sum is ones") {
  Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tape tape;
  tape.backward(sum_all(x));
  for (float g : x.grad()) CHECK(g == 1.0f);
}

TEST_CASE("double backward is rejected") {
  Tensor x = Tensor::scalar(1.0f, true);
  Tape tape;
  Tensor loss = sum_all(mul(x, x));
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), ContractError);
}

TEST_CASE("non-scalar loss is rejected") {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  Tape tape;
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("frozen tensors never accumulate gradient") {
  Tensor frozen = Tensor::from_data({2, 2}, {1, 2, 3, 4}, false);
  Tensor live = Tensor::from_data({2, 2}, {1, 1, 1, 1}, true);
  Tape tape;
  tape.backward(sum_all(matmul(frozen, live)));
  CHECK(live.has_grad());
  CHECK_FALSE(frozen.has_grad());
}

TEST_CASE("unreached tensors keep no gradient") {
  Tensor x = Tensor::scalar(2.0f, true);
  Tensor y = Tensor::scalar(5.0f, true);
  Tape tape;
  Tensor used = mul(x, x);
  Tensor unused = mul(y, y);
  (void)unused;
  tape.backward(sum_all(used));
  CHECK(x.has_grad());
  CHECK_FALSE(y.has_grad());
}

TEST_CASE("ops outside a tape do not record") {
  Tensor x = Tensor::scalar(2.0f, true);
  Tensor y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("finite_diff_check on sum of squares") {
  Tensor x = Tensor::from_data({2}, {1.0f, 2.0f});
  auto f = [](const Tensor& t) { return sum_all(mul(t, t)); };
  // analytic gradient is [2, 4]
  Tensor probe = x.clone(true);
  {
    Tape tape;
    tape.backward(f(probe));
  }
  CHECK(probe.grad()[0] == Catch::Approx(2.0f));
  CHECK(probe.grad()[1] == Catch::Approx(4.0f));
  CHECK(finite_diff_check(f, x) < 1e-4f);
}

TEST_CASE("finite_diff_check exact on linear functions") {
  // Central differences have zero truncation error through quadratics. Use
  // exactly representable values so float evaluation noise cannot mask that,
  // then a random linear instance against the generic 32-bit noise floor.
  Tensor w = Tensor::from_data({4}, {2.0f, -4.0f, 8.0f, 16.0f});
  auto f = [&](const Tensor& t) { return sum_all(mul(t, w)); };
  Tensor x = Tensor::from_data({4}, {1.0f, 2.0f, 4.0f, 8.0f});
  CHECK(finite_diff_check(f, x, 0.5f) < 1e-5f);

  RngStream rng(31);
  Tensor wr = random_tensor({4}, rng);
  Tensor xr = random_tensor({4}, rng);
  auto fr = [&](const Tensor& t) { return sum_all(mul(t, wr)); };
  CHECK(finite_diff_check(fr, xr) < 1e-3f);
}

TEST_CASE("finite_diff_check rejects non-positive eps") {
  auto f = [](const Tensor& t) { return sum_all(t); };
  CHECK_THROWS_AS(finite_diff_check(f, Tensor::ones({2}), 0.0f), ContractError);
}

TEST_CASE("composite graphs pass the central-difference oracle") {
  RngStream rng(37);
  SECTION("matmul chain with relu") {
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng, 1.0f, true);
    auto f = [&](const Tensor& t) { return sum_all(relu(matmul(t, b))); };
    CHECK(finite_diff_check(f, a) < 1e-3f);
  }
  SECTION("softmax") {
    Tensor x = random_tensor({2, 5}, rng);
    Tensor w = random_tensor({2, 5}, rng);
    auto f = [&](const Tensor& t) { return sum_all(mul(softmax(t, 1), w)); };
    CHECK(finite_diff_check(f, x) < 1e-3f);
  }
  SECTION("gelu") {
    Tensor x = random_tensor({7}, rng);
    auto f = [](const Tensor& t) { return sum_all(gelu(t)); };
    CHECK(finite_diff_check(f, x) < 1e-3f);
  }
  SECTION("rms_norm wrt input and gain") {
    Tensor x = random_tensor({3, 6}, rng);
    Tensor gain = random_tensor({6}, rng, 1.0f);
    Tensor w = random_tensor({3, 6}, rng);
    auto fx = [&](const Tensor& t) { return sum_all(mul(rms_norm(t, gain), w)); };
    CHECK(finite_diff_check(fx, x) < 1e-3f);
    auto fg = [&](const Tensor& t) { return sum_all(mul(rms_norm(x, t), w)); };
    CHECK(finite_diff_check(fg, gain) < 1e-3f);
  }
  SECTION("cross entropy wrt logits") {
    Tensor logits = random_tensor({2, 2, 4}, rng);
    std::vector<int> targets = {1, 3, 0, 2};
    Tensor mask = Tensor::from_data({2, 2}, {1, 1, 1, 0});
    auto f = [&](const Tensor& t) { return cross_entropy(t, targets, mask); };
    CHECK(finite_diff_check(f, logits) < 1e-3f);
  }
  SECTION("scale_channels wrt both operands") {
    Tensor u = random_tensor({2, 8}, rng);
    Tensor s = random_tensor({2, 2}, rng);
    auto fu = [&](const Tensor& t) { return sum_all(scale_channels(t, s, 4)); };
    CHECK(finite_diff_check(fu, u) < 1e-3f);
    auto fs = [&](const Tensor& t) { return sum_all(scale_channels(u, t, 4)); };
    CHECK(finite_diff_check(fs, s) < 1e-3f);
  }
  SECTION("broadcast mul wrt small operand") {
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4}, rng);
    Tensor w = random_tensor({3, 4}, rng);
    auto f = [&](const Tensor& t) { return sum_all(mul(mul(a, t), w)); };
    CHECK(finite_diff_check(f, b) < 1e-3f);
  }
  SECTION("embedding and relative bias") {
    Tensor table = random_tensor({5, 3}, rng);
    std::vector<int> ids = {0, 2, 4, 1};
    auto f = [&](const Tensor& t) { return sum_all(gelu(embedding(t, ids, 2, 2))); };
    CHECK(finite_diff_check(f, table) < 1e-3f);
    Tensor bias = random_tensor({2, 5}, rng);
    auto fb = [&](const Tensor& t) { return sum_all(gelu(relative_bias(t, 3, 3))); };
    CHECK(finite_diff_check(fb, bias) < 1e-3f);
  }
  SECTION("transpose, reshape, expand") {
    Tensor x = random_tensor({2, 3, 4}, rng);
    Tensor w = random_tensor({2, 4, 3}, rng);
    auto f = [&](const Tensor& t) { return sum_all(mul(transpose_last2(t), w)); };
    CHECK(finite_diff_check(f, x) < 1e-3f);
    Tensor y = random_tensor({2, 1, 3}, rng);
    auto g = [&](const Tensor& t) {
      return sum_all(gelu(reshape(expand_dim(t, 1, 4), {2, 12})));
    };
    CHECK(finite_diff_check(g, y) < 1e-3f);
  }
}

TEST_CASE("gradients accumulate across multiple uses") {
  Tensor x = Tensor::scalar(3.0f, true);
  Tape tape;
  Tensor y = add(mul(x, x), x);  // x^2 + x, dy/dx = 2x + 1 = 7
  tape.backward(sum_all(y));
  CHECK(x.grad()[0] == Catch::Approx(7.0f));
}

TEST_CASE("parallel tapes on distinct threads do not interfere") {
  auto run = [](float seed) {
    Tensor x = Tensor::scalar(seed, true);
    Tape tape;
    tape.backward(sum_all(mul(x, x)));
    return x.grad()[0];
  };
  float r1 = 0, r2 = 0;
  std::thread t1([&] { r1 = run(2.0f); });
  std::thread t2([&] { r2 = run(5.0f); });
  t1.join();
  t2.join();
  CHECK(r1 == 4.0f);
  CHECK(r2 == 10.0f);
}
