// Copyright (c) 2026 moe_peft contributors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "moepeft/autograd.hpp"
#include "moepeft/sha256.hpp"
#include "moepeft/tensor.hpp"
#include "test_util.hpp"

using namespace moepeft;
using testutil::max_abs_diff;
using testutil::random_tensor;

TEST_CASE("tensor shape and data invariants") {
  Tensor t = Tensor::zeros({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  CHECK_THROWS_AS(Tensor::from_data({2, 3}, {1.0f, 2.0f}), DimensionError);
  CHECK_THROWS_AS(Tensor::zeros({2, 0}), DimensionError);
  CHECK_THROWS_AS(Tensor::zeros({-1}), DimensionError);
  CHECK_THROWS_AS(t.item(), ContractError);
  CHECK(Tensor::scalar(4.5f).item() == 4.5f);
}

TEST_CASE("matmul identity and scalar cases") {
  RngStream rng(7);
  Tensor eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor m = random_tensor({3, 3}, rng);
  CHECK(testutil::bit_identical(matmul(eye, m), m));

  Tensor a = Tensor::from_data({1, 1}, {2.0f});
  Tensor b = Tensor::from_data({1, 1}, {3.0f});
  CHECK(matmul(a, b).item() == 6.0f);
}

TEST_CASE("matmul matches triple-loop oracle") {
  RngStream rng(11);
  Tensor a = random_tensor({4, 5}, rng);
  Tensor b = random_tensor({5, 3}, rng);
  auto expect = testutil::matmul_oracle(a.raw(), b.raw(), 4, 5, 3);
  Tensor got = matmul(a, b);
  CHECK(max_abs_diff(got.raw(), expect) < 1e-6f);
}

TEST_CASE("batched matmul matches per-slice oracle") {
  RngStream rng(13);
  Tensor a = random_tensor({2, 3, 4, 5}, rng);
  SECTION("shared rank-2 rhs") {
    Tensor b = random_tensor({5, 6}, rng);
    Tensor got = matmul(a, b);
    REQUIRE(got.shape() == Shape{2, 3, 4, 6});
    for (int s = 0; s < 6; ++s) {
      std::vector<float> slice(a.data() + s * 20, a.data() + (s + 1) * 20);
      auto expect = testutil::matmul_oracle(slice, b.raw(), 4, 5, 6);
      std::vector<float> got_slice(got.data() + s * 24, got.data() + (s + 1) * 24);
      CHECK(max_abs_diff(got_slice, expect) < 1e-6f);
    }
  }
  SECTION("matching batched rhs") {
    Tensor b = random_tensor({2, 3, 5, 6}, rng);
    Tensor got = matmul(a, b);
    for (int s = 0; s < 6; ++s) {
      std::vector<float> sa(a.data() + s * 20, a.data() + (s + 1) * 20);
      std::vector<float> sb(b.data() + s * 30, b.data() + (s + 1) * 30);
      auto expect = testutil::matmul_oracle(sa, sb, 4, 5, 6);
      std::vector<float> got_slice(got.data() + s * 24, got.data() + (s + 1) * 24);
      CHECK(max_abs_diff(got_slice, expect) < 1e-6f);
    }
  }
}

TEST_CASE("matmul shape errors name both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[4, 2]") != std::string::npos);
  }
}

TEST_CASE("softmax basics") {
  Tensor flat = softmax(Tensor::zeros({4}), 0);
  for (int i = 0; i < 4; ++i) CHECK(flat.data()[i] == Catch::Approx(0.25).epsilon(1e-6));

  Tensor x = Tensor::from_data({2}, {std::log(2.0f), 0.0f});
  Tensor s = softmax(x, 0);
  CHECK(s.data()[0] == Catch::Approx(2.0 / 3.0).margin(1e-6));
  CHECK(s.data()[1] == Catch::Approx(1.0 / 3.0).margin(1e-6));
}

TEST_CASE("softmax shift invariance and normalization") {
  RngStream rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({3, 5}, rng, 4.0f);
    Tensor shifted = x.clone();
    const float c = static_cast<float>(rng.uniform() * 10 - 5);
    for (auto& v : shifted.raw()) v += c;
    Tensor s1 = softmax(x, 1);
    Tensor s2 = softmax(shifted, 1);
    CHECK(max_abs_diff(s1, s2) < 1e-6f);
    for (int r = 0; r < 3; ++r) {
      double sum = 0.0;
      for (int j = 0; j < 5; ++j) {
        CHECK(s1.data()[r * 5 + j] >= 0.0f);
        sum += s1.data()[r * 5 + j];
      }
      CHECK(sum == Catch::Approx(1.0).margin(1e-6));
    }
  }
}

TEST_CASE("softmax rejects NaN and bad axis") {
  Tensor x = Tensor::from_data({2}, {std::nanf(""), 0.0f});
  CHECK_THROWS_AS(softmax(x, 0), NumericError);
  CHECK_THROWS_AS(softmax(Tensor::zeros({2, 2}), 2), DimensionError);
}

TEST_CASE("elementwise ops") {
  RngStream rng(5);
  Tensor x = random_tensor({2, 3}, rng);
  CHECK(testutil::bit_identical(mul(x, Tensor::ones({3})), x));

  Tensor r = relu(Tensor::from_data({2}, {-1.0f, 2.0f}));
  CHECK(r.data()[0] == 0.0f);
  CHECK(r.data()[1] == 2.0f);

  SECTION("broadcast mul matches explicit tiling oracle") {
    Tensor b = random_tensor({3}, rng);
    Tensor got = mul(x, b);
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 3; ++j)
        CHECK(got.data()[i * 3 + j] == x.data()[i * 3 + j] * b.data()[j]);
  }
  SECTION("broadcast requires suffix shapes") {
    CHECK_THROWS_AS(add(x, Tensor::zeros({2})), DimensionError);
  }
  SECTION("smaller lhs broadcasts too") {
    Tensor b = random_tensor({3}, rng);
    CHECK(max_abs_diff(add(b, x), add(x, b)) == 0.0f);
  }
}

TEST_CASE("gelu matches erf definition") {
  Tensor x = Tensor::from_data({3}, {-1.5f, 0.0f, 0.7f});
  Tensor y = gelu(x);
  for (int i = 0; i < 3; ++i) {
    float v = x.data()[i];
    float expect = 0.5f * v * (1.0f + std::erf(v / std::sqrt(2.0f)));
    CHECK(y.data()[i] == Catch::Approx(expect).margin(1e-7));
  }
}

TEST_CASE("cross entropy against log-softmax oracle") {
  SECTION("uniform logits give ln V") {
    Tensor logits = Tensor::zeros({1, 2, 7});
    std::vector<int> targets = {3, 5};
    Tensor mask = Tensor::ones({1, 2});
    CHECK(cross_entropy(logits, targets, mask).item() ==
          Catch::Approx(std::log(7.0)).margin(1e-6));
  }
  SECTION("confident correct logits drive loss to zero") {
    Tensor logits = Tensor::zeros({1, 1, 4});
    logits.data()[2] = 30.0f;
    std::vector<int> targets = {2};
    CHECK(cross_entropy(logits, targets, Tensor::ones({1, 1})).item() < 1e-6f);
  }
  SECTION("random instance matches per-position oracle") {
    RngStream rng(17);
    Tensor logits = random_tensor({2, 3, 5}, rng, 2.0f);
    std::vector<int> targets = {0, 4, 2, 1, 3, 0};
    Tensor mask = Tensor::from_data({2, 3}, {1, 1, 0, 1, 1, 1});
    double expect = 0.0;
    int count = 0;
    for (int pos = 0; pos < 6; ++pos) {
      if (mask.data()[pos] == 0.0f) continue;
      double denom = 0.0;
      for (int v = 0; v < 5; ++v) denom += std::exp(logits.data()[pos * 5 + v]);
      expect += std::log(denom) - logits.data()[pos * 5 + targets[pos]];
      ++count;
    }
    expect /= count;
    CHECK(cross_entropy(logits, targets, mask).item() == Catch::Approx(expect).margin(1e-5));
  }
  SECTION("out-of-vocab target raises index error") {
    Tensor logits = Tensor::zeros({1, 1, 4});
    std::vector<int> targets = {4};
    CHECK_THROWS_AS(cross_entropy(logits, targets, Tensor::ones({1, 1})), IndexError);
  }
}

TEST_CASE("rms_norm normalizes rows") {
  RngStream rng(23);
  Tensor x = random_tensor({4, 8}, rng, 3.0f);
  Tensor gain = Tensor::ones({8});
  Tensor y = rms_norm(x, gain);
  for (int r = 0; r < 4; ++r) {
    double ms = 0.0;
    for (int j = 0; j < 8; ++j) ms += double(y.data()[r * 8 + j]) * y.data()[r * 8 + j];
    CHECK(ms / 8 == Catch::Approx(1.0).margin(1e-3));
  }
}

TEST_CASE("scale_channels matches per-group loop") {
  RngStream rng(29);
  Tensor u = random_tensor({2, 3, 6}, rng);
  Tensor s = random_tensor({2, 3, 2}, rng);
  Tensor out = scale_channels(u, s, 3);
  for (int r = 0; r < 6; ++r)
    for (int e = 0; e < 2; ++e)
      for (int j = 0; j < 3; ++j)
        CHECK(out.data()[r * 6 + e * 3 + j] ==
              Catch::Approx(u.data()[r * 6 + e * 3 + j] * s.data()[r * 2 + e]));
  CHECK_THROWS_AS(scale_channels(u, s, 2), DimensionError);
}

TEST_CASE("embedding and relative bias lookups") {
  Tensor table = Tensor::from_data({3, 2}, {0, 1, 10, 11, 20, 21});
  std::vector<int> ids = {2, 0, 1, 1};
  Tensor e = embedding(table, ids, 2, 2);
  CHECK(e.shape() == Shape{2, 2, 2});
  CHECK(e.data()[0] == 20.0f);
  CHECK(e.data()[3] == 1.0f);
  std::vector<int> bad = {3};
  CHECK_THROWS_AS(embedding(table, bad, 1, 1), IndexError);

  Tensor bias_table = Tensor::from_data({1, 3}, {-1.0f, 0.0f, 1.0f});  // radius 1
  Tensor b = relative_bias(bias_table, 2, 3);
  // delta = t - s clamped to [-1, 1]
  CHECK(b.data()[0 * 3 + 0] == 0.0f);   // s=0,t=0
  CHECK(b.data()[0 * 3 + 1] == 1.0f);   // t-s=1
  CHECK(b.data()[0 * 3 + 2] == 1.0f);   // clamped
  CHECK(b.data()[1 * 3 + 0] == -1.0f);  // t-s=-1
}

TEST_CASE("sha256 reference vector") {
  const char* s = "abc";
  CHECK(sha256_hex(s, 3) ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("", 0) ==
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}
