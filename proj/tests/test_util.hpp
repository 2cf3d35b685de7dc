// Copyright (c) 2026 moe_peft contributors
// SPDX-License-Identifier: Apache-2.0
//
// Test-only helpers and independent oracles. Nothing here may call back into
// the implementation paths it is used to check.

#pragma once

#include <cmath>
#include <cstring>
#include <vector>

#include "moepeft/tensor.hpp"

namespace testutil {

inline float max_abs_diff(const moepeft::Tensor& a, const moepeft::Tensor& b) {
  REQUIRE(a.size() == b.size());
  float worst = 0.0f;
  for (std::int64_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  return worst;
}

inline float max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
  REQUIRE(a.size() == b.size());
  float worst = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

inline bool bit_identical(const moepeft::Tensor& a, const moepeft::Tensor& b) {
  if (a.size() != b.size()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(float) * a.size()) == 0;
}

// Triple-loop reference product, the matmul oracle.
inline std::vector<float> matmul_oracle(const std::vector<float>& a, const std::vector<float>& b,
                                        int m, int k, int n) {
  std::vector<float> out(static_cast<std::size_t>(m) * n, 0.0f);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      for (int kk = 0; kk < k; ++kk) out[i * n + j] += a[i * k + kk] * b[kk * n + j];
  return out;
}

inline moepeft::Tensor random_tensor(moepeft::Shape shape, moepeft::RngStream& rng,
                                     float scale = 1.0f, bool requires_grad = false) {
  std::vector<float> d(static_cast<std::size_t>(moepeft::shape_numel(shape)));
  for (auto& v : d) v = static_cast<float>(rng.uniform() * 2.0 - 1.0) * scale;
  return moepeft::Tensor::from_data(std::move(shape), std::move(d), requires_grad);
}

}  // namespace testutil
