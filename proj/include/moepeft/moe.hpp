// Copyright (c) 2026 moe_peft contributors
// SPDX-License-Identifier: Apache-2.0
//
// Routing core: gate computation, soft merging, discrete top-k dispatch and
// the load-balancing auxiliary loss. Experts here are raw parameter tensors;
// the adapter structures that own them live one layer up.

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "moepeft/autograd.hpp"

namespace moepeft {

enum class RoutingStrategy { kSoft, kTop1, kTop2 };
enum class RoutingInput { kToken, kSentence };

inline RoutingStrategy strategy_from_string(const std::string& s) {
  if (s == "soft") return RoutingStrategy::kSoft;
  if (s == "top1") return RoutingStrategy::kTop1;
  if (s == "top2") return RoutingStrategy::kTop2;
  throw ConfigError("unknown routing strategy '" + s + "' (expected soft|top1|top2)");
}

inline std::string to_string(RoutingStrategy s) {
  switch (s) {
    case RoutingStrategy::kSoft: return "soft";
    case RoutingStrategy::kTop1: return "top1";
    case RoutingStrategy::kTop2: return "top2";
  }
  return "soft";
}

struct RoutingConfig {
  RoutingStrategy strategy = RoutingStrategy::kSoft;
  float load_balance_alpha = 0.0f;
  bool renormalize_topk = true;
  RoutingInput input_mode = RoutingInput::kToken;
  int sentence_width = 768;

  int top_k() const {
    switch (strategy) {
      case RoutingStrategy::kSoft: return 0;
      case RoutingStrategy::kTop1: return 1;
      case RoutingStrategy::kTop2: return 2;
    }
    return 0;
  }

  void validate() const {
    if (load_balance_alpha < 0.0f) throw ConfigError("load_balance_alpha must be >= 0");
    if (strategy == RoutingStrategy::kSoft && load_balance_alpha != 0.0f) {
      throw ConfigError("load_balance_alpha is defined only for discrete top-k routing");
    }
    if (sentence_width <= 0) throw ConfigError("sentence_width must be positive");
  }
};

// Gate of one routed block: a bias-free dense layer W_g in R^{d_in x n}.
struct Router {
  Tensor w_g;

  int d_in() const { return w_g.dim(0); }
  int n_experts() const { return w_g.dim(1); }
};

// Per-token routing probabilities, softmax(W_g^T x) computed on the careful
// (max-subtracted) softmax path.
inline Tensor route_probs(const Router& router, const Tensor& x) {
  if (x.dim(x.rank() - 1) != router.d_in()) {
    throw DimensionError("route_probs: input width " + std::to_string(x.dim(x.rank() - 1)) +
                         " does not match router d_in " + std::to_string(router.d_in()));
  }
  return softmax(matmul(x, router.w_g), -1);
}

// Top-1 expert per position, ties to the lowest index.
inline std::vector<int> top1_assignments(const Tensor& probs) {
  const int n = probs.dim(probs.rank() - 1);
  const std::int64_t rows = probs.size() / n;
  std::vector<int> out(static_cast<std::size_t>(rows));
  const float* p = probs.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    int best = 0;
    for (int j = 1; j < n; ++j) {
      if (p[r * n + j] > p[r * n + best]) best = j;
    }
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

// Zero out everything but the k largest probabilities per position. With
// renormalization the survivors are rescaled to sum to one (equivalent to a
// softmax restricted to the surviving logits); without it they keep their
// original mass. Selection is a constant of the backward pass, so gradients
// flow through surviving gate values only.
inline Tensor topk_route(const Tensor& probs, int k, bool renormalize) {
  const int n = probs.dim(probs.rank() - 1);
  if (k < 1 || k > n) {
    throw ConfigError("topk_route: k = " + std::to_string(k) + " with " + std::to_string(n) +
                      " experts");
  }
  const std::int64_t rows = probs.size() / n;
  std::vector<float> mask(static_cast<std::size_t>(probs.size()), 0.0f);
  const float* p = probs.data();
  std::vector<int> order(static_cast<std::size_t>(n));
  for (std::int64_t r = 0; r < rows; ++r) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return p[r * n + a] > p[r * n + b];  // stable: ties keep the lowest index first
    });
    for (int j = 0; j < k; ++j) mask[static_cast<std::size_t>(r * n + order[j])] = 1.0f;
  }
  Tensor selected = mul(probs, Tensor::from_data(probs.shape(), std::move(mask)));
  return renormalize ? normalize_last(selected) : selected;
}

// ---------------------------------------------------------------------------
// Soft merging of expert parameters under a constant mixing vector (the
// per-token path lives in the layer forwards, which merge with the routing
// tensor directly).

namespace detail {
inline void check_simplex(const std::vector<float>& probs) {
  double sum = 0.0;
  for (float p : probs) sum += p;
  if (std::abs(sum - 1.0) > 1e-4) {
    throw ContractError("mixing weights sum to " + std::to_string(sum) + ", expected 1");
  }
}
}  // namespace detail

// bank: [n, width] of expert vectors (or vector deltas); result: [width].
inline Tensor soft_merge_rows(const std::vector<float>& probs, const Tensor& bank) {
  if (bank.rank() != 2 || bank.dim(0) != static_cast<int>(probs.size())) {
    throw DimensionError("soft_merge_rows: bank " + shape_str(bank.shape()) +
                         " does not match " + std::to_string(probs.size()) + " weights");
  }
  detail::check_simplex(probs);
  const int n = bank.dim(0), w = bank.dim(1);
  std::vector<float> out(static_cast<std::size_t>(w), 0.0f);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < w; ++j) out[static_cast<std::size_t>(j)] += probs[static_cast<std::size_t>(i)] * bank.data()[i * w + j];
  return Tensor::from_data({w}, std::move(out));
}

// Dense merged LoRA delta: sum_i s_i A_i B_i as a [d_in, d_out] matrix, with
// a_cat [d_in, n*r] and b_cat [n*r, d_out] in expert-major column blocks.
inline Tensor soft_merge_lora_delta(const std::vector<float>& probs, const Tensor& a_cat,
                                    const Tensor& b_cat, int rank) {
  detail::check_simplex(probs);
  const int d_in = a_cat.dim(0);
  const int nr = a_cat.dim(1);
  const int d_out = b_cat.dim(1);
  if (b_cat.dim(0) != nr || nr != static_cast<int>(probs.size()) * rank) {
    throw DimensionError("soft_merge_lora_delta: factor shapes disagree");
  }
  std::vector<float> out(static_cast<std::size_t>(d_in) * d_out, 0.0f);
  for (int i = 0; i < d_in; ++i) {
    for (int c = 0; c < nr; ++c) {
      const float av = a_cat.data()[i * nr + c] * probs[static_cast<std::size_t>(c / rank)];
      if (av == 0.0f) continue;
      const float* brow = b_cat.data() + static_cast<std::int64_t>(c) * d_out;
      float* orow = out.data() + static_cast<std::int64_t>(i) * d_out;
      for (int j = 0; j < d_out; ++j) orow[j] += av * brow[j];
    }
  }
  return Tensor::from_data({d_in, d_out}, std::move(out));
}

// ---------------------------------------------------------------------------
// Per-token merged application

// MoV: act * (sum_i w_i l_i) with experts stored as deltas (l_i = 1 + u_i).
// When the mixing weights sum to one the constant part collapses to exactly
// 1, which keeps the all-ones initialization bit-identical to no adapter;
// un-renormalized top-k keeps the literal sum of surviving weights.
inline Tensor mov_merge_apply(const Tensor& act, const Tensor& weights, const Tensor& delta_bank,
                              bool weights_sum_to_one) {
  const int width = act.dim(act.rank() - 1);
  if (delta_bank.rank() != 2 || delta_bank.dim(1) != width) {
    throw DimensionError("mov_merge_apply: bank " + shape_str(delta_bank.shape()) +
                         " does not match activation width " + std::to_string(width));
  }
  Tensor merged_delta = matmul(weights, delta_bank);  // [..., width]
  Tensor multiplier;
  if (weights_sum_to_one) {
    multiplier = add(merged_delta, Tensor::ones({width}));
  } else {
    Tensor wsum = matmul(weights, Tensor::ones({weights.dim(weights.rank() - 1), 1}));
    multiplier = add(merged_delta, expand_dim(wsum, wsum.rank() - 1, width));
  }
  return mul(act, multiplier);
}

// MoLORA: x W0 + sum_i w_i B_i A_i x, merged in the low-rank space:
// ((x A_cat) scaled per expert block) B_cat.
inline Tensor molora_delta(const Tensor& x, const Tensor& a_cat, const Tensor& b_cat,
                           const Tensor& weights, int rank) {
  Tensor u = matmul(x, a_cat);                       // [..., n*r]
  Tensor w = scale_channels(u, weights, rank);       // per-expert block scaling
  return matmul(w, b_cat);                           // [..., d_out]
}

// ---------------------------------------------------------------------------
// Load balancing (switch-style): n * sum_i f_i P_i, where f_i is the fraction
// of tokens dispatched to expert i (top-1, a constant) and P_i the mean
// routing probability. Differentiable through P only. `token_weight` selects
// which positions count (padding carries weight 0); undefined means all.
inline Tensor load_balancing_loss(const Tensor& probs, std::span<const int> assignments,
                                  const Tensor& token_weight = {}) {
  const int n = probs.dim(probs.rank() - 1);
  const std::int64_t rows = probs.size() / n;
  if (static_cast<std::int64_t>(assignments.size()) != rows) {
    throw DimensionError("load_balancing_loss: assignment count does not match token count");
  }
  if (rows == 0) throw InputError("load_balancing_loss: no tokens");
  const float* wp = token_weight.defined() ? token_weight.data() : nullptr;
  if (wp && token_weight.size() != rows) {
    throw DimensionError("load_balancing_loss: token_weight does not match token count");
  }
  std::vector<double> f(static_cast<std::size_t>(n), 0.0);
  double total_weight = 0.0;
  for (std::int64_t r = 0; r < rows; ++r) {
    const double w = wp ? wp[r] : 1.0;
    const int a = assignments[static_cast<std::size_t>(r)];
    if (a < 0 || a >= n) throw IndexError("load_balancing_loss: assignment out of range");
    f[static_cast<std::size_t>(a)] += w;
    total_weight += w;
  }
  if (total_weight == 0.0) throw InputError("load_balancing_loss: all token weights are zero");
  for (auto& v : f) v /= total_weight;

  // loss = n / W * sum_{t,i} weight_t * f_i * probs[t, i]
  std::vector<float> wf(static_cast<std::size_t>(probs.size()));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double w = wp ? wp[r] : 1.0;
    for (int i = 0; i < n; ++i)
      wf[static_cast<std::size_t>(r * n + i)] = static_cast<float>(w * f[static_cast<std::size_t>(i)]);
  }
  Tensor weighted = mul(probs, Tensor::from_data(probs.shape(), std::move(wf)));
  return scale(sum_all(weighted), static_cast<float>(n / total_weight));
}

// ---------------------------------------------------------------------------
// Routing statistics

inline double entropy_nats(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

inline double kl_nats(std::span<const double> p, std::span<const double> q) {
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) d += p[i] * std::log(p[i] / q[i]);
  }
  return d;
}

inline double jensen_shannon_nats(std::span<const double> p, std::span<const double> q) {
  std::vector<double> m(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + q[i]);
  return 0.5 * kl_nats(p, m) + 0.5 * kl_nats(q, m);
}

// Mean per-position entropy of a routing tensor, restricted to positions with
// nonzero weight.
inline double mean_routing_entropy(const Tensor& probs, const Tensor& token_weight = {}) {
  const int n = probs.dim(probs.rank() - 1);
  const std::int64_t rows = probs.size() / n;
  const float* wp = token_weight.defined() ? token_weight.data() : nullptr;
  double acc = 0.0, count = 0.0;
  std::vector<double> row(static_cast<std::size_t>(n));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double w = wp ? wp[r] : 1.0;
    if (w == 0.0) continue;
    for (int i = 0; i < n; ++i) row[static_cast<std::size_t>(i)] = probs.data()[r * n + i];
    acc += w * entropy_nats(row);
    count += w;
  }
  return count > 0.0 ? acc / count : 0.0;
}

}  // namespace moepeft
