// Copyright (c) 2026 moe_peft contributors
// SPDX-License-Identifier: Apache-2.0
//
// Static adapter folding: under constant mixing weights the merged (IA)^3
// vector folds into the adjacent frozen matrix and the merged LoRA delta adds
// onto it, leaving a single plain backbone. Folding is undefined under
// token-dependent routing; callers must pin the mixture first.

#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "moepeft/train.hpp"

namespace moepeft {

using MixingWeights = std::map<std::string, std::vector<float>>;  // block -> weights

inline MixingWeights uniform_mixing(const Model& model) {
  MixingWeights mix;
  const int n = model.config.n_experts;
  std::vector<float> w(static_cast<std::size_t>(n), 1.0f / static_cast<float>(n));
  for (const std::string& block : adapter_blocks(model.adapters)) mix[block] = w;
  return mix;
}

inline MixingWeights explicit_mixing(const Model& model, const std::vector<float>& weights) {
  if (static_cast<int>(weights.size()) != model.config.n_experts) {
    throw ConfigError("mixing weights arity does not match n_experts");
  }
  detail::check_simplex(weights);
  MixingWeights mix;
  for (const std::string& block : adapter_blocks(model.adapters)) mix[block] = weights;
  return mix;
}

namespace detail {

inline const std::vector<float>& mixing_for(const MixingWeights& mix, const std::string& block,
                                            int n_experts) {
  static const std::vector<float> kSingle = {1.0f};
  if (n_experts == 1) return kSingle;
  auto it = mix.find(block);
  if (it == mix.end()) {
    throw ContractError("no constant mixing weights for routed block '" + block +
                        "'; folding is undefined under token-dependent routing");
  }
  if (static_cast<int>(it->second.size()) != n_experts) {
    throw ContractError("mixing weights for '" + block + "' have wrong arity");
  }
  return it->second;
}

// Scale column j of w by l[j].
inline void scale_columns(Tensor w, const Tensor& l) {
  const int rows = w.dim(0), cols = w.dim(1);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) w.data()[r * cols + c] *= l.data()[c];
}

// Scale row r of w by l[r].
inline void scale_rows(Tensor w, const Tensor& l) {
  const int rows = w.dim(0), cols = w.dim(1);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) w.data()[r * cols + c] *= l.data()[r];
}

inline void add_delta(Tensor w, const Tensor& delta, float scale_factor) {
  for (std::int64_t i = 0; i < w.size(); ++i) w.data()[i] += scale_factor * delta.data()[i];
}

inline Tensor ia3_vector_from_delta(const std::vector<float>& mix, const Tensor& delta_bank) {
  Tensor merged = soft_merge_rows(mix, delta_bank);
  for (std::int64_t i = 0; i < merged.size(); ++i) merged.data()[i] += 1.0f;
  return merged;
}

}  // namespace detail

inline Backbone clone_backbone(const Backbone& src) {
  Backbone out = build_backbone(src.config);
  auto dst_named = out.named_weights();
  std::map<std::string, Tensor> src_named;
  src.for_each_weight([&src_named](const std::string& n, const Tensor& t) { src_named.emplace(n, t); });
  for (auto& [name, t] : dst_named) t.raw() = src_named.at(name).raw();
  return out;
}

// Folds adapters into a copy of the backbone under per-block constant mixing
// weights; absent weights for a routed block are a contract violation. Pass
// std::nullopt to represent live (token-dependent) routing, which refuses.
inline Backbone fold_static(const Backbone& backbone, const AdapterSet& adapters,
                            const std::optional<MixingWeights>& mixing) {
  if (!mixing.has_value()) {
    throw ContractError("fold requested under token-dependent routing; "
                        "fold_static needs constant mixing weights");
  }
  Backbone folded = clone_backbone(backbone);
  const int n = adapters.n_experts;
  const float lscale = adapters.plan.lora_scale;
  const int rank = adapters.plan.rank;

  auto fold_attn = [&](AttnWeights& w, const AttnAdapters& a, const std::string& block) {
    if (!a.any()) return;
    const auto& mix = detail::mixing_for(*mixing, block, n);
    if (a.q) detail::add_delta(w.wq, soft_merge_lora_delta(mix, a.q->a, a.q->b, rank), lscale);
    if (a.k) detail::add_delta(w.wk, soft_merge_lora_delta(mix, a.k->a, a.k->b, rank), lscale);
    if (a.v) detail::add_delta(w.wv, soft_merge_lora_delta(mix, a.v->a, a.v->b, rank), lscale);
    if (a.o) detail::add_delta(w.wo, soft_merge_lora_delta(mix, a.o->a, a.o->b, rank), lscale);
    if (a.ia3_k_delta.defined()) {
      detail::scale_columns(w.wk, detail::ia3_vector_from_delta(mix, a.ia3_k_delta));
    }
    if (a.ia3_v_delta.defined()) {
      detail::scale_columns(w.wv, detail::ia3_vector_from_delta(mix, a.ia3_v_delta));
    }
  };
  auto fold_ffn = [&](LayerWeights& lw, const FfnAdapters& f, const std::string& block) {
    if (!f.any()) return;
    const auto& mix = detail::mixing_for(*mixing, block, n);
    if (f.w1) detail::add_delta(lw.ffn_w1, soft_merge_lora_delta(mix, f.w1->a, f.w1->b, rank), lscale);
    if (f.w2) detail::add_delta(lw.ffn_w2, soft_merge_lora_delta(mix, f.w2->a, f.w2->b, rank), lscale);
    if (f.ia3_ff_delta.defined()) {
      detail::scale_rows(lw.ffn_w2, detail::ia3_vector_from_delta(mix, f.ia3_ff_delta));
    }
  };

  for (std::size_t l = 0; l < folded.enc.size(); ++l) {
    const std::string lp = "enc." + std::to_string(l);
    fold_attn(folded.enc[l].self, adapters.enc_attn[l], lp + ".attn");
    fold_ffn(folded.enc[l], adapters.enc_ffn[l], lp + ".ffn");
  }
  for (std::size_t l = 0; l < folded.dec.size(); ++l) {
    const std::string lp = "dec." + std::to_string(l);
    fold_attn(folded.dec[l].self, adapters.dec_self[l], lp + ".self");
    fold_attn(*folded.dec[l].cross, adapters.dec_cross[l], lp + ".cross");
    fold_ffn(folded.dec[l], adapters.dec_ffn[l], lp + ".ffn");
  }
  folded.set_trainable(false);
  return folded;
}

struct FoldReport {
  int probes = 0;
  float max_deviation = 0.0f;
};

// Forward-pass comparison: folded backbone vs the live adapter model with
// routing forced to the same constant mixture.
inline FoldReport verify_fold(const Model& model, const Backbone& folded,
                              const MixingWeights& mixing, int n_probes, std::uint64_t seed) {
  FoldReport report;
  report.probes = n_probes;
  Batch probe = sample_batch(model.suite, Split::kTrain, n_probes, seed);
  ForwardOptions live_opts;
  live_opts.adapters = &model.adapters;
  MixingWeights mix_copy = mixing;
  live_opts.forced_routing = &mix_copy;
  Tensor live = seq2seq_logits(model.backbone, probe, live_opts);
  Tensor flat = seq2seq_logits(folded, probe, {});
  float worst = 0.0f;
  for (std::int64_t i = 0; i < live.size(); ++i) {
    worst = std::max(worst, std::abs(live.data()[i] - flat.data()[i]));
  }
  report.max_deviation = worst;
  return report;
}

}  // namespace moepeft
