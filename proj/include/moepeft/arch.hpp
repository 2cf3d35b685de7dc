// Copyright (c) 2026 moe_peft contributors
// SPDX-License-Identifier: Apache-2.0
//
// Architecture descriptions for parameter accounting, plus the desk-scale
// backbone configuration. Published presets are transcriptions of the public
// T5 v1.1 configuration files; each carries its source so the numbers can be
// audited against the upstream configs.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moepeft/errors.hpp"

namespace moepeft {

enum class Activation { kRelu, kGelu };

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "gelu") return Activation::kGelu;
  throw ConfigError("unknown activation '" + s + "' (expected relu|gelu)");
}

inline std::string to_string(Activation a) {
  return a == Activation::kRelu ? "relu" : "gelu";
}

// Desk-scale trainable backbone. Sequence caps are scaled down from the
// 1024/256 training setup to 64/16.
struct BackboneConfig {
  int layers = 2;  // per side
  int d_model = 32;
  int n_heads = 2;
  int d_k = 16;  // per head
  int d_v = 16;  // per head
  int d_ff = 64;
  int vocab = 51;
  int max_in = 64;
  int max_out = 16;
  Activation activation = Activation::kGelu;
  std::uint64_t seed = 1234;
  int rel_radius = 32;  // relative-position clipping radius
  int warmup_steps = 0;  // language-model warm-up before freezing

  void validate() const {
    auto positive = [](int v, const char* field) {
      if (v <= 0) throw ConfigError(std::string("backbone.") + field + " must be positive");
    };
    positive(layers, "layers");
    positive(d_model, "d_model");
    positive(n_heads, "n_heads");
    positive(d_k, "d_k");
    positive(d_v, "d_v");
    positive(d_ff, "d_ff");
    positive(vocab, "vocab");
    positive(max_in, "max_in");
    positive(max_out, "max_out");
    positive(rel_radius, "rel_radius");
    if (warmup_steps < 0) throw ConfigError("backbone.warmup_steps must be >= 0");
  }
};

// Accounting-level architecture description. Covers both the toy backbone
// (plain two-matrix FFN, tied embeddings) and the published T5 v1.1 family
// (gated FFN, untied lm_head); the gated variant exists only here, never in
// the trainable backbone.
struct ArchSpec {
  std::string name;
  std::string source;  // provenance of the dimension set
  int layers = 0;      // per side
  int d_model = 0;
  int n_heads = 0;
  int d_k = 0;  // per head
  int d_v = 0;  // per head
  int d_ff = 0;
  int vocab = 0;
  bool gated_ffn = false;
  bool tied_embeddings = true;
  int rel_bias_entries_per_stack = 0;  // floats in one stack's position-bias table

  int attn_k_width() const { return n_heads * d_k; }
  int attn_v_width() const { return n_heads * d_v; }

  static ArchSpec from_backbone(const BackboneConfig& c) {
    ArchSpec a;
    a.name = "toy";
    a.source = "constructed from the run's backbone config";
    a.layers = c.layers;
    a.d_model = c.d_model;
    a.n_heads = c.n_heads;
    a.d_k = c.d_k;
    a.d_v = c.d_v;
    a.d_ff = c.d_ff;
    a.vocab = c.vocab;
    a.gated_ffn = false;
    a.tied_embeddings = true;
    a.rel_bias_entries_per_stack = c.n_heads * (2 * c.rel_radius + 1);
    return a;
  }
};

// Every weight tensor of the architecture, as (name, element count) pairs.
// build_backbone materializes exactly this list for the toy arch, so the
// accounting and the live model cannot drift apart.
inline std::vector<std::pair<std::string, std::int64_t>> backbone_tensor_census(
    const ArchSpec& a) {
  std::vector<std::pair<std::string, std::int64_t>> out;
  const std::int64_t dm = a.d_model;
  const std::int64_t kw = a.attn_k_width();
  const std::int64_t vw = a.attn_v_width();
  out.emplace_back("backbone.embed", static_cast<std::int64_t>(a.vocab) * dm);
  if (!a.tied_embeddings) {
    out.emplace_back("backbone.lm_head", static_cast<std::int64_t>(a.vocab) * dm);
  }
  out.emplace_back("backbone.enc.bias", a.rel_bias_entries_per_stack);
  out.emplace_back("backbone.dec.bias", a.rel_bias_entries_per_stack);
  auto attn = [&](const std::string& prefix) {
    out.emplace_back(prefix + ".wq", dm * kw);
    out.emplace_back(prefix + ".wk", dm * kw);
    out.emplace_back(prefix + ".wv", dm * vw);
    out.emplace_back(prefix + ".wo", vw * dm);
    out.emplace_back(prefix + ".ln", dm);
  };
  auto ffn = [&](const std::string& prefix) {
    if (a.gated_ffn) {
      out.emplace_back(prefix + ".wi0", dm * a.d_ff);
      out.emplace_back(prefix + ".wi1", dm * a.d_ff);
      out.emplace_back(prefix + ".wo", static_cast<std::int64_t>(a.d_ff) * dm);
    } else {
      out.emplace_back(prefix + ".w1", dm * a.d_ff);
      out.emplace_back(prefix + ".w2", static_cast<std::int64_t>(a.d_ff) * dm);
    }
    out.emplace_back(prefix + ".ln", dm);
  };
  for (int l = 0; l < a.layers; ++l) {
    const std::string lp = "backbone.enc." + std::to_string(l);
    attn(lp + ".attn");
    ffn(lp + ".ffn");
  }
  for (int l = 0; l < a.layers; ++l) {
    const std::string lp = "backbone.dec." + std::to_string(l);
    attn(lp + ".self");
    attn(lp + ".cross");
    ffn(lp + ".ffn");
  }
  out.emplace_back("backbone.enc.final_ln", dm);
  out.emplace_back("backbone.dec.final_ln", dm);
  return out;
}

inline std::int64_t total_backbone_params(const ArchSpec& a) {
  std::int64_t total = 0;
  for (const auto& [name, count] : backbone_tensor_census(a)) total += count;
  return total;
}

// ---------------------------------------------------------------------------
// Published presets, transcribed from the public T5 v1.1 configs.
// Dimension source: HuggingFace google/t5-v1_1-{large,xl,xxl} config.json:
//   large: d_model 1024, d_ff 2816,  num_layers 24, num_heads 16, d_kv 64
//   xl:    d_model 2048, d_ff 5120,  num_layers 24, num_heads 32, d_kv 64
//   xxl:   d_model 4096, d_ff 10240, num_layers 24, num_heads 64, d_kv 64
// All three: vocab 32128, gated-GeLU FFN, untied lm_head,
// relative_attention_num_buckets 32 (one bias table per stack).

namespace detail {
inline ArchSpec t5_v1_1(const std::string& name, const std::string& hf_id, int dm, int dff,
                        int layers, int heads, int dkv) {
  ArchSpec a;
  a.name = name;
  a.source = "transcribed from HuggingFace " + hf_id + " config.json";
  a.layers = layers;
  a.d_model = dm;
  a.n_heads = heads;
  a.d_k = dkv;
  a.d_v = dkv;
  a.d_ff = dff;
  a.vocab = 32128;
  a.gated_ffn = true;
  a.tied_embeddings = false;
  a.rel_bias_entries_per_stack = heads * 32;
  return a;
}
}  // namespace detail

inline ArchSpec arch_preset(const std::string& name) {
  if (name == "large") {
    return detail::t5_v1_1("large", "google/t5-v1_1-large", 1024, 2816, 24, 16, 64);
  }
  if (name == "xl") {
    return detail::t5_v1_1("xl", "google/t5-v1_1-xl", 2048, 5120, 24, 32, 64);
  }
  if (name == "xxl") {
    return detail::t5_v1_1("xxl", "google/t5-v1_1-xxl", 4096, 10240, 24, 64, 64);
  }
  throw ConfigError("unknown architecture preset '" + name + "' (expected large|xl|xxl|toy)");
}

}  // namespace moepeft
