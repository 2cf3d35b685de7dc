// Copyright (c) 2026 moe_peft contributors
// SPDX-License-Identifier: Apache-2.0
//
// The two PEFT expert primitives and their banks. Rescaling vectors are
// stored as deltas from one (l = 1 + u) so the all-ones initialization is an
// exact identity; LoRA pairs are stored as expert-major concatenated factors
// a_cat [d_in, n*r], b_cat [n*r, d_out] with b zero-initialized.

#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "moepeft/arch.hpp"
#include "moepeft/moe.hpp"

namespace moepeft {

enum class PeftKind { kIa3, kLora };

inline PeftKind peft_kind_from_string(const std::string& s) {
  if (s == "ia3") return PeftKind::kIa3;
  if (s == "lora") return PeftKind::kLora;
  throw ConfigError("unknown peft kind '" + s + "' (expected ia3|lora)");
}

inline std::string to_string(PeftKind k) { return k == PeftKind::kIa3 ? "ia3" : "lora"; }

enum class SiteKind { kQ, kK, kV, kO, kW1, kW2 };

inline SiteKind site_from_string(const std::string& s) {
  if (s == "q") return SiteKind::kQ;
  if (s == "k") return SiteKind::kK;
  if (s == "v") return SiteKind::kV;
  if (s == "o") return SiteKind::kO;
  if (s == "w1") return SiteKind::kW1;
  if (s == "w2") return SiteKind::kW2;
  throw ConfigError("unknown lora site '" + s + "' (expected q|k|v|o|w1|w2)");
}

inline std::string to_string(SiteKind s) {
  switch (s) {
    case SiteKind::kQ: return "q";
    case SiteKind::kK: return "k";
    case SiteKind::kV: return "v";
    case SiteKind::kO: return "o";
    case SiteKind::kW1: return "w1";
    case SiteKind::kW2: return "w2";
  }
  return "?";
}

struct PeftPlan {
  PeftKind kind = PeftKind::kIa3;
  int rank = 4;              // lora
  float lora_scale = 1.0f;   // applied to the delta; 1 = unscaled as published
  // lora only; (IA)^3 adapts exactly the {k, v, ff} rescaling sites
  std::vector<SiteKind> lora_sites = {SiteKind::kQ, SiteKind::kK, SiteKind::kV,
                                      SiteKind::kO, SiteKind::kW1, SiteKind::kW2};

  bool has_lora_site(SiteKind s) const {
    return std::find(lora_sites.begin(), lora_sites.end(), s) != lora_sites.end();
  }

  void validate(const ArchSpec& arch) const {
    if (kind == PeftKind::kLora) {
      if (rank < 1) throw ConfigError("lora rank must be >= 1");
      const int cap = std::min(arch.d_model, std::min(arch.attn_k_width(), arch.d_ff));
      if (rank > cap) {
        throw ConfigError("lora rank " + std::to_string(rank) +
                          " exceeds min(d_m, d_p) = " + std::to_string(cap));
      }
      if (lora_sites.empty()) throw ConfigError("lora plan adapts no sites");
    }
  }
};

// --------------------------------------------------------------------------
// Live adapter state

struct LoraSite {
  Tensor a;  // [d_in, n*r]
  Tensor b;  // [n*r, d_out]
};

struct AttnAdapters {
  std::optional<Router> router;     // one gate per block, shared by its sites
  Tensor ia3_k_delta;               // [n, k_width]
  Tensor ia3_v_delta;               // [n, v_width]
  std::optional<LoraSite> q, k, v, o;

  bool any() const {
    return ia3_k_delta.defined() || ia3_v_delta.defined() || q || k || v || o;
  }
};

struct FfnAdapters {
  std::optional<Router> router;
  Tensor ia3_ff_delta;              // [n, d_ff]
  std::optional<LoraSite> w1, w2;

  bool any() const { return ia3_ff_delta.defined() || w1 || w2; }
};

struct AdapterSet {
  PeftPlan plan;
  int n_experts = 1;
  RoutingConfig routing;
  std::vector<AttnAdapters> enc_attn;
  std::vector<FfnAdapters> enc_ffn;
  std::vector<AttnAdapters> dec_self;
  std::vector<AttnAdapters> dec_cross;
  std::vector<FfnAdapters> dec_ffn;

  bool routed() const { return n_experts >= 2; }

  template <typename Fn>
  void for_each_param(Fn fn) const {
    auto attn = [&fn](const std::string& prefix, const AttnAdapters& a) {
      if (a.router) fn(prefix + ".router", a.router->w_g);
      if (a.ia3_k_delta.defined()) fn(prefix + ".ia3_k", a.ia3_k_delta);
      if (a.ia3_v_delta.defined()) fn(prefix + ".ia3_v", a.ia3_v_delta);
      for (auto [site, name] : {std::pair{&a.q, "q"}, {&a.k, "k"}, {&a.v, "v"}, {&a.o, "o"}}) {
        if (site->has_value()) {
          fn(prefix + ".lora_" + name + ".a", (*site)->a);
          fn(prefix + ".lora_" + name + ".b", (*site)->b);
        }
      }
    };
    auto ffn = [&fn](const std::string& prefix, const FfnAdapters& f) {
      if (f.router) fn(prefix + ".router", f.router->w_g);
      if (f.ia3_ff_delta.defined()) fn(prefix + ".ia3_ff", f.ia3_ff_delta);
      if (f.w1) {
        fn(prefix + ".lora_w1.a", f.w1->a);
        fn(prefix + ".lora_w1.b", f.w1->b);
      }
      if (f.w2) {
        fn(prefix + ".lora_w2.a", f.w2->a);
        fn(prefix + ".lora_w2.b", f.w2->b);
      }
    };
    for (std::size_t l = 0; l < enc_attn.size(); ++l) {
      attn("adapters.enc." + std::to_string(l) + ".attn", enc_attn[l]);
      ffn("adapters.enc." + std::to_string(l) + ".ffn", enc_ffn[l]);
    }
    for (std::size_t l = 0; l < dec_self.size(); ++l) {
      attn("adapters.dec." + std::to_string(l) + ".self", dec_self[l]);
      attn("adapters.dec." + std::to_string(l) + ".cross", dec_cross[l]);
      ffn("adapters.dec." + std::to_string(l) + ".ffn", dec_ffn[l]);
    }
  }

  std::vector<std::pair<std::string, Tensor>> named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for_each_param([&out](const std::string& name, const Tensor& t) { out.emplace_back(name, t); });
    return out;
  }

  std::set<std::string> param_names() const {
    std::set<std::string> names;
    for_each_param([&names](const std::string& name, const Tensor&) { names.insert(name); });
    return names;
  }
};

// Names of the transformer blocks that carry any adapter state, in model
// order; these are the routing/folding units.
inline std::vector<std::string> adapter_blocks(const AdapterSet& set) {
  std::vector<std::string> blocks;
  for (std::size_t l = 0; l < set.enc_attn.size(); ++l) {
    if (set.enc_attn[l].any()) blocks.push_back("enc." + std::to_string(l) + ".attn");
    if (set.enc_ffn[l].any()) blocks.push_back("enc." + std::to_string(l) + ".ffn");
  }
  for (std::size_t l = 0; l < set.dec_self.size(); ++l) {
    if (set.dec_self[l].any()) blocks.push_back("dec." + std::to_string(l) + ".self");
    if (set.dec_cross[l].any()) blocks.push_back("dec." + std::to_string(l) + ".cross");
    if (set.dec_ffn[l].any()) blocks.push_back("dec." + std::to_string(l) + ".ffn");
  }
  return blocks;
}

// --------------------------------------------------------------------------
// Construction

namespace detail {

inline Tensor make_lora_a(int d_in, int n, int rank, RngStream& rng) {
  return Tensor::randn({d_in, n * rank}, rng, 1.0f / std::sqrt(static_cast<float>(d_in)),
                       /*requires_grad=*/true);
}

inline Tensor make_lora_b(int n, int rank, int d_out) {
  return Tensor::zeros({n * rank, d_out}, /*requires_grad=*/true);
}

inline Router make_router(int d_in, int n, RngStream& rng) {
  // Small nonzero init: identical (IA)^3 experts under an exactly uniform
  // router form a symmetric saddle, so routing diversity has to break it.
  return Router{Tensor::randn({d_in, n}, rng, 0.02f, /*requires_grad=*/true)};
}

}  // namespace detail

inline AdapterSet build_adapters(const BackboneConfig& config, const PeftPlan& plan,
                                 int n_experts, const RoutingConfig& routing,
                                 std::uint64_t seed) {
  if (n_experts < 1) throw ConfigError("n_experts must be >= 1");
  const ArchSpec arch = ArchSpec::from_backbone(config);
  plan.validate(arch);
  routing.validate();

  AdapterSet set;
  set.plan = plan;
  set.n_experts = n_experts;
  set.routing = routing;
  const int kw = config.n_heads * config.d_k;
  const int vw = config.n_heads * config.d_v;
  const int router_in =
      routing.input_mode == RoutingInput::kSentence ? routing.sentence_width : config.d_model;
  RngStream rng(derive_seed(seed, "adapters"));

  auto attn = [&](bool /*is_cross*/) {
    AttnAdapters a;
    if (plan.kind == PeftKind::kIa3) {
      a.ia3_k_delta = Tensor::zeros({n_experts, kw}, /*requires_grad=*/true);
      a.ia3_v_delta = Tensor::zeros({n_experts, vw}, /*requires_grad=*/true);
    } else {
      const int dm = config.d_model;
      if (plan.has_lora_site(SiteKind::kQ))
        a.q = LoraSite{detail::make_lora_a(dm, n_experts, plan.rank, rng),
                       detail::make_lora_b(n_experts, plan.rank, kw)};
      if (plan.has_lora_site(SiteKind::kK))
        a.k = LoraSite{detail::make_lora_a(dm, n_experts, plan.rank, rng),
                       detail::make_lora_b(n_experts, plan.rank, kw)};
      if (plan.has_lora_site(SiteKind::kV))
        a.v = LoraSite{detail::make_lora_a(dm, n_experts, plan.rank, rng),
                       detail::make_lora_b(n_experts, plan.rank, vw)};
      if (plan.has_lora_site(SiteKind::kO))
        a.o = LoraSite{detail::make_lora_a(vw, n_experts, plan.rank, rng),
                       detail::make_lora_b(n_experts, plan.rank, config.d_model)};
    }
    if (a.any() && n_experts >= 2) a.router = detail::make_router(router_in, n_experts, rng);
    return a;
  };
  auto ffn = [&]() {
    FfnAdapters f;
    if (plan.kind == PeftKind::kIa3) {
      f.ia3_ff_delta = Tensor::zeros({n_experts, config.d_ff}, /*requires_grad=*/true);
    } else {
      if (plan.has_lora_site(SiteKind::kW1))
        f.w1 = LoraSite{detail::make_lora_a(config.d_model, n_experts, plan.rank, rng),
                        detail::make_lora_b(n_experts, plan.rank, config.d_ff)};
      if (plan.has_lora_site(SiteKind::kW2))
        f.w2 = LoraSite{detail::make_lora_a(config.d_ff, n_experts, plan.rank, rng),
                        detail::make_lora_b(n_experts, plan.rank, config.d_model)};
    }
    if (f.any() && n_experts >= 2) f.router = detail::make_router(router_in, n_experts, rng);
    return f;
  };

  for (int l = 0; l < config.layers; ++l) {
    set.enc_attn.push_back(attn(false));
    set.enc_ffn.push_back(ffn());
  }
  for (int l = 0; l < config.layers; ++l) {
    set.dec_self.push_back(attn(false));
    set.dec_cross.push_back(attn(true));
    set.dec_ffn.push_back(ffn());
  }
  return set;
}

// --------------------------------------------------------------------------
// Pure apply primitives (the layer forwards in the backbone use the routed
// variants; these are the single-adapter forms)

// Rescale activations with l = 1 + delta, broadcast over leading dims.
inline Tensor apply_ia3(const Tensor& activations, const Tensor& l_vector) {
  if (l_vector.rank() != 1 ||
      l_vector.dim(0) != activations.dim(activations.rank() - 1)) {
    throw DimensionError("apply_ia3: vector " + shape_str(l_vector.shape()) +
                         " does not match activation width " +
                         std::to_string(activations.dim(activations.rank() - 1)));
  }
  return mul(activations, l_vector);
}

// W0 x + scale * B(Ax) for a single pair; a [d_in, r], b [r, d_out].
inline Tensor apply_lora(const Tensor& x, const Tensor& w0, const Tensor& a, const Tensor& b,
                         float lora_scale = 1.0f) {
  Tensor base = matmul(x, w0);
  Tensor delta = matmul(matmul(x, a), b);
  return add(base, lora_scale == 1.0f ? delta : scale(delta, lora_scale));
}

// --------------------------------------------------------------------------
// Parameter accounting

struct ParamBudget {
  std::int64_t adapter_params = 0;
  std::int64_t router_params = 0;
  std::int64_t backbone_params = 0;
  double percent_updated = 0.0;

  std::int64_t updated() const { return adapter_params + router_params; }
};

// Counts follow the closed forms: (IA)^3 contributes L(d_k + d_v + d_ff) per
// encoder and L(2d_k + 2d_v + d_ff) per decoder per expert at full multi-head
// widths; LoRA contributes r(d_in + d_out) per adapted matrix per expert; a
// routed block adds one d_in x n gate. For gated-FFN accounting archs the w1
// site covers both input projections.
inline ParamBudget count_params(const PeftPlan& plan, const ArchSpec& arch, int n_experts,
                                const RoutingConfig& routing) {
  if (n_experts < 1) throw ConfigError("n_experts must be >= 1");
  plan.validate(arch);
  ParamBudget out;
  out.backbone_params = total_backbone_params(arch);
  const std::int64_t L = arch.layers;
  const std::int64_t kw = arch.attn_k_width();
  const std::int64_t vw = arch.attn_v_width();

  std::int64_t per_expert = 0;
  std::int64_t attn_blocks_adapted = 0;
  std::int64_t ffn_blocks_adapted = 0;
  if (plan.kind == PeftKind::kIa3) {
    per_expert = L * (kw + vw + arch.d_ff) + L * (2 * kw + 2 * vw + arch.d_ff);
    attn_blocks_adapted = 3 * L;  // enc self + dec self + dec cross
    ffn_blocks_adapted = 2 * L;
  } else {
    const std::int64_t r = plan.rank;
    std::int64_t per_attn_block = 0;
    if (plan.has_lora_site(SiteKind::kQ)) per_attn_block += r * (arch.d_model + kw);
    if (plan.has_lora_site(SiteKind::kK)) per_attn_block += r * (arch.d_model + kw);
    if (plan.has_lora_site(SiteKind::kV)) per_attn_block += r * (arch.d_model + vw);
    if (plan.has_lora_site(SiteKind::kO)) per_attn_block += r * (vw + arch.d_model);
    std::int64_t per_ffn_block = 0;
    if (plan.has_lora_site(SiteKind::kW1)) {
      const std::int64_t input_mats = arch.gated_ffn ? 2 : 1;
      per_ffn_block += input_mats * r * (arch.d_model + arch.d_ff);
    }
    if (plan.has_lora_site(SiteKind::kW2)) per_ffn_block += r * (arch.d_ff + arch.d_model);
    per_expert = 3 * L * per_attn_block + 2 * L * per_ffn_block;
    attn_blocks_adapted = per_attn_block > 0 ? 3 * L : 0;
    ffn_blocks_adapted = per_ffn_block > 0 ? 2 * L : 0;
  }
  out.adapter_params = per_expert * n_experts;
  if (n_experts >= 2) {
    const std::int64_t router_in =
        routing.input_mode == RoutingInput::kSentence ? routing.sentence_width : arch.d_model;
    out.router_params = (attn_blocks_adapted + ffn_blocks_adapted) * router_in * n_experts;
  }
  out.percent_updated =
      100.0 * static_cast<double>(out.updated()) / static_cast<double>(out.backbone_params);
  return out;
}

}  // namespace moepeft
