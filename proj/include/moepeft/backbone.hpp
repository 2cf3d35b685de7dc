// Copyright (c) 2026 moe_peft contributors
// SPDX-License-Identifier: Apache-2.0
//
// Small frozen encoder-decoder transformer. Pre-norm residual blocks with
// RMS gains, shared relative-position biases per stack, tied embeddings.
// Adapter hooks sit exactly where the PEFT methods act: K and V projections,
// the FFN intermediate, and (for LoRA) every linear projection.

#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "moepeft/adapters.hpp"
#include "moepeft/sha256.hpp"
#include "moepeft/taskgen.hpp"

namespace moepeft {

struct AttnWeights {
  Tensor wq, wk, wv, wo;  // [d_m, K], [d_m, K], [d_m, V], [V, d_m]
  Tensor ln;              // pre-norm gain [d_m]
};

struct LayerWeights {
  AttnWeights self;
  std::optional<AttnWeights> cross;
  Tensor ffn_w1, ffn_w2;  // [d_m, d_ff], [d_ff, d_m]
  Tensor ffn_ln;
};

struct Backbone {
  BackboneConfig config;
  Tensor embedding;  // [vocab, d_m], tied output head
  Tensor enc_bias, dec_bias;
  std::vector<LayerWeights> enc, dec;
  Tensor enc_final_ln, dec_final_ln;

  template <typename Fn>
  void for_each_weight(Fn fn) const {
    fn("backbone.embed", embedding);
    fn("backbone.enc.bias", enc_bias);
    fn("backbone.dec.bias", dec_bias);
    auto attn = [&fn](const std::string& p, const AttnWeights& a) {
      fn(p + ".wq", a.wq);
      fn(p + ".wk", a.wk);
      fn(p + ".wv", a.wv);
      fn(p + ".wo", a.wo);
      fn(p + ".ln", a.ln);
    };
    for (std::size_t l = 0; l < enc.size(); ++l) {
      const std::string lp = "backbone.enc." + std::to_string(l);
      attn(lp + ".attn", enc[l].self);
      fn(lp + ".ffn.w1", enc[l].ffn_w1);
      fn(lp + ".ffn.w2", enc[l].ffn_w2);
      fn(lp + ".ffn.ln", enc[l].ffn_ln);
    }
    for (std::size_t l = 0; l < dec.size(); ++l) {
      const std::string lp = "backbone.dec." + std::to_string(l);
      attn(lp + ".self", dec[l].self);
      attn(lp + ".cross", *dec[l].cross);
      fn(lp + ".ffn.w1", dec[l].ffn_w1);
      fn(lp + ".ffn.w2", dec[l].ffn_w2);
      fn(lp + ".ffn.ln", dec[l].ffn_ln);
    }
    fn("backbone.enc.final_ln", enc_final_ln);
    fn("backbone.dec.final_ln", dec_final_ln);
  }

  std::vector<std::pair<std::string, Tensor>> named_weights() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for_each_weight([&out](const std::string& n, const Tensor& t) { out.emplace_back(n, t); });
    return out;
  }

  std::int64_t param_count() const {
    std::int64_t total = 0;
    for_each_weight([&total](const std::string&, const Tensor& t) { total += t.size(); });
    return total;
  }

  // SHA-256 over weights concatenated in name order.
  std::string checksum() const {
    auto weights = named_weights();
    std::sort(weights.begin(), weights.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    Sha256 h;
    for (const auto& [name, t] : weights) {
      h.update(name.data(), name.size());
      h.update(t.data(), sizeof(float) * static_cast<std::size_t>(t.size()));
    }
    return h.hex_digest();
  }

  void set_trainable(bool trainable) {
    for_each_weight([trainable](const std::string&, const Tensor& t) {
      const_cast<Tensor&>(t).set_requires_grad(trainable);
      if (!trainable) const_cast<Tensor&>(t).clear_grad();
    });
  }
};

// Deterministic scaled-normal init: same config and seed give bit-identical
// weights. Projections at 1/sqrt(d_m), embedding at unit scale, norms at one,
// position biases at 0.5 so the frozen net carries positional signal.
inline Backbone build_backbone(const BackboneConfig& config) {
  config.validate();
  Backbone bb;
  bb.config = config;
  RngStream rng(derive_seed(config.seed, "backbone"));
  const float w_scale = 1.0f / std::sqrt(static_cast<float>(config.d_model));
  const int kw = config.n_heads * config.d_k;
  const int vw = config.n_heads * config.d_v;

  bb.embedding = Tensor::randn({config.vocab, config.d_model}, rng, 1.0f);
  bb.enc_bias = Tensor::randn({config.n_heads, 2 * config.rel_radius + 1}, rng, 0.5f);
  bb.dec_bias = Tensor::randn({config.n_heads, 2 * config.rel_radius + 1}, rng, 0.5f);
  auto attn = [&] {
    AttnWeights a;
    a.wq = Tensor::randn({config.d_model, kw}, rng, w_scale);
    a.wk = Tensor::randn({config.d_model, kw}, rng, w_scale);
    a.wv = Tensor::randn({config.d_model, vw}, rng, w_scale);
    a.wo = Tensor::randn({vw, config.d_model}, rng, w_scale);
    a.ln = Tensor::ones({config.d_model});
    return a;
  };
  auto layer = [&](bool with_cross) {
    LayerWeights lw;
    lw.self = attn();
    if (with_cross) lw.cross = attn();
    lw.ffn_w1 = Tensor::randn({config.d_model, config.d_ff}, rng, w_scale);
    lw.ffn_w2 = Tensor::randn({config.d_ff, config.d_model}, rng, w_scale);
    lw.ffn_ln = Tensor::ones({config.d_model});
    return lw;
  };
  for (int l = 0; l < config.layers; ++l) bb.enc.push_back(layer(false));
  for (int l = 0; l < config.layers; ++l) bb.dec.push_back(layer(true));
  bb.enc_final_ln = Tensor::ones({config.d_model});
  bb.dec_final_ln = Tensor::ones({config.d_model});
  bb.set_trainable(false);
  return bb;
}

// --------------------------------------------------------------------------
// Forward pass

struct RoutingRecord {
  std::string block;   // e.g. "dec.1.ffn"
  Tensor probs;        // [B, T, n] pre-truncation probabilities
  Tensor token_weight; // [B, T] mask of real tokens
};

struct ForwardTrace {
  std::vector<RoutingRecord> routing;
  std::vector<Tensor> attn_probs;  // filled when collect_attn
};

struct ForwardOptions {
  const AdapterSet* adapters = nullptr;
  // [B, sentence_width] embeddings for sentence-mode routing.
  const Tensor* sentence_embeddings = nullptr;
  // Per-block constant mixing weights; overrides live routing (fold checks).
  const std::map<std::string, std::vector<float>>* forced_routing = nullptr;
  bool collect_attn = false;
};

namespace detail {

constexpr float kMaskValue = -1e9f;

// Additive attention mask [B, H, Q, K]: 0 on allowed keys, -1e9 elsewhere.
inline Tensor build_attn_mask(const Tensor& key_mask, int batch, int heads, int q_len, int k_len,
                              bool causal) {
  std::vector<float> m(static_cast<std::size_t>(batch) * heads * q_len * k_len, 0.0f);
  const float* km = key_mask.defined() ? key_mask.data() : nullptr;
  for (int b = 0; b < batch; ++b)
    for (int h = 0; h < heads; ++h)
      for (int q = 0; q < q_len; ++q)
        for (int k = 0; k < k_len; ++k) {
          bool blocked = (causal && k > q) || (km && km[b * k_len + k] == 0.0f);
          if (blocked)
            m[((static_cast<std::size_t>(b) * heads + h) * q_len + q) * k_len + k] = kMaskValue;
        }
  return Tensor::from_data({batch, heads, q_len, k_len}, std::move(m));
}

struct BlockRouting {
  Tensor weights;           // [B, T, n] merge weights (post top-k)
  bool sum_to_one = true;
};

// Routing weights for one token stream of a routed block. Records the
// pre-truncation probabilities in the trace.
inline BlockRouting routing_for_stream(const Router& router, const Tensor& stream,
                                       const Tensor& stream_mask, const std::string& block,
                                       const RoutingConfig& cfg, const ForwardOptions& opts,
                                       ForwardTrace* trace) {
  const int batch = stream.dim(0);
  const int t_len = stream.dim(1);
  const int n = router.n_experts();
  if (opts.forced_routing) {
    auto it = opts.forced_routing->find(block);
    if (it != opts.forced_routing->end()) {
      check_simplex(it->second);
      std::vector<float> w(static_cast<std::size_t>(batch) * t_len * n);
      for (std::int64_t row = 0; row < static_cast<std::int64_t>(batch) * t_len; ++row)
        for (int i = 0; i < n; ++i) w[static_cast<std::size_t>(row * n + i)] = it->second[static_cast<std::size_t>(i)];
      return {Tensor::from_data({batch, t_len, n}, std::move(w)), true};
    }
  }
  Tensor probs;
  if (cfg.input_mode == RoutingInput::kSentence) {
    if (!opts.sentence_embeddings || !opts.sentence_embeddings->defined()) {
      throw InputError("sentence routing requires per-row embeddings in the batch");
    }
    Tensor per_row = route_probs(router, reshape(*opts.sentence_embeddings,
                                                 {batch, 1, router.d_in()}));
    probs = expand_dim(per_row, 1, t_len);
  } else {
    probs = route_probs(router, stream);
  }
  if (trace) trace->routing.push_back({block, probs, stream_mask});
  const int k = cfg.top_k();
  if (k == 0 || k == n) return {probs, true};
  return {topk_route(probs, k, cfg.renormalize_topk), cfg.renormalize_topk};
}

// l = 1 + delta rescale of one activation site, routed or single-expert.
inline Tensor ia3_site(const Tensor& act, const Tensor& delta_bank,
                       const std::optional<BlockRouting>& routing) {
  if (routing) {
    return mov_merge_apply(act, routing->weights, delta_bank, routing->sum_to_one);
  }
  // single expert: act * (1 + u)
  Tensor l = add(reshape(delta_bank, {delta_bank.dim(1)}), Tensor::ones({delta_bank.dim(1)}));
  return apply_ia3(act, l);
}

// x @ w0 plus the (possibly routed) low-rank delta.
inline Tensor lora_site(const Tensor& x, const Tensor& w0, const std::optional<LoraSite>& site,
                        const std::optional<BlockRouting>& routing, int rank, float lora_scale) {
  Tensor base = matmul(x, w0);
  if (!site) return base;
  Tensor delta;
  if (routing) {
    delta = molora_delta(x, site->a, site->b, routing->weights, rank);
  } else {
    delta = matmul(matmul(x, site->a), site->b);
  }
  return add(base, lora_scale == 1.0f ? delta : scale(delta, lora_scale));
}

}  // namespace detail

// Teacher-forced logits over the vocabulary at every target position.
// Decoder input is the BOS-shifted target sequence.
inline Tensor seq2seq_logits(const Backbone& bb, const Batch& batch,
                             const ForwardOptions& opts = {}, ForwardTrace* trace = nullptr) {
  const BackboneConfig& cfg = bb.config;
  if (batch.in_len > cfg.max_in) {
    throw InputError("input length " + std::to_string(batch.in_len) + " exceeds cap " +
                     std::to_string(cfg.max_in));
  }
  if (batch.out_len > cfg.max_out) {
    throw InputError("target length " + std::to_string(batch.out_len) + " exceeds cap " +
                     std::to_string(cfg.max_out));
  }
  const AdapterSet* ad = opts.adapters;
  const RoutingConfig routing_cfg = ad ? ad->routing : RoutingConfig{};
  const int B = batch.size;
  const int S = batch.in_len;
  const int T = batch.out_len;
  const int H = cfg.n_heads;
  const float inv_sqrt_dk = 1.0f / std::sqrt(static_cast<float>(cfg.d_k));

  auto attn_block = [&](const AttnWeights& w, const Tensor& xq, const Tensor& xkv,
                        const Tensor& kv_mask_tensor, const Tensor& add_mask, const Tensor& bias,
                        const AttnAdapters* adapters, const std::string& block_name) {
    const int q_len = xq.dim(1);
    const int kv_len = xkv.dim(1);
    std::optional<detail::BlockRouting> kv_routing, q_routing;
    if (adapters && adapters->router) {
      const bool needs_kv = adapters->ia3_k_delta.defined() || adapters->ia3_v_delta.defined() ||
                            adapters->k || adapters->v;
      const bool needs_q = adapters->q.has_value() || adapters->o.has_value();
      if (needs_kv) {
        kv_routing = detail::routing_for_stream(*adapters->router, xkv, kv_mask_tensor,
                                                block_name, routing_cfg, opts, trace);
      }
      if (needs_q) {
        // same gate applied to the query-side stream; trace only the primary
        q_routing = detail::routing_for_stream(*adapters->router, xq, Tensor{}, block_name,
                                               routing_cfg, opts, needs_kv ? nullptr : trace);
      }
    }
    Tensor q = adapters && adapters->q
                   ? detail::lora_site(xq, w.wq, adapters->q, q_routing, ad->plan.rank,
                                       ad->plan.lora_scale)
                   : matmul(xq, w.wq);
    Tensor k = adapters && adapters->k
                   ? detail::lora_site(xkv, w.wk, adapters->k, kv_routing, ad->plan.rank,
                                       ad->plan.lora_scale)
                   : matmul(xkv, w.wk);
    Tensor v = adapters && adapters->v
                   ? detail::lora_site(xkv, w.wv, adapters->v, kv_routing, ad->plan.rank,
                                       ad->plan.lora_scale)
                   : matmul(xkv, w.wv);
    if (adapters && adapters->ia3_k_delta.defined()) {
      k = detail::ia3_site(k, adapters->ia3_k_delta, kv_routing);
    }
    if (adapters && adapters->ia3_v_delta.defined()) {
      v = detail::ia3_site(v, adapters->ia3_v_delta, kv_routing);
    }
    Tensor q4 = swap_axes_1_2(reshape(q, {B, q_len, H, cfg.d_k}));
    Tensor k4 = swap_axes_1_2(reshape(k, {B, kv_len, H, cfg.d_k}));
    Tensor v4 = swap_axes_1_2(reshape(v, {B, kv_len, H, cfg.d_v}));
    Tensor scores = scale(matmul(q4, transpose_last2(k4)), inv_sqrt_dk);
    if (bias.defined()) scores = add(scores, bias);
    scores = add(scores, add_mask);
    Tensor attn = softmax(scores, -1);
    if (trace && opts.collect_attn) trace->attn_probs.push_back(attn);
    Tensor ctx = reshape(swap_axes_1_2(matmul(attn, v4)), {B, q_len, H * cfg.d_v});
    if (adapters && adapters->o) {
      return detail::lora_site(ctx, w.wo, adapters->o, q_routing, ad->plan.rank,
                               ad->plan.lora_scale);
    }
    return matmul(ctx, w.wo);
  };

  auto ffn_block = [&](const LayerWeights& lw, const Tensor& xf, const Tensor& mask_tensor,
                       const FfnAdapters* adapters, const std::string& block_name) {
    std::optional<detail::BlockRouting> routing;
    if (adapters && adapters->router) {
      routing = detail::routing_for_stream(*adapters->router, xf, mask_tensor, block_name,
                                           routing_cfg, opts, trace);
    }
    Tensor u = adapters && adapters->w1
                   ? detail::lora_site(xf, lw.ffn_w1, adapters->w1, routing, ad->plan.rank,
                                       ad->plan.lora_scale)
                   : matmul(xf, lw.ffn_w1);
    Tensor a = cfg.activation == Activation::kRelu ? relu(u) : gelu(u);
    if (adapters && adapters->ia3_ff_delta.defined()) {
      a = detail::ia3_site(a, adapters->ia3_ff_delta, routing);
    }
    if (adapters && adapters->w2) {
      return detail::lora_site(a, lw.ffn_w2, adapters->w2, routing, ad->plan.rank,
                               ad->plan.lora_scale);
    }
    return matmul(a, lw.ffn_w2);
  };

  // Encoder
  Tensor enc_mask = detail::build_attn_mask(batch.input_mask, B, H, S, S, /*causal=*/false);
  Tensor enc_bias = relative_bias(bb.enc_bias, S, S);
  Tensor x = embedding(bb.embedding, batch.input_ids, B, S);
  for (std::size_t l = 0; l < bb.enc.size(); ++l) {
    const LayerWeights& lw = bb.enc[l];
    const std::string lp = "enc." + std::to_string(l);
    const AttnAdapters* aa = ad ? &ad->enc_attn[l] : nullptr;
    const FfnAdapters* fa = ad ? &ad->enc_ffn[l] : nullptr;
    Tensor normed = rms_norm(x, lw.self.ln);
    x = add(x, attn_block(lw.self, normed, normed, batch.input_mask, enc_mask, enc_bias, aa,
                          lp + ".attn"));
    Tensor normed2 = rms_norm(x, lw.ffn_ln);
    x = add(x, ffn_block(lw, normed2, batch.input_mask, fa, lp + ".ffn"));
  }
  Tensor enc_out = rms_norm(x, bb.enc_final_ln);

  // Decoder input: BOS-shifted targets
  std::vector<int> dec_in(static_cast<std::size_t>(B) * T, vocab::kPad);
  for (int b = 0; b < B; ++b) {
    dec_in[static_cast<std::size_t>(b) * T] = vocab::kBos;
    for (int t = 1; t < T; ++t)
      dec_in[static_cast<std::size_t>(b) * T + t] = batch.target_ids[static_cast<std::size_t>(b) * T + t - 1];
  }
  Tensor self_mask = detail::build_attn_mask(Tensor{}, B, H, T, T, /*causal=*/true);
  Tensor cross_mask = detail::build_attn_mask(batch.input_mask, B, H, T, S, /*causal=*/false);
  Tensor dec_bias = relative_bias(bb.dec_bias, T, T);
  Tensor y = embedding(bb.embedding, dec_in, B, T);
  for (std::size_t l = 0; l < bb.dec.size(); ++l) {
    const LayerWeights& lw = bb.dec[l];
    const std::string lp = "dec." + std::to_string(l);
    const AttnAdapters* sa = ad ? &ad->dec_self[l] : nullptr;
    const AttnAdapters* ca = ad ? &ad->dec_cross[l] : nullptr;
    const FfnAdapters* fa = ad ? &ad->dec_ffn[l] : nullptr;
    Tensor normed = rms_norm(y, lw.self.ln);
    y = add(y, attn_block(lw.self, normed, normed, batch.target_mask, self_mask, dec_bias, sa,
                          lp + ".self"));
    Tensor normed_c = rms_norm(y, lw.cross->ln);
    y = add(y, attn_block(*lw.cross, normed_c, enc_out, batch.input_mask, cross_mask, Tensor{},
                          ca, lp + ".cross"));
    Tensor normed_f = rms_norm(y, lw.ffn_ln);
    y = add(y, ffn_block(lw, normed_f, batch.target_mask, fa, lp + ".ffn"));
  }
  y = rms_norm(y, bb.dec_final_ln);
  // tied head, logits scaled by 1/sqrt(d_m) as usual for shared embeddings
  return scale(matmul(y, transpose_last2(bb.embedding)),
               1.0f / std::sqrt(static_cast<float>(cfg.d_model)));
}

// --------------------------------------------------------------------------
// Rank classification

// Mean log-likelihood per option (length-normalized); evaluation path, no
// gradients. Encoder input is shared; each option is teacher-forced.
inline std::vector<double> option_scores(const Backbone& bb, const AdapterSet* adapters,
                                         const std::vector<int>& input_tokens,
                                         const std::vector<std::vector<int>>& options,
                                         const Tensor* sentence_embedding = nullptr) {
  if (options.size() < 2) throw InputError("score_options: need at least 2 options");
  for (const auto& o : options) {
    if (o.empty()) throw InputError("score_options: empty option");
  }
  const int n = static_cast<int>(options.size());
  int out_len = 0;
  for (const auto& o : options) out_len = std::max(out_len, static_cast<int>(o.size()) + 1);

  Batch b;
  b.size = n;
  b.in_len = static_cast<int>(input_tokens.size());
  b.out_len = out_len;
  std::vector<float> imask, tmask;
  for (int i = 0; i < n; ++i) {
    b.input_ids.insert(b.input_ids.end(), input_tokens.begin(), input_tokens.end());
    imask.insert(imask.end(), input_tokens.size(), 1.0f);
    std::vector<int> tgt = options[static_cast<std::size_t>(i)];
    tgt.push_back(vocab::kEos);
    for (int t = 0; t < out_len; ++t) {
      b.target_ids.push_back(t < static_cast<int>(tgt.size()) ? tgt[static_cast<std::size_t>(t)] : vocab::kPad);
      tmask.push_back(t < static_cast<int>(tgt.size()) ? 1.0f : 0.0f);
    }
  }
  b.input_mask = Tensor::from_data({n, b.in_len}, std::move(imask));
  b.target_mask = Tensor::from_data({n, out_len}, std::move(tmask));
  ForwardOptions opts;
  opts.adapters = adapters;
  Tensor expanded;
  if (sentence_embedding && sentence_embedding->defined()) {
    const int width = static_cast<int>(sentence_embedding->size());
    expanded = expand_dim(reshape(*sentence_embedding, {1, width}), 0, n);
    opts.sentence_embeddings = &expanded;
  }
  Tensor logits = seq2seq_logits(bb, b, opts);

  std::vector<double> scores(static_cast<std::size_t>(n), 0.0);
  const int vocab_n = bb.config.vocab;
  for (int i = 0; i < n; ++i) {
    double sum = 0.0;
    int len = 0;
    for (int t = 0; t < out_len; ++t) {
      if (b.target_mask.data()[i * out_len + t] == 0.0f) continue;
      const float* row = logits.data() + (static_cast<std::int64_t>(i) * out_len + t) * vocab_n;
      float mx = row[0];
      for (int v = 1; v < vocab_n; ++v) mx = std::max(mx, row[v]);
      double denom = 0.0;
      for (int v = 0; v < vocab_n; ++v) denom += std::exp(double(row[v]) - mx);
      const int target = b.target_ids[static_cast<std::size_t>(i) * out_len + t];
      sum += double(row[target]) - mx - std::log(denom);
      ++len;
    }
    scores[static_cast<std::size_t>(i)] = sum / len;
  }
  return scores;
}

// Index of the highest mean log-likelihood option; ties to the lowest index.
inline int score_options(const Backbone& bb, const AdapterSet* adapters,
                         const std::vector<int>& input_tokens,
                         const std::vector<std::vector<int>>& options,
                         const Tensor* sentence_embedding = nullptr) {
  auto scores = option_scores(bb, adapters, input_tokens, options, sentence_embedding);
  int best = 0;
  for (int i = 1; i < static_cast<int>(scores.size()); ++i) {
    if (scores[static_cast<std::size_t>(i)] > scores[static_cast<std::size_t>(best)]) best = i;
  }
  return best;
}

}  // namespace moepeft
