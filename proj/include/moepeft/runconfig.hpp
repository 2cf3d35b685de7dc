// Copyright (c) 2026 moe_peft contributors
// SPDX-License-Identifier: Apache-2.0
//
// One JSON document describes a run completely; a run is reproducible from
// its config alone. Parsing is strict about types and rejects unknown keys
// so config typos fail loudly with the offending field named.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "moepeft/adapters.hpp"
#include "moepeft/arch.hpp"
#include "moepeft/moe.hpp"

namespace moepeft {

enum class OptimizerKind { kAdafactor, kAdam, kSgd };

inline OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "adafactor") return OptimizerKind::kAdafactor;
  if (s == "adam") return OptimizerKind::kAdam;
  if (s == "sgd") return OptimizerKind::kSgd;
  throw ConfigError("unknown optimizer '" + s + "' (expected adafactor|adam|sgd)");
}

inline std::string to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::kAdafactor: return "adafactor";
    case OptimizerKind::kAdam: return "adam";
    case OptimizerKind::kSgd: return "sgd";
  }
  return "adafactor";
}

// Defaults mirror the published fine-tuning setup (Adafactor, lr 3e-4,
// batch 32); desk-scale presets override batch and steps.
struct TrainHyper {
  float lr = 3e-4f;
  int batch_size = 32;
  int steps = 2000;
  OptimizerKind optimizer = OptimizerKind::kAdafactor;
  std::uint64_t seed = 42;
  int ckpt_every = 0;  // 0 = final only
  int log_every = 1;

  void validate() const {
    if (lr <= 0.0f) throw ConfigError("train.lr must be positive");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (steps < 0) throw ConfigError("train.steps must be >= 0");
    if (log_every < 1) throw ConfigError("train.log_every must be >= 1");
    if (ckpt_every < 0) throw ConfigError("train.ckpt_every must be >= 0");
  }
};

struct SuiteConfig {
  std::string name = "synthetic";
  std::uint64_t seed = 7;
};

struct RunConfig {
  std::uint64_t seed = 42;  // master seed; adapter init and data order derive from it
  BackboneConfig backbone;
  PeftPlan peft;
  int n_experts = 1;
  RoutingConfig routing;
  TrainHyper train;
  SuiteConfig suite;
  std::string out_dir = "run";

  void validate() const {
    backbone.validate();
    peft.validate(ArchSpec::from_backbone(backbone));
    routing.validate();
    train.validate();
    if (n_experts < 1) throw ConfigError("n_experts must be >= 1");
    if (suite.name != "synthetic" && suite.name != "separation") {
      throw ConfigError("suite.name must be synthetic or separation");
    }
  }
};

namespace detail {

using nlohmann::json;

inline void reject_unknown(const json& j, const std::string& scope,
                           std::initializer_list<const char*> known) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) {
      if (it.key() == k) {
        ok = true;
        break;
      }
    }
    if (!ok) throw ConfigError("unknown field '" + scope + it.key() + "'");
  }
}

template <typename T>
T get_field(const json& j, const std::string& scope, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("field '" + scope + key + "' has the wrong type");
  }
}

inline std::string require_string(const json& j, const std::string& scope, const char* key) {
  if (!j.contains(key)) throw ConfigError("missing required field '" + scope + key + "'");
  if (!j.at(key).is_string()) throw ConfigError("field '" + scope + key + "' must be a string");
  return j.at(key).get<std::string>();
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  using detail::get_field;
  using detail::reject_unknown;
  RunConfig cfg;
  reject_unknown(j, "", {"seed", "backbone", "peft", "n_experts", "routing", "train", "suite",
                         "out_dir"});
  cfg.seed = get_field<std::uint64_t>(j, "", "seed", cfg.seed);
  if (j.contains("backbone")) {
    const auto& b = j.at("backbone");
    reject_unknown(b, "backbone.", {"layers", "d_model", "n_heads", "d_k", "d_v", "d_ff",
                                    "vocab", "max_in", "max_out", "activation", "seed",
                                    "rel_radius", "warmup_steps"});
    cfg.backbone.layers = get_field(b, "backbone.", "layers", cfg.backbone.layers);
    cfg.backbone.d_model = get_field(b, "backbone.", "d_model", cfg.backbone.d_model);
    cfg.backbone.n_heads = get_field(b, "backbone.", "n_heads", cfg.backbone.n_heads);
    cfg.backbone.d_k = get_field(b, "backbone.", "d_k", cfg.backbone.d_k);
    cfg.backbone.d_v = get_field(b, "backbone.", "d_v", cfg.backbone.d_v);
    cfg.backbone.d_ff = get_field(b, "backbone.", "d_ff", cfg.backbone.d_ff);
    cfg.backbone.vocab = get_field(b, "backbone.", "vocab", cfg.backbone.vocab);
    cfg.backbone.max_in = get_field(b, "backbone.", "max_in", cfg.backbone.max_in);
    cfg.backbone.max_out = get_field(b, "backbone.", "max_out", cfg.backbone.max_out);
    cfg.backbone.rel_radius = get_field(b, "backbone.", "rel_radius", cfg.backbone.rel_radius);
    cfg.backbone.warmup_steps =
        get_field(b, "backbone.", "warmup_steps", cfg.backbone.warmup_steps);
    cfg.backbone.seed = get_field<std::uint64_t>(b, "backbone.", "seed", cfg.backbone.seed);
    if (b.contains("activation")) {
      cfg.backbone.activation =
          activation_from_string(detail::require_string(b, "backbone.", "activation"));
    }
  }
  if (!j.contains("peft")) throw ConfigError("missing required field 'peft'");
  {
    const auto& p = j.at("peft");
    reject_unknown(p, "peft.", {"kind", "rank", "lora_scale", "sites"});
    cfg.peft.kind = peft_kind_from_string(detail::require_string(p, "peft.", "kind"));
    cfg.peft.rank = get_field(p, "peft.", "rank", cfg.peft.rank);
    cfg.peft.lora_scale = get_field(p, "peft.", "lora_scale", cfg.peft.lora_scale);
    if (p.contains("sites")) {
      if (!p.at("sites").is_array()) throw ConfigError("field 'peft.sites' must be an array");
      cfg.peft.lora_sites.clear();
      for (const auto& s : p.at("sites")) {
        cfg.peft.lora_sites.push_back(site_from_string(s.get<std::string>()));
      }
    }
  }
  cfg.n_experts = get_field(j, "", "n_experts", cfg.n_experts);
  if (j.contains("routing")) {
    const auto& r = j.at("routing");
    reject_unknown(r, "routing.", {"strategy", "load_balance_alpha", "renormalize_topk",
                                   "input_mode", "sentence_width"});
    if (r.contains("strategy")) {
      cfg.routing.strategy = strategy_from_string(detail::require_string(r, "routing.", "strategy"));
    }
    cfg.routing.load_balance_alpha =
        get_field(r, "routing.", "load_balance_alpha", cfg.routing.load_balance_alpha);
    cfg.routing.renormalize_topk =
        get_field(r, "routing.", "renormalize_topk", cfg.routing.renormalize_topk);
    if (r.contains("input_mode")) {
      const std::string mode = detail::require_string(r, "routing.", "input_mode");
      if (mode == "token") {
        cfg.routing.input_mode = RoutingInput::kToken;
      } else if (mode == "sentence") {
        cfg.routing.input_mode = RoutingInput::kSentence;
      } else {
        throw ConfigError("routing.input_mode must be token or sentence");
      }
    }
    cfg.routing.sentence_width =
        get_field(r, "routing.", "sentence_width", cfg.routing.sentence_width);
  }
  if (!j.contains("train")) throw ConfigError("missing required field 'train'");
  {
    const auto& t = j.at("train");
    reject_unknown(t, "train.", {"lr", "batch_size", "steps", "optimizer", "seed", "ckpt_every",
                                 "log_every"});
    if (!t.contains("steps")) throw ConfigError("missing required field 'train.steps'");
    cfg.train.lr = get_field(t, "train.", "lr", cfg.train.lr);
    cfg.train.batch_size = get_field(t, "train.", "batch_size", cfg.train.batch_size);
    cfg.train.steps = get_field(t, "train.", "steps", cfg.train.steps);
    cfg.train.seed = get_field<std::uint64_t>(t, "train.", "seed", cfg.seed);
    cfg.train.ckpt_every = get_field(t, "train.", "ckpt_every", cfg.train.ckpt_every);
    cfg.train.log_every = get_field(t, "train.", "log_every", cfg.train.log_every);
    if (t.contains("optimizer")) {
      cfg.train.optimizer = optimizer_from_string(detail::require_string(t, "train.", "optimizer"));
    }
  }
  if (j.contains("suite")) {
    const auto& s = j.at("suite");
    reject_unknown(s, "suite.", {"name", "seed"});
    cfg.suite.name = get_field<std::string>(s, "suite.", "name", cfg.suite.name);
    cfg.suite.seed = get_field<std::uint64_t>(s, "suite.", "seed", cfg.suite.seed);
  }
  cfg.out_dir = get_field<std::string>(j, "", "out_dir", cfg.out_dir);
  cfg.validate();
  return cfg;
}

inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
  nlohmann::json sites = nlohmann::json::array();
  for (SiteKind s : cfg.peft.lora_sites) sites.push_back(to_string(s));
  return {
      {"seed", cfg.seed},
      {"backbone",
       {{"layers", cfg.backbone.layers},
        {"d_model", cfg.backbone.d_model},
        {"n_heads", cfg.backbone.n_heads},
        {"d_k", cfg.backbone.d_k},
        {"d_v", cfg.backbone.d_v},
        {"d_ff", cfg.backbone.d_ff},
        {"vocab", cfg.backbone.vocab},
        {"max_in", cfg.backbone.max_in},
        {"max_out", cfg.backbone.max_out},
        {"activation", to_string(cfg.backbone.activation)},
        {"seed", cfg.backbone.seed},
        {"rel_radius", cfg.backbone.rel_radius},
        {"warmup_steps", cfg.backbone.warmup_steps}}},
      {"peft",
       {{"kind", to_string(cfg.peft.kind)},
        {"rank", cfg.peft.rank},
        {"lora_scale", cfg.peft.lora_scale},
        {"sites", sites}}},
      {"n_experts", cfg.n_experts},
      {"routing",
       {{"strategy", to_string(cfg.routing.strategy)},
        {"load_balance_alpha", cfg.routing.load_balance_alpha},
        {"renormalize_topk", cfg.routing.renormalize_topk},
        {"input_mode", cfg.routing.input_mode == RoutingInput::kToken ? "token" : "sentence"},
        {"sentence_width", cfg.routing.sentence_width}}},
      {"train",
       {{"lr", cfg.train.lr},
        {"batch_size", cfg.train.batch_size},
        {"steps", cfg.train.steps},
        {"optimizer", to_string(cfg.train.optimizer)},
        {"seed", cfg.train.seed},
        {"ckpt_every", cfg.train.ckpt_every},
        {"log_every", cfg.train.log_every}}},
      {"suite", {{"name", cfg.suite.name}, {"seed", cfg.suite.seed}}},
      {"out_dir", cfg.out_dir}};
}

}  // namespace moepeft
