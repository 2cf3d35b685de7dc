// Copyright (c) 2026 moe_peft contributors
// SPDX-License-Identifier: Apache-2.0
//
// Frozen-backbone instruction-tuning loop: loss assembly (task + alpha*aux),
// trainable-set masking, optimizer states, metrics and checkpoints. The
// optimizer walks parameters in name order, so runs are bit-reproducible.

#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "moepeft/backbone.hpp"
#include "moepeft/checkpoint.hpp"
#include "moepeft/runconfig.hpp"

namespace moepeft {

// --------------------------------------------------------------------------
// Model bundle

struct Model {
  RunConfig config;
  TaskSuite suite;
  Backbone backbone;
  AdapterSet adapters;
  EmbeddingProvider embedder;

  // Trainable parameters in deterministic (name-sorted) order.
  std::vector<std::pair<std::string, Tensor>> trainable_params() const {
    std::vector<std::pair<std::string, Tensor>> out = adapters.named_params();
    backbone.for_each_weight([&out](const std::string& n, const Tensor& t) {
      if (t.requires_grad()) out.emplace_back(n, t);
    });
    std::sort(out.begin(), out.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    return out;
  }

  std::string probe_block() const {
    return "dec." + std::to_string(config.backbone.layers - 1) + ".ffn";
  }
};

inline Model build_model(const RunConfig& config) {
  config.validate();
  Model m;
  m.config = config;
  m.suite = make_suite_by_name(config.suite.name, config.suite.seed);
  BackboneConfig bc = config.backbone;
  if (bc.vocab < vocab::size()) bc.vocab = vocab::size();
  m.config.backbone = bc;
  m.backbone = build_backbone(bc);
  m.adapters = build_adapters(bc, config.peft, config.n_experts, config.routing,
                              derive_seed(config.seed, "peft-init"));
  m.embedder.width = config.routing.sentence_width;
  return m;
}

// --------------------------------------------------------------------------
// Checkpoint binding

inline CheckpointData model_checkpoint(const Model& m) {
  CheckpointData data;
  data.meta["run_config"] = run_config_to_json(m.config);
  data.meta["plan"] = {{"kind", to_string(m.config.peft.kind)},
                       {"rank", m.config.peft.rank},
                       {"n_experts", m.config.n_experts},
                       {"strategy", to_string(m.config.routing.strategy)}};
  data.meta["vocab"] = m.config.backbone.vocab;
  data.tensors = m.backbone.named_weights();
  for (auto& [name, t] : m.adapters.named_params()) data.tensors.emplace_back(name, t);
  std::sort(data.tensors.begin(), data.tensors.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  return data;
}

inline Model load_model(const std::filesystem::path& ckpt_path) {
  CheckpointData data = load_checkpoint(ckpt_path);
  if (!data.meta.contains("run_config")) {
    throw IoError("checkpoint " + ckpt_path.string() + " carries no run_config");
  }
  Model m = build_model(parse_run_config(data.meta.at("run_config")));
  std::map<std::string, Tensor> by_name;
  m.backbone.for_each_weight([&by_name](const std::string& n, const Tensor& t) { by_name.emplace(n, t); });
  m.adapters.for_each_param([&by_name](const std::string& n, const Tensor& t) { by_name.emplace(n, t); });
  std::size_t matched = 0;
  for (const auto& [name, stored] : data.tensors) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("checkpoint tensor '" + name + "' has no home");
    if (it->second.shape() != stored.shape()) {
      throw IoError("checkpoint tensor '" + name + "' shape mismatch");
    }
    it->second.raw() = stored.raw();
    ++matched;
  }
  if (matched != by_name.size()) {
    throw IoError("checkpoint " + ckpt_path.string() + " does not cover the model");
  }
  return m;
}

// --------------------------------------------------------------------------
// Optimizers

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(const std::vector<std::pair<std::string, Tensor>>& params) = 0;
  virtual std::int64_t state_floats() const = 0;
};

class SgdOptimizer : public Optimizer {
 public:
  explicit SgdOptimizer(float lr) : lr_(lr) {}
  void step(const std::vector<std::pair<std::string, Tensor>>& params) override {
    for (const auto& [name, p] : params) {
      if (!p.has_grad()) continue;
      Tensor t = p;
      const auto& g = t.grad();
      for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] -= lr_ * g[static_cast<std::size_t>(i)];
    }
  }
  std::int64_t state_floats() const override { return 0; }

 private:
  float lr_;
};

class AdamOptimizer : public Optimizer {
 public:
  explicit AdamOptimizer(float lr) : lr_(lr) {}

  void step(const std::vector<std::pair<std::string, Tensor>>& params) override {
    ++t_;
    const double bc1 = 1.0 - std::pow(0.9, t_);
    const double bc2 = 1.0 - std::pow(0.999, t_);
    for (const auto& [name, p] : params) {
      auto& st = state_[name];
      if (st.m.empty()) {
        st.m.assign(static_cast<std::size_t>(p.size()), 0.0f);
        st.v.assign(static_cast<std::size_t>(p.size()), 0.0f);
      }
      if (!p.has_grad()) continue;
      Tensor t = p;
      const auto& g = t.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        st.m[i] = 0.9f * st.m[i] + 0.1f * g[i];
        st.v[i] = 0.999f * st.v[i] + 0.001f * g[i] * g[i];
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        t.data()[i] -= static_cast<float>(lr_ * mhat / (std::sqrt(vhat) + 1e-8));
      }
    }
  }

  std::int64_t state_floats() const override {
    std::int64_t n = 0;
    for (const auto& [name, st] : state_) n += static_cast<std::int64_t>(st.m.size() + st.v.size());
    return n;
  }

 private:
  struct State {
    std::vector<float> m, v;
  };
  float lr_;
  long t_ = 0;
  std::map<std::string, State> state_;
};

// Simplified Adafactor: factored second moments for matrices, unfactored for
// vectors; no first moment; absolute step size (the published recipe fixes
// lr = 3e-4); decay 1 - t^-0.8; squared-gradient epsilon 1e-30; update
// clipped at RMS 1.
class AdafactorOptimizer : public Optimizer {
 public:
  explicit AdafactorOptimizer(float lr) : lr_(lr) {}

  void step(const std::vector<std::pair<std::string, Tensor>>& params) override {
    ++t_;
    const float beta = 1.0f - std::pow(static_cast<float>(t_), -0.8f);
    for (const auto& [name, p] : params) {
      auto& st = state_[name];
      const bool factored = p.rank() >= 2;
      const int cols = p.dim(p.rank() - 1);
      const int rows = static_cast<int>(p.size() / cols);
      if (factored && st.row.empty()) {
        st.row.assign(static_cast<std::size_t>(rows), 0.0f);
        st.col.assign(static_cast<std::size_t>(cols), 0.0f);
      }
      if (!factored && st.full.empty()) {
        st.full.assign(static_cast<std::size_t>(p.size()), 0.0f);
      }
      if (!p.has_grad()) {
        decay_only(st, beta);
        continue;
      }
      Tensor t = p;
      const auto& g = t.grad();
      std::vector<float> u(g.size());
      if (factored) {
        // row/col sums of g^2 + eps, EMA, then rank-1 reconstruction
        std::vector<double> rsum(static_cast<std::size_t>(rows), 0.0);
        std::vector<double> csum(static_cast<std::size_t>(cols), 0.0);
        for (int r = 0; r < rows; ++r) {
          for (int c = 0; c < cols; ++c) {
            const double g2 = double(g[static_cast<std::size_t>(r) * cols + c]) *
                                  g[static_cast<std::size_t>(r) * cols + c] +
                              kEps2;
            rsum[static_cast<std::size_t>(r)] += g2;
            csum[static_cast<std::size_t>(c)] += g2;
          }
        }
        double row_total = 0.0;
        for (int r = 0; r < rows; ++r) {
          st.row[static_cast<std::size_t>(r)] =
              beta * st.row[static_cast<std::size_t>(r)] + (1.0f - beta) * static_cast<float>(rsum[static_cast<std::size_t>(r)]);
          row_total += st.row[static_cast<std::size_t>(r)];
        }
        for (int c = 0; c < cols; ++c) {
          st.col[static_cast<std::size_t>(c)] =
              beta * st.col[static_cast<std::size_t>(c)] + (1.0f - beta) * static_cast<float>(csum[static_cast<std::size_t>(c)]);
        }
        for (int r = 0; r < rows; ++r) {
          for (int c = 0; c < cols; ++c) {
            const double vhat = double(st.row[static_cast<std::size_t>(r)]) *
                                st.col[static_cast<std::size_t>(c)] / row_total;
            u[static_cast<std::size_t>(r) * cols + c] =
                static_cast<float>(g[static_cast<std::size_t>(r) * cols + c] / std::sqrt(vhat));
          }
        }
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) {
          st.full[i] = beta * st.full[i] + (1.0f - beta) * (g[i] * g[i] + kEps2);
          u[i] = g[i] / std::sqrt(st.full[i]);
        }
      }
      double ms = 0.0;
      for (float v : u) ms += double(v) * v;
      const double rms = std::sqrt(ms / static_cast<double>(u.size()));
      const float clip = rms > 1.0 ? static_cast<float>(1.0 / rms) : 1.0f;
      for (std::size_t i = 0; i < u.size(); ++i) t.data()[i] -= lr_ * clip * u[i];
    }
  }

  std::int64_t state_floats() const override {
    std::int64_t n = 0;
    for (const auto& [name, st] : state_) {
      n += static_cast<std::int64_t>(st.row.size() + st.col.size() + st.full.size());
    }
    return n;
  }

 private:
  static constexpr double kEps2 = 1e-30;
  struct State {
    std::vector<float> row, col, full;
  };
  static void decay_only(State& st, float beta) {
    for (auto& v : st.row) v *= beta;
    for (auto& v : st.col) v *= beta;
    for (auto& v : st.full) v *= beta;
  }
  float lr_;
  long t_ = 0;
  std::map<std::string, State> state_;
};

inline std::unique_ptr<Optimizer> make_optimizer(OptimizerKind kind, float lr) {
  switch (kind) {
    case OptimizerKind::kAdafactor: return std::make_unique<AdafactorOptimizer>(lr);
    case OptimizerKind::kAdam: return std::make_unique<AdamOptimizer>(lr);
    case OptimizerKind::kSgd: return std::make_unique<SgdOptimizer>(lr);
  }
  throw ConfigError("unknown optimizer kind");
}

// Optimizer state footprint without allocating it: Adafactor stores m+n per
// matrix and n per vector; Adam stores two full moments.
inline std::int64_t optimizer_state_floats(OptimizerKind kind,
                                           const std::vector<std::pair<std::string, Tensor>>& params) {
  std::int64_t n = 0;
  for (const auto& [name, p] : params) {
    switch (kind) {
      case OptimizerKind::kSgd: break;
      case OptimizerKind::kAdam: n += 2 * p.size(); break;
      case OptimizerKind::kAdafactor:
        if (p.rank() >= 2) {
          const int cols = p.dim(p.rank() - 1);
          n += p.size() / cols + cols;
        } else {
          n += p.size();
        }
        break;
    }
  }
  return n;
}

struct MemoryReport {
  std::int64_t trainable_params = 0;
  std::int64_t frozen_params = 0;
  std::int64_t optimizer_state_floats = 0;
};

inline MemoryReport memory_report(const Model& m, OptimizerKind kind) {
  MemoryReport rep;
  auto trainable = m.trainable_params();
  for (const auto& [name, t] : trainable) rep.trainable_params += t.size();
  m.backbone.for_each_weight([&rep](const std::string&, const Tensor& t) {
    if (!t.requires_grad()) rep.frozen_params += t.size();
  });
  rep.optimizer_state_floats = optimizer_state_floats(kind, trainable);
  return rep;
}

// --------------------------------------------------------------------------
// Steps

struct StepMetrics {
  long step = 0;
  float loss = 0.0f;
  float aux = 0.0f;
  float grad_norm = 0.0f;
  std::map<std::string, double> entropy_per_block;
};

namespace detail {

inline Tensor flatten_tokens(const Tensor& t) {
  const int n = t.dim(t.rank() - 1);
  return reshape(t, {static_cast<int>(t.size() / n), n});
}

}  // namespace detail

// One optimization step on a prepared batch. The trainable set is exactly
// what carries requires_grad; the backbone stays untouched unless a warm-up
// marked it trainable.
inline StepMetrics train_step(Model& model, const Batch& batch, Optimizer& optimizer,
                              long step_index) {
  const RoutingConfig& rc = model.config.routing;
  StepMetrics metrics;
  metrics.step = step_index;
  auto trainable = model.trainable_params();
  if (trainable.empty()) throw ContractError("train_step: no trainable parameters");

  {
    Tape tape;
    ForwardTrace trace;
    ForwardOptions opts;
    opts.adapters = &model.adapters;
    if (batch.embeddings.defined()) opts.sentence_embeddings = &batch.embeddings;
    Tensor logits = seq2seq_logits(model.backbone, batch, opts, &trace);
    Tensor task_loss = cross_entropy(logits, batch.target_ids, batch.target_mask);
    Tensor total = task_loss;
    const bool use_aux = rc.strategy != RoutingStrategy::kSoft &&
                         rc.load_balance_alpha > 0.0f && !trace.routing.empty();
    if (use_aux) {
      Tensor aux_sum;
      for (const auto& rec : trace.routing) {
        Tensor flat = detail::flatten_tokens(rec.probs);
        auto assignments = top1_assignments(flat);
        Tensor weight = rec.token_weight.defined()
                            ? reshape(rec.token_weight, {static_cast<int>(rec.token_weight.size())})
                            : Tensor{};
        Tensor term = load_balancing_loss(flat, assignments, weight);
        aux_sum = aux_sum.defined() ? add(aux_sum, term) : term;
      }
      Tensor aux = scale(aux_sum, 1.0f / static_cast<float>(trace.routing.size()));
      metrics.aux = aux.item();
      total = add(task_loss, scale(aux, rc.load_balance_alpha));
    }
    metrics.loss = task_loss.item();
    if (!std::isfinite(metrics.loss)) {
      throw DivergenceError("training loss is not finite", step_index);
    }
    tape.backward(total);
    for (const auto& rec : trace.routing) {
      metrics.entropy_per_block[rec.block] = mean_routing_entropy(rec.probs, rec.token_weight);
    }
  }

  double norm2 = 0.0;
  for (const auto& [name, p] : trainable) {
    if (!p.has_grad()) continue;
    for (float g : p.grad()) norm2 += double(g) * g;
  }
  metrics.grad_norm = static_cast<float>(std::sqrt(norm2));
  optimizer.step(trainable);
  for (auto& [name, p] : trainable) p.clear_grad();
  return metrics;
}

// Language-model warm-up: teach the frozen-to-be backbone to copy its input
// so adapters have non-degenerate features to modulate. Trains everything,
// then freezes.
inline void warmup_backbone(Model& model) {
  const int steps = model.config.backbone.warmup_steps;
  if (steps <= 0) return;
  model.backbone.set_trainable(true);
  const std::uint64_t seed = derive_seed(model.config.seed, "warmup");
  auto optimizer = make_optimizer(OptimizerKind::kAdafactor, 1e-2f);
  for (int s = 0; s < steps; ++s) {
    Batch batch = sample_batch(model.suite, Split::kTrain, model.config.train.batch_size,
                               seed + static_cast<std::uint64_t>(s));
    // copy objective: target is the input clipped to the output cap
    Batch lm = batch;
    const int out_len = std::min(batch.in_len, model.config.backbone.max_out);
    lm.out_len = out_len;
    lm.target_ids.assign(static_cast<std::size_t>(lm.size) * out_len, vocab::kPad);
    std::vector<float> tmask(static_cast<std::size_t>(lm.size) * out_len, 0.0f);
    for (int b = 0; b < lm.size; ++b) {
      for (int t = 0; t < out_len; ++t) {
        lm.target_ids[static_cast<std::size_t>(b) * out_len + t] =
            batch.input_ids[static_cast<std::size_t>(b) * batch.in_len + t];
        tmask[static_cast<std::size_t>(b) * out_len + t] =
            batch.input_mask.data()[b * batch.in_len + t];
      }
    }
    lm.target_mask = Tensor::from_data({lm.size, out_len}, std::move(tmask));
    lm.embeddings = Tensor{};
    Tape tape;
    Tensor logits = seq2seq_logits(model.backbone, lm, {});
    Tensor loss = cross_entropy(logits, lm.target_ids, lm.target_mask);
    tape.backward(loss);
    auto params = model.backbone.named_weights();
    std::sort(params.begin(), params.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    optimizer->step(params);
    for (auto& [name, p] : params) p.clear_grad();
  }
  model.backbone.set_trainable(false);
}

// --------------------------------------------------------------------------
// Full run: metrics JSON-lines, checkpoints, deterministic given the config.

struct RunResult {
  std::filesystem::path run_dir;
  std::filesystem::path final_ckpt;
  std::filesystem::path metrics_path;
  float final_loss = 0.0f;
  double mean_entropy_probe = 0.0;  // probe block, last logged step
};

inline void append_metrics_line(std::ofstream& out, const StepMetrics& m) {
  nlohmann::json line = {{"step", m.step},
                         {"loss", m.loss},
                         {"aux", m.aux},
                         {"grad_norm", m.grad_norm}};
  for (const auto& [block, h] : m.entropy_per_block) line["entropy_site_" + block] = h;
  out << line.dump() << "\n";
}

inline RunResult train_run(const RunConfig& config) {
  RunConfig cfg = config;
  cfg.validate();
  Model model = build_model(cfg);
  warmup_backbone(model);

  std::filesystem::create_directories(cfg.out_dir);
  RunResult result;
  result.run_dir = cfg.out_dir;
  result.metrics_path = result.run_dir / "metrics.jsonl";
  {
    std::ofstream cfg_out(result.run_dir / "config.json");
    if (!cfg_out) throw IoError("cannot write " + (result.run_dir / "config.json").string());
    cfg_out << run_config_to_json(model.config).dump(2) << "\n";
  }
  std::ofstream metrics_out(result.metrics_path);
  if (!metrics_out) throw IoError("cannot write " + result.metrics_path.string());

  auto optimizer = make_optimizer(cfg.train.optimizer, cfg.train.lr);
  const bool with_embeddings = cfg.routing.input_mode == RoutingInput::kSentence;
  const std::uint64_t data_seed = derive_seed(cfg.train.seed, "data-order");
  StepMetrics last;
  for (long step = 0; step < cfg.train.steps; ++step) {
    Batch batch = sample_batch(model.suite, Split::kTrain, cfg.train.batch_size,
                               data_seed + static_cast<std::uint64_t>(step), with_embeddings,
                               model.embedder);
    last = train_step(model, batch, *optimizer, step);
    if (step % cfg.train.log_every == 0 || step + 1 == cfg.train.steps) {
      append_metrics_line(metrics_out, last);
    }
    if (cfg.train.ckpt_every > 0 && (step + 1) % cfg.train.ckpt_every == 0) {
      save_checkpoint(result.run_dir / ("step_" + std::to_string(step + 1) + ".ckpt"),
                      model_checkpoint(model));
    }
  }
  metrics_out.close();
  result.final_ckpt = result.run_dir / "final.ckpt";
  save_checkpoint(result.final_ckpt, model_checkpoint(model));
  result.final_loss = last.loss;
  auto it = last.entropy_per_block.find(model.probe_block());
  if (it != last.entropy_per_block.end()) result.mean_entropy_probe = it->second;
  return result;
}

}  // namespace moepeft
