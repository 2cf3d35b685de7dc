// Copyright (c) 2026 moe_peft contributors
// SPDX-License-Identifier: Apache-2.0
//
// Routing analytics: per-task mean expert probabilities at one routed block,
// entropy of the mean distribution, and the pairwise Jensen-Shannon matrix.

#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "moepeft/eval.hpp"
#include "moepeft/train.hpp"

namespace moepeft {

// Mean routing distribution of one task at one block, averaged over tokens
// and rows. Throws ConfigError when the block carries no router.
inline std::vector<double> task_mean_probs(const Model& model, int task_id,
                                           const std::string& block, int samples,
                                           std::uint64_t seed) {
  if (samples < 1) throw InputError("task_mean_probs: empty batch");
  const bool sentence = model.config.routing.input_mode == RoutingInput::kSentence;
  Batch batch = sample_task_batch(model.suite, task_id, samples, seed, sentence, model.embedder);
  ForwardTrace trace;
  ForwardOptions opts;
  opts.adapters = &model.adapters;
  if (batch.embeddings.defined()) opts.sentence_embeddings = &batch.embeddings;
  seq2seq_logits(model.backbone, batch, opts, &trace);
  for (const auto& rec : trace.routing) {
    if (rec.block != block) continue;
    const int n = rec.probs.dim(rec.probs.rank() - 1);
    const std::int64_t rows = rec.probs.size() / n;
    const float* w = rec.token_weight.defined() ? rec.token_weight.data() : nullptr;
    std::vector<double> mean(static_cast<std::size_t>(n), 0.0);
    double count = 0.0;
    for (std::int64_t r = 0; r < rows; ++r) {
      const double wr = w ? w[r] : 1.0;
      if (wr == 0.0) continue;
      for (int i = 0; i < n; ++i) mean[static_cast<std::size_t>(i)] += wr * rec.probs.data()[r * n + i];
      count += wr;
    }
    for (auto& v : mean) v /= count;
    return mean;
  }
  throw ConfigError("block '" + block + "' has no router in this model");
}

struct RoutingStats {
  std::string block;
  std::vector<std::string> tasks;
  std::vector<std::string> splits;
  std::vector<std::vector<double>> mean_probs;  // row per task, sums to 1
  std::vector<double> entropy;                  // nats, of the mean distribution
  std::vector<std::vector<double>> jsd;         // symmetric, zero diagonal
};

// Statistics over every task of the suite (train and eval splits both).
inline RoutingStats routing_stats(const Model& model, const std::string& block, int samples,
                                  std::uint64_t seed) {
  RoutingStats stats;
  stats.block = block;
  for (Split split : {Split::kTrain, Split::kEval}) {
    for (int task_id : model.suite.split_ids(split)) {
      const TaskSpec& task = model.suite.tasks[static_cast<std::size_t>(task_id)];
      stats.tasks.push_back(task.name);
      stats.splits.push_back(split == Split::kTrain ? "train" : "eval");
      auto mean = task_mean_probs(model, task_id, block, samples, seed);
      stats.entropy.push_back(entropy_nats(mean));
      stats.mean_probs.push_back(std::move(mean));
    }
  }
  const std::size_t n = stats.tasks.size();
  stats.jsd.assign(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = jensen_shannon_nats(stats.mean_probs[i], stats.mean_probs[j]);
      stats.jsd[i][j] = d;
      stats.jsd[j][i] = d;
    }
  }
  return stats;
}

inline void write_routing_stats_csv(const RoutingStats& stats,
                                    const std::filesystem::path& probs_path,
                                    const std::filesystem::path& jsd_path) {
  {
    std::ofstream out(probs_path);
    if (!out) throw IoError("cannot write " + probs_path.string());
    out << "task,split";
    const std::size_t n_experts = stats.mean_probs.empty() ? 0 : stats.mean_probs[0].size();
    for (std::size_t e = 0; e < n_experts; ++e) out << ",expert_" << e;
    out << ",entropy\n";
    for (std::size_t r = 0; r < stats.tasks.size(); ++r) {
      out << stats.tasks[r] << "," << stats.splits[r];
      for (double p : stats.mean_probs[r]) out << "," << csv_float(p);
      out << "," << csv_float(stats.entropy[r]) << "\n";
    }
  }
  {
    std::ofstream out(jsd_path);
    if (!out) throw IoError("cannot write " + jsd_path.string());
    out << "task";
    for (const auto& t : stats.tasks) out << "," << t;
    out << "\n";
    for (std::size_t r = 0; r < stats.tasks.size(); ++r) {
      out << stats.tasks[r];
      for (double v : stats.jsd[r]) out << "," << csv_float(v);
      out << "\n";
    }
  }
}

}  // namespace moepeft
