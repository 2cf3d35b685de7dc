// Copyright (c) 2026 moe_peft contributors
// SPDX-License-Identifier: Apache-2.0
//
// Zero-shot evaluation by rank classification: every instance scores its
// answer options by length-normalized log-likelihood; per task we report the
// median and mean accuracy across prompt templates.

#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "moepeft/train.hpp"

namespace moepeft {

struct TaskEval {
  std::string task;
  std::string split;
  int n_templates = 0;
  std::vector<double> per_template_acc;
  double median_acc = 0.0;
  double mean_acc = 0.0;
};

struct EvalReport {
  std::vector<TaskEval> tasks;
  double average_median = 0.0;  // over the evaluated split
};

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double task_template_accuracy(const Model& model, int task_id, int template_idx,
                                     int samples, std::uint64_t seed) {
  const TaskSpec& task = model.suite.tasks.at(static_cast<std::size_t>(task_id));
  auto instances = sample_instances(model.suite, task_id, template_idx, samples, seed);
  const bool sentence = model.config.routing.input_mode == RoutingInput::kSentence;
  int correct = 0;
  for (const auto& inst : instances) {
    std::vector<int> input = vocab::encode(inst.input);
    input.push_back(vocab::kEos);
    std::vector<std::vector<int>> options;
    for (const auto& o : inst.options) options.push_back(vocab::encode(o));
    Tensor emb;
    if (sentence) {
      emb = Tensor::from_data({model.embedder.width}, model.embedder.embed(inst.input));
    }
    const int picked = score_options(model.backbone, &model.adapters, input, options,
                                     sentence ? &emb : nullptr);
    correct += (picked == inst.correct);
  }
  (void)task;
  return static_cast<double>(correct) / samples;
}

inline EvalReport evaluate(const Model& model, Split split, int samples_per_template,
                           std::uint64_t seed) {
  if (samples_per_template < 1) throw InputError("evaluate: need at least one sample");
  EvalReport report;
  double median_sum = 0.0;
  for (int task_id : model.suite.split_ids(split)) {
    const TaskSpec& task = model.suite.tasks[static_cast<std::size_t>(task_id)];
    TaskEval te;
    te.task = task.name;
    te.split = task.is_eval ? "eval" : "train";
    te.n_templates = task.n_templates;
    for (int t = 0; t < task.n_templates; ++t) {
      te.per_template_acc.push_back(
          task_template_accuracy(model, task_id, t, samples_per_template, seed));
    }
    te.median_acc = median_of(te.per_template_acc);
    double s = 0.0;
    for (double a : te.per_template_acc) s += a;
    te.mean_acc = s / te.per_template_acc.size();
    median_sum += te.median_acc;
    report.tasks.push_back(std::move(te));
  }
  if (!report.tasks.empty()) {
    report.average_median = median_sum / static_cast<double>(report.tasks.size());
  }
  return report;
}

// CSV floats carry 6 significant digits, '.' decimal, no locale.
inline std::string csv_float(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

inline void write_eval_csv(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "task,split,n_templates,median_acc,mean_acc\n";
  for (const auto& t : report.tasks) {
    out << t.task << "," << t.split << "," << t.n_templates << "," << csv_float(t.median_acc)
        << "," << csv_float(t.mean_acc) << "\n";
  }
}

inline nlohmann::json eval_to_json(const EvalReport& report) {
  nlohmann::json tasks = nlohmann::json::array();
  for (const auto& t : report.tasks) {
    tasks.push_back({{"task", t.task},
                     {"split", t.split},
                     {"n_templates", t.n_templates},
                     {"per_template_acc", t.per_template_acc},
                     {"median_acc", t.median_acc},
                     {"mean_acc", t.mean_acc}});
  }
  return {{"tasks", tasks}, {"average_median", report.average_median}};
}

}  // namespace moepeft
