// Copyright (c) 2026 moe_peft contributors
// SPDX-License-Identifier: Apache-2.0
//
// moe_peft: train, evaluate, sweep, inspect routing, count parameters and
// export folded checkpoints for mixture-of-PEFT-experts fine-tuning runs.
// Exit codes: 0 success, 2 configuration, 3 divergence, 4 fold verification.

#include <CLI11.hpp>

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <thread>

#include "moepeft/eval.hpp"
#include "moepeft/folding.hpp"
#include "moepeft/stats.hpp"
#include "moepeft/train.hpp"

namespace {

using namespace moepeft;

constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitVerification = 4;

std::filesystem::path resolve_out(const std::string& flag_out, const std::string& cfg_out) {
  std::filesystem::path out = flag_out.empty() ? std::filesystem::path(cfg_out)
                                               : std::filesystem::path(flag_out);
  if (out.is_relative()) {
    if (const char* root = std::getenv("MOE_PEFT_OUT")) {
      return std::filesystem::path(root) / out;
    }
  }
  return out;
}

nlohmann::json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
}

RunConfig load_run_config(const std::string& path, std::uint64_t seed_override, bool has_seed,
                          const std::string& out_override) {
  RunConfig cfg = parse_run_config(load_json_file(path));
  if (has_seed) {
    cfg.seed = seed_override;
    cfg.train.seed = seed_override;
  }
  cfg.out_dir = resolve_out(out_override, cfg.out_dir).string();
  return cfg;
}

std::string config_hash(const RunConfig& cfg) {
  const std::string text = run_config_to_json(cfg).dump();
  return sha256_hex(text.data(), text.size()).substr(0, 12);
}

// ---------------------------------------------------------------------------

int cmd_train(const std::string& config_path, std::uint64_t seed, bool has_seed,
              const std::string& out) {
  RunConfig cfg = load_run_config(config_path, seed, has_seed, out);
  RunResult result = train_run(cfg);
  std::cout << "run " << result.run_dir.string() << "\n"
            << "final_loss " << result.final_loss << "\n"
            << "checkpoint " << result.final_ckpt.string() << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& split_name, int samples,
             std::uint64_t seed, const std::string& out) {
  Model model = load_model(ckpt);
  if (model.config.backbone.vocab < vocab::size()) {
    throw ConfigError("checkpoint vocabulary is incompatible with the task suite");
  }
  const Split split = split_name == "train" ? Split::kTrain : Split::kEval;
  EvalReport report = evaluate(model, split, samples, seed);
  std::filesystem::path out_dir =
      resolve_out(out, std::filesystem::path(ckpt).parent_path().string());
  std::filesystem::create_directories(out_dir);
  write_eval_csv(report, out_dir / "accuracy.csv");
  {
    std::ofstream j(out_dir / "accuracy.json");
    j << eval_to_json(report).dump(2) << "\n";
  }
  for (const auto& t : report.tasks) {
    std::cout << t.task << " (" << t.split << "): median " << csv_float(t.median_acc)
              << " mean " << csv_float(t.mean_acc) << "\n";
  }
  std::cout << "average_median " << csv_float(report.average_median) << "\n"
            << "wrote " << (out_dir / "accuracy.csv").string() << "\n";
  return 0;
}

struct SweepRow {
  std::string axis;
  std::string value;
  std::string status = "ok";
  std::string hash;
  float final_loss = 0.0f;
  double eval_average = 0.0;
  double mean_entropy = 0.0;
};

int cmd_sweep(const std::string& config_path, const std::string& axis,
              const std::vector<std::string>& values, std::uint64_t seed, bool has_seed,
              const std::string& out, int threads) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  RunConfig base = load_run_config(config_path, seed, has_seed, out);
  const std::filesystem::path sweep_dir = base.out_dir;
  std::filesystem::create_directories(sweep_dir);

  auto configure = [&](const std::string& value) {
    RunConfig cfg = base;
    if (axis == "n_experts") {
      cfg.n_experts = std::stoi(value);
    } else if (axis == "strategy") {
      cfg.routing.strategy = strategy_from_string(value);
      if (cfg.routing.strategy == RoutingStrategy::kSoft) cfg.routing.load_balance_alpha = 0.0f;
    } else if (axis == "routing_input") {
      if (value == "token") {
        cfg.routing.input_mode = RoutingInput::kToken;
      } else if (value == "sentence") {
        cfg.routing.input_mode = RoutingInput::kSentence;
      } else {
        throw ConfigError("routing_input value must be token or sentence");
      }
    } else if (axis == "batch_size") {
      cfg.train.batch_size = std::stoi(value);
    } else {
      throw ConfigError("unknown sweep axis '" + axis +
                        "' (expected n_experts|strategy|routing_input|batch_size)");
    }
    cfg.out_dir = (sweep_dir / (axis + "_" + value)).string();
    cfg.validate();
    return cfg;
  };

  std::vector<SweepRow> rows(values.size());
  auto run_one = [&](std::size_t idx) {
    SweepRow& row = rows[idx];
    row.axis = axis;
    row.value = values[idx];
    try {
      RunConfig cfg = configure(values[idx]);
      row.hash = config_hash(cfg);
      RunResult rr = train_run(cfg);
      row.final_loss = rr.final_loss;
      row.mean_entropy = rr.mean_entropy_probe;
      Model model = load_model(rr.final_ckpt);
      row.eval_average = evaluate(model, Split::kEval, 25, cfg.seed).average_median;
    } catch (const Error& e) {
      row.status = std::string("error: ") + e.what();
    }
  };

  if (threads <= 1) {
    for (std::size_t i = 0; i < values.size(); ++i) run_one(i);
  } else {
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    for (int t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < values.size(); i = next.fetch_add(1)) {
          run_one(i);
        }
      });
    }
    for (auto& t : pool) t.join();
  }

  const std::filesystem::path csv_path = sweep_dir / "sweep.csv";
  std::ofstream csv(csv_path);
  csv << "axis,value,status,config_hash,final_loss,eval_average,mean_entropy\n";
  for (const auto& row : rows) {
    csv << row.axis << "," << row.value << "," << row.status << "," << row.hash << ","
        << csv_float(row.final_loss) << "," << csv_float(row.eval_average) << ","
        << csv_float(row.mean_entropy) << "\n";
  }
  std::cout << "wrote " << csv_path.string() << "\n";
  return 0;
}

void print_budget(const std::string& arch, const std::string& method, const ParamBudget& b) {
  std::printf("%-8s %-12s adapters %14lld  routers %12lld  backbone %16lld  %.6f%%\n",
              arch.c_str(), method.c_str(), static_cast<long long>(b.adapter_params),
              static_cast<long long>(b.router_params), static_cast<long long>(b.backbone_params),
              b.percent_updated);
}

int cmd_params(const std::string& arch_name, const std::string& config_path,
               const std::string& peft, int experts, int rank, bool published, bool as_json) {
  RoutingConfig routing;  // token routing, the accounting default
  if (published) {
    struct Row {
      const char* arch;
      const char* peft;
      int experts;
      int rank;
    };
    const Row rows[] = {{"large", "ia3", 1, 0},  {"xl", "ia3", 1, 0},  {"xxl", "ia3", 1, 0},
                        {"xl", "ia3", 10, 0},    {"xl", "ia3", 30, 0}, {"xl", "ia3", 60, 0},
                        {"xxl", "ia3", 10, 0},   {"xxl", "ia3", 60, 0},
                        {"xl", "lora", 1, 4},    {"xl", "lora", 10, 4}};
    for (const Row& r : rows) {
      PeftPlan plan;
      plan.kind = peft_kind_from_string(r.peft);
      if (r.rank) plan.rank = r.rank;
      ParamBudget b = count_params(plan, arch_preset(r.arch), r.experts, routing);
      std::string method = plan.kind == PeftKind::kIa3 ? (r.experts > 1 ? "mov" : "ia3")
                                                       : (r.experts > 1 ? "molora" : "lora");
      if (r.experts > 1) method += "-" + std::to_string(r.experts);
      print_budget(r.arch, method, b);
    }
    return 0;
  }
  ArchSpec arch;
  if (arch_name == "toy") {
    RunConfig cfg;
    if (!config_path.empty()) cfg = parse_run_config(load_json_file(config_path));
    arch = ArchSpec::from_backbone(cfg.backbone);
  } else {
    arch = arch_preset(arch_name);
  }
  PeftPlan plan;
  plan.kind = peft_kind_from_string(peft);
  if (rank > 0) plan.rank = rank;
  ParamBudget b = count_params(plan, arch, experts, routing);
  if (as_json) {
    nlohmann::json j = {{"arch", arch.name},
                        {"source", arch.source},
                        {"peft", peft},
                        {"n_experts", experts},
                        {"adapter_params", b.adapter_params},
                        {"router_params", b.router_params},
                        {"backbone_params", b.backbone_params},
                        {"percent_updated", b.percent_updated}};
    std::cout << j.dump(2) << "\n";
  } else {
    print_budget(arch.name, peft + (experts > 1 ? "-" + std::to_string(experts) : ""), b);
  }
  return 0;
}

int cmd_routing_stats(const std::string& ckpt, const std::string& site, int samples,
                      std::uint64_t seed, const std::string& out) {
  Model model = load_model(ckpt);
  const std::string block = site.empty() ? model.probe_block() : site;
  RoutingStats stats = routing_stats(model, block, samples, seed);
  std::filesystem::path out_dir =
      resolve_out(out, std::filesystem::path(ckpt).parent_path().string());
  std::filesystem::create_directories(out_dir);
  write_routing_stats_csv(stats, out_dir / "routing_mean_probs.csv", out_dir / "routing_jsd.csv");
  std::cout << "block " << block << "\n";
  for (std::size_t r = 0; r < stats.tasks.size(); ++r) {
    std::cout << stats.tasks[r] << " (" << stats.splits[r] << "):";
    for (double p : stats.mean_probs[r]) std::cout << " " << csv_float(p);
    std::cout << "  H=" << csv_float(stats.entropy[r]) << "\n";
  }
  std::cout << "wrote " << (out_dir / "routing_mean_probs.csv").string() << "\n";
  return 0;
}

MixingWeights mixing_from_spec(const Model& model, const std::string& spec, int samples,
                               std::uint64_t seed) {
  if (spec == "uniform") return uniform_mixing(model);
  if (spec.rfind("task-mean:", 0) == 0) {
    const std::string task = spec.substr(std::string("task-mean:").size());
    const int task_id = model.suite.task_index(task);
    MixingWeights mix;
    for (const std::string& block : adapter_blocks(model.adapters)) {
      if (model.config.n_experts == 1) {
        mix[block] = {1.0f};
        continue;
      }
      auto mean = task_mean_probs(model, task_id, block, samples, seed);
      mix[block] = std::vector<float>(mean.begin(), mean.end());
    }
    return mix;
  }
  if (spec.rfind("explicit:", 0) == 0) {
    std::vector<float> w;
    std::string rest = spec.substr(std::string("explicit:").size());
    std::size_t pos = 0;
    while (pos < rest.size()) {
      std::size_t comma = rest.find(',', pos);
      if (comma == std::string::npos) comma = rest.size();
      w.push_back(std::stof(rest.substr(pos, comma - pos)));
      pos = comma + 1;
    }
    return explicit_mixing(model, w);
  }
  throw ConfigError("mixing must be uniform, task-mean:<task>, or explicit:<w0,w1,...>");
}

int cmd_export_merged(const std::string& ckpt, const std::string& mixing_spec, int probes,
                      std::uint64_t seed, const std::string& out) {
  Model model = load_model(ckpt);
  MixingWeights mixing = mixing_from_spec(model, mixing_spec, 64, seed);
  Backbone folded = fold_static(model.backbone, model.adapters, mixing);
  FoldReport report = verify_fold(model, folded, mixing, probes, seed);

  std::filesystem::path out_dir =
      resolve_out(out, std::filesystem::path(ckpt).parent_path().string());
  std::filesystem::create_directories(out_dir);
  CheckpointData data;
  data.meta["run_config"] = run_config_to_json(model.config);
  data.meta["folded"] = true;
  data.meta["mixing"] = mixing_spec;
  data.tensors = folded.named_weights();
  std::sort(data.tensors.begin(), data.tensors.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  const auto merged_path = out_dir / "merged.ckpt";
  save_checkpoint(merged_path, data);
  {
    nlohmann::json j = {{"probes", report.probes},
                        {"max_deviation", report.max_deviation},
                        {"tolerance", 1e-5},
                        {"mixing", mixing_spec}};
    std::ofstream rep(out_dir / "fold_report.json");
    rep << j.dump(2) << "\n";
  }
  std::cout << "max_deviation " << report.max_deviation << " over " << report.probes
            << " probe inputs\n"
            << "wrote " << merged_path.string() << "\n";
  if (report.max_deviation >= 1e-5f) {
    std::cerr << "fold verification failed (report retained)\n";
    return kExitVerification;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mixture-of-PEFT-experts fine-tuning at desk scale"};
  app.require_subcommand(1);

  std::string config_path, out, ckpt, split = "eval", axis, site, mixing = "uniform";
  std::string arch = "toy", peft = "ia3";
  std::vector<std::string> values;
  std::uint64_t seed = 0;
  bool has_seed = false;
  int samples = 100, threads = 1, experts = 1, rank = 0, probes = 64;
  bool published = false, as_json = false;

  auto add_seed = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "master seed override")->each([&](const std::string&) {
      has_seed = true;
    });
  };

  CLI::App* train = app.add_subcommand("train", "train from a run config");
  train->add_option("--config", config_path, "run config JSON")->required();
  train->add_option("--out", out, "output directory override");
  add_seed(train);

  CLI::App* eval = app.add_subcommand("eval", "zero-shot rank-classification accuracy");
  eval->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  eval->add_option("--split", split, "train|eval (default eval)");
  eval->add_option("--samples", samples, "instances per template");
  eval->add_option("--out", out, "output directory");
  add_seed(eval);

  CLI::App* sweep = app.add_subcommand("sweep", "grid over one config axis");
  sweep->add_option("--config", config_path, "base run config JSON")->required();
  sweep->add_option("--axis", axis, "n_experts|strategy|routing_input|batch_size")->required();
  sweep->add_option("--values", values, "axis values")->required()->delimiter(',');
  sweep->add_option("--out", out, "sweep directory override");
  sweep->add_option("--threads", threads, "parallel child runs");
  add_seed(sweep);

  CLI::App* params = app.add_subcommand("params", "parameter budget accounting");
  params->add_option("--arch", arch, "toy|large|xl|xxl");
  params->add_option("--config", config_path, "run config for toy dims");
  params->add_option("--peft", peft, "ia3|lora");
  params->add_option("--experts", experts, "expert count (1 = plain PEFT)");
  params->add_option("--rank", rank, "lora rank");
  params->add_flag("--published", published, "print the published reference rows");
  params->add_flag("--json", as_json, "JSON output");

  CLI::App* rstats = app.add_subcommand("routing-stats", "per-task routing distributions");
  rstats->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  rstats->add_option("--site", site, "routed block (default: last decoder FFN)");
  rstats->add_option("--samples", samples, "rows per task");
  rstats->add_option("--out", out, "output directory");
  add_seed(rstats);

  CLI::App* exportm = app.add_subcommand("export-merged", "fold adapters into the backbone");
  exportm->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  exportm->add_option("--mixing", mixing, "uniform | task-mean:<task> | explicit:<w,...>");
  exportm->add_option("--probes", probes, "verification probe inputs");
  exportm->add_option("--out", out, "output directory");
  add_seed(exportm);

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(config_path, seed, has_seed, out);
    if (eval->parsed()) return cmd_eval(ckpt, split, samples, has_seed ? seed : 1234, out);
    if (sweep->parsed()) return cmd_sweep(config_path, axis, values, seed, has_seed, out, threads);
    if (params->parsed()) return cmd_params(arch, config_path, peft, experts, rank, published, as_json);
    if (rstats->parsed()) {
      return cmd_routing_stats(ckpt, site, samples, has_seed ? seed : 1234, out);
    }
    if (exportm->parsed()) {
      return cmd_export_merged(ckpt, mixing, probes, has_seed ? seed : 1234, out);
    }
  } catch (const DivergenceError& e) {
    std::cerr << e.what() << "\n";
    return kExitDivergence;
  } catch (const ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kExitConfig;
  } catch (const InputError& e) {
    std::cerr << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << e.what() << "\n";
    return kExitConfig;
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
  return 1;
}
