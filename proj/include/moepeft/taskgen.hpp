// Copyright (c) 2026 moe_peft contributors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multi-task instruction data. Character-level tasks with multiple
// prompt templates per task, split into train and held-out groups, plus the
// two-task separation suite whose tasks demand opposite output behaviour from
// a shared input distribution.

#pragma once

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "moepeft/errors.hpp"
#include "moepeft/rng.hpp"
#include "moepeft/tensor.hpp"

namespace moepeft {

// --------------------------------------------------------------------------
// Character vocabulary

namespace vocab {

constexpr int kPad = 0;
constexpr int kBos = 1;
constexpr int kEos = 2;

inline const std::string& charset() {
  static const std::string cs = " abcdefghijklmnopqrstuvwxyz0123456789:?,.+=-|!<>";
  return cs;
}

inline int size() { return 3 + static_cast<int>(charset().size()); }

inline int char_to_id(char c) {
  auto pos = charset().find(c);
  if (pos == std::string::npos) {
    throw InputError(std::string("character '") + c + "' not in vocabulary");
  }
  return 3 + static_cast<int>(pos);
}

inline char id_to_char(int id) {
  if (id < 3 || id >= size()) throw IndexError("id " + std::to_string(id) + " is not a character");
  return charset()[static_cast<std::size_t>(id - 3)];
}

inline std::vector<int> encode(const std::string& text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(char_to_id(c));
  return out;
}

inline std::string decode(std::span<const int> ids) {
  std::string out;
  for (int id : ids) {
    if (id == kPad || id == kBos || id == kEos) continue;
    out.push_back(id_to_char(id));
  }
  return out;
}

}  // namespace vocab

// --------------------------------------------------------------------------
// Tasks

struct TaskInstance {
  std::string input;
  std::vector<std::string> options;
  int correct = 0;
};

struct TaskSpec {
  std::string name;
  bool is_eval = false;
  int n_templates = 0;
  // Contract: for a fixed instance_seed, options and correct index are
  // identical across template_idx; only the input text changes.
  std::function<TaskInstance(std::uint64_t instance_seed, int template_idx)> make;
};

enum class Split { kTrain, kEval };

struct TaskSuite {
  std::string name;
  std::string doc;
  std::uint64_t seed = 0;
  std::vector<TaskSpec> tasks;

  std::vector<int> split_ids(Split split) const {
    std::vector<int> ids;
    for (int i = 0; i < static_cast<int>(tasks.size()); ++i) {
      if (tasks[static_cast<std::size_t>(i)].is_eval == (split == Split::kEval)) ids.push_back(i);
    }
    return ids;
  }

  int task_index(const std::string& task_name) const {
    for (int i = 0; i < static_cast<int>(tasks.size()); ++i) {
      if (tasks[static_cast<std::size_t>(i)].name == task_name) return i;
    }
    throw ConfigError("unknown task '" + task_name + "' in suite " + name);
  }

  nlohmann::json manifest() const {
    nlohmann::json tasks_json = nlohmann::json::array();
    for (const auto& t : tasks) {
      tasks_json.push_back({{"name", t.name},
                            {"split", t.is_eval ? "eval" : "train"},
                            {"templates", t.n_templates}});
    }
    return {{"suite", name}, {"doc", doc}, {"seed", seed}, {"tasks", tasks_json}};
  }
};

namespace detail {

inline std::string rand_letters(RngStream& rng, int lo, int hi) {
  int len = rng.uniform_int(lo, hi);
  std::string s;
  for (int i = 0; i < len; ++i) s.push_back(static_cast<char>('a' + rng.uniform_int(0, 25)));
  return s;
}

// Shuffles two options, returning the index of the first argument.
inline int place_options(RngStream& rng, std::string correct, std::string wrong,
                         std::vector<std::string>& out) {
  if (rng.uniform() < 0.5) {
    out = {std::move(correct), std::move(wrong)};
    return 0;
  }
  out = {std::move(wrong), std::move(correct)};
  return 1;
}

inline std::string format1(const std::string& tmpl, const std::string& a) {
  std::string out = tmpl;
  auto pos = out.find("{}");
  out.replace(pos, 2, a);
  return out;
}

inline std::string format2(const std::string& tmpl, const std::string& a, const std::string& b) {
  return format1(format1(tmpl, a), b);
}

}  // namespace detail

// Six train tasks and three held-out tasks over the character vocabulary.
inline TaskSuite make_task_suite(std::uint64_t seed) {
  TaskSuite suite;
  suite.name = "synthetic-v1";
  suite.seed = seed;
  suite.doc =
      "char-level instruction tasks; eval tasks are never sampled during "
      "training (zero-shot protocol)";

  auto add = [&suite](std::string name, bool is_eval, std::vector<std::string> templates,
                      std::function<TaskInstance(RngStream&, const std::vector<std::string>&,
                                                 int)> gen) {
    TaskSpec spec;
    spec.name = std::move(name);
    spec.is_eval = is_eval;
    spec.n_templates = static_cast<int>(templates.size());
    spec.make = [templates = std::move(templates), gen = std::move(gen)](
                    std::uint64_t instance_seed, int template_idx) {
      if (template_idx < 0 || template_idx >= static_cast<int>(templates.size())) {
        throw IndexError("template index " + std::to_string(template_idx) + " out of range");
      }
      RngStream rng(instance_seed);
      return gen(rng, templates, template_idx);
    };
    suite.tasks.push_back(std::move(spec));
  };

  using detail::format1;
  using detail::format2;
  using detail::place_options;
  using detail::rand_letters;

  add("copy", false, {"copy: {}", "repeat {}", "say {} again"},
      [](RngStream& rng, const std::vector<std::string>& tpl, int ti) {
        std::string s = rand_letters(rng, 3, 5);
        std::string wrong = s;
        int pos = rng.uniform_int(0, static_cast<int>(s.size()) - 1);
        char repl = static_cast<char>('a' + rng.uniform_int(0, 25));
        while (repl == s[static_cast<std::size_t>(pos)])
          repl = static_cast<char>('a' + rng.uniform_int(0, 25));
        wrong[static_cast<std::size_t>(pos)] = repl;
        TaskInstance inst;
        inst.correct = place_options(rng, s, wrong, inst.options);
        inst.input = format1(tpl[static_cast<std::size_t>(ti)], s);
        return inst;
      });

  add("reverse", false, {"reverse: {}", "flip {}"},
      [](RngStream& rng, const std::vector<std::string>& tpl, int ti) {
        std::string s;
        std::string rev;
        do {
          s = rand_letters(rng, 3, 4);
          rev = std::string(s.rbegin(), s.rend());
        } while (rev == s);
        TaskInstance inst;
        inst.correct = place_options(rng, rev, s, inst.options);
        inst.input = format1(tpl[static_cast<std::size_t>(ti)], s);
        return inst;
      });

  add("parity", false, {"even or odd x: {}", "parity {}"},
      [](RngStream& rng, const std::vector<std::string>& tpl, int ti) {
        // fixed length so the label is independent of surface length
        const int len = 6;
        int k = rng.uniform_int(1, len);
        std::string s(len, 'o');
        for (int i = 0; i < k; ++i) s[static_cast<std::size_t>(i)] = 'x';
        for (int i = len - 1; i > 0; --i)
          std::swap(s[static_cast<std::size_t>(i)],
                    s[static_cast<std::size_t>(rng.uniform_int(0, i))]);
        TaskInstance inst;
        bool even = (k % 2 == 0);
        inst.correct = place_options(rng, even ? "even" : "odd", even ? "odd" : "even",
                                     inst.options);
        inst.input = format1(tpl[static_cast<std::size_t>(ti)], s);
        return inst;
      });

  add("sort_order", false, {"first of {} {}?", "which comes first: {} or {}?"},
      [](RngStream& rng, const std::vector<std::string>& tpl, int ti) {
        char c1 = static_cast<char>('a' + rng.uniform_int(0, 25));
        char c2 = c1;
        while (c2 == c1) c2 = static_cast<char>('a' + rng.uniform_int(0, 25));
        std::string lo(1, std::min(c1, c2)), hi(1, std::max(c1, c2));
        TaskInstance inst;
        inst.correct = place_options(rng, lo, hi, inst.options);
        inst.input = format2(tpl[static_cast<std::size_t>(ti)], std::string(1, c1),
                             std::string(1, c2));
        return inst;
      });

  add("pattern", false, {"next in {}?", "continue {}"},
      [](RngStream& rng, const std::vector<std::string>& tpl, int ti) {
        char p = static_cast<char>('a' + rng.uniform_int(0, 25));
        char q = p;
        while (q == p) q = static_cast<char>('a' + rng.uniform_int(0, 25));
        std::string s;
        for (int i = 0; i < 5; ++i) s.push_back(i % 2 == 0 ? p : q);
        char next = q;  // position 5 continues the period-2 pattern
        char wrong = p;
        TaskInstance inst;
        inst.correct =
            place_options(rng, std::string(1, next), std::string(1, wrong), inst.options);
        inst.input = format1(tpl[static_cast<std::size_t>(ti)], s);
        return inst;
      });

  add("arith", false, {"{}+{}=?", "add {} and {}"},
      [](RngStream& rng, const std::vector<std::string>& tpl, int ti) {
        int a = rng.uniform_int(0, 9);
        int b = rng.uniform_int(0, 9 - a);
        int c = a + b;
        int wrong = c;
        while (wrong == c) wrong = rng.uniform_int(0, 9);
        TaskInstance inst;
        inst.correct = place_options(rng, std::to_string(c), std::to_string(wrong), inst.options);
        inst.input = format2(tpl[static_cast<std::size_t>(ti)], std::to_string(a),
                             std::to_string(b));
        return inst;
      });

  add("last_char", true, {"last of {}?", "end {}"},
      [](RngStream& rng, const std::vector<std::string>& tpl, int ti) {
        std::string s;
        do {
          s = rand_letters(rng, 3, 5);
        } while (s.front() == s.back());
        TaskInstance inst;
        inst.correct = place_options(rng, std::string(1, s.back()), std::string(1, s.front()),
                                     inst.options);
        inst.input = format1(tpl[static_cast<std::size_t>(ti)], s);
        return inst;
      });

  add("max_digit", true, {"max {} {}?", "bigger {} or {}?"},
      [](RngStream& rng, const std::vector<std::string>& tpl, int ti) {
        int d1 = rng.uniform_int(0, 9);
        int d2 = d1;
        while (d2 == d1) d2 = rng.uniform_int(0, 9);
        TaskInstance inst;
        inst.correct = place_options(rng, std::to_string(std::max(d1, d2)),
                                     std::to_string(std::min(d1, d2)), inst.options);
        inst.input = format2(tpl[static_cast<std::size_t>(ti)], std::to_string(d1),
                             std::to_string(d2));
        return inst;
      });

  add("contains", true, {"is {} in {}?", "does {} have {}?"},
      [](RngStream& rng, const std::vector<std::string>& tpl, int ti) {
        std::string s = rand_letters(rng, 4, 4);
        char c;
        bool present = rng.uniform() < 0.5;
        if (present) {
          c = s[static_cast<std::size_t>(rng.uniform_int(0, 3))];
        } else {
          do {
            c = static_cast<char>('a' + rng.uniform_int(0, 25));
          } while (s.find(c) != std::string::npos);
        }
        TaskInstance inst;
        inst.correct = place_options(rng, present ? "yes" : "no", present ? "no" : "yes",
                                     inst.options);
        // template 0 is "is {c} in {s}?", template 1 is "does {s} have {c}?"
        inst.input = ti == 0
                         ? detail::format2(tpl[0], std::string(1, c), s)
                         : detail::format2(tpl[1], s, std::string(1, c));
        return inst;
      });

  return suite;
}

// Two tasks over a shared payload distribution: the instruction marker is the
// only systematic difference, and the demanded outputs are disjoint tokens.
// One multiplicative rescaling of the frozen features must trade the tasks
// off against each other; a routed pair of experts can satisfy both.
inline TaskSuite make_separation_suite() {
  TaskSuite suite;
  suite.name = "separation-v1";
  suite.seed = 0;
  suite.doc =
      "two train tasks with identical payload distributions and opposite "
      "constant targets ('a' vs 'b'); the marker words 'up'/'down' are the "
      "only systematic input difference, so per-task routing is sufficient "
      "and a single shared rescaling vector is contested";

  auto add = [&suite](std::string name, std::vector<std::string> templates, std::string target,
                      std::string other) {
    TaskSpec spec;
    spec.name = std::move(name);
    spec.is_eval = false;
    spec.n_templates = static_cast<int>(templates.size());
    spec.make = [templates = std::move(templates), target = std::move(target),
                 other = std::move(other)](std::uint64_t instance_seed, int template_idx) {
      if (template_idx < 0 || template_idx >= static_cast<int>(templates.size())) {
        throw IndexError("template index out of range");
      }
      RngStream rng(instance_seed);
      std::string payload = detail::rand_letters(rng, 2, 4);
      TaskInstance inst;
      inst.correct = detail::place_options(rng, target, other, inst.options);
      inst.input = detail::format1(templates[static_cast<std::size_t>(template_idx)], payload);
      return inst;
    };
    suite.tasks.push_back(std::move(spec));
  };

  add("sep_amp", {"up {}", "raise {}"}, "a", "b");
  add("sep_sup", {"down {}", "lower {}"}, "b", "a");
  return suite;
}

inline TaskSuite make_suite_by_name(const std::string& name, std::uint64_t seed) {
  if (name == "synthetic") return make_task_suite(seed);
  if (name == "separation") return make_separation_suite();
  throw ConfigError("unknown suite '" + name + "' (expected synthetic|separation)");
}

// --------------------------------------------------------------------------
// Sentence-embedding stub: hashed bag of tokens, L2-normalized.

struct EmbeddingProvider {
  int width = 768;

  std::vector<float> embed(const std::string& text) const {
    std::vector<float> e(static_cast<std::size_t>(width), 0.0f);
    for (char c : text) {
      std::uint64_t h = 0xcbf29ce484222325ull;
      h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ull;
      h = (h ^ (h >> 29)) * 0xbf58476d1ce4e5b9ull;
      const int bucket = static_cast<int>(h % static_cast<std::uint64_t>(width));
      const float sign = (h >> 63) ? 1.0f : -1.0f;
      e[static_cast<std::size_t>(bucket)] += sign;
    }
    double norm = 0.0;
    for (float v : e) norm += double(v) * v;
    if (norm < 1e-12) {
      e[0] = 1.0f;
      return e;
    }
    const float inv = static_cast<float>(1.0 / std::sqrt(norm));
    for (auto& v : e) v *= inv;
    return e;
  }
};

// --------------------------------------------------------------------------
// Batches

struct Batch {
  int size = 0;
  int in_len = 0;
  int out_len = 0;
  std::vector<int> input_ids;   // [size, in_len] row-major, PAD-filled
  std::vector<int> target_ids;  // [size, out_len]
  Tensor input_mask;            // [size, in_len] 1.0 at real tokens
  Tensor target_mask;           // [size, out_len]
  std::vector<int> task_ids;    // per row
  Tensor embeddings;            // [size, width] when requested, else undefined
};

namespace detail {

struct RawRow {
  std::vector<int> input;
  std::vector<int> target;
  int task_id;
  std::string input_text;
};

inline Batch pack_rows(std::vector<RawRow> rows, bool with_embeddings,
                       const EmbeddingProvider& provider) {
  Batch b;
  b.size = static_cast<int>(rows.size());
  for (const auto& r : rows) {
    b.in_len = std::max(b.in_len, static_cast<int>(r.input.size()));
    b.out_len = std::max(b.out_len, static_cast<int>(r.target.size()));
  }
  b.input_ids.assign(static_cast<std::size_t>(b.size) * b.in_len, vocab::kPad);
  b.target_ids.assign(static_cast<std::size_t>(b.size) * b.out_len, vocab::kPad);
  std::vector<float> imask(static_cast<std::size_t>(b.size) * b.in_len, 0.0f);
  std::vector<float> tmask(static_cast<std::size_t>(b.size) * b.out_len, 0.0f);
  std::vector<float> emb;
  if (with_embeddings) emb.reserve(static_cast<std::size_t>(b.size) * provider.width);
  for (int r = 0; r < b.size; ++r) {
    const auto& row = rows[static_cast<std::size_t>(r)];
    for (std::size_t i = 0; i < row.input.size(); ++i) {
      b.input_ids[static_cast<std::size_t>(r) * b.in_len + i] = row.input[i];
      imask[static_cast<std::size_t>(r) * b.in_len + i] = 1.0f;
    }
    for (std::size_t i = 0; i < row.target.size(); ++i) {
      b.target_ids[static_cast<std::size_t>(r) * b.out_len + i] = row.target[i];
      tmask[static_cast<std::size_t>(r) * b.out_len + i] = 1.0f;
    }
    b.task_ids.push_back(row.task_id);
    if (with_embeddings) {
      auto e = provider.embed(row.input_text);
      emb.insert(emb.end(), e.begin(), e.end());
    }
  }
  b.input_mask = Tensor::from_data({b.size, b.in_len}, std::move(imask));
  b.target_mask = Tensor::from_data({b.size, b.out_len}, std::move(tmask));
  if (with_embeddings) {
    b.embeddings = Tensor::from_data({b.size, provider.width}, std::move(emb));
  }
  return b;
}

}  // namespace detail

// Encoder input is the prompt plus EOS; decoder target is the correct option
// plus EOS (teacher forcing adds BOS on the input side).
inline Batch sample_batch(const TaskSuite& suite, Split split, int batch_size,
                          std::uint64_t seed, bool with_embeddings = false,
                          const EmbeddingProvider& provider = {}) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  auto ids = suite.split_ids(split);
  if (ids.empty()) {
    throw InputError("suite '" + suite.name + "' has no tasks in the requested split");
  }
  RngStream rng(derive_seed(seed ^ suite.seed, "sample_batch"));
  std::vector<detail::RawRow> rows;
  rows.reserve(static_cast<std::size_t>(batch_size));
  for (int r = 0; r < batch_size; ++r) {
    const int task_id = ids[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(ids.size()) - 1))];
    const TaskSpec& task = suite.tasks[static_cast<std::size_t>(task_id)];
    const int tmpl = rng.uniform_int(0, task.n_templates - 1);
    const std::uint64_t inst_seed = rng.next_u64();
    TaskInstance inst = task.make(inst_seed, tmpl);
    detail::RawRow row;
    row.input = vocab::encode(inst.input);
    row.input.push_back(vocab::kEos);
    row.target = vocab::encode(inst.options[static_cast<std::size_t>(inst.correct)]);
    row.target.push_back(vocab::kEos);
    row.task_id = task_id;
    row.input_text = inst.input;
    rows.push_back(std::move(row));
  }
  return detail::pack_rows(std::move(rows), with_embeddings, provider);
}

// Batch drawn from a single task (templates still sampled uniformly); feeds
// the per-task routing statistics.
inline Batch sample_task_batch(const TaskSuite& suite, int task_id, int batch_size,
                               std::uint64_t seed, bool with_embeddings = false,
                               const EmbeddingProvider& provider = {}) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  const TaskSpec& task = suite.tasks.at(static_cast<std::size_t>(task_id));
  RngStream rng(derive_seed(seed ^ suite.seed, "task_batch:" + task.name));
  std::vector<detail::RawRow> rows;
  for (int r = 0; r < batch_size; ++r) {
    const int tmpl = rng.uniform_int(0, task.n_templates - 1);
    TaskInstance inst = task.make(rng.next_u64(), tmpl);
    detail::RawRow row;
    row.input = vocab::encode(inst.input);
    row.input.push_back(vocab::kEos);
    row.target = vocab::encode(inst.options[static_cast<std::size_t>(inst.correct)]);
    row.target.push_back(vocab::kEos);
    row.task_id = task_id;
    row.input_text = inst.input;
    rows.push_back(std::move(row));
  }
  return detail::pack_rows(std::move(rows), with_embeddings, provider);
}

// Deterministic instances for rank-classification evaluation.
inline std::vector<TaskInstance> sample_instances(const TaskSuite& suite, int task_id,
                                                  int template_idx, int count,
                                                  std::uint64_t seed) {
  const TaskSpec& task = suite.tasks.at(static_cast<std::size_t>(task_id));
  RngStream rng(derive_seed(seed ^ suite.seed, "eval:" + task.name));
  std::vector<TaskInstance> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(task.make(rng.next_u64(), template_idx));
  return out;
}

}  // namespace moepeft
