// Copyright 2026 The HybridPS Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//
// Experiment configuration: a sectioned key=value file plus command-line
// overrides, validated against a closed schema. Grammar and the full key
// reference live in docs/config.md.

#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hybridps/data.hpp"
#include "hybridps/errors.hpp"
#include "hybridps/orchestrator.hpp"

namespace hybridps {

// One experiment: the training job plus the synthetic workload feeding it.
struct RunSpec {
  TrainConfig train;
  SynthConfig data;
  uint64_t data_seed = 7;

  void validate() const {
    train.validate();
    data.validate();
    if (data.latent_dim != train.embedding_dim) {
      throw ConfigError("data.latent_dim must equal model.embedding_dim");
    }
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline uint64_t parse_u64(const std::string& v) {
  if (v.empty()) throw ConfigError("expected unsigned integer, got empty value");
  uint64_t out = 0;
  for (char c : v) {
    if (c < '0' || c > '9') {
      throw ConfigError("expected unsigned integer, got '" + v + "'");
    }
    uint64_t d = static_cast<uint64_t>(c - '0');
    if (out > (UINT64_MAX - d) / 10) throw ConfigError("integer out of range: '" + v + "'");
    out = out * 10 + d;
  }
  return out;
}

inline uint32_t parse_u32(const std::string& v) {
  uint64_t x = parse_u64(v);
  if (x > UINT32_MAX) throw ConfigError("integer out of range: '" + v + "'");
  return static_cast<uint32_t>(x);
}

inline double parse_f64(const std::string& v) {
  if (v.empty()) throw ConfigError("expected number, got empty value");
  size_t used = 0;
  double out;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("expected number, got '" + v + "'");
  }
  if (used != v.size()) throw ConfigError("expected number, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("expected boolean (true/false), got '" + v + "'");
}

inline std::vector<uint64_t> parse_u64_list(const std::string& v) {
  std::vector<uint64_t> out;
  std::string item;
  std::istringstream is(v);
  while (std::getline(is, item, ',')) out.push_back(parse_u64(trim(item)));
  if (out.empty()) throw ConfigError("expected comma-separated integers, got '" + v + "'");
  return out;
}

inline EmbOptimizer parse_emb_optimizer(const std::string& v) {
  if (v == "adagrad") return EmbOptimizer::kAdagrad;
  if (v == "sgd") return EmbOptimizer::kSgd;
  throw ConfigError("expected one of adagrad|sgd, got '" + v + "'");
}

}  // namespace detail

// Parses "<target>@step=<N>[,window=<ms>][,index=<i>]", the drill syntax
// shared by the [faults] section and the --faults flag. Targets are
// embedding_worker, embedding_ps, nn_worker.
inline FaultEvent parse_fault_spec(const std::string& spec) {
  size_t at = spec.find('@');
  if (at == std::string::npos) {
    throw ConfigError("fault spec '" + spec + "': expected <target>@step=<N>");
  }
  std::string target = detail::trim(spec.substr(0, at));
  FaultEvent f;
  if (target == "embedding_worker") {
    f.target = FaultEvent::Target::kEmbeddingWorker;
  } else if (target == "embedding_ps") {
    f.target = FaultEvent::Target::kEmbeddingPs;
  } else if (target == "nn_worker") {
    f.target = FaultEvent::Target::kNnWorker;
  } else {
    throw ConfigError("fault spec '" + spec +
                      "': target must be embedding_worker|embedding_ps|nn_worker");
  }
  bool have_step = false;
  std::string rest = spec.substr(at + 1);
  std::istringstream is(rest);
  std::string part;
  while (std::getline(is, part, ',')) {
    part = detail::trim(part);
    size_t eq = part.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("fault spec '" + spec + "': expected key=value, got '" + part + "'");
    }
    std::string k = detail::trim(part.substr(0, eq));
    std::string v = detail::trim(part.substr(eq + 1));
    if (k == "step") {
      f.at_step = detail::parse_u64(v);
      have_step = true;
    } else if (k == "window") {
      f.window_ms = detail::parse_u32(v);
    } else if (k == "index") {
      f.index = detail::parse_u32(v);
    } else {
      throw ConfigError("fault spec '" + spec + "': unknown field '" + k + "'");
    }
  }
  if (!have_step) throw ConfigError("fault spec '" + spec + "': missing step=<N>");
  return f;
}

namespace detail {

// The closed schema: one setter per (section, key). Repeatable keys opt in
// explicitly; everything else may appear at most once.
struct ConfigSchema {
  using Setter = std::function<void(RunSpec&, const std::string&)>;
  std::map<std::string, std::map<std::string, Setter>> sections;
  std::set<std::string> repeatable;  // "section.key"

  static const ConfigSchema& instance() {
    static const ConfigSchema s = make();
    return s;
  }

 private:
  static ConfigSchema make() {
    ConfigSchema s;
    auto& cluster = s.sections["cluster"];
    cluster["nn_workers"] = [](RunSpec& r, const std::string& v) {
      r.train.nn_workers = parse_u32(v);
    };
    cluster["embedding_workers"] = [](RunSpec& r, const std::string& v) {
      r.train.embedding_workers = parse_u32(v);
    };
    cluster["ps_shards"] = [](RunSpec& r, const std::string& v) {
      r.train.ps_shards = parse_u32(v);
    };
    cluster["ps_capacity"] = [](RunSpec& r, const std::string& v) {
      r.train.ps_capacity = parse_u32(v);
    };
    cluster["pull_concurrency"] = [](RunSpec& r, const std::string& v) {
      r.train.pull_concurrency = parse_u32(v);
    };
    cluster["sim_fetch_latency_ms"] = [](RunSpec& r, const std::string& v) {
      r.train.sim_fetch_latency_ms = parse_u32(v);
    };
    cluster["allreduce_timeout_ms"] = [](RunSpec& r, const std::string& v) {
      r.train.allreduce_timeout_ms = parse_u32(v);
    };

    auto& model = s.sections["model"];
    model["embedding_dim"] = [](RunSpec& r, const std::string& v) {
      r.train.embedding_dim = parse_u32(v);
      r.data.latent_dim = r.train.embedding_dim;
    };
    model["hidden"] = [](RunSpec& r, const std::string& v) {
      r.train.hidden.clear();
      if (trim(v) == "none") return;  // logistic regression on the joined input
      for (uint64_t d : parse_u64_list(v)) r.train.hidden.push_back(static_cast<size_t>(d));
    };
    model["embedding_optimizer"] = [](RunSpec& r, const std::string& v) {
      r.train.embedding_optimizer = parse_emb_optimizer(v);
    };
    model["compress_values"] = [](RunSpec& r, const std::string& v) {
      r.train.compress_values = parse_bool(v);
    };

    auto& data = s.sections["data"];
    data["samples"] = [](RunSpec& r, const std::string& v) {
      r.data.sample_count = parse_u64(v);
    };
    data["vocab"] = [](RunSpec& r, const std::string& v) {
      r.data.vocab_per_group = parse_u64_list(v);
    };
    data["min_ids_per_group"] = [](RunSpec& r, const std::string& v) {
      r.data.min_ids_per_group = parse_u32(v);
    };
    data["max_ids_per_group"] = [](RunSpec& r, const std::string& v) {
      r.data.max_ids_per_group = parse_u32(v);
    };
    data["zipf_s"] = [](RunSpec& r, const std::string& v) { r.data.zipf_s = parse_f64(v); };
    data["non_id_dim"] = [](RunSpec& r, const std::string& v) {
      r.data.non_id_dim = parse_u32(v);
    };
    data["teacher_seed"] = [](RunSpec& r, const std::string& v) {
      r.data.teacher_seed = parse_u64(v);
    };
    data["teacher_scale"] = [](RunSpec& r, const std::string& v) {
      r.data.teacher_scale = parse_f64(v);
    };
    data["label_noise"] = [](RunSpec& r, const std::string& v) {
      r.data.label_noise = parse_f64(v);
    };
    data["seed"] = [](RunSpec& r, const std::string& v) { r.data_seed = parse_u64(v); };
    data["holdout_fraction"] = [](RunSpec& r, const std::string& v) {
      r.train.holdout_fraction = parse_f64(v);
    };
    data["eval_max_samples"] = [](RunSpec& r, const std::string& v) {
      r.train.eval_max_samples = static_cast<size_t>(parse_u64(v));
    };

    auto& train = s.sections["train"];
    train["mode"] = [](RunSpec& r, const std::string& v) { r.train.mode = parse_train_mode(v); };
    train["total_steps"] = [](RunSpec& r, const std::string& v) {
      r.train.total_steps = parse_u64(v);
    };
    train["batch_size"] = [](RunSpec& r, const std::string& v) {
      r.train.batch_size = parse_u32(v);
    };
    train["dense_lr"] = [](RunSpec& r, const std::string& v) {
      r.train.dense_lr = static_cast<float>(parse_f64(v));
    };
    train["embedding_lr"] = [](RunSpec& r, const std::string& v) {
      r.train.embedding_lr = static_cast<float>(parse_f64(v));
    };
    train["staleness_cap"] = [](RunSpec& r, const std::string& v) {
      r.train.staleness_cap = static_cast<int32_t>(parse_u32(v));
    };
    train["init_seed"] = [](RunSpec& r, const std::string& v) {
      r.train.init_seed = parse_u64(v);
    };
    train["eval_every"] = [](RunSpec& r, const std::string& v) {
      r.train.eval_every = parse_u32(v);
    };
    train["checkpoint_every"] = [](RunSpec& r, const std::string& v) {
      r.train.checkpoint_every = parse_u32(v);
    };
    train["average_every"] = [](RunSpec& r, const std::string& v) {
      r.train.average_every = parse_u32(v);
    };
    train["initial_checkpoint"] = [](RunSpec& r, const std::string& v) {
      r.train.initial_checkpoint = parse_bool(v);
    };

    auto& faults = s.sections["faults"];
    faults["drill"] = [](RunSpec& r, const std::string& v) {
      r.train.faults.push_back(parse_fault_spec(v));
    };
    s.repeatable.insert("faults.drill");
    return s;
  }
};

[[noreturn]] inline void config_fail(const std::string& origin, size_t line,
                                     const std::string& why) {
  throw ConfigError(origin + ":" + std::to_string(line) + ": " + why);
}

}  // namespace detail

// Parses sectioned key=value text into a RunSpec over the defaults. Every
// diagnostic carries origin:line. Validation of cross-field constraints is
// the caller's job (RunSpec::validate), so overrides can be applied first.
inline RunSpec parse_run_spec(const std::string& text, const std::string& origin = "<config>") {
  const detail::ConfigSchema& schema = detail::ConfigSchema::instance();
  RunSpec spec;
  std::set<std::string> seen;
  std::string section;
  std::istringstream is(text);
  std::string raw;
  size_t line = 0;
  while (std::getline(is, raw)) {
    ++line;
    size_t cut = raw.find_first_of("#;");
    std::string s = detail::trim(cut == std::string::npos ? raw : raw.substr(0, cut));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') detail::config_fail(origin, line, "unterminated section header");
      section = detail::trim(s.substr(1, s.size() - 2));
      if (!schema.sections.count(section)) {
        detail::config_fail(origin, line, "unknown section [" + section + "]");
      }
      continue;
    }
    size_t eq = s.find('=');
    if (eq == std::string::npos) {
      detail::config_fail(origin, line, "expected key = value, got '" + s + "'");
    }
    if (section.empty()) detail::config_fail(origin, line, "key before any [section]");
    std::string key = detail::trim(s.substr(0, eq));
    std::string value = detail::trim(s.substr(eq + 1));
    auto& keys = schema.sections.at(section);
    auto it = keys.find(key);
    if (it == keys.end()) {
      detail::config_fail(origin, line, "unknown key '" + key + "' in [" + section + "]");
    }
    std::string full = section + "." + key;
    if (!schema.repeatable.count(full) && !seen.insert(full).second) {
      detail::config_fail(origin, line, "duplicate key '" + key + "' in [" + section + "]");
    }
    try {
      it->second(spec, value);
    } catch (const ConfigError& e) {
      detail::config_fail(origin, line, e.what());
    }
  }
  return spec;
}

// Applies one --set override of the form section.key=value.
inline void apply_override(RunSpec& spec, const std::string& assignment) {
  const detail::ConfigSchema& schema = detail::ConfigSchema::instance();
  size_t eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("override '" + assignment + "': expected section.key=value");
  }
  std::string path = detail::trim(assignment.substr(0, eq));
  std::string value = detail::trim(assignment.substr(eq + 1));
  size_t dot = path.find('.');
  if (dot == std::string::npos) {
    throw ConfigError("override '" + assignment + "': expected section.key=value");
  }
  std::string section = path.substr(0, dot);
  std::string key = path.substr(dot + 1);
  auto sit = schema.sections.find(section);
  if (sit == schema.sections.end()) {
    throw ConfigError("override '" + assignment + "': unknown section '" + section + "'");
  }
  auto kit = sit->second.find(key);
  if (kit == sit->second.end()) {
    throw ConfigError("override '" + assignment + "': unknown key '" + key + "' in [" +
                      section + "]");
  }
  try {
    kit->second(spec, value);
  } catch (const ConfigError& e) {
    throw ConfigError("override '" + assignment + "': " + e.what());
  }
}

inline RunSpec load_run_spec_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  return parse_run_spec(buf.str(), path);
}

}  // namespace hybridps
