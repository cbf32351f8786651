#pragma once

/**
 * File formats.
 *
 *   checkpoint   single JSON document {version, backend, vocab,
 *                order_or_features, logits}; logits are flat arrays in
 *                row-major (context, token) order. Round-trips are
 *                value-exact for finite floats; -inf entries (structurally
 *                masked targets) serialize as null.
 *   dataset      JSON Lines, one instance per line {id, query, gold_answer,
 *                gold_chain}, stable field order.
 *   corpus       JSON Lines of trajectories.
 *   profiles     JSON Lines {id, tokens, v, D, cumulative, roles}.
 *
 * All text, no endianness anywhere. nlohmann's shortest-round-trip double
 * output keeps reruns byte-identical.
 */

#include "flowcot/core.hpp"
#include "flowcot/flow.hpp"
#include "flowcot/policy.hpp"
#include "flowcot/tasks.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowcot::io {

using json = nlohmann::ordered_json;

inline constexpr int kCheckpointVersion = 1;

// ---------------------------------------------------------------------------
// Small helpers
// ---------------------------------------------------------------------------

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << content;
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

inline json logits_to_json(std::span<const double> xs) {
  json arr = json::array();
  for (const double x : xs) {
    if (std::isfinite(x)) arr.push_back(x);
    else arr.push_back(nullptr);  // -inf: structurally masked target
  }
  return arr;
}

inline std::vector<double> logits_from_json(const json& arr) {
  std::vector<double> out;
  out.reserve(arr.size());
  for (const auto& x : arr) out.push_back(x.is_null() ? kNegInf : x.get<double>());
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline json checkpoint_json(const TabularPolicy& p) {
  json j;
  j["version"] = kCheckpointVersion;
  j["backend"] = "tabular";
  j["vocab"] = {{"modulus", p.vocab().modulus}, {"filler_count", p.vocab().filler_count}};
  j["order_or_features"] = {{"order", p.order()}, {"label_aware", p.label_aware()}};
  j["logits"] = {{"transitions", logits_to_json(p.transitions())},
                 {"answers", logits_to_json(p.answers())}};
  return j;
}

inline json checkpoint_json(const LinearSoftmaxPolicy& p) {
  const FeatureConfig& fc = p.feature_config();
  json j;
  j["version"] = kCheckpointVersion;
  j["backend"] = "linear";
  j["vocab"] = {{"modulus", p.vocab().modulus}, {"filler_count", p.vocab().filler_count}};
  j["order_or_features"] = {{"order", fc.order},
                            {"step_buckets", fc.step_buckets},
                            {"query_bag", fc.query_bag},
                            {"label_features", fc.label_features}};
  j["logits"] = {{"weights", logits_to_json(p.params())}};
  return j;
}

inline json checkpoint_json(const ParametricPolicy& p) {
  if (const auto* t = dynamic_cast<const TabularPolicy*>(&p)) return checkpoint_json(*t);
  if (const auto* l = dynamic_cast<const LinearSoftmaxPolicy*>(&p)) return checkpoint_json(*l);
  throw std::invalid_argument("checkpoint_json: unknown backend");
}

inline void save_checkpoint(const ParametricPolicy& p, const std::string& path) {
  write_file(path, checkpoint_json(p).dump() + "\n");
}

inline std::unique_ptr<ParametricPolicy> checkpoint_from_json(const json& j) {
  if (!j.contains("version") || j["version"].get<int>() != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version");
  const Vocab vocab = Vocab::make(j["vocab"]["modulus"].get<int>(),
                                  j["vocab"]["filler_count"].get<int>());
  const std::string backend = j["backend"].get<std::string>();
  const json& of = j["order_or_features"];
  if (backend == "tabular") {
    auto p = std::make_unique<TabularPolicy>(vocab, of["order"].get<int>(),
                                             of["label_aware"].get<bool>());
    const std::vector<double> trans = logits_from_json(j["logits"]["transitions"]);
    const std::vector<double> ans = logits_from_json(j["logits"]["answers"]);
    if (trans.size() != p->transitions().size() || ans.size() != p->answers().size())
      throw std::runtime_error("checkpoint: logit array size mismatch");
    std::copy(trans.begin(), trans.end(), p->mutable_transitions().begin());
    std::copy(ans.begin(), ans.end(), p->mutable_answers().begin());
    return p;
  }
  if (backend == "linear") {
    FeatureConfig fc;
    fc.order = of["order"].get<int>();
    fc.step_buckets = of["step_buckets"].get<int>();
    fc.query_bag = of["query_bag"].get<bool>();
    fc.label_features = of["label_features"].get<bool>();
    auto p = std::make_unique<LinearSoftmaxPolicy>(vocab, fc);
    const std::vector<double> w = logits_from_json(j["logits"]["weights"]);
    if (w.size() != p->param_count()) throw std::runtime_error("checkpoint: weight size mismatch");
    p->set_params(w);
    return p;
  }
  throw std::runtime_error("checkpoint: unknown backend '" + backend + "'");
}

inline std::unique_ptr<ParametricPolicy> load_checkpoint(const std::string& path) {
  return checkpoint_from_json(json::parse(read_file(path)));
}

// ---------------------------------------------------------------------------
// Datasets and corpora
// ---------------------------------------------------------------------------

inline json instance_json(const tasks::TaskInstance& inst) {
  return json{{"id", inst.id},
              {"query", inst.query},
              {"gold_answer", inst.gold_answer},
              {"gold_chain", inst.gold_chain}};
}

inline tasks::TaskInstance instance_from_json(const json& j) {
  tasks::TaskInstance inst;
  inst.id = j["id"].get<uint64_t>();
  inst.query = j["query"].get<std::vector<TokenId>>();
  inst.gold_answer = j["gold_answer"].get<TokenId>();
  inst.gold_chain = j["gold_chain"].get<std::vector<TokenId>>();
  return inst;
}

inline void save_instances(const std::vector<tasks::TaskInstance>& instances,
                           const std::string& path) {
  std::string out;
  for (const auto& inst : instances) out += instance_json(inst).dump() + "\n";
  write_file(path, out);
}

inline std::vector<tasks::TaskInstance> load_instances(const std::string& path) {
  std::vector<tasks::TaskInstance> out;
  for (const std::string& line : read_lines(path)) out.push_back(instance_from_json(json::parse(line)));
  return out;
}

inline json trajectory_json(const Trajectory& t) {
  return json{{"instance_id", t.instance_id},
              {"query", t.state.query},
              {"thought", t.state.thought},
              {"answer", t.answer},
              {"log_probs", t.log_probs},
              {"terminated", t.terminated}};
}

inline Trajectory trajectory_from_json(const json& j) {
  Trajectory t;
  t.instance_id = j["instance_id"].get<uint64_t>();
  t.state.query = j["query"].get<std::vector<TokenId>>();
  t.state.thought = j["thought"].get<std::vector<TokenId>>();
  t.answer = j["answer"].get<TokenId>();
  t.log_probs = j["log_probs"].get<std::vector<double>>();
  t.terminated = j["terminated"].get<bool>();
  return t;
}

inline void save_corpus(const std::vector<Trajectory>& corpus, const std::string& path) {
  std::string out;
  for (const auto& t : corpus) out += trajectory_json(t).dump() + "\n";
  write_file(path, out);
}

inline std::vector<Trajectory> load_corpus(const std::string& path) {
  std::vector<Trajectory> out;
  for (const std::string& line : read_lines(path)) out.push_back(trajectory_from_json(json::parse(line)));
  return out;
}

// ---------------------------------------------------------------------------
// Velocity profile dump
// ---------------------------------------------------------------------------

inline json profile_json(const Vocab& vocab, uint64_t id, const Trajectory& traj,
                         const flow::VelocityProfile& p) {
  json roles = json::array();
  for (const TokenId t : traj.state.thought) roles.push_back(role_name(vocab.role(t)));
  return json{{"id", id},
              {"tokens", traj.state.thought},
              {"v", p.v},
              {"D", p.difficulty},
              {"cumulative", p.cumulative},
              {"roles", roles}};
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

inline std::string csv_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", x);
  return buf;
}

}  // namespace flowcot::io
