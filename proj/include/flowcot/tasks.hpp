#pragma once

/**
 * Synthetic modular-arithmetic reasoning tasks.
 *
 * A task instance is a chain "start v, +d1, +d2, ..." encoded as query
 * tokens. The minimal correct thought writes the running value after each
 * op and closes with end-of-thought; the answer is the final value mod m.
 * Task semantics are carried entirely by value tokens: the answer of any
 * thought is the value of its last value token (the start value if none),
 * so filler tokens never change the outcome of a chain.
 *
 * Demonstration corpora insert filler tokens in front of every gold token
 * with geometric rate rho, giving expected length |gold| / (1 - rho) - the
 * redundant-CoT habit the prior policy is fitted on.
 */

#include "flowcot/core.hpp"
#include "flowcot/rng.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowcot::tasks {

struct TaskInstance {
  uint64_t id = 0;
  std::vector<TokenId> query;
  TokenId gold_answer = -1;
  std::vector<TokenId> gold_chain;  // value tokens then end-of-thought
};

struct TaskFamilyConfig {
  int modulus = 5;
  int filler_count = 3;
  int vocab_size = 0;  // 0 = derived; otherwise validated against the layout
  int chain_ops_min = 1;
  int chain_ops_max = 3;
  double filler_rate = 0.5;  // rho, used by synthesize_corpus
  uint64_t seed = 0;

  Vocab vocab() const { return Vocab::make(modulus, filler_count); }

  void validate() const {
    if (modulus < 2) throw std::invalid_argument("TaskFamilyConfig: modulus must be >= 2");
    if (filler_count < 0) throw std::invalid_argument("TaskFamilyConfig: filler_count must be >= 0");
    if (chain_ops_min < 1 || chain_ops_max < chain_ops_min)
      throw std::invalid_argument("TaskFamilyConfig: empty chain length range");
    if (filler_rate < 0.0 || filler_rate >= 1.0)
      throw std::invalid_argument("TaskFamilyConfig: filler rate must be in [0, 1)");
    const int required = 3 * modulus + filler_count + 1;
    if (vocab_size != 0 && vocab_size < required)
      throw std::invalid_argument("TaskFamilyConfig: vocab_size too small; need at least " +
                                  std::to_string(required) + " tokens");
  }
};

/// Answer produced by executing a thought's value tokens; fillers and
/// end-of-thought are ignored. No value token -> the query's start value.
inline TokenId execute_thought(const Vocab& v, const TaskInstance& inst,
                               std::span<const TokenId> thought) {
  int value = inst.query.empty() ? 0 : inst.query.front();
  for (const TokenId t : thought) {
    if (v.is_value(t)) value = t;
  }
  return v.answer_token(value);
}

inline uint64_t instance_hash(const TaskFamilyConfig& cfg, std::span<const TokenId> query) {
  uint64_t h = kFnvOffset;
  h = fnv1a_u64(static_cast<uint64_t>(cfg.modulus), h);
  h = fnv1a_u64(static_cast<uint64_t>(cfg.filler_count), h);
  for (const TokenId t : query) h = fnv1a_u64(static_cast<uint64_t>(t), h);
  return h;
}

/// Build the instance for an explicit chain "start v, +d1, +d2, ...".
inline TaskInstance make_instance(const TaskFamilyConfig& cfg, int start,
                                  std::span<const int> deltas) {
  cfg.validate();
  const Vocab v = cfg.vocab();
  TaskInstance inst;
  inst.query.push_back(v.value_token(start));
  int value = start;
  for (const int d : deltas) {
    inst.query.push_back(v.op_token(d));
    value = (value + d) % cfg.modulus;
    inst.gold_chain.push_back(v.value_token(value));
  }
  inst.gold_chain.push_back(v.eot());
  inst.gold_answer = v.answer_token(value);
  inst.id = instance_hash(cfg, inst.query);
  return inst;
}

/// Deterministic under (config, seed); instance i is drawn from the split
/// stream (seed, "gen", i), so a longer generation extends a shorter one.
inline std::vector<TaskInstance> generate(const TaskFamilyConfig& cfg, int n) {
  cfg.validate();
  if (n < 1) throw std::invalid_argument("tasks::generate: n must be >= 1");
  const Rng root = Rng(cfg.seed).split("gen");
  std::vector<TaskInstance> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    Rng rng = root.split(static_cast<uint64_t>(i));
    const int start = rng.next_int(cfg.modulus);
    const int ops = cfg.chain_ops_min + rng.next_int(cfg.chain_ops_max - cfg.chain_ops_min + 1);
    std::vector<int> deltas;
    for (int j = 0; j < ops; ++j) deltas.push_back(1 + rng.next_int(cfg.modulus - 1));
    out.push_back(make_instance(cfg, start, deltas));
  }
  return out;
}

/// Gold chains with fillers inserted at geometric rate rho in front of every
/// gold token. Answers are always gold. Per-step log_probs record the
/// synthesis distribution (filler: log(rho/f), gold token: log(1 - rho)).
inline std::vector<Trajectory> synthesize_corpus(const Vocab& v,
                                                 const std::vector<TaskInstance>& instances,
                                                 double rho, uint64_t seed) {
  if (rho < 0.0 || rho >= 1.0)
    throw std::invalid_argument("synthesize_corpus: rho must be in [0, 1)");
  if (rho > 0.0 && v.filler_count == 0)
    throw std::invalid_argument("synthesize_corpus: rho > 0 requires filler tokens");
  const Rng root = Rng(seed).split("corpus");
  std::vector<Trajectory> out;
  out.reserve(instances.size());
  const double lp_fill = rho > 0.0 ? std::log(rho / v.filler_count) : kNegInf;
  const double lp_gold = std::log(1.0 - rho);
  for (const TaskInstance& inst : instances) {
    Rng rng = root.split(inst.id);
    Trajectory traj;
    traj.instance_id = inst.id;
    traj.state.query = inst.query;
    for (const TokenId g : inst.gold_chain) {
      while (rho > 0.0 && rng.next_double() < rho) {
        traj.state.thought.push_back(v.filler_token(rng.next_int(v.filler_count)));
        traj.log_probs.push_back(lp_fill);
      }
      traj.state.thought.push_back(g);
      traj.log_probs.push_back(lp_gold);
    }
    traj.answer = inst.gold_answer;
    traj.terminated = true;
    out.push_back(std::move(traj));
  }
  return out;
}

/// True iff answer equals the instance's gold answer. Non-answer-role
/// arguments are contract violations, not "false".
inline bool verify_answer(const Vocab& v, const TaskInstance& inst, TokenId answer) {
  if (!v.is_answer(answer))
    throw std::invalid_argument("verify_answer: token is not answer-role");
  return answer == inst.gold_answer;
}

}  // namespace flowcot::tasks
