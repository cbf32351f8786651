#pragma once

/**
 * Core domain types: tokens, vocabularies, reasoning states, trajectories.
 *
 * A task vocabulary has a fixed layout derived from (modulus, filler_count):
 *
 *   [0, m)              value tokens  (content)   - appear in queries and thoughts
 *   [m, m+f)            filler tokens (filler)    - thoughts only, semantics-free
 *   m+f                 end-of-thought            - exactly one per vocabulary
 *   [m+f+1, m+f+1+m)    answer tokens (answer)    - contiguous block
 *   m+f+1+m             placeholder               - latent-label slot value
 *   [m+f+2+m, ...)      op tokens "+d" (content)  - queries only, d in [1, m)
 *
 * Thought positions may only emit value tokens, fillers or end-of-thought;
 * everything else is masked to -inf by the model backends.
 */

#include "flowcot/numerics.hpp"

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowcot {

using TokenId = int32_t;

enum class TokenRole { content, filler, end_of_thought, answer, placeholder };

inline const char* role_name(TokenRole r) {
  switch (r) {
    case TokenRole::content: return "content";
    case TokenRole::filler: return "filler";
    case TokenRole::end_of_thought: return "end_of_thought";
    case TokenRole::answer: return "answer";
    case TokenRole::placeholder: return "placeholder";
  }
  return "?";
}

/// Task vocabulary: layout plus role queries. Value type, cheap to copy.
struct Vocab {
  int modulus = 0;
  int filler_count = 0;

  static Vocab make(int modulus, int filler_count) {
    if (modulus < 2) throw std::invalid_argument("Vocab: modulus must be >= 2");
    if (filler_count < 0) throw std::invalid_argument("Vocab: filler_count must be >= 0");
    return Vocab{modulus, filler_count};
  }

  int size() const { return 3 * modulus + filler_count + 1; }

  TokenId value_token(int v) const { return check_mod(v); }
  TokenId filler_token(int j) const {
    if (j < 0 || j >= filler_count) throw std::invalid_argument("Vocab: filler index out of range");
    return modulus + j;
  }
  TokenId eot() const { return modulus + filler_count; }
  TokenId answer_token(int v) const { return modulus + filler_count + 1 + check_mod(v); }
  TokenId placeholder() const { return 2 * modulus + filler_count + 1; }
  TokenId op_token(int d) const {
    if (d < 1 || d >= modulus) throw std::invalid_argument("Vocab: op delta out of range");
    return 2 * modulus + filler_count + 2 + (d - 1);
  }

  TokenId answer_begin() const { return modulus + filler_count + 1; }
  TokenId answer_end() const { return answer_begin() + modulus; }  // exclusive

  TokenRole role(TokenId t) const {
    check_token(t);
    if (t < modulus) return TokenRole::content;
    if (t < modulus + filler_count) return TokenRole::filler;
    if (t == eot()) return TokenRole::end_of_thought;
    if (t < answer_end()) return TokenRole::answer;
    if (t == placeholder()) return TokenRole::placeholder;
    return TokenRole::content;  // op tokens
  }

  bool is_answer(TokenId t) const { return t >= answer_begin() && t < answer_end(); }
  int answer_value(TokenId t) const {
    if (!is_answer(t)) throw std::invalid_argument("Vocab: not an answer token");
    return t - answer_begin();
  }
  bool is_value(TokenId t) const { return t >= 0 && t < modulus; }
  bool is_filler(TokenId t) const { return t >= modulus && t < modulus + filler_count; }
  bool is_op(TokenId t) const { return t >= 2 * modulus + filler_count + 2 && t < size(); }
  int op_delta(TokenId t) const {
    if (!is_op(t)) throw std::invalid_argument("Vocab: not an op token");
    return t - (2 * modulus + filler_count + 2) + 1;
  }

  /// Tokens a policy may emit at a thought position.
  bool thought_emittable(TokenId t) const {
    const TokenRole r = role(t);
    return (r == TokenRole::content && !is_op(t)) || r == TokenRole::filler ||
           r == TokenRole::end_of_thought;
  }
  int thought_emittable_count() const { return modulus + filler_count + 1; }

  std::string token_name(TokenId t) const {
    check_token(t);
    if (is_value(t)) return "v" + std::to_string(t);
    if (is_filler(t)) return "f" + std::to_string(t - modulus);
    if (t == eot()) return "<eot>";
    if (is_answer(t)) return "a" + std::to_string(answer_value(t));
    if (t == placeholder()) return "<ph>";
    return "+" + std::to_string(op_delta(t));
  }

  bool operator==(const Vocab&) const = default;

 private:
  int check_mod(int v) const {
    if (v < 0 || v >= modulus) throw std::invalid_argument("Vocab: value out of range");
    return v;
  }
  void check_token(TokenId t) const {
    if (t < 0 || t >= size()) throw std::invalid_argument("Vocab: token id out of range");
  }
};

/// A reasoning prefix: query tokens plus a partial thought. The optional
/// label slot sits structurally between query and thought and is only read
/// by label-aware (posterior) model views.
struct State {
  std::vector<TokenId> query;
  std::vector<TokenId> thought;
  std::optional<TokenId> label_slot;

  int step_index() const { return static_cast<int>(thought.size()); }

  bool terminal(const Vocab& v) const {
    return !thought.empty() && thought.back() == v.eot();
  }

  State with_label(TokenId label) const {
    State s = *this;
    s.label_slot = label;
    return s;
  }
  State without_label() const {
    State s = *this;
    s.label_slot.reset();
    return s;
  }
};

/// Throws std::invalid_argument when the state breaks a structural invariant.
inline void validate_state(const Vocab& v, const State& s) {
  for (size_t i = 0; i < s.thought.size(); ++i) {
    const TokenId t = s.thought[i];
    if (t < 0 || t >= v.size())
      throw std::invalid_argument("State: thought token out of vocabulary");
    if (v.role(t) == TokenRole::answer)
      throw std::invalid_argument("State: answer-role token inside thought");
    if (t == v.eot() && i + 1 != s.thought.size())
      throw std::invalid_argument("State: end-of-thought not in trailing position");
  }
  for (const TokenId t : s.query) {
    if (t < 0 || t >= v.size())
      throw std::invalid_argument("State: query token out of vocabulary");
  }
}

/// One completed rollout. log_probs are per-step log pi(s_t | I_{t-1}) under
/// the policy that generated the thought; terminated is false when the
/// horizon cut the thought before end-of-thought.
struct Trajectory {
  State state;
  TokenId answer = -1;
  std::vector<double> log_probs;
  bool terminated = true;
  uint64_t instance_id = 0;
};

inline void validate_trajectory(const Vocab& v, const Trajectory& t) {
  validate_state(v, t.state);
  if (t.log_probs.size() != t.state.thought.size())
    throw std::invalid_argument("Trajectory: log_probs length != thought length");
  for (const double lp : t.log_probs) {
    if (!std::isfinite(lp) || lp > 0.0)
      throw std::invalid_argument("Trajectory: log_prob must be finite and <= 0");
  }
  if (t.terminated && !t.state.terminal(v))
    throw std::invalid_argument("Trajectory: terminated flag set but no trailing end-of-thought");
  if (!v.is_answer(t.answer))
    throw std::invalid_argument("Trajectory: answer must be an answer-role token");
}

/// Thought length as reported everywhere: reasoning tokens only, excluding
/// the trailing end-of-thought marker (and of course query and answer).
inline int thought_length(const Vocab& v, const State& s) {
  int n = s.step_index();
  if (s.terminal(v)) --n;
  return n;
}

}  // namespace flowcot
