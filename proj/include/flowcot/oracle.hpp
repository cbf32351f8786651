#pragma once

/**
 * Exact enumeration oracle.
 *
 * Sums over every thought continuation (to end-of-thought, or force-cut at
 * the horizon) to produce exact marginal answer likelihoods, exact Bayes
 * posteriors over the next token, expected/max velocities, and the exact RL
 * objective with its gradient computed along two independent routes.
 *
 * Marginals are memoized per evaluator on (state signature, steps left),
 * which is sound because the signature is a sufficient statistic of the
 * model's present and future behavior. Zero-probability conditioning is an
 * error here, never a clamp: the oracle must not silently lie.
 */

#include "flowcot/core.hpp"
#include "flowcot/numerics.hpp"
#include "flowcot/policy.hpp"
#include "flowcot/rng.hpp"
#include "flowcot/tasks.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace flowcot::oracle {

struct EnumerationBudget {
  uint64_t max_trajectories = 1'000'000;
  int t_max = 6;
};

namespace detail {

struct KeyHash {
  size_t operator()(const std::pair<uint64_t, int>& k) const {
    return static_cast<size_t>(mix64(k.first ^ (static_cast<uint64_t>(k.second) << 48)));
  }
};

/// Throws when branching^steps exceeds the trajectory budget.
inline void check_budget(const Vocab& v, int steps_left, const EnumerationBudget& b) {
  if (steps_left <= 0) return;
  const double need = std::pow(static_cast<double>(v.thought_emittable_count()),
                               static_cast<double>(steps_left));
  if (need > static_cast<double>(b.max_trajectories)) {
    throw std::runtime_error("oracle: enumeration budget exceeded; need about " +
                             std::to_string(need) + " trajectories, budget " +
                             std::to_string(b.max_trajectories));
  }
}

}  // namespace detail

/// Memoized exact marginals p(y | state) for every answer y at once.
class Evaluator {
 public:
  Evaluator(const CondSeqModel& model, EnumerationBudget budget)
      : model_(model), budget_(budget) {}

  /// Exact log p(y | state) for all answer values; steps left derive from
  /// budget.t_max - state.step_index (clamped at 0 = forced answering).
  std::vector<double> marginal_logprobs(const State& state) {
    State s = state;
    const int steps_left = std::max(0, budget_.t_max - s.step_index());
    detail::check_budget(model_.vocab(), s.terminal(model_.vocab()) ? 0 : steps_left, budget_);
    return eval(s, steps_left);
  }

  double marginal_logprob(const State& state, int answer_value) {
    return marginal_logprobs(state)[answer_value];
  }

  const EnumerationBudget& budget() const { return budget_; }
  const CondSeqModel& model() const { return model_; }

 private:
  std::vector<double> eval(State& s, int steps_left) {
    const Vocab& v = model_.vocab();
    if (s.terminal(v) || steps_left == 0) return model_.answer_logprobs(s);
    const std::pair<uint64_t, int> key{model_.state_signature(s), steps_left};
    if (const auto it = memo_.find(key); it != memo_.end()) return it->second;

    const std::vector<double> lp = model_.next_token_logprobs(s);
    std::vector<std::vector<double>> terms(v.modulus);
    for (TokenId t = 0; t < v.size(); ++t) {
      if (!std::isfinite(lp[t])) continue;
      s.thought.push_back(t);
      const std::vector<double> child = eval(s, steps_left - 1);
      s.thought.pop_back();
      for (int y = 0; y < v.modulus; ++y) terms[y].push_back(lp[t] + child[y]);
    }
    std::vector<double> out(v.modulus, kNegInf);
    for (int y = 0; y < v.modulus; ++y) out[y] = log_sum_exp(terms[y]);
    memo_.emplace(key, out);
    return out;
  }

  const CondSeqModel& model_;
  EnumerationBudget budget_;
  std::unordered_map<std::pair<uint64_t, int>, std::vector<double>, detail::KeyHash> memo_;
};

/// Exact marginal log p(answer | state) by exhaustive continuation summation.
inline double marginal_answer_logprob(const CondSeqModel& model, const State& state,
                                      TokenId answer, const EnumerationBudget& budget) {
  const Vocab& v = model.vocab();
  validate_state(v, state);
  if (!v.is_answer(answer))
    throw std::invalid_argument("marginal_answer_logprob: token is not answer-role");
  Evaluator ev(model, budget);
  return ev.marginal_logprob(state, v.answer_value(answer));
}

struct McMarginal {
  double log_mean = kNegInf;
  double mean = 0.0;
  double std_error = 0.0;  // of the mean probability
};

/// Monte-Carlo cross-check of the marginal: sample continuations under the
/// model and average the terminal answer probability (the probability-
/// weighted form; indicator counting is its own MC limit).
inline McMarginal mc_marginal_answer_logprob(const CondSeqModel& model, const State& state,
                                             TokenId answer, int t_max, int n_samples, Rng rng) {
  const Vocab& v = model.vocab();
  validate_state(v, state);
  const int y = v.answer_value(answer);
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < n_samples; ++i) {
    State s = state;
    while (!s.terminal(v) && s.step_index() < t_max) {
      const std::vector<double> lp = model.next_token_logprobs(s);
      s.thought.push_back(rng.sample_logprobs(lp));
    }
    const double p = std::exp(model.answer_logprobs(s)[y]);
    sum += p;
    sum_sq += p * p;
  }
  McMarginal out;
  out.mean = sum / n_samples;
  const double var = std::max(0.0, sum_sq / n_samples - out.mean * out.mean);
  out.std_error = std::sqrt(var / n_samples);
  out.log_mean = out.mean > 0.0 ? std::log(out.mean) : kNegInf;
  return out;
}

/// Exact Bayes posterior over the next token:
/// log q(s) = log prior(s) + log p(y | state + s) - log p(y | state).
/// Non-emittable tokens carry -inf. Conditioning on an answer whose marginal
/// sits at or below the clamp floor is an error.
inline std::vector<double> exact_bayes_posterior(Evaluator& ev, const State& state,
                                                 TokenId answer) {
  const Vocab& v = ev.model().vocab();
  validate_state(v, state);
  if (!v.is_answer(answer))
    throw std::invalid_argument("exact_bayes_posterior: token is not answer-role");
  const int y = v.answer_value(answer);
  const double parent = ev.marginal_logprob(state, y);
  if (!(parent > kLogFloor))
    throw std::runtime_error("exact_bayes_posterior: zero-probability conditioning (log p(y|I) = " +
                             std::to_string(parent) + ")");
  const std::vector<double> prior = ev.model().next_token_logprobs(state);
  std::vector<double> post(v.size(), kNegInf);
  State s = state;
  for (TokenId t = 0; t < v.size(); ++t) {
    if (!std::isfinite(prior[t])) continue;
    s.thought.push_back(t);
    post[t] = prior[t] + ev.marginal_logprob(s, y) - parent;
    s.thought.pop_back();
  }
  return post;
}

inline std::vector<double> exact_bayes_posterior(const CondSeqModel& model, const State& state,
                                                 TokenId answer, const EnumerationBudget& budget) {
  Evaluator ev(model, budget);
  return exact_bayes_posterior(ev, state, answer);
}

struct ExpectedVelocity {
  double expected = 0.0;  // E_prior[v], summed via the difficulty-delta route
  double kl = 0.0;        // KL(prior || exact posterior), summed independently
};

/// Expected per-step velocity under the prior, plus the KL divergence that
/// must equal its negation. The two fields are computed along different
/// routes so the caller can assert the identity.
inline ExpectedVelocity expected_velocity(const CondSeqModel& model, const State& state,
                                          TokenId answer, const EnumerationBudget& budget) {
  const Vocab& v = model.vocab();
  Evaluator ev(model, budget);
  const int y = v.answer_value(answer);
  const double parent = ev.marginal_logprob(state, y);
  if (!(parent > kLogFloor))
    throw std::runtime_error("expected_velocity: zero-probability conditioning");
  const std::vector<double> prior = model.next_token_logprobs(state);

  ExpectedVelocity out;
  State s = state;
  for (TokenId t = 0; t < v.size(); ++t) {
    if (!std::isfinite(prior[t])) continue;
    const double p = std::exp(prior[t]);
    if (p == 0.0) continue;
    s.thought.push_back(t);
    out.expected += p * (ev.marginal_logprob(s, y) - parent);
    s.thought.pop_back();
  }
  out.kl = kl_divergence(prior, exact_bayes_posterior(ev, state, answer));
  return out;
}

struct MaxVelocity {
  TokenId token = -1;
  double value = 0.0;
};

/// Argmax of v over the candidate set; ties broken by lowest token id.
inline MaxVelocity max_velocity(const CondSeqModel& model, const State& state, TokenId answer,
                                const EnumerationBudget& budget,
                                std::span<const TokenId> candidates) {
  if (candidates.empty()) throw std::invalid_argument("max_velocity: empty candidate set");
  const Vocab& v = model.vocab();
  Evaluator ev(model, budget);
  const int y = v.answer_value(answer);
  const double parent = ev.marginal_logprob(state, y);
  if (!(parent > kLogFloor))
    throw std::runtime_error("max_velocity: zero-probability conditioning");
  MaxVelocity best;
  best.value = kNegInf;
  State s = state;
  for (const TokenId t : candidates) {
    s.thought.push_back(t);
    const double vel = ev.marginal_logprob(s, y) - parent;
    s.thought.pop_back();
    if (vel > best.value) {
      best.value = vel;
      best.token = t;
    }
  }
  return best;
}

// ===========================================================================
// Gradient oracle
// ===========================================================================

/// Memoized exact gradients of log p(y | state) for a parametric policy.
/// Row y of a memo entry is the dense gradient vector for answer value y.
/// Intended for small policies; cost scales with params * states.
class GradEvaluator {
 public:
  GradEvaluator(const ParametricPolicy& policy, EnumerationBudget budget)
      : policy_(policy), budget_(budget), margs_(policy, budget) {}

  /// d/dtheta log p(y | state); steps left derive from budget.t_max.
  std::vector<double> grad_log_marginal(const State& state, int answer_value) {
    State s = state;
    const int steps_left = std::max(0, budget_.t_max - s.step_index());
    detail::check_budget(policy_.vocab(), s.terminal(policy_.vocab()) ? 0 : steps_left, budget_);
    const std::vector<double>& all = eval(s, steps_left);
    const size_t n = policy_.param_count();
    return std::vector<double>(all.begin() + answer_value * n,
                               all.begin() + (answer_value + 1) * n);
  }

  Evaluator& marginals() { return margs_; }

 private:
  // Returns the m x param_count matrix of gradients, flattened row-major.
  const std::vector<double>& eval(State& s, int steps_left) {
    const Vocab& v = policy_.vocab();
    const size_t n = policy_.param_count();
    const std::pair<uint64_t, int> key{policy_.state_signature(s),
                                       (s.terminal(v) || steps_left == 0) ? 0 : steps_left};
    if (const auto it = memo_.find(key); it != memo_.end()) return it->second;

    std::vector<double> out(static_cast<size_t>(v.modulus) * n, 0.0);
    if (s.terminal(v) || steps_left == 0) {
      for (int y = 0; y < v.modulus; ++y)
        policy_.grad_log_answer(s, y, 1.0, {out.data() + y * n, n});
      return memo_.emplace(key, std::move(out)).first->second;
    }

    const std::vector<double> lp = policy_.next_token_logprobs(s);
    const std::vector<double> parent = margs_.marginal_logprobs(s);
    std::vector<double> glp(n);
    for (TokenId t = 0; t < v.size(); ++t) {
      if (!std::isfinite(lp[t])) continue;
      s.thought.push_back(t);
      const std::vector<double> child_m = margs_.marginal_logprobs(s);
      // Copy: recursion below may invalidate references into the memo.
      const std::vector<double> child_g = eval(s, steps_left - 1);
      s.thought.pop_back();
      std::fill(glp.begin(), glp.end(), 0.0);
      policy_.grad_log_next(s, t, 1.0, glp);
      for (int y = 0; y < v.modulus; ++y) {
        const double w = std::exp(lp[t] + child_m[y] - parent[y]);
        if (w == 0.0) continue;
        double* row = out.data() + y * n;
        const double* cg = child_g.data() + y * n;
        for (size_t i = 0; i < n; ++i) row[i] += w * (glp[i] + cg[i]);
      }
    }
    return memo_.emplace(key, std::move(out)).first->second;
  }

  const ParametricPolicy& policy_;
  EnumerationBudget budget_;
  Evaluator margs_;
  std::unordered_map<std::pair<uint64_t, int>, std::vector<double>, detail::KeyHash> memo_;
};

struct ObjectiveGradient {
  double objective = 0.0;             // J = sum_traj pi(traj) * R_global(traj)
  std::vector<double> grad_direct;    // one-pass differentiation of the sum
  std::vector<double> grad_term_a;    // centered REINFORCE part
  std::vector<double> grad_term_b;    // flow part: E[sum_i grad log p(y|I_i)]
};

namespace detail {

template <typename Leaf>
void enumerate_trajectories(const CondSeqModel& model, State& s, int t_max, double logpi,
                            Leaf&& leaf) {
  const Vocab& v = model.vocab();
  if (s.terminal(v) || s.step_index() >= t_max) {
    leaf(s, logpi);
    return;
  }
  const std::vector<double> lp = model.next_token_logprobs(s);
  for (TokenId t = 0; t < v.size(); ++t) {
    if (!std::isfinite(lp[t])) continue;
    s.thought.push_back(t);
    enumerate_trajectories(model, s, t_max, logpi + lp[t], leaf);
    s.thought.pop_back();
  }
}

}  // namespace detail

/// Exact J(theta) = E[R_global] over all trajectories of an instance, with
/// the gradient computed two independent ways:
///   direct:      sum_traj pi * (grad log pi(traj) * R + sum_i grad log p(y|I_i))
///   decomposed:  Term A (advantage-centered REINFORCE) + Term B (flow part)
/// The stop-gradient convention holds throughout: baseline terms
/// log p(y|I_{i-1}) never contribute to any gradient.
inline ObjectiveGradient exact_objective_and_gradient(const ParametricPolicy& policy,
                                                      const tasks::TaskInstance& instance,
                                                      const EnumerationBudget& budget) {
  const Vocab& v = policy.vocab();
  const size_t n = policy.param_count();
  detail::check_budget(v, budget.t_max, budget);

  GradEvaluator gev(policy, budget);
  const int y = v.answer_value(instance.gold_answer);

  State root{instance.query, {}, std::nullopt};
  const double root_marg = gev.marginals().marginal_logprob(root, y);

  std::vector<double> a1(n, 0.0);  // sum pi * grad log pi * R
  std::vector<double> a0(n, 0.0);  // sum pi * grad log pi
  std::vector<double> b(n, 0.0);   // sum pi * sum_i grad log p(y|I_i)
  double j = 0.0;

  std::vector<double> score(n);    // grad log pi of the current prefix
  std::vector<double> flow_sum(n); // sum of grad log p(y|I_i) over prefix steps
  std::vector<std::vector<double>> score_stack, flow_stack;

  State s = root;
  const std::function<void(double)> walk = [&](double logpi) {
    if (s.terminal(v) || s.step_index() >= budget.t_max) {
      const double pi = std::exp(logpi);
      const double r = policy.answer_logprobs(s)[y] - root_marg;
      j += pi * r;
      for (size_t i = 0; i < n; ++i) {
        a1[i] += pi * r * score[i];
        a0[i] += pi * score[i];
        b[i] += pi * flow_sum[i];
      }
      return;
    }
    const std::vector<double> lp = policy.next_token_logprobs(s);
    for (TokenId t = 0; t < v.size(); ++t) {
      if (!std::isfinite(lp[t])) continue;
      score_stack.push_back(score);
      flow_stack.push_back(flow_sum);
      policy.grad_log_next(s, t, 1.0, score);
      s.thought.push_back(t);
      const std::vector<double> g = gev.grad_log_marginal(s, y);
      for (size_t i = 0; i < n; ++i) flow_sum[i] += g[i];
      walk(logpi + lp[t]);
      s.thought.pop_back();
      score = std::move(score_stack.back());
      flow_sum = std::move(flow_stack.back());
      score_stack.pop_back();
      flow_stack.pop_back();
    }
  };
  score.assign(n, 0.0);
  flow_sum.assign(n, 0.0);
  walk(0.0);

  ObjectiveGradient out;
  out.objective = j;
  out.grad_direct.resize(n);
  out.grad_term_a.resize(n);
  out.grad_term_b = b;
  for (size_t i = 0; i < n; ++i) {
    out.grad_direct[i] = a1[i] + b[i];
    out.grad_term_a[i] = a1[i] - j * a0[i];  // centered: E[grad log pi] * E[R] removed
  }
  return out;
}

/// J(theta_live; theta_frozen): the objective value with the stop-gradient
/// baseline terms pinned to a frozen policy. Central finite differences of
/// this function in theta_live, evaluated at theta_live = theta_frozen,
/// equal the stop-gradient-respecting exact gradient above.
inline double objective_frozen_baseline(const CondSeqModel& live, const CondSeqModel& frozen,
                                        const tasks::TaskInstance& instance,
                                        const EnumerationBudget& budget) {
  const Vocab& v = live.vocab();
  detail::check_budget(v, budget.t_max, budget);
  Evaluator ev_live(live, budget);
  Evaluator ev_frozen(frozen, budget);
  const int y = v.answer_value(instance.gold_answer);

  double j = 0.0;
  double pos_sum = 0.0, base_sum = 0.0;
  std::vector<std::pair<double, double>> stack;

  State s{instance.query, {}, std::nullopt};
  const std::function<void(double)> walk = [&](double logpi) {
    if (s.terminal(v) || s.step_index() >= budget.t_max) {
      j += std::exp(logpi) * (pos_sum - base_sum);
      return;
    }
    const std::vector<double> lp = live.next_token_logprobs(s);
    const double base_here = ev_frozen.marginal_logprob(s, y);
    for (TokenId t = 0; t < v.size(); ++t) {
      if (!std::isfinite(lp[t])) continue;
      stack.emplace_back(pos_sum, base_sum);
      s.thought.push_back(t);
      pos_sum += ev_live.marginal_logprob(s, y);
      base_sum += base_here;
      walk(logpi + lp[t]);
      s.thought.pop_back();
      std::tie(pos_sum, base_sum) = stack.back();
      stack.pop_back();
    }
  };
  walk(0.0);
  return j;
}

}  // namespace flowcot::oracle
