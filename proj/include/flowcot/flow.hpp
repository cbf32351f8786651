#pragma once

/**
 * Per-token velocity and posterior approximation modes.
 *
 * Velocity is the log-ratio of a posterior next-token probability to the
 * prior one; equivalently the per-step decrease in answer difficulty
 * D(I) = -log p(y|I). Four posterior sources:
 *
 *   exact_bayes   exact Bayes posterior from the enumeration oracle (needs
 *                 the gold answer; the upper-bound guidance arm)
 *   gold_label    posterior model view with the gold answer in the label slot
 *   random_label  a uniformly drawn wrong answer in the slot
 *   latent_label  the placeholder token in the slot (the model resolves it
 *                 to its own forced-answer belief; see policy.hpp)
 *
 * The prior side of the ratio never reads the label slot.
 */

#include "flowcot/core.hpp"
#include "flowcot/numerics.hpp"
#include "flowcot/oracle.hpp"
#include "flowcot/policy.hpp"
#include "flowcot/rng.hpp"
#include "flowcot/tasks.hpp"

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

namespace flowcot::flow {

enum class PosteriorMode { exact_bayes, gold_label, random_label, latent_label };

inline const char* mode_name(PosteriorMode m) {
  switch (m) {
    case PosteriorMode::exact_bayes: return "exact_bayes";
    case PosteriorMode::gold_label: return "gold_label";
    case PosteriorMode::random_label: return "random_label";
    case PosteriorMode::latent_label: return "latent_label";
  }
  return "?";
}

/// Model views and oracle budget shared by velocity computations. posterior
/// may alias prior (a single label-aware model serving both views).
struct FlowContext {
  const CondSeqModel* prior = nullptr;
  const CondSeqModel* posterior = nullptr;
  oracle::EnumerationBudget budget;

  const CondSeqModel& posterior_model() const {
    if (posterior) return *posterior;
    if (prior) return *prior;
    throw std::invalid_argument("FlowContext: no model configured");
  }
};

/// Draw the label a mode injects. Gold -> gold answer; random -> uniform
/// over the answer block excluding gold; latent -> placeholder; exact_bayes
/// has no label.
inline std::optional<TokenId> resolve_label(const Vocab& v, PosteriorMode mode,
                                            const tasks::TaskInstance& inst, Rng& rng) {
  switch (mode) {
    case PosteriorMode::exact_bayes: return std::nullopt;
    case PosteriorMode::gold_label: return inst.gold_answer;
    case PosteriorMode::latent_label: return v.placeholder();
    case PosteriorMode::random_label: {
      if (v.modulus < 2)
        throw std::invalid_argument("resolve_label: random label needs >= 2 answers");
      const int gold = v.answer_value(inst.gold_answer);
      int r = rng.next_int(v.modulus - 1);
      if (r >= gold) ++r;
      return v.answer_token(r);
    }
  }
  return std::nullopt;
}

/// Augment a state with the label a mode injects (label modes only).
/// Idempotent: the slot is overwritten, not stacked.
inline State posterior_context(const Vocab& v, const State& state, PosteriorMode mode,
                               const tasks::TaskInstance& inst, Rng& rng) {
  if (mode == PosteriorMode::exact_bayes)
    throw std::invalid_argument("posterior_context: exact_bayes is not a label mode");
  return state.with_label(*resolve_label(v, mode, inst, rng));
}

struct Velocity {
  double value = 0.0;
  bool clamped = false;
};

/// v = clamp(lp_post) - clamp(lp_prior); both sides below the floor is a
/// defined-value case: 0 with the warning flag set.
inline Velocity velocity_from_logprobs(double lp_prior, double lp_post) {
  const double a = std::max(lp_prior, kLogFloor);
  const double b = std::max(lp_post, kLogFloor);
  if (lp_prior < kLogFloor && lp_post < kLogFloor) return {0.0, true};
  return {b - a, lp_prior < kLogFloor || lp_post < kLogFloor};
}

/// Mode-induced posterior over the next token. For label modes the prior
/// state is augmented with the resolved label; for exact_bayes the oracle
/// posterior is computed on the label-free view.
inline std::vector<double> posterior_logprobs(const FlowContext& ctx, oracle::Evaluator& ev,
                                              const State& state, PosteriorMode mode,
                                              const tasks::TaskInstance& inst,
                                              std::optional<TokenId> resolved_label) {
  if (mode == PosteriorMode::exact_bayes) {
    return oracle::exact_bayes_posterior(ev, state.without_label(), inst.gold_answer);
  }
  if (!resolved_label)
    throw std::invalid_argument("posterior_logprobs: label mode requires a resolved label");
  return ctx.posterior_model().next_token_logprobs(state.with_label(*resolved_label));
}

/// Per-token velocity. In exact_bayes mode this is the difficulty delta
/// log p(y|I+s) - log p(y|I) (Bayes-equivalently the posterior/prior ratio);
/// in label modes it is the clamped log-ratio of the two model views.
inline Velocity velocity(const FlowContext& ctx, oracle::Evaluator& ev, const State& state,
                         TokenId token, PosteriorMode mode, const tasks::TaskInstance& inst,
                         std::optional<TokenId> resolved_label) {
  const Vocab& v = ctx.prior->vocab();
  if (token < 0 || token >= v.size())
    throw std::invalid_argument("velocity: token out of vocabulary");
  if (mode == PosteriorMode::exact_bayes) {
    const int y = v.answer_value(inst.gold_answer);
    const State plain = state.without_label();
    const double parent = ev.marginal_logprob(plain, y);
    if (!(parent > kLogFloor))
      throw std::runtime_error("velocity: zero-probability conditioning");
    State child = plain;
    child.thought.push_back(token);
    return {ev.marginal_logprob(child, y) - parent, false};
  }
  const std::vector<double> prior_lp = ctx.prior->next_token_logprobs(state.without_label());
  const std::vector<double> post_lp =
      posterior_logprobs(ctx, ev, state, mode, inst, resolved_label);
  return velocity_from_logprobs(prior_lp[token], post_lp[token]);
}

struct VelocityProfile {
  std::vector<double> v;           // per step, one entry per thought token
  std::vector<bool> clamped;
  std::vector<double> difficulty;  // D(I_i) for i = 0..T
  double cumulative = 0.0;         // sum of v
  double mean_pfp = 0.0;
  double content_mean = 0.0;       // mean v over value tokens
  int content_count = 0;
  double filler_mean = 0.0;        // mean v over filler tokens
  int filler_count = 0;
  bool oracle_difficulty = false;  // D trace from the oracle vs the forced head
};

/// Velocity profile of a trajectory under one posterior mode. The difficulty
/// trace is oracle-backed in exact_bayes mode (making the telescoping
/// identity exact) and forced-head-backed otherwise.
inline VelocityProfile profile(const FlowContext& ctx, const Trajectory& traj, PosteriorMode mode,
                               const tasks::TaskInstance& inst,
                               std::optional<TokenId> resolved_label) {
  const Vocab& v = ctx.prior->vocab();
  validate_trajectory(v, traj);
  oracle::Evaluator ev(*ctx.prior, ctx.budget);
  const int y = v.answer_value(inst.gold_answer);

  VelocityProfile out;
  out.oracle_difficulty = mode == PosteriorMode::exact_bayes;
  State s{traj.state.query, {}, std::nullopt};
  out.difficulty.push_back(out.oracle_difficulty ? -ev.marginal_logprob(s, y)
                                                 : -ctx.prior->answer_logprobs(s)[y]);
  for (const TokenId t : traj.state.thought) {
    const Velocity vel = velocity(ctx, ev, s, t, mode, inst, resolved_label);
    out.v.push_back(vel.value);
    out.clamped.push_back(vel.clamped);
    out.cumulative += vel.value;
    if (v.is_value(t)) {
      out.content_mean += vel.value;
      ++out.content_count;
    } else if (v.is_filler(t)) {
      out.filler_mean += vel.value;
      ++out.filler_count;
    }
    s.thought.push_back(t);
    out.difficulty.push_back(out.oracle_difficulty ? -ev.marginal_logprob(s, y)
                                                   : -ctx.prior->answer_logprobs(s)[y]);
  }
  if (!out.v.empty()) out.mean_pfp = out.cumulative / static_cast<double>(out.v.size());
  if (out.content_count > 0) out.content_mean /= out.content_count;
  if (out.filler_count > 0) out.filler_mean /= out.filler_count;
  return out;
}

/// Mean KL(exact Bayes posterior || mode-induced posterior) over states
/// sampled from prior rollouts; lower = better posterior approximation.
inline double posterior_quality(const FlowContext& ctx, PosteriorMode mode,
                                const std::vector<tasks::TaskInstance>& instances, int n_states,
                                Rng rng) {
  if (instances.empty()) throw std::invalid_argument("posterior_quality: no instances");
  const Vocab& v = ctx.prior->vocab();
  oracle::Evaluator ev(*ctx.prior, ctx.budget);
  double total = 0.0;
  int done = 0;
  for (int i = 0; done < n_states; ++i) {
    Rng sr = rng.split(static_cast<uint64_t>(i));
    const tasks::TaskInstance& inst = instances[sr.next_int(static_cast<int>(instances.size()))];
    State s{inst.query, {}, std::nullopt};
    const int target_len = sr.next_int(ctx.budget.t_max);
    while (s.step_index() < target_len) {
      const std::vector<double> lp = ctx.prior->next_token_logprobs(s);
      const TokenId t = sr.sample_logprobs(lp);
      if (t == v.eot()) break;  // keep the state non-terminal
      s.thought.push_back(t);
    }
    const std::vector<double> exact = oracle::exact_bayes_posterior(ev, s, inst.gold_answer);
    std::optional<TokenId> label = resolve_label(v, mode, inst, sr);
    const std::vector<double> approx = posterior_logprobs(ctx, ev, s, mode, inst, label);
    total += kl_divergence(exact, approx);
    ++done;
  }
  return total / n_states;
}

}  // namespace flowcot::flow
