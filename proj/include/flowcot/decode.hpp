#pragma once

/**
 * Decoding strategies.
 *
 *   standard_greedy   argmax of the prior at every step
 *   standard_sample   temperature sampling from the prior
 *   flow_greedy       argmax of velocity over a prior-filtered candidate set
 *   posterior_only    argmax of the raw posterior over the same candidate set
 *
 * Candidate sets come from one of three prior-side rules (log-prob threshold,
 * top-p, top-k); an emptied set falls back to the prior argmax singleton so a
 * step can never fail. Ties break toward the lowest token id everywhere.
 * Answer emission always uses the prior model's answer head.
 */

#include "flowcot/core.hpp"
#include "flowcot/flow.hpp"
#include "flowcot/numerics.hpp"
#include "flowcot/oracle.hpp"
#include "flowcot/policy.hpp"
#include "flowcot/rng.hpp"
#include "flowcot/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowcot::decode {

enum class Strategy { standard_greedy, standard_sample, flow_greedy, posterior_only };

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::standard_greedy: return "standard_greedy";
    case Strategy::standard_sample: return "standard_sample";
    case Strategy::flow_greedy: return "flow_greedy";
    case Strategy::posterior_only: return "posterior_only";
  }
  return "?";
}

enum class RuleKind { logprob_threshold, top_p, top_k };

struct CandidateRule {
  RuleKind kind = RuleKind::top_p;
  double tau = kNegInf;  // logprob_threshold
  double p = 0.95;       // top_p
  int k = 1;             // top_k

  static CandidateRule threshold(double tau) { return {RuleKind::logprob_threshold, tau, 0, 0}; }
  static CandidateRule top_p(double p) { return {RuleKind::top_p, 0, p, 0}; }
  static CandidateRule top_k(int k) { return {RuleKind::top_k, 0, 0, k}; }
};

struct DecodeConfig {
  Strategy strategy = Strategy::standard_greedy;
  CandidateRule rule;  // flow_greedy / posterior_only only
  double temperature = 1.0;
  flow::PosteriorMode mode = flow::PosteriorMode::latent_label;
  int t_max = 6;

  void validate() const {
    if (t_max < 1) throw std::invalid_argument("DecodeConfig: t_max must be >= 1");
    if (strategy == Strategy::standard_sample && !(temperature > 0.0))
      throw std::invalid_argument("DecodeConfig: temperature must be > 0 for sampling");
    if (strategy == Strategy::flow_greedy || strategy == Strategy::posterior_only) {
      if (rule.kind == RuleKind::top_p && !(rule.p > 0.0 && rule.p <= 1.0))
        throw std::invalid_argument("DecodeConfig: top_p must be in (0, 1]");
      if (rule.kind == RuleKind::top_k && rule.k < 1)
        throw std::invalid_argument("DecodeConfig: top_k must be >= 1");
    }
  }
};

/// Candidate token set from a normalized prior log-prob vector. Never empty:
/// an emptied rule falls back to the argmax-of-prior singleton. Returned in
/// ascending token id order.
inline std::vector<TokenId> candidate_set(std::span<const double> prior_lp,
                                          const CandidateRule& rule) {
  std::vector<TokenId> out;
  switch (rule.kind) {
    case RuleKind::logprob_threshold: {
      for (size_t t = 0; t < prior_lp.size(); ++t) {
        if (std::isfinite(prior_lp[t]) && prior_lp[t] > rule.tau)
          out.push_back(static_cast<TokenId>(t));
      }
      break;
    }
    case RuleKind::top_p:
    case RuleKind::top_k: {
      std::vector<TokenId> order;
      for (size_t t = 0; t < prior_lp.size(); ++t) {
        if (std::isfinite(prior_lp[t])) order.push_back(static_cast<TokenId>(t));
      }
      std::sort(order.begin(), order.end(), [&](TokenId a, TokenId b) {
        if (prior_lp[a] != prior_lp[b]) return prior_lp[a] > prior_lp[b];
        return a < b;
      });
      if (rule.kind == RuleKind::top_k) {
        order.resize(std::min<size_t>(order.size(), static_cast<size_t>(rule.k)));
        out = order;
      } else {
        double mass = 0.0;
        for (const TokenId t : order) {
          out.push_back(t);
          mass += std::exp(prior_lp[t]);
          if (mass >= rule.p - 1e-12) break;  // tolerance for log/exp round-trip
        }
      }
      break;
    }
  }
  if (out.empty()) {
    const int best = argmax_lowest_id(prior_lp);
    if (best < 0) throw std::runtime_error("candidate_set: prior has no finite entries");
    out.push_back(best);
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct StepResult {
  TokenId token = -1;
  double prior_logprob = 0.0;          // log pi(token | state) under the prior
  std::vector<TokenId> candidates;     // flow strategies only
  std::vector<double> velocities;      // per candidate, flow_greedy
  std::vector<double> posterior_lp;    // per candidate, posterior_only
  bool any_clamped = false;
};

/// One decoding step. For flow strategies the evaluator carries the oracle
/// memo across steps of a rollout; label modes ignore it.
inline StepResult decode_step(const flow::FlowContext& ctx, oracle::Evaluator& ev,
                              const State& state, const DecodeConfig& cfg,
                              const tasks::TaskInstance& inst,
                              std::optional<TokenId> resolved_label, Rng& rng) {
  cfg.validate();
  const std::vector<double> prior_lp = ctx.prior->next_token_logprobs(state.without_label());
  StepResult out;
  switch (cfg.strategy) {
    case Strategy::standard_greedy: {
      out.token = argmax_lowest_id(prior_lp);
      break;
    }
    case Strategy::standard_sample: {
      std::vector<double> scaled(prior_lp.size(), kNegInf);
      for (size_t t = 0; t < prior_lp.size(); ++t) {
        if (std::isfinite(prior_lp[t])) scaled[t] = prior_lp[t] / cfg.temperature;
      }
      normalize_logits(scaled);
      out.token = rng.sample_logprobs(scaled);
      break;
    }
    case Strategy::flow_greedy: {
      out.candidates = candidate_set(prior_lp, cfg.rule);
      double best_v = kNegInf;
      for (const TokenId t : out.candidates) {
        const flow::Velocity vel =
            flow::velocity(ctx, ev, state, t, cfg.mode, inst, resolved_label);
        out.velocities.push_back(vel.value);
        out.any_clamped = out.any_clamped || vel.clamped;
        if (vel.value > best_v) {
          best_v = vel.value;
          out.token = t;
        }
      }
      break;
    }
    case Strategy::posterior_only: {
      out.candidates = candidate_set(prior_lp, cfg.rule);
      const std::vector<double> post =
          flow::posterior_logprobs(ctx, ev, state, cfg.mode, inst, resolved_label);
      double best = kNegInf;
      for (const TokenId t : out.candidates) {
        out.posterior_lp.push_back(post[t]);
        if (std::isfinite(post[t]) && post[t] > best) {
          best = post[t];
          out.token = t;
        }
      }
      if (out.token < 0) out.token = out.candidates.front();
      break;
    }
  }
  out.prior_logprob = prior_lp[out.token];
  return out;
}

struct RolloutResult {
  Trajectory trajectory;
  flow::VelocityProfile profile;  // populated when with_profile was requested
  bool has_profile = false;
  std::optional<TokenId> resolved_label;
};

/// Run decode_step until end-of-thought or the horizon, then emit an answer
/// from the prior answer head (sampled for standard_sample, greedy
/// otherwise). Per-step log-probs are recorded under the prior policy.
/// Deterministic given the rng stream.
inline RolloutResult rollout(const flow::FlowContext& ctx, const tasks::TaskInstance& inst,
                             const DecodeConfig& cfg, Rng rng, bool with_profile = false) {
  cfg.validate();
  const Vocab& v = ctx.prior->vocab();
  oracle::EnumerationBudget budget{ctx.budget.max_trajectories, cfg.t_max};
  oracle::Evaluator ev(*ctx.prior, budget);

  RolloutResult out;
  const bool uses_posterior = cfg.strategy == Strategy::flow_greedy ||
                              cfg.strategy == Strategy::posterior_only || with_profile;
  if (uses_posterior && cfg.mode != flow::PosteriorMode::exact_bayes) {
    out.resolved_label = flow::resolve_label(v, cfg.mode, inst, rng);
  }

  Trajectory& traj = out.trajectory;
  traj.instance_id = inst.id;
  traj.state.query = inst.query;
  State& s = traj.state;
  while (!s.terminal(v) && s.step_index() < cfg.t_max) {
    const StepResult step = decode_step(ctx, ev, s, cfg, inst, out.resolved_label, rng);
    traj.log_probs.push_back(std::min(step.prior_logprob, 0.0));
    s.thought.push_back(step.token);
  }
  traj.terminated = s.terminal(v);

  const std::vector<double> ans_lp = ctx.prior->answer_logprobs(s);
  int ans_val;
  if (cfg.strategy == Strategy::standard_sample) {
    std::vector<double> scaled(ans_lp.size());
    for (size_t i = 0; i < ans_lp.size(); ++i) scaled[i] = ans_lp[i] / cfg.temperature;
    normalize_logits(scaled);
    ans_val = rng.sample_logprobs(scaled);
  } else {
    ans_val = argmax_lowest_id(ans_lp);
  }
  traj.answer = v.answer_token(ans_val);

  if (with_profile) {
    flow::FlowContext pctx = ctx;
    pctx.budget = budget;
    out.profile = flow::profile(pctx, traj, cfg.mode, inst, out.resolved_label);
    out.has_profile = true;
  }
  return out;
}

}  // namespace flowcot::decode
