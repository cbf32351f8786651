#pragma once

/**
 * Flow-based reinforcement learning.
 *
 * The dense reward of a trajectory telescopes: R_global = sum_i v(s_i) with
 * v(s_i) = log p(y|I_i) - sg[log p(y|I_{i-1})], so the value collapses to
 * log p(y|I_T) - log p(y|I_0). The stop-gradient convention is structural
 * here: the update path never reads the stored baseline terms. Group
 * advantages are computed from the terminal answer likelihood alone, which
 * equals the group-normalized R_global because the query term is constant
 * within a group.
 *
 * The update is gradient ascent on Term A + Term B:
 *   Term A  sum_t grad log pi(s_t) * A-hat        (REINFORCE, group-relative)
 *   Term B  M * (grad log p(y|x,s) + sum_k (k-1)/T * grad log pi(s_k))
 * where M is one of four trajectory-level quality gates on the answer
 * likelihood against the group mean mu. outcome_sparse mode swaps the
 * advantage source for the 0/1 verifier reward, drops Term B, and extends
 * the REINFORCE sum over the emitted answer token (the sparse-outcome
 * baseline trains its answer head through that term alone).
 */

#include "flowcot/core.hpp"
#include "flowcot/decode.hpp"
#include "flowcot/numerics.hpp"
#include "flowcot/oracle.hpp"
#include "flowcot/policy.hpp"
#include "flowcot/rng.hpp"
#include "flowcot/tasks.hpp"

#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowcot::rl {

enum class RewardBackend { forced_head, oracle_exact };
enum class GateKind { relu_relative, binary_relative, ratio, absolute };
enum class RewardMode { flow_dense, outcome_sparse };

inline const char* gate_name(GateKind g) {
  switch (g) {
    case GateKind::relu_relative: return "relu_relative";
    case GateKind::binary_relative: return "binary_relative";
    case GateKind::ratio: return "ratio";
    case GateKind::absolute: return "absolute";
  }
  return "?";
}

/// LLM-scale learning-rate preset; the desk-scale default is 0.05.
inline constexpr double kLlmPresetLearningRate = 1e-6;

// ===========================================================================
// Rewards
// ===========================================================================

struct FlowReward {
  std::vector<double> v;          // per-step velocity, i = 1..T
  std::vector<double> positives;  // log p(y|I_i)
  std::vector<double> baselines;  // sg[log p(y|I_{i-1})]; never read by updates
  double r_global = 0.0;          // log p(y|I_T) - log p(y|I_0)
  double terminal_logp = 0.0;     // log p(y|x, s)
  bool clamped = false;           // some value hit the floor
};

/// Dense per-step rewards for one trajectory. The backend supplies
/// p(y|I_i): the forced answer head for fast runs, the enumeration oracle
/// for exact ones. Values below exp(kLogFloor) are clamped and flagged.
inline FlowReward global_reward(const CondSeqModel& model, const Trajectory& traj,
                                const tasks::TaskInstance& inst, RewardBackend backend,
                                const oracle::EnumerationBudget& budget) {
  const Vocab& v = model.vocab();
  const int y = v.answer_value(inst.gold_answer);
  std::optional<oracle::Evaluator> ev;
  if (backend == RewardBackend::oracle_exact) ev.emplace(model, budget);

  FlowReward out;
  State s{traj.state.query, {}, std::nullopt};
  auto logp = [&](const State& st) {
    const double lp = backend == RewardBackend::oracle_exact ? ev->marginal_logprob(st, y)
                                                             : model.answer_logprobs(st)[y];
    if (lp < kLogFloor) {
      out.clamped = true;
      return kLogFloor;
    }
    return lp;
  };

  double prev = logp(s);
  const double first = prev;
  for (const TokenId t : traj.state.thought) {
    s.thought.push_back(t);
    const double cur = logp(s);
    out.positives.push_back(cur);
    out.baselines.push_back(prev);
    out.v.push_back(cur - prev);
    prev = cur;
  }
  out.terminal_logp = prev;
  out.r_global = prev - first;
  return out;
}

/// Trajectory-level quality gate on the answer log-likelihood against the
/// (gradient-inert) group mean mu.
inline double quality_gate(double log_p_answer, double mu, GateKind kind) {
  switch (kind) {
    case GateKind::relu_relative: return std::max(0.0, log_p_answer - mu);
    case GateKind::binary_relative: return log_p_answer > mu ? 1.0 : 0.0;
    case GateKind::ratio: return std::exp(log_p_answer - mu);  // unbounded; known hazard
    case GateKind::absolute: return std::exp(log_p_answer);
  }
  return 0.0;
}

/// Group-relative advantages: (R - mean) / std with the population standard
/// deviation floored at 1e-8 (all-equal groups normalize to all zeros).
inline std::vector<double> group_advantage(std::span<const double> rewards) {
  if (rewards.size() < 2) throw std::invalid_argument("group_advantage: need G >= 2");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (const double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (const double r : rewards) var += (r - mean) * (r - mean);
  const double std_dev = std::max(std::sqrt(var / n), 1e-8);
  std::vector<double> out(rewards.size());
  for (size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / std_dev;
  return out;
}

// ===========================================================================
// Training
// ===========================================================================

struct TrainConfig {
  int group_size = 8;
  int prompts_per_batch = 4;
  double learning_rate = 0.05;
  int steps = 80;
  double rollout_temperature = 1.0;
  GateKind gate = GateKind::relu_relative;
  RewardMode reward_mode = RewardMode::flow_dense;
  RewardBackend backend = RewardBackend::forced_head;
  int t_max = 6;
  uint64_t max_trajectories = 1'000'000;
  bool scale_answer_term_by_horizon = false;  // divide the answer term of Term B by T
  uint64_t seed = 0;

  void validate() const {
    if (group_size < 2)
      throw std::invalid_argument("TrainConfig: group_size must be >= 2 for relative baselines");
    if (prompts_per_batch < 1) throw std::invalid_argument("TrainConfig: prompts_per_batch >= 1");
    if (!(rollout_temperature > 0.0))
      throw std::invalid_argument("TrainConfig: rollout temperature must be > 0");
    if (t_max < 1) throw std::invalid_argument("TrainConfig: t_max must be >= 1");
    if (steps < 0) throw std::invalid_argument("TrainConfig: steps must be >= 0");
  }
};

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Rollouts grouped per prompt, with their rewards and verifier bits.
struct RolloutBatch {
  std::vector<const tasks::TaskInstance*> prompts;
  std::vector<std::vector<decode::RolloutResult>> groups;  // [prompt][g]
  std::vector<std::vector<FlowReward>> rewards;            // parallel to groups
};

inline RolloutBatch collect_rollouts(const ParametricPolicy& policy,
                                     std::span<const tasks::TaskInstance> batch,
                                     const TrainConfig& cfg, Rng& rng) {
  decode::DecodeConfig dcfg;
  dcfg.strategy = decode::Strategy::standard_sample;
  dcfg.temperature = cfg.rollout_temperature;
  dcfg.t_max = cfg.t_max;
  flow::FlowContext ctx{&policy, nullptr, {cfg.max_trajectories, cfg.t_max}};

  RolloutBatch out;
  for (const tasks::TaskInstance& inst : batch) {
    out.prompts.push_back(&inst);
    std::vector<decode::RolloutResult> group;
    std::vector<FlowReward> rewards;
    Rng prompt_rng = rng.split(inst.id);
    for (int g = 0; g < cfg.group_size; ++g) {
      decode::RolloutResult r =
          decode::rollout(ctx, inst, dcfg, prompt_rng.split(static_cast<uint64_t>(g)));
      rewards.push_back(global_reward(policy, r.trajectory, inst, cfg.backend,
                                      {cfg.max_trajectories, cfg.t_max}));
      group.push_back(std::move(r));
    }
    out.groups.push_back(std::move(group));
    out.rewards.push_back(std::move(rewards));
  }
  return out;
}

/// The decomposed gradient estimate for one batch of grouped rollouts.
struct FlowGradient {
  std::vector<double> term_a;     // parameter-shaped
  std::vector<double> term_b;     // parameter-shaped; zero in outcome_sparse mode
  std::vector<double> gates;      // M per rollout (flow_dense)
  std::vector<double> advantages; // A-hat per rollout, groups flattened
  std::vector<double> group_mu;   // gate baseline per prompt
  double reward_mean = 0.0;       // mean R_global (or verifier reward)
  double gate_mean = 0.0;
  double mean_length = 0.0;
  double pass_fraction = 0.0;     // verifier on emitted answers
};

/// Assemble Term A + Term B from collected rollouts. Reads the rewards only
/// through terminal_logp: the stored per-step baselines are gradient-inert
/// by construction (perturbing them cannot change the result).
inline FlowGradient compute_flow_gradient(const ParametricPolicy& policy,
                                          const RolloutBatch& batch, const TrainConfig& cfg) {
  const Vocab& v = policy.vocab();
  const size_t n = policy.param_count();
  const double scale =
      1.0 / (static_cast<double>(batch.prompts.size()) * static_cast<double>(cfg.group_size));

  FlowGradient out;
  out.term_a.assign(n, 0.0);
  out.term_b.assign(n, 0.0);

  int total = 0, correct = 0;
  double len_sum = 0.0, reward_sum = 0.0;
  for (size_t p = 0; p < batch.prompts.size(); ++p) {
    const tasks::TaskInstance& inst = *batch.prompts[p];
    const auto& group = batch.groups[p];
    const auto& rewards = batch.rewards[p];
    const int gold_value = v.answer_value(inst.gold_answer);

    std::vector<double> score_source(group.size());
    std::vector<int> verify(group.size());
    double mu = 0.0;
    for (size_t g = 0; g < group.size(); ++g) {
      verify[g] = tasks::verify_answer(v, inst, group[g].trajectory.answer) ? 1 : 0;
      mu += rewards[g].terminal_logp;
      score_source[g] = cfg.reward_mode == RewardMode::flow_dense
                            ? rewards[g].terminal_logp  // == R_global + group constant
                            : static_cast<double>(verify[g]);
      reward_sum += cfg.reward_mode == RewardMode::flow_dense ? rewards[g].r_global
                                                              : static_cast<double>(verify[g]);
      len_sum += thought_length(v, group[g].trajectory.state);
      correct += verify[g];
      ++total;
    }
    mu /= static_cast<double>(group.size());
    out.group_mu.push_back(mu);

    const std::vector<double> adv = group_advantage(score_source);
    for (size_t g = 0; g < group.size(); ++g) {
      const Trajectory& traj = group[g].trajectory;
      const int t_len = static_cast<int>(traj.state.thought.size());
      out.advantages.push_back(adv[g]);

      // Term A: REINFORCE over the thought (plus the emitted answer token in
      // outcome mode).
      State s{traj.state.query, {}, std::nullopt};
      const double coef_a = adv[g] * scale;
      for (int k = 0; k < t_len; ++k) {
        if (coef_a != 0.0) policy.grad_log_next(s, traj.state.thought[k], coef_a, out.term_a);
        s.thought.push_back(traj.state.thought[k]);
      }
      if (cfg.reward_mode == RewardMode::outcome_sparse) {
        if (coef_a != 0.0)
          policy.grad_log_answer(s, v.answer_value(traj.answer), coef_a, out.term_a);
        continue;
      }

      // Term B: gated, time-weighted flow gradient.
      const double gate = quality_gate(rewards[g].terminal_logp, mu, cfg.gate);
      out.gates.push_back(gate);
      out.gate_mean += gate;
      if (gate == 0.0 || t_len == 0) continue;
      const double coef_b = gate * scale;
      const double answer_scale = cfg.scale_answer_term_by_horizon ? 1.0 / t_len : 1.0;
      policy.grad_log_answer(s, gold_value, coef_b * answer_scale, out.term_b);
      State sb{traj.state.query, {}, std::nullopt};
      for (int k = 1; k <= t_len; ++k) {
        const double w = static_cast<double>(k - 1) / static_cast<double>(t_len);
        if (w != 0.0) policy.grad_log_next(sb, traj.state.thought[k - 1], coef_b * w, out.term_b);
        sb.thought.push_back(traj.state.thought[k - 1]);
      }
    }
  }
  if (!out.gates.empty()) out.gate_mean /= static_cast<double>(out.gates.size());
  out.reward_mean = reward_sum / total;
  out.mean_length = len_sum / total;
  out.pass_fraction = static_cast<double>(correct) / total;
  return out;
}

inline double l2_norm(std::span<const double> xs) {
  double s = 0.0;
  for (const double x : xs) s += x * x;
  return std::sqrt(s);
}

/// Ascent step. Throws DivergenceError when any parameter leaves [-1e6, 1e6]
/// or stops being finite (the ratio/absolute gate failure mode).
inline void apply_ascent(ParametricPolicy& policy, const FlowGradient& grad, double lr) {
  std::vector<double> delta(policy.param_count());
  for (size_t i = 0; i < delta.size(); ++i) delta[i] = lr * (grad.term_a[i] + grad.term_b[i]);
  policy.apply_delta(delta);
  double worst = 0.0;
  for (const double p : policy.params()) {
    if (!std::isfinite(p)) {
      worst = std::numeric_limits<double>::infinity();
      break;
    }
    worst = std::max(worst, std::abs(p));
  }
  if (!(worst <= 1e6)) {
    throw DivergenceError("ratio/absolute gate blow-up: max |theta| = " + std::to_string(worst));
  }
}

struct StepReport {
  double reward_mean = 0.0;
  double gate_mean = 0.0;
  double term_a_norm = 0.0;
  double term_b_norm = 0.0;
  double mean_length = 0.0;
  double pass_fraction = 0.0;
};

/// One training step: G rollouts per prompt, decomposed gradient, ascent.
inline StepReport flow_gradient_step(ParametricPolicy& policy,
                                     std::span<const tasks::TaskInstance> batch,
                                     const TrainConfig& cfg, Rng& rng) {
  cfg.validate();
  const RolloutBatch rollouts = collect_rollouts(policy, batch, cfg, rng);
  const FlowGradient grad = compute_flow_gradient(policy, rollouts, cfg);
  StepReport report;
  report.reward_mean = grad.reward_mean;
  report.gate_mean = grad.gate_mean;
  report.term_a_norm = l2_norm(grad.term_a);
  report.term_b_norm = l2_norm(grad.term_b);
  report.mean_length = grad.mean_length;
  report.pass_fraction = grad.pass_fraction;
  apply_ascent(policy, grad, cfg.learning_rate);
  return report;
}

// ===========================================================================
// Training loop
// ===========================================================================

struct CurveRow {
  int step = 0;
  double reward_mean = 0.0;
  double pass1 = 0.0;        // held-out, greedy decoding
  double length_mean = 0.0;  // held-out, greedy decoding
  double gate_mean = 0.0;
  double term_a_norm = 0.0;
  double term_b_norm = 0.0;
};

struct TrainResult {
  std::vector<CurveRow> curve;  // one row per completed step
  bool diverged = false;
  std::string diagnostic;
  int completed_steps = 0;
};

inline std::pair<double, double> heldout_eval(const ParametricPolicy& policy,
                                              std::span<const tasks::TaskInstance> heldout,
                                              int t_max) {
  const Vocab& v = policy.vocab();
  decode::DecodeConfig cfg;
  cfg.strategy = decode::Strategy::standard_greedy;
  cfg.t_max = t_max;
  flow::FlowContext ctx{&policy, nullptr, {1, t_max}};
  int correct = 0;
  double len = 0.0;
  for (const tasks::TaskInstance& inst : heldout) {
    const decode::RolloutResult r = decode::rollout(ctx, inst, cfg, Rng(0));
    correct += tasks::verify_answer(v, inst, r.trajectory.answer) ? 1 : 0;
    len += thought_length(v, r.trajectory.state);
  }
  const double n = static_cast<double>(heldout.size());
  return {correct / n, len / n};
}

/// Full training run. Deterministic under (config, seed). The optional
/// checkpoint hook fires after every completed step.
inline TrainResult train(ParametricPolicy& policy,
                         std::span<const tasks::TaskInstance> train_instances,
                         std::span<const tasks::TaskInstance> heldout, const TrainConfig& cfg,
                         const std::function<void(int, const ParametricPolicy&)>& on_step = {}) {
  cfg.validate();
  if (train_instances.empty()) throw std::invalid_argument("train: no training instances");
  Rng root = Rng(cfg.seed).split("train");
  TrainResult result;
  for (int step = 0; step < cfg.steps; ++step) {
    Rng step_rng = root.split(static_cast<uint64_t>(step));
    std::vector<tasks::TaskInstance> batch;
    for (int i = 0; i < cfg.prompts_per_batch; ++i) {
      batch.push_back(train_instances[step_rng.next_int(static_cast<int>(train_instances.size()))]);
    }
    StepReport report;
    try {
      report = flow_gradient_step(policy, batch, cfg, step_rng);
    } catch (const DivergenceError& e) {
      result.diverged = true;
      result.diagnostic = e.what();
      break;
    }
    CurveRow row;
    row.step = step;
    row.reward_mean = report.reward_mean;
    row.gate_mean = report.gate_mean;
    row.term_a_norm = report.term_a_norm;
    row.term_b_norm = report.term_b_norm;
    std::tie(row.pass1, row.length_mean) = heldout_eval(policy, heldout, cfg.t_max);
    result.curve.push_back(row);
    result.completed_steps = step + 1;
    if (on_step) on_step(step, policy);
  }
  return result;
}

// ===========================================================================
// Estimator consistency (pre-gate form)
// ===========================================================================

/// One single-sample estimate of Term B in its pre-gate form with exact
/// importance weights M_i = p(y|x,s) / p(y|I_i):
///   sum_i M_i * (sum_{k>i} grad log pi(s_k) + grad log p(y|x,s)).
/// Its expectation over rollouts equals the oracle-enumerated Term B; the
/// shared evaluator keeps the exact marginals memoized across samples.
inline std::vector<double> sampled_flow_gradient_pregate(const ParametricPolicy& policy,
                                                         const tasks::TaskInstance& inst,
                                                         oracle::Evaluator& ev, Rng& rng) {
  const Vocab& v = policy.vocab();
  const size_t n = policy.param_count();
  const int y = v.answer_value(inst.gold_answer);
  const int t_max = ev.budget().t_max;

  // Plain ancestral rollout at temperature 1.
  State s{inst.query, {}, std::nullopt};
  std::vector<TokenId> tokens;
  while (!s.terminal(v) && s.step_index() < t_max) {
    const std::vector<double> lp = policy.next_token_logprobs(s);
    const TokenId t = rng.sample_logprobs(lp);
    tokens.push_back(t);
    s.thought.push_back(t);
  }
  const double terminal_lp = policy.answer_logprobs(s)[y];
  const int t_len = static_cast<int>(tokens.size());

  // Per-step scores and their suffix sums.
  std::vector<std::vector<double>> scores(t_len, std::vector<double>(n, 0.0));
  State sp{inst.query, {}, std::nullopt};
  std::vector<double> marginals(t_len + 1);
  marginals[0] = ev.marginal_logprob(sp, y);
  for (int k = 0; k < t_len; ++k) {
    policy.grad_log_next(sp, tokens[k], 1.0, scores[k]);
    sp.thought.push_back(tokens[k]);
    marginals[k + 1] = ev.marginal_logprob(sp, y);
  }
  std::vector<double> g_ans(n, 0.0);
  policy.grad_log_answer(sp, y, 1.0, g_ans);

  std::vector<double> suffix(n, 0.0);
  std::vector<double> out(n, 0.0);
  for (int i = t_len; i >= 1; --i) {
    // suffix currently holds sum_{k > i} scores[k-1].
    const double m = std::exp(terminal_lp - marginals[i]);
    for (size_t j = 0; j < n; ++j) out[j] += m * (suffix[j] + g_ans[j]);
    for (size_t j = 0; j < n; ++j) suffix[j] += scores[i - 1][j];
  }
  return out;
}

}  // namespace flowcot::rl
