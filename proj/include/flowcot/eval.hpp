#pragma once

/**
 * Metrics and paired analyses: pass@k, arm comparisons with correctness
 * transitions, and reasoning-budget sweeps.
 *
 * "Length" always means thought tokens only - the quantity flow decoding
 * actually shortens - excluding query, answer and the end-of-thought marker.
 */

#include "flowcot/core.hpp"
#include "flowcot/decode.hpp"
#include "flowcot/flow.hpp"
#include "flowcot/numerics.hpp"
#include "flowcot/parallel.hpp"
#include "flowcot/rng.hpp"
#include "flowcot/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowcot::eval {

// ===========================================================================
// pass@k
// ===========================================================================

namespace detail {

inline unsigned __int128 binomial_u128(int n, int k) {
  if (k < 0 || k > n) return 0;
  k = std::min(k, n - k);
  unsigned __int128 c = 1;
  for (int i = 1; i <= k; ++i) {
    c = c * static_cast<unsigned __int128>(n - k + i) / static_cast<unsigned __int128>(i);
  }
  return c;
}

}  // namespace detail

/// Unbiased pass@k estimate from n samples with c correct:
/// 1 - C(n-c, k) / C(n, k). Exact integer arithmetic up to n = 64,
/// log-gamma beyond.
inline double pass_at_k(int n, int c, int k) {
  if (n < 1 || c < 0 || c > n) throw std::invalid_argument("pass_at_k: need 0 <= c <= n, n >= 1");
  if (k < 1 || k > n) throw std::invalid_argument("pass_at_k: need 1 <= k <= n");
  if (n - c < k) return 1.0;
  if (n <= 64) {
    const unsigned __int128 total = detail::binomial_u128(n, k);
    const unsigned __int128 none = detail::binomial_u128(n - c, k);
    return static_cast<double>(total - none) / static_cast<double>(total);
  }
  const double log_none = std::lgamma(n - c + 1.0) - std::lgamma(n - c - k + 1.0) -
                          std::lgamma(n + 1.0) + std::lgamma(n - k + 1.0);
  return 1.0 - std::exp(log_none);
}

// ===========================================================================
// Arm comparison
// ===========================================================================

struct ArmSpec {
  std::string name;
  decode::DecodeConfig config;
};

struct InstanceOutcome {
  uint64_t instance_id = 0;
  bool correct = false;
  int length = 0;
  double mean_pfp = 0.0;
  bool terminated = true;
};

struct ArmMetrics {
  std::string name;
  double pass1 = 0.0;
  double mean_length = 0.0;
  double median_length = 0.0;
  double mean_pfp = 0.0;
};

struct TransitionRecord {
  uint64_t instance_id = 0;
  bool baseline_correct = false;
  bool flow_correct = false;
  double compression = 0.0;  // 1 - len_flow / len_baseline, <= 1
  double mean_pfp = 0.0;     // of the flow trajectory
};

struct TransitionCounts {
  int w2c = 0, c2w = 0, c2c = 0, w2w = 0;
};

struct Comparison {
  std::vector<ArmMetrics> arms;
  std::vector<std::vector<InstanceOutcome>> outcomes;  // [arm][instance]
  std::vector<TransitionRecord> transitions;           // (baseline, flow) pair
  TransitionCounts counts;
  int baseline_arm = 0;
  int flow_arm = 1;
};

namespace detail {

inline double median(std::vector<double> xs) {
  if (xs.empty()) return 0.0;
  std::sort(xs.begin(), xs.end());
  const size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

}  // namespace detail

/// Pair per-instance outcomes of two arms into transition records. Errors on
/// mismatched instance sets.
inline void classify_transitions(const std::vector<InstanceOutcome>& baseline,
                                 const std::vector<InstanceOutcome>& flow_side,
                                 std::vector<TransitionRecord>& records,
                                 TransitionCounts& counts) {
  if (baseline.size() != flow_side.size())
    throw std::invalid_argument("classify_transitions: mismatched instance sets");
  for (size_t i = 0; i < baseline.size(); ++i) {
    if (baseline[i].instance_id != flow_side[i].instance_id)
      throw std::invalid_argument("classify_transitions: mismatched instance sets");
    TransitionRecord t;
    t.instance_id = baseline[i].instance_id;
    t.baseline_correct = baseline[i].correct;
    t.flow_correct = flow_side[i].correct;
    t.compression = baseline[i].length > 0
                        ? 1.0 - static_cast<double>(flow_side[i].length) /
                                    static_cast<double>(baseline[i].length)
                        : 0.0;
    t.mean_pfp = flow_side[i].mean_pfp;
    if (!t.baseline_correct && t.flow_correct) ++counts.w2c;
    else if (t.baseline_correct && !t.flow_correct) ++counts.c2w;
    else if (t.baseline_correct) ++counts.c2c;
    else ++counts.w2w;
    records.push_back(t);
  }
}

/// Run each arm over the shared instance set with coupled per-instance rng
/// streams and classify baseline-vs-flow correctness transitions. The
/// baseline is the first arm; the flow side is the first flow_greedy arm
/// (the second arm if none is).
inline Comparison compare_arms(const flow::FlowContext& ctx,
                               const std::vector<tasks::TaskInstance>& instances,
                               const std::vector<ArmSpec>& arms, uint64_t seed, int jobs = 1) {
  if (arms.size() < 2) throw std::invalid_argument("compare_arms: need at least 2 arms");
  if (instances.empty()) throw std::invalid_argument("compare_arms: no instances");
  const Vocab& v = ctx.prior->vocab();

  Comparison cmp;
  cmp.outcomes.resize(arms.size());
  const Rng root = Rng(seed).split("decode");
  for (size_t a = 0; a < arms.size(); ++a) {
    arms[a].config.validate();
    auto& outs = cmp.outcomes[a];
    outs.resize(instances.size());
    const Rng arm_rng = root.split(arms[a].name);
    parallel_for(static_cast<int>(instances.size()), jobs, [&](int i) {
      const tasks::TaskInstance& inst = instances[i];
      const decode::RolloutResult r =
          decode::rollout(ctx, inst, arms[a].config, arm_rng.split(inst.id), /*with_profile=*/true);
      InstanceOutcome& o = outs[i];
      o.instance_id = inst.id;
      o.correct = tasks::verify_answer(v, inst, r.trajectory.answer);
      o.length = thought_length(v, r.trajectory.state);
      o.mean_pfp = r.profile.mean_pfp;
      o.terminated = r.trajectory.terminated;
    });

    ArmMetrics m;
    m.name = arms[a].name;
    std::vector<double> lens;
    for (const InstanceOutcome& o : outs) {
      m.pass1 += o.correct ? 1.0 : 0.0;
      m.mean_length += o.length;
      m.mean_pfp += o.mean_pfp;
      lens.push_back(o.length);
    }
    const double n = static_cast<double>(outs.size());
    m.pass1 /= n;
    m.mean_length /= n;
    m.mean_pfp /= n;
    m.median_length = detail::median(std::move(lens));
    cmp.arms.push_back(std::move(m));
  }

  cmp.baseline_arm = 0;
  cmp.flow_arm = 1;
  for (size_t a = 0; a < arms.size(); ++a) {
    if (arms[a].config.strategy == decode::Strategy::flow_greedy) {
      cmp.flow_arm = static_cast<int>(a);
      break;
    }
  }
  classify_transitions(cmp.outcomes[cmp.baseline_arm], cmp.outcomes[cmp.flow_arm],
                       cmp.transitions, cmp.counts);
  return cmp;
}

// ===========================================================================
// Budget sweep
// ===========================================================================

struct SweepRow {
  std::string arm;
  int budget = 0;  // t_max
  double pass1 = 0.0;
  double mean_length = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::vector<double> length_slope;  // least-squares slope per arm, in rows' arm order
  std::vector<std::string> arm_names;
};

/// Accuracy and mean length per (arm, horizon budget), plus the saturation
/// diagnostic: the least-squares slope of mean length across budgets.
inline SweepResult budget_sweep(const flow::FlowContext& ctx,
                                const std::vector<tasks::TaskInstance>& instances,
                                const std::vector<int>& budgets, const std::vector<ArmSpec>& arms,
                                uint64_t seed, int jobs = 1) {
  for (size_t i = 1; i < budgets.size(); ++i) {
    if (budgets[i] <= budgets[i - 1])
      throw std::invalid_argument("budget_sweep: budgets must be strictly increasing");
  }
  if (budgets.empty()) throw std::invalid_argument("budget_sweep: no budgets");
  const Vocab& v = ctx.prior->vocab();
  SweepResult out;
  const Rng root = Rng(seed).split("sweep");
  for (const ArmSpec& arm : arms) {
    out.arm_names.push_back(arm.name);
    std::vector<double> lens;
    for (const int b : budgets) {
      decode::DecodeConfig cfg = arm.config;
      cfg.t_max = b;
      std::vector<char> correct(instances.size(), 0);
      std::vector<int> length(instances.size(), 0);
      const Rng arm_rng = root.split(arm.name).split(static_cast<uint64_t>(b));
      parallel_for(static_cast<int>(instances.size()), jobs, [&](int i) {
        const decode::RolloutResult r =
            decode::rollout(ctx, instances[i], cfg, arm_rng.split(instances[i].id));
        correct[i] = tasks::verify_answer(v, instances[i], r.trajectory.answer) ? 1 : 0;
        length[i] = thought_length(v, r.trajectory.state);
      });
      SweepRow row;
      row.arm = arm.name;
      row.budget = b;
      for (size_t i = 0; i < instances.size(); ++i) {
        row.pass1 += correct[i];
        row.mean_length += length[i];
      }
      row.pass1 /= static_cast<double>(instances.size());
      row.mean_length /= static_cast<double>(instances.size());
      lens.push_back(row.mean_length);
      out.rows.push_back(row);
    }
    // Least-squares slope of mean length against budget.
    double bx = 0.0, by = 0.0;
    for (size_t i = 0; i < budgets.size(); ++i) {
      bx += budgets[i];
      by += lens[i];
    }
    bx /= budgets.size();
    by /= budgets.size();
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < budgets.size(); ++i) {
      num += (budgets[i] - bx) * (lens[i] - by);
      den += (budgets[i] - bx) * (budgets[i] - bx);
    }
    out.length_slope.push_back(den > 0.0 ? num / den : 0.0);
  }
  return out;
}

}  // namespace flowcot::eval
