#pragma once

/**
 * Conditional sequence models over task vocabularies.
 *
 * CondSeqModel is the contract every other module consumes: a normalized
 * next-token log-probability vector for any state, and a forced answer head
 * p(answer | state) defined for any state (terminal or not - the marginal
 * variant lives in oracle.hpp). Two backends:
 *
 *   TabularPolicy       dense order-k Markov logit tables, optionally with a
 *                       label-slot dimension (posterior views). Exactly
 *                       enumerable; parameters are the raw logits.
 *   LinearSoftmaxPolicy log-linear model over hand-rolled state features with
 *                       analytic gradients.
 *
 * Both are immutable in normal use; RL training owns its copy and mutates it
 * between rollout phases via apply_delta.
 *
 * Label slot semantics (posterior views, label_aware backends only):
 *   - an answer token in the slot selects that label's conditional view;
 *   - the placeholder token selects the self-conditioned view: the model's
 *     own forced-answer belief at the current state is used as a soft label,
 *     which makes the returned distribution the belief-weighted log-space
 *     mixture of the per-label views;
 *   - the answer head never reads the slot.
 */

#include "flowcot/core.hpp"
#include "flowcot/numerics.hpp"
#include "flowcot/rng.hpp"

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace flowcot {

class CondSeqModel {
 public:
  virtual ~CondSeqModel() = default;

  virtual const Vocab& vocab() const = 0;

  /// Normalized log-prob vector over the full vocabulary; non-emittable
  /// tokens carry -inf. log_sum_exp of the result is 0 within 1e-9.
  virtual std::vector<double> next_token_logprobs(const State& state) const = 0;

  /// Forced answer head: normalized log-probs over the answer block, indexed
  /// by answer value (size = modulus). Defined for any state; ignores the
  /// label slot.
  virtual std::vector<double> answer_logprobs(const State& state) const = 0;

  /// Sufficient statistic of the state for the model's present and future
  /// distributions. Memoization key material for the enumeration oracle.
  virtual uint64_t state_signature(const State& state) const = 0;

  virtual std::unique_ptr<CondSeqModel> clone() const = 0;
};

/// A model with an explicit flat parameter vector and analytic gradients of
/// log pi and of the answer head. Gradients accumulate coef * grad into a
/// dense vector sized param_count().
class ParametricPolicy : public CondSeqModel {
 public:
  virtual size_t param_count() const = 0;
  virtual std::span<const double> params() const = 0;
  virtual void set_params(std::span<const double> p) = 0;
  virtual void apply_delta(std::span<const double> delta) = 0;

  /// d/dtheta of log pi(token | state), scaled by coef, added into acc.
  /// The state must be a plain (label-free) view: gradients are only taken
  /// on the generating policy.
  virtual void grad_log_next(const State& state, TokenId token, double coef,
                             std::span<double> acc) const = 0;

  /// d/dtheta of log p(answer_value | state) under the forced answer head.
  virtual void grad_log_answer(const State& state, int answer_value, double coef,
                               std::span<double> acc) const = 0;

  virtual std::unique_ptr<ParametricPolicy> clone_parametric() const = 0;
};

namespace detail {

/// Last-k window of (query ++ thought), oldest first, left-padded with BOS.
inline void window_tokens(const State& s, int k, int bos, std::vector<int>& out) {
  out.assign(k, bos);
  const int nq = static_cast<int>(s.query.size());
  const int nt = static_cast<int>(s.thought.size());
  const int total = nq + nt;
  for (int j = 0; j < k; ++j) {
    const int pos = total - k + j;
    if (pos < 0) continue;
    out[j] = pos < nq ? s.query[pos] : s.thought[pos - nq];
  }
}

}  // namespace detail

// ===========================================================================
// TabularPolicy
// ===========================================================================

class TabularPolicy final : public ParametricPolicy {
 public:
  /// Dense table sized (labels x B^k x V) with all entries set to `fill`
  /// for emittable targets and -inf elsewhere. B = V + 1 (BOS padding id).
  TabularPolicy(Vocab vocab, int order, bool label_aware, double fill = 0.0)
      : vocab_(vocab), order_(order), label_aware_(label_aware) {
    if (order_ < 1) throw std::invalid_argument("TabularPolicy: order must be >= 1");
    base_ = vocab_.size() + 1;
    win_count_ = 1;
    for (int i = 0; i < order_; ++i) {
      win_count_ *= base_;
      if (win_count_ > (1u << 22))
        throw std::invalid_argument(
            "TabularPolicy: vocab^order too large for a dense table (max 2^22 contexts)");
    }
    label_count_ = label_aware_ ? 1 + vocab_.modulus : 1;
    transitions_.assign(static_cast<size_t>(label_count_) * win_count_ * vocab_.size(), kNegInf);
    answers_.assign(static_cast<size_t>(win_count_) * vocab_.modulus, fill);
    for (size_t row = 0; row < static_cast<size_t>(label_count_) * win_count_; ++row) {
      for (TokenId t = 0; t < vocab_.size(); ++t) {
        if (vocab_.thought_emittable(t)) transitions_[row * vocab_.size() + t] = fill;
      }
    }
  }

  /// Seeded random initialization: emittable logits ~ U(-1, 1).
  static TabularPolicy random(Vocab vocab, int order, bool label_aware, uint64_t seed) {
    TabularPolicy p(vocab, order, label_aware);
    Rng rng = Rng(seed).split("tabular-init");
    for (double& x : p.transitions_) {
      if (std::isfinite(x)) x = rng.uniform(-1.0, 1.0);
    }
    for (double& x : p.answers_) x = rng.uniform(-1.0, 1.0);
    return p;
  }

  const Vocab& vocab() const override { return vocab_; }
  int order() const { return order_; }
  bool label_aware() const { return label_aware_; }

  std::vector<double> next_token_logprobs(const State& state) const override {
    const int win = window_index(state);
    std::vector<double> row;
    if (label_aware_ && state.label_slot && *state.label_slot == vocab_.placeholder()) {
      // Self-conditioned view: belief-weighted log-space mixture of labels.
      const std::vector<double> belief = answer_logprobs(state);
      row.assign(vocab_.size(), kNegInf);
      for (TokenId t = 0; t < vocab_.size(); ++t) {
        if (!vocab_.thought_emittable(t)) continue;
        double acc = 0.0;
        for (int y = 0; y < vocab_.modulus; ++y) {
          acc += std::exp(belief[y]) * transitions_[trans_idx(1 + y, win, t)];
        }
        row[t] = acc;
      }
    } else {
      const int lab = label_index(state);
      row.assign(transitions_.begin() + trans_idx(lab, win, 0),
                 transitions_.begin() + trans_idx(lab, win, 0) + vocab_.size());
    }
    normalize_logits(row);
    return row;
  }

  std::vector<double> answer_logprobs(const State& state) const override {
    const int win = window_index(state);
    std::vector<double> row(answers_.begin() + static_cast<size_t>(win) * vocab_.modulus,
                            answers_.begin() + static_cast<size_t>(win + 1) * vocab_.modulus);
    normalize_logits(row);
    return row;
  }

  uint64_t state_signature(const State& state) const override {
    // (label, window) is sufficient: the table is step-independent.
    int lab = 0;
    if (label_aware_ && state.label_slot) {
      lab = *state.label_slot == vocab_.placeholder() ? label_count_ : label_index(state);
    }
    return static_cast<uint64_t>(lab) * win_count_ + static_cast<uint64_t>(window_index(state));
  }

  std::unique_ptr<CondSeqModel> clone() const override {
    return std::make_unique<TabularPolicy>(*this);
  }
  std::unique_ptr<ParametricPolicy> clone_parametric() const override {
    return std::make_unique<TabularPolicy>(*this);
  }

  // -- parameters: [transitions..., answers...] -----------------------------

  size_t param_count() const override { return transitions_.size() + answers_.size(); }

  std::span<const double> params() const override {
    rebuild_param_cache();
    return {param_cache_.data(), param_cache_.size()};
  }

  void set_params(std::span<const double> p) override {
    if (p.size() != param_count()) throw std::invalid_argument("TabularPolicy: bad param size");
    std::copy(p.begin(), p.begin() + transitions_.size(), transitions_.begin());
    std::copy(p.begin() + transitions_.size(), p.end(), answers_.begin());
  }

  void apply_delta(std::span<const double> delta) override {
    if (delta.size() != param_count()) throw std::invalid_argument("TabularPolicy: bad delta size");
    for (size_t i = 0; i < transitions_.size(); ++i) transitions_[i] += delta[i];
    for (size_t i = 0; i < answers_.size(); ++i) answers_[i] += delta[transitions_.size() + i];
  }

  void grad_log_next(const State& state, TokenId token, double coef,
                     std::span<double> acc) const override {
    if (state.label_slot)
      throw std::invalid_argument("TabularPolicy: gradients are defined on label-free states");
    const int win = window_index(state);
    const std::vector<double> lp = next_token_logprobs(state);
    if (!std::isfinite(lp[token]))
      throw std::invalid_argument("TabularPolicy: grad_log_next on non-emittable token");
    for (TokenId t = 0; t < vocab_.size(); ++t) {
      if (!std::isfinite(lp[t])) continue;
      const double g = (t == token ? 1.0 : 0.0) - std::exp(lp[t]);
      acc[trans_idx(0, win, t)] += coef * g;
    }
  }

  void grad_log_answer(const State& state, int answer_value, double coef,
                       std::span<double> acc) const override {
    const int win = window_index(state);
    const std::vector<double> lp = answer_logprobs(state);
    const size_t off = transitions_.size() + static_cast<size_t>(win) * vocab_.modulus;
    for (int y = 0; y < vocab_.modulus; ++y) {
      const double g = (y == answer_value ? 1.0 : 0.0) - std::exp(lp[y]);
      acc[off + y] += coef * g;
    }
  }

  // -- direct table access (construction, fitting, tests) -------------------

  double& transition_logit(int label, int win, TokenId t) { return transitions_[trans_idx(label, win, t)]; }
  double& answer_logit(int win, int value) {
    return answers_[static_cast<size_t>(win) * vocab_.modulus + value];
  }
  std::span<const double> transitions() const { return transitions_; }
  std::span<const double> answers() const { return answers_; }
  std::span<double> mutable_transitions() { return transitions_; }
  std::span<double> mutable_answers() { return answers_; }

  int window_index(const State& s) const {
    std::vector<int> w;
    detail::window_tokens(s, order_, vocab_.size(), w);
    uint64_t idx = 0;
    for (const int d : w) idx = idx * base_ + static_cast<uint64_t>(d);
    if (idx >= win_count_) throw std::runtime_error("TabularPolicy: context out of table range");
    return static_cast<int>(idx);
  }

  int win_count() const { return static_cast<int>(win_count_); }
  int label_count() const { return label_count_; }

 private:
  int label_index(const State& s) const {
    if (!label_aware_ || !s.label_slot) return 0;
    const TokenId lab = *s.label_slot;
    if (vocab_.is_answer(lab)) return 1 + vocab_.answer_value(lab);
    if (lab == vocab_.placeholder())
      throw std::logic_error("TabularPolicy: placeholder slot handled by mixture path");
    throw std::invalid_argument("TabularPolicy: label slot must hold an answer or the placeholder");
  }

  size_t trans_idx(int label, int win, TokenId t) const {
    return (static_cast<size_t>(label) * win_count_ + static_cast<size_t>(win)) * vocab_.size() +
           static_cast<size_t>(t);
  }

  void rebuild_param_cache() const {
    param_cache_.resize(param_count());
    std::copy(transitions_.begin(), transitions_.end(), param_cache_.begin());
    std::copy(answers_.begin(), answers_.end(), param_cache_.begin() + transitions_.size());
  }

  Vocab vocab_;
  int order_;
  bool label_aware_;
  uint64_t base_ = 0;
  uint64_t win_count_ = 0;
  int label_count_ = 1;
  std::vector<double> transitions_;
  std::vector<double> answers_;
  mutable std::vector<double> param_cache_;
};

// ===========================================================================
// LinearSoftmaxPolicy
// ===========================================================================

struct FeatureConfig {
  int order = 2;           // window size for the token bag
  int step_buckets = 4;    // step-index buckets 0..step_buckets-1, last saturates
  bool query_bag = true;   // include query token counts
  bool label_features = true;

  bool operator==(const FeatureConfig&) const = default;
};

class LinearSoftmaxPolicy final : public ParametricPolicy {
 public:
  LinearSoftmaxPolicy(Vocab vocab, FeatureConfig fc)
      : vocab_(vocab), fc_(fc) {
    if (fc_.order < 1) throw std::invalid_argument("LinearSoftmaxPolicy: order must be >= 1");
    if (fc_.step_buckets < 1)
      throw std::invalid_argument("LinearSoftmaxPolicy: step_buckets must be >= 1");
    feature_dim_ = 1 + vocab_.size() + fc_.step_buckets + (fc_.query_bag ? vocab_.size() : 0) +
                   (fc_.label_features ? vocab_.modulus : 0);
    weights_.assign(static_cast<size_t>(feature_dim_) * vocab_.size(), 0.0);
  }

  static LinearSoftmaxPolicy random(Vocab vocab, FeatureConfig fc, uint64_t seed) {
    LinearSoftmaxPolicy p(vocab, fc);
    Rng rng = Rng(seed).split("linear-init");
    for (double& w : p.weights_) w = rng.uniform(-0.5, 0.5);
    return p;
  }

  const Vocab& vocab() const override { return vocab_; }
  const FeatureConfig& feature_config() const { return fc_; }
  int feature_dim() const { return feature_dim_; }

  /// Sparse feature map. with_label controls whether the label-slot features
  /// are populated (they never are for the answer head).
  std::vector<std::pair<int, double>> features(const State& s, bool with_label) const {
    std::vector<std::pair<int, double>> phi;
    phi.emplace_back(0, 1.0);  // bias
    std::vector<int> w;
    detail::window_tokens(s, fc_.order, vocab_.size(), w);
    std::vector<double> bag(vocab_.size(), 0.0);
    for (const int t : w) {
      if (t < vocab_.size()) bag[t] += 1.0;
    }
    int off = 1;
    for (TokenId t = 0; t < vocab_.size(); ++t) {
      if (bag[t] != 0.0) phi.emplace_back(off + t, bag[t]);
    }
    off += vocab_.size();
    const int bucket = std::min(s.step_index(), fc_.step_buckets - 1);
    phi.emplace_back(off + bucket, 1.0);
    off += fc_.step_buckets;
    if (fc_.query_bag) {
      std::vector<double> qbag(vocab_.size(), 0.0);
      for (const TokenId t : s.query) qbag[t] += 1.0;
      for (TokenId t = 0; t < vocab_.size(); ++t) {
        if (qbag[t] != 0.0) phi.emplace_back(off + t, qbag[t]);
      }
      off += vocab_.size();
    }
    if (fc_.label_features && with_label && s.label_slot) {
      const TokenId lab = *s.label_slot;
      if (vocab_.is_answer(lab)) {
        phi.emplace_back(off + vocab_.answer_value(lab), 1.0);
      } else if (lab == vocab_.placeholder()) {
        // Soft label: the model's own forced-answer belief.
        const std::vector<double> belief = answer_logprobs(s);
        for (int y = 0; y < vocab_.modulus; ++y) {
          const double p = std::exp(belief[y]);
          if (p > 0.0) phi.emplace_back(off + y, p);
        }
      } else {
        throw std::invalid_argument(
            "LinearSoftmaxPolicy: label slot must hold an answer or the placeholder");
      }
    }
    return phi;
  }

  std::vector<double> next_token_logprobs(const State& state) const override {
    const auto phi = features(state, /*with_label=*/true);
    std::vector<double> row(vocab_.size(), kNegInf);
    for (TokenId t = 0; t < vocab_.size(); ++t) {
      if (vocab_.thought_emittable(t)) row[t] = dot(phi, t);
    }
    normalize_logits(row);
    return row;
  }

  std::vector<double> answer_logprobs(const State& state) const override {
    const auto phi = features(state, /*with_label=*/false);
    std::vector<double> row(vocab_.modulus, 0.0);
    for (int y = 0; y < vocab_.modulus; ++y) row[y] = dot(phi, vocab_.answer_token(y));
    normalize_logits(row);
    return row;
  }

  uint64_t state_signature(const State& state) const override {
    uint64_t h = kFnvOffset;
    std::vector<int> w;
    detail::window_tokens(state, fc_.order, vocab_.size(), w);
    for (const int d : w) h = fnv1a_u64(static_cast<uint64_t>(d), h);
    h = fnv1a_u64(static_cast<uint64_t>(std::min(state.step_index(), fc_.step_buckets - 1)), h);
    for (const TokenId t : state.query) h = fnv1a_u64(static_cast<uint64_t>(t) + 1, h);
    if (state.label_slot) h = fnv1a_u64(static_cast<uint64_t>(*state.label_slot) + 7, h);
    return h;
  }

  std::unique_ptr<CondSeqModel> clone() const override {
    return std::make_unique<LinearSoftmaxPolicy>(*this);
  }
  std::unique_ptr<ParametricPolicy> clone_parametric() const override {
    return std::make_unique<LinearSoftmaxPolicy>(*this);
  }

  size_t param_count() const override { return weights_.size(); }
  std::span<const double> params() const override { return weights_; }
  void set_params(std::span<const double> p) override {
    if (p.size() != weights_.size())
      throw std::invalid_argument("LinearSoftmaxPolicy: bad param size");
    weights_.assign(p.begin(), p.end());
  }
  void apply_delta(std::span<const double> delta) override {
    if (delta.size() != weights_.size())
      throw std::invalid_argument("LinearSoftmaxPolicy: bad delta size");
    for (size_t i = 0; i < weights_.size(); ++i) weights_[i] += delta[i];
  }

  void grad_log_next(const State& state, TokenId token, double coef,
                     std::span<double> acc) const override {
    if (state.label_slot)
      throw std::invalid_argument("LinearSoftmaxPolicy: gradients are defined on label-free states");
    const auto phi = features(state, /*with_label=*/false);
    const std::vector<double> lp = next_token_logprobs(state);
    if (!std::isfinite(lp[token]))
      throw std::invalid_argument("LinearSoftmaxPolicy: grad_log_next on non-emittable token");
    for (TokenId t = 0; t < vocab_.size(); ++t) {
      if (!std::isfinite(lp[t])) continue;
      const double g = (t == token ? 1.0 : 0.0) - std::exp(lp[t]);
      for (const auto& [f, v] : phi) acc[widx(f, t)] += coef * g * v;
    }
  }

  void grad_log_answer(const State& state, int answer_value, double coef,
                       std::span<double> acc) const override {
    const auto phi = features(state, /*with_label=*/false);
    const std::vector<double> lp = answer_logprobs(state);
    for (int y = 0; y < vocab_.modulus; ++y) {
      const double g = (y == answer_value ? 1.0 : 0.0) - std::exp(lp[y]);
      const TokenId t = vocab_.answer_token(y);
      for (const auto& [f, v] : phi) acc[widx(f, t)] += coef * g * v;
    }
  }

  double& weight(int feature, TokenId token) { return weights_[widx(feature, token)]; }

 private:
  double dot(const std::vector<std::pair<int, double>>& phi, TokenId t) const {
    double s = 0.0;
    for (const auto& [f, v] : phi) s += weights_[widx(f, t)] * v;
    return s;
  }
  size_t widx(int feature, TokenId token) const {
    return static_cast<size_t>(feature) * vocab_.size() + static_cast<size_t>(token);
  }

  Vocab vocab_;
  FeatureConfig fc_;
  int feature_dim_;
  std::vector<double> weights_;
};

// ===========================================================================
// Free operations
// ===========================================================================

/// Normalized next-token log-probs after validating the state.
inline std::vector<double> next_token_logprobs(const CondSeqModel& model, const State& state) {
  validate_state(model.vocab(), state);
  return model.next_token_logprobs(state);
}

/// Direct-emission answer log-probability. Requires a terminal state; for
/// non-terminal states the marginal lives in oracle::marginal_answer_logprob.
inline double answer_logprob(const CondSeqModel& model, const State& state, TokenId answer) {
  const Vocab& v = model.vocab();
  validate_state(v, state);
  if (!v.is_answer(answer))
    throw std::invalid_argument("answer_logprob: token is not answer-role");
  if (!state.terminal(v))
    throw std::invalid_argument(
        "answer_logprob: state is not terminal; use oracle::marginal_answer_logprob for "
        "non-terminal states");
  return model.answer_logprobs(state)[v.answer_value(answer)];
}

struct FitConfig {
  int order = 2;
  double alpha = 0.5;
  bool label_aware = false;
};

/// Add-alpha MLE of an order-k tabular policy from a demonstration corpus.
///
/// Transition counts are collected label-free, and additionally under the
/// trajectory's own answer label when label_aware is set (posterior view).
/// The answer head is fitted on every prefix window -> final answer, which
/// makes it a forced-answer predictor at arbitrary states, not only at
/// terminal ones.
inline TabularPolicy fit_mle(const Vocab& vocab, const std::vector<Trajectory>& corpus,
                             const FitConfig& cfg) {
  if (corpus.empty()) throw std::invalid_argument("fit_mle: empty corpus");
  if (!(cfg.alpha > 0.0)) throw std::invalid_argument("fit_mle: alpha must be > 0");

  TabularPolicy policy(vocab, cfg.order, cfg.label_aware);
  std::vector<double> tcounts(policy.transitions().size(), 0.0);
  std::vector<double> acounts(policy.answers().size(), 0.0);

  for (const Trajectory& traj : corpus) {
    validate_trajectory(vocab, traj);
    const int ans_val = vocab.answer_value(traj.answer);
    State s{traj.state.query, {}, std::nullopt};
    for (size_t i = 0; i <= traj.state.thought.size(); ++i) {
      const int win = policy.window_index(s);
      acounts[static_cast<size_t>(win) * vocab.modulus + ans_val] += 1.0;
      if (i == traj.state.thought.size()) break;
      const TokenId t = traj.state.thought[i];
      const size_t row = static_cast<size_t>(win) * vocab.size();
      tcounts[row + t] += 1.0;
      if (cfg.label_aware) {
        const size_t lrow =
            (static_cast<size_t>(1 + ans_val) * policy.win_count() + win) * vocab.size();
        tcounts[lrow + t] += 1.0;
      }
      s.thought.push_back(t);
    }
  }

  auto trans = policy.mutable_transitions();
  for (size_t i = 0; i < trans.size(); ++i) {
    if (std::isfinite(trans[i])) trans[i] = std::log(tcounts[i] + cfg.alpha);
  }
  auto ans = policy.mutable_answers();
  for (size_t i = 0; i < ans.size(); ++i) ans[i] = std::log(acounts[i] + cfg.alpha);
  return policy;
}

}  // namespace flowcot
