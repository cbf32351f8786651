#include "flowcot/core.hpp"
#include "flowcot/policy.hpp"
#include "flowcot/rng.hpp"
#include "flowcot/tasks.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <vector>

using namespace flowcot;

namespace {

// Small vocab with exactly 4 thought-emittable tokens (v0 v1 f0 <eot>).
Vocab small_vocab() { return Vocab::make(2, 1); }

State state_with(const Vocab&, std::vector<TokenId> query, std::vector<TokenId> thought) {
  State s;
  s.query = std::move(query);
  s.thought = std::move(thought);
  return s;
}

}  // namespace

TEST_CASE("vocab layout invariants") {
  const Vocab v = Vocab::make(5, 3);
  REQUIRE(v.size() == 3 * 5 + 3 + 1);

  int eot_count = 0;
  std::vector<TokenId> answers;
  for (TokenId t = 0; t < v.size(); ++t) {
    if (v.role(t) == TokenRole::end_of_thought) ++eot_count;
    if (v.role(t) == TokenRole::answer) answers.push_back(t);
  }
  REQUIRE(eot_count == 1);
  REQUIRE(static_cast<int>(answers.size()) == v.modulus);
  for (size_t i = 1; i < answers.size(); ++i) REQUIRE(answers[i] == answers[i - 1] + 1);  // contiguous
  REQUIRE(v.answer_begin() == answers.front());

  REQUIRE(v.thought_emittable(v.value_token(2)));
  REQUIRE(v.thought_emittable(v.filler_token(0)));
  REQUIRE(v.thought_emittable(v.eot()));
  REQUIRE_FALSE(v.thought_emittable(v.answer_token(0)));
  REQUIRE_FALSE(v.thought_emittable(v.placeholder()));
  REQUIRE_FALSE(v.thought_emittable(v.op_token(1)));
}

TEST_CASE("state invariants are enforced") {
  const Vocab v = small_vocab();
  State ok = state_with(v, {v.value_token(0)}, {v.value_token(1), v.eot()});
  REQUIRE_NOTHROW(validate_state(v, ok));
  REQUIRE(ok.step_index() == 2);
  REQUIRE(ok.terminal(v));

  State answer_in_thought = state_with(v, {v.value_token(0)}, {v.answer_token(0)});
  REQUIRE_THROWS_AS(validate_state(v, answer_in_thought), std::invalid_argument);

  State eot_mid = state_with(v, {v.value_token(0)}, {v.eot(), v.value_token(1)});
  REQUIRE_THROWS_AS(validate_state(v, eot_mid), std::invalid_argument);
}

TEST_CASE("trajectory invariants") {
  const Vocab v = small_vocab();
  Trajectory t;
  t.state = state_with(v, {v.value_token(0)}, {v.value_token(1), v.eot()});
  t.answer = v.answer_token(1);
  t.log_probs = {-0.5, -0.25};
  REQUIRE_NOTHROW(validate_trajectory(v, t));

  SECTION("log_probs length mismatch") {
    t.log_probs.pop_back();
    REQUIRE_THROWS_AS(validate_trajectory(v, t), std::invalid_argument);
  }
  SECTION("positive log_prob") {
    t.log_probs[0] = 0.5;
    REQUIRE_THROWS_AS(validate_trajectory(v, t), std::invalid_argument);
  }
  SECTION("answer must be answer-role") {
    t.answer = v.eot();
    REQUIRE_THROWS_AS(validate_trajectory(v, t), std::invalid_argument);
  }
}

TEST_CASE("uniform tabular policy gives ln(1/4) over the 4 emittable tokens") {
  const Vocab v = small_vocab();
  TabularPolicy p(v, 1, false);  // zero logits everywhere = uniform
  const State s = state_with(v, {v.value_token(0)}, {});
  const std::vector<double> lp = next_token_logprobs(p, s);
  REQUIRE(is_normalized(lp));
  for (TokenId t = 0; t < v.size(); ++t) {
    if (v.thought_emittable(t)) {
      REQUIRE(lp[t] == Catch::Approx(std::log(0.25)).margin(1e-12));
    } else {
      REQUIRE(lp[t] == kNegInf);
    }
  }
}

TEST_CASE("logit margin >= 30 behaves as a delta distribution") {
  const Vocab v = small_vocab();
  TabularPolicy p(v, 1, false);
  const State s = state_with(v, {v.value_token(0)}, {});
  p.transition_logit(0, p.window_index(s), v.value_token(1)) = 30.0;
  const std::vector<double> lp = p.next_token_logprobs(s);
  REQUIRE(lp[v.value_token(1)] >= -1e-9);
}

TEST_CASE("answer head: uniform over 2 answers and deterministic emission") {
  const Vocab v = small_vocab();
  TabularPolicy p(v, 1, false);
  State s = state_with(v, {v.value_token(0)}, {v.value_token(1), v.eot()});

  SECTION("uniform head") {
    REQUIRE(answer_logprob(p, s, v.answer_token(0)) == Catch::Approx(std::log(0.5)).margin(1e-12));
  }
  SECTION("answer determined by last content token") {
    // Emission forced on the terminal window; huge margin makes it exact.
    p.answer_logit(p.window_index(s), 1) = 1e9;
    REQUIRE(answer_logprob(p, s, v.answer_token(1)) == 0.0);
  }
  SECTION("non-terminal states are routed to the oracle") {
    s.thought.pop_back();
    REQUIRE_THROWS_WITH(answer_logprob(p, s, v.answer_token(0)),
                        Catch::Matchers::ContainsSubstring("marginal_answer_logprob"));
  }
  SECTION("non-answer token rejected") {
    REQUIRE_THROWS_AS(answer_logprob(p, s, v.eot()), std::invalid_argument);
  }
}

TEST_CASE("normalization and determinism across backends and random states") {
  const Vocab v = Vocab::make(5, 3);
  const TabularPolicy tab = TabularPolicy::random(v, 2, true, 11);
  const LinearSoftmaxPolicy lin = LinearSoftmaxPolicy::random(v, FeatureConfig{}, 12);
  Rng rng(99);
  for (int i = 0; i < 50; ++i) {
    State s;
    s.query = {v.value_token(rng.next_int(5)), v.op_token(1 + rng.next_int(4))};
    const int len = rng.next_int(4);
    for (int j = 0; j < len; ++j) {
      const int pick = rng.next_int(3);
      s.thought.push_back(pick == 0 ? v.value_token(rng.next_int(5))
                                    : pick == 1 ? v.filler_token(rng.next_int(3))
                                                : v.value_token(rng.next_int(5)));
    }
    for (const CondSeqModel* m : {static_cast<const CondSeqModel*>(&tab),
                                  static_cast<const CondSeqModel*>(&lin)}) {
      const std::vector<double> a = m->next_token_logprobs(s);
      const std::vector<double> b = m->next_token_logprobs(s);
      REQUIRE(is_normalized(a));
      REQUIRE(a == b);  // bit-identical
      REQUIRE(is_normalized(m->answer_logprobs(s)));
    }
  }
}

TEST_CASE("fit_mle: single 'a b' trajectory drives p(b|a) to 1 as alpha -> 0") {
  const Vocab v = small_vocab();
  Trajectory t;
  t.state = state_with(v, {v.op_token(1)}, {v.value_token(0), v.value_token(1), v.eot()});
  t.answer = v.answer_token(1);
  t.log_probs = {-0.1, -0.1, -0.1};
  const TabularPolicy p = fit_mle(v, {t}, FitConfig{1, 1e-9, false});
  State after_a = state_with(v, {v.op_token(1)}, {v.value_token(0)});
  REQUIRE(std::exp(p.next_token_logprobs(after_a)[v.value_token(1)]) ==
          Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("fit_mle: Laplace smoothing arithmetic") {
  // After context v0: counts {v1: 3, f0: 1}, alpha = 1, 4 emittable tokens
  // -> p(v1 | v0) = (3 + 1) / (4 + 4) = 0.5.
  const Vocab v = small_vocab();
  std::vector<Trajectory> corpus;
  for (int i = 0; i < 4; ++i) {
    Trajectory t;
    t.state = state_with(v, {v.op_token(1)},
                         {v.value_token(0), i < 3 ? v.value_token(1) : v.filler_token(0), v.eot()});
    t.answer = v.answer_token(i < 3 ? 1 : 0);
    t.log_probs = {-0.1, -0.1, -0.1};
    corpus.push_back(t);
  }
  const TabularPolicy p = fit_mle(v, corpus, FitConfig{1, 1.0, false});
  State after_a = state_with(v, {v.op_token(1)}, {v.value_token(0)});
  REQUIRE(std::exp(p.next_token_logprobs(after_a)[v.value_token(1)]) ==
          Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("fit_mle: filler mass tracks the corpus filler rate") {
  tasks::TaskFamilyConfig cfg;
  cfg.seed = 7;
  const Vocab v = cfg.vocab();
  const auto instances = tasks::generate(cfg, 400);
  const auto corpus = tasks::synthesize_corpus(v, instances, 0.5, 21);
  const TabularPolicy p = fit_mle(v, corpus, FitConfig{2, 0.1, false});

  // Average filler-role mass over corpus prefix states.
  double mass = 0.0;
  int states = 0;
  for (size_t i = 0; i < corpus.size(); i += 7) {
    State s{corpus[i].state.query, {}, std::nullopt};
    for (const TokenId t : corpus[i].state.thought) {
      const std::vector<double> lp = p.next_token_logprobs(s);
      double f = 0.0;
      for (int j = 0; j < v.filler_count; ++j) f += std::exp(lp[v.filler_token(j)]);
      mass += f;
      ++states;
      s.thought.push_back(t);
    }
  }
  REQUIRE(mass / states == Catch::Approx(0.5).margin(0.05));
}

TEST_CASE("fit_mle rejects bad input") {
  const Vocab v = small_vocab();
  REQUIRE_THROWS_AS(fit_mle(v, {}, FitConfig{}), std::invalid_argument);
  Trajectory t;
  t.state = state_with(v, {v.value_token(0)}, {v.eot()});
  t.answer = v.answer_token(0);
  t.log_probs = {-0.1};
  REQUIRE_THROWS_AS(fit_mle(v, {t}, FitConfig{1, 0.0, false}), std::invalid_argument);
}

namespace {

// Central finite difference of log pi(token|state) (or the answer head) in
// one parameter coordinate.
template <typename Policy, typename Eval>
double central_fd(Policy& p, size_t coord, double h, Eval&& f) {
  std::vector<double> delta(p.param_count(), 0.0);
  delta[coord] = h;
  p.apply_delta(delta);
  const double hi = f();
  delta[coord] = -2 * h;
  p.apply_delta(delta);
  const double lo = f();
  delta[coord] = h;
  p.apply_delta(delta);
  return (hi - lo) / (2 * h);
}

template <typename Policy>
void check_grad_against_fd(Policy& p, const State& s, TokenId token, Rng& rng) {
  const size_t n = p.param_count();
  std::vector<double> g(n, 0.0);
  p.grad_log_next(s, token, 1.0, g);
  // A handful of random coordinates plus the steepest one.
  std::vector<size_t> coords;
  for (int i = 0; i < 6; ++i) coords.push_back(rng.next_int(static_cast<int>(n)));
  size_t steepest = 0;
  for (size_t i = 0; i < n; ++i) {
    if (std::abs(g[i]) > std::abs(g[steepest])) steepest = i;
  }
  coords.push_back(steepest);
  for (const size_t c : coords) {
    const double fd =
        central_fd(p, c, 1e-5, [&] { return p.next_token_logprobs(s)[token]; });
    REQUIRE(std::abs(g[c] - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
  }
}

}  // namespace

TEST_CASE("linear softmax analytic gradient matches central finite differences") {
  const Vocab v = Vocab::make(3, 1);
  LinearSoftmaxPolicy p = LinearSoftmaxPolicy::random(v, FeatureConfig{2, 3, true, true}, 5);
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    State s;
    s.query = {v.value_token(rng.next_int(3)), v.op_token(1 + rng.next_int(2))};
    const int len = rng.next_int(3);
    for (int j = 0; j < len; ++j)
      s.thought.push_back(rng.next_double() < 0.5 ? v.value_token(rng.next_int(3))
                                                  : v.filler_token(0));
    TokenId token = v.value_token(rng.next_int(3));
    check_grad_against_fd(p, s, token, rng);
  }
}

TEST_CASE("tabular logit gradient matches central finite differences") {
  const Vocab v = small_vocab();
  TabularPolicy p = TabularPolicy::random(v, 1, false, 17);
  Rng rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    State s;
    s.query = {v.value_token(rng.next_int(2))};
    if (rng.next_double() < 0.5) s.thought.push_back(v.value_token(rng.next_int(2)));
    check_grad_against_fd(p, s, v.value_token(rng.next_int(2)), rng);
  }
}

TEST_CASE("answer head gradients match finite differences") {
  const Vocab v = small_vocab();
  LinearSoftmaxPolicy p = LinearSoftmaxPolicy::random(v, FeatureConfig{}, 23);
  State s;
  s.query = {v.value_token(1), v.op_token(1)};
  s.thought = {v.value_token(0), v.eot()};
  std::vector<double> g(p.param_count(), 0.0);
  p.grad_log_answer(s, 1, 1.0, g);
  Rng rng(7);
  for (int i = 0; i < 10; ++i) {
    const size_t c = rng.next_int(static_cast<int>(p.param_count()));
    const double fd = central_fd(p, c, 1e-5, [&] { return p.answer_logprobs(s)[1]; });
    REQUIRE(std::abs(g[c] - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("label slot: prior view ignores it, posterior views condition on it") {
  const Vocab v = Vocab::make(5, 3);
  const TabularPolicy post = TabularPolicy::random(v, 2, true, 77);
  State s;
  s.query = {v.value_token(2), v.op_token(1)};
  s.thought = {v.value_token(3)};

  const std::vector<double> none = post.next_token_logprobs(s);
  const std::vector<double> gold = post.next_token_logprobs(s.with_label(v.answer_token(3)));
  REQUIRE(none != gold);

  // Placeholder view is the belief-weighted log-space mixture of label views.
  const std::vector<double> latent = post.next_token_logprobs(s.with_label(v.placeholder()));
  REQUIRE(is_normalized(latent));
  const std::vector<double> belief = post.answer_logprobs(s);
  std::vector<double> mixed(v.size(), kNegInf);
  for (TokenId t = 0; t < v.size(); ++t) {
    if (!v.thought_emittable(t)) continue;
    double acc = 0.0;
    for (int y = 0; y < v.modulus; ++y) {
      const std::vector<double> row = post.next_token_logprobs(s.with_label(v.answer_token(y)));
      acc += std::exp(belief[y]) * row[t];
    }
    mixed[t] = acc;
  }
  normalize_logits(mixed);
  for (TokenId t = 0; t < v.size(); ++t) {
    if (std::isfinite(latent[t])) REQUIRE(latent[t] == Catch::Approx(mixed[t]).margin(1e-9));
  }

  // A non-label-aware policy simply ignores the slot.
  const TabularPolicy prior = TabularPolicy::random(v, 2, false, 78);
  REQUIRE(prior.next_token_logprobs(s) == prior.next_token_logprobs(s.with_label(v.answer_token(0))));
}
