#include "flowcot/tasks.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

using namespace flowcot;
using namespace flowcot::tasks;

TEST_CASE("chain arithmetic: start 2 +1 +1 -> 4, start 4 +3 -> 2 (mod 5)") {
  TaskFamilyConfig cfg;  // modulus 5
  const Vocab v = cfg.vocab();

  const TaskInstance a = make_instance(cfg, 2, std::vector<int>{1, 1});
  REQUIRE(a.gold_answer == v.answer_token(4));
  REQUIRE(a.gold_chain == std::vector<TokenId>{v.value_token(3), v.value_token(4), v.eot()});

  const TaskInstance b = make_instance(cfg, 4, std::vector<int>{3});
  REQUIRE(b.gold_answer == v.answer_token(2));
}

TEST_CASE("gold chains execute to the gold answer and contain no fillers") {
  TaskFamilyConfig cfg;
  cfg.seed = 3;
  const Vocab v = cfg.vocab();
  for (const TaskInstance& inst : generate(cfg, 50)) {
    REQUIRE(execute_thought(v, inst, inst.gold_chain) == inst.gold_answer);
    for (const TokenId t : inst.gold_chain) REQUIRE_FALSE(v.is_filler(t));
  }
}

TEST_CASE("generate is deterministic under the seed") {
  TaskFamilyConfig cfg;
  cfg.seed = 7;
  const auto a = generate(cfg, 100);
  const auto b = generate(cfg, 100);
  REQUIRE(a.size() == 100);
  for (size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].id == b[i].id);
    REQUIRE(a[i].query == b[i].query);
  }
}

TEST_CASE("vocab_size validation names the required minimum") {
  TaskFamilyConfig cfg;
  cfg.vocab_size = 10;  // need 3*5 + 3 + 1 = 19
  REQUIRE_THROWS_WITH(generate(cfg, 1), Catch::Matchers::ContainsSubstring("19"));
}

TEST_CASE("synthesize_corpus: rho = 0 reproduces gold chains exactly") {
  TaskFamilyConfig cfg;
  cfg.seed = 5;
  const Vocab v = cfg.vocab();
  const auto instances = generate(cfg, 20);
  const auto corpus = synthesize_corpus(v, instances, 0.0, 9);
  REQUIRE(corpus.size() == instances.size());
  for (size_t i = 0; i < corpus.size(); ++i) {
    REQUIRE(corpus[i].state.thought == instances[i].gold_chain);
    REQUIRE(corpus[i].answer == instances[i].gold_answer);
    REQUIRE_NOTHROW(validate_trajectory(v, corpus[i]));
  }
}

TEST_CASE("synthesize_corpus: geometric insertion gives mean length |g|/(1-rho)") {
  TaskFamilyConfig cfg;
  cfg.chain_ops_min = cfg.chain_ops_max = 3;  // gold chain length 4 incl. end-of-thought
  cfg.seed = 11;
  const Vocab v = cfg.vocab();
  const auto instances = generate(cfg, 10000);
  const auto corpus = synthesize_corpus(v, instances, 0.5, 13);
  double mean = 0.0;
  for (const Trajectory& t : corpus) mean += static_cast<double>(t.state.thought.size());
  mean /= static_cast<double>(corpus.size());
  REQUIRE(mean == Catch::Approx(8.0).margin(0.2));
}

TEST_CASE("filler invariance: stripping fillers leaves the gold answer") {
  TaskFamilyConfig cfg;
  cfg.seed = 17;
  const Vocab v = cfg.vocab();
  const auto instances = generate(cfg, 100);
  const auto corpus = synthesize_corpus(v, instances, 0.6, 19);
  for (size_t i = 0; i < corpus.size(); ++i) {
    std::vector<TokenId> stripped;
    for (const TokenId t : corpus[i].state.thought) {
      if (!v.is_filler(t)) stripped.push_back(t);
    }
    REQUIRE(execute_thought(v, instances[i], stripped) == instances[i].gold_answer);
    REQUIRE(execute_thought(v, instances[i], corpus[i].state.thought) ==
            instances[i].gold_answer);
  }
}

TEST_CASE("synthesize_corpus is a pure function of (instances, rho, seed)") {
  TaskFamilyConfig cfg;
  cfg.seed = 23;
  const Vocab v = cfg.vocab();
  const auto instances = generate(cfg, 30);
  const auto a = synthesize_corpus(v, instances, 0.4, 99);
  const auto b = synthesize_corpus(v, instances, 0.4, 99);
  for (size_t i = 0; i < a.size(); ++i) REQUIRE(a[i].state.thought == b[i].state.thought);
}

TEST_CASE("verify_answer") {
  TaskFamilyConfig cfg;
  const Vocab v = cfg.vocab();
  const TaskInstance inst = make_instance(cfg, 1, std::vector<int>{2});
  REQUIRE(verify_answer(v, inst, inst.gold_answer));
  REQUIRE_FALSE(verify_answer(v, inst, v.answer_token(0)));
  REQUIRE_THROWS_AS(verify_answer(v, inst, v.placeholder()), std::invalid_argument);
}

TEST_CASE("corpus synthesis rejects bad rates") {
  TaskFamilyConfig cfg;
  const Vocab v = cfg.vocab();
  const auto instances = generate(cfg, 2);
  REQUIRE_THROWS_AS(synthesize_corpus(v, instances, 1.0, 1), std::invalid_argument);
  REQUIRE_THROWS_AS(synthesize_corpus(v, instances, -0.1, 1), std::invalid_argument);
  const Vocab no_fill = Vocab::make(5, 0);
  REQUIRE_THROWS_AS(synthesize_corpus(no_fill, instances, 0.5, 1), std::invalid_argument);
}
