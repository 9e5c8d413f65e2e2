#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include "apc/pipeline.hpp"
#include "apc/scoring.hpp"
#include "doctest.h"
#include "test_backends.hpp"

using namespace apc;
using apc::testing::HashStubBackend;
using apc::testing::ScriptedBackend;

namespace {

Persona numbered_persona(int n) {
  std::vector<std::string> raw;
  for (int i = 0; i < n; ++i) raw.push_back("distinct fact number " + std::to_string(i));
  return validate_persona("Subject", raw);
}

std::string serialize(const std::vector<RelevanceRecord>& records) {
  std::string out;
  for (const auto& r : records) out += to_jsonl(r) + "\n";
  return out;
}

std::string serialize(const std::vector<NliRecord>& records) {
  std::string out;
  for (const auto& r : records) out += to_jsonl(r) + "\n";
  return out;
}

}  // namespace

TEST_CASE("gen_relevant_queries returns scripted completions verbatim") {
  ScriptedBackend backend({"Q one?", "Q two?", "Q three?"});
  const auto queries = gen_relevant_queries({0, "s"}, "X", backend, 3);
  CHECK(queries == std::vector<std::string>{"Q one?", "Q two?", "Q three?"});
  CHECK(backend.generate_calls == 1);
}

TEST_CASE("gen_relevant_queries with n=0 makes no backend calls") {
  ScriptedBackend backend({});
  CHECK(gen_relevant_queries({0, "s"}, "X", backend, 0).empty());
  CHECK(backend.generate_calls == 0);
}

TEST_CASE("gen_relevant_queries regenerates empty completions, then fails") {
  ScriptedBackend recovers({"", "  ", "Q1?", "Q2?", "Q3?"});
  CHECK(gen_relevant_queries({0, "s"}, "X", recovers, 3) ==
        std::vector<std::string>{"Q1?", "Q2?", "Q3?"});

  ScriptedBackend hopeless({"", "", "", "", "", "", "", "", "", ""});
  CHECK_THROWS_WITH_AS(gen_relevant_queries({7, "s"}, "X", hopeless, 2),
                       doctest::Contains("statement 7"), BackendError);
}

TEST_CASE("gen_nli_responses emits entailed, neutral, contradicted in order") {
  ScriptedBackend backend({"yes it is so", "unrelated remark", "no it is not"});
  const GeneratedResponses out = gen_nli_responses({0, "s"}, "q", "X", backend);
  CHECK(out.entailed == "yes it is so");
  CHECK(out.neutral == "unrelated remark");
  CHECK(out.contradicted == "no it is not");
  CHECK(backend.generate_calls == 3);
}

TEST_CASE("relevance dataset matches the closed-form count for |S|=8 defaults") {
  const Persona persona = numbered_persona(8);
  HashStubBackend backend;
  const auto records = build_relevance_dataset(persona, backend, {});
  CHECK(records.size() == 8 * 3 * (1 + 5));  // 144

  // order: per statement, per query, a generated record then its negatives
  for (size_t i = 0; i < records.size(); i += 6) {
    CHECK(records[i].source == "generated");
    CHECK(records[i].label == "relevant");
    for (size_t j = 1; j < 6; ++j) {
      CHECK(records[i + j].source == "discriminated");
      CHECK(records[i + j].query == records[i].query);
      CHECK(records[i + j].statement != records[i].statement);
    }
  }
}

TEST_CASE("relevance dataset with zero negatives is all generated positives") {
  const Persona persona = numbered_persona(4);
  HashStubBackend backend;
  DistillParams params;
  params.relevance_negatives_per_query = 0;
  const auto records = build_relevance_dataset(persona, backend, params);
  CHECK(records.size() == 12);
  for (const auto& r : records) {
    CHECK(r.label == "relevant");
    CHECK(r.source == "generated");
  }
}

TEST_CASE("distill rejects infeasible negative counts") {
  const Persona persona = numbered_persona(2);
  HashStubBackend backend;
  CHECK_THROWS_AS(build_relevance_dataset(persona, backend, {}), ValidationError);  // 5 > 1
  DistillParams params;
  params.nli_distractors_per_pair = 4;
  params.relevance_negatives_per_query = 1;
  CHECK_THROWS_AS(build_nli_dataset(persona, backend, params), ValidationError);
  CHECK_THROWS_AS(build_relevance_dataset(numbered_persona(1), backend, {}), ValidationError);
}

TEST_CASE("same seed reproduces byte-identical datasets") {
  const Persona persona = numbered_persona(5);
  DistillParams params;
  params.relevance_negatives_per_query = 3;
  params.nli_distractors_per_pair = 2;
  params.rng_seed = 7;

  HashStubBackend b1, b2;
  const std::string seed7 = serialize(build_relevance_dataset(persona, b1, params));
  CHECK(seed7 == serialize(build_relevance_dataset(persona, b2, params)));
  HashStubBackend b3, b4;
  CHECK(serialize(build_nli_dataset(persona, b3, params)) ==
        serialize(build_nli_dataset(persona, b4, params)));

  params.rng_seed = 8;  // a different seed samples different negatives
  HashStubBackend b5;
  CHECK(serialize(build_relevance_dataset(persona, b5, params)) != seed7);
}

TEST_CASE("nli dataset matches the closed-form count for |S|=8 defaults") {
  const Persona persona = numbered_persona(8);
  HashStubBackend backend;
  const auto records = build_nli_dataset(persona, backend, {});
  CHECK(records.size() == 8 * 3 * 3 * (1 + 3));  // 288

  // order: self-labeled record then its distractors, responses in E/N/C order
  CHECK(records[0].source == "generated");
  CHECK(records[0].label == "entailed");
  CHECK(records[4].source == "generated");
  CHECK(records[4].label == "neutral");
  CHECK(records[8].source == "generated");
  CHECK(records[8].label == "contradicted");
  for (size_t i = 0; i < records.size(); i += 4) {
    CHECK(records[i].source == "generated");
    for (size_t j = 1; j < 4; ++j) CHECK(records[i + j].source == "discriminated");
  }
}

TEST_CASE("nli dataset with zero distractors is 9 records per statement") {
  const Persona persona = numbered_persona(3);
  HashStubBackend backend;
  DistillParams params;
  params.relevance_negatives_per_query = 0;
  params.nli_distractors_per_pair = 0;
  const auto records = build_nli_dataset(persona, backend, params);
  CHECK(records.size() == 9 * 3);
  int generated = 0;
  for (const auto& r : records) generated += r.source == "generated";
  CHECK(generated == static_cast<int>(records.size()));
}

TEST_CASE("record counts follow the closed forms for |S| in {2,3,8}") {
  struct Case {
    int size;
    int negatives;
    int distractors;
  };
  for (const Case c : {Case{2, 1, 1}, Case{3, 2, 2}, Case{8, 5, 3}}) {
    const Persona persona = numbered_persona(c.size);
    DistillParams params;
    params.relevance_negatives_per_query = c.negatives;
    params.nli_distractors_per_pair = c.distractors;
    HashStubBackend backend;
    const DistillOutput out = run_distillation(persona, backend, params);
    CHECK(out.relevance.size() ==
          static_cast<size_t>(c.size * 3 * (1 + c.negatives)));
    CHECK(out.nli.size() == static_cast<size_t>(c.size * 3 * 3 * (1 + c.distractors)));
  }
}

TEST_CASE("run_distillation feeds both datasets from one stage-1 pass") {
  const Persona persona = numbered_persona(4);
  DistillParams params;
  params.relevance_negatives_per_query = 2;
  params.nli_distractors_per_pair = 1;
  HashStubBackend backend;
  const DistillOutput out = run_distillation(persona, backend, params);

  std::set<std::pair<std::string, std::string>> relevance_pairs;
  for (const auto& r : out.relevance) {
    if (r.source == "generated") relevance_pairs.insert({r.statement, r.query});
  }
  std::set<std::pair<std::string, std::string>> nli_pairs;
  for (const auto& r : out.nli) {
    if (r.source == "generated") nli_pairs.insert({r.statement, r.query});
  }
  CHECK(relevance_pairs == nli_pairs);
}

TEST_CASE("discriminated-relevant pairs can optionally feed stage 3") {
  const Persona persona = numbered_persona(5);
  DistillParams params;
  params.relevance_negatives_per_query = 2;
  params.nli_distractors_per_pair = 1;
  params.feed_discriminated_relevant = true;
  HashStubBackend backend;
  const DistillOutput out = run_distillation(persona, backend, params);

  int extra_pairs = 0;
  for (const auto& r : out.relevance) {
    if (r.source == "discriminated" && r.label == "relevant") ++extra_pairs;
  }
  REQUIRE(extra_pairs > 0);  // the hash stub mixes labels
  CHECK(out.nli.size() == static_cast<size_t>((5 * 3 + extra_pairs) * 3 * (1 + 1)));
}

TEST_CASE("sample_response_pair requests exactly two completions") {
  ScriptedBackend backend({"x", "y"});
  const auto [a, b] = sample_response_pair(backend, "q", {});
  CHECK(a == "x");
  CHECK(b == "y");
  CHECK(backend.generate_calls == 1);
}

TEST_CASE("assign_preference applies a strict margin") {
  CHECK(assign_preference(3.0, 2.5, 0.2) == std::make_pair(0, 1));
  CHECK(assign_preference(2.5, 3.0, 0.2) == std::make_pair(1, 0));
  CHECK_FALSE(assign_preference(2.0, 2.1, 0.2).has_value());
  // exact boundary: |2.2 - 2.0| is 0.2 in the reals, not greater
  CHECK_FALSE(assign_preference(2.0, 2.2, 0.2).has_value());
  CHECK_FALSE(assign_preference(1.0, 1.0, 0.0).has_value());
  CHECK(assign_preference(1.0, 1.5, 0.0) == std::make_pair(1, 0));
  CHECK_THROWS_AS(assign_preference(1.0, 2.0, -0.1), ValidationError);
}

namespace {

Persona nessa_persona() {
  return validate_persona("Nessa", {"Nessa breeds carrier pigeons.", "Nessa cannot read."});
}

OracleTable nessa_oracle() {
  const std::string q = "Tell me about your birds.";
  OracleTable table;
  table.add_relevance("Nessa breeds carrier pigeons.", q, 1.0);
  table.add_relevance("Nessa cannot read.", q, 0.0);
  table.add_nli("Nessa breeds carrier pigeons.", q, "My pigeons carry letters across the strait.",
                NliDist(1.0, 0.0, 0.0));
  table.add_nli("Nessa breeds carrier pigeons.", q, "I keep some birds.", NliDist(0.5, 0.5, 0.0));
  table.add_nli("Nessa breeds carrier pigeons.", q, "I love reading books about birds.",
                NliDist(0.25, 0.75, 0.0));
  table.add_nli("Nessa cannot read.", q, "I love reading books about birds.",
                NliDist(0.0, 0.0, 1.0));
  table.add_nli("Nessa breeds carrier pigeons.", q, "Birds are nice.", NliDist(0.25, 0.75, 0.0));
  table.add_nli("Nessa breeds carrier pigeons.", q, "I raise pigeons.", NliDist(0.75, 0.25, 0.0));
  table.add_nli("Nessa breeds carrier pigeons.", q, "I raise pigeons in my loft.",
                NliDist(0.8125, 0.1875, 0.0));
  table.add_generation("", {"My pigeons carry letters across the strait.", "I keep some birds.",
                            "I love reading books about birds.", "Birds are nice.",
                            "I raise pigeons.", "I raise pigeons in my loft."});
  table.set_fallback(std::nullopt, NliDist(0.0, 1.0, 0.0));
  return table;
}

}  // namespace

TEST_CASE("preference dataset keeps exactly the hand-filtered pairs") {
  const Persona persona = nessa_persona();
  OracleBackend backend(nessa_oracle());
  PreferenceParams params;
  params.pairs_before_filter = 3;

  // hand-scored deltas per response: 1.0, 0.5 | -0.75, 0.25 | 0.75, 0.8125
  const PreferenceDataset dataset = build_preference_dataset(
      persona, {"Tell me about your birds."}, backend, backend, params);
  CHECK(dataset.candidates == 3);
  CHECK(dataset.dropped == 1);
  REQUIRE(dataset.records.size() == 2);
  CHECK(dataset.records[0].chosen == "My pigeons carry letters across the strait.");
  CHECK(dataset.records[0].rejected == "I keep some birds.");
  CHECK(dataset.records[0].score_chosen == 1.0);
  CHECK(dataset.records[0].score_rejected == 0.5);
  CHECK(dataset.records[1].chosen == "Birds are nice.");
  CHECK(dataset.records[1].rejected == "I love reading books about birds.");
  CHECK(dataset.records[1].score_chosen == 0.25);
  CHECK(dataset.records[1].score_rejected == -0.75);
}

TEST_CASE("preference dataset margin extremes") {
  const Persona persona = nessa_persona();
  PreferenceParams params;
  params.pairs_before_filter = 3;

  params.score_margin = 1e9;
  OracleBackend huge(nessa_oracle());
  CHECK(build_preference_dataset(persona, {"Tell me about your birds."}, huge, huge, params)
            .records.empty());

  params.score_margin = 0.0;
  OracleBackend zero(nessa_oracle());
  CHECK(build_preference_dataset(persona, {"Tell me about your birds."}, zero, zero, params)
            .records.size() == 3);  // every sampled pair has unequal scores
}

TEST_CASE("preference dataset validates its inputs") {
  const Persona persona = nessa_persona();
  OracleBackend backend(nessa_oracle());
  CHECK_THROWS_AS(build_preference_dataset(persona, {}, backend, backend, {}), ValidationError);
}

TEST_CASE("preference errors carry query context") {
  const Persona persona = nessa_persona();
  OracleTable table;
  table.add_generation("", {"a", "b"});
  OracleBackend backend(std::move(table));  // no judge entries: scoring will miss
  PreferenceParams params;
  params.pairs_before_filter = 1;
  CHECK_THROWS_WITH_AS(
      build_preference_dataset(persona, {"Tell me about your birds."}, backend, backend, params),
      doctest::Contains("Tell me about your birds."), BackendError);
}

TEST_CASE("dpo_pair_loss hand values") {
  // equal log-ratios: sigma(0) = 1/2
  CHECK(dpo_pair_loss({1.0, -2.0, -3.0, -2.0, -3.0}) ==
        doctest::Approx(std::numbers::ln2).epsilon(1e-14));
  // beta=1, ratio difference ln 3: -log(3/4)
  const double ln3 = std::log(3.0);
  CHECK(dpo_pair_loss({1.0, ln3, 0.0, 0.0, 0.0}) ==
        doctest::Approx(std::log(4.0 / 3.0)).epsilon(1e-14));
  // beta=0 collapses to ln 2 regardless of the log-probs
  CHECK(dpo_pair_loss({0.0, 123.0, -55.0, 9.0, 2.0}) ==
        doctest::Approx(std::numbers::ln2).epsilon(1e-14));
  CHECK_THROWS_AS(dpo_pair_loss({1.0, std::nan(""), 0.0, 0.0, 0.0}), ValidationError);
  CHECK_THROWS_AS(dpo_pair_loss({-1.0, 0.0, 0.0, 0.0, 0.0}), ValidationError);
}

TEST_CASE("dpo_pair_loss is positive and stable for extreme gaps") {
  // strictly positive while exp(-z) stays representable
  CHECK(dpo_pair_loss({1.0, 50.0, 0.0, 0.0, 0.0}) > 0.0);
  CHECK(dpo_pair_loss({1.0, 50.0, 0.0, 0.0, 0.0}) < 1e-20);
  CHECK(dpo_pair_loss({5.0, -200.0, 0.0, 0.0, 0.0}) == doctest::Approx(1000.0).epsilon(1e-12));
  CHECK(std::isfinite(dpo_pair_loss({50.0, -500.0, 500.0, 0.0, 0.0})));
}

TEST_CASE("dpo_pair_loss moves the right way under finite differences") {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> logp(-5.0, 0.0);
  std::uniform_real_distribution<double> betas(0.05, 4.0);
  const double h = 1e-4;
  for (int i = 0; i < 100; ++i) {
    DpoPairTerms t{betas(rng), logp(rng), logp(rng), logp(rng), logp(rng)};
    DpoPairTerms up_w = t;
    up_w.policy_logp_w += h;
    CHECK(dpo_pair_loss(up_w) < dpo_pair_loss(t));  // improving the winner lowers the loss
    DpoPairTerms up_l = t;
    up_l.policy_logp_l += h;
    CHECK(dpo_pair_loss(up_l) > dpo_pair_loss(t));  // improving the loser raises it
  }
}

TEST_CASE("constraint_rewards reads the two satisfaction modes") {
  const ConstraintRewards full = constraint_rewards(NliDist(1, 0, 0));
  CHECK(full.active == 1.0);
  CHECK(full.passive == 1.0);
  const ConstraintRewards neutral = constraint_rewards(NliDist(0, 1, 0));
  CHECK(neutral.active == 0.0);
  CHECK(neutral.passive == 1.0);
  const ConstraintRewards mixed = constraint_rewards(NliDist(0.2, 0.3, 0.5));
  CHECK(mixed.active == 0.2);
  CHECK(mixed.passive == 0.5);
}

TEST_CASE("apc_dpo_loss hand values") {
  CHECK(apc_dpo_loss(std::vector<PerStatementDpoTerm>{}) == 0.0);
  CHECK(apc_dpo_loss(std::vector<PerStatementDpoTerm>{{1.0, std::numbers::ln2, 123.0}}) ==
        std::numbers::ln2);
  CHECK(apc_dpo_loss(std::vector<PerStatementDpoTerm>{{0.5, 0.4, 0.8}}) ==
        doctest::Approx(0.6).epsilon(1e-12));
  CHECK_THROWS_AS(apc_dpo_loss(std::vector<PerStatementDpoTerm>{{0.5, -0.1, 0.0}}),
                  ValidationError);
  CHECK_THROWS_AS(apc_dpo_loss(std::vector<PerStatementDpoTerm>{{1.5, 0.1, 0.0}}),
                  ValidationError);
}

TEST_CASE("apc_dpo_loss permutation invariance and scaling on the dyadic grid") {
  std::mt19937_64 rng(43);
  for (int round = 0; round < 200; ++round) {
    const int n = 1 + static_cast<int>(rng() % 12);
    std::vector<PerStatementDpoTerm> terms;
    for (int i = 0; i < n; ++i) {
      terms.push_back({static_cast<int>(rng() % 1025) / 1024.0,
                       static_cast<int>(rng() % 4096) / 1024.0,
                       static_cast<int>(rng() % 4096) / 1024.0});
    }
    const double base = apc_dpo_loss(terms);

    std::vector<PerStatementDpoTerm> shuffled = terms;
    for (int i = n - 1; i > 0; --i) {
      std::swap(shuffled[i], shuffled[rng() % (i + 1)]);
    }
    CHECK(apc_dpo_loss(shuffled) == base);  // exact on the dyadic grid

    std::vector<PerStatementDpoTerm> doubled = terms;
    for (auto& t : doubled) {
      t.loss_active *= 2.0;
      t.loss_passive *= 2.0;
    }
    CHECK(apc_dpo_loss(doubled) == 2.0 * base);  // power-of-two scaling is exact
  }
}

TEST_CASE("jsonl serialization is stable") {
  CHECK(to_jsonl(RelevanceRecord{"s", "q", "relevant", "generated"}) ==
        R"({"statement":"s","query":"q","label":"relevant","source":"generated"})");
  CHECK(to_jsonl(NliRecord{"s", "q", "r", "neutral", "discriminated"}) ==
        R"({"statement":"s","query":"q","response":"r","label":"neutral","source":"discriminated"})");
  CHECK(to_jsonl(PreferenceRecord{"q", "w", "l", 1.5, 0.25}) ==
        R"({"query":"q","chosen":"w","rejected":"l","score_chosen":1.5,"score_rejected":0.25})");
}
