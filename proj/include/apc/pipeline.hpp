#pragma once
// Dataset generation for discriminator distillation and preference
// optimization, plus reference implementations of the preference losses.
//
// Distillation runs four stages:
//   1. generate queries_per_statement relevant queries per statement
//   2. for each generated query, sample other statements and let the judge
//      label them relevant/irrelevant
//   3. for each (statement, query) pair, generate one response entailed by,
//      one neutral to and one contradicted by the statement
//   4. for each response, sample distractor statements and let the judge
//      label the NLI relation
// Stages 1-2 yield the relevance dataset, stages 3-4 the NLI dataset. All
// sampling uses a seeded mt19937_64 with a multiply-shift bounded draw, so a
// (persona, params, backend) triple reproduces files byte for byte.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "apc/core.hpp"
#include "apc/judge.hpp"

namespace apc {

struct DistillParams {
  int queries_per_statement = 3;
  int relevance_negatives_per_query = 5;
  int nli_distractors_per_pair = 3;
  std::uint64_t rng_seed = 0;
  // Stage-2 pairs judged relevant may optionally feed stage 3. Off by
  // default so record counts keep their closed forms
  // |S|*q*(1+neg) and |S|*q*3*(1+dist) under any judge.
  bool feed_discriminated_relevant = false;

  void validate() const;  // all counts >= 0
};

struct PreferenceParams {
  int pairs_before_filter = 100;
  double score_margin = 0.2;
  double sample_temperature = 1.0;

  void validate() const;  // pairs >= 1, margin >= 0, temperature >= 0
};

// One relevance-weighted pair of per-constraint preference losses:
// loss_active conditioned on the entailment reward, loss_passive on the
// not-contradicted reward.
struct PerStatementDpoTerm {
  double p_relevant = 0.0;
  double loss_active = 0.0;
  double loss_passive = 0.0;

  void validate() const;  // p_relevant in [0,1], losses finite and >= 0
};

struct RelevanceRecord {
  std::string statement;
  std::string query;
  std::string label;   // "relevant" | "irrelevant"
  std::string source;  // "generated" | "discriminated"

  bool operator==(const RelevanceRecord&) const = default;
};

struct NliRecord {
  std::string statement;
  std::string query;
  std::string response;
  std::string label;   // "entailed" | "neutral" | "contradicted"
  std::string source;  // "generated" | "discriminated"

  bool operator==(const NliRecord&) const = default;
};

struct PreferenceRecord {
  std::string query;
  std::string chosen;
  std::string rejected;
  double score_chosen = 0.0;
  double score_rejected = 0.0;

  bool operator==(const PreferenceRecord&) const = default;
};

struct PreferenceDataset {
  std::vector<PreferenceRecord> records;
  int candidates = 0;  // pairs sampled before filtering
  int dropped = 0;
};

// JSONL serialization (one line, no trailing newline), field order fixed.
std::string to_jsonl(const RelevanceRecord& record);
std::string to_jsonl(const NliRecord& record);
std::string to_jsonl(const PreferenceRecord& record);

// Stage 1. Returns n trimmed non-empty query strings for the statement.
// Empty completions are regenerated up to 3 times, then BackendError.
std::vector<std::string> gen_relevant_queries(const PersonaStatement& statement,
                                              const std::string& character_name,
                                              JudgeBackend& backend, int n);

// Stage 3. Returns the three responses in (entailed, neutral, contradicted)
// order, same retry contract as gen_relevant_queries.
struct GeneratedResponses {
  std::string entailed;
  std::string neutral;
  std::string contradicted;
};
GeneratedResponses gen_nli_responses(const PersonaStatement& statement, const std::string& query,
                                     const std::string& character_name, JudgeBackend& backend);

// Stages 1-2. Record order: statement id, then query index, then the
// generated record followed by its sampled negatives.
std::vector<RelevanceRecord> build_relevance_dataset(const Persona& persona,
                                                     JudgeBackend& backend,
                                                     const DistillParams& params);

// Stages 1+3-4. Record order: statement id, query index, response in
// (entailed, neutral, contradicted) order, each followed by its distractors.
std::vector<NliRecord> build_nli_dataset(const Persona& persona, JudgeBackend& backend,
                                         const DistillParams& params);

// Runs all four stages over a single shared stage-1 pass, so both datasets
// see the same generated queries.
struct DistillOutput {
  std::vector<RelevanceRecord> relevance;
  std::vector<NliRecord> nli;
};
DistillOutput run_distillation(const Persona& persona, JudgeBackend& backend,
                               const DistillParams& params);

// Two independent completions for the query at params.sample_temperature.
std::pair<std::string, std::string> sample_response_pair(JudgeBackend& generator,
                                                         const std::string& query,
                                                         const PreferenceParams& params);

// Indices (winner, loser) into {a=0, b=1} iff the score gap strictly exceeds
// the margin; gaps within kMathTol of the margin count as not exceeding it.
std::optional<std::pair<int, int>> assign_preference(double score_a, double score_b,
                                                     double margin);

// Cycles through the queries sampling response pairs until
// params.pairs_before_filter candidates exist, scores each response by the
// regularized score over the full persona, and keeps the pairs that pass
// assign_preference.
PreferenceDataset build_preference_dataset(const Persona& persona,
                                           const std::vector<std::string>& queries,
                                           JudgeBackend& generator, JudgeBackend& judge,
                                           const PreferenceParams& params);

// -log sigmoid(beta * ((policy_w - ref_w) - (policy_l - ref_l))), computed
// with a stable softplus. Accepts beta = 0 (constant ln 2). Throws
// ValidationError on non-finite inputs or beta < 0.
double dpo_pair_loss(const DpoPairTerms& terms);

// Per-constraint rewards: active constraints reward entailment, passive
// constraints reward not being contradicted.
struct ConstraintRewards {
  double active = 0.0;   // p_entailed
  double passive = 0.0;  // 1 - p_contradicted
};
ConstraintRewards constraint_rewards(const NliDist& nli);

// sum_i [p_rel_i * loss_active_i + (1 - p_rel_i) * loss_passive_i]
double apc_dpo_loss(std::span<const PerStatementDpoTerm> terms);

}  // namespace apc
