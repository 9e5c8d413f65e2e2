#pragma once
// Core domain types for persona-constraint scoring.
//
// Everything here is plain data plus invariant checks. A persona is an
// ordered list of atomic statements; an interaction is one (query, response)
// pair; the probability types hold judge outputs. No judging, no file I/O.
//
// Atomicity of statements (one fact per statement) is an input contract:
// callers must pre-split compound statements, nothing here checks semantics.

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace apc {

// Tolerance for pure-math comparisons.
inline constexpr double kMathTol = 1e-9;
// Tolerance for aggregated report fields.
inline constexpr double kReportTol = 1e-6;

class ApcError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Invalid input: bad files, bad parameters, broken type invariants.
class ValidationError : public ApcError {
public:
  using ApcError::ApcError;
};

// Judging/generation failure: transport, oracle miss, unparsable labels,
// cache corruption.
class BackendError : public ApcError {
public:
  using ApcError::ApcError;
};

enum class NliLabel { entailed, neutral, contradicted };

const char* to_string(NliLabel label);

// One atomic fact about the character; the unit constraint.
struct PersonaStatement {
  int id = 0;
  std::string text;

  bool operator==(const PersonaStatement&) const = default;
};

struct Persona {
  std::string character_name;
  std::vector<PersonaStatement> statements;

  // Throws ValidationError unless: name non-empty, at least one statement,
  // statement texts non-empty, ids unique and ascending.
  void validate() const;

  bool operator==(const Persona&) const = default;
};

// Builds a Persona from raw statement strings: trims whitespace and assigns
// ids 0..n-1 in input order. Throws ValidationError on an empty list or on
// any statement that is empty after trimming (the message names its index).
Persona validate_persona(const std::string& character_name,
                         const std::vector<std::string>& raw_statements);

// One scored exchange. The query may embed prior turns as an opaque prefix;
// scoring itself is history-agnostic.
struct Interaction {
  std::string query;
  std::string response;
  std::optional<std::string> method_label;

  void validate() const;  // query must be non-empty

  bool operator==(const Interaction&) const = default;
};

// Probability that a statement is relevant to a query. The irrelevance
// probability is defined as the complement and never stored.
class RelevanceDist {
public:
  explicit RelevanceDist(double p_relevant);

  double p_relevant() const { return p_relevant_; }
  double p_irrelevant() const { return 1.0 - p_relevant_; }

  bool operator==(const RelevanceDist&) const = default;

private:
  double p_relevant_;
};

// Statement-to-response NLI label distribution. Components must each lie in
// [0,1] and sum to 1 within kMathTol. The not-contradicted probability is
// defined as 1 - p_contradicted, which equals p_entailed + p_neutral.
class NliDist {
public:
  NliDist(double entailed, double neutral, double contradicted);

  static NliDist one_hot(NliLabel label);

  double p_entailed() const { return entailed_; }
  double p_neutral() const { return neutral_; }
  double p_contradicted() const { return contradicted_; }
  double p_not_contradicted() const { return 1.0 - contradicted_; }

  NliLabel argmax() const;  // ties resolved in order entailed, neutral, contradicted

  bool operator==(const NliDist&) const = default;

private:
  double entailed_;
  double neutral_;
  double contradicted_;
};

// Per-statement scoring record. Constructed by scoring::make_constraint_eval
// so that the stored derived fields always satisfy:
//   p_apc = p_rel * p_ent + (1 - p_rel) * (1 - p_con)
//   p_apc - (1 - p_rel) = active_share - passive_penalty_share
struct ConstraintEval {
  int statement_id = 0;
  RelevanceDist relevance{0.0};
  NliDist nli{0.0, 1.0, 0.0};
  double p_apc = 0.0;
  double active_share = 0.0;           // p_rel * p_ent
  double passive_penalty_share = 0.0;  // (1 - p_rel) * p_con

  void check_identities(double tol = kMathTol) const;  // throws ValidationError

  bool operator==(const ConstraintEval&) const = default;
};

enum class ViolationKind { active_miss, passive_contradiction };

const char* to_string(ViolationKind kind);

// One traced constraint violation. active_miss: the statement was relevant
// but the response failed to entail it (offending_probability = p_entailed).
// passive_contradiction: the statement was irrelevant yet the response
// contradicts it (offending_probability = p_contradicted).
struct ViolationTrace {
  int statement_id = 0;
  ViolationKind kind = ViolationKind::active_miss;
  double relevance = 0.0;
  double offending_probability = 0.0;

  bool operator==(const ViolationTrace&) const = default;
};

// Per-interaction scoring row.
struct InteractionScore {
  int interaction_index = 0;
  std::optional<std::string> method_label;
  std::vector<ConstraintEval> evals;
  double v_apc = 0.0;
  double delta_v_apc = 0.0;
  double active_reward = 0.0;
  double passive_penalty = 0.0;
  std::vector<ViolationTrace> violations;

  bool operator==(const InteractionScore&) const = default;
};

struct ReportAggregates {
  double mean_v_apc = 0.0;
  double mean_delta_v_apc = 0.0;
  double mean_active_reward = 0.0;
  double mean_passive_penalty = 0.0;
  int interaction_count = 0;

  bool operator==(const ReportAggregates&) const = default;
};

// Full scoring report: per-interaction rows plus arithmetic-mean aggregates,
// overall and grouped by method label (unlabeled rows group under
// "(unlabeled)").
struct ApcReport {
  std::vector<InteractionScore> per_interaction;
  ReportAggregates aggregates;
  std::vector<std::pair<std::string, ReportAggregates>> by_method;

  // Recomputes `aggregates` and `by_method` from `per_interaction`.
  void finalize();

  void check_invariants() const;  // throws ValidationError

  bool operator==(const ApcReport&) const = default;
};

// Log-probability terms for one preference pair, already conditioned on the
// shared prompt. ref_* come from the frozen reference policy.
struct DpoPairTerms {
  double beta = 0.1;
  double policy_logp_w = 0.0;
  double policy_logp_l = 0.0;
  double ref_logp_w = 0.0;
  double ref_logp_l = 0.0;

  void validate() const;  // beta > 0, all log-probs finite
};

}  // namespace apc
