#pragma once
// Constraint-satisfaction scoring.
//
// A persona statement is an active constraint when it is relevant to the
// query (the response must be entailed by it) and a passive constraint when
// it is irrelevant (the response must merely not contradict it). The Boolean
// form checks every constraint; the quantified form scores the expected
// number of satisfied constraints:
//
//   p_apc   = p_rel * p_ent + (1 - p_rel) * (1 - p_con)
//   v_apc   = sum_i p_apc_i
//   delta_v = v_apc - sum_i (1 - p_rel_i)
//           = active_reward - passive_penalty
//
// where the subtrahend is the score of a responder that is neutral to every
// statement, active_reward = sum p_rel * p_ent and passive_penalty =
// sum (1 - p_rel) * p_con.

#include <span>
#include <vector>

#include "apc/core.hpp"
#include "apc/judge.hpp"

namespace apc {

// One statement's discrete judgment: relevance plus NLI label.
struct BooleanJudgment {
  bool relevant = false;
  NliLabel nli_label = NliLabel::neutral;
};

// (relevant AND entailed) OR (irrelevant AND NOT contradicted).
bool boolean_apc(const BooleanJudgment& judgment);

// Conjunction over all statements; true on an empty list.
bool boolean_apc_global(std::span<const BooleanJudgment> judgments);

// Probability that one constraint is satisfied.
double p_apc(const RelevanceDist& relevance, const NliDist& nli);

// Builds the full per-statement record; the stored identities hold by
// construction.
ConstraintEval make_constraint_eval(int statement_id, const RelevanceDist& relevance,
                                    const NliDist& nli);

// Expected number of satisfied constraints. With degenerate {0,1} inputs this
// equals the count of boolean_apc-satisfied constraints.
double v_apc(std::span<const ConstraintEval> evals);

// Score earned by an always-neutral responder: sum of irrelevance mass.
double neutral_baseline(std::span<const RelevanceDist> relevances);

// v minus the always-neutral baseline over the same statements.
double delta_v_apc(double v, std::span<const RelevanceDist> relevances);

struct Decomposition {
  double active_reward = 0.0;    // sum p_rel * p_ent
  double passive_penalty = 0.0;  // sum (1 - p_rel) * p_con
};

Decomposition decompose(std::span<const ConstraintEval> evals);

struct ViolationThresholds {
  double tau_rel = 0.5;
  double tau_ent = 0.5;
  double tau_con = 0.5;

  void validate() const;  // all in [0,1]
};

// active_miss where p_rel >= tau_rel and p_ent < tau_ent; passive_contradiction
// where p_rel < tau_rel and p_con >= tau_con. Sorted by offending severity
// (active: ascending p_entailed, passive: descending p_contradicted, the two
// kinds interleaved on the common severity scale), ties by statement id.
std::vector<ViolationTrace> trace_violations(std::span<const ConstraintEval> evals,
                                             const ViolationThresholds& thresholds = {});

struct ScoreOptions {
  ViolationThresholds thresholds;
  int interaction_index = 0;
};

// Judges every statement of the persona against the interaction (fanning out
// up to the backend's max_in_flight), then fills totals, the reward/penalty
// split and violation traces. Judge errors are rethrown annotated with the
// statement id and interaction index.
InteractionScore score_interaction(const Persona& persona, const Interaction& interaction,
                                   JudgeBackend& judge, const ScoreOptions& options = {});

struct RankedStatement {
  PersonaStatement statement;
  double p_relevant = 0.0;
};

// Top-k statements by judged relevance to the query, descending, ties by id
// ascending; returns min(k, |S|) entries.
std::vector<RankedStatement> rank_statements(const std::string& query, const Persona& persona,
                                             JudgeBackend& judge, int k = 5);

}  // namespace apc
