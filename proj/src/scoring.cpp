#include "apc/scoring.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <thread>

namespace apc {

bool boolean_apc(const BooleanJudgment& judgment) {
  if (judgment.relevant) return judgment.nli_label == NliLabel::entailed;
  return judgment.nli_label != NliLabel::contradicted;
}

bool boolean_apc_global(std::span<const BooleanJudgment> judgments) {
  return std::all_of(judgments.begin(), judgments.end(),
                     [](const BooleanJudgment& j) { return boolean_apc(j); });
}

double p_apc(const RelevanceDist& relevance, const NliDist& nli) {
  const double p_rel = relevance.p_relevant();
  return p_rel * nli.p_entailed() + (1.0 - p_rel) * nli.p_not_contradicted();
}

ConstraintEval make_constraint_eval(int statement_id, const RelevanceDist& relevance,
                                    const NliDist& nli) {
  ConstraintEval eval;
  eval.statement_id = statement_id;
  eval.relevance = relevance;
  eval.nli = nli;
  eval.p_apc = p_apc(relevance, nli);
  eval.active_share = relevance.p_relevant() * nli.p_entailed();
  eval.passive_penalty_share = relevance.p_irrelevant() * nli.p_contradicted();
  return eval;
}

double v_apc(std::span<const ConstraintEval> evals) {
  double sum = 0.0;
  for (const auto& eval : evals) sum += eval.p_apc;
  return sum;
}

double neutral_baseline(std::span<const RelevanceDist> relevances) {
  double sum = 0.0;
  for (const auto& rel : relevances) sum += rel.p_irrelevant();
  return sum;
}

double delta_v_apc(double v, std::span<const RelevanceDist> relevances) {
  return v - neutral_baseline(relevances);
}

Decomposition decompose(std::span<const ConstraintEval> evals) {
  Decomposition d;
  for (const auto& eval : evals) {
    d.active_reward += eval.active_share;
    d.passive_penalty += eval.passive_penalty_share;
  }
  return d;
}

void ViolationThresholds::validate() const {
  for (double tau : {tau_rel, tau_ent, tau_con}) {
    if (!(tau >= 0.0 && tau <= 1.0)) {
      throw ValidationError("violation thresholds must lie in [0,1]");
    }
  }
}

std::vector<ViolationTrace> trace_violations(std::span<const ConstraintEval> evals,
                                             const ViolationThresholds& thresholds) {
  thresholds.validate();
  std::vector<ViolationTrace> traces;
  for (const auto& eval : evals) {
    const double p_rel = eval.relevance.p_relevant();
    if (p_rel >= thresholds.tau_rel) {
      if (eval.nli.p_entailed() < thresholds.tau_ent) {
        traces.push_back({eval.statement_id, ViolationKind::active_miss, p_rel,
                          eval.nli.p_entailed()});
      }
    } else if (eval.nli.p_contradicted() >= thresholds.tau_con) {
      traces.push_back({eval.statement_id, ViolationKind::passive_contradiction, p_rel,
                        eval.nli.p_contradicted()});
    }
  }
  // Common severity scale: 1 - p_entailed for misses, p_contradicted for
  // contradictions. Worst first, ties by statement id.
  const auto severity = [](const ViolationTrace& t) {
    return t.kind == ViolationKind::active_miss ? 1.0 - t.offending_probability
                                                : t.offending_probability;
  };
  std::stable_sort(traces.begin(), traces.end(),
                   [&](const ViolationTrace& a, const ViolationTrace& b) {
                     const double sa = severity(a);
                     const double sb = severity(b);
                     if (sa != sb) return sa > sb;
                     return a.statement_id < b.statement_id;
                   });
  return traces;
}

namespace {

// Runs fn(i) for i in [0, n) on up to `width` worker threads. Exceptions are
// captured per index; the lowest-index failure is rethrown by the caller.
void fan_out(int n, int width, const std::function<void(int)>& fn,
             std::vector<std::exception_ptr>& errors) {
  errors.assign(n, nullptr);
  const int workers = std::max(1, std::min(width, n));
  std::atomic<int> next{0};
  auto work = [&] {
    for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    work();
    return;
  }
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (int w = 0; w < workers; ++w) threads.emplace_back(work);
  for (auto& t : threads) t.join();
}

[[noreturn]] void rethrow_annotated(std::exception_ptr error, const std::string& where) {
  try {
    std::rethrow_exception(error);
  } catch (const ValidationError& e) {
    throw ValidationError(where + e.what());
  } catch (const BackendError& e) {
    throw BackendError(where + e.what());
  } catch (const std::exception& e) {
    throw BackendError(where + e.what());
  }
}

}  // namespace

InteractionScore score_interaction(const Persona& persona, const Interaction& interaction,
                                   JudgeBackend& judge, const ScoreOptions& options) {
  persona.validate();
  interaction.validate();
  options.thresholds.validate();

  const int n = static_cast<int>(persona.statements.size());
  std::vector<std::optional<ConstraintEval>> slots(n);
  std::vector<std::exception_ptr> errors;
  fan_out(
      n, judge.max_in_flight(),
      [&](int i) {
        const auto& statement = persona.statements[i];
        const RelevanceDist relevance = judge.judge_relevance(statement, interaction.query);
        const NliDist nli = judge.judge_nli(statement, interaction.query, interaction.response);
        slots[i] = make_constraint_eval(statement.id, relevance, nli);
      },
      errors);
  for (int i = 0; i < n; ++i) {
    if (errors[i]) {
      rethrow_annotated(errors[i], "interaction " + std::to_string(options.interaction_index) +
                                       ", statement " +
                                       std::to_string(persona.statements[i].id) + ": ");
    }
  }

  InteractionScore row;
  row.interaction_index = options.interaction_index;
  row.method_label = interaction.method_label;
  row.evals.reserve(n);
  std::vector<RelevanceDist> relevances;
  relevances.reserve(n);
  for (auto& slot : slots) {
    row.evals.push_back(*slot);
    relevances.push_back(slot->relevance);
  }
  row.v_apc = v_apc(row.evals);
  row.delta_v_apc = delta_v_apc(row.v_apc, relevances);
  const Decomposition d = decompose(row.evals);
  row.active_reward = d.active_reward;
  row.passive_penalty = d.passive_penalty;
  row.violations = trace_violations(row.evals, options.thresholds);
  return row;
}

std::vector<RankedStatement> rank_statements(const std::string& query, const Persona& persona,
                                             JudgeBackend& judge, int k) {
  if (k < 1) throw ValidationError("rank_statements: k must be >= 1");
  persona.validate();

  const int n = static_cast<int>(persona.statements.size());
  std::vector<RankedStatement> ranked(n);
  std::vector<std::exception_ptr> errors;
  fan_out(
      n, judge.max_in_flight(),
      [&](int i) {
        const auto& statement = persona.statements[i];
        ranked[i] = {statement, judge.judge_relevance(statement, query).p_relevant()};
      },
      errors);
  for (int i = 0; i < n; ++i) {
    if (errors[i]) {
      rethrow_annotated(errors[i],
                        "statement " + std::to_string(persona.statements[i].id) + ": ");
    }
  }

  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const RankedStatement& a, const RankedStatement& b) {
                     if (a.p_relevant != b.p_relevant) return a.p_relevant > b.p_relevant;
                     return a.statement.id < b.statement.id;
                   });
  if (static_cast<int>(ranked.size()) > k) ranked.resize(k);
  return ranked;
}

}  // namespace apc
