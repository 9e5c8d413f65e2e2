#include "apc/core.hpp"

#include <algorithm>
#include <map>
#include <sstream>

namespace apc {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n\f\v");
  if (begin == std::string::npos) return {};
  const auto end = s.find_last_not_of(" \t\r\n\f\v");
  return s.substr(begin, end - begin + 1);
}

void require_probability(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) {  // also rejects NaN
    std::ostringstream msg;
    msg << name << " must lie in [0,1], got " << p;
    throw ValidationError(msg.str());
  }
}

}  // namespace

const char* to_string(NliLabel label) {
  switch (label) {
    case NliLabel::entailed: return "entailed";
    case NliLabel::neutral: return "neutral";
    case NliLabel::contradicted: return "contradicted";
  }
  return "?";
}

const char* to_string(ViolationKind kind) {
  switch (kind) {
    case ViolationKind::active_miss: return "active_miss";
    case ViolationKind::passive_contradiction: return "passive_contradiction";
  }
  return "?";
}

void Persona::validate() const {
  if (character_name.empty()) throw ValidationError("persona: character_name is empty");
  if (statements.empty()) throw ValidationError("persona: needs at least one statement");
  int prev_id = -1;
  for (size_t i = 0; i < statements.size(); ++i) {
    const auto& s = statements[i];
    if (s.id < 0) {
      throw ValidationError("persona: statement at position " + std::to_string(i) +
                            " has negative id " + std::to_string(s.id));
    }
    if (s.id <= prev_id) {
      throw ValidationError("persona: statement ids must be unique and ascending (position " +
                            std::to_string(i) + ", id " + std::to_string(s.id) + ")");
    }
    if (trim(s.text).empty()) {
      throw ValidationError("persona: statement id " + std::to_string(s.id) + " is empty");
    }
    prev_id = s.id;
  }
}

Persona validate_persona(const std::string& character_name,
                         const std::vector<std::string>& raw_statements) {
  if (raw_statements.empty()) throw ValidationError("persona: statement list is empty");
  Persona persona;
  persona.character_name = character_name;
  persona.statements.reserve(raw_statements.size());
  for (size_t i = 0; i < raw_statements.size(); ++i) {
    std::string text = trim(raw_statements[i]);
    if (text.empty()) {
      throw ValidationError("persona: statement at index " + std::to_string(i) +
                            " is empty after trimming");
    }
    persona.statements.push_back({static_cast<int>(i), std::move(text)});
  }
  persona.validate();
  return persona;
}

void Interaction::validate() const {
  if (query.empty()) throw ValidationError("interaction: query is empty");
}

RelevanceDist::RelevanceDist(double p_relevant) : p_relevant_(p_relevant) {
  require_probability(p_relevant, "p_relevant");
}

NliDist::NliDist(double entailed, double neutral, double contradicted)
    : entailed_(entailed), neutral_(neutral), contradicted_(contradicted) {
  require_probability(entailed, "p_entailed");
  require_probability(neutral, "p_neutral");
  require_probability(contradicted, "p_contradicted");
  const double sum = entailed + neutral + contradicted;
  if (std::abs(sum - 1.0) > kMathTol) {
    std::ostringstream msg;
    msg << "NLI components must sum to 1 within " << kMathTol << ", got " << sum;
    throw ValidationError(msg.str());
  }
}

NliDist NliDist::one_hot(NliLabel label) {
  switch (label) {
    case NliLabel::entailed: return NliDist(1.0, 0.0, 0.0);
    case NliLabel::neutral: return NliDist(0.0, 1.0, 0.0);
    case NliLabel::contradicted: return NliDist(0.0, 0.0, 1.0);
  }
  throw ValidationError("unknown NLI label");
}

NliLabel NliDist::argmax() const {
  if (entailed_ >= neutral_ && entailed_ >= contradicted_) return NliLabel::entailed;
  if (neutral_ >= contradicted_) return NliLabel::neutral;
  return NliLabel::contradicted;
}

void ConstraintEval::check_identities(double tol) const {
  const double p_rel = relevance.p_relevant();
  const double expected =
      p_rel * nli.p_entailed() + (1.0 - p_rel) * nli.p_not_contradicted();
  if (std::abs(p_apc - expected) > tol) {
    throw ValidationError("constraint eval: p_apc does not match its definition (statement " +
                          std::to_string(statement_id) + ")");
  }
  const double lhs = p_apc - (1.0 - p_rel);
  const double rhs = active_share - passive_penalty_share;
  if (std::abs(lhs - rhs) > tol) {
    throw ValidationError("constraint eval: reward/penalty split identity broken (statement " +
                          std::to_string(statement_id) + ")");
  }
}

void ApcReport::finalize() {
  auto mean_of = [](const std::vector<const InteractionScore*>& rows) {
    ReportAggregates agg;
    agg.interaction_count = static_cast<int>(rows.size());
    if (rows.empty()) return agg;
    for (const auto* row : rows) {
      agg.mean_v_apc += row->v_apc;
      agg.mean_delta_v_apc += row->delta_v_apc;
      agg.mean_active_reward += row->active_reward;
      agg.mean_passive_penalty += row->passive_penalty;
    }
    const double n = static_cast<double>(rows.size());
    agg.mean_v_apc /= n;
    agg.mean_delta_v_apc /= n;
    agg.mean_active_reward /= n;
    agg.mean_passive_penalty /= n;
    return agg;
  };

  std::vector<const InteractionScore*> all;
  std::map<std::string, std::vector<const InteractionScore*>> groups;
  for (const auto& row : per_interaction) {
    all.push_back(&row);
    groups[row.method_label.value_or("(unlabeled)")].push_back(&row);
  }
  aggregates = mean_of(all);
  by_method.clear();
  for (const auto& [label, rows] : groups) {
    by_method.emplace_back(label, mean_of(rows));
  }
}

void ApcReport::check_invariants() const {
  for (const auto& row : per_interaction) {
    if (std::abs(row.delta_v_apc - (row.active_reward - row.passive_penalty)) > kReportTol) {
      throw ValidationError("report: delta_v_apc != active_reward - passive_penalty at interaction " +
                            std::to_string(row.interaction_index));
    }
    for (const auto& eval : row.evals) eval.check_identities();
  }
  ApcReport recomputed = *this;
  recomputed.finalize();
  auto close = [](const ReportAggregates& a, const ReportAggregates& b) {
    return std::abs(a.mean_v_apc - b.mean_v_apc) <= kReportTol &&
           std::abs(a.mean_delta_v_apc - b.mean_delta_v_apc) <= kReportTol &&
           std::abs(a.mean_active_reward - b.mean_active_reward) <= kReportTol &&
           std::abs(a.mean_passive_penalty - b.mean_passive_penalty) <= kReportTol &&
           a.interaction_count == b.interaction_count;
  };
  if (!close(aggregates, recomputed.aggregates)) {
    throw ValidationError("report: aggregates are not the means of per-interaction rows");
  }
}

void DpoPairTerms::validate() const {
  if (!(beta > 0.0)) throw ValidationError("dpo terms: beta must be > 0");
  for (double v : {beta, policy_logp_w, policy_logp_l, ref_logp_w, ref_logp_l}) {
    if (!std::isfinite(v)) throw ValidationError("dpo terms: log-probabilities must be finite");
  }
}

}  // namespace apc
