#include "apc/report.hpp"

#include <cstdio>
#include <ostream>

#include "json.hpp"

namespace apc {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

ordered_json eval_to_json(const ConstraintEval& eval) {
  return {{"statement_id", eval.statement_id},
          {"p_relevant", eval.relevance.p_relevant()},
          {"p_entailed", eval.nli.p_entailed()},
          {"p_neutral", eval.nli.p_neutral()},
          {"p_contradicted", eval.nli.p_contradicted()},
          {"p_apc", eval.p_apc},
          {"active_share", eval.active_share},
          {"passive_penalty_share", eval.passive_penalty_share}};
}

ConstraintEval eval_from_json(const json& j) {
  ConstraintEval eval;
  eval.statement_id = j.at("statement_id").get<int>();
  eval.relevance = RelevanceDist(j.at("p_relevant").get<double>());
  eval.nli = NliDist(j.at("p_entailed").get<double>(), j.at("p_neutral").get<double>(),
                     j.at("p_contradicted").get<double>());
  eval.p_apc = j.at("p_apc").get<double>();
  eval.active_share = j.at("active_share").get<double>();
  eval.passive_penalty_share = j.at("passive_penalty_share").get<double>();
  return eval;
}

ordered_json trace_to_json(const ViolationTrace& trace) {
  return {{"statement_id", trace.statement_id},
          {"kind", to_string(trace.kind)},
          {"relevance", trace.relevance},
          {"offending_probability", trace.offending_probability}};
}

ViolationTrace trace_from_json(const json& j) {
  ViolationTrace trace;
  trace.statement_id = j.at("statement_id").get<int>();
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "active_miss") {
    trace.kind = ViolationKind::active_miss;
  } else if (kind == "passive_contradiction") {
    trace.kind = ViolationKind::passive_contradiction;
  } else {
    throw ValidationError("report: unknown violation kind '" + kind + "'");
  }
  trace.relevance = j.at("relevance").get<double>();
  trace.offending_probability = j.at("offending_probability").get<double>();
  return trace;
}

ordered_json aggregates_to_json(const ReportAggregates& agg) {
  return {{"mean_v_apc", agg.mean_v_apc},
          {"mean_delta_v_apc", agg.mean_delta_v_apc},
          {"mean_active_reward", agg.mean_active_reward},
          {"mean_passive_penalty", agg.mean_passive_penalty},
          {"interaction_count", agg.interaction_count}};
}

ReportAggregates aggregates_from_json(const json& j) {
  ReportAggregates agg;
  agg.mean_v_apc = j.at("mean_v_apc").get<double>();
  agg.mean_delta_v_apc = j.at("mean_delta_v_apc").get<double>();
  agg.mean_active_reward = j.at("mean_active_reward").get<double>();
  agg.mean_passive_penalty = j.at("mean_passive_penalty").get<double>();
  agg.interaction_count = j.at("interaction_count").get<int>();
  return agg;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

void write_markdown(std::ostream& out, const ApcReport& report) {
  out << "# APC report\n\n";
  out << "## Per-method means\n\n";
  out << "| method | mean V_APC | mean dAPC | mean active reward | mean passive penalty | n |\n";
  out << "|---|---|---|---|---|---|\n";
  for (const auto& [label, agg] : report.by_method) {
    out << "| " << label << " | " << fmt(agg.mean_v_apc) << " | " << fmt(agg.mean_delta_v_apc)
        << " | " << fmt(agg.mean_active_reward) << " | " << fmt(agg.mean_passive_penalty)
        << " | " << agg.interaction_count << " |\n";
  }
  out << "| (all) | " << fmt(report.aggregates.mean_v_apc) << " | "
      << fmt(report.aggregates.mean_delta_v_apc) << " | "
      << fmt(report.aggregates.mean_active_reward) << " | "
      << fmt(report.aggregates.mean_passive_penalty) << " | "
      << report.aggregates.interaction_count << " |\n";

  out << "\n## Interactions\n\n";
  out << "| # | method | V_APC | dAPC | active reward | passive penalty | violations |\n";
  out << "|---|---|---|---|---|---|---|\n";
  for (const auto& row : report.per_interaction) {
    out << "| " << row.interaction_index << " | " << row.method_label.value_or("(unlabeled)")
        << " | " << fmt(row.v_apc) << " | " << fmt(row.delta_v_apc) << " | "
        << fmt(row.active_reward) << " | " << fmt(row.passive_penalty) << " | "
        << row.violations.size() << " |\n";
  }

  bool any = false;
  for (const auto& row : report.per_interaction) any = any || !row.violations.empty();
  if (any) {
    out << "\n## Violations\n\n";
    out << "| interaction | statement | kind | relevance | offending probability |\n";
    out << "|---|---|---|---|---|\n";
    for (const auto& row : report.per_interaction) {
      for (const auto& trace : row.violations) {
        out << "| " << row.interaction_index << " | " << trace.statement_id << " | "
            << to_string(trace.kind) << " | " << fmt(trace.relevance) << " | "
            << fmt(trace.offending_probability) << " |\n";
      }
    }
  }
}

void write_csv(std::ostream& out, const ApcReport& report) {
  out << "interaction_index,method,v_apc,delta_v_apc,active_reward,passive_penalty,"
         "active_misses,passive_contradictions\n";
  for (const auto& row : report.per_interaction) {
    int misses = 0;
    int contradictions = 0;
    for (const auto& trace : row.violations) {
      (trace.kind == ViolationKind::active_miss ? misses : contradictions) += 1;
    }
    out << row.interaction_index << ',' << row.method_label.value_or("") << ','
        << fmt(row.v_apc) << ',' << fmt(row.delta_v_apc) << ',' << fmt(row.active_reward) << ','
        << fmt(row.passive_penalty) << ',' << misses << ',' << contradictions << "\n";
  }
}

}  // namespace

ReportFormat report_format_from_string(const std::string& name) {
  if (name == "json") return ReportFormat::json;
  if (name == "markdown") return ReportFormat::markdown;
  if (name == "csv") return ReportFormat::csv;
  throw ValidationError("unknown report format '" + name + "' (expected json|markdown|csv)");
}

std::string report_to_json_text(const ApcReport& report) {
  ordered_json rows = ordered_json::array();
  for (const auto& row : report.per_interaction) {
    ordered_json evals = ordered_json::array();
    for (const auto& eval : row.evals) evals.push_back(eval_to_json(eval));
    ordered_json traces = ordered_json::array();
    for (const auto& trace : row.violations) traces.push_back(trace_to_json(trace));
    ordered_json j = {{"interaction_index", row.interaction_index},
                      {"method", row.method_label ? ordered_json(*row.method_label)
                                                  : ordered_json(nullptr)},
                      {"evals", evals},
                      {"v_apc", row.v_apc},
                      {"delta_v_apc", row.delta_v_apc},
                      {"active_reward", row.active_reward},
                      {"passive_penalty", row.passive_penalty},
                      {"violations", traces}};
    rows.push_back(j);
  }
  ordered_json by_method = ordered_json::object();
  for (const auto& [label, agg] : report.by_method) by_method[label] = aggregates_to_json(agg);
  const ordered_json doc = {{"per_interaction", rows},
                            {"aggregates", aggregates_to_json(report.aggregates)},
                            {"by_method", by_method}};
  return doc.dump(2) + "\n";
}

ApcReport report_from_json_text(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("report JSON: ") + e.what());
  }
  try {
    ApcReport report;
    for (const auto& j : doc.at("per_interaction")) {
      InteractionScore row;
      row.interaction_index = j.at("interaction_index").get<int>();
      if (!j.at("method").is_null()) row.method_label = j.at("method").get<std::string>();
      for (const auto& e : j.at("evals")) row.evals.push_back(eval_from_json(e));
      row.v_apc = j.at("v_apc").get<double>();
      row.delta_v_apc = j.at("delta_v_apc").get<double>();
      row.active_reward = j.at("active_reward").get<double>();
      row.passive_penalty = j.at("passive_penalty").get<double>();
      for (const auto& t : j.at("violations")) row.violations.push_back(trace_from_json(t));
      report.per_interaction.push_back(std::move(row));
    }
    report.aggregates = aggregates_from_json(doc.at("aggregates"));
    for (const auto& [label, agg] : doc.at("by_method").items()) {
      report.by_method.emplace_back(label, aggregates_from_json(agg));
    }
    return report;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("report JSON: ") + e.what());
  }
}

void write_report(std::ostream& out, const ApcReport& report, ReportFormat format) {
  switch (format) {
    case ReportFormat::json:
      out << report_to_json_text(report);
      return;
    case ReportFormat::markdown:
      write_markdown(out, report);
      return;
    case ReportFormat::csv:
      write_csv(out, report);
      return;
  }
}

}  // namespace apc
