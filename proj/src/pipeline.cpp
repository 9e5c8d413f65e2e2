#include "apc/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "apc/scoring.hpp"
#include "json.hpp"

namespace apc {

using nlohmann::ordered_json;

namespace {

constexpr double kGenTemperature = 1.0;  // generative distillation stages
constexpr int kEmptyRetries = 3;

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n\f\v");
  if (begin == std::string::npos) return {};
  const auto end = s.find_last_not_of(" \t\r\n\f\v");
  return s.substr(begin, end - begin + 1);
}

// Unbiased-enough bounded draw (multiply-shift); fully deterministic for a
// given seed on any platform, unlike std::uniform_int_distribution.
std::uint64_t bounded_draw(std::mt19937_64& rng, std::uint64_t bound) {
  return static_cast<std::uint64_t>(
      (static_cast<unsigned __int128>(rng()) * bound) >> 64);
}

// k distinct elements of pool, order given by a partial Fisher-Yates shuffle.
std::vector<int> sample_without_replacement(std::vector<int> pool, int k, std::mt19937_64& rng) {
  for (int i = 0; i < k; ++i) {
    const auto j = i + static_cast<int>(bounded_draw(rng, pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

std::vector<int> other_statement_positions(const Persona& persona, int exclude_position) {
  std::vector<int> positions;
  positions.reserve(persona.statements.size() - 1);
  for (int i = 0; i < static_cast<int>(persona.statements.size()); ++i) {
    if (i != exclude_position) positions.push_back(i);
  }
  return positions;
}

// Requests `n` completions and re-requests slots that come back empty after
// trimming, up to kEmptyRetries extra rounds.
std::vector<std::string> generate_non_empty(JudgeBackend& backend, const std::string& prompt,
                                            int n, const std::string& context) {
  std::vector<std::string> collected;
  collected.reserve(n);
  int missing = n;
  for (int round = 0; round <= kEmptyRetries && missing > 0; ++round) {
    for (auto& text : backend.generate_text(prompt, kGenTemperature, missing)) {
      std::string trimmed = trim(text);
      if (!trimmed.empty()) collected.push_back(std::move(trimmed));
    }
    missing = n - static_cast<int>(collected.size());
  }
  if (missing > 0) {
    throw BackendError(context + ": backend kept returning empty completions (" +
                       std::to_string(missing) + " of " + std::to_string(n) + " missing)");
  }
  return collected;
}

std::string query_gen_prompt(const PersonaStatement& statement,
                             const std::string& character_name) {
  return render_template(PromptTemplates::defaults().query_gen,
                         {{"character", character_name}, {"statement", statement.text}});
}

std::string response_gen_prompt(const PersonaStatement& statement, const std::string& query,
                                const std::string& character_name, const std::string& relation) {
  return render_template(PromptTemplates::defaults().response_gen,
                         {{"character", character_name},
                          {"statement", statement.text},
                          {"query", query},
                          {"relation", relation}});
}

// Queries per statement, aligned with persona.statements.
using StageOneQueries = std::vector<std::vector<std::string>>;

StageOneQueries generate_stage1(const Persona& persona, JudgeBackend& backend,
                                const DistillParams& params) {
  StageOneQueries queries;
  queries.reserve(persona.statements.size());
  for (const auto& statement : persona.statements) {
    queries.push_back(gen_relevant_queries(statement, persona.character_name, backend,
                                           params.queries_per_statement));
  }
  return queries;
}

void validate_distill(const Persona& persona, const DistillParams& params) {
  persona.validate();
  params.validate();
  const int others = static_cast<int>(persona.statements.size()) - 1;
  if (params.relevance_negatives_per_query > others) {
    throw ValidationError("distill: relevance_negatives_per_query (" +
                          std::to_string(params.relevance_negatives_per_query) +
                          ") exceeds the other-statement count (" + std::to_string(others) + ")");
  }
  if (params.nli_distractors_per_pair > others) {
    throw ValidationError("distill: nli_distractors_per_pair (" +
                          std::to_string(params.nli_distractors_per_pair) +
                          ") exceeds the other-statement count (" + std::to_string(others) + ")");
  }
}

std::vector<RelevanceRecord> relevance_from_stage1(const Persona& persona, JudgeBackend& backend,
                                                   const DistillParams& params,
                                                   const StageOneQueries& stage1) {
  std::mt19937_64 rng(params.rng_seed);
  std::vector<RelevanceRecord> records;
  for (int pos = 0; pos < static_cast<int>(persona.statements.size()); ++pos) {
    const auto& statement = persona.statements[pos];
    for (const auto& query : stage1[pos]) {
      records.push_back({statement.text, query, "relevant", "generated"});
      if (params.relevance_negatives_per_query == 0) continue;
      const auto sampled = sample_without_replacement(other_statement_positions(persona, pos),
                                                      params.relevance_negatives_per_query, rng);
      for (const int other_pos : sampled) {
        const auto& other = persona.statements[other_pos];
        const double p = backend.judge_relevance(other, query).p_relevant();
        records.push_back(
            {other.text, query, p > 0.5 ? "relevant" : "irrelevant", "discriminated"});
      }
    }
  }
  return records;
}

std::vector<NliRecord> nli_from_stage1(const Persona& persona, JudgeBackend& backend,
                                       const DistillParams& params,
                                       const StageOneQueries& stage1,
                                       const std::vector<RelevanceRecord>& relevance_records) {
  std::mt19937_64 rng(params.rng_seed);

  // (statement position, query) pairs feeding stage 3, in emission order.
  std::vector<std::pair<int, std::string>> pairs;
  for (int pos = 0; pos < static_cast<int>(persona.statements.size()); ++pos) {
    for (const auto& query : stage1[pos]) pairs.emplace_back(pos, query);
  }
  if (params.feed_discriminated_relevant) {
    std::map<std::string, int> position_by_text;
    for (int pos = 0; pos < static_cast<int>(persona.statements.size()); ++pos) {
      position_by_text[persona.statements[pos].text] = pos;
    }
    for (const auto& record : relevance_records) {
      if (record.source == "discriminated" && record.label == "relevant") {
        pairs.emplace_back(position_by_text.at(record.statement), record.query);
      }
    }
  }

  std::vector<NliRecord> records;
  for (const auto& [pos, query] : pairs) {
    const auto& statement = persona.statements[pos];
    const GeneratedResponses responses =
        gen_nli_responses(statement, query, persona.character_name, backend);
    const std::pair<const std::string*, const char*> generated[3] = {
        {&responses.entailed, "entailed"},
        {&responses.neutral, "neutral"},
        {&responses.contradicted, "contradicted"},
    };
    for (const auto& [response, label] : generated) {
      records.push_back({statement.text, query, *response, label, "generated"});
      if (params.nli_distractors_per_pair == 0) continue;
      const auto sampled = sample_without_replacement(other_statement_positions(persona, pos),
                                                      params.nli_distractors_per_pair, rng);
      for (const int other_pos : sampled) {
        const auto& other = persona.statements[other_pos];
        const NliDist dist = backend.judge_nli(other, query, *response);
        records.push_back({other.text, query, *response, to_string(dist.argmax()),
                           "discriminated"});
      }
    }
  }
  return records;
}

}  // namespace

void DistillParams::validate() const {
  if (queries_per_statement < 0 || relevance_negatives_per_query < 0 ||
      nli_distractors_per_pair < 0) {
    throw ValidationError("distill params: counts must be >= 0");
  }
}

void PreferenceParams::validate() const {
  if (pairs_before_filter < 1) throw ValidationError("preference params: pairs_before_filter must be >= 1");
  if (!(score_margin >= 0)) throw ValidationError("preference params: score_margin must be >= 0");
  if (!(sample_temperature >= 0)) throw ValidationError("preference params: sample_temperature must be >= 0");
}

void PerStatementDpoTerm::validate() const {
  if (!(p_relevant >= 0.0 && p_relevant <= 1.0)) {
    throw ValidationError("dpo term: p_relevant must lie in [0,1]");
  }
  if (!std::isfinite(loss_active) || loss_active < 0 || !std::isfinite(loss_passive) ||
      loss_passive < 0) {
    throw ValidationError("dpo term: losses must be finite and >= 0");
  }
}

std::string to_jsonl(const RelevanceRecord& record) {
  return ordered_json{{"statement", record.statement},
                      {"query", record.query},
                      {"label", record.label},
                      {"source", record.source}}
      .dump();
}

std::string to_jsonl(const NliRecord& record) {
  return ordered_json{{"statement", record.statement},
                      {"query", record.query},
                      {"response", record.response},
                      {"label", record.label},
                      {"source", record.source}}
      .dump();
}

std::string to_jsonl(const PreferenceRecord& record) {
  return ordered_json{{"query", record.query},
                      {"chosen", record.chosen},
                      {"rejected", record.rejected},
                      {"score_chosen", record.score_chosen},
                      {"score_rejected", record.score_rejected}}
      .dump();
}

std::vector<std::string> gen_relevant_queries(const PersonaStatement& statement,
                                              const std::string& character_name,
                                              JudgeBackend& backend, int n) {
  if (n < 0) throw ValidationError("gen_relevant_queries: n must be >= 0");
  if (n == 0) return {};
  return generate_non_empty(backend, query_gen_prompt(statement, character_name), n,
                            "statement " + std::to_string(statement.id) + " query generation");
}

GeneratedResponses gen_nli_responses(const PersonaStatement& statement, const std::string& query,
                                     const std::string& character_name, JudgeBackend& backend) {
  const auto one = [&](const char* relation) {
    return generate_non_empty(backend,
                              response_gen_prompt(statement, query, character_name, relation), 1,
                              "statement " + std::to_string(statement.id) + " " + relation +
                                  " response generation")
        .front();
  };
  GeneratedResponses out;
  out.entailed = one("entailed by");
  out.neutral = one("neutral to");
  out.contradicted = one("contradicted by");
  return out;
}

std::vector<RelevanceRecord> build_relevance_dataset(const Persona& persona,
                                                     JudgeBackend& backend,
                                                     const DistillParams& params) {
  validate_distill(persona, params);
  return relevance_from_stage1(persona, backend, params, generate_stage1(persona, backend, params));
}

std::vector<NliRecord> build_nli_dataset(const Persona& persona, JudgeBackend& backend,
                                         const DistillParams& params) {
  validate_distill(persona, params);
  const auto stage1 = generate_stage1(persona, backend, params);
  std::vector<RelevanceRecord> relevance;
  if (params.feed_discriminated_relevant) {
    relevance = relevance_from_stage1(persona, backend, params, stage1);
  }
  return nli_from_stage1(persona, backend, params, stage1, relevance);
}

DistillOutput run_distillation(const Persona& persona, JudgeBackend& backend,
                               const DistillParams& params) {
  validate_distill(persona, params);
  const auto stage1 = generate_stage1(persona, backend, params);
  DistillOutput out;
  out.relevance = relevance_from_stage1(persona, backend, params, stage1);
  out.nli = nli_from_stage1(persona, backend, params, stage1, out.relevance);
  return out;
}

std::pair<std::string, std::string> sample_response_pair(JudgeBackend& generator,
                                                         const std::string& query,
                                                         const PreferenceParams& params) {
  params.validate();
  auto completions = generator.generate_text(query, params.sample_temperature, 2);
  return {std::move(completions[0]), std::move(completions[1])};
}

std::optional<std::pair<int, int>> assign_preference(double score_a, double score_b,
                                                     double margin) {
  if (!(margin >= 0)) throw ValidationError("assign_preference: margin must be >= 0");
  if (std::abs(score_a - score_b) <= margin + kMathTol) return std::nullopt;
  return score_a > score_b ? std::make_pair(0, 1) : std::make_pair(1, 0);
}

PreferenceDataset build_preference_dataset(const Persona& persona,
                                           const std::vector<std::string>& queries,
                                           JudgeBackend& generator, JudgeBackend& judge,
                                           const PreferenceParams& params) {
  persona.validate();
  params.validate();
  if (queries.empty()) throw ValidationError("preference dataset: need at least one query");

  const auto score_of = [&](const std::string& query, const std::string& response) {
    return score_interaction(persona, {query, response, std::nullopt}, judge).delta_v_apc;
  };

  PreferenceDataset dataset;
  for (int i = 0; i < params.pairs_before_filter; ++i) {
    const std::string& query = queries[i % queries.size()];
    try {
      const auto [a, b] = sample_response_pair(generator, query, params);
      const double score_a = score_of(query, a);
      const double score_b = score_of(query, b);
      ++dataset.candidates;
      const auto verdict = assign_preference(score_a, score_b, params.score_margin);
      if (!verdict) {
        ++dataset.dropped;
        continue;
      }
      const bool a_wins = verdict->first == 0;
      dataset.records.push_back({query, a_wins ? a : b, a_wins ? b : a,
                                 a_wins ? score_a : score_b, a_wins ? score_b : score_a});
    } catch (const ValidationError& e) {
      throw ValidationError("preference pair for query \"" + query + "\": " + e.what());
    } catch (const BackendError& e) {
      throw BackendError("preference pair for query \"" + query + "\": " + e.what());
    }
  }
  return dataset;
}

double dpo_pair_loss(const DpoPairTerms& terms) {
  for (double v : {terms.beta, terms.policy_logp_w, terms.policy_logp_l, terms.ref_logp_w,
                   terms.ref_logp_l}) {
    if (!std::isfinite(v)) throw ValidationError("dpo_pair_loss: inputs must be finite");
  }
  if (terms.beta < 0) throw ValidationError("dpo_pair_loss: beta must be >= 0");
  const double z = terms.beta * ((terms.policy_logp_w - terms.ref_logp_w) -
                                 (terms.policy_logp_l - terms.ref_logp_l));
  // -log sigmoid(z) = softplus(-z), stable for large |z|
  const double x = -z;
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

ConstraintRewards constraint_rewards(const NliDist& nli) {
  return {nli.p_entailed(), nli.p_not_contradicted()};
}

double apc_dpo_loss(std::span<const PerStatementDpoTerm> terms) {
  double sum = 0.0;
  for (const auto& term : terms) {
    term.validate();
    sum += term.p_relevant * term.loss_active + (1.0 - term.p_relevant) * term.loss_passive;
  }
  return sum;
}

}  // namespace apc
