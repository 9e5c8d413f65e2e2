#include "apc/cli.hpp"

#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "apc/judge.hpp"
#include "apc/pipeline.hpp"
#include "apc/report.hpp"
#include "apc/scoring.hpp"

namespace apc {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

namespace fs = std::filesystem;

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n\f\v");
  if (begin == std::string::npos) return {};
  const auto end = s.find_last_not_of(" \t\r\n\f\v");
  return s.substr(begin, end - begin + 1);
}

// Calls fn(line_no, record) for every non-blank line.
void for_each_jsonl_record(const fs::path& path,
                           const std::function<void(size_t, const json&)>& fn) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json record = json::parse(line, nullptr, false);
    if (record.is_discarded() || !record.is_object()) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                            ": malformed JSONL record");
    }
    try {
      fn(line_no, record);
    } catch (const json::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

struct CommonOpts {
  std::string backend = "oracle";
  std::string oracle_file;
  std::string endpoint;
  std::string model;
  std::string cache_dir;
  std::uint64_t seed = 0;
  std::string out_path = "-";
  std::string format = "json";
  double tau_rel = 0.5;
  double tau_ent = 0.5;
  double tau_con = 0.5;
  int max_in_flight = 8;
  int votes = 1;
  double timeout_seconds = 60.0;
  std::string character = "Character";
  std::string prompts_dir;
};

void add_common_options(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--backend", opts.backend, "Judge backend: oracle|chat|cached-chat")
      ->check(CLI::IsMember({"oracle", "chat", "cached-chat"}));
  cmd->add_option("--oracle-file", opts.oracle_file, "Oracle table JSON (backend=oracle)");
  cmd->add_option("--endpoint", opts.endpoint, "Chat endpoint base URL");
  cmd->add_option("--model", opts.model, "Chat model name");
  cmd->add_option("--cache-dir", opts.cache_dir, "Wrap the backend in an on-disk cache");
  cmd->add_option("--seed", opts.seed, "RNG seed for dataset sampling");
  cmd->add_option("--out", opts.out_path, "Output path ('-' = stdout)");
  cmd->add_option("--format", opts.format, "Report format: json|markdown|csv")
      ->check(CLI::IsMember({"json", "markdown", "csv"}));
  cmd->add_option("--tau-rel", opts.tau_rel, "Relevance threshold for violation tracing");
  cmd->add_option("--tau-ent", opts.tau_ent, "Entailment threshold for violation tracing");
  cmd->add_option("--tau-con", opts.tau_con, "Contradiction threshold for violation tracing");
  cmd->add_option("--max-in-flight", opts.max_in_flight, "Concurrent judgments");
  cmd->add_option("--votes", opts.votes, "Votes averaged per judgment (chat backend)");
  cmd->add_option("--timeout", opts.timeout_seconds, "Chat request timeout in seconds");
  cmd->add_option("--character", opts.character, "Character name used in prompt templates");
  cmd->add_option("--prompts-dir", opts.prompts_dir, "Directory overriding prompt templates");
}

struct BuiltBackend {
  std::shared_ptr<JudgeBackend> backend;
  std::shared_ptr<CachedBackend> cache;  // set when a cache wraps the backend
};

BuiltBackend make_backend(const CommonOpts& opts) {
  std::shared_ptr<JudgeBackend> inner;
  if (opts.backend == "oracle") {
    if (opts.oracle_file.empty()) {
      throw ValidationError("--backend oracle requires --oracle-file");
    }
    inner = std::make_shared<OracleBackend>(OracleTable::from_file(opts.oracle_file));
  } else {
    JudgeBackendConfig config;
    config.backend_kind = JudgeBackendConfig::Kind::chat_api;
    if (!opts.endpoint.empty()) config.endpoint_url = opts.endpoint;
    if (!opts.model.empty()) config.model_name = opts.model;
    config.votes_per_judgment = opts.votes;
    config.max_in_flight = opts.max_in_flight;
    config.timeout_seconds = opts.timeout_seconds;
    const PromptTemplates templates = opts.prompts_dir.empty()
                                          ? PromptTemplates::defaults()
                                          : PromptTemplates::load_dir(opts.prompts_dir);
    inner = std::make_shared<ChatJudgeBackend>(config, templates, opts.character);
    if (opts.backend == "cached-chat" && opts.cache_dir.empty()) {
      throw ValidationError("--backend cached-chat requires --cache-dir");
    }
  }
  BuiltBackend built;
  if (!opts.cache_dir.empty()) {
    built.cache = std::make_shared<CachedBackend>(inner, opts.cache_dir);
    built.backend = built.cache;
  } else {
    built.backend = inner;
  }
  return built;
}

void report_cache_stats(const BuiltBackend& built, std::ostream& err) {
  if (!built.cache) return;
  const auto stats = built.cache->stats();
  err << "cache: " << stats.hits << " hits, " << stats.misses << " misses\n";
}

void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << content;
  if (!out) throw ValidationError("short write to " + path.string());
}

void emit(const CommonOpts& opts, const std::string& content, std::ostream& out) {
  if (opts.out_path == "-") {
    out << content;
  } else {
    write_text_file(opts.out_path, content);
  }
}

// ---------------------------------------------------------------------------
// score

struct ScoreArgs {
  CommonOpts common;
  std::string persona_file;
  std::string interactions_file;
};

int cmd_score(const ScoreArgs& args, std::ostream& out, std::ostream& err) {
  const Persona persona = load_persona_jsonl(args.persona_file, args.common.character);
  const auto interactions = load_interactions_jsonl(args.interactions_file);
  const auto built = make_backend(args.common);

  ApcReport report;
  ScoreOptions options;
  options.thresholds = {args.common.tau_rel, args.common.tau_ent, args.common.tau_con};
  for (size_t i = 0; i < interactions.size(); ++i) {
    options.interaction_index = static_cast<int>(i);
    report.per_interaction.push_back(
        score_interaction(persona, interactions[i], *built.backend, options));
  }
  report.finalize();

  std::ostringstream body;
  write_report(body, report, report_format_from_string(args.common.format));
  emit(args.common, body.str(), out);
  report_cache_stats(built, err);
  return 0;
}

// ---------------------------------------------------------------------------
// distill

struct DistillArgs {
  CommonOpts common;
  std::string persona_file;
  DistillParams params;
};

ordered_json distill_params_json(const DistillParams& params) {
  return {{"queries_per_statement", params.queries_per_statement},
          {"relevance_negatives_per_query", params.relevance_negatives_per_query},
          {"nli_distractors_per_pair", params.nli_distractors_per_pair},
          {"feed_discriminated_relevant", params.feed_discriminated_relevant}};
}

template <typename Record>
ordered_json label_counts(const std::vector<Record>& records,
                          const std::vector<std::string>& labels) {
  ordered_json counts;
  counts["total"] = records.size();
  for (const char* source : {"generated", "discriminated"}) {
    counts[source] =
        std::count_if(records.begin(), records.end(),
                      [&](const Record& r) { return r.source == source; });
  }
  for (const auto& label : labels) {
    counts[label] = std::count_if(records.begin(), records.end(),
                                  [&](const Record& r) { return r.label == label; });
  }
  return counts;
}

int cmd_distill(const DistillArgs& args, std::ostream& out, std::ostream& err) {
  Persona persona = load_persona_jsonl(args.persona_file, args.common.character);
  DistillParams params = args.params;
  params.rng_seed = args.common.seed;

  // Parameter feasibility is checked before any backend is touched.
  {
    const int others = static_cast<int>(persona.statements.size()) - 1;
    if (params.relevance_negatives_per_query > others ||
        params.nli_distractors_per_pair > others) {
      throw ValidationError("distill: persona has only " + std::to_string(others) +
                            " other statement(s); lower --negatives-per-query/"
                            "--distractors-per-pair");
    }
    params.validate();
  }

  const auto built = make_backend(args.common);
  const DistillOutput output = run_distillation(persona, *built.backend, params);

  const fs::path dir = args.common.out_path == "-" ? fs::path(".") : fs::path(args.common.out_path);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ValidationError("cannot create output directory " + dir.string());

  std::string relevance_lines;
  for (const auto& record : output.relevance) relevance_lines += to_jsonl(record) + "\n";
  write_text_file(dir / "relevance.jsonl", relevance_lines);

  std::string nli_lines;
  for (const auto& record : output.nli) nli_lines += to_jsonl(record) + "\n";
  write_text_file(dir / "nli.jsonl", nli_lines);

  const ordered_json relevance_meta = {{"params", distill_params_json(params)},
                                       {"seed", params.rng_seed},
                                       {"counts", label_counts(output.relevance, kRelevanceLabels)}};
  write_text_file(dir / "relevance.meta.json", relevance_meta.dump(2) + "\n");
  const ordered_json nli_meta = {{"params", distill_params_json(params)},
                                 {"seed", params.rng_seed},
                                 {"counts", label_counts(output.nli, kNliLabels)}};
  write_text_file(dir / "nli.meta.json", nli_meta.dump(2) + "\n");

  out << "relevance records: " << output.relevance.size()
      << "\nnli records: " << output.nli.size() << "\nwritten to " << dir.string() << "\n";
  report_cache_stats(built, err);
  return 0;
}

// ---------------------------------------------------------------------------
// pairs

struct PairsArgs {
  CommonOpts common;
  std::string persona_file;
  std::string queries_file;
  PreferenceParams params;
};

int cmd_pairs(const PairsArgs& args, std::ostream& out, std::ostream& err) {
  const Persona persona = load_persona_jsonl(args.persona_file, args.common.character);
  const auto queries = load_queries_jsonl(args.queries_file);
  args.params.validate();
  const auto built = make_backend(args.common);

  // The configured backend serves as both the sampled agent and the judge.
  const PreferenceDataset dataset =
      build_preference_dataset(persona, queries, *built.backend, *built.backend, args.params);

  std::string lines;
  for (const auto& record : dataset.records) lines += to_jsonl(record) + "\n";
  const fs::path out_path =
      args.common.out_path == "-" ? fs::path("pairs.jsonl") : fs::path(args.common.out_path);
  write_text_file(out_path, lines);

  const ordered_json meta = {
      {"params",
       {{"pairs_before_filter", args.params.pairs_before_filter},
        {"score_margin", args.params.score_margin},
        {"sample_temperature", args.params.sample_temperature}}},
      {"seed", args.common.seed},
      {"counts",
       {{"candidates", dataset.candidates},
        {"kept", dataset.records.size()},
        {"dropped", dataset.dropped}}}};
  write_text_file(out_path.string() + ".meta.json", meta.dump(2) + "\n");

  out << "kept " << dataset.records.size() << " of " << dataset.candidates
      << " candidate pairs (dropped " << dataset.dropped << ")\n";
  report_cache_stats(built, err);
  return 0;
}

// ---------------------------------------------------------------------------
// rank

struct RankArgs {
  CommonOpts common;
  std::string persona_file;
  std::string query;
  int k = 5;
};

int cmd_rank(const RankArgs& args, std::ostream& out, std::ostream& err) {
  const Persona persona = load_persona_jsonl(args.persona_file, args.common.character);
  const auto built = make_backend(args.common);
  const auto ranked = rank_statements(args.query, persona, *built.backend, args.k);
  for (const auto& entry : ranked) {
    out << entry.statement.id << "\t" << entry.p_relevant << "\t" << entry.statement.text << "\n";
  }
  report_cache_stats(built, err);
  return 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// JSONL loaders

Persona load_persona_jsonl(const fs::path& path, const std::string& character_name) {
  struct Row {
    std::optional<int> id;
    std::string text;
    size_t line_no;
  };
  std::vector<Row> rows;
  for_each_jsonl_record(path, [&](size_t line_no, const json& record) {
    Row row;
    row.line_no = line_no;
    if (record.contains("id")) row.id = record.at("id").get<int>();
    row.text = trim(record.at("statement").get<std::string>());
    if (row.text.empty()) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                            ": statement is empty");
    }
    rows.push_back(std::move(row));
  });
  if (rows.empty()) throw ValidationError(path.string() + ": no persona statements");

  const size_t with_id = std::count_if(rows.begin(), rows.end(),
                                       [](const Row& r) { return r.id.has_value(); });
  if (with_id != 0 && with_id != rows.size()) {
    throw ValidationError(path.string() + ": either all records carry an id or none do");
  }

  Persona persona;
  persona.character_name = character_name;
  for (size_t i = 0; i < rows.size(); ++i) {
    persona.statements.push_back(
        {rows[i].id.value_or(static_cast<int>(i)), std::move(rows[i].text)});
  }
  try {
    persona.validate();
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return persona;
}

std::vector<Interaction> load_interactions_jsonl(const fs::path& path) {
  std::vector<Interaction> interactions;
  for_each_jsonl_record(path, [&](size_t line_no, const json& record) {
    Interaction interaction;
    interaction.query = record.at("query").get<std::string>();
    interaction.response = record.at("response").get<std::string>();
    if (record.contains("method")) interaction.method_label = record.at("method").get<std::string>();
    if (interaction.query.empty()) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": query is empty");
    }
    interactions.push_back(std::move(interaction));
  });
  if (interactions.empty()) throw ValidationError(path.string() + ": no interactions");
  return interactions;
}

std::vector<std::string> load_queries_jsonl(const fs::path& path) {
  std::vector<std::string> queries;
  for_each_jsonl_record(path, [&](size_t line_no, const json& record) {
    std::string query = record.at("query").get<std::string>();
    if (query.empty()) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": query is empty");
    }
    queries.push_back(std::move(query));
  });
  if (queries.empty()) throw ValidationError(path.string() + ": no queries");
  return queries;
}

// ---------------------------------------------------------------------------
// entry point

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Persona-constraint faithfulness scoring and dataset tools"};
  app.require_subcommand(1);

  ScoreArgs score_args;
  auto* score = app.add_subcommand("score", "Score interactions against a persona");
  score->add_option("persona", score_args.persona_file, "Persona JSONL")->required();
  score->add_option("interactions", score_args.interactions_file, "Interactions JSONL")->required();
  add_common_options(score, score_args.common);

  DistillArgs distill_args;
  auto* distill = app.add_subcommand("distill", "Generate relevance and NLI datasets");
  distill->add_option("persona", distill_args.persona_file, "Persona JSONL")->required();
  add_common_options(distill, distill_args.common);
  distill->add_option("--queries-per-statement", distill_args.params.queries_per_statement,
                      "Generated queries per statement");
  distill->add_option("--negatives-per-query", distill_args.params.relevance_negatives_per_query,
                      "Sampled other statements per generated query");
  distill->add_option("--distractors-per-pair", distill_args.params.nli_distractors_per_pair,
                      "Sampled distractor statements per response");
  distill->add_flag("--include-discriminated-relevant",
                    distill_args.params.feed_discriminated_relevant,
                    "Also run stage 3 on stage-2 pairs judged relevant");

  PairsArgs pairs_args;
  auto* pairs = app.add_subcommand("pairs", "Build a preference dataset");
  pairs->add_option("persona", pairs_args.persona_file, "Persona JSONL")->required();
  pairs->add_option("queries", pairs_args.queries_file, "Queries JSONL")->required();
  add_common_options(pairs, pairs_args.common);
  pairs->add_option("--pairs-before-filter", pairs_args.params.pairs_before_filter,
                    "Candidate pairs sampled before filtering");
  pairs->add_option("--margin", pairs_args.params.score_margin,
                    "Minimum score gap for keeping a pair");
  pairs->add_option("--sample-temperature", pairs_args.params.sample_temperature,
                    "Sampling temperature for response pairs");

  RankArgs rank_args;
  auto* rank = app.add_subcommand("rank", "Rank statements by relevance to a query");
  rank->add_option("persona", rank_args.persona_file, "Persona JSONL")->required();
  rank->add_option("query", rank_args.query, "Query text")->required();
  add_common_options(rank, rank_args.common);
  rank->add_option("-k,--k", rank_args.k, "How many statements to keep");

  std::vector<const char*> argv;
  argv.push_back("apc");
  for (const auto& arg : args) argv.push_back(arg.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (score->parsed()) return cmd_score(score_args, out, err);
    if (distill->parsed()) return cmd_distill(distill_args, out, err);
    if (pairs->parsed()) return cmd_pairs(pairs_args, out, err);
    if (rank->parsed()) return cmd_rank(rank_args, out, err);
    err << "error: no subcommand\n";
    return 1;
  } catch (const BackendError& e) {
    err << "backend error: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace apc
