#include <sstream>

#include "apc/cli.hpp"
#include "apc/report.hpp"
#include "doctest.h"
#include "json.hpp"
#include "tmpdir.hpp"

using namespace apc;
using apc::testing::slurp;
using apc::testing::TmpDir;

namespace {

const std::string kFixtures = APC_FIXTURE_DIR;

struct CliResult {
  int code = 0;
  std::string out;
  std::string err;
};

CliResult run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> score_args(const std::string& out_path) {
  return {"score",
          kFixtures + "/persona_mira.jsonl",
          kFixtures + "/interviews_mira.jsonl",
          "--backend",
          "oracle",
          "--oracle-file",
          kFixtures + "/oracle_mira.json",
          "--character",
          "Mira",
          "--out",
          out_path};
}

}  // namespace

TEST_CASE("score reproduces the hand-computed fixture report") {
  TmpDir dir("cli");
  const auto result = run(score_args(dir.file("report.json").string()));
  CHECK(result.code == 0);

  const ApcReport report = report_from_json_text(slurp(dir.file("report.json")));
  REQUIRE(report.per_interaction.size() == 2);
  const auto& first = report.per_interaction[0];
  CHECK(first.method_label == "rag");
  CHECK(first.v_apc == 2.46875);
  CHECK(first.delta_v_apc == 0.71875);
  CHECK(first.active_reward == 1.0625);
  CHECK(first.passive_penalty == 0.34375);
  CHECK(first.violations.empty());

  const auto& second = report.per_interaction[1];
  CHECK(second.v_apc == 1.3125);
  CHECK(second.delta_v_apc == -0.4375);
  REQUIRE(second.violations.size() == 2);
  CHECK(second.violations[0].statement_id == 1);
  CHECK(second.violations[0].kind == ViolationKind::passive_contradiction);
  CHECK(second.violations[0].offending_probability == 0.75);
  CHECK(second.violations[1].statement_id == 2);
  CHECK(second.violations[1].kind == ViolationKind::active_miss);

  CHECK(report.aggregates.mean_v_apc == 1.890625);
  CHECK(report.aggregates.mean_delta_v_apc == 0.140625);
  CHECK(report.aggregates.mean_active_reward == 0.65625);
  CHECK(report.aggregates.mean_passive_penalty == 0.515625);
  CHECK(report.aggregates.interaction_count == 2);
  REQUIRE(report.by_method.size() == 2);
  CHECK(report.by_method[0].first == "lcm");
  CHECK(report.by_method[0].second.mean_delta_v_apc == -0.4375);
  CHECK(report.by_method[1].first == "rag");
  CHECK(report.by_method[1].second.mean_delta_v_apc == 0.71875);

  CHECK_NOTHROW(report.check_invariants());
}

TEST_CASE("report JSON round-trips to an equal value") {
  TmpDir dir("cli");
  run(score_args(dir.file("report.json").string()));
  const std::string text = slurp(dir.file("report.json"));
  const ApcReport parsed = report_from_json_text(text);
  const std::string again = report_to_json_text(parsed);
  CHECK(report_from_json_text(again) == parsed);
  CHECK(again == text);
}

TEST_CASE("score emits markdown and csv views") {
  TmpDir dir("cli");
  auto args = score_args(dir.file("report.md").string());
  args.push_back("--format");
  args.push_back("markdown");
  CHECK(run(args).code == 0);
  const std::string md = slurp(dir.file("report.md"));
  CHECK(md.find("| rag |") != std::string::npos);
  CHECK(md.find("| lcm |") != std::string::npos);
  CHECK(md.find("passive_contradiction") != std::string::npos);
  CHECK(md.find("mean dAPC") != std::string::npos);

  auto csv_args = score_args(dir.file("report.csv").string());
  csv_args.push_back("--format");
  csv_args.push_back("csv");
  CHECK(run(csv_args).code == 0);
  const std::string csv = slurp(dir.file("report.csv"));
  CHECK(csv.find("0,rag,2.46875,0.71875,1.0625,0.34375,0,0") != std::string::npos);
  CHECK(csv.find("1,lcm,1.3125,-0.4375,0.25,0.6875,1,1") != std::string::npos);
}

TEST_CASE("score diagnostics cite file and line") {
  TmpDir dir("cli");
  const auto result = run({"score", kFixtures + "/persona_mira.jsonl",
                           kFixtures + "/bad_interactions.jsonl", "--backend", "oracle",
                           "--oracle-file", kFixtures + "/oracle_mira.json", "--out",
                           dir.file("r.json").string()});
  CHECK(result.code == 1);
  CHECK(result.err.find("bad_interactions.jsonl:4") != std::string::npos);
}

TEST_CASE("score maps backend failures to exit 2") {
  TmpDir dir("cli");
  const auto result = run({"score", kFixtures + "/persona_mira.jsonl",
                           kFixtures + "/interviews_mira.jsonl", "--backend", "oracle",
                           "--oracle-file", kFixtures + "/oracle_nessa.json", "--out",
                           dir.file("r.json").string()});
  CHECK(result.code == 2);
  CHECK(result.err.find("backend error") != std::string::npos);
}

TEST_CASE("missing input files exit 1") {
  const auto result = run({"score", "/nonexistent/persona.jsonl",
                           kFixtures + "/interviews_mira.jsonl", "--backend", "oracle",
                           "--oracle-file", kFixtures + "/oracle_mira.json"});
  CHECK(result.code == 1);
}

TEST_CASE("score with a cache directory is idempotent") {
  TmpDir dir("cli");
  auto args = score_args(dir.file("r1.json").string());
  args.push_back("--cache-dir");
  args.push_back(dir.file("cache").string());
  const auto first = run(args);
  CHECK(first.code == 0);
  CHECK(first.err.find("cache: 0 hits, 12 misses") != std::string::npos);

  auto again = score_args(dir.file("r2.json").string());
  again.push_back("--cache-dir");
  again.push_back(dir.file("cache").string());
  const auto second = run(again);
  CHECK(second.code == 0);
  CHECK(second.err.find("cache: 12 hits, 0 misses") != std::string::npos);
  CHECK(slurp(dir.file("r1.json")) == slurp(dir.file("r2.json")));
}

TEST_CASE("distill writes deterministic datasets with closed-form counts") {
  TmpDir dir("cli");
  const auto distill = [&](const std::string& out_dir) {
    return run({"distill", kFixtures + "/persona_harbor.jsonl", "--backend", "oracle",
                "--oracle-file", kFixtures + "/oracle_harbor.json", "--character", "Old Tom",
                "--seed", "7", "--negatives-per-query", "2", "--distractors-per-pair", "2",
                "--out", dir.file(out_dir).string()});
  };
  CHECK(distill("a").code == 0);
  CHECK(distill("b").code == 0);

  for (const char* name : {"relevance.jsonl", "nli.jsonl", "relevance.meta.json",
                           "nli.meta.json"}) {
    CHECK(slurp(dir.file("a") / name) == slurp(dir.file("b") / name));
    CHECK_FALSE(slurp(dir.file("a") / name).empty());
  }

  const auto rel_meta = nlohmann::json::parse(slurp(dir.file("a") / "relevance.meta.json"));
  CHECK(rel_meta["seed"] == 7);
  CHECK(rel_meta["counts"]["total"] == 3 * 3 * (1 + 2));
  CHECK(rel_meta["counts"]["generated"] == 9);
  CHECK(rel_meta["counts"]["discriminated"] == 18);
  const auto nli_meta = nlohmann::json::parse(slurp(dir.file("a") / "nli.meta.json"));
  CHECK(nli_meta["counts"]["total"] == 3 * 3 * 3 * (1 + 2));
  // the harbor oracle falls back to neutral for every discriminated record
  CHECK(nli_meta["counts"]["neutral"] == 54 + 9);
  CHECK(nli_meta["counts"]["entailed"] == 9);
  CHECK(nli_meta["counts"]["contradicted"] == 9);

  const std::string first_line = slurp(dir.file("a") / "relevance.jsonl");
  CHECK(first_line.find("\"source\":\"generated\"") != std::string::npos);
}

TEST_CASE("distill and pairs replay byte-identically from the cache") {
  TmpDir dir("cli");
  const auto distill = [&](const std::string& out_dir) {
    return run({"distill", kFixtures + "/persona_harbor.jsonl", "--backend", "oracle",
                "--oracle-file", kFixtures + "/oracle_harbor.json", "--seed", "3",
                "--negatives-per-query", "1", "--distractors-per-pair", "1", "--cache-dir",
                dir.file("cache").string(), "--out", dir.file(out_dir).string()});
  };
  CHECK(distill("a").code == 0);
  const auto second = distill("b");
  CHECK(second.code == 0);
  CHECK(second.err.find(", 0 misses") != std::string::npos);  // fully served from cache
  CHECK(slurp(dir.file("a") / "relevance.jsonl") == slurp(dir.file("b") / "relevance.jsonl"));
  CHECK(slurp(dir.file("a") / "nli.jsonl") == slurp(dir.file("b") / "nli.jsonl"));

  const auto pairs = [&](const std::string& name) {
    return run({"pairs", kFixtures + "/persona_nessa.jsonl", kFixtures + "/queries_nessa.jsonl",
                "--backend", "oracle", "--oracle-file", kFixtures + "/oracle_nessa.json",
                "--pairs-before-filter", "3", "--cache-dir", dir.file("pair-cache").string(),
                "--out", dir.file(name).string()});
  };
  CHECK(pairs("p1.jsonl").code == 0);
  const auto pairs_again = pairs("p2.jsonl");
  CHECK(pairs_again.code == 0);
  CHECK(pairs_again.err.find(", 0 misses") != std::string::npos);
  CHECK(slurp(dir.file("p1.jsonl")) == slurp(dir.file("p2.jsonl")));
}

TEST_CASE("distill refuses a one-statement persona before touching the backend") {
  TmpDir dir("cli");
  const auto result = run({"distill", kFixtures + "/persona_single.jsonl", "--backend", "oracle",
                           "--oracle-file", "/nonexistent/never-read.json", "--out",
                           dir.file("x").string()});
  CHECK(result.code == 1);  // parameter error fires before the oracle file is opened
  CHECK(result.err.find("other statement") != std::string::npos);
}

TEST_CASE("pairs keeps the hand-filtered set") {
  TmpDir dir("cli");
  const auto result = run({"pairs", kFixtures + "/persona_nessa.jsonl",
                           kFixtures + "/queries_nessa.jsonl", "--backend", "oracle",
                           "--oracle-file", kFixtures + "/oracle_nessa.json", "--character",
                           "Nessa", "--pairs-before-filter", "3", "--out",
                           dir.file("pairs.jsonl").string()});
  CHECK(result.code == 0);
  CHECK(result.out.find("kept 2 of 3 candidate pairs (dropped 1)") != std::string::npos);

  std::istringstream lines(slurp(dir.file("pairs.jsonl")));
  std::string line;
  std::vector<nlohmann::json> records;
  while (std::getline(lines, line)) {
    if (!line.empty()) records.push_back(nlohmann::json::parse(line));
  }
  REQUIRE(records.size() == 2);
  CHECK(records[0]["chosen"] == "My pigeons carry letters across the strait.");
  CHECK(records[0]["score_chosen"] == 1.0);
  CHECK(records[0]["score_rejected"] == 0.5);
  CHECK(records[1]["chosen"] == "Birds are nice.");
  CHECK(records[1]["rejected"] == "I love reading books about birds.");

  const auto meta = nlohmann::json::parse(slurp(dir.file("pairs.jsonl.meta.json")));
  CHECK(meta["counts"]["kept"] == 2);
  CHECK(meta["counts"]["dropped"] == 1);
}

TEST_CASE("pairs with a huge margin keeps nothing but succeeds") {
  TmpDir dir("cli");
  const auto result = run({"pairs", kFixtures + "/persona_nessa.jsonl",
                           kFixtures + "/queries_nessa.jsonl", "--backend", "oracle",
                           "--oracle-file", kFixtures + "/oracle_nessa.json",
                           "--pairs-before-filter", "3", "--margin", "1e9", "--out",
                           dir.file("pairs.jsonl").string()});
  CHECK(result.code == 0);
  CHECK(result.out.find("kept 0 of 3") != std::string::npos);
  CHECK(slurp(dir.file("pairs.jsonl")).empty());
}

TEST_CASE("pairs without a queries file exits 1") {
  const auto result = run({"pairs", kFixtures + "/persona_nessa.jsonl",
                           "/nonexistent/queries.jsonl", "--backend", "oracle", "--oracle-file",
                           kFixtures + "/oracle_nessa.json"});
  CHECK(result.code == 1);
}

TEST_CASE("rank prints the top statements") {
  const std::vector<std::string> base = {"rank",
                                         kFixtures + "/persona_mira.jsonl",
                                         "What do you do for work?",
                                         "--backend",
                                         "oracle",
                                         "--oracle-file",
                                         kFixtures + "/oracle_mira.json"};

  auto top2 = base;
  top2.push_back("-k");
  top2.push_back("2");
  const auto two = run(top2);
  CHECK(two.code == 0);
  std::istringstream lines(two.out);
  std::string l1, l2, l3;
  std::getline(lines, l1);
  std::getline(lines, l2);
  CHECK(l1.starts_with("0\t1\t"));
  CHECK(l2.starts_with("1\t0.25\t"));
  CHECK_FALSE(std::getline(lines, l3));

  // default k is 5, larger than |S|: all three statements
  const auto all = run(base);
  CHECK(all.code == 0);
  CHECK(std::count(all.out.begin(), all.out.end(), '\n') == 3);
}

TEST_CASE("unknown flags and missing subcommands are input errors") {
  CHECK(run({"score"}).code == 1);
  CHECK(run({"bogus"}).code == 1);
  CHECK(run({"--help"}).code == 0);
}
