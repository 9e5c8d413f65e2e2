#pragma once
// Pluggable judges for statement-query relevance and statement-to-response
// NLI, plus the text-generation backend used by the dataset pipeline.
//
// Three backends:
//   OracleBackend: lookup table loaded from a JSON file; deterministic,
//                  used for fixtures and replay verification.
//   ChatJudgeBackend: chat-completion HTTP endpoint; discrete labels are
//                  vote-averaged into distributions.
//   CachedBackend: wraps any backend with an append-only on-disk cache.
//
// All backends are safe to share across threads.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "apc/core.hpp"

namespace apc {

// Connection/HTTP/protocol failure talking to a live backend.
class TransportError : public BackendError {
public:
  using BackendError::BackendError;
};

// The judge replied but no usable label payload could be extracted.
class LabelParseError : public BackendError {
public:
  using BackendError::BackendError;
};

// A persisted cache record is unreadable or malformed.
class CacheError : public BackendError {
public:
  using BackendError::BackendError;
};

struct JudgeBackendConfig {
  enum class Kind { oracle, chat_api, cached };

  Kind backend_kind = Kind::oracle;
  std::optional<std::string> endpoint_url;
  std::optional<std::string> model_name;
  int votes_per_judgment = 1;
  int max_in_flight = 8;
  double timeout_seconds = 60.0;

  void validate() const;  // chat_api requires endpoint_url and model_name
};

class JudgeBackend {
public:
  virtual ~JudgeBackend() = default;

  // Stable string naming this backend; part of every cache key.
  virtual std::string identity() const = 0;

  // How many judgments callers may run concurrently against this backend.
  virtual int max_in_flight() const { return 1; }

  // Votes averaged into one judgment; part of every cache key.
  virtual int votes_per_judgment() const { return 1; }

  virtual RelevanceDist judge_relevance(const PersonaStatement& statement,
                                        const std::string& query) = 0;

  virtual NliDist judge_nli(const PersonaStatement& statement, const std::string& query,
                            const std::string& response) = 0;

  // Returns exactly n completions, order preserved. Throws BackendError on
  // transport failure; never returns partial results.
  virtual std::vector<std::string> generate_text(const std::string& prompt, double temperature,
                                                 int n) = 0;
};

// Extracts the first well-formed JSON object in `text` that carries a string
// "label" field, tolerating surrounding prose. Matching against
// expected_labels is case-insensitive; returns the canonical (lowercase)
// label. Throws BackendError when no payload is found or the label is not in
// the expected set; the message carries the raw text.
std::string parse_label_payload(const std::string& text,
                                const std::vector<std::string>& expected_labels);

extern const std::vector<std::string> kRelevanceLabels;  // {"relevant", "irrelevant"}
extern const std::vector<std::string> kNliLabels;  // {"entailed", "neutral", "contradicted"}

// Editable prompt templates. Placeholders: {character}, {statement}, {query},
// {response}, {relation}. Copies shipped under assets/prompts/ match the
// built-in defaults; load_dir() overrides from files when present.
struct PromptTemplates {
  std::string relevance_judge;
  std::string nli_judge;
  std::string query_gen;
  std::string response_gen;

  static PromptTemplates defaults();
  static PromptTemplates load_dir(const std::filesystem::path& dir);
};

std::string render_template(const std::string& tmpl,
                            const std::map<std::string, std::string>& slots);

// ---------------------------------------------------------------------------
// Oracle backend

// Fixed lookup table keyed on exact input strings.
//
// File format (single JSON document):
//   {
//     "relevance": [{"statement": s, "query": q, "p_relevant": p}, ...],
//     "nli":       [{"statement": s, "query": q, "response": r, "p": [e,n,c]}, ...],
//     "generate":  [{"match": substring, "completions": [c0, c1, ...]}, ...],
//     "fallback":  {"relevance": p, "nli": [e,n,c]}
//   }
// "generate" and "fallback" are optional. A generate entry serves any prompt
// containing `match` (first matching entry wins; "" matches everything) and
// cycles through its completions across calls, so repeated sampling is
// deterministic per process run. Without a fallback, a missing relevance/nli
// entry is a hard lookup error.
class OracleTable {
public:
  static OracleTable from_file(const std::filesystem::path& path);
  static OracleTable from_json_text(const std::string& text, const std::string& origin);

  void add_relevance(std::string statement, std::string query, double p_relevant);
  void add_nli(std::string statement, std::string query, std::string response, NliDist dist);
  void add_generation(std::string match, std::vector<std::string> completions);
  void set_fallback(std::optional<double> relevance, std::optional<NliDist> nli);

  std::optional<double> find_relevance(const std::string& statement,
                                       const std::string& query) const;
  std::optional<NliDist> find_nli(const std::string& statement, const std::string& query,
                                  const std::string& response) const;

  std::optional<double> fallback_relevance() const { return fallback_relevance_; }
  std::optional<NliDist> fallback_nli() const { return fallback_nli_; }

  struct GenerationEntry {
    std::string match;
    std::vector<std::string> completions;
  };
  const std::vector<GenerationEntry>& generation_entries() const { return generation_; }

private:
  std::map<std::pair<std::string, std::string>, double> relevance_;
  std::map<std::tuple<std::string, std::string, std::string>, NliDist> nli_;
  std::vector<GenerationEntry> generation_;
  std::optional<double> fallback_relevance_;
  std::optional<NliDist> fallback_nli_;
};

class OracleBackend : public JudgeBackend {
public:
  explicit OracleBackend(OracleTable table);

  std::string identity() const override { return "oracle"; }
  int max_in_flight() const override { return 8; }

  RelevanceDist judge_relevance(const PersonaStatement& statement,
                                const std::string& query) override;
  NliDist judge_nli(const PersonaStatement& statement, const std::string& query,
                    const std::string& response) override;
  std::vector<std::string> generate_text(const std::string& prompt, double temperature,
                                         int n) override;

private:
  OracleTable table_;
  std::mutex cursor_mutex_;
  std::vector<size_t> cursors_;  // one rotating cursor per generation entry
};

// ---------------------------------------------------------------------------
// Chat backend

// One chat-completion call: messages in, choice contents out.
struct ChatRequest {
  std::string model;
  std::vector<std::pair<std::string, std::string>> messages;  // (role, content)
  double temperature = 0.0;
  int n = 1;
};

class ChatTransport {
public:
  virtual ~ChatTransport() = default;
  // Returns the content of every choice. Throws BackendError on transport or
  // protocol failure.
  virtual std::vector<std::string> send(const ChatRequest& request) = 0;
};

// POSTs {endpoint}/chat/completions with body fields model, messages,
// temperature, n; reads choices[*].message.content. Bearer token from the
// APC_API_KEY environment variable when set.
class HttpChatTransport : public ChatTransport {
public:
  HttpChatTransport(std::string endpoint_url, double timeout_seconds);
  std::vector<std::string> send(const ChatRequest& request) override;

private:
  std::string base_;         // scheme://host[:port]
  std::string path_prefix_;  // anything after the authority, e.g. "/v1"
  double timeout_seconds_;
};

// Judgments prompt the endpoint at temperature 0 with n = votes_per_judgment
// and average the parsed labels into a frequency distribution. Transport
// errors and unparsable payloads are retried up to 3 times with 1s/2s/4s
// backoff; parse retries append an instruction to respond with only the
// payload.
class ChatJudgeBackend : public JudgeBackend {
public:
  ChatJudgeBackend(JudgeBackendConfig config, PromptTemplates templates,
                   std::string character_name,
                   std::shared_ptr<ChatTransport> transport = nullptr);

  std::string identity() const override;
  int max_in_flight() const override { return config_.max_in_flight; }
  int votes_per_judgment() const override { return config_.votes_per_judgment; }

  RelevanceDist judge_relevance(const PersonaStatement& statement,
                                const std::string& query) override;
  NliDist judge_nli(const PersonaStatement& statement, const std::string& query,
                    const std::string& response) override;
  std::vector<std::string> generate_text(const std::string& prompt, double temperature,
                                         int n) override;

  // Test hook: replaces the real backoff sleep.
  void set_retry_sleeper(std::function<void(std::chrono::milliseconds)> sleeper);

private:
  // Collects one parsed label per vote, retrying the whole judgment on any
  // transport or parse failure.
  std::vector<std::string> judged_labels(const std::string& prompt,
                                         const std::vector<std::string>& expected);
  std::vector<std::string> send_with_retry(ChatRequest request);

  JudgeBackendConfig config_;
  PromptTemplates templates_;
  std::string character_;
  std::shared_ptr<ChatTransport> transport_;
  std::function<void(std::chrono::milliseconds)> sleeper_;
};

// ---------------------------------------------------------------------------
// Cached backend

// Append-only cache (cache.jsonl in cache_dir), one record per line:
//   {"key": hex sha-256 of the canonical input tuple, "task": ..., "value": ...}
// Judgment keys cover (identity, task, statement, query, response, votes).
// Generation keys additionally carry a per-tuple call sequence number so a
// rerun replays the same sample sequence instead of collapsing every call to
// the first result. Concurrent callers are serialized on a mutex;
// first-persisted-wins on identical keys.
class CachedBackend : public JudgeBackend {
public:
  CachedBackend(std::shared_ptr<JudgeBackend> inner, std::filesystem::path cache_dir);

  std::string identity() const override { return "cached(" + inner_->identity() + ")"; }
  int max_in_flight() const override { return inner_->max_in_flight(); }
  int votes_per_judgment() const override { return inner_->votes_per_judgment(); }

  RelevanceDist judge_relevance(const PersonaStatement& statement,
                                const std::string& query) override;
  NliDist judge_nli(const PersonaStatement& statement, const std::string& query,
                    const std::string& response) override;
  std::vector<std::string> generate_text(const std::string& prompt, double temperature,
                                         int n) override;

  struct Stats {
    size_t hits = 0;
    size_t misses = 0;
  };
  Stats stats() const;

private:
  void load_existing();
  // Returns the cached value for key, or invokes `miss` and persists its
  // result. `task` is stored in the record for auditability.
  std::string lookup_or_insert(const std::string& key, const std::string& task,
                               const std::function<std::string()>& miss);

  std::shared_ptr<JudgeBackend> inner_;
  std::filesystem::path cache_file_;
  mutable std::mutex mutex_;
  std::ofstream appender_;
  std::map<std::string, std::string> entries_;      // key -> serialized value
  std::map<std::string, uint64_t> generate_seq_;    // base key -> next call index
  Stats stats_;
};

// Hex-encoded SHA-256 of the canonical JSON array of the given parts.
std::string cache_key_digest(const std::vector<std::string>& parts);

}  // namespace apc
