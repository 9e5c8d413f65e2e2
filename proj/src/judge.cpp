#include "apc/judge.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cctype>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "json.hpp"

namespace apc {

using nlohmann::json;

const std::vector<std::string> kRelevanceLabels = {"relevant", "irrelevant"};
const std::vector<std::string> kNliLabels = {"entailed", "neutral", "contradicted"};

namespace {

std::string to_lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::string trim_copy(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return {};
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

std::string snippet(const std::string& s, size_t limit = 160) {
  if (s.size() <= limit) return s;
  return s.substr(0, limit) + "...";
}

double checked_probability(double p, const std::string& context) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw ValidationError(context + ": probability out of [0,1]: " + std::to_string(p));
  }
  return p;
}

NliDist nli_from_json_array(const json& arr, const std::string& context) {
  if (!arr.is_array() || arr.size() != 3) {
    throw ValidationError(context + ": expected a 3-element [entailed, neutral, contradicted] array");
  }
  return NliDist(arr[0].get<double>(), arr[1].get<double>(), arr[2].get<double>());
}

}  // namespace

void JudgeBackendConfig::validate() const {
  if (votes_per_judgment < 1) throw ValidationError("backend config: votes_per_judgment must be >= 1");
  if (max_in_flight < 1) throw ValidationError("backend config: max_in_flight must be >= 1");
  if (!(timeout_seconds > 0)) throw ValidationError("backend config: timeout_seconds must be > 0");
  if (backend_kind == Kind::chat_api) {
    if (!endpoint_url || endpoint_url->empty())
      throw ValidationError("backend config: chat_api requires endpoint_url");
    if (!model_name || model_name->empty())
      throw ValidationError("backend config: chat_api requires model_name");
  }
}

std::string parse_label_payload(const std::string& text,
                                const std::vector<std::string>& expected_labels) {
  size_t pos = 0;
  while ((pos = text.find('{', pos)) != std::string::npos) {
    // Find the matching close brace, skipping brace characters inside strings.
    int depth = 0;
    bool in_string = false;
    bool escaped = false;
    size_t end = std::string::npos;
    for (size_t i = pos; i < text.size(); ++i) {
      const char c = text[i];
      if (in_string) {
        if (escaped) escaped = false;
        else if (c == '\\') escaped = true;
        else if (c == '"') in_string = false;
      } else if (c == '"') {
        in_string = true;
      } else if (c == '{') {
        ++depth;
      } else if (c == '}') {
        if (--depth == 0) {
          end = i;
          break;
        }
      }
    }
    if (end != std::string::npos) {
      const json payload = json::parse(text.substr(pos, end - pos + 1), nullptr, false);
      if (payload.is_object() && payload.contains("label") && payload["label"].is_string()) {
        const std::string label = to_lower(trim_copy(payload["label"].get<std::string>()));
        for (const auto& candidate : expected_labels) {
          if (label == candidate) return label;
        }
        throw LabelParseError("unknown label '" + label + "' in judge reply: " + snippet(text));
      }
    }
    ++pos;
  }
  throw LabelParseError("no label payload in judge reply: " + snippet(text));
}

// ---------------------------------------------------------------------------
// Prompt templates

namespace {

constexpr const char* kRelevanceJudgeTemplate =
    R"(You are checking whether a persona statement matters for answering a user query addressed to the character {character}.

Persona statement: {statement}
User query: {query}

Decide whether the query is relevant to the persona statement, meaning a faithful answer would need to draw on it. Reply with a JSON object, either {"label": "relevant"} or {"label": "irrelevant"}.)";

constexpr const char* kNliJudgeTemplate =
    R"(You are grading a role-play response from the character {character} against one persona statement.

Persona statement: {statement}
User query: {query}
Response: {response}

Classify the response with respect to the persona statement, given the query: "entailed" when the response conveys the statement's fact, "contradicted" when it conflicts with it, "neutral" otherwise. Reply with a JSON object such as {"label": "neutral"}.)";

constexpr const char* kQueryGenTemplate =
    R"(Write one natural interview question for the character {character} that is directly relevant to this persona statement.

Persona statement: {statement}

Reply with only the question text.)";

constexpr const char* kResponseGenTemplate =
    R"(Write a short in-character reply from {character} to the user query below. The reply must be {relation} the persona statement.

Persona statement: {statement}
User query: {query}

Reply with only the response text.)";

std::string read_file_or(const std::filesystem::path& path, const std::string& fallback) {
  std::ifstream in(path);
  if (!in) return fallback;
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

PromptTemplates PromptTemplates::defaults() {
  return {kRelevanceJudgeTemplate, kNliJudgeTemplate, kQueryGenTemplate, kResponseGenTemplate};
}

PromptTemplates PromptTemplates::load_dir(const std::filesystem::path& dir) {
  PromptTemplates t = defaults();
  t.relevance_judge = read_file_or(dir / "relevance_judge.txt", t.relevance_judge);
  t.nli_judge = read_file_or(dir / "nli_judge.txt", t.nli_judge);
  t.query_gen = read_file_or(dir / "query_gen.txt", t.query_gen);
  t.response_gen = read_file_or(dir / "response_gen.txt", t.response_gen);
  return t;
}

std::string render_template(const std::string& tmpl,
                            const std::map<std::string, std::string>& slots) {
  std::string out = tmpl;
  for (const auto& [name, value] : slots) {
    const std::string token = "{" + name + "}";
    size_t pos = 0;
    while ((pos = out.find(token, pos)) != std::string::npos) {
      out.replace(pos, token.size(), value);
      pos += value.size();
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Oracle table and backend

OracleTable OracleTable::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("oracle file: cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_json_text(buf.str(), path.string());
}

OracleTable OracleTable::from_json_text(const std::string& text, const std::string& origin) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError("oracle file " + origin + ": " + e.what());
  }
  OracleTable table;
  try {
    for (const auto& entry : doc.value("relevance", json::array())) {
      table.add_relevance(entry.at("statement").get<std::string>(),
                          entry.at("query").get<std::string>(),
                          entry.at("p_relevant").get<double>());
    }
    for (const auto& entry : doc.value("nli", json::array())) {
      table.add_nli(entry.at("statement").get<std::string>(),
                    entry.at("query").get<std::string>(),
                    entry.at("response").get<std::string>(),
                    nli_from_json_array(entry.at("p"), origin));
    }
    for (const auto& entry : doc.value("generate", json::array())) {
      table.add_generation(entry.value("match", std::string{}),
                           entry.at("completions").get<std::vector<std::string>>());
    }
    if (doc.contains("fallback")) {
      const auto& fb = doc["fallback"];
      std::optional<double> rel;
      std::optional<NliDist> nli;
      if (fb.contains("relevance")) rel = fb["relevance"].get<double>();
      if (fb.contains("nli")) nli = nli_from_json_array(fb["nli"], origin);
      table.set_fallback(rel, nli);
    }
  } catch (const json::exception& e) {
    throw ValidationError("oracle file " + origin + ": " + e.what());
  }
  return table;
}

void OracleTable::add_relevance(std::string statement, std::string query, double p_relevant) {
  checked_probability(p_relevant, "oracle relevance entry");
  relevance_[{std::move(statement), std::move(query)}] = p_relevant;
}

void OracleTable::add_nli(std::string statement, std::string query, std::string response,
                          NliDist dist) {
  nli_.insert_or_assign({std::move(statement), std::move(query), std::move(response)}, dist);
}

void OracleTable::add_generation(std::string match, std::vector<std::string> completions) {
  if (completions.empty()) {
    throw ValidationError("oracle generation entry needs at least one completion");
  }
  generation_.push_back({std::move(match), std::move(completions)});
}

void OracleTable::set_fallback(std::optional<double> relevance, std::optional<NliDist> nli) {
  if (relevance) checked_probability(*relevance, "oracle fallback");
  fallback_relevance_ = relevance;
  fallback_nli_ = nli;
}

std::optional<double> OracleTable::find_relevance(const std::string& statement,
                                                  const std::string& query) const {
  const auto it = relevance_.find({statement, query});
  if (it == relevance_.end()) return std::nullopt;
  return it->second;
}

std::optional<NliDist> OracleTable::find_nli(const std::string& statement,
                                             const std::string& query,
                                             const std::string& response) const {
  const auto it = nli_.find({statement, query, response});
  if (it == nli_.end()) return std::nullopt;
  return it->second;
}

OracleBackend::OracleBackend(OracleTable table)
    : table_(std::move(table)), cursors_(table_.generation_entries().size(), 0) {}

RelevanceDist OracleBackend::judge_relevance(const PersonaStatement& statement,
                                             const std::string& query) {
  if (auto p = table_.find_relevance(statement.text, query)) return RelevanceDist(*p);
  if (auto fb = table_.fallback_relevance()) return RelevanceDist(*fb);
  throw BackendError("oracle miss: no relevance entry for statement \"" + snippet(statement.text) +
                     "\" query \"" + snippet(query) + "\"");
}

NliDist OracleBackend::judge_nli(const PersonaStatement& statement, const std::string& query,
                                 const std::string& response) {
  if (auto dist = table_.find_nli(statement.text, query, response)) return *dist;
  if (auto fb = table_.fallback_nli()) return *fb;
  throw BackendError("oracle miss: no nli entry for statement \"" + snippet(statement.text) +
                     "\" query \"" + snippet(query) + "\" response \"" + snippet(response) + "\"");
}

std::vector<std::string> OracleBackend::generate_text(const std::string& prompt,
                                                      double /*temperature*/, int n) {
  if (n < 1) throw ValidationError("generate_text: n must be >= 1");
  std::lock_guard lock(cursor_mutex_);
  const auto& entries = table_.generation_entries();
  for (size_t i = 0; i < entries.size(); ++i) {
    if (!entries[i].match.empty() && prompt.find(entries[i].match) == std::string::npos) continue;
    std::vector<std::string> out;
    out.reserve(n);
    for (int k = 0; k < n; ++k) {
      out.push_back(entries[i].completions[cursors_[i] % entries[i].completions.size()]);
      ++cursors_[i];
    }
    return out;
  }
  throw BackendError("oracle backend has no generation entry matching prompt \"" + snippet(prompt) +
                     "\"");
}

// ---------------------------------------------------------------------------
// HTTP transport

HttpChatTransport::HttpChatTransport(std::string endpoint_url, double timeout_seconds)
    : timeout_seconds_(timeout_seconds) {
  const auto scheme_end = endpoint_url.find("://");
  if (scheme_end == std::string::npos) {
    throw ValidationError("endpoint_url must start with http:// or https://: " + endpoint_url);
  }
  const auto path_start = endpoint_url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) {
    base_ = endpoint_url;
  } else {
    base_ = endpoint_url.substr(0, path_start);
    path_prefix_ = endpoint_url.substr(path_start);
    while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
  }
}

std::vector<std::string> HttpChatTransport::send(const ChatRequest& request) {
  json messages = json::array();
  for (const auto& [role, content] : request.messages) {
    messages.push_back({{"role", role}, {"content", content}});
  }
  const json body = {{"model", request.model},
                     {"messages", messages},
                     {"temperature", request.temperature},
                     {"n", request.n}};

  httplib::Client client(base_);
  const auto timeout = std::chrono::duration<double>(timeout_seconds_);
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);
  httplib::Headers headers;
  if (const char* key = std::getenv("APC_API_KEY"); key && *key) {
    headers.emplace("Authorization", std::string("Bearer ") + key);
  }

  const auto result =
      client.Post(path_prefix_ + "/chat/completions", headers, body.dump(), "application/json");
  if (!result) {
    throw TransportError("chat request to " + base_ +
                         " failed: " + httplib::to_string(result.error()));
  }
  if (result->status != 200) {
    throw TransportError("chat request to " + base_ + " returned HTTP " +
                         std::to_string(result->status) + ": " + snippet(result->body));
  }

  json doc;
  try {
    doc = json::parse(result->body);
  } catch (const json::exception& e) {
    throw TransportError(std::string("chat response is not JSON: ") + e.what());
  }
  if (!doc.contains("choices") || !doc["choices"].is_array()) {
    throw TransportError("chat response has no choices array: " + snippet(result->body));
  }
  std::vector<std::string> contents;
  for (const auto& choice : doc["choices"]) {
    if (!choice.contains("message") || !choice["message"].contains("content") ||
        !choice["message"]["content"].is_string()) {
      throw TransportError("chat choice has no message.content: " + snippet(result->body));
    }
    contents.push_back(choice["message"]["content"].get<std::string>());
  }
  return contents;
}

// ---------------------------------------------------------------------------
// Chat judge backend

namespace {
constexpr int kMaxAttempts = 4;  // one initial try plus three retries

std::chrono::milliseconds backoff_delay(int retry_index) {
  // 1s, 2s, 4s
  return std::chrono::milliseconds(1000LL << retry_index);
}
}  // namespace

ChatJudgeBackend::ChatJudgeBackend(JudgeBackendConfig config, PromptTemplates templates,
                                   std::string character_name,
                                   std::shared_ptr<ChatTransport> transport)
    : config_(std::move(config)),
      templates_(std::move(templates)),
      character_(std::move(character_name)),
      transport_(std::move(transport)),
      sleeper_([](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }) {
  config_.validate();
  if (config_.backend_kind != JudgeBackendConfig::Kind::chat_api) {
    throw ValidationError("ChatJudgeBackend requires a chat_api config");
  }
  if (!transport_) {
    transport_ = std::make_shared<HttpChatTransport>(*config_.endpoint_url,
                                                     config_.timeout_seconds);
  }
}

std::string ChatJudgeBackend::identity() const {
  return "chat/" + config_.endpoint_url.value_or("") + "/" + config_.model_name.value_or("") +
         "/" + character_;
}

void ChatJudgeBackend::set_retry_sleeper(std::function<void(std::chrono::milliseconds)> sleeper) {
  sleeper_ = std::move(sleeper);
}

std::vector<std::string> ChatJudgeBackend::judged_labels(
    const std::string& prompt, const std::vector<std::string>& expected) {
  std::string current_prompt = prompt;
  std::string last_error;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    if (attempt > 0) sleeper_(backoff_delay(attempt - 1));
    ChatRequest request{*config_.model_name,
                        {{"user", current_prompt}},
                        0.0,
                        config_.votes_per_judgment};
    try {
      const auto contents = transport_->send(request);
      if (static_cast<int>(contents.size()) != config_.votes_per_judgment) {
        throw TransportError("chat backend returned " + std::to_string(contents.size()) +
                             " choices, expected " + std::to_string(config_.votes_per_judgment));
      }
      std::vector<std::string> labels;
      labels.reserve(contents.size());
      for (const auto& content : contents) {
        labels.push_back(parse_label_payload(content, expected));
      }
      return labels;
    } catch (const LabelParseError& e) {
      last_error = e.what();
      current_prompt = prompt + "\n\nRespond with only the payload.";
    } catch (const TransportError& e) {
      last_error = e.what();
    }
  }
  throw BackendError("judgment failed after " + std::to_string(kMaxAttempts) +
                     " attempts: " + last_error);
}

RelevanceDist ChatJudgeBackend::judge_relevance(const PersonaStatement& statement,
                                                const std::string& query) {
  const std::string prompt = render_template(
      templates_.relevance_judge,
      {{"character", character_}, {"statement", statement.text}, {"query", query}});
  const auto labels = judged_labels(prompt, kRelevanceLabels);
  const auto relevant = std::count(labels.begin(), labels.end(), "relevant");
  return RelevanceDist(static_cast<double>(relevant) / static_cast<double>(labels.size()));
}

NliDist ChatJudgeBackend::judge_nli(const PersonaStatement& statement, const std::string& query,
                                    const std::string& response) {
  const std::string prompt = render_template(templates_.nli_judge, {{"character", character_},
                                                                    {"statement", statement.text},
                                                                    {"query", query},
                                                                    {"response", response}});
  const auto labels = judged_labels(prompt, kNliLabels);
  const double n = static_cast<double>(labels.size());
  const auto count = [&](const char* label) {
    return static_cast<double>(std::count(labels.begin(), labels.end(), label));
  };
  return NliDist(count("entailed") / n, count("neutral") / n, count("contradicted") / n);
}

std::vector<std::string> ChatJudgeBackend::generate_text(const std::string& prompt,
                                                         double temperature, int n) {
  if (n < 1) throw ValidationError("generate_text: n must be >= 1");
  if (temperature < 0) throw ValidationError("generate_text: temperature must be >= 0");
  ChatRequest request{*config_.model_name, {{"user", prompt}}, temperature, n};
  std::string last_error;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    if (attempt > 0) sleeper_(backoff_delay(attempt - 1));
    try {
      auto contents = transport_->send(request);
      if (static_cast<int>(contents.size()) != n) {
        throw TransportError("chat backend returned " + std::to_string(contents.size()) +
                             " completions, expected " + std::to_string(n));
      }
      return contents;
    } catch (const TransportError& e) {
      last_error = e.what();
    }
  }
  throw BackendError("generation failed after " + std::to_string(kMaxAttempts) +
                     " attempts for prompt \"" + snippet(prompt) + "\": " + last_error);
}

// ---------------------------------------------------------------------------
// Cached backend

std::string cache_key_digest(const std::vector<std::string>& parts) {
  const std::string canonical = json(parts).dump();
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (EVP_Digest(canonical.data(), canonical.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
    throw BackendError("sha-256 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(length * 2);
  for (unsigned int i = 0; i < length; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

CachedBackend::CachedBackend(std::shared_ptr<JudgeBackend> inner, std::filesystem::path cache_dir)
    : inner_(std::move(inner)) {
  if (!inner_) throw ValidationError("cached backend: inner backend is null");
  std::error_code ec;
  std::filesystem::create_directories(cache_dir, ec);
  if (ec) throw ValidationError("cache_dir not writable: " + cache_dir.string());
  cache_file_ = cache_dir / "cache.jsonl";
  load_existing();
  appender_.open(cache_file_, std::ios::app);
  if (!appender_) throw ValidationError("cache_dir not writable: " + cache_file_.string());
}

void CachedBackend::load_existing() {
  std::ifstream in(cache_file_);
  if (!in) return;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json record = json::parse(line, nullptr, false);
    if (record.is_discarded() || !record.is_object() || !record.contains("key") ||
        !record["key"].is_string() || !record.contains("value")) {
      throw CacheError("corrupt cache record at " + cache_file_.string() + ":" +
                       std::to_string(line_no));
    }
    // Later duplicates are ignored: the first persisted record wins.
    entries_.emplace(record["key"].get<std::string>(), record["value"].dump());
  }
}

CachedBackend::Stats CachedBackend::stats() const {
  std::lock_guard lock(mutex_);
  return stats_;
}

std::string CachedBackend::lookup_or_insert(const std::string& key, const std::string& task,
                                            const std::function<std::string()>& miss) {
  {
    std::lock_guard lock(mutex_);
    if (const auto it = entries_.find(key); it != entries_.end()) {
      ++stats_.hits;
      return it->second;
    }
    ++stats_.misses;
  }
  const std::string value = miss();  // inner call happens outside the lock
  std::lock_guard lock(mutex_);
  const auto [it, inserted] = entries_.emplace(key, value);
  if (inserted) {
    const json record = {{"key", key}, {"task", task}, {"value", json::parse(value)}};
    appender_ << record.dump() << "\n";
    appender_.flush();
  }
  return it->second;  // first persisted value wins for concurrent identical calls
}

RelevanceDist CachedBackend::judge_relevance(const PersonaStatement& statement,
                                             const std::string& query) {
  const std::string key =
      cache_key_digest({inner_->identity(), "relevance", statement.text, query,
                        std::to_string(inner_->votes_per_judgment())});
  const std::string value = lookup_or_insert(key, "relevance", [&] {
    return json(inner_->judge_relevance(statement, query).p_relevant()).dump();
  });
  const json parsed = json::parse(value, nullptr, false);
  if (!parsed.is_number()) {
    throw CacheError("corrupt relevance value for cache key " + key);
  }
  return RelevanceDist(parsed.get<double>());
}

NliDist CachedBackend::judge_nli(const PersonaStatement& statement, const std::string& query,
                                 const std::string& response) {
  const std::string key =
      cache_key_digest({inner_->identity(), "nli", statement.text, query, response,
                        std::to_string(inner_->votes_per_judgment())});
  const std::string value = lookup_or_insert(key, "nli", [&] {
    const NliDist dist = inner_->judge_nli(statement, query, response);
    return json({dist.p_entailed(), dist.p_neutral(), dist.p_contradicted()}).dump();
  });
  const json parsed = json::parse(value, nullptr, false);
  if (!parsed.is_array() || parsed.size() != 3) {
    throw CacheError("corrupt nli value for cache key " + key);
  }
  return nli_from_json_array(parsed, "cache record " + key);
}

std::vector<std::string> CachedBackend::generate_text(const std::string& prompt,
                                                      double temperature, int n) {
  const std::string temperature_text = json(temperature).dump();
  const std::string base =
      cache_key_digest({inner_->identity(), "generate", prompt, temperature_text,
                        std::to_string(n)});
  uint64_t sequence = 0;
  {
    std::lock_guard lock(mutex_);
    sequence = generate_seq_[base]++;
  }
  const std::string key = cache_key_digest({inner_->identity(), "generate", prompt,
                                            temperature_text, std::to_string(n),
                                            std::to_string(sequence)});
  const std::string value = lookup_or_insert(
      key, "generate", [&] { return json(inner_->generate_text(prompt, temperature, n)).dump(); });
  const json parsed = json::parse(value, nullptr, false);
  if (!parsed.is_array()) {
    throw CacheError("corrupt generation value for cache key " + key);
  }
  return parsed.get<std::vector<std::string>>();
}

}  // namespace apc
