#pragma once
// Command-line surface: `score`, `distill`, `pairs`, `rank`. All file I/O
// lives here (the judge cache is the only other module touching disk).
//
// Exit codes: 0 success, 1 input/validation error, 2 backend/transport error.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "apc/core.hpp"

namespace apc {

// Parses and runs one invocation; `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// JSONL loaders shared with the test suites. Parse failures throw
// ValidationError naming file and line.
Persona load_persona_jsonl(const std::filesystem::path& path, const std::string& character_name);
std::vector<Interaction> load_interactions_jsonl(const std::filesystem::path& path);
std::vector<std::string> load_queries_jsonl(const std::filesystem::path& path);

}  // namespace apc
