#pragma once

#include <json.hpp>

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace soft {

using json = nlohmann::json;

inline constexpr std::string_view kSchemaVersion = "1";

/// Whole-file read. Throws ConfigError naming the path when it cannot be opened.
std::string read_text_file(const std::filesystem::path& path);

/// Writes through a temporary sibling and renames, so readers never observe a
/// half-written file.
void write_text_file_atomic(const std::filesystem::path& path, std::string_view contents);

/// Parses a JSON-lines document. Blank lines are skipped. Parse errors raise
/// ConfigError with the 1-based line number.
std::vector<json> parse_jsonl(std::string_view text, std::string_view source_name);
std::vector<json> read_jsonl(const std::filesystem::path& path);

std::string to_jsonl(const std::vector<json>& rows);
void write_jsonl(const std::filesystem::path& path, const std::vector<json>& rows);

json read_json(const std::filesystem::path& path);
/// Pretty JSON with a trailing newline.
void write_json(const std::filesystem::path& path, const json& value);

/// Lowercase hex SHA-256 of the input bytes.
std::string sha256_hex(std::string_view bytes);

}  // namespace soft
