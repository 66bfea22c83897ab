#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "audit/errors.hpp"

namespace audit {

using json = nlohmann::json;

// Streams a JSONL file line by line; the callback receives the 1-based line
// number. Malformed lines raise ErrorKind::input naming the line.
void for_each_jsonl_line(const std::filesystem::path& path,
                         const std::function<void(std::size_t, const json&)>& fn);

std::vector<json> read_jsonl(const std::filesystem::path& path);

// Writes one compact JSON document per line. Parent directories are created.
void write_jsonl(const std::filesystem::path& path, const std::vector<json>& rows);

void append_jsonl(const std::filesystem::path& path, const std::vector<json>& rows);

json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const json& value);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace audit
