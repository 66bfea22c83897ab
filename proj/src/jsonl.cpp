#include "audit/jsonl.hpp"

#include <fstream>
#include <sstream>

namespace audit {
namespace {

void ensure_parent(const std::filesystem::path& path) {
  auto parent = path.parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
}

std::ifstream open_for_read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw AuditError(ErrorKind::input, "cannot open file: " + path.string());
  }
  return in;
}

}  // namespace

void for_each_jsonl_line(const std::filesystem::path& path,
                         const std::function<void(std::size_t, const json&)>& fn) {
  auto in = open_for_read(path);
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    json value = json::parse(line, nullptr, false);
    if (value.is_discarded()) {
      throw AuditError(ErrorKind::input,
                       path.string() + ":" + std::to_string(line_number) + ": malformed JSON line");
    }
    fn(line_number, value);
  }
}

std::vector<json> read_jsonl(const std::filesystem::path& path) {
  std::vector<json> rows;
  for_each_jsonl_line(path, [&](std::size_t, const json& value) { rows.push_back(value); });
  return rows;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<json>& rows) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw AuditError(ErrorKind::input, "cannot write file: " + path.string());
  for (const auto& row : rows) out << row.dump() << '\n';
}

void append_jsonl(const std::filesystem::path& path, const std::vector<json>& rows) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw AuditError(ErrorKind::input, "cannot write file: " + path.string());
  for (const auto& row : rows) out << row.dump() << '\n';
}

json read_json_file(const std::filesystem::path& path) {
  auto in = open_for_read(path);
  json value = json::parse(in, nullptr, false);
  if (value.is_discarded()) {
    throw AuditError(ErrorKind::input, "malformed JSON in " + path.string());
  }
  return value;
}

void write_json_file(const std::filesystem::path& path, const json& value) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw AuditError(ErrorKind::input, "cannot write file: " + path.string());
  out << value.dump(2) << '\n';
}

std::string read_text_file(const std::filesystem::path& path) {
  auto in = open_for_read(path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw AuditError(ErrorKind::input, "cannot write file: " + path.string());
  out << text;
}

}  // namespace audit
