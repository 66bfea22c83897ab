#pragma once

#include <stdexcept>
#include <string>

namespace audit {

// Every failure surfaced by the toolkit carries a category so callers (and
// the CLI exit-code mapping) can react without string matching.
enum class ErrorKind {
  config,            // bad configuration / unusable parameters
  input,             // malformed caller-supplied data
  integrity,         // internal cross-reference broken (unknown attribute id, ...)
  insufficient_pool, // sampling asked for more attributes than are available
  gateway,           // transport failure after retries
  judge_parse,       // judge reply missing/violating the SCORE contract
  protocol,          // remote replied with an unusable payload shape
  corrupt_index,     // persisted index fails structural validation
  version_mismatch,  // persisted index written by an incompatible format
  dimension_mismatch,// embedding dimension disagrees with the index
  empty_run,         // report requested over a run with no candidates
  pipeline,          // a search pipeline aborted
};

class AuditError : public std::runtime_error {
 public:
  AuditError(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

inline const char* error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return "config";
    case ErrorKind::input: return "input";
    case ErrorKind::integrity: return "integrity";
    case ErrorKind::insufficient_pool: return "insufficient_pool";
    case ErrorKind::gateway: return "gateway";
    case ErrorKind::judge_parse: return "judge_parse";
    case ErrorKind::protocol: return "protocol";
    case ErrorKind::corrupt_index: return "corrupt_index";
    case ErrorKind::version_mismatch: return "version_mismatch";
    case ErrorKind::dimension_mismatch: return "dimension_mismatch";
    case ErrorKind::empty_run: return "empty_run";
    case ErrorKind::pipeline: return "pipeline";
  }
  return "unknown";
}

}  // namespace audit
