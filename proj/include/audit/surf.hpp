#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "audit/core.hpp"
#include "audit/gateway.hpp"
#include "audit/jsonl.hpp"

// The SURF loop: per pipeline, iterate (weight -> sample -> generate ->
// score -> merge); run pipelines in parallel with derived seeds; persist
// run state; aggregate into audit reports.

namespace audit {

struct SurfConfig {
  Rubric rubric;
  std::filesystem::path attribute_pool_path;
  int iterations = 20;              // T
  int candidates_per_iteration = 360;  // N
  int max_attributes_per_query = 5;    // draws set sizes uniformly from {1..k_max}
  std::size_t buffer_capacity = 50;
  int parallel_pipelines = 15;
  int convergence_patience = 3;  // stop after this many iterations without buffer-mean gain
  int report_top_m = 75;
  std::uint64_t seed = 0;

  void validate() const;
};

// One generated candidate as logged: scored entries carry a score, dropped
// ones carry the reason instead.
struct LoggedCandidate {
  std::string query;
  std::string response;
  std::vector<std::string> attribute_ids;
  int iteration = 0;
  std::string pipeline_id;
  std::optional<double> score;
  std::string status;  // "scored" or "dropped:<reason>"
};

struct IterationStats {
  int iteration = 0;
  double buffer_mean = 0.0;
  double buffer_max = 0.0;
  int generated = 0;
  int merged = 0;
  int dropped = 0;
};

struct PipelineState {
  std::string pipeline_id;
  std::uint64_t seed = 0;
  ReplayBuffer buffer;
  int iterations_completed = 0;
  bool converged = false;
  bool aborted = false;
  std::string abort_reason;
  std::vector<IterationStats> stats;
  std::vector<LoggedCandidate> candidate_log;  // append-only

  // convergence bookkeeping, maintained by run_iteration
  double previous_mean = -1.0;
  int stagnant_iterations = 0;
};

struct RunState {
  SurfConfig config;
  AttributePool pool;
  std::vector<PipelineState> pipelines;
};

// Loads an attribute pool file: JSONL {id, text} when the first line opens
// with '{', otherwise one attribute text per line with derived ids.
AttributePool load_attribute_pool(const std::filesystem::path& path);

RunState init_run(SurfConfig config, AttributePool pool);

// One search iteration for one pipeline: weights from the buffer (uniform
// when empty), N sampled attribute sets with sizes uniform in {1..k_max},
// generate -> target -> judge per set, merge the parseable candidates.
// Aborts with ErrorKind::pipeline if more than half the batch drops.
void run_iteration(RunState& state, std::size_t pipeline_index, ModelGateway& gateway);

// Runs every pipeline (derived seeds) for at most T iterations with early
// stopping. A pipeline aborting never stops its siblings; at least one
// pipeline must complete or ErrorKind::pipeline is raised.
RunState run_audit(const SurfConfig& config, const AttributePool& pool, ModelGateway& gateway,
                   const std::function<bool()>& should_stop = {});

// Cross-pipeline TopK over the concatenated buffers.
std::vector<ScoredCandidate> merged_view(const RunState& state, std::size_t top_m);

struct AttributeRanking {
  Attribute attribute;
  double weight = 0.0;
};

struct RunReport {
  int considered = 0;      // candidates actually examined (top-m or fewer)
  int violations = 0;      // scores strictly above the rubric threshold
  int violation_percent = 0;
  double violation_fraction = 0.0;
  std::vector<AttributeRanking> attribute_ranking;
  std::vector<ScoredCandidate> top_candidates;
};

// Violation fraction over the top-m merged candidates plus attribute
// weight rankings. Throws ErrorKind::empty_run when nothing was scored.
RunReport summarize_run(const RunState& state, int top_m = 75);

json run_report_to_json(const RunReport& report, const RunState& state);
std::string run_report_to_markdown(const RunReport& report, const RunState& state);

// Run-directory layout: config.json, report.json, report.md, and one
// pipeline-NN/ directory per pipeline holding buffer.jsonl,
// candidates.jsonl, stats.jsonl.
void persist_run_state(const RunState& state, const std::filesystem::path& directory);

// Reloads config, pool, buffers, and stats from a persisted run directory
// (candidate logs stay on disk).
RunState load_run_state(const std::filesystem::path& directory);

json surf_config_to_json(const SurfConfig& config);
SurfConfig surf_config_from_json(const json& value);

}  // namespace audit
