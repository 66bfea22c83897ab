// audit: command-line front end binding the search engine, the attribution
// index, and the measurement harnesses behind one layered configuration
// system (TOML or snapshotted JSON, flags override file values).

#include <atomic>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "audit/config.hpp"
#include "audit/harness.hpp"
#include "audit/jsonl.hpp"
#include "audit/mock_backend.hpp"
#include "audit/surf.hpp"
#include "audit/turf_attribute.hpp"
#include "audit/turf_index.hpp"

namespace {

using namespace audit;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRunFailure = 3;
constexpr int kExitSoftFlags = 4;

std::atomic<bool> g_interrupted{false};

void handle_sigint(int) { g_interrupted.store(true); }

int exit_code_for(const AuditError& error) {
  switch (error.kind()) {
    case ErrorKind::config:
    case ErrorKind::input:
    case ErrorKind::version_mismatch:
    case ErrorKind::dimension_mismatch:
    case ErrorKind::insufficient_pool:
      return kExitConfig;
    default:
      return kExitRunFailure;
  }
}

// Structured JSONL event stream next to the human stderr log. Events carry
// a sequence number rather than wall-clock time so mock-backed re-runs
// stay byte-identical.
class EventLog {
 public:
  explicit EventLog(fs::path path) : path_(std::move(path)) {
    std::error_code ignored;
    fs::remove(path_, ignored);  // a reused out dir starts a fresh stream
  }

  void emit(std::string event, json fields = json::object()) {
    fields["event"] = std::move(event);
    fields["sequence"] = sequence_++;
    append_jsonl(path_, {fields});
  }

  void gateway_stats(const ModelGateway& gateway) {
    for (Role role : {Role::target, Role::generator, Role::judge, Role::embedder}) {
      if (!gateway.has_role(role)) continue;
      auto stats = gateway.stats(role);
      emit("gateway_stats", {{"role", role_name(role)},
                             {"chat_calls", stats.chat_calls},
                             {"embed_calls", stats.embed_calls},
                             {"retried_attempts", stats.retried_attempts}});
    }
  }

 private:
  fs::path path_;
  std::uint64_t sequence_ = 0;
};

fs::path resolve_out_dir(const std::string& flag_value, const std::string& leaf) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("AUDIT_OUT_DIR"); env && *env) {
    return fs::path(env) / leaf;
  }
  return fs::path("audit-out") / leaf;
}

json load_config_or_die(const std::string& path) {
  if (path.empty()) {
    throw AuditError(ErrorKind::config, "--config is required");
  }
  if (!fs::exists(path)) {
    throw AuditError(ErrorKind::config, "config file does not exist: " + path);
  }
  return load_config_file(path);
}

// Materializes role sections with every default filled so the snapshot is
// fully explicit.
json resolved_roles_json(const json& config_root, const fs::path& base_dir) {
  json resolved = json::object();
  if (!config_root.contains("roles")) {
    throw AuditError(ErrorKind::config, "config has no [roles.*] sections");
  }
  for (const auto& [name, section] : config_root["roles"].items()) {
    Role role = role_from_name(name);
    resolved[name] = role_config_to_json(role_config_from_json(role, section, base_dir));
  }
  return resolved;
}

void write_snapshot(const fs::path& out_dir, const json& snapshot) {
  write_json_file(out_dir / "config.json", snapshot);
}

std::vector<DatasetItem> load_dataset(const fs::path& path) {
  std::vector<DatasetItem> items;
  for_each_jsonl_line(path, [&](std::size_t line, const json& row) {
    if (!row.contains("id") || !row.contains("prompt")) {
      throw AuditError(ErrorKind::input, path.string() + ":" + std::to_string(line) +
                                             ": dataset rows need 'id' and 'prompt'");
    }
    items.push_back({row["id"].get<std::string>(), row["prompt"].get<std::string>(),
                     row.value("answer", "")});
  });
  if (items.empty()) throw AuditError(ErrorKind::input, "dataset is empty: " + path.string());
  return items;
}

std::vector<IclExemplar> load_exemplars(const fs::path& path) {
  std::vector<IclExemplar> exemplars;
  for_each_jsonl_line(path, [&](std::size_t line, const json& row) {
    if (!row.contains("user") || !row.contains("assistant")) {
      throw AuditError(ErrorKind::input, path.string() + ":" + std::to_string(line) +
                                             ": exemplar rows need 'user' and 'assistant'");
    }
    exemplars.push_back({row["user"].get<std::string>(), row["assistant"].get<std::string>()});
  });
  return exemplars;
}

BehaviorDetector detector_from_json(const json& section) {
  BehaviorDetector detector;
  detector.name = section.value("name", "detector");
  detector.mode = detector_mode_from_name(section.value("mode", "substring"));
  detector.definition = section.value("definition", "");
  if (section.contains("rubric")) detector.rubric = rubric_from_json(section["rubric"]);
  return detector;
}

TransformSpec transform_from_json(const json& section) {
  TransformSpec transform;
  if (section.contains("builtin")) {
    transform = builtin_transform(section["builtin"].get<std::string>());
  } else {
    transform.kind = transform_kind_from_name(section.value("kind", "template-wrap"));
  }
  if (section.contains("name")) transform.name = section["name"].get<std::string>();
  if (transform.name.empty()) transform.name = "transform";
  if (section.contains("parameters")) {
    for (const auto& [key, value] : section["parameters"].items()) {
      transform.parameters[key] = value.get<std::string>();
    }
  }
  return transform;
}

// ---------------------------------------------------------------------------
// surf run / surf report

struct SurfRunFlags {
  std::string config_path;
  std::string out;
  int iterations = -1;
  int candidates = -1;
  int pipelines = -1;
  int top_m = -1;
  std::int64_t seed = -1;
};

int cmd_surf_run(const SurfRunFlags& flags) {
  json config_root = load_config_or_die(flags.config_path);
  fs::path base_dir = fs::absolute(flags.config_path).parent_path();

  if (!config_root.contains("rubric")) {
    throw AuditError(ErrorKind::config, "config needs a [rubric] section");
  }

  SurfConfig config;
  config.rubric = rubric_from_json(config_root["rubric"]);
  const json& surf = config_root.contains("surf") ? config_root["surf"] : json::object();
  // Snapshots store the resolved attribute_pool_path; hand-written configs
  // use attribute_pool.
  std::string pool_value = surf.value("attribute_pool", surf.value("attribute_pool_path", ""));
  if (pool_value.empty()) {
    throw AuditError(ErrorKind::config, "[surf] needs attribute_pool = \"<file>\"");
  }
  config.attribute_pool_path = resolve_config_path(base_dir, pool_value);
  if (!fs::exists(config.attribute_pool_path)) {
    throw AuditError(ErrorKind::config,
                     "attribute pool file does not exist: " + config.attribute_pool_path.string());
  }
  config.iterations = surf.value("iterations", 20);
  config.candidates_per_iteration = surf.value("candidates_per_iteration", 360);
  config.max_attributes_per_query = surf.value("max_attributes_per_query", 5);
  config.buffer_capacity = surf.value("buffer_capacity", std::size_t{50});
  config.parallel_pipelines = surf.value("parallel_pipelines", 15);
  config.convergence_patience = surf.value("convergence_patience", 3);
  config.report_top_m = surf.value("report_top_m", 75);
  config.seed = surf.value("seed", std::uint64_t{0});

  // Flags override file values.
  if (flags.iterations > 0) config.iterations = flags.iterations;
  if (flags.candidates > 0) config.candidates_per_iteration = flags.candidates;
  if (flags.pipelines > 0) config.parallel_pipelines = flags.pipelines;
  if (flags.top_m > 0) config.report_top_m = flags.top_m;
  if (flags.seed >= 0) config.seed = static_cast<std::uint64_t>(flags.seed);
  config.validate();

  ModelGateway gateway;
  configure_gateway_from_json(gateway, config_root, base_dir);
  for (Role role : {Role::target, Role::generator, Role::judge}) {
    if (!gateway.has_role(role)) {
      throw AuditError(ErrorKind::config,
                       std::string("surf needs a [roles.") + role_name(role) + "] section");
    }
  }

  AttributePool pool = load_attribute_pool(config.attribute_pool_path);

  fs::path out_dir = resolve_out_dir(flags.out, "surf");
  fs::create_directories(out_dir);
  EventLog events(out_dir / "events.jsonl");

  json snapshot = {{"subcommand", "surf run"},
                   {"surf", surf_config_to_json(config)},
                   {"rubric", rubric_to_json(config.rubric)},
                   {"roles", resolved_roles_json(config_root, base_dir)}};
  snapshot["surf"]["attribute_pool_path"] = config.attribute_pool_path.string();
  json pool_json = json::array();
  for (std::size_t i = 0; i < pool.size(); ++i) {
    pool_json.push_back({{"id", pool.attributes[i].id}, {"text", pool.attributes[i].text}});
  }
  snapshot["attribute_pool"] = pool_json;
  write_snapshot(out_dir, snapshot);
  events.emit("run_started", {{"pipelines", config.parallel_pipelines},
                              {"iterations", config.iterations},
                              {"candidates_per_iteration", config.candidates_per_iteration}});

  std::cerr << "surf: auditing rubric '" << config.rubric.name << "' with "
            << config.parallel_pipelines << " pipelines x " << config.iterations
            << " iterations\n";

  RunState state = run_audit(config, pool, gateway, [] { return g_interrupted.load(); });
  persist_run_state(state, out_dir);
  // persist_run_state writes the minimal library config.json; restore the
  // full snapshot (roles included) so the run replays from this directory.
  write_snapshot(out_dir, snapshot);

  for (const auto& pipeline : state.pipelines) {
    events.emit("pipeline_finished", {{"pipeline", pipeline.pipeline_id},
                                      {"iterations", pipeline.iterations_completed},
                                      {"converged", pipeline.converged},
                                      {"aborted", pipeline.aborted}});
    std::cerr << "surf: " << pipeline.pipeline_id << " finished after "
              << pipeline.iterations_completed << " iterations (mean "
              << pipeline.buffer.mean_score() << ", max " << pipeline.buffer.max_score() << ")\n";
  }

  auto report = summarize_run(state, config.report_top_m);
  write_json_file(out_dir / "report.json", run_report_to_json(report, state));
  write_text_file(out_dir / "report.md", run_report_to_markdown(report, state));
  events.emit("report_written", {{"considered", report.considered},
                                 {"violations", report.violations},
                                 {"violation_percent", report.violation_percent}});
  events.gateway_stats(gateway);

  std::cerr << "surf: " << report.violations << "/" << report.considered
            << " candidates above threshold (" << report.violation_percent << "%)\n";

  if (g_interrupted.load()) {
    std::cerr << "surf: interrupted; partial state persisted to " << out_dir << "\n";
    return kExitRunFailure;
  }
  return kExitOk;
}

int cmd_surf_report(const std::string& run_dir, int top_m) {
  if (!fs::exists(fs::path(run_dir) / "config.json")) {
    throw AuditError(ErrorKind::config, "not a run directory (no config.json): " + run_dir);
  }
  RunState state = load_run_state(run_dir);
  auto report = summarize_run(state, top_m > 0 ? top_m : state.config.report_top_m);
  write_json_file(fs::path(run_dir) / "report.json", run_report_to_json(report, state));
  write_text_file(fs::path(run_dir) / "report.md", run_report_to_markdown(report, state));
  std::cout << run_report_to_markdown(report, state);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// index build / index inspect

struct IndexBuildFlags {
  std::string config_path;
  std::string out;
  int clusters = -1;
  std::int64_t seed = -1;
};

int cmd_index_build(const IndexBuildFlags& flags) {
  json config_root = load_config_or_die(flags.config_path);
  fs::path base_dir = fs::absolute(flags.config_path).parent_path();

  const json& section = config_root.contains("index") ? config_root["index"] : json::object();
  std::string corpus_value = section.value("corpus", "");
  if (corpus_value.empty()) {
    throw AuditError(ErrorKind::config, "[index] needs corpus = \"<jsonl>\"");
  }
  fs::path corpus_path = resolve_config_path(base_dir, corpus_value);
  if (!fs::exists(corpus_path)) {
    throw AuditError(ErrorKind::config, "corpus file does not exist: " + corpus_path.string());
  }

  IndexBuildOptions options;
  options.cluster_count = section.value("clusters", 0);
  options.seed = section.value("seed", std::uint64_t{0});
  if (flags.clusters > 0) options.cluster_count = flags.clusters;
  if (flags.seed >= 0) options.seed = static_cast<std::uint64_t>(flags.seed);

  ModelGateway gateway;
  configure_gateway_from_json(gateway, config_root, base_dir);
  for (Role role : {Role::judge, Role::embedder}) {
    if (!gateway.has_role(role)) {
      throw AuditError(ErrorKind::config,
                       std::string("index build needs a [roles.") + role_name(role) + "] section");
    }
  }

  fs::path out_dir = resolve_out_dir(flags.out, "index");
  fs::create_directories(out_dir);
  EventLog events(out_dir / "events.jsonl");
  write_snapshot(out_dir, json{{"subcommand", "index build"},
                               {"corpus", corpus_path.string()},
                               {"clusters", options.cluster_count},
                               {"seed", options.seed},
                               {"roles", resolved_roles_json(config_root, base_dir)}});

  CorpusManifest manifest;
  auto pairs = ingest_corpus(corpus_path, &manifest);
  events.emit("corpus_ingested", {{"pairs", pairs.size()}});
  std::cerr << "index: ingested " << pairs.size() << " pairs from " << corpus_path << "\n";

  IndexBuildReport report;
  auto index = build_index(pairs, manifest, gateway, options, &report);
  persist_index(index, out_dir);
  events.emit("index_written", {{"pairs_indexed", report.pairs_indexed},
                                {"pairs_skipped", report.skipped_pair_ids.size()},
                                {"query_records", index.manifest.query_record_count},
                                {"response_records", index.manifest.response_record_count},
                                {"clusters", index.manifest.k}});
  events.gateway_stats(gateway);

  std::cerr << "index: wrote " << index.manifest.query_record_count << " query records, "
            << index.manifest.response_record_count << " response records, "
            << index.manifest.k << " clusters to " << out_dir << "\n";
  if (!report.skipped_pair_ids.empty()) {
    std::cerr << "index: skipped " << report.skipped_pair_ids.size() << " pairs\n";
  }
  return kExitOk;
}

int cmd_index_inspect(const std::string& index_dir) {
  auto index = load_index(index_dir);
  json counts = json::object();
  for (const auto& [source, count] : index.manifest.source_counts) counts[source] = count;

  std::vector<std::size_t> population(static_cast<std::size_t>(index.manifest.k), 0);
  for (auto assignment : index.clusters.assignments) population[assignment] += 1;
  std::vector<std::size_t> order(population.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return population[a] > population[b]; });

  std::cout << "index: " << index.manifest.pair_count << " pairs, "
            << index.manifest.query_record_count << " query records, "
            << index.manifest.response_record_count << " response records, dim "
            << index.manifest.dim << ", " << index.manifest.k << " clusters\n";
  std::cout << "sources: " << counts.dump() << "\n";
  std::cout << "largest clusters:\n";
  for (std::size_t i = 0; i < order.size() && i < 10; ++i) {
    std::cout << "  [" << order[i] << "] n=" << population[order[i]] << "  "
              << index.clusters.summaries[order[i]] << "\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// attribute

struct AttributeFlags {
  std::string config_path;
  std::string index_dir;
  std::string failures;
  std::string out;
  int k = -1;
  int limit = 0;  // 0 = all
};

int cmd_attribute(const AttributeFlags& flags) {
  json config_root = load_config_or_die(flags.config_path);
  fs::path base_dir = fs::absolute(flags.config_path).parent_path();

  if (!config_root.contains("rubric")) {
    throw AuditError(ErrorKind::config, "config needs a [rubric] section");
  }
  Rubric rubric = rubric_from_json(config_root["rubric"]);

  std::size_t k = 1000;
  if (config_root.contains("attribute")) {
    k = config_root["attribute"].value("k", std::size_t{1000});
  }
  if (flags.k > 0) k = static_cast<std::size_t>(flags.k);

  ModelGateway gateway;
  configure_gateway_from_json(gateway, config_root, base_dir);
  for (Role role : {Role::judge, Role::embedder}) {
    if (!gateway.has_role(role)) {
      throw AuditError(ErrorKind::config,
                       std::string("attribute needs a [roles.") + role_name(role) + "] section");
    }
  }

  auto index = load_index(flags.index_dir);

  // Failure records: {query, response, rubric_name?, score?}. Rows from a
  // run's candidates.jsonl carry a status; anything unscored is skipped.
  struct FailureRecord {
    std::string query;
    std::string response;
    double score = 0.0;
  };
  std::vector<FailureRecord> failures;
  for_each_jsonl_line(flags.failures, [&](std::size_t line, const json& row) {
    if (!row.contains("query") || !row.contains("response")) {
      throw AuditError(ErrorKind::input, flags.failures + ":" + std::to_string(line) +
                                             ": failure rows need 'query' and 'response'");
    }
    if (row.contains("status") && row["status"].get<std::string>() != "scored") return;
    failures.push_back({row["query"].get<std::string>(), row["response"].get<std::string>(),
                        row.value("score", 0.0)});
  });
  if (failures.empty()) {
    throw AuditError(ErrorKind::input, "no scored failure records in " + flags.failures);
  }
  std::stable_sort(failures.begin(), failures.end(),
                   [](const FailureRecord& a, const FailureRecord& b) { return a.score > b.score; });
  if (flags.limit > 0 && failures.size() > static_cast<std::size_t>(flags.limit)) {
    failures.resize(static_cast<std::size_t>(flags.limit));
  }

  fs::path out_dir = resolve_out_dir(flags.out, "attribution");
  fs::create_directories(out_dir);
  EventLog events(out_dir / "events.jsonl");
  write_snapshot(out_dir, json{{"subcommand", "attribute"},
                               {"index", fs::absolute(flags.index_dir).string()},
                               {"failures", fs::absolute(flags.failures).string()},
                               {"k", k},
                               {"limit", flags.limit},
                               {"rubric", rubric_to_json(rubric)},
                               {"roles", resolved_roles_json(config_root, base_dir)}});

  std::string all_markdown;
  for (std::size_t i = 0; i < failures.size(); ++i) {
    auto result = attribute(failures[i].query, failures[i].response, rubric, index, gateway, k);
    char stem[32];
    std::snprintf(stem, sizeof(stem), "attribution-%03zu", i);
    write_json_file(out_dir / (std::string(stem) + ".json"), attribution_to_json(result));
    std::string markdown = render_attribution_markdown(result);
    all_markdown += markdown + "\n";
    events.emit("attribution_written", {{"record", i},
                                        {"trigger", result.trigger},
                                        {"crux", result.winning_crux},
                                        {"hit_count", result.hit_count},
                                        {"hit_total", result.hit_total}});
    std::cerr << "attribute: [" << i << "] trigger=\"" << result.trigger << "\" hits "
              << result.hit_count << "/" << result.hit_total << "\n";
  }
  write_text_file(out_dir / "attribution.md", all_markdown);
  events.gateway_stats(gateway);
  std::cout << all_markdown;
  return kExitOk;
}

// ---------------------------------------------------------------------------
// robustness / steer / icl

int cmd_robustness(const std::string& config_path, const std::string& out) {
  json config_root = load_config_or_die(config_path);
  fs::path base_dir = fs::absolute(config_path).parent_path();

  if (!config_root.contains("rubric") || !config_root.contains("robustness")) {
    throw AuditError(ErrorKind::config, "config needs [rubric] and [robustness] sections");
  }
  RobustnessSpec spec;
  spec.rubric = rubric_from_json(config_root["rubric"]);
  const json& section = config_root["robustness"];
  if (section.contains("prompts")) {
    for (const auto& prompt : section["prompts"]) spec.prompts.push_back(prompt.get<std::string>());
  }
  if (section.contains("prompts_file")) {
    auto items = load_dataset(resolve_config_path(base_dir, section["prompts_file"]));
    for (const auto& item : items) spec.prompts.push_back(item.prompt);
  }
  spec.perturbations_per_prompt = section.value("perturbations_per_prompt", 20);
  spec.samples_per_perturbation = section.value("samples_per_perturbation", 100);
  spec.seed = section.value("seed", std::uint64_t{0});
  spec.validate();

  ModelGateway gateway;
  configure_gateway_from_json(gateway, config_root, base_dir);

  fs::path out_dir = resolve_out_dir(out, "robustness");
  fs::create_directories(out_dir);
  EventLog events(out_dir / "events.jsonl");
  write_snapshot(out_dir, json{{"subcommand", "robustness"},
                               {"rubric", rubric_to_json(spec.rubric)},
                               {"prompts", spec.prompts},
                               {"perturbations_per_prompt", spec.perturbations_per_prompt},
                               {"samples_per_perturbation", spec.samples_per_perturbation},
                               {"seed", spec.seed},
                               {"roles", resolved_roles_json(config_root, base_dir)}});

  auto report = robustness_report(spec, gateway);
  write_json_file(out_dir / "robustness.json", robustness_to_json(report));
  write_text_file(out_dir / "robustness.csv", robustness_to_csv(report));
  events.emit("report_written", {{"original_mean", report.original_mean},
                                 {"perturbed_mean_of_means", report.perturbed_mean_of_means},
                                 {"perturbed_pooled_mean", report.perturbed_pooled_mean},
                                 {"unreliable", report.unreliable}});
  events.gateway_stats(gateway);

  std::cerr << "robustness: original mean " << report.original_mean << ", perturbed mean "
            << report.perturbed_mean_of_means << " (pooled " << report.perturbed_pooled_mean
            << ")\n";
  if (report.unreliable) {
    std::cerr << "robustness: some measurements were unreliable (>10% unparseable judgments)\n";
    return kExitSoftFlags;
  }
  return kExitOk;
}

int cmd_steer(const std::string& config_path, const std::string& out) {
  json config_root = load_config_or_die(config_path);
  fs::path base_dir = fs::absolute(config_path).parent_path();

  if (!config_root.contains("steer") || !config_root.contains("transform") ||
      !config_root.contains("detector")) {
    throw AuditError(ErrorKind::config, "config needs [steer], [transform], [detector] sections");
  }
  const json& section = config_root["steer"];
  auto dataset = load_dataset(resolve_config_path(base_dir, section.value("dataset", "")));
  std::uint64_t seed = section.value("seed", std::uint64_t{0});
  TransformSpec transform = transform_from_json(config_root["transform"]);
  BehaviorDetector detector = detector_from_json(config_root["detector"]);

  ModelGateway gateway;
  configure_gateway_from_json(gateway, config_root, base_dir);

  fs::path out_dir = resolve_out_dir(out, "steer");
  fs::create_directories(out_dir);
  EventLog events(out_dir / "events.jsonl");
  write_snapshot(out_dir, json{{"subcommand", "steer"},
                               {"dataset_items", dataset.size()},
                               {"transform", transform.name},
                               {"transform_kind", transform_kind_name(transform.kind)},
                               {"detector", detector.name},
                               {"seed", seed},
                               {"roles", resolved_roles_json(config_root, base_dir)}});

  auto score = steered_score(dataset, transform, detector, gateway, seed);
  write_json_file(out_dir / "steer.json", steered_to_json(score, transform, detector));
  write_text_file(out_dir / "steer.csv", steered_to_csv(score, transform));
  events.emit("report_written", {{"original_rate", score.original_rate},
                                 {"transformed_rate", score.transformed_rate},
                                 {"delta", score.delta},
                                 {"dropped_items", score.dropped_items}});
  events.gateway_stats(gateway);

  std::cerr << "steer: delta " << score.delta << " (" << score.original_rate << " -> "
            << score.transformed_rate << ")\n";
  return kExitOk;
}

int cmd_icl(const std::string& config_path, const std::string& out) {
  json config_root = load_config_or_die(config_path);
  fs::path base_dir = fs::absolute(config_path).parent_path();

  if (!config_root.contains("icl") || !config_root.contains("detector")) {
    throw AuditError(ErrorKind::config, "config needs [icl] and [detector] sections");
  }
  const json& section = config_root["icl"];
  auto dataset = load_dataset(resolve_config_path(base_dir, section.value("dataset", "")));
  std::vector<IclExemplar> exemplars;
  if (section.contains("exemplars")) {
    exemplars = load_exemplars(resolve_config_path(base_dir, section["exemplars"]));
  }
  std::vector<int> shot_counts;
  if (section.contains("shot_counts")) {
    for (const auto& value : section["shot_counts"]) {
      shot_counts.push_back(static_cast<int>(value.get<long>()));
    }
  } else {
    shot_counts = {0};
  }
  std::string context_source = section.value("context_source", "random-in-domain");
  std::uint64_t seed = section.value("seed", std::uint64_t{0});
  BehaviorDetector detector = detector_from_json(config_root["detector"]);

  ModelGateway gateway;
  configure_gateway_from_json(gateway, config_root, base_dir);

  fs::path out_dir = resolve_out_dir(out, "icl");
  fs::create_directories(out_dir);
  EventLog events(out_dir / "events.jsonl");
  write_snapshot(out_dir, json{{"subcommand", "icl"},
                               {"dataset_items", dataset.size()},
                               {"exemplars", exemplars.size()},
                               {"shot_counts", shot_counts},
                               {"context_source", context_source},
                               {"detector", detector.name},
                               {"seed", seed},
                               {"roles", resolved_roles_json(config_root, base_dir)}});

  auto curve = icl_curve(dataset, context_source, exemplars, shot_counts, detector, gateway, seed);
  write_json_file(out_dir / "icl.json", icl_to_json(curve));
  write_text_file(out_dir / "icl.csv", icl_to_csv(curve));
  events.emit("report_written", {{"points", curve.points.size()},
                                 {"skipped_shot_counts", curve.skipped_shot_counts}});
  events.gateway_stats(gateway);

  for (const auto& point : curve.points) {
    std::cerr << "icl: " << point.shots << " shots (" << point.prepended_tokens << " tokens) -> "
              << point.rate << "\n";
  }
  if (!curve.skipped_shot_counts.empty()) {
    std::cerr << "icl: skipped shot counts over the input limit:";
    for (int count : curve.skipped_shot_counts) std::cerr << ' ' << count;
    std::cerr << "\n";
    return kExitSoftFlags;
  }
  return kExitOk;
}

int cmd_mock_list(const std::string& scenario_path) {
  auto scenario = MockScenario::load(scenario_path);
  std::cout << "scenario: " << scenario.name << "\n"
            << "default: " << scenario.default_response << "\n"
            << "embedding_dim: " << scenario.embedding_dim << "\n"
            << "seed: " << scenario.seed << "\n"
            << "rules (" << scenario.rules.size() << ", first match wins):\n";
  for (std::size_t i = 0; i < scenario.rules.size(); ++i) {
    const auto& rule = scenario.rules[i];
    std::cout << "  [" << i << "] " << (rule.is_regex ? "re:" : "") << rule.pattern << "  p="
              << rule.trigger_probability << "\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  std::signal(SIGINT, handle_sigint);

  CLI::App app{"Behavioral audit toolkit: attribute-weighted failure search, training-data "
               "attribution, and robustness measurement",
               "audit"};
  app.set_help_all_flag("--help-all", "Print help for every subcommand");
  app.require_subcommand(1);

  int exit_code = kExitOk;
  auto run = [&exit_code](auto fn) {
    return [&exit_code, fn]() {
      try {
        exit_code = fn();
      } catch (const AuditError& error) {
        std::cerr << "error [" << error_kind_name(error.kind()) << "]: " << error.what() << "\n";
        exit_code = exit_code_for(error);
      } catch (const std::exception& error) {
        std::cerr << "error: " << error.what() << "\n";
        exit_code = kExitRunFailure;
      }
    };
  };

  // surf
  auto* surf = app.add_subcommand("surf", "Attribute-weighted failure discovery");
  surf->require_subcommand(1);

  SurfRunFlags surf_flags;
  auto* surf_run = surf->add_subcommand("run", "Run an audit and write the run directory");
  surf_run->add_option("--config", surf_flags.config_path, "Run config (TOML or snapshot JSON)")
      ->required();
  surf_run->add_option("--out", surf_flags.out, "Output directory (default audit-out/surf)");
  surf_run->add_option("--iterations", surf_flags.iterations, "Override iterations T");
  surf_run->add_option("--candidates", surf_flags.candidates, "Override candidates per iteration N");
  surf_run->add_option("--pipelines", surf_flags.pipelines, "Override parallel pipeline count");
  surf_run->add_option("--top-m", surf_flags.top_m, "Override report top-m");
  surf_run->add_option("--seed", surf_flags.seed, "Override the run seed");
  surf_run->callback(run([&surf_flags] { return cmd_surf_run(surf_flags); }));

  std::string report_run_dir;
  int report_top_m = -1;
  auto* surf_report = surf->add_subcommand("report", "Re-summarize a persisted run directory");
  surf_report->add_option("--run", report_run_dir, "Run directory from surf run")->required();
  surf_report->add_option("--top-m", report_top_m, "Override report top-m");
  surf_report->callback(
      run([&report_run_dir, &report_top_m] { return cmd_surf_report(report_run_dir, report_top_m); }));

  // index
  auto* index = app.add_subcommand("index", "Training-corpus attribute index");
  index->require_subcommand(1);

  IndexBuildFlags index_flags;
  auto* index_build = index->add_subcommand("build", "Extract, embed, cluster, and persist");
  index_build->add_option("--config", index_flags.config_path, "Index config (TOML or JSON)")
      ->required();
  index_build->add_option("--out", index_flags.out, "Index directory (default audit-out/index)");
  index_build->add_option("--clusters", index_flags.clusters, "Override cluster count K");
  index_build->add_option("--seed", index_flags.seed, "Override the clustering seed");
  index_build->callback(run([&index_flags] { return cmd_index_build(index_flags); }));

  std::string inspect_dir;
  auto* index_inspect = index->add_subcommand("inspect", "Print an index's manifest and clusters");
  index_inspect->add_option("--index", inspect_dir, "Index directory")->required();
  index_inspect->callback(run([&inspect_dir] { return cmd_index_inspect(inspect_dir); }));

  // attribute
  AttributeFlags attribute_flags;
  auto* attribute_cmd =
      app.add_subcommand("attribute", "Trace failing pairs to training-data features");
  attribute_cmd->add_option("--config", attribute_flags.config_path, "Config with [rubric]+[roles]")
      ->required();
  attribute_cmd->add_option("--index", attribute_flags.index_dir, "Index directory")->required();
  attribute_cmd
      ->add_option("--failures", attribute_flags.failures,
                   "JSONL failure records (a run's candidates.jsonl works directly)")
      ->required();
  attribute_cmd->add_option("--out", attribute_flags.out,
                            "Output directory (default audit-out/attribution)");
  attribute_cmd->add_option("--k", attribute_flags.k, "Neighbors to retrieve per crux");
  attribute_cmd->add_option("--limit", attribute_flags.limit,
                            "Attribute only the N highest-scoring records (0 = all)");
  attribute_cmd->callback(run([&attribute_flags] { return cmd_attribute(attribute_flags); }));

  // harness commands
  std::string robustness_config, robustness_out;
  auto* robustness_cmd =
      app.add_subcommand("robustness", "Perturbation robustness of found prompts");
  robustness_cmd->add_option("--config", robustness_config, "Config with [robustness]")->required();
  robustness_cmd->add_option("--out", robustness_out, "Output directory");
  robustness_cmd->callback(run(
      [&robustness_config, &robustness_out] { return cmd_robustness(robustness_config, robustness_out); }));

  std::string steer_config, steer_out;
  auto* steer_cmd = app.add_subcommand("steer", "Behavior delta under a non-semantic transform");
  steer_cmd->add_option("--config", steer_config, "Config with [steer]+[transform]+[detector]")
      ->required();
  steer_cmd->add_option("--out", steer_out, "Output directory");
  steer_cmd->callback(run([&steer_config, &steer_out] { return cmd_steer(steer_config, steer_out); }));

  std::string icl_config, icl_out;
  auto* icl_cmd = app.add_subcommand("icl", "Elicitation rate vs prepended exemplar tokens");
  icl_cmd->add_option("--config", icl_config, "Config with [icl]+[detector]")->required();
  icl_cmd->add_option("--out", icl_out, "Output directory");
  icl_cmd->callback(run([&icl_config, &icl_out] { return cmd_icl(icl_config, icl_out); }));

  // mock
  auto* mock = app.add_subcommand("mock", "Mock scenario utilities");
  mock->require_subcommand(1);
  std::string scenario_path;
  auto* mock_list = mock->add_subcommand("list", "Print a scenario's rules");
  mock_list->add_option("--scenario", scenario_path, "Scenario file")->required();
  mock_list->callback(run([&scenario_path] { return cmd_mock_list(scenario_path); }));

  CLI11_PARSE(app, argc, argv);
  return exit_code;
}
