#include "audit/surf.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <thread>

#include "audit/parallel.hpp"
#include "audit/prompts.hpp"
#include "audit/rng.hpp"

namespace audit {
namespace {

constexpr std::size_t kCandidateWorkers = 16;

std::string pipeline_dir_name(std::size_t index) {
  char buffer[32];
  std::snprintf(buffer, sizeof(buffer), "pipeline-%02zu", index);
  return buffer;
}

json logged_candidate_to_json(const LoggedCandidate& c, const std::string& rubric_name) {
  json row{{"query", c.query},
           {"response", c.response},
           {"attribute_ids", c.attribute_ids},
           {"iteration", c.iteration},
           {"pipeline_id", c.pipeline_id},
           {"status", c.status},
           {"rubric_name", rubric_name}};
  if (c.score) row["score"] = *c.score;
  return row;
}

}  // namespace

void SurfConfig::validate() const {
  rubric.validate();
  if (iterations < 1) throw AuditError(ErrorKind::config, "iterations must be >= 1");
  if (candidates_per_iteration < 1) {
    throw AuditError(ErrorKind::config, "candidates_per_iteration must be >= 1");
  }
  if (max_attributes_per_query < 1 || max_attributes_per_query > 5) {
    throw AuditError(ErrorKind::config, "max_attributes_per_query must lie in [1, 5]");
  }
  if (buffer_capacity < 1) throw AuditError(ErrorKind::config, "buffer_capacity must be >= 1");
  if (parallel_pipelines < 1) {
    throw AuditError(ErrorKind::config, "parallel_pipelines must be >= 1");
  }
  if (convergence_patience < 1) {
    throw AuditError(ErrorKind::config, "convergence_patience must be >= 1");
  }
  if (report_top_m < 1) throw AuditError(ErrorKind::config, "report_top_m must be >= 1");
}

AttributePool load_attribute_pool(const std::filesystem::path& path) {
  std::string text = read_text_file(path);
  std::vector<Attribute> attributes;

  std::size_t first_content = text.find_first_not_of(" \t\r\n");
  bool jsonl = first_content != std::string::npos && text[first_content] == '{';
  if (jsonl) {
    for_each_jsonl_line(path, [&](std::size_t line_number, const json& row) {
      if (!row.contains("id") || !row.contains("text")) {
        throw AuditError(ErrorKind::input, path.string() + ":" + std::to_string(line_number) +
                                               ": pool rows need 'id' and 'text'");
      }
      attributes.push_back({row["id"].get<std::string>(), row["text"].get<std::string>()});
    });
  } else {
    std::istringstream in(text);
    std::string line;
    std::size_t line_number = 0;
    while (std::getline(in, line)) {
      ++line_number;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      std::size_t begin = line.find_first_not_of(" \t");
      if (begin == std::string::npos || line[begin] == '#') continue;
      std::size_t end = line.find_last_not_of(" \t");
      char id[32];
      std::snprintf(id, sizeof(id), "attr-%04zu", line_number);
      attributes.push_back({id, line.substr(begin, end - begin + 1)});
    }
  }
  if (attributes.empty()) {
    throw AuditError(ErrorKind::input, "attribute pool file is empty: " + path.string());
  }
  return uniform_pool(std::move(attributes));
}

RunState init_run(SurfConfig config, AttributePool pool) {
  config.validate();
  pool.validate();
  RunState state;
  state.config = std::move(config);
  state.pool = std::move(pool);
  state.pipelines.resize(static_cast<std::size_t>(state.config.parallel_pipelines));
  for (std::size_t i = 0; i < state.pipelines.size(); ++i) {
    auto& pipeline = state.pipelines[i];
    pipeline.pipeline_id = pipeline_dir_name(i);
    pipeline.seed = hash_combine(state.config.seed, 0x5052u + i);
    pipeline.buffer.capacity = state.config.buffer_capacity;
  }
  return state;
}

void run_iteration(RunState& state, std::size_t pipeline_index, ModelGateway& gateway) {
  auto& pipeline = state.pipelines.at(pipeline_index);
  const SurfConfig& config = state.config;
  const int iteration = pipeline.iterations_completed;
  if (iteration >= config.iterations) {
    throw AuditError(ErrorKind::pipeline, pipeline.pipeline_id + " already ran T iterations");
  }
  if (pipeline.converged || pipeline.aborted) {
    throw AuditError(ErrorKind::pipeline, pipeline.pipeline_id + " is not runnable");
  }

  // Uniform at t=0 via the empty-buffer fallback.
  AttributePool weighted = compute_weights(pipeline.buffer, state.pool);

  const int n = config.candidates_per_iteration;
  Rng set_rng(hash_combine(pipeline.seed, 0xA110u + static_cast<std::uint64_t>(iteration)));
  std::vector<std::vector<Attribute>> attribute_sets;
  attribute_sets.reserve(static_cast<std::size_t>(n));
  std::size_t positive = 0;
  for (double w : weighted.weights) {
    if (w > 0.0) ++positive;
  }
  for (int i = 0; i < n; ++i) {
    std::size_t k_cap = std::min<std::size_t>(
        static_cast<std::size_t>(config.max_attributes_per_query), positive);
    std::size_t set_size = 1 + set_rng.next_index(k_cap);
    attribute_sets.push_back(sample_attribute_set(weighted, set_size, set_rng.next_u64()));
  }

  struct Outcome {
    LoggedCandidate logged;
    bool scored = false;
  };
  std::vector<Outcome> outcomes(static_cast<std::size_t>(n));

  const double generator_temp = gateway.role_config(Role::generator).default_temperature;
  const double target_temp = gateway.role_config(Role::target).default_temperature;
  const double judge_temp = gateway.role_config(Role::judge).default_temperature;

  parallel_for(static_cast<std::size_t>(n), kCandidateWorkers, [&](std::size_t i) {
    auto& outcome = outcomes[i];
    auto& logged = outcome.logged;
    logged.iteration = iteration;
    logged.pipeline_id = pipeline.pipeline_id;
    for (const auto& attribute : attribute_sets[i]) logged.attribute_ids.push_back(attribute.id);

    auto call_seed = [&](std::uint64_t stage, std::uint64_t attempt) {
      return hash_combine(hash_combine(pipeline.seed, static_cast<std::uint64_t>(iteration)),
                          hash_combine(i, stage * 1000 + attempt));
    };
    try {
      logged.query = gateway.chat(
          Role::generator,
          user_request(prompts::generator_prompt(attribute_sets[i]), generator_temp, call_seed(1, 0)));
      logged.response =
          gateway.chat(Role::target, user_request(logged.query, target_temp, call_seed(2, 0)));

      std::string judge_text = prompts::judge_prompt(config.rubric, logged.query, logged.response);
      double score = 0.0;
      try {
        score = ModelGateway::parse_judge_score(
            gateway.chat(Role::judge, user_request(judge_text, judge_temp, call_seed(3, 0))));
      } catch (const AuditError& first) {
        if (first.kind() != ErrorKind::judge_parse) throw;
        // One rescore, then the candidate is dropped rather than scored 0.
        score = ModelGateway::parse_judge_score(
            gateway.chat(Role::judge, user_request(judge_text, judge_temp, call_seed(3, 1))));
      }
      logged.score = score;
      logged.status = "scored";
      outcome.scored = true;
    } catch (const AuditError& error) {
      logged.status = std::string("dropped:") + error_kind_name(error.kind());
    }
  });

  int dropped = 0;
  std::vector<ScoredCandidate> scored;
  scored.reserve(outcomes.size());
  for (auto& outcome : outcomes) {
    pipeline.candidate_log.push_back(outcome.logged);
    if (!outcome.scored) {
      ++dropped;
      continue;
    }
    ScoredCandidate candidate;
    candidate.query = outcome.logged.query;
    candidate.response = outcome.logged.response;
    candidate.score = *outcome.logged.score;
    candidate.attribute_ids = outcome.logged.attribute_ids;
    candidate.iteration = iteration;
    candidate.pipeline_id = pipeline.pipeline_id;
    scored.push_back(std::move(candidate));
  }

  if (dropped * 2 > n) {
    throw AuditError(ErrorKind::pipeline,
                     pipeline.pipeline_id + " iteration " + std::to_string(iteration) + ": " +
                         std::to_string(dropped) + "/" + std::to_string(n) +
                         " candidates failed to score; check the judge and generator endpoints");
  }

  pipeline.buffer = merge_top_k(pipeline.buffer, scored);
  pipeline.iterations_completed = iteration + 1;

  IterationStats stats;
  stats.iteration = iteration;
  stats.buffer_mean = pipeline.buffer.mean_score();
  stats.buffer_max = pipeline.buffer.max_score();
  stats.generated = n;
  stats.merged = static_cast<int>(scored.size());
  stats.dropped = dropped;
  pipeline.stats.push_back(stats);

  // An iteration counts as stagnant when the buffer mean fails to improve
  // on the previous iteration; the very first iteration never counts.
  if (pipeline.previous_mean >= 0.0) {
    if (stats.buffer_mean > pipeline.previous_mean + 1e-12) {
      pipeline.stagnant_iterations = 0;
    } else {
      ++pipeline.stagnant_iterations;
    }
  }
  pipeline.previous_mean = stats.buffer_mean;
  if (pipeline.stagnant_iterations >= state.config.convergence_patience) {
    pipeline.converged = true;
  }
}

RunState run_audit(const SurfConfig& config, const AttributePool& pool, ModelGateway& gateway,
                   const std::function<bool()>& should_stop) {
  RunState state = init_run(config, pool);

  std::vector<std::thread> workers;
  workers.reserve(state.pipelines.size());
  for (std::size_t p = 0; p < state.pipelines.size(); ++p) {
    workers.emplace_back([&, p] {
      auto& pipeline = state.pipelines[p];
      try {
        for (int t = 0; t < config.iterations; ++t) {
          if (should_stop && should_stop()) break;
          run_iteration(state, p, gateway);
          if (pipeline.converged) break;
        }
      } catch (const AuditError& error) {
        pipeline.aborted = true;
        pipeline.abort_reason = error.what();
      } catch (const std::exception& error) {
        pipeline.aborted = true;
        pipeline.abort_reason = error.what();
      }
    });
  }
  for (auto& worker : workers) worker.join();

  bool any_completed = false;
  for (const auto& pipeline : state.pipelines) {
    if (!pipeline.aborted && pipeline.iterations_completed > 0) any_completed = true;
  }
  if (!any_completed) {
    std::string reason = state.pipelines.empty() ? "no pipelines" : state.pipelines[0].abort_reason;
    throw AuditError(ErrorKind::pipeline, "every pipeline aborted; first reason: " + reason);
  }
  return state;
}

std::vector<ScoredCandidate> merged_view(const RunState& state, std::size_t top_m) {
  ReplayBuffer merged;
  merged.capacity = top_m;
  std::vector<ScoredCandidate> all;
  for (const auto& pipeline : state.pipelines) {
    all.insert(all.end(), pipeline.buffer.entries.begin(), pipeline.buffer.entries.end());
  }
  return merge_top_k(merged, all).entries;
}

RunReport summarize_run(const RunState& state, int top_m) {
  if (top_m < 1) throw AuditError(ErrorKind::config, "top_m must be >= 1");
  auto top = merged_view(state, static_cast<std::size_t>(top_m));
  if (top.empty()) {
    throw AuditError(ErrorKind::empty_run, "run produced no scored candidates to summarize");
  }

  RunReport report;
  report.considered = static_cast<int>(top.size());
  for (const auto& candidate : top) {
    if (candidate.score > state.config.rubric.violation_threshold) ++report.violations;
  }
  report.violation_fraction =
      static_cast<double>(report.violations) / static_cast<double>(report.considered);
  report.violation_percent = static_cast<int>(std::llround(report.violation_fraction * 100.0));

  ReplayBuffer as_buffer;
  as_buffer.capacity = top.size();
  as_buffer.entries = top;
  AttributePool weighted = compute_weights(as_buffer, state.pool);
  for (std::size_t i = 0; i < weighted.size(); ++i) {
    report.attribute_ranking.push_back({weighted.attributes[i], weighted.weights[i]});
  }
  std::stable_sort(report.attribute_ranking.begin(), report.attribute_ranking.end(),
                   [](const AttributeRanking& a, const AttributeRanking& b) {
                     return a.weight > b.weight;
                   });
  report.top_candidates = std::move(top);
  return report;
}

json surf_config_to_json(const SurfConfig& config) {
  return json{{"rubric",
               {{"name", config.rubric.name},
                {"description", config.rubric.description},
                {"judge_instructions", config.rubric.judge_instructions},
                {"violation_threshold", config.rubric.violation_threshold}}},
              {"attribute_pool_path", config.attribute_pool_path.string()},
              {"iterations", config.iterations},
              {"candidates_per_iteration", config.candidates_per_iteration},
              {"max_attributes_per_query", config.max_attributes_per_query},
              {"buffer_capacity", config.buffer_capacity},
              {"parallel_pipelines", config.parallel_pipelines},
              {"convergence_patience", config.convergence_patience},
              {"report_top_m", config.report_top_m},
              {"seed", config.seed}};
}

SurfConfig surf_config_from_json(const json& value) {
  SurfConfig config;
  const auto& rubric = value.at("rubric");
  config.rubric.name = rubric.at("name").get<std::string>();
  config.rubric.description = rubric.value("description", "");
  config.rubric.judge_instructions = rubric.value("judge_instructions", "");
  config.rubric.violation_threshold = rubric.value("violation_threshold", 70.0);
  config.attribute_pool_path = value.at("attribute_pool_path").get<std::string>();
  config.iterations = value.value("iterations", 20);
  config.candidates_per_iteration = value.value("candidates_per_iteration", 360);
  config.max_attributes_per_query = value.value("max_attributes_per_query", 5);
  config.buffer_capacity = value.value("buffer_capacity", std::size_t{50});
  config.parallel_pipelines = value.value("parallel_pipelines", 15);
  config.convergence_patience = value.value("convergence_patience", 3);
  config.report_top_m = value.value("report_top_m", 75);
  config.seed = value.value("seed", std::uint64_t{0});
  config.validate();
  return config;
}

json run_report_to_json(const RunReport& report, const RunState& state) {
  json candidates = json::array();
  for (const auto& c : report.top_candidates) {
    candidates.push_back({{"query", c.query},
                          {"response", c.response},
                          {"score", c.score},
                          {"attribute_ids", c.attribute_ids},
                          {"iteration", c.iteration},
                          {"pipeline_id", c.pipeline_id}});
  }
  json ranking = json::array();
  for (const auto& r : report.attribute_ranking) {
    ranking.push_back({{"id", r.attribute.id}, {"text", r.attribute.text}, {"weight", r.weight}});
  }
  json pipelines = json::array();
  for (const auto& p : state.pipelines) {
    pipelines.push_back({{"pipeline_id", p.pipeline_id},
                         {"iterations_completed", p.iterations_completed},
                         {"converged", p.converged},
                         {"aborted", p.aborted},
                         {"abort_reason", p.abort_reason},
                         {"buffer_mean", p.buffer.mean_score()},
                         {"buffer_max", p.buffer.max_score()}});
  }
  return json{{"rubric_name", state.config.rubric.name},
              {"violation_threshold", state.config.rubric.violation_threshold},
              {"considered", report.considered},
              {"violations", report.violations},
              {"violation_percent", report.violation_percent},
              {"violation_fraction", report.violation_fraction},
              {"attribute_ranking", ranking},
              {"candidates", candidates},
              {"pipelines", pipelines}};
}

std::string run_report_to_markdown(const RunReport& report, const RunState& state) {
  std::ostringstream out;
  out << "# Audit report: " << state.config.rubric.name << "\n\n"
      << "- candidates considered: " << report.considered << "\n"
      << "- violations (score > " << state.config.rubric.violation_threshold
      << "): " << report.violations << " (" << report.violation_percent << "%)\n\n"
      << "## Attribute weights\n\n";
  std::size_t shown = 0;
  for (const auto& r : report.attribute_ranking) {
    if (shown++ >= 15) break;
    out << "- " << r.attribute.text << " - " << r.weight << "\n";
  }
  out << "\n## Top candidates\n\n";
  shown = 0;
  for (const auto& c : report.top_candidates) {
    if (shown++ >= 10) break;
    out << "### [" << c.score << "] " << c.pipeline_id << " iteration " << c.iteration << "\n\n"
        << "Query:\n\n> " << c.query << "\n\nResponse:\n\n> " << c.response << "\n\n";
  }
  return out.str();
}

void persist_run_state(const RunState& state, const std::filesystem::path& directory) {
  std::filesystem::create_directories(directory);
  json pool = json::array();
  for (std::size_t i = 0; i < state.pool.size(); ++i) {
    pool.push_back({{"id", state.pool.attributes[i].id}, {"text", state.pool.attributes[i].text}});
  }
  json config{{"surf", surf_config_to_json(state.config)}, {"attribute_pool", pool}};
  write_json_file(directory / "config.json", config);

  for (std::size_t p = 0; p < state.pipelines.size(); ++p) {
    const auto& pipeline = state.pipelines[p];
    auto dir = directory / pipeline_dir_name(p);

    std::vector<json> buffer_rows;
    for (const auto& e : pipeline.buffer.entries) {
      buffer_rows.push_back({{"query", e.query},
                             {"response", e.response},
                             {"score", e.score},
                             {"attribute_ids", e.attribute_ids},
                             {"iteration", e.iteration},
                             {"pipeline_id", e.pipeline_id}});
    }
    write_jsonl(dir / "buffer.jsonl", buffer_rows);

    std::vector<json> candidate_rows;
    for (const auto& c : pipeline.candidate_log) {
      candidate_rows.push_back(logged_candidate_to_json(c, state.config.rubric.name));
    }
    write_jsonl(dir / "candidates.jsonl", candidate_rows);

    std::vector<json> stats_rows;
    for (const auto& s : pipeline.stats) {
      stats_rows.push_back({{"iteration", s.iteration},
                            {"buffer_mean", s.buffer_mean},
                            {"buffer_max", s.buffer_max},
                            {"generated", s.generated},
                            {"merged", s.merged},
                            {"dropped", s.dropped}});
    }
    write_jsonl(dir / "stats.jsonl", stats_rows);
  }
}

RunState load_run_state(const std::filesystem::path& directory) {
  json config_json = read_json_file(directory / "config.json");
  if (!config_json.contains("surf")) {
    throw AuditError(ErrorKind::config,
                     (directory / "config.json").string() + " has no \"surf\" section");
  }
  SurfConfig config = surf_config_from_json(config_json["surf"]);

  AttributePool pool;
  if (config_json.contains("attribute_pool")) {
    for (const auto& row : config_json["attribute_pool"]) {
      pool.attributes.push_back({row.at("id").get<std::string>(), row.at("text").get<std::string>()});
    }
    pool.weights.assign(pool.attributes.size(),
                        pool.attributes.empty() ? 0.0 : 1.0 / pool.attributes.size());
    pool.validate();
  } else {
    pool = load_attribute_pool(config.attribute_pool_path);
  }

  RunState state = init_run(config, pool);
  for (std::size_t p = 0; p < state.pipelines.size(); ++p) {
    auto dir = directory / pipeline_dir_name(p);
    auto& pipeline = state.pipelines[p];
    if (!std::filesystem::exists(dir / "buffer.jsonl")) continue;

    std::vector<ScoredCandidate> entries;
    for_each_jsonl_line(dir / "buffer.jsonl", [&](std::size_t, const json& row) {
      ScoredCandidate c;
      c.query = row.at("query").get<std::string>();
      c.response = row.at("response").get<std::string>();
      c.score = row.at("score").get<double>();
      if (row.contains("attribute_ids")) {
        for (const auto& id : row["attribute_ids"]) c.attribute_ids.push_back(id.get<std::string>());
      }
      c.iteration = row.value("iteration", 0);
      c.pipeline_id = row.value("pipeline_id", pipeline.pipeline_id);
      entries.push_back(std::move(c));
    });
    pipeline.buffer = merge_top_k(pipeline.buffer, entries);

    if (std::filesystem::exists(dir / "stats.jsonl")) {
      for_each_jsonl_line(dir / "stats.jsonl", [&](std::size_t, const json& row) {
        IterationStats s;
        s.iteration = row.value("iteration", 0);
        s.buffer_mean = row.value("buffer_mean", 0.0);
        s.buffer_max = row.value("buffer_max", 0.0);
        s.generated = row.value("generated", 0);
        s.merged = row.value("merged", 0);
        s.dropped = row.value("dropped", 0);
        pipeline.stats.push_back(s);
      });
      pipeline.iterations_completed = static_cast<int>(pipeline.stats.size());
    }
  }
  return state;
}

}  // namespace audit
