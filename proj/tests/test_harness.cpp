#include <atomic>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "audit/harness.hpp"
#include "audit/mock_backend.hpp"
#include "audit/rng.hpp"
#include "doctest.h"
#include "scenario_fixtures.hpp"

using namespace audit;

namespace {

// Judge scoring 100 iff the response carries the failure marker.
std::string marker_judge_reply(const std::string& judge_prompt) {
  auto section = judge_prompt.find("=== RESPONSE UNDER REVIEW ===");
  bool failed = judge_prompt.find("FAILMARK", section) != std::string::npos;
  return failed ? "SCORE: 100" : "SCORE: 0";
}

MockScenario flaky_scenario(double probability) {
  std::string text;
  text += "@default\tA calm, correct answer.\n";
  text += "@seed\t3\n";
  text += "re:RESPONSE UNDER REVIEW ===[\\s\\S]*FAILMARK\t1.0\tSCORE: 100\n";
  text += "=== RESPONSE UNDER REVIEW ===\t1.0\tSCORE: 0\n";
  text += "question\t" + std::to_string(probability) + "\tFAILMARK engaged.\n";
  return MockScenario::parse(text, "flaky");
}

void wire_scenario(ModelGateway& gateway, const MockScenario& scenario) {
  auto backend = std::make_shared<MockBackend>(scenario);
  for (Role role : {Role::target, Role::generator, Role::judge, Role::embedder}) {
    gateway.configure_role(fixtures::mock_role(role), backend);
  }
}

Rubric marker_rubric() {
  Rubric rubric;
  rubric.name = "misrouted-behavior";
  rubric.description = "The assistant engages the failure behavior on a benign question.";
  rubric.violation_threshold = 70.0;
  return rubric;
}

}  // namespace

TEST_CASE("perturb_prompt: twenty scripted rewrites come back verbatim") {
  auto calls = std::make_shared<std::atomic<int>>(0);
  auto scripted = std::make_shared<CallbackBackend>(
      [calls](const RoleConfig&, const ChatRequest&) -> std::string {
        return "rewrite number " + std::to_string(++*calls);
      },
      nullptr);
  ModelGateway gateway;
  gateway.configure_role(fixtures::mock_role(Role::generator), scripted);

  auto outcome = perturb_prompt("the original prompt", 20, gateway, 5);
  CHECK(outcome.variants.size() == 20);
  CHECK(outcome.rerequests == 0);
  CHECK(outcome.variants[0] == "rewrite number 1");
  CHECK(outcome.variants[19] == "rewrite number 20");
  for (const auto& variant : outcome.variants) CHECK(variant != "the original prompt");
}

TEST_CASE("perturb_prompt: verbatim echoes trigger the re-request path") {
  auto calls = std::make_shared<std::atomic<int>>(0);
  auto echoing = std::make_shared<CallbackBackend>(
      [calls](const RoleConfig&, const ChatRequest&) -> std::string {
        int call = ++*calls;
        if (call == 1) return "the original prompt";  // identical -> re-request
        return "distinct rewrite " + std::to_string(call);
      },
      nullptr);
  ModelGateway gateway;
  gateway.configure_role(fixtures::mock_role(Role::generator), echoing);

  auto outcome = perturb_prompt("the original prompt", 3, gateway, 5);
  CHECK(outcome.rerequests == 1);
  CHECK(outcome.variants.size() == 3);
  for (const auto& variant : outcome.variants) CHECK(variant != "the original prompt");
}

TEST_CASE("measure_failure_rate: deterministic extremes") {
  ModelGateway gateway;
  wire_scenario(gateway, flaky_scenario(1.0));
  auto always = measure_failure_rate("a question", 50, marker_rubric(), gateway, 1);
  CHECK(always.rate == 1.0);
  CHECK(always.violations == 50);
  CHECK(!always.unreliable);

  ModelGateway calm;
  wire_scenario(calm, flaky_scenario(0.0));
  auto never = measure_failure_rate("a question", 50, marker_rubric(), calm, 1);
  CHECK(never.rate == 0.0);
}

TEST_CASE("measure_failure_rate: binomial mock calibrates to its probability") {
  ModelGateway gateway;
  wire_scenario(gateway, flaky_scenario(0.4));

  // One fixed seed stays within +-0.10; every seed stays within the 3-sigma
  // binomial envelope (3 * sqrt(0.4*0.6/100) ~= 0.147); the 10-seed mean
  // lands within +-0.03.
  double sum = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto measurement =
        measure_failure_rate("a question about trains", 100, marker_rubric(), gateway, seed);
    if (seed == 0) CHECK(std::abs(measurement.rate - 0.4) <= 0.10 + 1e-12);
    CHECK(std::abs(measurement.rate - 0.4) <= 0.147 + 1e-12);
    sum += measurement.rate;
  }
  double mean = sum / 10.0;
  CHECK(std::abs(mean - 0.4) <= 0.03 + 1e-12);
}

TEST_CASE("measure_failure_rate: unparseable judgments flag the measurement") {
  auto half_broken = std::make_shared<CallbackBackend>(
      [](const RoleConfig&, const ChatRequest& request) -> std::string {
        const std::string& text = request.last_user_text();
        if (text.find("=== RESPONSE UNDER REVIEW ===") != std::string::npos) {
          // Respond unusably for a fifth of the judgments.
          return request.seed && (*request.seed % 5 == 0) ? "no score" : "SCORE: 0";
        }
        return "plain answer";
      },
      nullptr);
  ModelGateway gateway;
  for (Role role : {Role::target, Role::judge}) {
    gateway.configure_role(fixtures::mock_role(role), half_broken);
  }
  auto measurement = measure_failure_rate("q", 100, marker_rubric(), gateway, 3);
  CHECK(measurement.unparseable > 10);
  CHECK(measurement.unreliable);
}

TEST_CASE("robustness_report: scripted 1.0 original / 0.8 perturbed aggregate") {
  // Generator emits variant-1..5; the target fails always on the original
  // and on four of five variants, never on variant-5.
  auto generator_calls = std::make_shared<std::atomic<int>>(0);
  auto scripted = std::make_shared<CallbackBackend>(
      [generator_calls](const RoleConfig&, const ChatRequest& request) -> std::string {
        const std::string& text = request.last_user_text();
        if (text.find("Rewrite the following prompt") != std::string::npos) {
          return "variant-" + std::to_string(++*generator_calls % 5 + 1) + " of the prompt";
        }
        if (text.find("=== RESPONSE UNDER REVIEW ===") != std::string::npos) {
          return marker_judge_reply(text);
        }
        // target
        if (text.find("variant-5") != std::string::npos) return "calm answer";
        return "FAILMARK engaged";
      },
      nullptr);
  ModelGateway gateway;
  for (Role role : {Role::target, Role::generator, Role::judge}) {
    gateway.configure_role(fixtures::mock_role(role), scripted);
  }

  RobustnessSpec spec;
  spec.prompts = {"the planted prompt"};
  spec.perturbations_per_prompt = 5;
  spec.samples_per_perturbation = 8;
  spec.rubric = marker_rubric();
  spec.seed = 4;

  auto report = robustness_report(spec, gateway);
  REQUIRE(report.prompts.size() == 1);
  CHECK(report.prompts[0].original.rate == 1.0);
  CHECK(report.prompts[0].variants.size() == 5);
  CHECK(report.prompts[0].mean_perturbed_rate == doctest::Approx(0.8));
  CHECK(report.original_mean == 1.0);
  CHECK(report.perturbed_mean_of_means == doctest::Approx(0.8));
  CHECK(report.perturbed_pooled_mean == doctest::Approx(0.8));
}

TEST_CASE("robustness_report: zero failures everywhere yields (0, 0)") {
  ModelGateway gateway;
  wire_scenario(gateway, flaky_scenario(0.0));
  RobustnessSpec spec;
  spec.prompts = {"a question about owls"};
  spec.perturbations_per_prompt = 3;
  spec.samples_per_perturbation = 10;
  spec.rubric = marker_rubric();
  auto report = robustness_report(spec, gateway);
  CHECK(report.original_mean == 0.0);
  CHECK(report.perturbed_mean_of_means == 0.0);
  CHECK(report.perturbed_pooled_mean == 0.0);

  auto payload = robustness_to_json(report);
  CHECK(payload.contains("original_mean"));
  CHECK(payload.contains("perturbed_mean_of_means"));
  CHECK(payload.contains("perturbed_pooled_mean"));
  auto csv = robustness_to_csv(report);
  CHECK(csv.find("original_rate") != std::string::npos);
}

TEST_CASE("steered_score: identity transform is exactly zero delta") {
  ModelGateway gateway;
  wire_scenario(gateway, flaky_scenario(0.4));

  TransformSpec identity;
  identity.name = "identity";
  identity.kind = TransformSpec::Kind::template_wrap;
  identity.parameters["template"] = "{prompt}";

  BehaviorDetector detector;
  detector.name = "marker";
  detector.mode = BehaviorDetector::Mode::substring;
  detector.definition = "FAILMARK";

  std::vector<DatasetItem> dataset;
  for (int i = 0; i < 40; ++i) {
    dataset.push_back({"item-" + std::to_string(i),
                       "a question about topic " + std::to_string(i), ""});
  }
  auto score = steered_score(dataset, identity, detector, gateway, 21);
  CHECK(score.delta == 0.0);
  CHECK(score.original_rate == score.transformed_rate);
  CHECK(score.dropped_items == 0);
  for (const auto& item : score.items) {
    CHECK(item.original_response == item.transformed_response);
  }
}

TEST_CASE("steered_score: flip-on-transform mock yields delta 1.0") {
  // The injected token deterministically triggers the behavior.
  MockScenario scenario = MockScenario::parse(
      "@default\tplain answer\n"
      "re:RESPONSE UNDER REVIEW ===[\\s\\S]*FAILMARK\t1.0\tSCORE: 100\n"
      "=== RESPONSE UNDER REVIEW ===\t1.0\tSCORE: 0\n"
      "STEERTOKEN\t1.0\tFAILMARK engaged\n",
      "flip");
  ModelGateway gateway;
  wire_scenario(gateway, scenario);

  TransformSpec inject;
  inject.name = "token";
  inject.kind = TransformSpec::Kind::token_inject;
  inject.parameters["token"] = "STEERTOKEN";
  inject.parameters["position"] = "prefix";

  BehaviorDetector detector;
  detector.mode = BehaviorDetector::Mode::substring;
  detector.definition = "FAILMARK";

  std::vector<DatasetItem> dataset;
  for (int i = 0; i < 25; ++i) {
    dataset.push_back({"i" + std::to_string(i), "plain prompt " + std::to_string(i), ""});
  }
  auto score = steered_score(dataset, inject, detector, gateway, 3);
  CHECK(score.original_rate == 0.0);
  CHECK(score.transformed_rate == 1.0);
  CHECK(score.delta == 1.0);
}

TEST_CASE("steered_score: binomial difference calibrates") {
  // 0.2 on plain items, 0.7 once transformed.
  MockScenario scenario = MockScenario::parse(
      "@default\tplain answer\n"
      "@seed\t31\n"
      "re:RESPONSE UNDER REVIEW ===[\\s\\S]*FAILMARK\t1.0\tSCORE: 100\n"
      "=== RESPONSE UNDER REVIEW ===\t1.0\tSCORE: 0\n"
      "STEERTOKEN\t0.7\tFAILMARK engaged\n"
      "plain item\t0.2\tFAILMARK engaged\n",
      "binomial");
  ModelGateway gateway;
  wire_scenario(gateway, scenario);

  TransformSpec inject;
  inject.name = "token";
  inject.kind = TransformSpec::Kind::token_inject;
  inject.parameters["token"] = "STEERTOKEN";

  BehaviorDetector detector;
  detector.mode = BehaviorDetector::Mode::substring;
  detector.definition = "FAILMARK";

  std::vector<DatasetItem> dataset;
  for (int i = 0; i < 500; ++i) {
    dataset.push_back({"i" + std::to_string(i), "plain item " + std::to_string(i), ""});
  }
  auto score = steered_score(dataset, inject, detector, gateway, 77);
  CHECK(score.delta > 0.5 - 0.06);
  CHECK(score.delta < 0.5 + 0.06);
  // Rate bounds invariants.
  CHECK(score.original_rate >= 0.0);
  CHECK(score.original_rate <= 1.0);
  CHECK(score.transformed_rate >= 0.0);
  CHECK(score.transformed_rate <= 1.0);
  CHECK(score.delta >= -1.0);
  CHECK(score.delta <= 1.0);
}

TEST_CASE("steered_score: transform failures drop items from both sides") {
  auto translating = std::make_shared<CallbackBackend>(
      [](const RoleConfig&, const ChatRequest& request) -> std::string {
        if (request.last_user_text().find("untranslatable") != std::string::npos) {
          throw TransientGatewayError("refused");
        }
        return "translated text";
      },
      nullptr);
  MockScenario scenario = MockScenario::parse(
      "@default\tplain answer\n"
      "re:RESPONSE UNDER REVIEW ===[\\s\\S]*FAILMARK\t1.0\tSCORE: 100\n"
      "=== RESPONSE UNDER REVIEW ===\t1.0\tSCORE: 0\n",
      "plain");
  ModelGateway gateway;
  wire_scenario(gateway, scenario);
  auto generator_role = fixtures::mock_role(Role::generator);
  generator_role.retry.max_attempts = 1;
  gateway.configure_role(generator_role, translating);

  TransformSpec translate;
  translate.name = "translate";
  translate.kind = TransformSpec::Kind::translate_via_model;
  translate.parameters["language"] = "Malay";

  BehaviorDetector detector;
  detector.mode = BehaviorDetector::Mode::substring;
  detector.definition = "FAILMARK";

  std::vector<DatasetItem> dataset = {
      {"a", "ordinary text", ""}, {"b", "untranslatable text", ""}, {"c", "more text", ""}};
  auto score = steered_score(dataset, translate, detector, gateway, 5);
  CHECK(score.dropped_items == 1);
  CHECK(score.items.size() == 2);
  for (const auto& item : score.items) CHECK(item.id != "b");
}

TEST_CASE("icl_curve: zero-shot point equals the steered original rate") {
  ModelGateway gateway;
  wire_scenario(gateway, flaky_scenario(0.4));

  BehaviorDetector detector;
  detector.mode = BehaviorDetector::Mode::substring;
  detector.definition = "FAILMARK";

  std::vector<DatasetItem> dataset;
  for (int i = 0; i < 30; ++i) {
    dataset.push_back({"q" + std::to_string(i), "a question " + std::to_string(i), ""});
  }

  TransformSpec identity;
  identity.kind = TransformSpec::Kind::template_wrap;
  identity.parameters["template"] = "{prompt}";
  auto steered = steered_score(dataset, identity, detector, gateway, 100);

  auto curve = icl_curve(dataset, "random-in-domain", {}, {0}, detector, gateway, 100);
  REQUIRE(curve.points.size() == 1);
  CHECK(curve.points[0].shots == 0);
  CHECK(curve.points[0].prepended_tokens == 0);
  CHECK(curve.points[0].rate == steered.original_rate);
}

TEST_CASE("icl_curve: geometric halving mock traces (1.0, 0.5, 0.25)") {
  // Elicitation halves per prepended exemplar regardless of content: item
  // i exhibits the behavior iff i < 8 / 2^shots.
  auto scripted = std::make_shared<CallbackBackend>(
      [](const RoleConfig&, const ChatRequest& request) -> std::string {
        int shots = static_cast<int>((request.messages.size() - 1) / 2);
        const std::string& prompt = request.messages.back().text;
        int item = std::stoi(prompt.substr(prompt.rfind(' ') + 1));
        int limit = 8 >> shots;
        return item < limit ? "FAILMARK engaged" : "plain answer";
      },
      nullptr);
  ModelGateway gateway;
  gateway.configure_role(fixtures::mock_role(Role::target), scripted);

  BehaviorDetector detector;
  detector.mode = BehaviorDetector::Mode::substring;
  detector.definition = "FAILMARK";

  std::vector<DatasetItem> dataset;
  for (int i = 0; i < 8; ++i) {
    dataset.push_back({"t" + std::to_string(i), "test item " + std::to_string(i), ""});
  }
  std::vector<IclExemplar> exemplars = {
      {"example question one", "example answer one"},
      {"example question two", "example answer two"},
  };

  auto curve = icl_curve(dataset, "in-chunk", exemplars, {0, 1, 2}, detector, gateway, 9);
  REQUIRE(curve.points.size() == 3);
  CHECK(curve.points[0].rate == 1.0);
  CHECK(curve.points[1].rate == 0.5);
  CHECK(curve.points[2].rate == 0.25);
  // Token counts accumulate the whitespace proxy over prepended turns.
  CHECK(curve.points[0].prepended_tokens == 0);
  CHECK(curve.points[1].prepended_tokens == 6);
  CHECK(curve.points[2].prepended_tokens == 12);

  auto payload = icl_to_json(curve);
  CHECK(payload["points"][1]["shots"] == 1);
  CHECK(payload["points"][1]["tokens"] == 6);
  CHECK(payload["points"][1]["rate"] == 0.5);
  auto csv = icl_to_csv(curve);
  CHECK(csv.rfind("shots,tokens,rate\n", 0) == 0);
}

TEST_CASE("icl_curve: shots beyond the target input limit are skipped with a warning") {
  ModelGateway gateway;
  wire_scenario(gateway, flaky_scenario(0.0));
  auto target_role = fixtures::mock_role(Role::target);
  target_role.max_input_tokens = 10;
  gateway.configure_role(target_role,
                         std::make_shared<MockBackend>(flaky_scenario(0.0)));

  BehaviorDetector detector;
  detector.mode = BehaviorDetector::Mode::substring;
  detector.definition = "FAILMARK";

  std::vector<DatasetItem> dataset = {{"a", "a question", ""}};
  std::vector<IclExemplar> exemplars(4, {"four token user turn here", "three token answer"});
  auto curve = icl_curve(dataset, "out-of-domain", exemplars, {0, 1, 4}, detector, gateway, 2);
  CHECK(curve.points.size() == 2);  // 0 and 1 shots fit under the limit
  REQUIRE(curve.skipped_shot_counts.size() == 1);
  CHECK(curve.skipped_shot_counts[0] == 4);
}

TEST_CASE("the four shipped transforms apply as specified") {
  DatasetItem item{"x", "What is 12 * 9?", ""};

  auto latex = apply_transform(builtin_transform("latex-wrap"), item, nullptr, 0);
  REQUIRE(latex.has_value());
  CHECK(latex->find("\\[ What is 12 * 9? \\]") != std::string::npos);

  auto overlay = apply_transform(builtin_transform("extraction-overlay"), item, nullptr, 0);
  REQUIRE(overlay.has_value());
  CHECK(overlay->find("You will be shown") != std::string::npos);
  CHECK(overlay->find("Context: What is 12 * 9?") != std::string::npos);

  auto rewrite = apply_transform(builtin_transform("question-rewrite"), item, nullptr, 0);
  REQUIRE(rewrite.has_value());
  CHECK(*rewrite == "Q: What is 12 * 9?\nA:");

  auto translate = builtin_transform("translate");
  CHECK(translate.kind == TransformSpec::Kind::translate_via_model);
  CHECK(translate.parameters.at("language") == "Malay");
  auto scripted = std::make_shared<CallbackBackend>(
      [](const RoleConfig&, const ChatRequest& request) -> std::string {
        CHECK(request.last_user_text().find("into Malay") != std::string::npos);
        return "Berapakah 12 * 9?";
      },
      nullptr);
  ModelGateway gateway;
  gateway.configure_role(fixtures::mock_role(Role::generator), scripted);
  auto translated = apply_transform(translate, item, &gateway, 0);
  REQUIRE(translated.has_value());
  CHECK(*translated == "Berapakah 12 * 9?");

  CHECK(builtin_transform_names().size() == 4);
  CHECK_THROWS_AS(builtin_transform("nonexistent"), AuditError);
}

TEST_CASE("detectors are deterministic functions of the response text") {
  BehaviorDetector substring;
  substring.mode = BehaviorDetector::Mode::substring;
  substring.definition = "sympy";
  CHECK(substring.detect("import sympy", nullptr));
  CHECK(!substring.detect("import numpy", nullptr));

  BehaviorDetector pattern;
  pattern.mode = BehaviorDetector::Mode::pattern;
  pattern.definition = "```[a-z]+";
  CHECK(pattern.detect("```python\nx\n```", nullptr));
  CHECK(!pattern.detect("no fence", nullptr));

  ModelGateway gateway;
  wire_scenario(gateway, flaky_scenario(0.4));
  BehaviorDetector judged;
  judged.mode = BehaviorDetector::Mode::judge_rubric;
  judged.rubric = marker_rubric();
  for (int repeat = 0; repeat < 3; ++repeat) {
    CHECK(judged.detect("FAILMARK text", &gateway));
    CHECK(!judged.detect("plain text", &gateway));
  }
}

TEST_CASE("harness runs reproduce byte-identically under fixed seeds") {
  auto run = [] {
    ModelGateway gateway;
    wire_scenario(gateway, flaky_scenario(0.4));
    RobustnessSpec spec;
    spec.prompts = {"a question about rivers"};
    spec.perturbations_per_prompt = 2;
    spec.samples_per_perturbation = 20;
    spec.rubric = marker_rubric();
    spec.seed = 8;
    auto report = robustness_report(spec, gateway);
    return robustness_to_json(report).dump();
  };
  CHECK(run() == run());
}
