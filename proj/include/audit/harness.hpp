#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "audit/core.hpp"
#include "audit/gateway.hpp"
#include "audit/jsonl.hpp"

// Quantitative measurement: perturbation robustness of found prompts,
// steered-score behavior deltas under non-semantic transforms, and ICL
// suppression curves.

namespace audit {

struct RobustnessSpec {
  std::vector<std::string> prompts;  // e.g. the top 45 from a run
  int perturbations_per_prompt = 20;
  int samples_per_perturbation = 100;
  Rubric rubric;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TransformSpec {
  enum class Kind { template_wrap, token_inject, style_overlay, translate_via_model };

  std::string name;
  Kind kind = Kind::template_wrap;
  std::map<std::string, std::string> parameters;
};

TransformSpec::Kind transform_kind_from_name(const std::string& name);
const char* transform_kind_name(TransformSpec::Kind kind);

// The four shipped transforms: "latex-wrap" (math wrapped in display
// markers), "extraction-overlay" (the data-extraction framing with
// "You will be shown" / "Context:"), "question-rewrite" (bare Q/A exam
// format), and "translate" (model-mediated translation; set
// parameters["language"] afterwards, default Malay).
TransformSpec builtin_transform(const std::string& name);
std::vector<std::string> builtin_transform_names();

struct DatasetItem {
  std::string id;
  std::string prompt;
  std::string answer;  // optional bookkeeping for paired accuracy
};

// Applies the transform, keeping the provenance link (same id). Returns
// nothing when the transform fails on this item (e.g. model translation
// errors); steered_score then drops the item from both sides.
std::optional<std::string> apply_transform(const TransformSpec& transform, const DatasetItem& item,
                                           ModelGateway* gateway, std::uint64_t seed);

// A deterministic function of the response text. Judge mode runs at
// temperature 0 under the SCORE contract with a text-keyed seed, so equal
// inputs always produce equal outcomes.
struct BehaviorDetector {
  enum class Mode { substring, pattern, judge_rubric };

  std::string name;
  Mode mode = Mode::substring;
  std::string definition;  // substring or regex
  Rubric rubric;           // judge mode only

  bool detect(const std::string& response, ModelGateway* gateway) const;
};

BehaviorDetector::Mode detector_mode_from_name(const std::string& name);

struct PerturbationOutcome {
  std::vector<std::string> variants;  // distinct, none identical to the original
  int requested = 0;
  int rerequests = 0;  // duplicate/identical replies that were re-asked once
};

// m substance-preserving rephrasings from the generator role.
PerturbationOutcome perturb_prompt(const std::string& prompt, int m, ModelGateway& gateway,
                                   std::uint64_t seed);

struct SampleRecord {
  int sample_index = 0;
  std::string response;
  double score = 0.0;
  bool parsed = false;
  bool violation = false;
};

struct FailureRateMeasurement {
  double rate = 0.0;  // violations / parsed samples
  int samples = 0;
  int violations = 0;
  int unparseable = 0;
  bool unreliable = false;  // more than 10% unparseable judgments
  std::vector<SampleRecord> records;
};

// Samples the target `samples` times and judges each against the rubric;
// the rate is the fraction of judged scores above the violation threshold.
FailureRateMeasurement measure_failure_rate(const std::string& prompt, int samples,
                                            const Rubric& rubric, ModelGateway& gateway,
                                            std::uint64_t seed);

struct PromptRobustness {
  std::string prompt;
  FailureRateMeasurement original;
  std::vector<std::string> variants;
  std::vector<FailureRateMeasurement> perturbed;  // parallel to variants
  double mean_perturbed_rate = 0.0;
};

struct RobustnessReport {
  std::vector<PromptRobustness> prompts;
  double original_mean = 0.0;
  // Both aggregations of the perturbed side: the mean over prompts of each
  // prompt's mean perturbed rate, and the pooled mean over every variant.
  double perturbed_mean_of_means = 0.0;
  double perturbed_pooled_mean = 0.0;
  bool unreliable = false;
};

RobustnessReport robustness_report(const RobustnessSpec& spec, ModelGateway& gateway);

struct SteeredPair {
  std::string id;
  std::string original_prompt;
  std::string transformed_prompt;
  std::string original_response;
  std::string transformed_response;
  bool original_detected = false;
  bool transformed_detected = false;
};

struct SteeredScore {
  double original_rate = 0.0;
  double transformed_rate = 0.0;
  double delta = 0.0;  // transformed - original
  std::vector<SteeredPair> items;
  int dropped_items = 0;  // transform failures, dropped from both sides
};

// Runs the target on original and transformed prompts with identical
// sampling settings paired by id; delta is the detector-rate difference.
SteeredScore steered_score(const std::vector<DatasetItem>& dataset, const TransformSpec& transform,
                           const BehaviorDetector& detector, ModelGateway& gateway,
                           std::uint64_t seed);

struct IclExemplar {
  std::string user;
  std::string assistant;
};

struct IclPoint {
  int shots = 0;
  long prepended_tokens = 0;  // whitespace-delimited token proxy
  double rate = 0.0;
  int items = 0;
};

struct IclCurve {
  std::string context_source;  // in-chunk | counter-examples | random-in-domain | random-out-of-domain
  std::vector<IclPoint> points;
  std::vector<int> skipped_shot_counts;  // context exceeded the target input limit
};

// Elicitation rate as a function of prepended exemplar turns; the 0-shot
// point is always included as the baseline.
IclCurve icl_curve(const std::vector<DatasetItem>& test_set, const std::string& context_source,
                   const std::vector<IclExemplar>& exemplars, const std::vector<int>& shot_counts,
                   const BehaviorDetector& detector, ModelGateway& gateway, std::uint64_t seed);

long whitespace_token_count(const std::string& text);

// Report writers: JSON with full per-sample tables, CSV of aggregates.
json robustness_to_json(const RobustnessReport& report);
std::string robustness_to_csv(const RobustnessReport& report);
json steered_to_json(const SteeredScore& score, const TransformSpec& transform,
                     const BehaviorDetector& detector);
std::string steered_to_csv(const SteeredScore& score, const TransformSpec& transform);
json icl_to_json(const IclCurve& curve);
std::string icl_to_csv(const IclCurve& curve);

}  // namespace audit
