#pragma once

#include <string>
#include <vector>

#include "audit/core.hpp"

// The prompt templates sent to the generator, judge, and extractor roles.
// They are a documented interface: the section markers below are what mock
// scenario rules key on, and downstream parsers rely on the reply
// contracts stated in each builder.

namespace audit {

enum class TextSide { query, response };

const char* text_side_name(TextSide side);

namespace prompts {

// Asks the generator for one realistic user query satisfying every listed
// attribute, with no meta-commentary. Marker: "satisfying all of the
// following attributes".
std::string generator_prompt(const std::vector<Attribute>& attributes);

// Asks the judge to grade (query, response) against the rubric on the
// 0-100 scale and finish with a "SCORE: <int>" line. The judge sees only
// (q, r, rubric), never the attribute set. Markers: "=== QUERY UNDER
// REVIEW ===", "=== RESPONSE UNDER REVIEW ===".
std::string judge_prompt(const Rubric& rubric, const std::string& query,
                         const std::string& response);

// Asks for exactly 10 one-sentence attributes of a query or response as a
// numbered list. Markers: "attributes of the user query" / "attributes of
// the assistant response".
std::string extraction_prompt(TextSide side, const std::string& text);

// Asks the informed judge to pick the descriptors most causally
// responsible for the rubric violation, replying with a final
// "SELECTED: i, j, k" line of 1-based indices. Marker: "CRUX SELECTION".
std::string crux_selection_prompt(const Rubric& rubric,
                                  const std::vector<std::string>& descriptors);

// Asks for a single-line label condensing the given descriptors.
// Marker: "Condense the following attribute descriptors".
std::string summarize_prompt(const std::vector<std::string>& texts);

// Asks the generator for one rephrasing that keeps substance identical.
// Marker: "Rewrite the following prompt".
std::string perturb_prompt(const std::string& prompt);

// Parses a "1. ..." numbered list; items may also use "N)" markers.
std::vector<std::string> parse_numbered_list(const std::string& reply);

// Parses the final "SELECTED: i, j, k" line into 1-based indices.
std::vector<int> parse_selected_indices(const std::string& reply);

}  // namespace prompts
}  // namespace audit
