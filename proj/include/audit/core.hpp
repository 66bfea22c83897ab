#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "audit/errors.hpp"

// Domain types and the pure search mathematics: attribute weighting, the
// sampling distribution, and replay-buffer maintenance. Everything here is
// a side-effect-free function from values to values.

namespace audit {

// A short natural-language descriptor of one prompt/response property; the
// atomic unit the search weights and the attribution pipeline clusters.
struct Attribute {
  std::string id;
  std::string text;
};

// An ordered attribute list with one nonnegative weight per attribute.
// normalized() turns the weights into the sampling distribution P(a).
struct AttributePool {
  std::vector<Attribute> attributes;
  std::vector<double> weights;

  std::size_t size() const { return attributes.size(); }

  // Throws ErrorKind::input on duplicate ids, blank texts, negative or
  // mismatched weights.
  void validate() const;

  // Index of an attribute id, or throws ErrorKind::integrity.
  std::size_t index_of(const std::string& id) const;

  // Weights scaled to sum to 1. Zero total mass yields the uniform
  // distribution, mirroring the empty-buffer initialization.
  AttributePool normalized() const;
};

// Uniform pool over the given attributes.
AttributePool uniform_pool(std::vector<Attribute> attributes);

// The audited behavior: what it is, when it is and is not appropriate, and
// how the judge should calibrate. Scores above violation_threshold count
// as unambiguous failures.
struct Rubric {
  std::string name;
  std::string description;
  std::string judge_instructions;
  double violation_threshold = 70.0;

  void validate() const;
};

// One (query, response, score, attribute-set) search record.
struct ScoredCandidate {
  std::string query;
  std::string response;
  double score = 0.0;  // judge violation score in [0, 100]
  std::vector<std::string> attribute_ids;
  int iteration = 0;
  std::string pipeline_id;
};

// Top-n store of the highest-scoring candidates. Entries are kept sorted
// by score descending, ties broken by earlier insertion, and no two
// entries share a query string.
struct ReplayBuffer {
  std::size_t capacity = 50;
  std::vector<ScoredCandidate> entries;

  void validate() const;
  bool empty() const { return entries.empty(); }

  double mean_score() const;  // 0 when empty
  double max_score() const;   // 0 when empty
};

// Attribute weighting: w(a) = sum over buffer entries of s_j * 1[a in A_j],
// normalized into a probability distribution. An empty buffer or all-zero
// scores fall back to uniform. Unknown attribute ids raise
// ErrorKind::integrity.
AttributePool compute_weights(const ReplayBuffer& buffer, const AttributePool& pool);

// Draws k distinct attributes without replacement, proportional to the
// pool's normalized weights, renormalizing after each draw. Deterministic
// under a fixed seed. Throws ErrorKind::insufficient_pool when fewer than
// k attributes carry positive weight (after the uniform fallback).
std::vector<Attribute> sample_attribute_set(const AttributePool& pool, std::size_t k,
                                            std::uint64_t seed);

// Retains the top-n by score of the union of old entries and new
// candidates. A query string appearing more than once keeps only its
// highest-scoring record (earlier record wins ties).
ReplayBuffer merge_top_k(const ReplayBuffer& buffer, const std::vector<ScoredCandidate>& new_candidates);

}  // namespace audit
