#include "audit/core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "audit/rng.hpp"

namespace audit {
namespace {

std::string trimmed(const std::string& s) {
  auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

}  // namespace

void AttributePool::validate() const {
  if (weights.size() != attributes.size()) {
    throw AuditError(ErrorKind::input, "attribute pool has " + std::to_string(attributes.size()) +
                                           " attributes but " + std::to_string(weights.size()) +
                                           " weights");
  }
  std::unordered_set<std::string> seen;
  for (const auto& attribute : attributes) {
    if (trimmed(attribute.text).empty()) {
      throw AuditError(ErrorKind::input, "attribute '" + attribute.id + "' has blank text");
    }
    if (!seen.insert(attribute.id).second) {
      throw AuditError(ErrorKind::input, "duplicate attribute id '" + attribute.id + "'");
    }
  }
  for (double w : weights) {
    if (!(w >= 0.0)) {
      throw AuditError(ErrorKind::input, "attribute weights must be nonnegative");
    }
  }
}

std::size_t AttributePool::index_of(const std::string& id) const {
  for (std::size_t i = 0; i < attributes.size(); ++i) {
    if (attributes[i].id == id) return i;
  }
  throw AuditError(ErrorKind::integrity, "attribute id '" + id + "' does not resolve in the pool");
}

AttributePool AttributePool::normalized() const {
  AttributePool result = *this;
  double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (total <= 0.0) {
    double uniform = attributes.empty() ? 0.0 : 1.0 / static_cast<double>(attributes.size());
    std::fill(result.weights.begin(), result.weights.end(), uniform);
  } else {
    for (double& w : result.weights) w /= total;
  }
  return result;
}

AttributePool uniform_pool(std::vector<Attribute> attributes) {
  AttributePool pool;
  pool.weights.assign(attributes.size(),
                      attributes.empty() ? 0.0 : 1.0 / static_cast<double>(attributes.size()));
  pool.attributes = std::move(attributes);
  pool.validate();
  return pool;
}

void Rubric::validate() const {
  if (name.empty()) throw AuditError(ErrorKind::input, "rubric name must be non-empty");
  if (!(violation_threshold >= 0.0 && violation_threshold <= 100.0)) {
    throw AuditError(ErrorKind::input, "rubric violation_threshold must lie in [0, 100]");
  }
}

void ReplayBuffer::validate() const {
  if (entries.size() > capacity) {
    throw AuditError(ErrorKind::integrity, "replay buffer exceeds its capacity");
  }
  std::unordered_set<std::string> queries;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (!(e.score >= 0.0 && e.score <= 100.0)) {
      throw AuditError(ErrorKind::integrity, "replay buffer score out of [0, 100]");
    }
    if (i > 0 && entries[i - 1].score < e.score) {
      throw AuditError(ErrorKind::integrity, "replay buffer entries not sorted by score");
    }
    if (!queries.insert(e.query).second) {
      throw AuditError(ErrorKind::integrity, "replay buffer holds duplicate query strings");
    }
  }
}

double ReplayBuffer::mean_score() const {
  if (entries.empty()) return 0.0;
  double total = 0.0;
  for (const auto& e : entries) total += e.score;
  return total / static_cast<double>(entries.size());
}

double ReplayBuffer::max_score() const {
  return entries.empty() ? 0.0 : entries.front().score;
}

AttributePool compute_weights(const ReplayBuffer& buffer, const AttributePool& pool) {
  pool.validate();
  if (pool.attributes.empty()) {
    throw AuditError(ErrorKind::input, "attribute pool must be non-empty");
  }

  std::unordered_map<std::string, std::size_t> index;
  index.reserve(pool.attributes.size());
  for (std::size_t i = 0; i < pool.attributes.size(); ++i) {
    index.emplace(pool.attributes[i].id, i);
  }

  AttributePool result = pool;
  std::fill(result.weights.begin(), result.weights.end(), 0.0);
  for (const auto& entry : buffer.entries) {
    for (const auto& id : entry.attribute_ids) {
      auto it = index.find(id);
      if (it == index.end()) {
        throw AuditError(ErrorKind::integrity,
                         "buffer references attribute id '" + id + "' missing from the pool");
      }
      result.weights[it->second] += entry.score;
    }
  }
  return result.normalized();
}

std::vector<Attribute> sample_attribute_set(const AttributePool& pool, std::size_t k,
                                            std::uint64_t seed) {
  if (k < 1 || k > 5) {
    throw AuditError(ErrorKind::input, "attribute set size must lie in [1, 5], got " +
                                           std::to_string(k));
  }
  AttributePool p = pool.normalized();
  p.validate();
  std::size_t positive = 0;
  for (double w : p.weights) {
    if (w > 0.0) ++positive;
  }
  if (k > positive) {
    throw AuditError(ErrorKind::insufficient_pool,
                     "requested " + std::to_string(k) + " attributes but only " +
                         std::to_string(positive) + " carry positive weight");
  }

  Rng rng(seed);
  std::vector<double> weights = p.weights;
  std::vector<Attribute> picked;
  picked.reserve(k);
  for (std::size_t draw = 0; draw < k; ++draw) {
    double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    double target = rng.next_double() * total;
    double running = 0.0;
    std::size_t chosen = weights.size();
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (weights[i] <= 0.0) continue;
      running += weights[i];
      if (target < running) {
        chosen = i;
        break;
      }
      chosen = i;  // guards against running never exceeding target due to rounding
    }
    picked.push_back(p.attributes[chosen]);
    weights[chosen] = 0.0;  // without replacement; remaining mass renormalizes implicitly
  }
  return picked;
}

ReplayBuffer merge_top_k(const ReplayBuffer& buffer, const std::vector<ScoredCandidate>& new_candidates) {
  for (const auto& c : new_candidates) {
    if (!(c.score >= 0.0 && c.score <= 100.0)) {
      throw AuditError(ErrorKind::input, "candidate score out of [0, 100]");
    }
  }

  // Existing entries arrive before new candidates, so equal-score and
  // equal-query conflicts resolve in favor of the earlier record.
  struct Arrival {
    std::size_t order;
    const ScoredCandidate* candidate;
  };
  std::vector<Arrival> pool;
  pool.reserve(buffer.entries.size() + new_candidates.size());
  for (const auto& e : buffer.entries) pool.push_back({pool.size(), &e});
  for (const auto& c : new_candidates) pool.push_back({pool.size(), &c});

  std::unordered_map<std::string, std::size_t> best_by_query;
  std::vector<Arrival> deduped;
  deduped.reserve(pool.size());
  for (const auto& arrival : pool) {
    auto it = best_by_query.find(arrival.candidate->query);
    if (it == best_by_query.end()) {
      best_by_query.emplace(arrival.candidate->query, deduped.size());
      deduped.push_back(arrival);
    } else if (arrival.candidate->score > deduped[it->second].candidate->score) {
      deduped[it->second] = arrival;
    }
  }

  std::sort(deduped.begin(), deduped.end(), [](const Arrival& a, const Arrival& b) {
    if (a.candidate->score != b.candidate->score) return a.candidate->score > b.candidate->score;
    return a.order < b.order;
  });
  if (deduped.size() > buffer.capacity) deduped.resize(buffer.capacity);

  ReplayBuffer result;
  result.capacity = buffer.capacity;
  result.entries.reserve(deduped.size());
  for (const auto& arrival : deduped) result.entries.push_back(*arrival.candidate);
  return result;
}

}  // namespace audit
