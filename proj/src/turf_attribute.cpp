#include "audit/turf_attribute.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "audit/prompts.hpp"
#include "audit/rng.hpp"

namespace audit {
namespace {

constexpr int kCruxSize = 3;

double dot(const std::vector<float>& a, const std::vector<float>& b) {
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += static_cast<double>(a[i]) * b[i];
  return sum;
}

std::vector<std::string> extract_ten(const std::string& text, TextSide side,
                                     ModelGateway& gateway, const std::string& stage) {
  std::string prompt = prompts::extraction_prompt(side, text);
  double temperature = gateway.role_config(Role::judge).default_temperature;
  for (int attempt = 0; attempt < 2; ++attempt) {
    std::string reply = gateway.chat(
        Role::judge,
        user_request(prompt, temperature,
                     hash_combine(fnv1a64(text), 0xE10ull + static_cast<std::uint64_t>(attempt))));
    auto items = prompts::parse_numbered_list(reply);
    if (items.size() >= 10) {
      items.resize(10);
      return items;
    }
  }
  throw AuditError(ErrorKind::judge_parse, stage + ": extractor returned fewer than 10 items twice");
}

// Nearest centroid by cosine; the first maximum wins, so exact ties pick
// the lowest cluster id.
std::uint32_t assign_to_cluster(const std::vector<float>& vector, const ClusterModel& clusters) {
  const std::size_t dim = static_cast<std::size_t>(clusters.dim);
  double best = -2.0;
  std::uint32_t best_cluster = 0;
  for (std::size_t c = 0; c < static_cast<std::size_t>(clusters.k); ++c) {
    double similarity = 0.0;
    const float* centroid = clusters.centroids.data() + c * dim;
    for (std::size_t i = 0; i < dim; ++i) {
      similarity += static_cast<double>(vector[i]) * centroid[i];
    }
    if (similarity > best) {
      best = similarity;
      best_cluster = static_cast<std::uint32_t>(c);
    }
  }
  return best_cluster;
}

}  // namespace

CruxSet extract_crux(const std::string& response, const Rubric& rubric, ModelGateway& gateway) {
  CruxSet crux;
  crux.rubric_name = rubric.name;
  // Blind pass: descriptors of what the response does, rubric withheld.
  crux.all_attributes = extract_ten(response, TextSide::response, gateway, "crux blind judge");

  std::string selection_prompt = prompts::crux_selection_prompt(rubric, crux.all_attributes);
  double temperature = gateway.role_config(Role::judge).default_temperature;
  std::vector<int> indices;
  AuditError last_error(ErrorKind::judge_parse, "crux informed judge: no reply");
  for (int attempt = 0; attempt < 2 && indices.empty(); ++attempt) {
    try {
      std::string reply = gateway.chat(
          Role::judge,
          user_request(selection_prompt, temperature,
                       hash_combine(fnv1a64(response), 0xC505ull + static_cast<std::uint64_t>(attempt))));
      auto parsed = prompts::parse_selected_indices(reply);
      for (int index : parsed) {
        if (index < 1 || index > static_cast<int>(crux.all_attributes.size())) {
          throw AuditError(ErrorKind::judge_parse,
                           "crux informed judge: index " + std::to_string(index) +
                               " is outside 1..10");
        }
      }
      indices = parsed;
    } catch (const AuditError& error) {
      if (error.kind() != ErrorKind::judge_parse) throw;
      last_error = error;
    }
  }
  if (indices.empty()) throw last_error;

  if (indices.size() > kCruxSize) indices.resize(kCruxSize);  // extra picks are dropped
  std::vector<int> seen;
  for (int index : indices) {
    if (std::find(seen.begin(), seen.end(), index) != seen.end()) continue;
    seen.push_back(index);
    crux.crux.push_back(crux.all_attributes[static_cast<std::size_t>(index - 1)]);
  }
  return crux;
}

NeighborSet retrieve_similar(const std::string& crux_text, const AttributeIndex& index,
                             ModelGateway& gateway, std::size_t k) {
  auto embedded = gateway.embed(Role::embedder, {crux_text});
  const auto& query_vector = embedded.front();
  if (static_cast<int>(query_vector.size()) != index.manifest.dim) {
    throw AuditError(ErrorKind::dimension_mismatch,
                     "embedder produced dimension " + std::to_string(query_vector.size()) +
                         " but the index holds dimension " + std::to_string(index.manifest.dim));
  }

  struct Scored {
    double similarity;
    std::size_t row;
  };
  std::vector<Scored> scored;
  scored.reserve(index.response_rows.size());
  for (std::size_t row : index.response_rows) {
    scored.push_back({dot(query_vector, index.records[row].vector), row});
  }

  auto better = [&](const Scored& a, const Scored& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    const auto& ra = index.records[a.row];
    const auto& rb = index.records[b.row];
    if (ra.ordinal != rb.ordinal) return ra.ordinal < rb.ordinal;
    return ra.pair_id < rb.pair_id;
  };

  std::size_t keep = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep),
                    scored.end(), better);
  scored.resize(keep);

  NeighborSet result;
  result.crux_attribute = crux_text;
  result.neighbors.reserve(keep);
  for (const auto& s : scored) {
    const auto& record = index.records[s.row];
    result.neighbors.push_back({s.row, record.pair_id, record.ordinal, s.similarity});
  }
  return result;
}

HitHistogram count_cluster_hits(const NeighborSet& neighbors, const AttributeIndex& index) {
  HitHistogram histogram;
  for (const auto& neighbor : neighbors.neighbors) {
    auto it = index.query_positions_by_pair.find(neighbor.pair_id);
    if (it == index.query_positions_by_pair.end() || it->second.empty()) {
      ++histogram.skipped_neighbors;
      continue;
    }
    for (std::size_t position : it->second) {
      histogram.counts[index.assignment_of_query_position(position)] += 1;
    }
  }
  return histogram;
}

void AttributionResult::validate() const {
  int max_hits = 0;
  for (const auto& row : hit_table) max_hits = std::max(max_hits, row.hits);
  if (hit_count != max_hits) {
    throw AuditError(ErrorKind::integrity, "hit_count must equal the hit table maximum");
  }
  if (hit_count > hit_total) {
    throw AuditError(ErrorKind::integrity, "hit_count exceeds hit_total");
  }
}

AttributionResult attribute(const std::string& query, const std::string& response,
                            const Rubric& rubric, const AttributeIndex& index,
                            ModelGateway& gateway, std::size_t k) {
  AttributionResult result;
  result.hit_total = static_cast<int>(k);

  try {
    result.crux = extract_crux(response, rubric, gateway);
  } catch (const AuditError& error) {
    throw AuditError(error.kind(), std::string("crux extraction: ") + error.what());
  }

  // The failing query reuses the index's query-side extraction template so
  // its attributes live in the same embedding geometry as the clusters.
  std::vector<std::string> query_attributes;
  try {
    query_attributes = extract_ten(query, TextSide::query, gateway, "failing-query extraction");
  } catch (const AuditError& error) {
    throw AuditError(error.kind(), std::string("failing-query extraction: ") + error.what());
  }

  std::vector<std::uint32_t> query_clusters(query_attributes.size());
  try {
    auto vectors = gateway.embed(Role::embedder, query_attributes);
    for (std::size_t i = 0; i < vectors.size(); ++i) {
      if (static_cast<int>(vectors[i].size()) != index.manifest.dim) {
        throw AuditError(ErrorKind::dimension_mismatch,
                         "embedder dimension disagrees with the index");
      }
      query_clusters[i] = assign_to_cluster(vectors[i], index.clusters);
    }
  } catch (const AuditError& error) {
    throw AuditError(error.kind(), std::string("query-attribute assignment: ") + error.what());
  }

  // Per-crux retrieval, counting, and trigger argmax. Selection order is a
  // documented deterministic rule: maximize hits, then lowest cluster id,
  // then lexicographically smallest attribute text - never input order.
  for (const auto& crux_text : result.crux.crux) {
    CruxAttribution per;
    per.crux_text = crux_text;
    try {
      NeighborSet neighbors = retrieve_similar(crux_text, index, gateway, k);
      per.histogram = count_cluster_hits(neighbors, index);

      for (std::size_t i = 0; i < query_attributes.size(); ++i) {
        HitTableRow row;
        row.attribute_text = query_attributes[i];
        row.cluster = query_clusters[i];
        auto it = per.histogram.counts.find(row.cluster);
        row.hits = it == per.histogram.counts.end() ? 0 : it->second;
        per.hit_table.push_back(std::move(row));
      }

      const HitTableRow* best = nullptr;
      for (const auto& row : per.hit_table) {
        if (!best || row.hits > best->hits ||
            (row.hits == best->hits && row.cluster < best->cluster) ||
            (row.hits == best->hits && row.cluster == best->cluster &&
             row.attribute_text < best->attribute_text)) {
          best = &row;
        }
      }
      if (best) {
        per.trigger = best->attribute_text;
        per.trigger_cluster = best->cluster;
        per.trigger_hits = best->hits;
      }

      if (result.example_pair_ids.empty()) {
        std::set<std::string> seen;
        for (const auto& neighbor : neighbors.neighbors) {
          if (seen.insert(neighbor.pair_id).second) {
            result.example_pair_ids.push_back(neighbor.pair_id);
            if (result.example_pair_ids.size() >= 5) break;
          }
        }
      }
    } catch (const AuditError& error) {
      throw AuditError(error.kind(), std::string("retrieval for crux '") + crux_text +
                                         "': " + error.what());
    }
    result.per_crux.push_back(std::move(per));
  }

  const CruxAttribution* winner = nullptr;
  for (const auto& per : result.per_crux) {
    if (!winner || per.trigger_hits > winner->trigger_hits ||
        (per.trigger_hits == winner->trigger_hits &&
         per.trigger_cluster < winner->trigger_cluster) ||
        (per.trigger_hits == winner->trigger_hits &&
         per.trigger_cluster == winner->trigger_cluster && per.trigger < winner->trigger)) {
      winner = &per;
    }
  }
  if (!winner) {
    throw AuditError(ErrorKind::pipeline, "attribution produced no crux attributions");
  }

  result.trigger = winner->trigger;
  result.trigger_cluster = winner->trigger_cluster;
  result.winning_crux = winner->crux_text;
  result.hit_count = winner->trigger_hits;
  result.hit_table = winner->hit_table;
  if (result.trigger_cluster < index.clusters.summaries.size()) {
    result.trigger_cluster_summary = index.clusters.summaries[result.trigger_cluster];
  }
  result.no_support = result.hit_count == 0;
  result.validate();
  return result;
}

std::string render_attribution_markdown(const AttributionResult& result) {
  std::ostringstream out;
  out << "## Attribution: " << result.crux.rubric_name << "\n\n"
      << "- Trigger: \"" << result.trigger << "\"\n"
      << "- Crux: \"" << result.winning_crux << "\"\n"
      << "- Hit count: " << result.hit_count << "/" << result.hit_total << "\n";
  if (result.no_support) {
    out << "- Note: no-support - every query attribute landed in a zero-hit cluster\n";
  }
  if (!result.trigger_cluster_summary.empty()) {
    out << "- Trigger cluster " << result.trigger_cluster << ": "
        << result.trigger_cluster_summary << "\n";
  }
  out << "\n### Hit table (winning crux)\n\n";
  for (const auto& row : result.hit_table) {
    out << "- \"" << row.attribute_text << "\" -> cluster " << row.cluster << ", "
        << row.hits << "/" << result.hit_total << " hits\n";
  }
  if (!result.example_pair_ids.empty()) {
    out << "\n### Example supporting pairs\n\n";
    for (const auto& id : result.example_pair_ids) out << "- " << id << "\n";
  }
  return out.str();
}

json attribution_to_json(const AttributionResult& result) {
  json per_crux = json::array();
  for (const auto& per : result.per_crux) {
    json histogram = json::object();
    for (const auto& [cluster, hits] : per.histogram.counts) {
      histogram[std::to_string(cluster)] = hits;
    }
    json table = json::array();
    for (const auto& row : per.hit_table) {
      table.push_back(
          {{"attribute", row.attribute_text}, {"cluster", row.cluster}, {"hits", row.hits}});
    }
    per_crux.push_back({{"crux", per.crux_text},
                        {"trigger", per.trigger},
                        {"trigger_cluster", per.trigger_cluster},
                        {"trigger_hits", per.trigger_hits},
                        {"skipped_neighbors", per.histogram.skipped_neighbors},
                        {"histogram", histogram},
                        {"hit_table", table}});
  }
  json table = json::array();
  for (const auto& row : result.hit_table) {
    table.push_back(
        {{"attribute", row.attribute_text}, {"cluster", row.cluster}, {"hits", row.hits}});
  }
  return json{{"rubric_name", result.crux.rubric_name},
              {"trigger", result.trigger},
              {"trigger_cluster", result.trigger_cluster},
              {"trigger_cluster_summary", result.trigger_cluster_summary},
              {"crux", result.winning_crux},
              {"crux_candidates", result.crux.crux},
              {"blind_attributes", result.crux.all_attributes},
              {"hit_count", result.hit_count},
              {"hit_total", result.hit_total},
              {"hit_table", table},
              {"per_crux", per_crux},
              {"example_pair_ids", result.example_pair_ids},
              {"no_support", result.no_support}};
}

}  // namespace audit
