#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "audit/core.hpp"
#include "audit/gateway.hpp"
#include "audit/jsonl.hpp"
#include "audit/turf_index.hpp"

// Online attribution: given a failing (query, response, rubric), produce
// the "(trigger, behavior, violation)" explanation via two-judge crux
// extraction, exact similarity retrieval, cluster hit counting, and the
// trigger argmax.

namespace audit {

struct CruxSet {
  std::vector<std::string> all_attributes;  // the 10 blind response descriptors
  std::vector<std::string> crux;            // 1..3 selected as causally responsible
  std::string rubric_name;
};

// Blind judge describes the response without ever seeing the rubric; the
// informed judge then selects the crux from those descriptors plus the
// rubric. Each judge gets one retry before ErrorKind::judge_parse aborts.
CruxSet extract_crux(const std::string& response, const Rubric& rubric, ModelGateway& gateway);

struct Neighbor {
  std::size_t record_row = 0;  // row into index.records
  std::string pair_id;
  int ordinal = 0;
  double similarity = 0.0;
};

struct NeighborSet {
  std::string crux_attribute;
  std::vector<Neighbor> neighbors;  // similarity descending; ties by ordinal then pair_id
};

// Exact top-k cosine search over every response-side vector. Equals the
// exhaustive scan, including tie order (similarity desc, ordinal asc,
// pair_id asc).
NeighborSet retrieve_similar(const std::string& crux_text, const AttributeIndex& index,
                             ModelGateway& gateway, std::size_t k = 1000);

struct HitHistogram {
  std::map<std::uint32_t, int> counts;  // cluster id -> hits
  int skipped_neighbors = 0;            // neighbors whose pair had no query-side records
};

// h(c; crux): every neighbor contributes one hit per query-side attribute
// record of its training pair, at that record's assigned cluster.
HitHistogram count_cluster_hits(const NeighborSet& neighbors, const AttributeIndex& index);

struct HitTableRow {
  std::string attribute_text;  // one of the failing query's attributes
  std::uint32_t cluster = 0;
  int hits = 0;
};

struct CruxAttribution {
  std::string crux_text;
  HitHistogram histogram;
  std::vector<HitTableRow> hit_table;  // one row per failing-query attribute
  std::string trigger;
  std::uint32_t trigger_cluster = 0;
  int trigger_hits = 0;
};

struct AttributionResult {
  std::string trigger;
  std::uint32_t trigger_cluster = 0;
  std::string trigger_cluster_summary;
  std::string winning_crux;
  CruxSet crux;
  int hit_count = 0;
  int hit_total = 0;  // the retrieval k
  std::vector<HitTableRow> hit_table;  // winning crux's per-attribute table
  std::vector<CruxAttribution> per_crux;
  std::vector<std::string> example_pair_ids;  // top supporting training pairs
  bool no_support = false;  // every query attribute's cluster had zero hits

  void validate() const;
};

// Full attribution: crux extraction, per-crux retrieval and counting,
// failing-query attribute extraction and nearest-centroid assignment, and
// the global (crux, trigger) argmax by hit count. Stage failures surface
// as AuditError with a stage-labeled message.
AttributionResult attribute(const std::string& query, const std::string& response,
                            const Rubric& rubric, const AttributeIndex& index,
                            ModelGateway& gateway, std::size_t k = 1000);

// The condensed Trigger / Crux / Hit count block plus the hit table.
std::string render_attribution_markdown(const AttributionResult& result);

json attribution_to_json(const AttributionResult& result);

}  // namespace audit
