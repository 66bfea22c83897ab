#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "audit/rng.hpp"
#include "audit/turf_attribute.hpp"
#include "doctest.h"
#include "planted_corpus.hpp"
#include "scenario_fixtures.hpp"

using namespace audit;

namespace {

// Independent exhaustive-scan oracle for retrieval: full argsort with the
// documented tie rule (similarity desc, ordinal asc, pair_id asc).
std::vector<std::size_t> oracle_retrieve(const AttributeIndex& index,
                                         const std::vector<float>& query, std::size_t k) {
  struct Row {
    double similarity;
    int ordinal;
    std::string pair_id;
    std::size_t record_row;
  };
  std::vector<Row> rows;
  for (std::size_t record_row : index.response_rows) {
    const auto& record = index.records[record_row];
    double sim = 0.0;
    for (std::size_t d = 0; d < query.size(); ++d) {
      sim += static_cast<double>(query[d]) * record.vector[d];
    }
    rows.push_back({sim, record.ordinal, record.pair_id, record_row});
  }
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    if (a.ordinal != b.ordinal) return a.ordinal < b.ordinal;
    return a.pair_id < b.pair_id;
  });
  if (rows.size() > k) rows.resize(k);
  std::vector<std::size_t> result;
  for (const auto& row : rows) result.push_back(row.record_row);
  return result;
}

// Independent recount of the full attribution for the planted corpus.
struct OracleAttribution {
  std::string trigger;
  int hit_count = 0;
};

OracleAttribution oracle_attribution(const AttributeIndex& index,
                                     const std::vector<std::string>& failing_attrs,
                                     const std::string& crux_text, std::size_t k) {
  auto query_vec = fixtures::planted_embedding(crux_text, index.manifest.dim,
                                               index.manifest.seed);
  auto neighbors = oracle_retrieve(index, query_vec, k);

  std::map<std::uint32_t, int> histogram;
  for (std::size_t record_row : neighbors) {
    const auto& pair_id = index.records[record_row].pair_id;
    auto it = index.query_positions_by_pair.find(pair_id);
    if (it == index.query_positions_by_pair.end()) continue;
    for (std::size_t position : it->second) {
      histogram[index.clusters.assignments[position]] += 1;
    }
  }

  OracleAttribution best;
  std::uint32_t best_cluster = 0;
  bool first = true;
  const std::size_t dim = static_cast<std::size_t>(index.manifest.dim);
  for (const auto& attr : failing_attrs) {
    auto vec = fixtures::planted_embedding(attr, index.manifest.dim, index.manifest.seed);
    double best_sim = -2.0;
    std::uint32_t cluster = 0;
    for (std::size_t c = 0; c < static_cast<std::size_t>(index.clusters.k); ++c) {
      double sim = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        sim += static_cast<double>(vec[d]) * index.clusters.centroids[c * dim + d];
      }
      if (sim > best_sim) {
        best_sim = sim;
        cluster = static_cast<std::uint32_t>(c);
      }
    }
    int hits = histogram.count(cluster) ? histogram.at(cluster) : 0;
    bool wins = first || hits > best.hit_count ||
                (hits == best.hit_count && cluster < best_cluster) ||
                (hits == best.hit_count && cluster == best_cluster && attr < best.trigger);
    if (wins) {
      best.trigger = attr;
      best.hit_count = hits;
      best_cluster = cluster;
      first = false;
    }
  }
  return best;
}

}  // namespace

TEST_CASE("extract_crux: scripted two-judge flow") {
  Rubric rubric = fixtures::unrequested_code_rubric();

  auto chat = [](const RoleConfig&, const ChatRequest& request) -> std::string {
    const std::string& text = request.last_user_text();
    if (text.find("CRUX SELECTION") != std::string::npos) return "reasoning\nSELECTED: 2, 5, 9";
    if (text.find("attributes of the assistant response") != std::string::npos) {
      std::string reply;
      for (int i = 1; i <= 10; ++i) {
        reply += std::to_string(i) + ". descriptor " + std::to_string(i) + "\n";
      }
      return reply;
    }
    // The blind judge must never receive the rubric.
    return "unexpected";
  };
  ModelGateway gateway;
  gateway.configure_role(fixtures::mock_role(Role::judge),
                         std::make_shared<CallbackBackend>(chat, nullptr));

  auto crux = extract_crux("a response", rubric, gateway);
  REQUIRE(crux.all_attributes.size() == 10);
  REQUIRE(crux.crux.size() == 3);
  CHECK(crux.crux[0] == "descriptor 2");
  CHECK(crux.crux[1] == "descriptor 5");
  CHECK(crux.crux[2] == "descriptor 9");
  CHECK(crux.rubric_name == rubric.name);
}

TEST_CASE("extract_crux: the blind judge never sees the rubric text") {
  Rubric rubric = fixtures::unrequested_code_rubric();
  bool blind_saw_rubric = false;
  auto chat = [&](const RoleConfig&, const ChatRequest& request) -> std::string {
    const std::string& text = request.last_user_text();
    if (text.find("attributes of the assistant response") != std::string::npos) {
      if (text.find(rubric.description) != std::string::npos) blind_saw_rubric = true;
      std::string reply;
      for (int i = 1; i <= 10; ++i) reply += std::to_string(i) + ". d" + std::to_string(i) + "\n";
      return reply;
    }
    return "SELECTED: 1, 2, 3";
  };
  ModelGateway gateway;
  gateway.configure_role(fixtures::mock_role(Role::judge),
                         std::make_shared<CallbackBackend>(chat, nullptr));
  extract_crux("the response body", rubric, gateway);
  CHECK(!blind_saw_rubric);
}

TEST_CASE("extract_crux: five indices keep the first three; bad index errors") {
  Rubric rubric = fixtures::unrequested_code_rubric();
  std::string selection = "SELECTED: 1, 2, 3, 4, 5";
  auto chat = [&selection](const RoleConfig&, const ChatRequest& request) -> std::string {
    const std::string& text = request.last_user_text();
    if (text.find("CRUX SELECTION") != std::string::npos) return selection;
    std::string reply;
    for (int i = 1; i <= 10; ++i) reply += std::to_string(i) + ". d" + std::to_string(i) + "\n";
    return reply;
  };
  ModelGateway gateway;
  gateway.configure_role(fixtures::mock_role(Role::judge),
                         std::make_shared<CallbackBackend>(chat, nullptr));

  auto crux = extract_crux("r", rubric, gateway);
  REQUIRE(crux.crux.size() == 3);
  CHECK(crux.crux[2] == "d3");

  selection = "SELECTED: 11";
  try {
    extract_crux("r", rubric, gateway);
    FAIL("expected a parse error");
  } catch (const AuditError& error) {
    CHECK(error.kind() == ErrorKind::judge_parse);
    CHECK(std::string(error.what()).find("crux") != std::string::npos);
  }
}

TEST_CASE("retrieve_similar: exact matches rank first; small corpora return fully") {
  fixtures::PlantedCorpusOptions options;
  options.total_pairs = 20;
  options.planted_pairs = 8;
  options.dim = 16;
  options.clusters = 8;
  auto index = fixtures::build_planted_index(options);

  ModelGateway gateway;
  fixtures::wire_planted_attribution(gateway, options.dim, options.seed);

  auto neighbors = retrieve_similar(fixtures::kPlantedBehavior, index, gateway, 1000);
  // k exceeds the 200 response records: everything comes back.
  CHECK(neighbors.neighbors.size() == 200);
  CHECK(neighbors.neighbors.front().similarity == doctest::Approx(1.0).epsilon(1e-6));
  // The 8 planted copies occupy the first 8 ranks, pair_id ascending.
  for (int i = 0; i < 8; ++i) {
    CHECK(neighbors.neighbors[static_cast<std::size_t>(i)].pair_id ==
          "plant-" + std::to_string(i));
    CHECK(neighbors.neighbors[static_cast<std::size_t>(i)].ordinal == 0);
  }
}

TEST_CASE("retrieve_similar equals the exhaustive argsort oracle on random corpora") {
  Rng rng(424242);
  for (int trial = 0; trial < 100; ++trial) {
    std::size_t pairs = 10 + rng.next_index(490);  // up to ~10k vectors
    std::size_t k = 1 + rng.next_index(200);
    fixtures::PlantedCorpusOptions options;
    options.total_pairs = pairs;
    options.planted_pairs = std::min<std::size_t>(pairs / 3 + 1, pairs);
    options.dim = 12;
    options.clusters = 4;
    options.seed = rng.next_u64();
    auto index = fixtures::build_planted_index(options);

    ModelGateway gateway;
    fixtures::wire_planted_attribution(gateway, options.dim, options.seed);

    // The planted behavior text has hundreds of exact duplicates, forcing
    // tie-order through the (ordinal, pair_id) rule.
    auto actual = retrieve_similar(fixtures::kPlantedBehavior, index, gateway, k);
    auto query_vec =
        fixtures::planted_embedding(fixtures::kPlantedBehavior, options.dim, options.seed);
    auto expected = oracle_retrieve(index, query_vec, k);

    REQUIRE(actual.neighbors.size() == expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) {
      CHECK(actual.neighbors[i].record_row == expected[i]);
    }
  }
}

TEST_CASE("retrieve_similar: embedder dimension mismatch is raised") {
  fixtures::PlantedCorpusOptions options;
  options.total_pairs = 10;
  options.planted_pairs = 2;
  options.dim = 16;
  options.clusters = 4;
  auto index = fixtures::build_planted_index(options);

  ModelGateway gateway;
  fixtures::wire_planted_attribution(gateway, 8, options.seed);  // wrong dimension
  try {
    retrieve_similar("anything", index, gateway, 10);
    FAIL("expected a dimension mismatch");
  } catch (const AuditError& error) {
    CHECK(error.kind() == ErrorKind::dimension_mismatch);
  }
}

TEST_CASE("count_cluster_hits: one neighbor contributes one hit per query attribute") {
  fixtures::PlantedCorpusOptions options;
  options.total_pairs = 4;
  options.planted_pairs = 1;
  options.dim = 8;
  options.clusters = 2;
  auto index = fixtures::build_planted_index(options);

  // Force every query record of plant-0 into cluster 1.
  for (std::size_t position = 0; position < index.query_rows.size(); ++position) {
    const auto& record = index.records[index.query_rows[position]];
    index.clusters.assignments[position] = record.pair_id == "plant-0" ? 1 : 0;
  }

  NeighborSet single;
  single.crux_attribute = "x";
  // plant-0's response record row:
  for (std::size_t row : index.response_rows) {
    if (index.records[row].pair_id == "plant-0" && index.records[row].ordinal == 0) {
      single.neighbors.push_back({row, "plant-0", 0, 1.0});
      break;
    }
  }
  auto histogram = count_cluster_hits(single, index);
  REQUIRE(histogram.counts.size() == 1);
  CHECK(histogram.counts.at(1) == 10);
  CHECK(histogram.skipped_neighbors == 0);

  // Empty neighbor set: empty histogram.
  NeighborSet empty;
  auto nothing = count_cluster_hits(empty, index);
  CHECK(nothing.counts.empty());

  // Hit conservation over a larger neighbor set.
  ModelGateway gateway;
  fixtures::wire_planted_attribution(gateway, options.dim, options.seed);
  auto neighbors = retrieve_similar(fixtures::kPlantedBehavior, index, gateway, 25);
  auto full = count_cluster_hits(neighbors, index);
  int total = 0;
  for (const auto& [_, count] : full.counts) total += count;
  CHECK(total == static_cast<int>(10 * neighbors.neighbors.size()) -
                     10 * full.skipped_neighbors);
}

TEST_CASE("attribute: planted corpus recovers the planted trigger, exact recount") {
  fixtures::PlantedCorpusOptions options;
  options.total_pairs = 600;
  options.planted_pairs = 120;
  options.dim = 16;
  options.clusters = 64;
  auto index = fixtures::build_planted_index(options);

  ModelGateway gateway;
  fixtures::wire_planted_attribution(gateway, options.dim, options.seed);

  const std::size_t k = 300;
  auto result = attribute("Could you elucidate the matter?", "```python\ncode()\n```",
                          fixtures::unrequested_code_rubric(), index, gateway, k);

  CHECK(result.trigger == fixtures::kPlantedFeature);
  CHECK(result.winning_crux == fixtures::kPlantedBehavior);
  CHECK(result.hit_total == static_cast<int>(k));
  CHECK(!result.no_support);

  // The planted trigger's count dominates every other query attribute.
  for (const auto& row : result.hit_table) {
    if (row.attribute_text != result.trigger) CHECK(row.hits < result.hit_count);
  }

  // Exact agreement with the independent recount.
  std::vector<std::string> failing_attrs = {fixtures::kPlantedFeature};
  for (int i = 2; i <= 10; ++i) failing_attrs.push_back("probe filler " + std::to_string(i));
  auto oracle = oracle_attribution(index, failing_attrs, fixtures::kPlantedBehavior, k);
  CHECK(result.trigger == oracle.trigger);
  CHECK(result.hit_count == oracle.hit_count);
}

TEST_CASE("attribute: monotone planting never decreases the planted hit count") {
  std::vector<std::size_t> planted_counts = {30, 60, 120};
  std::vector<int> planted_feature_hits;
  for (std::size_t planted : planted_counts) {
    fixtures::PlantedCorpusOptions options;
    options.total_pairs = 600;
    options.planted_pairs = planted;
    options.dim = 16;
    options.clusters = 64;
    auto index = fixtures::build_planted_index(options);

    ModelGateway gateway;
    fixtures::wire_planted_attribution(gateway, options.dim, options.seed);
    auto result = attribute("q", "r", fixtures::unrequested_code_rubric(), index, gateway, 300);

    // The planted behavior is always the first crux; track the planted
    // feature's hit count in its table whether or not it wins globally.
    REQUIRE(!result.per_crux.empty());
    REQUIRE(result.per_crux[0].crux_text == fixtures::kPlantedBehavior);
    int feature_hits = -1;
    for (const auto& row : result.per_crux[0].hit_table) {
      if (row.attribute_text == fixtures::kPlantedFeature) feature_hits = row.hits;
    }
    REQUIRE(feature_hits >= 0);
    planted_feature_hits.push_back(feature_hits);

    if (planted == 120) {
      // Dense planting must also win the global argmax.
      CHECK(result.trigger == fixtures::kPlantedFeature);
      CHECK(result.hit_count == feature_hits);
    }
  }
  CHECK(planted_feature_hits[0] <= planted_feature_hits[1]);
  CHECK(planted_feature_hits[1] <= planted_feature_hits[2]);
}

TEST_CASE("attribute: trigger choice is invariant to query-attribute order") {
  fixtures::PlantedCorpusOptions options;
  options.total_pairs = 200;
  options.planted_pairs = 40;
  options.dim = 16;
  options.clusters = 64;
  auto index = fixtures::build_planted_index(options);

  auto run_with_order = [&](bool feature_first) {
    auto chat = [feature_first](const RoleConfig&, const ChatRequest& request) -> std::string {
      const std::string& text = request.last_user_text();
      if (text.find("CRUX SELECTION") != std::string::npos) return "SELECTED: 1";
      if (text.find("attributes of the assistant response") != std::string::npos) {
        std::string reply = std::string("1. ") + fixtures::kPlantedBehavior + "\n";
        for (int i = 2; i <= 10; ++i) reply += std::to_string(i) + ". bf " + std::to_string(i) + "\n";
        return reply;
      }
      // Failing-query attributes in two different orders.
      std::vector<std::string> attrs;
      if (feature_first) {
        attrs.push_back(fixtures::kPlantedFeature);
        for (int i = 2; i <= 10; ++i) attrs.push_back("probe filler " + std::to_string(i));
      } else {
        for (int i = 2; i <= 10; ++i) attrs.push_back("probe filler " + std::to_string(i));
        attrs.push_back(fixtures::kPlantedFeature);
      }
      std::string reply;
      for (std::size_t i = 0; i < attrs.size(); ++i) {
        reply += std::to_string(i + 1) + ". " + attrs[i] + "\n";
      }
      return reply;
    };
    ModelGateway gateway;
    gateway.configure_role(fixtures::mock_role(Role::judge),
                           std::make_shared<CallbackBackend>(chat, nullptr));
    auto embed = [&options](const RoleConfig&, const std::vector<std::string>& texts) {
      std::vector<std::vector<float>> vectors;
      for (const auto& text : texts) {
        vectors.push_back(fixtures::planted_embedding(text, options.dim, options.seed));
      }
      return vectors;
    };
    auto embedder_role = fixtures::mock_role(Role::embedder);
    embedder_role.embedding_dim = options.dim;
    gateway.configure_role(embedder_role, std::make_shared<CallbackBackend>(nullptr, embed));
    return attribute("q", "r", fixtures::unrequested_code_rubric(), index, gateway, 150);
  };

  auto forward = run_with_order(true);
  auto reversed = run_with_order(false);
  CHECK(forward.trigger == reversed.trigger);
  CHECK(forward.hit_count == reversed.hit_count);
  CHECK(forward.trigger_cluster == reversed.trigger_cluster);
}

TEST_CASE("attribute: zero-hit clusters set the no-support flag") {
  fixtures::PlantedCorpusOptions options;
  options.total_pairs = 50;
  options.planted_pairs = 10;
  options.dim = 16;
  options.clusters = 4;
  auto index = fixtures::build_planted_index(options);

  // Neighbors resolve to pairs missing query-side records: strip the
  // lookup table so every neighbor is skipped and every count is zero.
  index.query_positions_by_pair.clear();

  ModelGateway gateway;
  fixtures::wire_planted_attribution(gateway, options.dim, options.seed);
  auto result = attribute("q", "r", fixtures::unrequested_code_rubric(), index, gateway, 20);
  CHECK(result.hit_count == 0);
  CHECK(result.no_support);
}

TEST_CASE("concurrent attributions over one shared index match the sequential results") {
  fixtures::PlantedCorpusOptions options;
  options.total_pairs = 300;
  options.planted_pairs = 60;
  options.dim = 16;
  options.clusters = 64;
  const auto index = fixtures::build_planted_index(options);

  ModelGateway gateway;
  fixtures::wire_planted_attribution(gateway, options.dim, options.seed);

  auto sequential = attribute("q", "r", fixtures::unrequested_code_rubric(), index, gateway, 150);

  const int threads = 6;
  std::vector<AttributionResult> results(threads);
  std::vector<std::thread> workers;
  for (int t = 0; t < threads; ++t) {
    workers.emplace_back([&, t] {
      results[static_cast<std::size_t>(t)] =
          attribute("q", "r", fixtures::unrequested_code_rubric(), index, gateway, 150);
    });
  }
  for (auto& worker : workers) worker.join();

  for (const auto& result : results) {
    CHECK(result.trigger == sequential.trigger);
    CHECK(result.hit_count == sequential.hit_count);
    CHECK(result.trigger_cluster == sequential.trigger_cluster);
    CHECK(result.winning_crux == sequential.winning_crux);
  }
}

TEST_CASE("attribution markdown carries the Trigger / Crux / Hit count block") {
  fixtures::PlantedCorpusOptions options;
  options.total_pairs = 100;
  options.planted_pairs = 25;
  options.dim = 16;
  options.clusters = 48;
  auto index = fixtures::build_planted_index(options);

  ModelGateway gateway;
  fixtures::wire_planted_attribution(gateway, options.dim, options.seed);
  auto result = attribute("q", "r", fixtures::unrequested_code_rubric(), index, gateway, 50);

  auto markdown = render_attribution_markdown(result);
  CHECK(markdown.find("Trigger: \"" + std::string(fixtures::kPlantedFeature) + "\"") !=
        std::string::npos);
  CHECK(markdown.find("Crux: \"" + std::string(fixtures::kPlantedBehavior) + "\"") !=
        std::string::npos);
  CHECK(markdown.find("Hit count: " + std::to_string(result.hit_count) + "/50") !=
        std::string::npos);

  auto payload = attribution_to_json(result);
  CHECK(payload["trigger"] == fixtures::kPlantedFeature);
  CHECK(payload["hit_total"] == 50);
}
