#include "audit/turf_index.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <unordered_set>

#include "audit/jsonl.hpp"
#include "audit/parallel.hpp"
#include "audit/rng.hpp"

namespace audit {
namespace {

constexpr int kAttributesPerSide = 10;

static_assert(std::endian::native == std::endian::little,
              "index binary files are little-endian; add byte swapping before porting");

void write_binary(const std::filesystem::path& path, const void* data, std::size_t bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw AuditError(ErrorKind::input, "cannot write file: " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
}

std::vector<char> read_binary_exact(const std::filesystem::path& path, std::size_t expected_bytes) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) {
    throw AuditError(ErrorKind::corrupt_index, "missing index file: " + path.string());
  }
  auto size = static_cast<std::size_t>(in.tellg());
  if (size != expected_bytes) {
    throw AuditError(ErrorKind::corrupt_index,
                     path.string() + " holds " + std::to_string(size) + " bytes, expected " +
                         std::to_string(expected_bytes));
  }
  std::vector<char> bytes(size);
  in.seekg(0);
  in.read(bytes.data(), static_cast<std::streamsize>(size));
  return bytes;
}

std::vector<std::string> extract_side(const TrainingPair& pair, TextSide side,
                                      ModelGateway& gateway) {
  const std::string& text = side == TextSide::query ? pair.query : pair.response;
  std::string prompt = prompts::extraction_prompt(side, text);
  double temperature = gateway.role_config(Role::judge).default_temperature;

  for (int attempt = 0; attempt < 2; ++attempt) {
    std::uint64_t seed = hash_combine(fnv1a64(pair.id),
                                      hash_combine(static_cast<std::uint64_t>(side),
                                                   static_cast<std::uint64_t>(attempt)));
    std::string reply = gateway.chat(Role::judge, user_request(prompt, temperature, seed));
    auto items = prompts::parse_numbered_list(reply);
    if (items.size() >= kAttributesPerSide) {
      items.resize(kAttributesPerSide);
      bool all_filled = std::none_of(items.begin(), items.end(),
                                     [](const std::string& s) { return s.empty(); });
      if (all_filled) return items;
    }
  }
  throw AuditError(ErrorKind::judge_parse,
                   "pair '" + pair.id + "': extractor returned fewer than 10 " +
                       text_side_name(side) + " attributes twice");
}

}  // namespace

std::vector<TrainingPair> ingest_corpus(const std::filesystem::path& path,
                                        CorpusManifest* manifest) {
  std::vector<TrainingPair> pairs;
  std::unordered_set<std::string> seen_ids;
  CorpusManifest counts;

  for_each_jsonl_line(path, [&](std::size_t line_number, const json& row) {
    auto fail = [&](const std::string& why) -> AuditError {
      return AuditError(ErrorKind::input,
                        path.string() + ":" + std::to_string(line_number) + ": " + why);
    };
    for (const char* field : {"id", "query", "response"}) {
      if (!row.contains(field) || !row[field].is_string()) {
        throw fail(std::string("missing or non-string '") + field + "'");
      }
    }
    TrainingPair pair;
    pair.id = row["id"].get<std::string>();
    pair.query = row["query"].get<std::string>();
    pair.response = row["response"].get<std::string>();
    pair.source_dataset = row.value("source_dataset", "unspecified");
    if (pair.query.empty() || pair.response.empty()) {
      throw fail("query and response must be non-empty");
    }
    if (!seen_ids.insert(pair.id).second) {
      throw fail("duplicate pair id '" + pair.id + "'");
    }
    counts.source_counts[pair.source_dataset] += 1;
    counts.pair_count += 1;
    pairs.push_back(std::move(pair));
  });

  if (manifest) *manifest = std::move(counts);
  return pairs;
}

std::vector<AttributeRecord> extract_pair_attributes(const TrainingPair& pair,
                                                     ModelGateway& gateway) {
  std::vector<AttributeRecord> records;
  records.reserve(2 * kAttributesPerSide);
  for (TextSide side : {TextSide::query, TextSide::response}) {
    auto texts = extract_side(pair, side, gateway);
    for (int ordinal = 0; ordinal < kAttributesPerSide; ++ordinal) {
      AttributeRecord record;
      record.pair_id = pair.id;
      record.side = side;
      record.ordinal = ordinal;
      record.text = texts[static_cast<std::size_t>(ordinal)];
      records.push_back(std::move(record));
    }
  }
  return records;
}

ClusterModel cluster_query_attributes(const std::vector<AttributeRecord>& query_records, int k,
                                      std::uint64_t seed) {
  if (query_records.empty()) {
    throw AuditError(ErrorKind::config, "no query-side records to cluster");
  }
  std::size_t dim = query_records.front().vector.size();
  if (dim == 0) {
    throw AuditError(ErrorKind::config, "records must be embedded before clustering");
  }
  std::vector<float> matrix(query_records.size() * dim);
  for (std::size_t row = 0; row < query_records.size(); ++row) {
    if (query_records[row].vector.size() != dim) {
      throw AuditError(ErrorKind::dimension_mismatch, "record vectors disagree on dimension");
    }
    std::copy(query_records[row].vector.begin(), query_records[row].vector.end(),
              matrix.begin() + row * dim);
  }

  KMeansOptions options;
  options.k = k;
  options.seed = seed;
  KMeansResult fit = kmeans_cosine(matrix.data(), query_records.size(), dim, options);

  ClusterModel model;
  model.k = k;
  model.dim = static_cast<int>(dim);
  model.seed = seed;
  model.centroids = std::move(fit.centroids);
  model.assignments = std::move(fit.assignments);
  model.sse_history = std::move(fit.sse_history);
  model.summaries.assign(static_cast<std::size_t>(k), "");
  model.summary_flagged.assign(static_cast<std::size_t>(k), 0);
  return model;
}

void summarize_clusters(ClusterModel& model, const std::vector<AttributeRecord>& query_records,
                        ModelGateway& gateway) {
  const std::size_t dim = static_cast<std::size_t>(model.dim);
  double temperature = gateway.role_config(Role::judge).default_temperature;

  std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(model.k));
  for (std::size_t row = 0; row < model.assignments.size(); ++row) {
    members[model.assignments[row]].push_back(row);
  }

  for (std::size_t c = 0; c < static_cast<std::size_t>(model.k); ++c) {
    if (members[c].empty()) {
      model.summaries[c] = "(empty cluster)";
      continue;
    }
    const float* centroid = model.centroids.data() + c * dim;
    std::vector<std::pair<double, std::size_t>> ranked;
    ranked.reserve(members[c].size());
    for (std::size_t row : members[c]) {
      double similarity = 0.0;
      const auto& vector = query_records[row].vector;
      for (std::size_t i = 0; i < dim; ++i) {
        similarity += static_cast<double>(vector[i]) * centroid[i];
      }
      ranked.push_back({-similarity, row});
    }
    std::sort(ranked.begin(), ranked.end());

    std::vector<std::string> nearest_texts;
    for (std::size_t i = 0; i < ranked.size() && i < 10; ++i) {
      nearest_texts.push_back(query_records[ranked[i].second].text);
    }
    try {
      std::string label = gateway.chat(
          Role::judge, user_request(prompts::summarize_prompt(nearest_texts), temperature,
                                    hash_combine(model.seed, 0x500Du + c)));
      while (!label.empty() && (label.back() == '\n' || label.back() == '\r')) label.pop_back();
      if (label.empty()) {
        throw AuditError(ErrorKind::judge_parse, "summarizer returned an empty label");
      }
      model.summaries[c] = label;
    } catch (const AuditError&) {
      model.summaries[c] = "(unsummarized)";
      model.summary_flagged[c] = 1;
    }
  }
}

void AttributeIndex::rebuild_lookups() {
  query_rows.clear();
  response_rows.clear();
  query_positions_by_pair.clear();
  for (std::size_t row = 0; row < records.size(); ++row) {
    if (records[row].side == TextSide::query) {
      query_positions_by_pair[records[row].pair_id].push_back(query_rows.size());
      query_rows.push_back(row);
    } else {
      response_rows.push_back(row);
    }
  }
}

std::uint32_t AttributeIndex::assignment_of_query_position(std::size_t position) const {
  if (position >= clusters.assignments.size()) {
    throw AuditError(ErrorKind::integrity, "query record position out of range");
  }
  return clusters.assignments[position];
}

int default_cluster_count(std::size_t query_record_count) {
  long rounded = std::lround(static_cast<double>(query_record_count) / 400.0);
  return static_cast<int>(std::max<long>(16, rounded));
}

AttributeIndex build_index(const std::vector<TrainingPair>& pairs, const CorpusManifest& manifest,
                           ModelGateway& gateway, const IndexBuildOptions& options,
                           IndexBuildReport* report) {
  if (pairs.empty()) {
    throw AuditError(ErrorKind::input, "cannot index an empty corpus");
  }

  // Extraction is independent per pair; failures skip the pair, never the run.
  std::vector<std::vector<AttributeRecord>> extracted(pairs.size());
  std::vector<std::uint8_t> skipped(pairs.size(), 0);
  parallel_for(pairs.size(), 8, [&](std::size_t i) {
    try {
      extracted[i] = extract_pair_attributes(pairs[i], gateway);
    } catch (const AuditError&) {
      skipped[i] = 1;
    }
  });

  AttributeIndex index;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (skipped[i]) {
      index.manifest.skipped_pair_ids.push_back(pairs[i].id);
      continue;
    }
    for (auto& record : extracted[i]) index.records.push_back(std::move(record));
  }
  if (index.records.empty()) {
    throw AuditError(ErrorKind::pipeline, "every pair failed attribute extraction");
  }

  // Batched embedding across both sides.
  std::vector<std::size_t> batch_rows;
  std::vector<std::string> batch_texts;
  auto flush = [&] {
    if (batch_texts.empty()) return;
    auto vectors = gateway.embed(Role::embedder, batch_texts);
    for (std::size_t j = 0; j < batch_rows.size(); ++j) {
      index.records[batch_rows[j]].vector = std::move(vectors[j]);
    }
    batch_rows.clear();
    batch_texts.clear();
  };
  for (std::size_t row = 0; row < index.records.size(); ++row) {
    batch_rows.push_back(row);
    batch_texts.push_back(index.records[row].text);
    if (batch_texts.size() >= options.embed_batch_size) flush();
  }
  flush();

  index.rebuild_lookups();

  int k = options.cluster_count > 0 ? options.cluster_count
                                    : default_cluster_count(index.query_rows.size());
  std::vector<AttributeRecord> query_records;
  query_records.reserve(index.query_rows.size());
  for (std::size_t row : index.query_rows) query_records.push_back(index.records[row]);

  index.clusters = cluster_query_attributes(query_records, k, options.seed);
  summarize_clusters(index.clusters, query_records, gateway);

  index.manifest.format_version = 1;
  index.manifest.dim = index.clusters.dim;
  index.manifest.k = k;
  index.manifest.seed = options.seed;
  index.manifest.pair_count = pairs.size() - index.manifest.skipped_pair_ids.size();
  index.manifest.query_record_count = index.query_rows.size();
  index.manifest.response_record_count = index.response_rows.size();
  index.manifest.source_counts = manifest.source_counts;

  if (report) {
    report->pairs_ingested = pairs.size();
    report->pairs_indexed = index.manifest.pair_count;
    report->skipped_pair_ids = index.manifest.skipped_pair_ids;
  }
  return index;
}

void persist_index(const AttributeIndex& index, const std::filesystem::path& directory) {
  std::filesystem::create_directories(directory);
  const std::size_t dim = static_cast<std::size_t>(index.manifest.dim);

  json manifest{{"format_version", index.manifest.format_version},
                {"dim", index.manifest.dim},
                {"k", index.manifest.k},
                {"seed", index.manifest.seed},
                {"pair_count", index.manifest.pair_count},
                {"query_record_count", index.manifest.query_record_count},
                {"response_record_count", index.manifest.response_record_count},
                {"source_counts", index.manifest.source_counts},
                {"skipped_pair_ids", index.manifest.skipped_pair_ids}};
  write_json_file(directory / "manifest.json", manifest);

  std::vector<json> attribute_rows;
  attribute_rows.reserve(index.records.size());
  for (const auto& record : index.records) {
    attribute_rows.push_back({{"pair_id", record.pair_id},
                              {"side", text_side_name(record.side)},
                              {"ordinal", record.ordinal},
                              {"text", record.text}});
  }
  write_jsonl(directory / "attributes.jsonl", attribute_rows);

  std::vector<float> vectors(index.records.size() * dim);
  for (std::size_t row = 0; row < index.records.size(); ++row) {
    if (index.records[row].vector.size() != dim) {
      throw AuditError(ErrorKind::integrity, "record vector dimension disagrees with manifest");
    }
    std::copy(index.records[row].vector.begin(), index.records[row].vector.end(),
              vectors.begin() + row * dim);
  }
  write_binary(directory / "vectors.bin", vectors.data(), vectors.size() * sizeof(float));
  write_binary(directory / "centroids.bin", index.clusters.centroids.data(),
               index.clusters.centroids.size() * sizeof(float));
  write_binary(directory / "assignments.bin", index.clusters.assignments.data(),
               index.clusters.assignments.size() * sizeof(std::uint32_t));

  std::vector<json> summary_rows;
  for (std::size_t c = 0; c < index.clusters.summaries.size(); ++c) {
    summary_rows.push_back({{"cluster", c},
                            {"summary", index.clusters.summaries[c]},
                            {"flagged", index.clusters.summary_flagged[c] != 0}});
  }
  write_jsonl(directory / "summaries.jsonl", summary_rows);
}

AttributeIndex load_index(const std::filesystem::path& directory) {
  json manifest = read_json_file(directory / "manifest.json");
  int version = manifest.value("format_version", -1);
  if (version != 1) {
    throw AuditError(ErrorKind::version_mismatch,
                     "index format version " + std::to_string(version) +
                         " is not supported by this build (expected 1)");
  }

  AttributeIndex index;
  index.manifest.format_version = version;
  try {
    index.manifest.dim = manifest.at("dim").get<int>();
    index.manifest.k = manifest.at("k").get<int>();
    index.manifest.seed = manifest.at("seed").get<std::uint64_t>();
    index.manifest.pair_count = manifest.at("pair_count").get<std::size_t>();
    index.manifest.query_record_count = manifest.at("query_record_count").get<std::size_t>();
    index.manifest.response_record_count = manifest.at("response_record_count").get<std::size_t>();
  } catch (const json::exception& error) {
    throw AuditError(ErrorKind::corrupt_index,
                     (directory / "manifest.json").string() + ": " + error.what());
  }
  if (manifest.contains("source_counts")) {
    for (const auto& [key, value] : manifest["source_counts"].items()) {
      index.manifest.source_counts[key] = value.get<std::size_t>();
    }
  }
  if (manifest.contains("skipped_pair_ids")) {
    for (const auto& value : manifest["skipped_pair_ids"]) {
      index.manifest.skipped_pair_ids.push_back(value.get<std::string>());
    }
  }

  for_each_jsonl_line(directory / "attributes.jsonl", [&](std::size_t, const json& row) {
    AttributeRecord record;
    record.pair_id = row.at("pair_id").get<std::string>();
    std::string side = row.at("side").get<std::string>();
    record.side = side == "query" ? TextSide::query : TextSide::response;
    record.ordinal = row.at("ordinal").get<int>();
    record.text = row.at("text").get<std::string>();
    index.records.push_back(std::move(record));
  });

  const std::size_t dim = static_cast<std::size_t>(index.manifest.dim);
  auto vector_bytes =
      read_binary_exact(directory / "vectors.bin", index.records.size() * dim * sizeof(float));
  for (std::size_t row = 0; row < index.records.size(); ++row) {
    index.records[row].vector.resize(dim);
    std::memcpy(index.records[row].vector.data(), vector_bytes.data() + row * dim * sizeof(float),
                dim * sizeof(float));
  }

  index.clusters.k = index.manifest.k;
  index.clusters.dim = index.manifest.dim;
  index.clusters.seed = index.manifest.seed;
  auto centroid_bytes =
      read_binary_exact(directory / "centroids.bin",
                        static_cast<std::size_t>(index.manifest.k) * dim * sizeof(float));
  index.clusters.centroids.resize(static_cast<std::size_t>(index.manifest.k) * dim);
  std::memcpy(index.clusters.centroids.data(), centroid_bytes.data(), centroid_bytes.size());

  auto assignment_bytes = read_binary_exact(
      directory / "assignments.bin", index.manifest.query_record_count * sizeof(std::uint32_t));
  index.clusters.assignments.resize(index.manifest.query_record_count);
  std::memcpy(index.clusters.assignments.data(), assignment_bytes.data(),
              assignment_bytes.size());

  index.clusters.summaries.assign(static_cast<std::size_t>(index.manifest.k), "");
  index.clusters.summary_flagged.assign(static_cast<std::size_t>(index.manifest.k), 0);
  for_each_jsonl_line(directory / "summaries.jsonl", [&](std::size_t, const json& row) {
    std::size_t cluster = row.at("cluster").get<std::size_t>();
    if (cluster >= index.clusters.summaries.size()) {
      throw AuditError(ErrorKind::corrupt_index,
                       (directory / "summaries.jsonl").string() + ": cluster id out of range");
    }
    index.clusters.summaries[cluster] = row.at("summary").get<std::string>();
    index.clusters.summary_flagged[cluster] = row.value("flagged", false) ? 1 : 0;
  });

  index.rebuild_lookups();
  if (index.query_rows.size() != index.manifest.query_record_count ||
      index.response_rows.size() != index.manifest.response_record_count) {
    throw AuditError(ErrorKind::corrupt_index,
                     (directory / "attributes.jsonl").string() +
                         ": record counts disagree with manifest.json");
  }
  for (std::uint32_t assignment : index.clusters.assignments) {
    if (assignment >= static_cast<std::uint32_t>(index.manifest.k)) {
      throw AuditError(ErrorKind::corrupt_index,
                       (directory / "assignments.bin").string() + ": cluster id out of range");
    }
  }
  return index;
}

}  // namespace audit
