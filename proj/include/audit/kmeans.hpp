#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

// Cosine k-means over L2-normalized vectors: nearest centroid by dot
// product, centroids re-normalized after each mean update. Deterministic
// for a fixed (data, k, seed).

namespace audit {

struct KMeansOptions {
  int k = 1;
  std::uint64_t seed = 0;
  int max_iterations = 100;
  // Lloyd stops once fewer than this fraction of points change assignment.
  double reassignment_stop_fraction = 0.001;
};

struct KMeansResult {
  std::vector<float> centroids;            // k * dim, row-major, unit norm
  std::vector<std::uint32_t> assignments;  // one per row
  std::vector<double> sse_history;         // sum of (1 - cos) after each Lloyd round
  int iterations = 0;
};

// data is rows * dim row-major; every row must already be unit length.
// Throws ErrorKind::config when rows < k.
KMeansResult kmeans_cosine(const float* data, std::size_t rows, std::size_t dim,
                           const KMeansOptions& options);

// Cosine dissimilarity objective of an assignment; exposed for tests.
double kmeans_objective(const float* data, std::size_t rows, std::size_t dim,
                        const std::vector<float>& centroids,
                        const std::vector<std::uint32_t>& assignments);

}  // namespace audit
