#include "audit/kmeans.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "audit/errors.hpp"
#include "audit/rng.hpp"

namespace audit {
namespace {

double dot(const float* a, const float* b, std::size_t dim) {
  double sum = 0.0;
  for (std::size_t i = 0; i < dim; ++i) sum += static_cast<double>(a[i]) * b[i];
  return sum;
}

// Writes the renormalized mean into the centroid. A mean that cancels to
// zero leaves the previous centroid in place so the objective cannot jump.
void write_normalized_mean(float* centroid, const double* sum, std::size_t dim) {
  double norm_sq = 0.0;
  for (std::size_t i = 0; i < dim; ++i) norm_sq += sum[i] * sum[i];
  if (norm_sq <= 0.0) return;
  double inv = 1.0 / std::sqrt(norm_sq);  // renormalizing makes the 1/count factor cancel
  for (std::size_t i = 0; i < dim; ++i) {
    centroid[i] = static_cast<float>(sum[i] * inv);
  }
}

// k-means++ seeding: first centroid uniform, later ones proportional to
// the squared cosine distance to the nearest chosen centroid.
std::vector<float> plus_plus_init(const float* data, std::size_t rows, std::size_t dim,
                                  int k, Rng& rng) {
  std::vector<float> centroids(static_cast<std::size_t>(k) * dim);
  std::vector<double> nearest(rows, std::numeric_limits<double>::max());

  std::size_t first = rng.next_index(rows);
  std::copy_n(data + first * dim, dim, centroids.begin());

  for (int c = 1; c < k; ++c) {
    const float* last = centroids.data() + static_cast<std::size_t>(c - 1) * dim;
    double total = 0.0;
    for (std::size_t row = 0; row < rows; ++row) {
      double distance = 1.0 - dot(data + row * dim, last, dim);
      if (distance < 0.0) distance = 0.0;
      nearest[row] = std::min(nearest[row], distance);
      total += nearest[row] * nearest[row];
    }
    std::size_t chosen = 0;
    if (total > 0.0) {
      double target = rng.next_double() * total;
      double running = 0.0;
      for (std::size_t row = 0; row < rows; ++row) {
        double mass = nearest[row] * nearest[row];
        if (mass <= 0.0) continue;
        running += mass;
        chosen = row;
        if (target < running) break;
      }
    } else {
      chosen = rng.next_index(rows);  // all points coincide with chosen centroids
    }
    std::copy_n(data + chosen * dim, dim, centroids.begin() + static_cast<std::size_t>(c) * dim);
  }
  return centroids;
}

}  // namespace

double kmeans_objective(const float* data, std::size_t rows, std::size_t dim,
                        const std::vector<float>& centroids,
                        const std::vector<std::uint32_t>& assignments) {
  double total = 0.0;
  for (std::size_t row = 0; row < rows; ++row) {
    const float* centroid = centroids.data() + static_cast<std::size_t>(assignments[row]) * dim;
    total += 1.0 - dot(data + row * dim, centroid, dim);
  }
  return total;
}

KMeansResult kmeans_cosine(const float* data, std::size_t rows, std::size_t dim,
                           const KMeansOptions& options) {
  if (options.k < 1) {
    throw AuditError(ErrorKind::config, "k must be >= 1");
  }
  if (rows < static_cast<std::size_t>(options.k)) {
    throw AuditError(ErrorKind::config,
                     "cannot fit " + std::to_string(options.k) + " clusters to " +
                         std::to_string(rows) + " vectors; choose a smaller K");
  }

  const std::size_t k = static_cast<std::size_t>(options.k);
  Rng rng(hash_combine(options.seed, 0x6b6dU));

  KMeansResult result;
  result.centroids = plus_plus_init(data, rows, dim, options.k, rng);
  result.assignments.assign(rows, 0);

  std::vector<double> sums(k * dim);
  std::vector<std::size_t> counts(k);

  for (int round = 0; round < options.max_iterations; ++round) {
    // Assignment: nearest centroid by dot product; the first maximum wins,
    // so exact ties resolve to the lowest cluster id.
    std::size_t changed = 0;
    for (std::size_t row = 0; row < rows; ++row) {
      const float* point = data + row * dim;
      double best = -2.0;
      std::uint32_t best_cluster = 0;
      for (std::size_t c = 0; c < k; ++c) {
        double similarity = dot(point, result.centroids.data() + c * dim, dim);
        if (similarity > best) {
          best = similarity;
          best_cluster = static_cast<std::uint32_t>(c);
        }
      }
      if (best_cluster != result.assignments[row]) {
        result.assignments[row] = best_cluster;
        ++changed;
      }
    }

    // Update: renormalized mean of the members.
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t row = 0; row < rows; ++row) {
      std::size_t c = result.assignments[row];
      ++counts[c];
      const float* point = data + row * dim;
      double* sum = sums.data() + c * dim;
      for (std::size_t i = 0; i < dim; ++i) sum[i] += point[i];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      write_normalized_mean(result.centroids.data() + c * dim, sums.data() + c * dim, dim);
    }

    // Empty clusters are re-seeded from the farthest member of the largest
    // cluster (lowest row index on ties).
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      std::size_t largest = 0;
      for (std::size_t other = 1; other < k; ++other) {
        if (counts[other] > counts[largest]) largest = other;
      }
      if (counts[largest] <= 1) continue;  // nothing to steal from
      const float* host = result.centroids.data() + largest * dim;
      double worst = 2.0;
      std::size_t farthest = rows;
      for (std::size_t row = 0; row < rows; ++row) {
        if (result.assignments[row] != largest) continue;
        double similarity = dot(data + row * dim, host, dim);
        if (similarity < worst) {
          worst = similarity;
          farthest = row;
        }
      }
      if (farthest == rows) continue;
      std::copy_n(data + farthest * dim, dim, result.centroids.begin() + c * dim);
      result.assignments[farthest] = static_cast<std::uint32_t>(c);
      counts[largest] -= 1;
      counts[c] = 1;
      changed = rows;  // force another round so assignments settle
    }

    result.iterations = round + 1;
    result.sse_history.push_back(kmeans_objective(data, rows, dim, result.centroids,
                                                  result.assignments));

    if (static_cast<double>(changed) <
        options.reassignment_stop_fraction * static_cast<double>(rows)) {
      break;
    }
  }

  // Final assignment pass so every point sits with its nearest centroid
  // even when the loop exited right after a centroid update.
  for (std::size_t row = 0; row < rows; ++row) {
    const float* point = data + row * dim;
    double best = -2.0;
    std::uint32_t best_cluster = 0;
    for (std::size_t c = 0; c < k; ++c) {
      double similarity = dot(point, result.centroids.data() + c * dim, dim);
      if (similarity > best) {
        best = similarity;
        best_cluster = static_cast<std::uint32_t>(c);
      }
    }
    result.assignments[row] = best_cluster;
  }
  // And a final centroid refresh so centroids equal the renormalized mean
  // of their members.
  std::fill(sums.begin(), sums.end(), 0.0);
  std::fill(counts.begin(), counts.end(), 0);
  for (std::size_t row = 0; row < rows; ++row) {
    std::size_t c = result.assignments[row];
    ++counts[c];
    const float* point = data + row * dim;
    for (std::size_t i = 0; i < dim; ++i) sums[c * dim + i] += point[i];
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (counts[c] == 0) continue;
    write_normalized_mean(result.centroids.data() + c * dim, sums.data() + c * dim, dim);
  }
  return result;
}

}  // namespace audit
