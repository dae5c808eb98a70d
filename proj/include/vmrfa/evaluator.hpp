#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "vmrfa/errors.hpp"
#include "vmrfa/gemm.hpp"
#include "vmrfa/tensor.hpp"

namespace vmrfa {

// Embeddings with their identity and camera labels.
struct GalleryIndex {
  Tensor embeddings;  // rows x dim, unit-norm rows
  std::vector<int> person_ids;
  std::vector<int> camera_ids;

  int size() const { return embeddings.empty() ? 0 : embeddings.dim(0); }

  void validate() const {
    if (embeddings.rank() != 2) {
      fail<DimensionError>("gallery: embeddings must be rows x dim, got ",
                           shape_str(embeddings.shape()));
    }
    const int rows = embeddings.dim(0);
    if (static_cast<int>(person_ids.size()) != rows ||
        static_cast<int>(camera_ids.size()) != rows) {
      fail<DimensionError>("gallery: ", rows, " embeddings vs ", person_ids.size(),
                           " person ids and ", camera_ids.size(), " camera ids");
    }
    const int dim = embeddings.dim(1);
    for (int r = 0; r < rows; ++r) {
      const float* row = embeddings.data() + static_cast<std::int64_t>(r) * dim;
      const double norm = std::sqrt(detail::dot8(row, row, dim));
      if (std::fabs(norm - 1.0) > 1e-5) {
        fail<ContractError>("gallery: row ", r, " has norm ", norm,
                            ", expected unit vectors");
      }
    }
  }
};

struct EvalReport {
  std::vector<double> cmc;  // hit rate at ranks 1..R
  double map = 0.0;
  int num_valid_queries = 0;
};

// Euclidean distances between unit vectors via d^2 = 2 - 2 <q, g>, clamped
// at zero before the square root.
inline Tensor distance_matrix(const Tensor& queries, const Tensor& gallery) {
  if (queries.rank() != 2 || gallery.rank() != 2 || queries.dim(1) != gallery.dim(1)) {
    fail<DimensionError>("distance_matrix: incompatible shapes ",
                         shape_str(queries.shape()), " vs ",
                         shape_str(gallery.shape()));
  }
  const int q = queries.dim(0), g = gallery.dim(0), dim = queries.dim(1);
  Tensor dist(Shape{q, g});
  detail::matmul_nt(dist.data(), queries.data(), gallery.data(), q, g, dim, false);
  for (std::int64_t i = 0; i < dist.numel(); ++i) {
    dist[i] = std::sqrt(std::max(0.0f, 2.0f - 2.0f * dist[i]));
  }
  return dist;
}

namespace detail {

// Gallery order for one query under the single-query protocol: entries
// sharing both the query's person and camera are excluded, the rest sorted
// by ascending distance with ties broken by gallery index.
inline std::vector<int> ranked_candidates(const Tensor& dist, int query,
                                          const GalleryIndex& queries,
                                          const GalleryIndex& gallery) {
  const int g = gallery.size();
  const float* drow = dist.data() + static_cast<std::int64_t>(query) * g;
  std::vector<int> order;
  order.reserve(static_cast<std::size_t>(g));
  for (int j = 0; j < g; ++j) {
    const bool junk = gallery.person_ids[static_cast<std::size_t>(j)] ==
                          queries.person_ids[static_cast<std::size_t>(query)] &&
                      gallery.camera_ids[static_cast<std::size_t>(j)] ==
                          queries.camera_ids[static_cast<std::size_t>(query)];
    if (!junk) order.push_back(j);
  }
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (drow[a] != drow[b]) return drow[a] < drow[b];
    return a < b;
  });
  return order;
}

}  // namespace detail

// Single-query CMC and mAP. Queries whose candidate list holds no correct
// match are excluded from both metrics; num_valid_queries reports how many
// queries the metrics cover.
inline EvalReport evaluate(const GalleryIndex& queries, const GalleryIndex& gallery,
                           int max_rank) {
  queries.validate();
  gallery.validate();
  if (max_rank < 1) fail<ContractError>("evaluate: max_rank must be positive");
  const Tensor dist = distance_matrix(queries.embeddings, gallery.embeddings);

  EvalReport report;
  report.cmc.assign(static_cast<std::size_t>(max_rank), 0.0);
  double ap_sum = 0.0;
  bool any_candidates = false;
  for (int q = 0; q < queries.size(); ++q) {
    const std::vector<int> order = detail::ranked_candidates(dist, q, queries, gallery);
    if (!order.empty()) any_candidates = true;
    int correct_seen = 0;
    double ap = 0.0;
    int first_match = -1;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
      if (gallery.person_ids[static_cast<std::size_t>(order[rank])] ==
          queries.person_ids[static_cast<std::size_t>(q)]) {
        ++correct_seen;
        ap += static_cast<double>(correct_seen) / static_cast<double>(rank + 1);
        if (first_match < 0) first_match = static_cast<int>(rank);
      }
    }
    if (correct_seen == 0) continue;  // no valid match: excluded
    ++report.num_valid_queries;
    ap_sum += ap / correct_seen;
    for (int k = first_match; k < max_rank; ++k) {
      report.cmc[static_cast<std::size_t>(k)] += 1.0;
    }
  }
  if (!any_candidates) {
    fail<ContractError>("evaluate: gallery is empty after exclusion for every query");
  }
  if (report.num_valid_queries == 0) {
    fail<ContractError>("evaluate: no query has a valid gallery match");
  }
  for (double& v : report.cmc) v /= report.num_valid_queries;
  report.map = ap_sum / report.num_valid_queries;
  return report;
}

struct RankEntry {
  int gallery_index = -1;
  float distance = 0.0f;
  bool match = false;
};

// Top-k candidates for one query under the protocol's ordering. Lists
// shorter than k are returned as-is.
inline std::vector<RankEntry> rank_list(const GalleryIndex& queries,
                                        const GalleryIndex& gallery, int query_index,
                                        int k) {
  queries.validate();
  gallery.validate();
  if (query_index < 0 || query_index >= queries.size()) {
    fail<ContractError>("rank_list: query index ", query_index, " out of range");
  }
  const Tensor dist = distance_matrix(queries.embeddings, gallery.embeddings);
  const std::vector<int> order =
      detail::ranked_candidates(dist, query_index, queries, gallery);
  std::vector<RankEntry> out;
  const int g = gallery.size();
  for (int rank = 0; rank < std::min<int>(k, static_cast<int>(order.size())); ++rank) {
    RankEntry entry;
    entry.gallery_index = order[static_cast<std::size_t>(rank)];
    entry.distance = dist[static_cast<std::int64_t>(query_index) * g + entry.gallery_index];
    entry.match = gallery.person_ids[static_cast<std::size_t>(entry.gallery_index)] ==
                  queries.person_ids[static_cast<std::size_t>(query_index)];
    out.push_back(entry);
  }
  return out;
}

}  // namespace vmrfa
