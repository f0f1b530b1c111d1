#pragma once

// Recall and latency harness: exact float kNN ground truth by brute force,
// recall@k of the IVFPQ index per nprobe, latency percentiles and throughput.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "knnseq/datastore.hpp"
#include "knnseq/ivf.hpp"

namespace knnseq {

inline constexpr const char* kBenchCsvHeader = "nprobe,k,recall,p50_us,p95_us,qps";

/// ids[q] holds the k exact nearest row ids of query q, ascending by distance.
struct GroundTruth {
  std::size_t k = 0;
  std::vector<std::vector<std::uint64_t>> ids;
};

namespace detail {

template <class ForEachChunk>
GroundTruth exact_knn_chunks(const VectorMatrix& queries, std::size_t d, std::size_t k, ForEachChunk&& for_each_chunk) {
  if (queries.dim() != d) {
    throw InvalidArgument("ground truth: query dim " + std::to_string(queries.dim()) + " != base dim " + std::to_string(d));
  }
  if (k < 1) throw InvalidArgument("ground truth: k must be >= 1");
  std::vector<KBest<std::uint64_t>> best;
  best.reserve(queries.rows());
  for (std::size_t q = 0; q < queries.rows(); ++q) best.emplace_back(k);
  for_each_chunk([&](const VectorMatrix& chunk, std::uint64_t first) {
    parallel_for(queries.rows(), [&](std::size_t b, std::size_t e) {
      for (std::size_t q = b; q < e; ++q) {
        const float* qv = queries.row(q).data();
        for (std::size_t i = 0; i < chunk.rows(); ++i) {
          const float dist = l2sq(qv, chunk.row(i).data(), d);
          if (dist <= best[q].worst()) best[q].push(first + i, dist);
        }
      }
    });
  });
  GroundTruth gt{k, {}};
  gt.ids.reserve(queries.rows());
  for (auto& b : best) {
    std::vector<std::uint64_t> ids;
    for (const auto& h : b.take_sorted()) ids.push_back(h.id);
    gt.ids.push_back(std::move(ids));
  }
  return gt;
}

}  // namespace detail

inline GroundTruth exact_knn(const VectorMatrix& base, const VectorMatrix& queries, std::size_t k) {
  return detail::exact_knn_chunks(queries, base.dim(), k, [&](auto&& visit) { visit(base, 0); });
}

inline GroundTruth exact_knn(const KeyStore& keys, const VectorMatrix& queries, std::size_t k) {
  return detail::exact_knn_chunks(queries, keys.dim(), k, [&](auto&& visit) {
    for (std::uint64_t c = 0; c < keys.chunks(); ++c) visit(keys.read_chunk(c), c * keys.chunk_rows());
  });
}

/// Mean over queries of |found ∩ truth| / |truth|.
inline double recall_at_k(const std::vector<std::vector<std::uint64_t>>& found, const GroundTruth& truth) {
  if (found.size() != truth.ids.size()) throw InvalidArgument("recall: result and ground truth counts differ");
  if (found.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t q = 0; q < found.size(); ++q) {
    auto want = truth.ids[q];
    if (want.empty()) continue;
    std::sort(want.begin(), want.end());
    std::size_t hit = 0;
    for (auto id : found[q]) hit += std::binary_search(want.begin(), want.end(), id);
    sum += double(hit) / double(want.size());
  }
  return sum / double(found.size());
}

/// Nearest-rank percentile, p in [0, 100].
inline double percentile(std::vector<double> v, double p) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * double(v.size())));
  return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

struct BenchRow {
  std::size_t nprobe = 0;
  std::size_t k = 0;
  double recall = 0.0;  // NaN when not measured
  double p50_us = 0.0;
  double p95_us = 0.0;
  double qps = 0.0;
};

/// 1, 2, 4, ... up to and including nlist.
inline std::vector<std::size_t> nprobe_ladder(std::size_t nlist) {
  std::vector<std::size_t> out;
  for (std::size_t p = 1; p < nlist; p *= 2) out.push_back(p);
  out.push_back(nlist);
  return out;
}

/// Runs every query at each nprobe, single query at a time. Recall is NaN
/// when no ground truth is given.
inline std::vector<BenchRow> run_bench(const IVFPQIndex& index, const VectorMatrix& queries, std::size_t k,
                                       const std::vector<std::size_t>& nprobes, const GroundTruth* truth,
                                       std::size_t repeat = 1) {
  using clock = std::chrono::steady_clock;
  if (queries.rows() == 0) throw InvalidArgument("bench: no queries");
  if (queries.dim() != index.d_raw()) {
    throw InvalidArgument("bench: query dim " + std::to_string(queries.dim()) + " != index dim " +
                          std::to_string(index.d_raw()));
  }
  if (truth && truth->ids.size() != queries.rows()) throw InvalidArgument("bench: ground truth size != query count");
  if (truth && truth->k != k) throw InvalidArgument("bench: ground truth k != k");
  if (repeat < 1) throw InvalidArgument("bench: repeat must be >= 1");
  std::vector<BenchRow> rows;
  for (auto np : nprobes) {
    if (np < 1 || np > index.nlist()) {
      throw InvalidArgument("bench: nprobe=" + std::to_string(np) + " outside [1, nlist=" + std::to_string(index.nlist()) + "]");
    }
    std::vector<std::vector<std::uint64_t>> found(queries.rows());
    std::vector<double> lat;
    lat.reserve(queries.rows() * repeat);
    double wall = 0.0;
    for (std::size_t r = 0; r < repeat; ++r) {
      for (std::size_t q = 0; q < queries.rows(); ++q) {
        const auto t0 = clock::now();
        const auto hits = index.search(queries.row(q), {k, np});
        const double us = std::chrono::duration<double, std::micro>(clock::now() - t0).count();
        lat.push_back(us);
        wall += us;
        if (r == 0) {
          for (const auto& h : hits) found[q].push_back(h.id);
        }
      }
    }
    BenchRow row;
    row.nprobe = np;
    row.k = k;
    row.recall = truth ? recall_at_k(found, *truth) : std::nan("");
    row.p50_us = percentile(lat, 50.0);
    row.p95_us = percentile(lat, 95.0);
    row.qps = wall > 0.0 ? double(lat.size()) / (wall * 1e-6) : 0.0;
    rows.push_back(row);
  }
  return rows;
}

/// Throws InvalidState when recall drops as nprobe grows.
inline void check_recall_monotone(const std::vector<BenchRow>& rows) {
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (std::isnan(rows[i].recall) || std::isnan(rows[i - 1].recall)) continue;
    if (rows[i].nprobe > rows[i - 1].nprobe && rows[i].recall < rows[i - 1].recall) {
      char msg[160];
      std::snprintf(msg, sizeof msg, "recall fell from %.6f at nprobe=%zu to %.6f at nprobe=%zu", rows[i - 1].recall,
                    rows[i - 1].nprobe, rows[i].recall, rows[i].nprobe);
      throw InvalidState(msg);
    }
  }
}

inline void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows) {
  os << kBenchCsvHeader << '\n';
  for (const auto& r : rows) {
    char recall[32] = "";
    if (!std::isnan(r.recall)) std::snprintf(recall, sizeof recall, "%.6f", r.recall);
    char line[192];
    std::snprintf(line, sizeof line, "%zu,%zu,%s,%.3f,%.3f,%.1f\n", r.nprobe, r.k, recall, r.p50_us, r.p95_us, r.qps);
    os << line;
  }
}

}  // namespace knnseq
