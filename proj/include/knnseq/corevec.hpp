#pragma once

// Dense float vectors, squared L2 distance, nearest-centroid lookup and
// Lloyd's k-means with k-means++ seeding. Every quantizer and coarse index in
// the library is built on these.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "knnseq/errors.hpp"

namespace knnseq {

using Vector = std::vector<float>;

/// Row-major N x d float matrix.
class VectorMatrix {
 public:
  VectorMatrix() = default;
  VectorMatrix(std::size_t rows, std::size_t dim) : rows_(rows), dim_(dim), data_(rows * dim, 0.0F) {}
  VectorMatrix(std::size_t rows, std::size_t dim, std::vector<float> data)
      : rows_(rows), dim_(dim), data_(std::move(data)) {
    if (data_.size() != rows_ * dim_) {
      throw InvalidArgument("VectorMatrix: buffer holds " + std::to_string(data_.size()) +
                            " floats, expected " + std::to_string(rows_ * dim_));
    }
  }

  static VectorMatrix from_rows(const std::vector<Vector>& rows) {
    if (rows.empty()) return {};
    VectorMatrix m(0, rows.front().size());
    for (const auto& r : rows) m.append_row(r);
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t dim() const noexcept { return dim_; }
  bool empty() const noexcept { return rows_ == 0; }

  std::span<const float> row(std::size_t i) const { return {data_.data() + i * dim_, dim_}; }
  std::span<float> row(std::size_t i) { return {data_.data() + i * dim_, dim_}; }

  std::span<const float> data() const noexcept { return data_; }
  std::span<float> data() noexcept { return data_; }
  const std::vector<float>& buffer() const noexcept { return data_; }

  void append_row(std::span<const float> v) {
    if (v.size() != dim_) {
      throw InvalidArgument("VectorMatrix::append_row: got length " + std::to_string(v.size()) +
                            ", matrix dim is " + std::to_string(dim_));
    }
    data_.insert(data_.end(), v.begin(), v.end());
    ++rows_;
  }

  void reserve_rows(std::size_t n) { data_.reserve(n * dim_); }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](float x) { return std::isfinite(x); });
  }

  friend bool operator==(const VectorMatrix&, const VectorMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t dim_ = 0;
  std::vector<float> data_;
};

// ---------------------------------------------------------------------------
// Threading

namespace detail {
inline std::atomic<unsigned>& thread_setting() {
  static std::atomic<unsigned> n{1};
  return n;
}
}  // namespace detail

/// Worker cap used by every parallel loop in the library. 1 is the
/// deterministic reference path.
inline void set_num_threads(unsigned n) { detail::thread_setting() = std::max(1U, n); }
inline unsigned num_threads() { return detail::thread_setting(); }

/// Splits [0, n) into contiguous chunks and runs fn(begin, end) on each.
/// Callers write results by index, so output does not depend on scheduling.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(num_threads(), n);
  if (workers <= 1) {
    if (n > 0) fn(0, n);
    return;
  }
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t b = w * chunk;
    const std::size_t e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
}

// ---------------------------------------------------------------------------
// Seeds

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Per-stage seed: mix64(seed XOR fnv1a64(tag)).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return mix64(seed ^ h);
}

/// Seeded uniform sample of `count` distinct row indices out of `total`,
/// ascending. Returns all indices when count >= total.
inline std::vector<std::size_t> sample_indices(std::size_t total, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> all(total);
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (count >= total) return all;
  std::vector<std::size_t> out;
  out.reserve(count);
  std::mt19937_64 rng(seed);
  std::sample(all.begin(), all.end(), std::back_inserter(out), count, rng);
  return out;
}

inline VectorMatrix gather_rows(const VectorMatrix& m, std::span<const std::size_t> idx) {
  VectorMatrix out(0, m.dim());
  out.reserve_rows(idx.size());
  for (auto i : idx) out.append_row(m.row(i));
  return out;
}

// ---------------------------------------------------------------------------
// Distances

namespace detail {

inline constexpr std::size_t kLanes = 8;
inline constexpr std::size_t kPairwiseBlock = 256;

// Eight independent accumulators, reduced as a balanced tree.
inline float l2sq_block(const float* a, const float* b, std::size_t n) noexcept {
  float acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    for (std::size_t l = 0; l < kLanes; ++l) {
      const float t = a[i + l] - b[i + l];
      acc[l] += t * t;
    }
  }
  for (std::size_t l = 0; i < n; ++i, ++l) {
    const float t = a[i] - b[i];
    acc[l] += t * t;
  }
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

/// Unchecked squared L2. Pairwise summation over blocks for long vectors.
inline float l2sq(const float* a, const float* b, std::size_t n) noexcept {
  if (n <= kPairwiseBlock) return l2sq_block(a, b, n);
  const std::size_t half = ((n / 2) + kLanes - 1) / kLanes * kLanes;
  return l2sq(a, b, half) + l2sq(a + half, b + half, n - half);
}

/// Index of the nearest row of `centroids` to v; ties go to the lower index.
inline std::pair<std::size_t, float> argmin_l2(const float* v, const VectorMatrix& centroids) noexcept {
  const std::size_t d = centroids.dim();
  const float* c = centroids.data().data();
  std::size_t best = 0;
  float best_d = std::numeric_limits<float>::infinity();
  for (std::size_t j = 0; j < centroids.rows(); ++j) {
    const float dist = l2sq(v, c + j * d, d);
    if (dist < best_d) {
      best_d = dist;
      best = j;
    }
  }
  return {best, best_d};
}

/// Centroid-major copy of a set of short centroids (d <= kLanes), so the
/// distance loop vectorizes across centroids. Every distance is summed in the
/// lane order of l2sq_block, and the scan matches argmin_l2 bit for bit.
class ShortArgmin {
 public:
  ShortArgmin(const float* centroids, std::size_t k, std::size_t d) : k_(k), d_(d), cols_(k * d) {
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t t = 0; t < d; ++t) cols_[t * k + j] = centroids[j * d + t];
    }
  }

  static bool applies(std::size_t d) noexcept { return d >= 1 && d <= kLanes; }
  std::size_t k() const noexcept { return k_; }

  /// `scratch` holds k floats.
  std::pair<std::size_t, float> operator()(const float* v, float* scratch) const noexcept {
    switch (d_) {
      case 1: distances<1>(v, scratch); break;
      case 2: distances<2>(v, scratch); break;
      case 3: distances<3>(v, scratch); break;
      case 4: distances<4>(v, scratch); break;
      case 5: distances<5>(v, scratch); break;
      case 6: distances<6>(v, scratch); break;
      case 7: distances<7>(v, scratch); break;
      default: distances<8>(v, scratch); break;
    }
    // Per-lane first minimum, then the lowest index among equal lane minima:
    // the same winner as a strict-less scan, without its branches.
    using vf = float __attribute__((vector_size(32)));
    using vi = std::int32_t __attribute__((vector_size(32)));
    constexpr std::size_t W = 8;
    constexpr float inf = std::numeric_limits<float>::infinity();
    vf val = {inf, inf, inf, inf, inf, inf, inf, inf};
    vi idx = {};
    vi cur = {0, 1, 2, 3, 4, 5, 6, 7};
    const vi step = {8, 8, 8, 8, 8, 8, 8, 8};
    const std::size_t full = k_ / W * W;
    for (std::size_t j = 0; j < full; j += W) {
      vf x;
      std::memcpy(&x, scratch + j, sizeof x);
      const vi lt = x < val;
      val = lt ? x : val;
      idx = lt ? cur : idx;
      cur += step;
    }
    std::size_t best = 0;
    float best_d = inf;
    for (std::size_t l = 0; l < W; ++l) {
      const auto i = static_cast<std::size_t>(idx[l]);
      if (val[l] < best_d || (val[l] == best_d && i < best)) {
        best_d = val[l];
        best = i;
      }
    }
    for (std::size_t j = full; j < k_; ++j) {
      if (scratch[j] < best_d) {
        best_d = scratch[j];
        best = j;
      }
    }
    return {best, best_d};
  }

 private:
  // l2sq_block's reduction with the empty lanes dropped. Each lane holds a
  // square, and adding +0 to it is exact.
  template <std::size_t D>
  static float lane_tree(const float* s) noexcept {
    auto pair = [&](std::size_t a) {
      if constexpr (D > 4) {
        if (a + 4 < D) return s[a] + s[a + 4];
      }
      return s[a];
    };
    if constexpr (D == 1) {
      return s[0];
    } else if constexpr (D == 2) {
      return pair(0) + pair(1);
    } else if constexpr (D == 3) {
      return (pair(0) + pair(1)) + pair(2);
    } else {
      return (pair(0) + pair(1)) + (pair(2) + pair(3));
    }
  }

  template <std::size_t D>
  void distances(const float* v, float* __restrict out) const noexcept {
    float q[D];
    for (std::size_t t = 0; t < D; ++t) q[t] = v[t];
    const float* __restrict c = cols_.data();
    const std::size_t k = k_;
    for (std::size_t j = 0; j < k; ++j) {
      float s[D];
      for (std::size_t t = 0; t < D; ++t) {
        const float x = q[t] - c[t * k + j];
        s[t] = x * x;
      }
      out[j] = lane_tree<D>(s);
    }
  }

  std::size_t k_;
  std::size_t d_;
  std::vector<float> cols_;  // d x k
};

}  // namespace detail

/// Sum of squared coordinate differences.
inline float squared_l2(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    throw InvalidArgument("squared_l2: dimension mismatch (" + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()) + ")");
  }
  return detail::l2sq(a.data(), b.data(), a.size());
}

struct Neighbor {
  std::size_t index;
  float distance;
  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

/// The n nearest centroids to v, ascending by distance, ties by lower index.
inline std::vector<Neighbor> nearest_centroid(std::span<const float> v, const VectorMatrix& centroids,
                                              std::size_t n) {
  if (centroids.empty()) throw InvalidState("nearest_centroid: empty centroid set");
  if (n < 1 || n > centroids.rows()) {
    throw InvalidArgument("nearest_centroid: n=" + std::to_string(n) + " outside [1, " +
                          std::to_string(centroids.rows()) + "]");
  }
  if (v.size() != centroids.dim()) {
    throw InvalidArgument("nearest_centroid: query has length " + std::to_string(v.size()) +
                          ", centroids have dim " + std::to_string(centroids.dim()));
  }
  if (n == 1) {
    auto [i, dist] = detail::argmin_l2(v.data(), centroids);
    return {{i, dist}};
  }
  std::vector<Neighbor> all;
  all.reserve(centroids.rows());
  for (std::size_t j = 0; j < centroids.rows(); ++j) {
    all.push_back({j, detail::l2sq(v.data(), centroids.row(j).data(), v.size())});
  }
  auto less = [](const Neighbor& a, const Neighbor& b) {
    return a.distance < b.distance || (a.distance == b.distance && a.index < b.index);
  };
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n), all.end(), less);
  all.resize(n);
  return all;
}

namespace detail {

inline constexpr std::size_t kGemmRows = 256;

inline bool use_gemm(std::size_t n, std::size_t k, std::size_t d) noexcept {
  return k >= 256 && d >= 32 && n >= 8 * kGemmRows;
}

// Candidate search through ||c||^2 - 2<x, c> in fixed row blocks, so the
// arithmetic per row never depends on the thread count. The winner's distance
// is recomputed exactly; near ties fall back to the exact scan.
inline void assign_gemm(const VectorMatrix& data, const VectorMatrix& centroids, std::uint32_t* assign,
                        float* distances) {
  using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const std::size_t d = data.dim();
  const std::size_t k = centroids.rows();
  const Eigen::Map<const RowMat> C(centroids.data().data(), Eigen::Index(k), Eigen::Index(d));
  const Eigen::VectorXf cnorm = C.rowwise().squaredNorm();
  const float cmax = cnorm.maxCoeff();
  const std::size_t blocks = (data.rows() + kGemmRows - 1) / kGemmRows;
  parallel_for(blocks, [&](std::size_t bb, std::size_t be) {
    RowMat S;
    for (std::size_t blk = bb; blk < be; ++blk) {
      const std::size_t r0 = blk * kGemmRows;
      const std::size_t rows = std::min(kGemmRows, data.rows() - r0);
      const Eigen::Map<const RowMat> X(data.row(r0).data(), Eigen::Index(rows), Eigen::Index(d));
      S.noalias() = X * C.transpose();
      for (std::size_t i = 0; i < rows; ++i) {
        const float* x = data.row(r0 + i).data();
        float best = std::numeric_limits<float>::infinity();
        float second = best;
        std::size_t arg = 0;
        for (std::size_t j = 0; j < k; ++j) {
          const float sc = cnorm[Eigen::Index(j)] - 2.0F * S(Eigen::Index(i), Eigen::Index(j));
          if (sc < best) {
            second = best;
            best = sc;
            arg = j;
          } else if (sc < second) {
            second = sc;
          }
        }
        float xn = 0.0F;
        for (std::size_t t = 0; t < d; ++t) xn += x[t] * x[t];
        float dist;
        if (second - best <= 1e-5F * (xn + cmax)) {
          std::tie(arg, dist) = argmin_l2(x, centroids);
        } else {
          dist = l2sq(x, centroids.row(arg).data(), d);
        }
        assign[r0 + i] = static_cast<std::uint32_t>(arg);
        if (distances) distances[r0 + i] = dist;
      }
    }
  });
}

}  // namespace detail

/// Nearest centroid for every row; optionally the squared distances too.
inline std::vector<std::uint32_t> assign_all(const VectorMatrix& data, const VectorMatrix& centroids,
                                             std::vector<float>* distances = nullptr) {
  std::vector<std::uint32_t> assign(data.rows());
  if (distances) distances->assign(data.rows(), 0.0F);
  if (data.rows() == 0) return assign;
  if (detail::use_gemm(data.rows(), centroids.rows(), data.dim())) {
    detail::assign_gemm(data, centroids, assign.data(), distances ? distances->data() : nullptr);
    return assign;
  }
  if (detail::ShortArgmin::applies(data.dim()) && centroids.rows() >= 16 && centroids.rows() < (1ULL << 31)) {
    const detail::ShortArgmin scan(centroids.data().data(), centroids.rows(), centroids.dim());
    parallel_for(data.rows(), [&](std::size_t b, std::size_t e) {
      std::vector<float> scratch(scan.k());
      for (std::size_t i = b; i < e; ++i) {
        auto [j, dist] = scan(data.row(i).data(), scratch.data());
        assign[i] = static_cast<std::uint32_t>(j);
        if (distances) (*distances)[i] = dist;
      }
    });
    return assign;
  }
  parallel_for(data.rows(), [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      auto [j, dist] = detail::argmin_l2(data.row(i).data(), centroids);
      assign[i] = static_cast<std::uint32_t>(j);
      if (distances) (*distances)[i] = dist;
    }
  });
  return assign;
}

// ---------------------------------------------------------------------------
// k-means

struct KMeansOptions {
  std::size_t k = 1;
  std::size_t max_iters = 25;
  std::uint64_t seed = 0;
  /// Stop once (prev - obj) <= tolerance * prev.
  double tolerance = 1e-4;
  /// Explicit starting centroids (k x d); skips k-means++ seeding.
  std::optional<VectorMatrix> init;
};

struct KMeansResult {
  VectorMatrix centroids;
  std::vector<std::uint32_t> assignments;
  double objective = 0.0;
  /// Objective after every assignment step, first to last.
  std::vector<double> history;
};

namespace detail {

inline VectorMatrix kmeanspp_seed(const VectorMatrix& data, std::size_t k, std::uint64_t seed) {
  const std::size_t n = data.rows();
  const std::size_t d = data.dim();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  VectorMatrix centroids(0, d);
  centroids.reserve_rows(k);
  std::size_t first = static_cast<std::size_t>(unit(rng) * static_cast<double>(n));
  first = std::min(first, n - 1);
  centroids.append_row(data.row(first));

  std::vector<double> min_d(n);
  parallel_for(n, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) min_d[i] = l2sq(data.row(i).data(), centroids.row(0).data(), d);
  });

  while (centroids.rows() < k) {
    const double total = std::accumulate(min_d.begin(), min_d.end(), 0.0);
    std::size_t pick = 0;
    if (total > 0.0) {
      const double target = unit(rng) * total;
      double run = 0.0;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        run += min_d[i];
        if (run > target && min_d[i] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      // Every point already coincides with a centroid.
      pick = std::min(static_cast<std::size_t>(unit(rng) * static_cast<double>(n)), n - 1);
    }
    centroids.append_row(data.row(pick));
    const float* c = centroids.row(centroids.rows() - 1).data();
    parallel_for(n, [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) {
        min_d[i] = std::min(min_d[i], static_cast<double>(l2sq(data.row(i).data(), c, d)));
      }
    });
  }
  return centroids;
}

}  // namespace detail

/// Lloyd's k-means. The objective is recorded after each assignment step and
/// never increases; the returned assignments and objective are consistent with
/// the returned centroids.
inline KMeansResult kmeans(const VectorMatrix& data, const KMeansOptions& opt) {
  const std::size_t n = data.rows();
  const std::size_t d = data.dim();
  const std::size_t k = opt.k;
  if (k < 1) throw InvalidArgument("kmeans: k must be >= 1");
  if (k > n) {
    throw InvalidArgument("kmeans: k=" + std::to_string(k) + " exceeds row count " + std::to_string(n));
  }
  if (opt.max_iters < 1) throw InvalidArgument("kmeans: max_iters must be >= 1");
  if (!data.all_finite()) throw InvalidArgument("kmeans: non-finite input");

  KMeansResult res;
  if (opt.init) {
    if (opt.init->rows() != k || opt.init->dim() != d) {
      throw InvalidArgument("kmeans: init centroids must be k x d");
    }
    res.centroids = *opt.init;
  } else {
    res.centroids = detail::kmeanspp_seed(data, k, opt.seed);
  }

  std::vector<float> dist;
  std::vector<double> sums(k * d);
  std::vector<std::size_t> counts(k);
  for (std::size_t it = 0;; ++it) {
    res.assignments = assign_all(data, res.centroids, &dist);
    double obj = 0.0;
    for (float x : dist) obj += x;
    const bool converged =
        !res.history.empty() && (res.history.back() - obj) <= opt.tolerance * res.history.back();
    res.history.push_back(obj);
    res.objective = obj;
    if (converged || it == opt.max_iters) break;

    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = res.assignments[i];
      ++counts[c];
      const auto r = data.row(i);
      for (std::size_t j = 0; j < d; ++j) sums[c * d + j] += r[j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      auto row = res.centroids.row(c);
      for (std::size_t j = 0; j < d; ++j) {
        row[j] = static_cast<float>(sums[c * d + j] / static_cast<double>(counts[c]));
      }
    }

    // Empty clusters take the point currently farthest from its centroid.
    if (std::find(counts.begin(), counts.end(), 0) != counts.end()) {
      std::vector<float> far(n);
      for (std::size_t i = 0; i < n; ++i) {
        far[i] = detail::l2sq(data.row(i).data(), res.centroids.row(res.assignments[i]).data(), d);
      }
      for (std::size_t c = 0; c < k; ++c) {
        if (counts[c] != 0) continue;
        const auto pick = static_cast<std::size_t>(std::max_element(far.begin(), far.end()) - far.begin());
        auto row = res.centroids.row(c);
        std::copy_n(data.row(pick).begin(), d, row.begin());
        far[pick] = -1.0F;
      }
    }
  }
  return res;
}

inline KMeansResult kmeans(const VectorMatrix& data, std::size_t k, std::size_t max_iters, std::uint64_t seed) {
  KMeansOptions opt;
  opt.k = k;
  opt.max_iters = max_iters;
  opt.seed = seed;
  return kmeans(data, opt);
}

}  // namespace knnseq
