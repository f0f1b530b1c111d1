#pragma once

// Product quantization: per-subspace codebooks learned by k-means, 8-bit codes,
// and asymmetric distance computation (ADC) through a per-query lookup table.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <queue>
#include <span>
#include <string>
#include <vector>

#include "knnseq/corevec.hpp"

namespace knnseq {

inline constexpr std::size_t kDefaultCodewords = 256;
inline constexpr std::size_t kMaxCodewords = 256;

/// M subspaces of L codewords each, dsub = d / M floats per codeword.
/// Codewords are stored as one contiguous block, subspace-major.
class PQCodebook {
 public:
  PQCodebook() = default;
  PQCodebook(std::size_t M, std::size_t L, std::size_t dsub)
      : M_(M), L_(L), dsub_(dsub), codewords_(M * L * dsub, 0.0F) {
    validate_shape(M, L, dsub);
  }
  PQCodebook(std::size_t M, std::size_t L, std::size_t dsub, std::vector<float> codewords)
      : M_(M), L_(L), dsub_(dsub), codewords_(std::move(codewords)) {
    validate_shape(M, L, dsub);
    if (codewords_.size() != M * L * dsub) throw InvalidArgument("PQCodebook: codeword buffer size mismatch");
  }

  std::size_t M() const noexcept { return M_; }
  std::size_t L() const noexcept { return L_; }
  std::size_t dsub() const noexcept { return dsub_; }
  std::size_t dim() const noexcept { return M_ * dsub_; }
  bool empty() const noexcept { return M_ == 0; }

  std::span<const float> codeword(std::size_t m, std::size_t l) const {
    return {codewords_.data() + (m * L_ + l) * dsub_, dsub_};
  }
  std::span<float> codeword(std::size_t m, std::size_t l) {
    return {codewords_.data() + (m * L_ + l) * dsub_, dsub_};
  }
  /// All L codewords of subspace m as an L x dsub block.
  std::span<const float> subspace(std::size_t m) const { return {codewords_.data() + m * L_ * dsub_, L_ * dsub_}; }

  const std::vector<float>& buffer() const noexcept { return codewords_; }

  friend bool operator==(const PQCodebook&, const PQCodebook&) = default;

 private:
  static void validate_shape(std::size_t M, std::size_t L, std::size_t dsub) {
    if (M == 0 || dsub == 0) throw InvalidArgument("PQCodebook: M and dsub must be positive");
    if (L == 0 || L > kMaxCodewords) {
      throw InvalidArgument("PQCodebook: L=" + std::to_string(L) + " outside [1, 256] (codes are 8-bit)");
    }
  }

  std::size_t M_ = 0;
  std::size_t L_ = 0;
  std::size_t dsub_ = 0;
  std::vector<float> codewords_;
};

/// One code byte per subspace.
struct PQCode {
  std::vector<std::uint8_t> codes;
  friend bool operator==(const PQCode&, const PQCode&) = default;
};

/// table[m * L + l] = squared distance from the query's m-th sub-vector to
/// codeword l of subspace m.
struct DistanceLUT {
  std::size_t M = 0;
  std::size_t L = 0;
  std::vector<float> table;

  float at(std::size_t m, std::size_t l) const { return table[m * L + l]; }
};

// ---------------------------------------------------------------------------
// Training

namespace detail {

inline VectorMatrix subspace_slice(const VectorMatrix& keys, std::size_t m, std::size_t dsub) {
  VectorMatrix sub(keys.rows(), dsub);
  for (std::size_t i = 0; i < keys.rows(); ++i) {
    const auto r = keys.row(i).subspan(m * dsub, dsub);
    std::copy(r.begin(), r.end(), sub.row(i).begin());
  }
  return sub;
}

inline void check_pq_args(const VectorMatrix& keys, std::size_t M, std::size_t L) {
  if (M == 0) throw InvalidArgument("train_pq: M must be positive");
  if (keys.dim() == 0 || keys.dim() % M != 0) {
    throw InvalidArgument("train_pq: d=" + std::to_string(keys.dim()) + " not divisible by M=" + std::to_string(M));
  }
  if (L == 0 || L > kMaxCodewords) throw InvalidArgument("train_pq: L must be in [1, 256]");
  if (keys.rows() < L) {
    throw InvalidArgument("train_pq: " + std::to_string(keys.rows()) + " keys is fewer than L=" + std::to_string(L));
  }
}

}  // namespace detail

/// Per-subspace k-means objectives of the last training run.
struct PQTrainReport {
  std::vector<double> objectives;
};

/// Learns L codewords per subspace with k-means. Subspace m is seeded with
/// derive_seed(seed, "pq/<m>").
inline PQCodebook train_pq(const VectorMatrix& keys, std::size_t M, std::size_t L = kDefaultCodewords,
                           std::size_t iters = 25, std::uint64_t seed = 0, PQTrainReport* report = nullptr) {
  detail::check_pq_args(keys, M, L);
  const std::size_t dsub = keys.dim() / M;
  PQCodebook cb(M, L, dsub);
  if (report) report->objectives.assign(M, 0.0);
  for (std::size_t m = 0; m < M; ++m) {
    const auto sub = detail::subspace_slice(keys, m, dsub);
    auto km = kmeans(sub, L, iters, derive_seed(seed, "pq/" + std::to_string(m)));
    for (std::size_t l = 0; l < L; ++l) {
      const auto c = km.centroids.row(l);
      std::copy(c.begin(), c.end(), cb.codeword(m, l).begin());
    }
    if (report) report->objectives[m] = km.objective;
  }
  return cb;
}

/// Continues Lloyd iterations from an existing codebook (warm start).
inline PQCodebook refine_pq(const PQCodebook& start, const VectorMatrix& keys, std::size_t iters) {
  detail::check_pq_args(keys, start.M(), start.L());
  if (keys.dim() != start.dim()) throw InvalidArgument("refine_pq: dimension mismatch");
  PQCodebook cb = start;
  for (std::size_t m = 0; m < cb.M(); ++m) {
    const auto sub = detail::subspace_slice(keys, m, cb.dsub());
    KMeansOptions opt;
    opt.k = cb.L();
    opt.max_iters = iters;
    const auto block = start.subspace(m);
    opt.init = VectorMatrix(cb.L(), cb.dsub(), std::vector<float>(block.begin(), block.end()));
    auto km = kmeans(sub, opt);
    for (std::size_t l = 0; l < cb.L(); ++l) {
      const auto c = km.centroids.row(l);
      std::copy(c.begin(), c.end(), cb.codeword(m, l).begin());
    }
  }
  return cb;
}

// ---------------------------------------------------------------------------
// Encode / decode

namespace detail {

inline void encode_into(const PQCodebook& cb, const float* v, std::uint8_t* out) noexcept {
  const std::size_t L = cb.L();
  const std::size_t dsub = cb.dsub();
  for (std::size_t m = 0; m < cb.M(); ++m) {
    const float* sub = v + m * dsub;
    const float* words = cb.subspace(m).data();
    std::size_t best = 0;
    float best_d = std::numeric_limits<float>::infinity();
    for (std::size_t l = 0; l < L; ++l) {
      const float dist = l2sq(sub, words + l * dsub, dsub);
      if (dist < best_d) {
        best_d = dist;
        best = l;
      }
    }
    out[m] = static_cast<std::uint8_t>(best);
  }
}

/// Encoder for many rows. Short subspaces scan a centroid-major copy of the
/// codebook; the codes equal encode_into's.
class BatchEncoder {
 public:
  explicit BatchEncoder(const PQCodebook& cb) : cb_(cb) {
    if (ShortArgmin::applies(cb.dsub())) {
      for (std::size_t m = 0; m < cb.M(); ++m) scans_.emplace_back(cb.subspace(m).data(), cb.L(), cb.dsub());
    }
  }

  /// Per-thread buffer for operator().
  std::vector<float> scratch() const { return std::vector<float>(cb_.L()); }

  void operator()(const float* v, std::uint8_t* out, std::vector<float>& scratch) const noexcept {
    if (scans_.empty()) {
      encode_into(cb_, v, out);
      return;
    }
    const std::size_t dsub = cb_.dsub();
    for (std::size_t m = 0; m < scans_.size(); ++m) {
      out[m] = static_cast<std::uint8_t>(scans_[m](v + m * dsub, scratch.data()).first);
    }
  }

 private:
  const PQCodebook& cb_;
  std::vector<ShortArgmin> scans_;
};

inline void check_code(const PQCodebook& cb, std::span<const std::uint8_t> code) {
  if (code.size() != cb.M()) {
    throw InvalidArgument("PQ code has " + std::to_string(code.size()) + " entries, codebook has M=" +
                          std::to_string(cb.M()));
  }
  for (std::size_t m = 0; m < code.size(); ++m) {
    if (code[m] >= cb.L()) {
      throw InvalidArgument("PQ code entry " + std::to_string(code[m]) + " in subspace " + std::to_string(m) +
                            " is >= L=" + std::to_string(cb.L()));
    }
  }
}

}  // namespace detail

/// Nearest codeword per subspace; ties go to the lowest codeword index.
inline PQCode encode(const PQCodebook& cb, std::span<const float> v) {
  if (v.size() != cb.dim()) {
    throw InvalidArgument("encode: vector length " + std::to_string(v.size()) + " != codebook dim " +
                          std::to_string(cb.dim()));
  }
  PQCode code{std::vector<std::uint8_t>(cb.M())};
  detail::encode_into(cb, v.data(), code.codes.data());
  return code;
}

/// Packed codes for every row, M bytes per row.
inline std::vector<std::uint8_t> encode_all(const PQCodebook& cb, const VectorMatrix& data) {
  if (data.dim() != cb.dim()) throw InvalidArgument("encode_all: dimension mismatch");
  std::vector<std::uint8_t> codes(data.rows() * cb.M());
  const detail::BatchEncoder enc(cb);
  parallel_for(data.rows(), [&](std::size_t b, std::size_t e) {
    auto scratch = enc.scratch();
    for (std::size_t i = b; i < e; ++i) enc(data.row(i).data(), codes.data() + i * cb.M(), scratch);
  });
  return codes;
}

inline void decode_into(const PQCodebook& cb, std::span<const std::uint8_t> code, std::span<float> out) {
  for (std::size_t m = 0; m < cb.M(); ++m) {
    const auto w = cb.codeword(m, code[m]);
    std::copy(w.begin(), w.end(), out.begin() + static_cast<std::ptrdiff_t>(m * cb.dsub()));
  }
}

/// Concatenation of the selected codewords.
inline Vector decode(const PQCodebook& cb, std::span<const std::uint8_t> code) {
  detail::check_code(cb, code);
  Vector out(cb.dim());
  decode_into(cb, code, out);
  return out;
}
inline Vector decode(const PQCodebook& cb, const PQCode& code) { return decode(cb, code.codes); }

/// Row-wise decode(encode(x)).
inline VectorMatrix reconstruct_all(const PQCodebook& cb, const VectorMatrix& data) {
  const auto codes = encode_all(cb, data);
  VectorMatrix out(data.rows(), data.dim());
  for (std::size_t i = 0; i < data.rows(); ++i) {
    decode_into(cb, {codes.data() + i * cb.M(), cb.M()}, out.row(i));
  }
  return out;
}

/// Mean squared reconstruction error per vector, ||x - decode(encode(x))||^2.
inline double reconstruction_mse(const PQCodebook& cb, const VectorMatrix& data) {
  if (data.empty()) return 0.0;
  const auto rec = reconstruct_all(cb, data);
  double total = 0.0;
  for (std::size_t i = 0; i < data.rows(); ++i) total += detail::l2sq(data.row(i).data(), rec.row(i).data(), data.dim());
  return total / static_cast<double>(data.rows());
}

// ---------------------------------------------------------------------------
// ADC

inline DistanceLUT build_lut(const PQCodebook& cb, std::span<const float> q) {
  if (q.size() != cb.dim()) {
    throw InvalidArgument("build_lut: query length " + std::to_string(q.size()) + " != codebook dim " +
                          std::to_string(cb.dim()));
  }
  DistanceLUT lut{cb.M(), cb.L(), std::vector<float>(cb.M() * cb.L())};
  const std::size_t dsub = cb.dsub();
  for (std::size_t m = 0; m < cb.M(); ++m) {
    const float* sub = q.data() + m * dsub;
    const float* words = cb.subspace(m).data();
    for (std::size_t l = 0; l < cb.L(); ++l) lut.table[m * cb.L() + l] = detail::l2sq(sub, words + l * dsub, dsub);
  }
  return lut;
}

namespace detail {
inline float adc_unchecked(const DistanceLUT& lut, const std::uint8_t* code) noexcept {
  float d = 0.0F;
  const float* t = lut.table.data();
  for (std::size_t m = 0; m < lut.M; ++m, t += lut.L) d += t[code[m]];
  return d;
}
}  // namespace detail

/// Sum over subspaces of table[m][code[m]].
inline float adc_distance(const DistanceLUT& lut, std::span<const std::uint8_t> code) {
  if (code.size() != lut.M) throw InvalidArgument("adc_distance: code length does not match LUT");
  for (auto c : code) {
    if (c >= lut.L) throw InvalidArgument("adc_distance: code entry " + std::to_string(c) + " >= L");
  }
  return detail::adc_unchecked(lut, code.data());
}
inline float adc_distance(const DistanceLUT& lut, const PQCode& code) { return adc_distance(lut, code.codes); }

/// Bounded max-heap keeping the k smallest (distance, id) pairs; ties prefer
/// the smaller id.
template <typename Id>
class KBest {
 public:
  struct Entry {
    Id id;
    float distance;
    friend bool operator==(const Entry&, const Entry&) = default;
  };

  explicit KBest(std::size_t k) : k_(k) { heap_.reserve(k); }

  float worst() const noexcept {
    return heap_.size() < k_ ? std::numeric_limits<float>::infinity() : heap_.front().distance;
  }

  void push(Id id, float distance) {
    if (heap_.size() < k_) {
      heap_.push_back({id, distance});
      std::push_heap(heap_.begin(), heap_.end(), worse_first);
    } else if (k_ > 0 && before({id, distance}, heap_.front())) {
      std::pop_heap(heap_.begin(), heap_.end(), worse_first);
      heap_.back() = {id, distance};
      std::push_heap(heap_.begin(), heap_.end(), worse_first);
    }
  }

  std::size_t size() const noexcept { return heap_.size(); }

  /// Ascending by (distance, id). Leaves the heap empty.
  std::vector<Entry> take_sorted() {
    std::sort(heap_.begin(), heap_.end(), before);
    return std::exchange(heap_, {});
  }

 private:
  static bool before(const Entry& a, const Entry& b) {
    return a.distance < b.distance || (a.distance == b.distance && a.id < b.id);
  }
  static bool worse_first(const Entry& a, const Entry& b) { return before(a, b); }

  std::size_t k_;
  std::vector<Entry> heap_;
};

using CodeHit = KBest<std::size_t>::Entry;

/// k smallest ADC distances over packed codes (M bytes each), ascending; ties
/// by lower position. Returns every code when k exceeds the count.
inline std::vector<CodeHit> adc_topk(const DistanceLUT& lut, std::span<const std::uint8_t> packed, std::size_t k) {
  if (lut.M == 0 || packed.empty()) throw InvalidState("adc_topk: no codes to search");
  if (k < 1) throw InvalidArgument("adc_topk: k must be >= 1");
  if (packed.size() % lut.M != 0) throw InvalidArgument("adc_topk: packed code buffer is not a multiple of M");
  const std::size_t n = packed.size() / lut.M;
  KBest<std::size_t> best(std::min(k, n));
  const std::uint8_t* c = packed.data();
  for (std::size_t i = 0; i < n; ++i, c += lut.M) {
    const float d = detail::adc_unchecked(lut, c);
    if (d <= best.worst()) best.push(i, d);
  }
  return best.take_sorted();
}

inline std::vector<CodeHit> adc_topk(const DistanceLUT& lut, std::span<const PQCode> codes, std::size_t k) {
  if (codes.empty()) throw InvalidState("adc_topk: no codes to search");
  std::vector<std::uint8_t> packed;
  packed.reserve(codes.size() * lut.M);
  for (const auto& c : codes) {
    if (c.codes.size() != lut.M) throw InvalidArgument("adc_topk: code length does not match LUT");
    packed.insert(packed.end(), c.codes.begin(), c.codes.end());
  }
  return adc_topk(lut, packed, k);
}

}  // namespace knnseq
