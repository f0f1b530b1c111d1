#pragma once

// IVFPQ: k-means coarse partition, PQ codes of residuals (vector minus its
// coarse centroid), and nprobe-limited ADC search. Optional PCA/OPQ
// pre-transforms run first, so the index operates entirely in transformed
// space.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "knnseq/binio.hpp"
#include "knnseq/corevec.hpp"
#include "knnseq/pq.hpp"
#include "knnseq/transform.hpp"

namespace knnseq {

inline constexpr std::size_t kDefaultK = 64;
inline constexpr std::size_t kDefaultNprobe = 32;
inline constexpr std::size_t kDefaultSubspaces = 64;
/// Coarse k-means trains on at most this many points per centroid.
inline constexpr std::size_t kMaxPointsPerCentroid = 256;

struct SearchParams {
  std::size_t k = kDefaultK;
  std::size_t nprobe = kDefaultNprobe;
};

struct IVFPQOptions {
  std::size_t nlist = 1;
  std::size_t M = kDefaultSubspaces;
  std::size_t L = kDefaultCodewords;
  std::uint64_t seed = 0;
  bool use_opq = false;
  /// 0 disables PCA; otherwise the post-PCA dimensionality.
  std::size_t pca_dim = 0;
  std::size_t kmeans_iters = 25;
  std::size_t pq_iters = 25;
  std::size_t opq_outer_iters = 20;
  std::size_t opq_pq_iters = 10;
};

struct InvertedList {
  std::vector<std::uint64_t> ids;
  std::vector<std::uint8_t> codes;  // ids.size() * M bytes

  std::size_t size() const noexcept { return ids.size(); }
  friend bool operator==(const InvertedList&, const InvertedList&) = default;
};

using SearchHit = KBest<std::uint64_t>::Entry;

/// Checks hyperparameters that do not depend on the training data.
inline void validate_ivfpq_config(std::size_t d, const IVFPQOptions& opt) {
  if (d == 0) throw InvalidArgument("IVFPQ: dimension must be positive");
  if (opt.nlist < 1) throw InvalidArgument("IVFPQ: nlist must be >= 1");
  if (opt.nlist > std::numeric_limits<std::uint32_t>::max()) throw InvalidArgument("IVFPQ: nlist too large");
  if (opt.L < 1 || opt.L > kMaxCodewords) throw InvalidArgument("IVFPQ: L must be in [1, 256]");
  if (opt.pca_dim > d) throw InvalidArgument("IVFPQ: pca_dim exceeds input dimension");
  const std::size_t d_index = opt.pca_dim ? opt.pca_dim : d;
  if (opt.M < 1 || d_index % opt.M != 0) {
    throw InvalidArgument("IVFPQ: index dimension " + std::to_string(d_index) + " not divisible by M=" +
                          std::to_string(opt.M));
  }
  if (opt.kmeans_iters < 1 || opt.pq_iters < 1) throw InvalidArgument("IVFPQ: iteration counts must be >= 1");
}

class IVFPQIndex;
inline void write_index(BinaryWriter& w, const IVFPQIndex& idx);
inline IVFPQIndex read_index(BinaryReader& r);

class IVFPQIndex {
 public:
  IVFPQIndex() = default;

  std::size_t d_raw() const noexcept { return d_raw_; }
  std::size_t d_index() const noexcept { return d_index_; }
  std::size_t nlist() const noexcept { return coarse_.rows(); }
  std::size_t M() const noexcept { return codebook_.M(); }
  std::size_t L() const noexcept { return codebook_.L(); }
  std::uint64_t total() const noexcept { return total_; }
  bool is_trained() const noexcept { return !coarse_.empty() && !codebook_.empty(); }

  const VectorMatrix& coarse_centroids() const noexcept { return coarse_; }
  const PQCodebook& codebook() const noexcept { return codebook_; }
  const std::vector<InvertedList>& lists() const noexcept { return lists_; }
  const std::optional<PCATransform>& pca() const noexcept { return pca_; }
  const std::optional<OPQTransform>& opq() const noexcept { return opq_; }

  /// Maps a raw vector into the space the index stores.
  Vector transform(std::span<const float> v) const {
    if (v.size() != d_raw_) {
      throw InvalidArgument("IVFPQ: vector length " + std::to_string(v.size()) + " != index input dim " +
                            std::to_string(d_raw_));
    }
    Vector out(v.begin(), v.end());
    if (pca_) out = apply_pca(*pca_, out);
    if (opq_) out = apply_opq(*opq_, out);
    return out;
  }

  VectorMatrix transform(const VectorMatrix& data) const {
    if (data.dim() != d_raw_) {
      throw InvalidArgument("IVFPQ: matrix dim " + std::to_string(data.dim()) + " != index input dim " +
                            std::to_string(d_raw_));
    }
    if (!pca_ && !opq_) return data;
    VectorMatrix out = pca_ ? apply_pca(*pca_, data) : data;
    if (opq_) out = apply_opq(*opq_, out);
    return out;
  }

  /// Trains transforms, coarse centroids and the residual codebook. The
  /// coarse quantizer sees at most 256 * nlist points and the codebook at most
  /// 256 * L residuals, each a seeded uniform sample.
  static IVFPQIndex train(const VectorMatrix& sample, const IVFPQOptions& opt) {
    validate_ivfpq_config(sample.dim(), opt);
    if (sample.rows() < std::max(opt.nlist, opt.L)) {
      throw InvalidArgument("IVFPQ: training sample has " + std::to_string(sample.rows()) + " rows, need at least " +
                            std::to_string(std::max(opt.nlist, opt.L)));
    }
    if (!sample.all_finite()) throw InvalidArgument("IVFPQ: non-finite training data");

    IVFPQIndex idx;
    idx.d_raw_ = sample.dim();
    idx.d_index_ = opt.pca_dim ? opt.pca_dim : sample.dim();

    VectorMatrix data = sample;
    if (opt.pca_dim) {
      idx.pca_ = train_pca(data, opt.pca_dim);
      data = apply_pca(*idx.pca_, data);
    }
    if (opt.use_opq) {
      const auto rows = sample_indices(data.rows(), kMaxPointsPerCentroid * opt.L, derive_seed(opt.seed, "ivf/opq-sample"));
      idx.opq_ = train_opq(gather_rows(data, rows), opt.M, opt.L, opt.opq_outer_iters, opt.opq_pq_iters,
                           derive_seed(opt.seed, "ivf/opq"));
      data = apply_opq(*idx.opq_, data);
    }

    const auto coarse_rows =
        sample_indices(data.rows(), kMaxPointsPerCentroid * opt.nlist, derive_seed(opt.seed, "ivf/coarse-sample"));
    const auto coarse_data = coarse_rows.size() == data.rows() ? data : gather_rows(data, coarse_rows);
    idx.coarse_ = kmeans(coarse_data, opt.nlist, opt.kmeans_iters, derive_seed(opt.seed, "ivf/coarse")).centroids;

    const auto pq_rows = sample_indices(data.rows(), kMaxPointsPerCentroid * opt.L, derive_seed(opt.seed, "ivf/pq-sample"));
    VectorMatrix residuals = gather_rows(data, pq_rows);
    const auto assign = assign_all(residuals, idx.coarse_);
    for (std::size_t i = 0; i < residuals.rows(); ++i) subtract_in_place(residuals.row(i), idx.coarse_.row(assign[i]));
    idx.codebook_ = train_pq(residuals, opt.M, opt.L, opt.pq_iters, derive_seed(opt.seed, "ivf/pq"));

    idx.lists_.assign(opt.nlist, {});
    return idx;
  }

  /// Appends keys with ids first_id, first_id + 1, ...
  void add(const VectorMatrix& keys, std::uint64_t first_id) {
    if (!is_trained()) throw InvalidState("IVFPQ: add called on an untrained index");
    if (keys.empty()) return;
    const VectorMatrix data = transform(keys);
    const auto assign = assign_all(data, coarse_);
    const std::size_t m = M();
    std::vector<std::uint8_t> codes(data.rows() * m);
    const detail::BatchEncoder enc(codebook_);
    parallel_for(data.rows(), [&](std::size_t b, std::size_t e) {
      Vector residual(d_index_);
      auto scratch = enc.scratch();
      for (std::size_t i = b; i < e; ++i) {
        const auto r = data.row(i);
        const auto c = coarse_.row(assign[i]);
        for (std::size_t j = 0; j < d_index_; ++j) residual[j] = r[j] - c[j];
        enc(residual.data(), codes.data() + i * m, scratch);
      }
    });
    for (std::size_t i = 0; i < data.rows(); ++i) {
      auto& list = lists_[assign[i]];
      list.ids.push_back(first_id + i);
      list.codes.insert(list.codes.end(), codes.begin() + static_cast<std::ptrdiff_t>(i * m),
                        codes.begin() + static_cast<std::ptrdiff_t>((i + 1) * m));
    }
    total_ += data.rows();
  }

  /// ADC distances over the nprobe nearest lists, k best ascending, ties by
  /// lower id. Distances are approximate (quantized), not exact.
  std::vector<SearchHit> search(std::span<const float> query, const SearchParams& params) const {
    if (total_ == 0) throw InvalidState("IVFPQ: search on an empty index");
    if (params.k < 1) throw InvalidArgument("IVFPQ: k must be >= 1");
    if (params.nprobe < 1 || params.nprobe > nlist()) {
      throw InvalidArgument("IVFPQ: nprobe=" + std::to_string(params.nprobe) + " outside [1, nlist=" +
                            std::to_string(nlist()) + "]");
    }
    const Vector q = transform(query);
    const auto probes = nearest_centroid(q, coarse_, params.nprobe);
    KBest<std::uint64_t> best(params.k);
    Vector residual(d_index_);
    const std::size_t m = M();
    for (const auto& probe : probes) {
      const auto& list = lists_[probe.index];
      if (list.ids.empty()) continue;
      const auto c = coarse_.row(probe.index);
      for (std::size_t j = 0; j < d_index_; ++j) residual[j] = q[j] - c[j];
      const DistanceLUT lut = build_lut(codebook_, residual);
      const std::uint8_t* code = list.codes.data();
      for (std::size_t i = 0; i < list.ids.size(); ++i, code += m) {
        const float dist = detail::adc_unchecked(lut, code);
        if (dist <= best.worst()) best.push(list.ids[i], dist);
      }
    }
    return best.take_sorted();
  }

  friend bool operator==(const IVFPQIndex&, const IVFPQIndex&) = default;

  // Serialization: see write_index / read_index.
  friend void write_index(BinaryWriter& w, const IVFPQIndex& idx);
  friend IVFPQIndex read_index(BinaryReader& r);

 private:
  static void subtract_in_place(std::span<float> a, std::span<const float> b) {
    for (std::size_t j = 0; j < a.size(); ++j) a[j] -= b[j];
  }

  std::size_t d_raw_ = 0;
  std::size_t d_index_ = 0;
  std::optional<PCATransform> pca_;
  std::optional<OPQTransform> opq_;
  VectorMatrix coarse_;
  PQCodebook codebook_;
  std::vector<InvertedList> lists_;
  std::uint64_t total_ = 0;
};

inline IVFPQIndex train_ivfpq(const VectorMatrix& sample, const IVFPQOptions& opt) { return IVFPQIndex::train(sample, opt); }

// ---------------------------------------------------------------------------
// File format (little-endian, 8-byte aligned sections):
//   "KSIX" u32 version=1 u32 flags(bit0 pca, bit1 opq) u32 d_raw u32 d_index
//   u32 nlist u32 M u32 L u64 total
//   [PCA section] [OPQ section] coarse centroids (nlist x d_index f32)
//   residual codebook section
//   nlist x { u64 length, u64 ids[length], u8 codes[length * M] }

inline constexpr std::uint32_t kIndexVersion = 1;
inline constexpr std::uint32_t kFlagPCA = 1U << 0;
inline constexpr std::uint32_t kFlagOPQ = 1U << 1;
inline constexpr std::uint32_t kSectionPCA = 1;
inline constexpr std::uint32_t kSectionOPQ = 2;

/// "KSCB" u32 M u32 L u32 dsub, f32 codewords[M][L][dsub], pad.
inline void write_codebook(BinaryWriter& w, const PQCodebook& cb) {
  w.magic("KSCB");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cb.M()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cb.L()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cb.dsub()));
  w.array<float>(cb.buffer());
  w.pad8();
}

inline PQCodebook read_codebook(BinaryReader& r) {
  r.expect_magic("KSCB");
  const auto M = r.get<std::uint32_t>("codebook M");
  const auto L = r.get<std::uint32_t>("codebook L");
  const auto dsub = r.get<std::uint32_t>("codebook dsub");
  r.check(M > 0 && dsub > 0, "codebook has zero M or dsub");
  r.check(L > 0 && L <= kMaxCodewords, "codebook L outside [1, 256]");
  auto words = r.array<float>(std::size_t{M} * L * dsub, "codewords");
  r.skip_pad8();
  return PQCodebook(M, L, dsub, std::move(words));
}

inline void write_pca(BinaryWriter& w, const PCATransform& t) {
  w.put<std::uint32_t>(kSectionPCA);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.d_in));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.d_out));
  w.put<std::uint32_t>(0);
  w.array<float>(t.mu);
  w.array<float>(t.W);
  w.pad8();
}

inline PCATransform read_pca(BinaryReader& r) {
  r.check(r.get<std::uint32_t>("section tag") == kSectionPCA, "expected PCA section tag");
  PCATransform t;
  t.d_in = r.get<std::uint32_t>("pca d_in");
  t.d_out = r.get<std::uint32_t>("pca d_out");
  r.get<std::uint32_t>("reserved");
  r.check(t.d_out >= 1 && t.d_out <= t.d_in, "PCA dimensions invalid");
  t.mu = r.array<float>(t.d_in, "pca mean");
  t.W = r.array<float>(t.d_in * t.d_out, "pca components");
  r.skip_pad8();
  return t;
}

inline void write_opq(BinaryWriter& w, const OPQTransform& t) {
  w.put<std::uint32_t>(kSectionOPQ);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.d));
  w.put<std::uint32_t>(0);
  w.put<std::uint32_t>(0);
  w.array<float>(t.R);
  w.pad8();
  write_codebook(w, t.codebook);
}

inline OPQTransform read_opq(BinaryReader& r) {
  r.check(r.get<std::uint32_t>("section tag") == kSectionOPQ, "expected OPQ section tag");
  OPQTransform t;
  t.d = r.get<std::uint32_t>("opq d");
  r.get<std::uint32_t>("reserved");
  r.get<std::uint32_t>("reserved");
  r.check(t.d > 0, "OPQ dimension is zero");
  t.R = r.array<float>(t.d * t.d, "opq rotation");
  r.skip_pad8();
  t.codebook = read_codebook(r);
  r.check(t.codebook.dim() == t.d, "OPQ codebook dimension does not match rotation");
  return t;
}

inline void write_index(BinaryWriter& w, const IVFPQIndex& idx) {
  if (!idx.is_trained()) throw InvalidState("IVFPQ: cannot save an untrained index");
  w.magic("KSIX");
  w.put<std::uint32_t>(kIndexVersion);
  w.put<std::uint32_t>((idx.pca_ ? kFlagPCA : 0U) | (idx.opq_ ? kFlagOPQ : 0U));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(idx.d_raw_));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(idx.d_index_));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(idx.nlist()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(idx.M()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(idx.L()));
  w.put<std::uint64_t>(idx.total_);
  if (idx.pca_) write_pca(w, *idx.pca_);
  if (idx.opq_) write_opq(w, *idx.opq_);
  w.array<float>(idx.coarse_.data());
  w.pad8();
  write_codebook(w, idx.codebook_);
  for (const auto& list : idx.lists_) {
    w.put<std::uint64_t>(list.ids.size());
    w.array<std::uint64_t>(list.ids);
    w.array<std::uint8_t>(list.codes);
    w.pad8();
  }
}

inline IVFPQIndex read_index(BinaryReader& r) {
  r.expect_magic("KSIX");
  const auto version_at = r.offset();
  const auto version = r.get<std::uint32_t>("version");
  if (version != kIndexVersion) throw FormatError("unsupported index version " + std::to_string(version), version_at);
  const auto flags = r.get<std::uint32_t>("flags");
  r.check((flags & ~(kFlagPCA | kFlagOPQ)) == 0, "unknown index flags");
  IVFPQIndex idx;
  idx.d_raw_ = r.get<std::uint32_t>("d_raw");
  idx.d_index_ = r.get<std::uint32_t>("d_index");
  const std::size_t nlist = r.get<std::uint32_t>("nlist");
  const std::size_t M = r.get<std::uint32_t>("M");
  const std::size_t L = r.get<std::uint32_t>("L");
  idx.total_ = r.get<std::uint64_t>("total");
  r.check(idx.d_raw_ > 0 && idx.d_index_ > 0 && nlist > 0 && M > 0, "zero dimension in index header");
  r.check(idx.d_index_ % M == 0, "d_index not divisible by M");
  r.check(L > 0 && L <= kMaxCodewords, "L outside [1, 256]");

  if (flags & kFlagPCA) {
    idx.pca_ = read_pca(r);
    r.check(idx.pca_->d_in == idx.d_raw_ && idx.pca_->d_out == idx.d_index_, "PCA section does not match header");
  } else {
    r.check(idx.d_raw_ == idx.d_index_, "d_raw != d_index without a PCA section");
  }
  if (flags & kFlagOPQ) {
    idx.opq_ = read_opq(r);
    r.check(idx.opq_->d == idx.d_index_, "OPQ section does not match header");
  }
  idx.coarse_ = VectorMatrix(nlist, idx.d_index_, r.array<float>(nlist * idx.d_index_, "coarse centroids"));
  r.skip_pad8();
  idx.codebook_ = read_codebook(r);
  r.check(idx.codebook_.M() == M && idx.codebook_.L() == L && idx.codebook_.dim() == idx.d_index_,
          "residual codebook does not match header");

  idx.lists_.resize(nlist);
  std::uint64_t seen = 0;
  for (auto& list : idx.lists_) {
    const auto len = r.get<std::uint64_t>("list length");
    r.check(len <= idx.total_ - std::min(seen, idx.total_), "list lengths exceed header total");
    list.ids = r.array<std::uint64_t>(len, "list ids");
    const auto codes_at = r.offset();
    list.codes = r.array<std::uint8_t>(len * M, "list codes");
    for (std::size_t i = 0; i < list.codes.size(); ++i) {
      if (list.codes[i] >= L) throw FormatError("code entry >= L", codes_at + i);
    }
    r.skip_pad8();
    seen += len;
  }
  r.check(seen == idx.total_, "list lengths do not sum to header total");
  return idx;
}

inline void save_index(const IVFPQIndex& idx, const std::filesystem::path& path) {
  auto os = open_for_write(path);
  BinaryWriter w(os);
  write_index(w, idx);
  os.flush();
  if (!os) throw StorageError("failed writing " + path.string());
}

inline IVFPQIndex load_index(const std::filesystem::path& path) {
  auto is = open_for_read(path);
  BinaryReader r(is, 0, file_length(path));
  auto idx = read_index(r);
  r.check(r.at_end(), "trailing bytes after index");
  return idx;
}

}  // namespace knnseq
