#pragma once

// Subset retrieval: a sentence datastore (KSSD) over source-sentence keys,
// flat PQ codes for every target token (KSPQ), and exhaustive ADC scans over
// the token subset assembled from the nearest sentences.

#include <algorithm>
#include <filesystem>
#include <optional>
#include <vector>

#include "knnseq/datastore.hpp"
#include "knnseq/ivf.hpp"
#include "knnseq/pq.hpp"
#include "knnseq/transform.hpp"

namespace knnseq {

inline constexpr std::size_t kDefaultSubsetSentences = 512;

/// Sentence index defaults for a full-size corpus.
inline IVFPQOptions default_sentence_index_options() {
  IVFPQOptions o;
  o.nlist = 32768;
  o.M = 64;
  o.use_opq = true;
  return o;
}

/// Arithmetic mean of the encoder states.
inline Vector sentence_key(const ModelAdapter& model, std::span<const TokenId> src) {
  const auto states = model.encoder_states(src);
  if (states.rows() == 0) throw InvalidArgument("sentence_key: empty source");
  std::vector<double> acc(states.dim(), 0.0);
  for (std::size_t i = 0; i < states.rows(); ++i) {
    const auto r = states.row(i);
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += r[j];
  }
  Vector out(acc.size());
  for (std::size_t j = 0; j < acc.size(); ++j) out[j] = static_cast<float>(acc[j] / double(states.rows()));
  return out;
}

struct TokenSpan {
  std::uint64_t start = 0;
  std::uint64_t length = 0;
  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

struct SentenceDatastore {
  VectorMatrix keys;
  IVFPQIndex index;
  std::vector<TokenSpan> spans;

  std::size_t size() const noexcept { return spans.size(); }
  std::uint64_t token_count() const noexcept { return spans.empty() ? 0 : spans.back().start + spans.back().length; }

  friend bool operator==(const SentenceDatastore&, const SentenceDatastore&) = default;
};

/// Spans must be back to back from zero.
inline void check_spans_tile(const std::vector<TokenSpan>& spans, std::uint64_t tokens) {
  std::uint64_t at = 0;
  for (std::size_t s = 0; s < spans.size(); ++s) {
    if (spans[s].start != at || spans[s].length == 0) {
      throw InvalidArgument("sentence spans: span " + std::to_string(s) + " does not continue the tiling");
    }
    at += spans[s].length;
  }
  if (at != tokens) throw InvalidArgument("sentence spans cover " + std::to_string(at) + " of " + std::to_string(tokens) + " tokens");
}

inline SentenceDatastore build_sentence_datastore(const ModelAdapter& model, const ParallelCorpus& corpus,
                                                  const IVFPQOptions& opt) {
  if (corpus.empty()) throw InvalidArgument("build_sentence_datastore: empty corpus");
  corpus.validate();
  check_model_fits(model, corpus);
  SentenceDatastore sd;
  sd.keys = VectorMatrix(corpus.size(), model.dim());
  parallel_for(corpus.size(), [&](std::size_t b, std::size_t e) {
    for (std::size_t s = b; s < e; ++s) {
      const auto k = sentence_key(model, corpus.pairs[s].src);
      std::copy(k.begin(), k.end(), sd.keys.row(s).begin());
    }
  });
  std::uint64_t at = 0;
  for (const auto& p : corpus.pairs) {
    sd.spans.push_back({at, p.tgt.size()});
    at += p.tgt.size();
  }
  sd.index = IVFPQIndex::train(sd.keys, opt);
  sd.index.add(sd.keys, 0);
  return sd;
}

// "KSSD" u32 version u64 sentences u32 d u32 pad
// f32 keys[sentences x d] pad, {u64 start, u64 length}[sentences], embedded KSIX
inline constexpr std::uint32_t kSentenceStoreVersion = 1;

inline void save_sentence_datastore(const SentenceDatastore& sd, const std::filesystem::path& path) {
  auto os = open_for_write(path);
  BinaryWriter w(os);
  w.magic("KSSD");
  w.put<std::uint32_t>(kSentenceStoreVersion);
  w.put<std::uint64_t>(sd.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(sd.keys.dim()));
  w.put<std::uint32_t>(0);
  w.array<float>(sd.keys.data());
  w.pad8();
  for (const auto& s : sd.spans) {
    w.put<std::uint64_t>(s.start);
    w.put<std::uint64_t>(s.length);
  }
  write_index(w, sd.index);
  os.flush();
  if (!os) throw StorageError("failed writing " + path.string());
}

inline SentenceDatastore load_sentence_datastore(const std::filesystem::path& path) {
  auto is = open_for_read(path);
  BinaryReader r(is, 0, file_length(path));
  r.expect_magic("KSSD");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kSentenceStoreVersion) r.fail("unsupported sentence datastore version " + std::to_string(version));
  const auto n = r.get<std::uint64_t>("sentence count");
  const auto d = r.get<std::uint32_t>("d");
  r.get<std::uint32_t>("padding");
  r.check(d > 0, "sentence key dimension is zero");
  r.check(n < r.size() / 16, "sentence count exceeds file size");
  SentenceDatastore sd;
  sd.keys = VectorMatrix(n, d, r.array<float>(n * d, "sentence keys"));
  r.skip_pad8();
  const auto spans_at = r.offset();
  const auto raw = r.array<std::uint64_t>(2 * n, "spans");
  for (std::size_t s = 0; s < n; ++s) sd.spans.push_back({raw[2 * s], raw[2 * s + 1]});
  try {
    check_spans_tile(sd.spans, sd.token_count());
  } catch (const InvalidArgument& e) {
    throw FormatError(e.what(), spans_at);
  }
  sd.index = read_index(r);
  r.check(sd.index.total() == n, "sentence index size differs from sentence count");
  r.check(sd.index.d_raw() == d, "sentence index dimension differs from key dimension");
  r.check(r.at_end(), "trailing bytes after sentence datastore");
  return sd;
}

// ---------------------------------------------------------------------------
// Flat token codes

struct FlatCodeOptions {
  std::size_t M = kDefaultSubspaces;
  std::size_t L = kDefaultCodewords;
  bool use_opq = true;
  std::size_t pq_iters = 25;
  std::size_t opq_outer_iters = 20;
  std::size_t opq_pq_iters = 10;
  std::uint64_t seed = 0;
};

/// Non-residual PQ codes for every datastore token, optionally behind an OPQ
/// rotation. A single lookup table scores any subset of them.
struct FlatTokenCodes {
  std::size_t d = 0;
  std::optional<OPQTransform> opq;
  PQCodebook codebook;
  std::vector<std::uint8_t> codes;  // size() x M

  std::size_t M() const noexcept { return codebook.M(); }
  std::uint64_t size() const noexcept { return codebook.M() ? codes.size() / codebook.M() : 0; }

  Vector transform(std::span<const float> v) const {
    if (v.size() != d) throw InvalidArgument("flat codes: query dimension " + std::to_string(v.size()) + " != " + std::to_string(d));
    return opq ? apply_opq(*opq, v) : Vector(v.begin(), v.end());
  }

  std::span<const std::uint8_t> code(std::uint64_t id) const { return {codes.data() + id * M(), M()}; }

  friend bool operator==(const FlatTokenCodes&, const FlatTokenCodes&) = default;
};

inline FlatTokenCodes build_flat_codes(const KeyStore& keys, const FlatCodeOptions& opt) {
  if (keys.size() == 0) throw InvalidArgument("flat codes: empty key store");
  if (opt.M == 0 || keys.dim() % opt.M != 0) {
    throw InvalidArgument("flat codes: d=" + std::to_string(keys.dim()) + " not divisible by M=" + std::to_string(opt.M));
  }
  FlatTokenCodes fc;
  fc.d = keys.dim();
  const auto rows = sample_indices(keys.size(), kMaxPointsPerCentroid * opt.L, derive_seed(opt.seed, "flat/sample"));
  const auto sample = keys.read_sample(rows);
  if (opt.use_opq) {
    fc.opq = train_opq(sample, opt.M, opt.L, opt.opq_outer_iters, opt.opq_pq_iters, derive_seed(opt.seed, "flat/opq"));
    fc.codebook = fc.opq->codebook;
  } else {
    fc.codebook = train_pq(sample, opt.M, opt.L, opt.pq_iters, derive_seed(opt.seed, "flat/pq"));
  }
  fc.codes.reserve(keys.size() * opt.M);
  for (std::uint64_t c = 0; c < keys.chunks(); ++c) {
    auto chunk = keys.read_chunk(c);
    if (fc.opq) chunk = apply_opq(*fc.opq, chunk);
    const auto packed = encode_all(fc.codebook, chunk);
    fc.codes.insert(fc.codes.end(), packed.begin(), packed.end());
  }
  return fc;
}

// "KSPQ" u32 version u64 count u32 d u32 flags(bit0 opq)
// [OPQ section] codebook section, u8 codes[count x M], pad
inline constexpr std::uint32_t kFlatCodesVersion = 1;

inline void save_flat_codes(const FlatTokenCodes& fc, const std::filesystem::path& path) {
  auto os = open_for_write(path);
  BinaryWriter w(os);
  w.magic("KSPQ");
  w.put<std::uint32_t>(kFlatCodesVersion);
  w.put<std::uint64_t>(fc.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(fc.d));
  w.put<std::uint32_t>(fc.opq ? 1U : 0U);
  if (fc.opq) write_opq(w, *fc.opq);
  write_codebook(w, fc.codebook);
  w.array<std::uint8_t>(fc.codes);
  w.pad8();
  os.flush();
  if (!os) throw StorageError("failed writing " + path.string());
}

inline FlatTokenCodes load_flat_codes(const std::filesystem::path& path) {
  auto is = open_for_read(path);
  BinaryReader r(is, 0, file_length(path));
  r.expect_magic("KSPQ");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kFlatCodesVersion) r.fail("unsupported flat code version " + std::to_string(version));
  const auto count = r.get<std::uint64_t>("count");
  FlatTokenCodes fc;
  fc.d = r.get<std::uint32_t>("d");
  const auto flags = r.get<std::uint32_t>("flags");
  r.check(flags <= 1U, "unknown flat code flags");
  if (flags & 1U) {
    fc.opq = read_opq(r);
    r.check(fc.opq->d == fc.d, "OPQ dimension differs from d");
  }
  const auto cb_at = r.offset();
  fc.codebook = read_codebook(r);
  if (fc.codebook.dim() != fc.d) throw FormatError("codebook dimension differs from d", cb_at);
  r.check(count <= r.size() / fc.codebook.M(), "code count exceeds file size");
  const auto codes_at = r.offset();
  fc.codes = r.array<std::uint8_t>(count * fc.codebook.M(), "codes");
  for (std::size_t i = 0; i < fc.codes.size(); ++i) {
    if (fc.codes[i] >= fc.codebook.L()) throw FormatError("code entry exceeds codebook size", codes_at + i);
  }
  r.skip_pad8();
  r.check(r.at_end(), "trailing bytes after flat codes");
  return fc;
}

// ---------------------------------------------------------------------------
// Subset views

/// The tokens of the selected sentences, ascending by global token id.
struct SubsetView {
  std::vector<std::uint64_t> ids;
  std::vector<std::uint8_t> codes;  // ids.size() x M
  std::vector<TokenId> values;
  std::vector<std::size_t> sentences;  // ascending

  std::size_t size() const noexcept { return ids.size(); }
  bool empty() const noexcept { return ids.empty(); }
};

/// Materializes the union of the given sentences' spans.
inline SubsetView make_subset_view(const SentenceDatastore& sd, const FlatTokenCodes& fc, const TokenStore& values,
                                   std::vector<std::size_t> sentences) {
  if (fc.size() != values.size() || sd.token_count() != values.size()) {
    throw InvalidArgument("subset: sentence datastore, flat codes and values disagree on the token count");
  }
  std::sort(sentences.begin(), sentences.end());
  sentences.erase(std::unique(sentences.begin(), sentences.end()), sentences.end());
  SubsetView v;
  std::size_t total = 0;
  for (auto s : sentences) total += sd.spans.at(s).length;
  v.ids.reserve(total);
  v.values.reserve(total);
  v.codes.reserve(total * fc.M());
  for (auto s : sentences) {
    const auto span = sd.spans[s];
    for (std::uint64_t id = span.start; id < span.start + span.length; ++id) {
      v.ids.push_back(id);
      v.values.push_back(values.tokens[id]);
      const auto c = fc.code(id);
      v.codes.insert(v.codes.end(), c.begin(), c.end());
    }
  }
  v.sentences = std::move(sentences);
  return v;
}

/// Sentences nearest to the source by the sentence index. With n at least
/// the corpus size every sentence is taken.
inline std::vector<std::size_t> nearest_sentences(const SentenceDatastore& sd, const ModelAdapter& model,
                                                  std::span<const TokenId> src, std::size_t n, std::size_t nprobe) {
  if (sd.size() == 0) throw InvalidState("retrieve_subset: empty sentence datastore");
  if (n < 1) throw InvalidArgument("retrieve_subset: n must be >= 1");
  std::vector<std::size_t> out;
  if (n >= sd.size()) {
    out.resize(sd.size());
    std::iota(out.begin(), out.end(), 0);
    return out;
  }
  const auto hits = sd.index.search(sentence_key(model, src), {n, std::min(nprobe, sd.index.nlist())});
  for (const auto& h : hits) out.push_back(static_cast<std::size_t>(h.id));
  return out;
}

inline SubsetView retrieve_subset(const SentenceDatastore& sd, const FlatTokenCodes& fc, const TokenStore& values,
                                  const ModelAdapter& model, std::span<const TokenId> src,
                                  std::size_t n = kDefaultSubsetSentences, std::size_t nprobe = kDefaultNprobe) {
  return make_subset_view(sd, fc, values, nearest_sentences(sd, model, src, n, nprobe));
}

struct TokenHit {
  std::uint64_t id;
  float distance;
  TokenId value;
  friend bool operator==(const TokenHit&, const TokenHit&) = default;
};

/// Exhaustive ADC over the view with one lookup table. `q` lives in the
/// codebook's space.
inline std::vector<TokenHit> subset_search(const SubsetView& view, const PQCodebook& codebook, std::span<const float> q,
                                           std::size_t k) {
  if (view.empty()) throw InvalidState("subset_search: empty view");
  const auto lut = build_lut(codebook, q);
  const auto hits = adc_topk(lut, view.codes, k);
  std::vector<TokenHit> out;
  out.reserve(hits.size());
  for (const auto& h : hits) out.push_back({view.ids[h.id], h.distance, view.values[h.id]});
  return out;
}

/// Same, starting from a raw key.
inline std::vector<TokenHit> subset_search(const SubsetView& view, const FlatTokenCodes& fc, std::span<const float> key,
                                           std::size_t k) {
  return subset_search(view, fc.codebook, fc.transform(key), k);
}

}  // namespace knnseq
