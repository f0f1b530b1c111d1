#pragma once

// Parallel corpora, the value (KSVL) and key (KSKY) stores, length-sorted
// batch planning, the model adapter interface with a deterministic toy model,
// and the three build stages: store values, compute keys, build the index.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "knnseq/binio.hpp"
#include "knnseq/corevec.hpp"
#include "knnseq/ivf.hpp"

namespace knnseq {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr std::size_t kNumSpecial = 4;

// ---------------------------------------------------------------------------
// Corpus

struct SentencePair {
  TokenSeq src;
  TokenSeq tgt;
  friend bool operator==(const SentencePair&, const SentencePair&) = default;
};

struct ParallelCorpus {
  std::vector<SentencePair> pairs;
  std::size_t src_vocab = 0;
  std::size_t tgt_vocab = 0;

  std::size_t size() const noexcept { return pairs.size(); }
  bool empty() const noexcept { return pairs.empty(); }

  std::uint64_t target_tokens() const noexcept {
    std::uint64_t n = 0;
    for (const auto& p : pairs) n += p.tgt.size();
    return n;
  }

  std::size_t longest_target() const noexcept {
    std::size_t n = 0;
    for (const auto& p : pairs) n = std::max(n, p.tgt.size());
    return n;
  }

  /// Throws InvalidArgument naming the first offending sentence.
  void validate() const {
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const auto& p = pairs[i];
      const auto where = "corpus sentence " + std::to_string(i);
      if (p.src.empty()) throw InvalidArgument(where + ": empty source");
      if (p.tgt.empty()) throw InvalidArgument(where + ": empty target");
      for (TokenId t : p.src) {
        if (t >= src_vocab) {
          throw InvalidArgument(where + ": source id " + std::to_string(t) + " >= vocab " + std::to_string(src_vocab));
        }
      }
      for (TokenId t : p.tgt) {
        if (t >= tgt_vocab) {
          throw InvalidArgument(where + ": target id " + std::to_string(t) + " >= vocab " + std::to_string(tgt_vocab));
        }
      }
    }
  }

  friend bool operator==(const ParallelCorpus&, const ParallelCorpus&) = default;
};

namespace detail {

inline TokenSeq json_ids(const nlohmann::json& j, const char* field, std::size_t line, std::uint64_t at) {
  const auto it = j.find(field);
  if (it == j.end() || !it->is_array()) {
    throw FormatError("line " + std::to_string(line) + ": missing array field \"" + field + "\"", at);
  }
  TokenSeq out;
  out.reserve(it->size());
  for (const auto& v : *it) {
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0 || v.get<std::int64_t>() > 0xFFFFFFFELL) {
      throw FormatError("line " + std::to_string(line) + ": \"" + field + "\" must hold non-negative token ids", at);
    }
    out.push_back(static_cast<TokenId>(v.get<std::int64_t>()));
  }
  return out;
}

inline void infer_vocab(ParallelCorpus& c, std::size_t src_vocab, std::size_t tgt_vocab) {
  std::size_t ms = kNumSpecial, mt = kNumSpecial;
  for (const auto& p : c.pairs) {
    for (TokenId t : p.src) ms = std::max<std::size_t>(ms, t + 1);
    for (TokenId t : p.tgt) mt = std::max<std::size_t>(mt, t + 1);
  }
  c.src_vocab = src_vocab ? src_vocab : ms;
  c.tgt_vocab = tgt_vocab ? tgt_vocab : mt;
}

}  // namespace detail

/// One JSON object per line: {"src": [ids], "tgt": [ids]}. Vocabulary sizes
/// default to the largest id seen plus one.
inline ParallelCorpus parse_corpus_jsonl(std::istream& is, std::size_t src_vocab = 0, std::size_t tgt_vocab = 0) {
  ParallelCorpus c;
  std::string line;
  std::uint64_t at = 0;
  for (std::size_t n = 1; std::getline(is, line); ++n) {
    const std::uint64_t line_start = at;
    at += line.size() + 1;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("line " + std::to_string(n) + ": " + e.what(), line_start);
    }
    if (!j.is_object()) throw FormatError("line " + std::to_string(n) + ": expected a JSON object", line_start);
    c.pairs.push_back({detail::json_ids(j, "src", n, line_start), detail::json_ids(j, "tgt", n, line_start)});
  }
  detail::infer_vocab(c, src_vocab, tgt_vocab);
  c.validate();
  return c;
}

inline ParallelCorpus read_corpus_jsonl(const std::filesystem::path& path, std::size_t src_vocab = 0,
                                        std::size_t tgt_vocab = 0) {
  auto is = open_for_read(path);
  return parse_corpus_jsonl(is, src_vocab, tgt_vocab);
}

inline void write_corpus_jsonl(const ParallelCorpus& c, const std::filesystem::path& path) {
  auto os = open_for_write(path);
  for (const auto& p : c.pairs) os << nlohmann::json{{"src", p.src}, {"tgt", p.tgt}}.dump() << '\n';
  os.flush();
  if (!os) throw StorageError("failed writing " + path.string());
}

/// Word list with the four special entries first.
class Vocabulary {
 public:
  Vocabulary() : words_{"<pad>", "<s>", "</s>", "<unk>"} {
    for (std::size_t i = 0; i < words_.size(); ++i) ids_[words_[i]] = static_cast<TokenId>(i);
  }

  TokenId add(const std::string& w) {
    auto [it, fresh] = ids_.try_emplace(w, static_cast<TokenId>(words_.size()));
    if (fresh) words_.push_back(w);
    return it->second;
  }
  TokenId lookup(const std::string& w) const {
    const auto it = ids_.find(w);
    return it == ids_.end() ? kUnk : it->second;
  }
  const std::string& word(TokenId id) const { return words_.at(id); }
  std::size_t size() const noexcept { return words_.size(); }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> ids_;
};

struct TextCorpus {
  ParallelCorpus corpus;
  Vocabulary src;
  Vocabulary tgt;
};

/// Tab-separated "source<TAB>target" lines, whitespace tokenized. Each target
/// gets an end-of-sentence token appended.
inline TextCorpus read_corpus_text(const std::filesystem::path& path) {
  auto is = open_for_read(path);
  TextCorpus out;
  std::string line;
  std::uint64_t at = 0;
  for (std::size_t n = 1; std::getline(is, line); ++n) {
    const std::uint64_t line_start = at;
    at += line.size() + 1;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError("line " + std::to_string(n) + ": expected a tab separator", line_start);
    SentencePair p;
    std::istringstream s(line.substr(0, tab)), t(line.substr(tab + 1));
    for (std::string w; s >> w;) p.src.push_back(out.src.add(w));
    for (std::string w; t >> w;) p.tgt.push_back(out.tgt.add(w));
    p.tgt.push_back(kEos);
    out.corpus.pairs.push_back(std::move(p));
  }
  out.corpus.src_vocab = out.src.size();
  out.corpus.tgt_vocab = out.tgt.size();
  out.corpus.validate();
  return out;
}

struct SyntheticCorpusSpec {
  std::size_t sentences = 1000;
  std::size_t src_vocab = 512;
  std::size_t tgt_vocab = 512;
  std::size_t min_len = 5;
  std::size_t max_len = 20;
  std::uint64_t seed = 0;
};

/// Token-mapping translation task: source tokens are uniform over the
/// non-special ids, the target is a fixed seeded map of each source token,
/// followed by EOS.
inline ParallelCorpus make_synthetic_corpus(const SyntheticCorpusSpec& s) {
  if (s.src_vocab <= kNumSpecial || s.tgt_vocab <= kNumSpecial) {
    throw InvalidArgument("synthetic corpus: vocabularies must exceed the " + std::to_string(kNumSpecial) +
                          " special ids");
  }
  if (s.min_len < 1 || s.max_len < s.min_len) throw InvalidArgument("synthetic corpus: need 1 <= min_len <= max_len");
  std::mt19937_64 rng(derive_seed(s.seed, "corpus/map"));
  std::vector<TokenId> map(s.src_vocab - kNumSpecial);
  for (std::size_t i = 0; i < map.size(); ++i) map[i] = static_cast<TokenId>(kNumSpecial + i % (s.tgt_vocab - kNumSpecial));
  std::shuffle(map.begin(), map.end(), rng);

  rng.seed(derive_seed(s.seed, "corpus/sentences"));
  std::uniform_int_distribution<std::size_t> len(s.min_len, s.max_len);
  std::uniform_int_distribution<std::size_t> tok(0, map.size() - 1);
  ParallelCorpus c;
  c.src_vocab = s.src_vocab;
  c.tgt_vocab = s.tgt_vocab;
  c.pairs.resize(s.sentences);
  for (auto& p : c.pairs) {
    const std::size_t n = len(rng);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t x = tok(rng);
      p.src.push_back(static_cast<TokenId>(kNumSpecial + x));
      p.tgt.push_back(map[x]);
    }
    p.tgt.push_back(kEos);
  }
  return c;
}

// ---------------------------------------------------------------------------
// TokenStore (KSVL): the datastore values, corpus order, t ascending.
//
//   "KSVL" u32 version u64 count u64 sentences
//   u64 offsets[sentences + 1]  u32 tokens[count]  pad to 8

inline constexpr std::uint32_t kTokenStoreVersion = 1;

struct TokenStore {
  std::vector<TokenId> tokens;
  std::vector<std::uint64_t> offsets{0};

  std::uint64_t size() const noexcept { return tokens.size(); }
  std::size_t sentences() const noexcept { return offsets.size() - 1; }
  std::uint64_t start(std::size_t s) const { return offsets.at(s); }
  std::uint64_t length(std::size_t s) const { return offsets.at(s + 1) - offsets.at(s); }
  std::span<const TokenId> sentence(std::size_t s) const {
    return {tokens.data() + start(s), static_cast<std::size_t>(length(s))};
  }

  static TokenStore from_corpus(const ParallelCorpus& c) {
    TokenStore ts;
    ts.tokens.reserve(c.target_tokens());
    ts.offsets.reserve(c.size() + 1);
    for (const auto& p : c.pairs) {
      ts.tokens.insert(ts.tokens.end(), p.tgt.begin(), p.tgt.end());
      ts.offsets.push_back(ts.tokens.size());
    }
    return ts;
  }

  friend bool operator==(const TokenStore&, const TokenStore&) = default;
};

inline void save_token_store(const TokenStore& ts, const std::filesystem::path& path) {
  auto os = open_for_write(path);
  BinaryWriter w(os);
  w.magic("KSVL");
  w.put<std::uint32_t>(kTokenStoreVersion);
  w.put<std::uint64_t>(ts.size());
  w.put<std::uint64_t>(ts.sentences());
  w.array<std::uint64_t>(ts.offsets);
  w.array<TokenId>(ts.tokens);
  w.pad8();
  os.flush();
  if (!os) throw StorageError("failed writing " + path.string());
}

inline TokenStore load_token_store(const std::filesystem::path& path) {
  auto is = open_for_read(path);
  BinaryReader r(is, 0, file_length(path));
  r.expect_magic("KSVL");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kTokenStoreVersion) r.fail("unsupported token store version " + std::to_string(version));
  const auto count = r.get<std::uint64_t>("count");
  const auto sentences = r.get<std::uint64_t>("sentence count");
  if (sentences >= r.size() / 8) r.fail("sentence count exceeds file size");
  TokenStore ts;
  const auto off_at = r.offset();
  ts.offsets = r.array<std::uint64_t>(sentences + 1, "offsets");
  if (ts.offsets.front() != 0 || ts.offsets.back() != count) {
    throw FormatError("offsets do not span the token array", off_at);
  }
  for (std::size_t s = 0; s < sentences; ++s) {
    if (ts.offsets[s + 1] <= ts.offsets[s]) throw FormatError("offsets not strictly increasing", off_at + 8 * (s + 1));
  }
  ts.tokens = r.array<TokenId>(count, "tokens");
  r.skip_pad8();
  r.check(r.at_end(), "trailing bytes after token store");
  return ts;
}

/// Stage 1: write the values in corpus order.
inline TokenStore store_values(const ParallelCorpus& corpus, const std::filesystem::path& path) {
  if (corpus.empty()) throw InvalidArgument("store_values: empty corpus");
  corpus.validate();
  auto ts = TokenStore::from_corpus(corpus);
  save_token_store(ts, path);
  return ts;
}

// ---------------------------------------------------------------------------
// KeyStore (KSKY): count x d float32 rows, row i keys TokenStore entry i.
//
//   "KSKY" u32 version u32 d u8 dtype u8[3] pad u64 count u32 chunk_rows u32 pad
//   rows, row-major; chunk c covers rows [c * chunk_rows, (c + 1) * chunk_rows)

inline constexpr std::uint32_t kKeyStoreVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;
inline constexpr std::uint32_t kDefaultChunkRows = 65536;
inline constexpr std::uint64_t kKeyStoreHeaderBytes = 32;

/// Writes rows at their canonical positions in any order.
class KeyStoreWriter {
 public:
  KeyStoreWriter(const std::filesystem::path& path, std::size_t d, std::uint64_t count,
                 std::uint32_t chunk_rows = kDefaultChunkRows)
      : path_(path), d_(d), count_(count), os_(open_for_write(path)) {
    if (d == 0) throw InvalidArgument("key store: d must be >= 1");
    if (chunk_rows == 0) throw InvalidArgument("key store: chunk_rows must be >= 1");
    BinaryWriter w(os_);
    w.magic("KSKY");
    w.put<std::uint32_t>(kKeyStoreVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.put<std::uint8_t>(kDtypeF32);
    w.bytes("\0\0\0", 3);
    w.put<std::uint64_t>(count);
    w.put<std::uint32_t>(chunk_rows);
    w.put<std::uint32_t>(0);
  }

  void write_rows(std::uint64_t first_row, const VectorMatrix& rows) {
    if (rows.dim() != d_) throw InvalidArgument("key store: row dimension " + std::to_string(rows.dim()) + " != " + std::to_string(d_));
    if (first_row + rows.rows() > count_) throw InvalidArgument("key store: rows past the declared count");
    os_.seekp(static_cast<std::streamoff>(kKeyStoreHeaderBytes + first_row * d_ * sizeof(float)));
    os_.write(reinterpret_cast<const char*>(rows.data().data()), static_cast<std::streamsize>(rows.data().size_bytes()));
    if (!os_) throw StorageError("failed writing " + path_.string());
    written_ += rows.rows();
  }

  void finish() {
    if (written_ != count_) {
      throw InvalidState("key store: " + std::to_string(written_) + " of " + std::to_string(count_) + " rows written");
    }
    os_.flush();
    os_.close();
    if (!os_) throw StorageError("failed writing " + path_.string());
  }

 private:
  std::filesystem::path path_;
  std::size_t d_;
  std::uint64_t count_;
  std::uint64_t written_ = 0;
  std::ofstream os_;
};

/// Read-only view of a key store file. Every read opens its own stream, so
/// concurrent readers are fine.
class KeyStore {
 public:
  static KeyStore open(const std::filesystem::path& path) {
    auto is = open_for_read(path);
    const auto len = file_length(path);
    BinaryReader r(is, 0, len);
    r.expect_magic("KSKY");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kKeyStoreVersion) r.fail("unsupported key store version " + std::to_string(version));
    KeyStore ks;
    ks.path_ = path;
    ks.d_ = r.get<std::uint32_t>("d");
    if (ks.d_ == 0) r.fail("key dimension must be >= 1");
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype != kDtypeF32) r.fail("unsupported key dtype " + std::to_string(dtype));
    r.array<std::uint8_t>(3, "padding");
    const auto count_at = r.offset();
    ks.count_ = r.get<std::uint64_t>("count");
    ks.chunk_rows_ = r.get<std::uint32_t>("chunk_rows");
    if (ks.chunk_rows_ == 0) r.fail("chunk_rows must be >= 1");
    r.get<std::uint32_t>("padding");
    const auto row_bytes = ks.d_ * sizeof(float);
    if (ks.count_ > (len - kKeyStoreHeaderBytes) / row_bytes) {
      throw FormatError("truncated key store: header declares " + std::to_string(ks.count_) + " rows", count_at);
    }
    if (len != kKeyStoreHeaderBytes + ks.count_ * row_bytes) {
      throw FormatError("trailing bytes after key rows", kKeyStoreHeaderBytes + ks.count_ * row_bytes);
    }
    return ks;
  }

  std::size_t dim() const noexcept { return d_; }
  std::uint64_t size() const noexcept { return count_; }
  std::uint32_t chunk_rows() const noexcept { return chunk_rows_; }
  std::uint64_t chunks() const noexcept { return (count_ + chunk_rows_ - 1) / chunk_rows_; }
  const std::filesystem::path& path() const noexcept { return path_; }

  VectorMatrix read_rows(std::uint64_t first, std::uint64_t n) const {
    if (first + n > count_) throw InvalidArgument("key store: row range past the end");
    VectorMatrix out(n, d_);
    auto is = open_for_read(path_);
    is.seekg(static_cast<std::streamoff>(kKeyStoreHeaderBytes + first * d_ * sizeof(float)));
    is.read(reinterpret_cast<char*>(out.data().data()), static_cast<std::streamsize>(out.data().size_bytes()));
    if (!is) throw StorageError("failed reading " + path_.string());
    return out;
  }

  VectorMatrix read_chunk(std::uint64_t c) const {
    const std::uint64_t first = c * chunk_rows_;
    return read_rows(first, std::min<std::uint64_t>(chunk_rows_, count_ - first));
  }

  /// Rows at the given sorted indices, gathered in one streaming pass.
  VectorMatrix read_sample(const std::vector<std::size_t>& sorted_rows) const {
    VectorMatrix out(0, d_);
    out.reserve_rows(sorted_rows.size());
    std::size_t next = 0;
    for (std::uint64_t c = 0; c < chunks() && next < sorted_rows.size(); ++c) {
      const std::uint64_t first = c * chunk_rows_;
      const std::uint64_t end = std::min<std::uint64_t>(first + chunk_rows_, count_);
      if (sorted_rows[next] >= end) continue;
      const auto chunk = read_chunk(c);
      for (; next < sorted_rows.size() && sorted_rows[next] < end; ++next) out.append_row(chunk.row(sorted_rows[next] - first));
    }
    return out;
  }

 private:
  std::filesystem::path path_;
  std::size_t d_ = 0;
  std::uint64_t count_ = 0;
  std::uint32_t chunk_rows_ = kDefaultChunkRows;
};

// ---------------------------------------------------------------------------
// Batch planning

struct BatchPlan {
  std::vector<std::vector<std::size_t>> batches;
  std::size_t max_tokens = 0;

  /// Sum over batches of (sentences x longest target).
  std::uint64_t padded_tokens(const ParallelCorpus& c) const {
    std::uint64_t n = 0;
    for (const auto& b : batches) {
      std::size_t longest = 0;
      for (auto s : b) longest = std::max(longest, c.pairs[s].tgt.size());
      n += b.size() * longest;
    }
    return n;
  }

  std::uint64_t padding(const ParallelCorpus& c) const { return padded_tokens(c) - c.target_tokens(); }
};

namespace detail {

inline void check_max_tokens(const ParallelCorpus& c, std::size_t max_tokens) {
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (c.pairs[i].tgt.size() > max_tokens) {
      throw InvalidArgument("batch planning: sentence " + std::to_string(i) + " has " +
                            std::to_string(c.pairs[i].tgt.size()) + " target tokens, more than max_tokens=" +
                            std::to_string(max_tokens));
    }
  }
}

inline BatchPlan greedy_pack(const ParallelCorpus& c, const std::vector<std::size_t>& order, std::size_t max_tokens) {
  BatchPlan plan;
  plan.max_tokens = max_tokens;
  std::vector<std::size_t> cur;
  std::size_t longest = 0;
  for (auto s : order) {
    const std::size_t len = c.pairs[s].tgt.size();
    if (!cur.empty() && (cur.size() + 1) * std::max(longest, len) > max_tokens) {
      plan.batches.push_back(std::move(cur));
      cur.clear();
      longest = 0;
    }
    cur.push_back(s);
    longest = std::max(longest, len);
  }
  if (!cur.empty()) plan.batches.push_back(std::move(cur));
  return plan;
}

}  // namespace detail

/// Greedy packing in corpus order.
inline BatchPlan sequential_batches(const ParallelCorpus& c, std::size_t max_tokens) {
  detail::check_max_tokens(c, max_tokens);
  std::vector<std::size_t> order(c.size());
  std::iota(order.begin(), order.end(), 0);
  return detail::greedy_pack(c, order, max_tokens);
}

/// Sentences sorted by target length (ties by index), packed greedily. Greedy
/// packing of the sorted order can still pad more than the corpus-order
/// packing on small inputs (lengths [3,3,1], max_tokens=6), so the batch
/// sizes of the corpus-order packing are also dealt over the sorted order and
/// the plan with less padding wins. Dealing never increases any batch's
/// longest sentence, so the result never pads more than corpus order.
inline BatchPlan plan_batches(const ParallelCorpus& c, std::size_t max_tokens) {
  detail::check_max_tokens(c, max_tokens);
  std::vector<std::size_t> order(c.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return c.pairs[a].tgt.size() < c.pairs[b].tgt.size(); });
  auto greedy = detail::greedy_pack(c, order, max_tokens);

  auto seq = sequential_batches(c, max_tokens);
  std::vector<std::pair<std::size_t, std::size_t>> groups;  // (longest, size)
  for (const auto& b : seq.batches) {
    std::size_t longest = 0;
    for (auto s : b) longest = std::max(longest, c.pairs[s].tgt.size());
    groups.emplace_back(longest, b.size());
  }
  std::stable_sort(groups.begin(), groups.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  BatchPlan dealt;
  dealt.max_tokens = max_tokens;
  std::size_t pos = 0;
  for (const auto& g : groups) {
    dealt.batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(pos),
                               order.begin() + static_cast<std::ptrdiff_t>(pos + g.second));
    pos += g.second;
  }
  return dealt.padded_tokens(c) < greedy.padded_tokens(c) ? dealt : greedy;
}

/// Every sentence exactly once and every batch within budget.
inline void validate_plan(const ParallelCorpus& c, const BatchPlan& plan) {
  std::vector<char> seen(c.size(), 0);
  for (std::size_t b = 0; b < plan.batches.size(); ++b) {
    std::size_t longest = 0;
    for (auto s : plan.batches[b]) {
      if (s >= c.size()) throw InvalidArgument("batch plan: sentence index " + std::to_string(s) + " out of range");
      if (seen[s]++) throw InvalidArgument("batch plan: sentence " + std::to_string(s) + " appears twice");
      longest = std::max(longest, c.pairs[s].tgt.size());
    }
    if (plan.batches[b].size() * longest > plan.max_tokens) {
      throw InvalidArgument("batch plan: batch " + std::to_string(b) + " exceeds max_tokens");
    }
  }
  for (std::size_t s = 0; s < c.size(); ++s) {
    if (!seen[s]) throw InvalidArgument("batch plan: sentence " + std::to_string(s) + " missing");
  }
}

// ---------------------------------------------------------------------------
// Model adapter

class ModelAdapter {
 public:
  virtual ~ModelAdapter() = default;

  virtual std::size_t dim() const = 0;
  virtual std::size_t src_vocab() const = 0;
  virtual std::size_t tgt_vocab() const = 0;

  /// Key of the context that predicts the token after `prefix`. The prefix
  /// excludes the implicit begin-of-sequence token.
  virtual Vector context_key(std::span<const TokenId> src, std::span<const TokenId> prefix) const = 0;

  /// Next-token distribution over the target vocabulary.
  virtual std::vector<double> mt_distribution(std::span<const TokenId> src, std::span<const TokenId> prefix) const = 0;

  /// One row per source position.
  virtual VectorMatrix encoder_states(std::span<const TokenId> src) const = 0;

  /// Row t is context_key(src, tgt[0, t)), for every target position.
  virtual VectorMatrix target_keys(std::span<const TokenId> src, std::span<const TokenId> tgt) const {
    VectorMatrix out(0, dim());
    out.reserve_rows(tgt.size());
    for (std::size_t t = 0; t < tgt.size(); ++t) out.append_row(context_key(src, tgt.first(t)));
    return out;
  }
};

struct ToyModelSpec {
  std::size_t src_vocab = 512;
  std::size_t tgt_vocab = 512;
  std::size_t d = 64;
  std::uint64_t seed = 0;
  /// Weight of older prefix tokens relative to the newest one.
  float decay = 0.5F;
  /// Norm of every context key.
  float key_scale = 32.0F;
  /// Logit scale of the projection head.
  double logit_scale = 4.0;
  /// Share of the projection head in the blend with the bigram table.
  double head_weight = 0.5;
  double bigram_alpha = 0.1;
};

/// Deterministic stand-in for a translation model. Token embeddings come from
/// a seeded hash. The context key is the normalized sum of the normalized
/// source-embedding mean and an exponentially decayed running sum over the
/// embeddings of [BOS] + prefix, scaled to key_scale.
class ToyModel : public ModelAdapter {
 public:
  explicit ToyModel(const ToyModelSpec& spec) : spec_(spec) {
    if (spec.d < 8) throw InvalidArgument("toy model: d must be >= 8");
    if (spec.src_vocab <= kNumSpecial || spec.tgt_vocab <= kNumSpecial) {
      throw InvalidArgument("toy model: vocabularies must exceed the special ids");
    }
    if (!(spec.decay >= 0.0F && spec.decay < 1.0F)) throw InvalidArgument("toy model: decay must lie in [0, 1)");
    if (!(spec.key_scale > 0.0F)) throw InvalidArgument("toy model: key_scale must be > 0");
    if (!(spec.head_weight >= 0.0 && spec.head_weight <= 1.0)) throw InvalidArgument("toy model: head_weight must lie in [0, 1]");
    src_emb_ = embeddings(spec.src_vocab, "toy/src");
    tgt_emb_ = embeddings(spec.tgt_vocab, "toy/tgt");
    head_ = embeddings(spec.tgt_vocab, "toy/head");
  }

  /// Fits the bigram half of mt_distribution from target sequences.
  void fit_bigram(const ParallelCorpus& corpus) {
    reset_bigram();
    for (const auto& p : corpus.pairs) count_bigrams(p.tgt);
  }

  /// Same, from the stored values (the corpus targets in order).
  void fit_bigram(const TokenStore& values) {
    reset_bigram();
    for (std::size_t s = 0; s < values.sentences(); ++s) count_bigrams(values.sentence(s));
  }

  const ToyModelSpec& spec() const noexcept { return spec_; }
  std::size_t dim() const override { return spec_.d; }
  std::size_t src_vocab() const override { return spec_.src_vocab; }
  std::size_t tgt_vocab() const override { return spec_.tgt_vocab; }

  Vector context_key(std::span<const TokenId> src, std::span<const TokenId> prefix) const override {
    Vector state = start_state();
    for (TokenId t : prefix) advance(state, t);
    return finish_key(source_summary(src), state);
  }

  VectorMatrix target_keys(std::span<const TokenId> src, std::span<const TokenId> tgt) const override {
    const Vector summary = source_summary(src);
    VectorMatrix out(tgt.size(), spec_.d);
    Vector state = start_state();
    for (std::size_t t = 0; t < tgt.size(); ++t) {
      const Vector k = finish_key(summary, state);
      std::copy(k.begin(), k.end(), out.row(t).begin());
      advance(state, tgt[t]);
    }
    return out;
  }

  VectorMatrix encoder_states(std::span<const TokenId> src) const override {
    VectorMatrix out(0, spec_.d);
    out.reserve_rows(src.size());
    for (TokenId t : src) out.append_row(src_emb_.row(check_src(t)));
    return out;
  }

  std::vector<double> mt_distribution(std::span<const TokenId> src, std::span<const TokenId> prefix) const override {
    const Vector key = context_key(src, prefix);
    const std::size_t V = spec_.tgt_vocab;
    std::vector<double> head(V);
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < V; ++v) {
      double dot = 0.0;
      const auto h = head_.row(v);
      for (std::size_t j = 0; j < spec_.d; ++j) dot += double(h[j]) * key[j];
      head[v] = spec_.logit_scale * dot / spec_.key_scale;
      top = std::max(top, head[v]);
    }
    double z = 0.0;
    for (auto& x : head) z += (x = std::exp(x - top));

    const double w = bigram_.empty() ? 1.0 : spec_.head_weight;
    const TokenId prev = prefix.empty() ? kBos : prefix.back();
    std::vector<double> p(V);
    for (std::size_t v = 0; v < V; ++v) p[v] = w * head[v] / z;
    if (w < 1.0) {
      const double denom = double(bigram_total_[prev]) + spec_.bigram_alpha * double(V);
      const double base = spec_.bigram_alpha / denom;
      for (std::size_t v = 0; v < V; ++v) p[v] += (1.0 - w) * base;
      for (const auto& [v, n] : bigram_[prev]) p[v] += (1.0 - w) * double(n) / denom;
    }
    // Padding and BOS are never predicted.
    p[kPad] = 0.0;
    p[kBos] = 0.0;
    const double total = std::accumulate(p.begin(), p.end(), 0.0);
    for (auto& x : p) x /= total;
    return p;
  }

 private:
  void reset_bigram() {
    bigram_.assign(spec_.tgt_vocab, {});
    bigram_total_.assign(spec_.tgt_vocab, 0);
  }

  void count_bigrams(std::span<const TokenId> tgt) {
    TokenId prev = kBos;
    for (TokenId t : tgt) {
      if (t >= spec_.tgt_vocab) throw InvalidArgument("toy model: target id out of range in bigram corpus");
      ++bigram_[prev][t];
      ++bigram_total_[prev];
      prev = t;
    }
  }

  VectorMatrix embeddings(std::size_t n, std::string_view tag) const {
    const std::uint64_t base = derive_seed(spec_.seed, tag);
    VectorMatrix out(n, spec_.d);
    for (std::size_t v = 0; v < n; ++v) {
      auto row = out.row(v);
      double norm = 0.0;
      for (std::size_t j = 0; j < spec_.d; ++j) {
        const std::uint64_t h = mix64(base ^ mix64(v * spec_.d + j + 1));
        row[j] = static_cast<float>(double(h >> 11) * 0x1.0p-53 * 2.0 - 1.0);
        norm += double(row[j]) * row[j];
      }
      const float inv = static_cast<float>(1.0 / std::sqrt(norm));
      for (auto& x : row) x *= inv;
    }
    return out;
  }

  TokenId check_src(TokenId t) const {
    if (t >= spec_.src_vocab) throw InvalidArgument("toy model: source id " + std::to_string(t) + " out of range");
    return t;
  }

  Vector source_summary(std::span<const TokenId> src) const {
    if (src.empty()) throw InvalidArgument("toy model: empty source");
    std::vector<double> acc(spec_.d, 0.0);
    for (TokenId t : src) {
      const auto e = src_emb_.row(check_src(t));
      for (std::size_t j = 0; j < spec_.d; ++j) acc[j] += e[j];
    }
    double norm = 0.0;
    for (double x : acc) norm += x * x;
    Vector out(spec_.d);
    const double inv = norm > 0.0 ? 1.0 / std::sqrt(norm) : 0.0;
    for (std::size_t j = 0; j < spec_.d; ++j) out[j] = static_cast<float>(acc[j] * inv);
    return out;
  }

  Vector start_state() const {
    const auto e = tgt_emb_.row(kBos);
    return Vector(e.begin(), e.end());
  }

  void advance(Vector& state, TokenId t) const {
    if (t >= spec_.tgt_vocab) throw InvalidArgument("toy model: target id " + std::to_string(t) + " out of range");
    const auto e = tgt_emb_.row(t);
    for (std::size_t j = 0; j < spec_.d; ++j) state[j] = spec_.decay * state[j] + e[j];
  }

  Vector finish_key(const Vector& summary, const Vector& state) const {
    Vector k(spec_.d);
    double norm = 0.0;
    for (std::size_t j = 0; j < spec_.d; ++j) {
      k[j] = summary[j] + state[j];
      norm += double(k[j]) * k[j];
    }
    const double s = spec_.key_scale / std::sqrt(norm);
    for (auto& x : k) x = static_cast<float>(x * s);
    return k;
  }

  ToyModelSpec spec_;
  VectorMatrix src_emb_;
  VectorMatrix tgt_emb_;
  VectorMatrix head_;
  std::vector<std::unordered_map<TokenId, std::uint32_t>> bigram_;
  std::vector<std::uint64_t> bigram_total_;
};

/// A toy model, with its bigram table fit on `train` when given.
inline ToyModel toy_model(const ToyModelSpec& spec, const ParallelCorpus* train = nullptr) {
  ToyModel m(spec);
  if (train) m.fit_bigram(*train);
  return m;
}

inline void check_model_fits(const ModelAdapter& model, const ParallelCorpus& c) {
  if (model.src_vocab() < c.src_vocab || model.tgt_vocab() < c.tgt_vocab) {
    throw InvalidArgument("model vocabulary (" + std::to_string(model.src_vocab()) + ", " +
                          std::to_string(model.tgt_vocab()) + ") smaller than corpus vocabulary (" +
                          std::to_string(c.src_vocab) + ", " + std::to_string(c.tgt_vocab) + ")");
  }
}

// ---------------------------------------------------------------------------
// Stage 2: keys

/// Computes every key through the model, one batch at a time in plan order,
/// and writes each sentence's rows at its canonical position. The file does
/// not depend on the plan or on the thread count.
inline KeyStore compute_keys(const ModelAdapter& model, const ParallelCorpus& corpus, const BatchPlan& plan,
                             const std::filesystem::path& path, std::uint32_t chunk_rows = kDefaultChunkRows) {
  corpus.validate();
  check_model_fits(model, corpus);
  validate_plan(corpus, plan);
  const std::size_t d = model.dim();
  std::vector<std::uint64_t> first_row(corpus.size() + 1, 0);
  for (std::size_t s = 0; s < corpus.size(); ++s) first_row[s + 1] = first_row[s] + corpus.pairs[s].tgt.size();

  KeyStoreWriter writer(path, d, first_row.back(), chunk_rows);
  std::vector<VectorMatrix> buffers;
  for (const auto& batch : plan.batches) {
    buffers.assign(batch.size(), VectorMatrix());
    parallel_for(batch.size(), [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) {
        const auto& p = corpus.pairs[batch[i]];
        buffers[i] = model.target_keys(p.src, p.tgt);
      }
    });
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (buffers[i].dim() != d || buffers[i].rows() != corpus.pairs[batch[i]].tgt.size()) {
        throw InvalidArgument("compute_keys: model returned keys of the wrong shape");
      }
      writer.write_rows(first_row[batch[i]], buffers[i]);
    }
  }
  writer.finish();
  return KeyStore::open(path);
}

// ---------------------------------------------------------------------------
// Stage 3: index

struct StageTimings {
  double compute_keys = 0.0;
  double train_index = 0.0;
  double build_index = 0.0;

  double total() const noexcept { return compute_keys + train_index + build_index; }
};

inline constexpr std::array<const char*, 4> kTimingRows{"compute_keys", "train_index", "build_index", "total"};

inline std::string timing_text(const StageTimings& t) {
  const double v[] = {t.compute_keys, t.train_index, t.build_index, t.total()};
  std::ostringstream os;
  os << "stage          seconds\n";
  for (std::size_t i = 0; i < kTimingRows.size(); ++i) {
    char line[64];
    std::snprintf(line, sizeof line, "%-14s %.3f\n", kTimingRows[i], v[i]);
    os << line;
  }
  return os.str();
}

inline nlohmann::ordered_json timing_json(const StageTimings& t) {
  nlohmann::ordered_json j;
  j["compute_keys"] = t.compute_keys;
  j["train_index"] = t.train_index;
  j["build_index"] = t.build_index;
  j["total"] = t.total();
  return j;
}

inline StageTimings timing_from_json(const nlohmann::json& j) {
  StageTimings t;
  t.compute_keys = j.value("compute_keys", 0.0);
  t.train_index = j.value("train_index", 0.0);
  t.build_index = j.value("build_index", 0.0);
  return t;
}

/// Rows needed to train an index with these options.
inline std::size_t training_sample_size(const IVFPQOptions& opt) {
  return kMaxPointsPerCentroid * std::max(opt.nlist, opt.L);
}

/// Trains on a sample streamed from the key store, then adds every key chunk
/// by chunk with ids equal to the row numbers.
inline IVFPQIndex build_index(const KeyStore& keys, const IVFPQOptions& opt, const std::filesystem::path& path,
                              StageTimings* timings = nullptr) {
  using clock = std::chrono::steady_clock;
  if (keys.size() == 0) throw InvalidArgument("build_index: empty key store");
  validate_ivfpq_config(keys.dim(), opt);

  auto t0 = clock::now();
  const auto rows = sample_indices(keys.size(), training_sample_size(opt), derive_seed(opt.seed, "build/sample"));
  auto idx = IVFPQIndex::train(keys.read_sample(rows), opt);
  auto t1 = clock::now();
  for (std::uint64_t c = 0; c < keys.chunks(); ++c) idx.add(keys.read_chunk(c), c * keys.chunk_rows());
  save_index(idx, path);
  auto t2 = clock::now();
  if (timings) {
    timings->train_index = std::chrono::duration<double>(t1 - t0).count();
    timings->build_index = std::chrono::duration<double>(t2 - t1).count();
  }
  return idx;
}

struct DatastorePaths {
  std::filesystem::path values;
  std::filesystem::path keys;
  std::filesystem::path index;

  static DatastorePaths in(const std::filesystem::path& dir) {
    return {dir / "values.ksvl", dir / "keys.ksky", dir / "index.ksix"};
  }
};

/// All three stages with timings.
inline IVFPQIndex build_datastore(const ModelAdapter& model, const ParallelCorpus& corpus, const IVFPQOptions& opt,
                                  std::size_t max_tokens, const DatastorePaths& paths, StageTimings* timings = nullptr) {
  using clock = std::chrono::steady_clock;
  store_values(corpus, paths.values);
  auto t0 = clock::now();
  const auto keys = compute_keys(model, corpus, plan_batches(corpus, max_tokens), paths.keys);
  const double keys_s = std::chrono::duration<double>(clock::now() - t0).count();
  auto idx = build_index(keys, opt, paths.index, timings);
  if (timings) timings->compute_keys = keys_s;
  return idx;
}

}  // namespace knnseq
