#pragma once

// kNN-interpolated decoding: the retrieval distribution, its linear mix with
// the model distribution, and beam search over a ModelAdapter with optional
// per-hypothesis retrieval from an IVFPQ index or a per-source subset.

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "knnseq/datastore.hpp"
#include "knnseq/ivf.hpp"
#include "knnseq/subset.hpp"

namespace knnseq {

inline constexpr double kDefaultTau = 100.0;
inline constexpr double kDefaultLambda = 0.4;
inline constexpr double kProbFloor = 1e-12;

enum class RetrievalMode { vanilla, subset };

inline const char* mode_name(RetrievalMode m) { return m == RetrievalMode::vanilla ? "vanilla" : "subset"; }

struct KNNConfig {
  std::size_t k = kDefaultK;
  double tau = kDefaultTau;
  double lambda = kDefaultLambda;
  std::size_t nprobe = kDefaultNprobe;
  std::size_t subset_n = kDefaultSubsetSentences;
  RetrievalMode mode = RetrievalMode::vanilla;

  void validate() const {
    if (k < 1) throw InvalidArgument("k must be >= 1");
    if (!(tau > 0.0) || !std::isfinite(tau)) throw InvalidArgument("tau must be a positive number");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidArgument("lambda must lie in [0, 1]");
    if (nprobe < 1) throw InvalidArgument("nprobe must be >= 1");
    if (subset_n < 1) throw InvalidArgument("subset size n must be >= 1");
  }
};

struct RetrievedToken {
  TokenId value;
  float distance;
  friend bool operator==(const RetrievedToken&, const RetrievedToken&) = default;
};

using NeighborSet = std::vector<RetrievedToken>;

/// exp(-d/tau) summed per value and normalized. Returns nullopt for an empty
/// set, leaving the caller to use the model distribution alone.
inline std::optional<std::vector<double>> pknn(const NeighborSet& neighbors, double tau, std::size_t vocab_size) {
  if (!(tau > 0.0)) throw InvalidArgument("pknn: tau must be > 0");
  if (neighbors.empty()) return std::nullopt;
  // Shifting by the smallest distance cancels in the normalization and keeps
  // exp() away from underflow when every distance is large.
  double dmin = std::numeric_limits<double>::infinity();
  for (const auto& n : neighbors) {
    if (n.value >= vocab_size) {
      throw InvalidArgument("pknn: value " + std::to_string(n.value) + " outside vocabulary of " + std::to_string(vocab_size));
    }
    if (!(n.distance >= 0.0F)) throw InvalidArgument("pknn: distances must be non-negative");
    dmin = std::min(dmin, double(n.distance));
  }
  std::vector<double> p(vocab_size, 0.0);
  double z = 0.0;
  for (const auto& n : neighbors) {
    const double w = std::exp(-(double(n.distance) - dmin) / tau);
    p[n.value] += w;
    z += w;
  }
  for (auto& x : p) x /= z;
  return p;
}

/// lambda * p_knn + (1 - lambda) * p_mt.
inline std::vector<double> interpolate(const std::vector<double>& p_knn, const std::vector<double>& p_mt, double lambda) {
  if (p_knn.size() != p_mt.size()) {
    throw InvalidArgument("interpolate: length mismatch (" + std::to_string(p_knn.size()) + " vs " + std::to_string(p_mt.size()) + ")");
  }
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidArgument("interpolate: lambda must lie in [0, 1]");
  std::vector<double> out(p_mt.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = lambda * p_knn[i] + (1.0 - lambda) * p_mt[i];
  return out;
}

// ---------------------------------------------------------------------------
// Retrieval back ends

/// Retrieval state for one source sentence.
class SourceRetrieval {
 public:
  virtual ~SourceRetrieval() = default;
  virtual NeighborSet search(std::span<const float> query, std::size_t k) = 0;
  /// Tokens reachable for this source, when restricted to a subset.
  virtual std::optional<std::size_t> subset_size() const { return std::nullopt; }
};

class Retriever {
 public:
  virtual ~Retriever() = default;
  virtual std::unique_ptr<SourceRetrieval> open(std::span<const TokenId> src) const = 0;
};

/// Searches the IVFPQ token index; ids map to values through the TokenStore.
class IndexRetriever : public Retriever {
 public:
  IndexRetriever(const IVFPQIndex& index, const TokenStore& values, std::size_t nprobe)
      : index_(index), values_(values), nprobe_(nprobe) {
    if (index.total() != values.size()) {
      throw InvalidArgument("index holds " + std::to_string(index.total()) + " keys but the value store " +
                            std::to_string(values.size()));
    }
    if (nprobe < 1 || nprobe > index.nlist()) {
      throw InvalidArgument("nprobe=" + std::to_string(nprobe) + " outside [1, nlist=" + std::to_string(index.nlist()) + "]");
    }
  }

  std::unique_ptr<SourceRetrieval> open(std::span<const TokenId>) const override {
    struct Impl : SourceRetrieval {
      const IndexRetriever* r;
      explicit Impl(const IndexRetriever* p) : r(p) {}
      NeighborSet search(std::span<const float> q, std::size_t k) override {
        NeighborSet out;
        for (const auto& h : r->index_.search(q, {k, r->nprobe_})) out.push_back({r->values_.tokens[h.id], h.distance});
        return out;
      }
    };
    return std::make_unique<Impl>(this);
  }

 private:
  const IVFPQIndex& index_;
  const TokenStore& values_;
  std::size_t nprobe_;
};

/// Builds the subset view once per source, then scans it per query.
class SubsetRetriever : public Retriever {
 public:
  SubsetRetriever(const SentenceDatastore& sd, const FlatTokenCodes& codes, const TokenStore& values,
                  const ModelAdapter& model, std::size_t n, std::size_t nprobe)
      : sd_(sd), codes_(codes), values_(values), model_(model), n_(n), nprobe_(nprobe) {
    if (codes.size() != values.size() || sd.token_count() != values.size()) {
      throw InvalidArgument("sentence datastore, flat codes and values disagree on the token count");
    }
    if (n < 1) throw InvalidArgument("subset size n must be >= 1");
  }

  std::unique_ptr<SourceRetrieval> open(std::span<const TokenId> src) const override {
    struct Impl : SourceRetrieval {
      const FlatTokenCodes* codes;
      SubsetView view;
      NeighborSet search(std::span<const float> q, std::size_t k) override {
        NeighborSet out;
        if (view.empty()) return out;
        for (const auto& h : subset_search(view, *codes, q, k)) out.push_back({h.value, h.distance});
        return out;
      }
      std::optional<std::size_t> subset_size() const override { return view.size(); }
    };
    auto impl = std::make_unique<Impl>();
    impl->codes = &codes_;
    impl->view = retrieve_subset(sd_, codes_, values_, model_, src, n_, nprobe_);
    return impl;
  }

 private:
  const SentenceDatastore& sd_;
  const FlatTokenCodes& codes_;
  const TokenStore& values_;
  const ModelAdapter& model_;
  std::size_t n_;
  std::size_t nprobe_;
};

// ---------------------------------------------------------------------------
// Decoding

struct Hypothesis {
  TokenSeq prefix;
  double logp = 0.0;
  bool finished = false;
  std::vector<std::size_t> knn_hits;
};

struct DecodeOptions {
  std::size_t beam = 5;
  double length_penalty = 1.0;
  /// 0 means 2 * |src| + 10.
  std::size_t max_len = 0;
};

struct Translation {
  TokenSeq src;
  TokenSeq hyp;
  double score = 0.0;
  std::size_t steps = 0;
  std::vector<std::size_t> knn_hits;
  std::optional<std::size_t> subset_size;
  std::optional<std::string> warning;
};

/// Next-token distribution for one hypothesis. Retrieval is skipped entirely
/// at lambda = 0.
inline std::vector<double> step_distribution(const ModelAdapter& model, SourceRetrieval* retrieval,
                                             std::span<const TokenId> src, std::span<const TokenId> prefix,
                                             const KNNConfig& cfg, std::size_t* hits) {
  auto p_mt = model.mt_distribution(src, prefix);
  *hits = 0;
  if (retrieval == nullptr || cfg.lambda == 0.0) return p_mt;
  const auto neighbors = retrieval->search(model.context_key(src, prefix), cfg.k);
  *hits = neighbors.size();
  const auto p_knn = pknn(neighbors, cfg.tau, p_mt.size());
  if (!p_knn) return p_mt;
  return interpolate(*p_knn, p_mt, cfg.lambda);
}

inline double final_score(const Hypothesis& h, double length_penalty) {
  return h.logp / std::pow(double(std::max<std::size_t>(h.prefix.size(), 1)), length_penalty);
}

/// Beam search. Each step expands every live hypothesis by its top 2 * beam
/// tokens. An EOS candidate ranked within the first beam candidates joins the
/// finished set, which keeps the beam best by length-normalized score.
/// Decoding stops when the finished set is full and the best live
/// hypothesis no longer beats its worst member, or at max_len.
inline Translation translate(const ModelAdapter& model, const Retriever* retriever, std::span<const TokenId> src,
                             const KNNConfig& cfg, const DecodeOptions& opt = {}) {
  cfg.validate();
  if (opt.beam < 1) throw InvalidArgument("beam must be >= 1");
  if (!(opt.length_penalty >= 0.0)) throw InvalidArgument("length penalty must be >= 0");
  if (src.empty()) throw InvalidArgument("translate: empty source");

  Translation out;
  out.src.assign(src.begin(), src.end());
  std::unique_ptr<SourceRetrieval> retrieval;
  if (retriever && cfg.lambda > 0.0) {
    retrieval = retriever->open(src);
    out.subset_size = retrieval->subset_size();
    if (out.subset_size && *out.subset_size == 0) out.warning = "empty subset, decoding with the model distribution alone";
  }

  const std::size_t max_len = opt.max_len ? opt.max_len : 2 * src.size() + 10;
  const std::size_t width = 2 * opt.beam;
  const double lp = opt.length_penalty;
  std::vector<Hypothesis> live(1);
  std::vector<Hypothesis> finished;
  auto better = [lp](const Hypothesis& a, const Hypothesis& b) { return final_score(a, lp) > final_score(b, lp); };

  struct Candidate {
    double logp;
    std::size_t hyp;
    TokenId token;
  };
  std::vector<Candidate> cands;
  std::vector<std::size_t> hits;
  std::vector<std::size_t> order;

  for (std::size_t step = 0; step < max_len && !live.empty(); ++step) {
    cands.clear();
    hits.assign(live.size(), 0);
    for (std::size_t h = 0; h < live.size(); ++h) {
      const auto p = step_distribution(model, retrieval.get(), src, live[h].prefix, cfg, &hits[h]);
      order.resize(p.size());
      std::iota(order.begin(), order.end(), 0);
      const std::size_t top = std::min(width, p.size());
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top), order.end(),
                        [&](std::size_t a, std::size_t b) { return p[a] > p[b] || (p[a] == p[b] && a < b); });
      for (std::size_t i = 0; i < top; ++i) {
        cands.push_back({live[h].logp + std::log(std::max(p[order[i]], kProbFloor)), h, static_cast<TokenId>(order[i])});
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.logp > b.logp; });

    std::vector<Hypothesis> next;
    for (std::size_t rank = 0; rank < cands.size() && next.size() < opt.beam; ++rank) {
      const auto& c = cands[rank];
      if (c.token == kEos && rank >= opt.beam) continue;
      Hypothesis h = live[c.hyp];
      h.prefix.push_back(c.token);
      h.logp = c.logp;
      h.knn_hits.push_back(hits[c.hyp]);
      if (c.token == kEos) {
        h.finished = true;
        finished.insert(std::upper_bound(finished.begin(), finished.end(), h, better), std::move(h));
        if (finished.size() > opt.beam) finished.pop_back();
      } else {
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
    out.steps = step + 1;
    if (finished.size() == opt.beam && !live.empty() &&
        live.front().logp / std::pow(double(step + 1), lp) <= final_score(finished.back(), lp)) {
      break;
    }
  }
  // Unfinished hypotheses compete only when they would enter the finished set.
  for (auto& h : live) {
    if (finished.size() < opt.beam || better(h, finished.back())) {
      finished.insert(std::upper_bound(finished.begin(), finished.end(), h, better), std::move(h));
      if (finished.size() > opt.beam) finished.pop_back();
    }
  }

  const Hypothesis& best = finished.front();
  out.hyp = best.prefix;
  out.score = final_score(best, lp);
  out.knn_hits = best.knn_hits;
  return out;
}

/// Translates every source; sources run in parallel, results keep input order.
inline std::vector<Translation> translate_all(const ModelAdapter& model, const Retriever* retriever,
                                              const std::vector<TokenSeq>& sources, const KNNConfig& cfg,
                                              const DecodeOptions& opt = {}) {
  std::vector<Translation> out(sources.size());
  parallel_for(sources.size(), [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) out[i] = translate(model, retriever, sources[i], cfg, opt);
  });
  return out;
}

inline nlohmann::ordered_json translation_record(const Translation& t) {
  nlohmann::ordered_json j;
  j["src"] = t.src;
  j["hyp"] = t.hyp;
  j["score"] = t.score;
  j["steps"] = t.steps;
  j["knn_hits"] = t.knn_hits;
  if (t.subset_size) j["subset_size"] = *t.subset_size;
  if (t.warning) j["warning"] = *t.warning;
  return j;
}

/// Position-wise matches over the total reference length.
inline double token_accuracy(const std::vector<TokenSeq>& hyps, const std::vector<TokenSeq>& refs) {
  if (hyps.size() != refs.size()) throw InvalidArgument("token_accuracy: hypothesis and reference counts differ");
  std::uint64_t hit = 0, total = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    total += refs[i].size();
    for (std::size_t t = 0; t < std::min(hyps[i].size(), refs[i].size()); ++t) hit += hyps[i][t] == refs[i][t];
  }
  return total ? double(hit) / double(total) : 0.0;
}

}  // namespace knnseq
