#pragma once

// Run configuration for the command-line tool: one table of named fields
// feeds the JSON config loader, the flag parser and --help.

#include <cstdint>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"
#include "knnseq/datastore.hpp"
#include "knnseq/generate.hpp"
#include "knnseq/ivf.hpp"
#include "knnseq/subset.hpp"

namespace knnseq {

/// Per-stage seeds: derive_seed(seed, tag) with these tags.
namespace seed_tag {
inline constexpr std::string_view kCorpus = "corpus";
inline constexpr std::string_view kModel = "model";
inline constexpr std::string_view kIndex = "index";
inline constexpr std::string_view kSentenceIndex = "sentence-index";
inline constexpr std::string_view kFlatCodes = "flat-codes";
inline constexpr std::string_view kBench = "bench";
}  // namespace seed_tag

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string dir = "knnseq-out";
  std::string corpus;
  std::string corpus_format = "jsonl";
  std::string input;
  std::string output;

  std::size_t d = 64;
  double key_scale = 32.0;
  double decay = 0.5;

  std::size_t max_tokens = 4096;
  std::size_t chunk_rows = kDefaultChunkRows;
  std::size_t nlist = 131072;
  std::size_t M = kDefaultSubspaces;
  std::size_t L = kDefaultCodewords;
  bool opq = false;
  std::size_t pca_dim = 0;
  std::size_t kmeans_iters = 25;
  std::size_t pq_iters = 25;
  std::size_t opq_iters = 20;
  std::size_t sent_nlist = 32768;
  std::size_t sent_M = kDefaultSubspaces;
  bool sent_opq = true;
  std::size_t flat_M = kDefaultSubspaces;
  bool flat_opq = true;

  std::size_t k = kDefaultK;
  std::size_t nprobe = kDefaultNprobe;
  double tau = kDefaultTau;
  double lambda = kDefaultLambda;
  std::size_t n = kDefaultSubsetSentences;
  std::string mode = "vanilla";
  std::size_t beam = 5;
  double lenpen = 1.0;
  std::size_t max_len = 0;

  std::size_t queries = 200;
  std::string nprobes;
  std::size_t repeat = 1;
  std::string csv;

  std::string src;
  std::string prefix;
  std::int64_t row = -1;

  std::size_t sentences = 1000;
  std::size_t src_vocab = 512;
  std::size_t tgt_vocab = 512;
  std::size_t shortest = 5;
  std::size_t longest = 20;
};

// The seed is a std::uint64_t field held through the std::size_t alternative.
static_assert(std::is_same_v<std::size_t, std::uint64_t>, "config fields assume a 64-bit size_t");
using FieldPtr = std::variant<std::size_t*, std::int64_t*, double*, bool*, std::string*>;

struct Field {
  std::string name;
  std::string help;
  FieldPtr ptr;
};

/// Every configurable field. Config file keys equal flag names.
inline std::vector<Field> config_fields(RunConfig& c) {
  return {
      {"seed", "master seed; stage seeds derive from it", &c.seed},
      {"threads", "worker threads", &c.threads},
      {"dir", "artifact directory", &c.dir},
      {"corpus", "parallel corpus file", &c.corpus},
      {"corpus-format", "jsonl or text (tab-separated words)", &c.corpus_format},
      {"input", "sources to translate (jsonl); defaults to --corpus", &c.input},
      {"output", "output file", &c.output},
      {"d", "key dimension of the toy model", &c.d},
      {"key-scale", "norm of toy model keys", &c.key_scale},
      {"decay", "prefix decay of the toy model", &c.decay},
      {"max-tokens", "padded target tokens per key batch", &c.max_tokens},
      {"chunk-rows", "rows per key store chunk", &c.chunk_rows},
      {"nlist", "IVF lists of the token index", &c.nlist},
      {"M", "PQ subspaces of the token index", &c.M},
      {"L", "codewords per subspace", &c.L},
      {"opq", "OPQ rotation before the token index", &c.opq},
      {"pca-dim", "PCA output dimension, 0 for none", &c.pca_dim},
      {"kmeans-iters", "coarse k-means iterations", &c.kmeans_iters},
      {"pq-iters", "PQ k-means iterations", &c.pq_iters},
      {"opq-iters", "OPQ outer iterations", &c.opq_iters},
      {"sent-nlist", "IVF lists of the sentence index", &c.sent_nlist},
      {"sent-M", "PQ subspaces of the sentence index", &c.sent_M},
      {"sent-opq", "OPQ rotation before the sentence index", &c.sent_opq},
      {"flat-M", "PQ subspaces of the flat token codes", &c.flat_M},
      {"flat-opq", "OPQ rotation before the flat token codes", &c.flat_opq},
      {"k", "neighbors per query", &c.k},
      {"nprobe", "IVF lists probed per query", &c.nprobe},
      {"tau", "kNN temperature", &c.tau},
      {"lambda", "kNN interpolation weight", &c.lambda},
      {"n", "sentences per subset", &c.n},
      {"mode", "none (model only), vanilla or subset", &c.mode},
      {"beam", "beam size", &c.beam},
      {"lenpen", "length penalty exponent", &c.lenpen},
      {"max-len", "decode step limit, 0 for 2*|src|+10", &c.max_len},
      {"queries", "benchmark queries sampled from the key store", &c.queries},
      {"nprobes", "comma-separated nprobe values; empty: powers of two up to nlist (recall) or --nprobe (speed)", &c.nprobes},
      {"repeat", "timed passes per nprobe value", &c.repeat},
      {"csv", "CSV output file, empty for stdout", &c.csv},
      {"src", "source token ids, space-separated", &c.src},
      {"prefix", "target prefix token ids, space-separated", &c.prefix},
      {"row", "key store row to use as the query, -1 for none", &c.row},
      {"sentences", "synthetic corpus size", &c.sentences},
      {"src-vocab", "synthetic source vocabulary", &c.src_vocab},
      {"tgt-vocab", "synthetic target vocabulary", &c.tgt_vocab},
      {"shortest", "shortest synthetic source", &c.shortest},
      {"longest", "longest synthetic source", &c.longest},
  };
}

/// Overwrites fields named in `j`. Unknown keys and wrong types throw.
inline void apply_config_json(RunConfig& c, const nlohmann::json& j) {
  if (!j.is_object()) throw InvalidArgument("config: top level must be a JSON object");
  auto fields = config_fields(c);
  for (const auto& [key, value] : j.items()) {
    auto it = std::find_if(fields.begin(), fields.end(), [&](const Field& f) { return f.name == key; });
    if (it == fields.end()) throw InvalidArgument("config: unknown key \"" + key + "\"");
    const auto bad = [&](const char* want) { return InvalidArgument("config: \"" + key + "\" must be " + want); };
    std::visit(
        [&](auto* p) {
          using T = std::remove_pointer_t<decltype(p)>;
          if constexpr (std::is_same_v<T, bool>) {
            if (!value.is_boolean()) throw bad("a boolean");
          } else if constexpr (std::is_same_v<T, std::string>) {
            if (!value.is_string()) throw bad("a string");
          } else if constexpr (std::is_same_v<T, double>) {
            if (!value.is_number()) throw bad("a number");
          } else if constexpr (std::is_signed_v<T>) {
            if (!value.is_number_integer()) throw bad("an integer");
          } else {
            if (!value.is_number_unsigned()) throw bad("a non-negative integer");
          }
          *p = value.get<T>();
        },
        it->ptr);
  }
}

inline void load_config_file(RunConfig& c, const std::filesystem::path& path) {
  auto is = open_for_read(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("config " + path.string() + ": " + e.what(), e.byte);
  }
  apply_config_json(c, j);
}

inline RetrievalMode parse_mode(const std::string& m) {
  if (m == "vanilla") return RetrievalMode::vanilla;
  if (m == "subset") return RetrievalMode::subset;
  throw InvalidArgument("mode must be vanilla or subset, got \"" + m + "\"");
}

inline KNNConfig knn_config(const RunConfig& c) {
  KNNConfig k;
  k.k = c.k;
  k.tau = c.tau;
  k.lambda = c.lambda;
  k.nprobe = c.nprobe;
  k.subset_n = c.n;
  k.mode = parse_mode(c.mode);
  k.validate();
  return k;
}

inline DecodeOptions decode_options(const RunConfig& c) {
  if (c.beam < 1) throw InvalidArgument("beam must be >= 1");
  if (!(c.lenpen >= 0.0)) throw InvalidArgument("lenpen must be >= 0");
  return {c.beam, c.lenpen, c.max_len};
}

inline IVFPQOptions token_index_options(const RunConfig& c) {
  IVFPQOptions o;
  o.nlist = c.nlist;
  o.M = c.M;
  o.L = c.L;
  o.use_opq = c.opq;
  o.pca_dim = c.pca_dim;
  o.kmeans_iters = c.kmeans_iters;
  o.pq_iters = c.pq_iters;
  o.opq_outer_iters = c.opq_iters;
  o.seed = derive_seed(c.seed, seed_tag::kIndex);
  return o;
}

inline IVFPQOptions sentence_index_options(const RunConfig& c) {
  IVFPQOptions o = default_sentence_index_options();
  o.nlist = c.sent_nlist;
  o.M = c.sent_M;
  o.L = c.L;
  o.use_opq = c.sent_opq;
  o.kmeans_iters = c.kmeans_iters;
  o.pq_iters = c.pq_iters;
  o.opq_outer_iters = c.opq_iters;
  o.seed = derive_seed(c.seed, seed_tag::kSentenceIndex);
  return o;
}

inline FlatCodeOptions flat_code_options(const RunConfig& c) {
  FlatCodeOptions o;
  o.M = c.flat_M;
  o.L = c.L;
  o.use_opq = c.flat_opq;
  o.pq_iters = c.pq_iters;
  o.opq_outer_iters = c.opq_iters;
  o.seed = derive_seed(c.seed, seed_tag::kFlatCodes);
  return o;
}

inline ToyModelSpec model_spec(const RunConfig& c, std::size_t src_vocab, std::size_t tgt_vocab) {
  ToyModelSpec s;
  s.src_vocab = src_vocab;
  s.tgt_vocab = tgt_vocab;
  s.d = c.d;
  s.seed = derive_seed(c.seed, seed_tag::kModel);
  s.key_scale = static_cast<float>(c.key_scale);
  s.decay = static_cast<float>(c.decay);
  return s;
}

inline nlohmann::ordered_json model_spec_json(const ToyModelSpec& s) {
  nlohmann::ordered_json j;
  j["src_vocab"] = s.src_vocab;
  j["tgt_vocab"] = s.tgt_vocab;
  j["d"] = s.d;
  j["seed"] = s.seed;
  j["key_scale"] = s.key_scale;
  j["decay"] = s.decay;
  return j;
}

inline ToyModelSpec model_spec_from_json(const nlohmann::json& j) {
  ToyModelSpec s;
  try {
    s.src_vocab = j.at("src_vocab").get<std::size_t>();
    s.tgt_vocab = j.at("tgt_vocab").get<std::size_t>();
    s.d = j.at("d").get<std::size_t>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.key_scale = j.at("key_scale").get<float>();
    s.decay = j.at("decay").get<float>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model description: ") + e.what(), 0);
  }
  return s;
}

/// Space- or comma-separated non-negative integers.
inline std::vector<std::size_t> parse_id_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::string tok;
  auto flush = [&] {
    if (tok.empty()) return;
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(tok, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != tok.size() || tok[0] == '-') throw InvalidArgument("expected a non-negative integer, got \"" + tok + "\"");
    out.push_back(static_cast<std::size_t>(v));
    tok.clear();
  };
  for (char ch : s) {
    if (ch == ' ' || ch == ',' || ch == '\t') {
      flush();
    } else {
      tok.push_back(ch);
    }
  }
  flush();
  return out;
}

}  // namespace knnseq
