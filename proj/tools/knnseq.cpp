// knnseq: build a kNN-MT datastore in stages, translate with it, query it,
// and benchmark the token index.
//
// Exit codes: 0 success, 2 usage or validation error (including missing
// inputs), 3 malformed data file, 4 internal invariant violation.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "knnseq/knnseq.hpp"

namespace fs = std::filesystem;
using namespace knnseq;
using ojson = nlohmann::ordered_json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitFormat = 3;
constexpr int kExitInvariant = 4;

struct Artifacts {
  fs::path dir;
  fs::path values, keys, index, model, key_timing, timing_json, timing_txt, sentences, flat;

  explicit Artifacts(const RunConfig& c) : dir(c.dir) {
    const auto p = DatastorePaths::in(dir);
    values = p.values;
    keys = p.keys;
    index = p.index;
    model = dir / "model.json";
    key_timing = dir / "keys.timing.json";
    timing_json = dir / "timing.json";
    timing_txt = dir / "timing.txt";
    sentences = dir / "sentences.kssd";
    flat = dir / "tokens.kspq";
  }
};

void log(const std::string& stage, const std::string& msg) { std::cerr << "[" << stage << "] " << msg << '\n'; }

void require_file(const fs::path& p, const std::string& what, const std::string& hint) {
  if (!fs::is_regular_file(p)) throw InvalidArgument(what + " not found at " + p.string() + " (" + hint + ")");
}

void write_text(const fs::path& path, const std::string& text) {
  auto os = open_for_write(path);
  os << text;
  os.flush();
  if (!os) throw StorageError("failed writing " + path.string());
}

nlohmann::json read_json(const fs::path& path) {
  auto is = open_for_read(path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what(), e.byte);
  }
}

ParallelCorpus load_corpus(const RunConfig& c) {
  if (c.corpus.empty()) throw InvalidArgument("--corpus is required");
  require_file(c.corpus, "corpus", "check --corpus");
  if (c.corpus_format == "jsonl") return read_corpus_jsonl(c.corpus);
  if (c.corpus_format == "text") return read_corpus_text(c.corpus).corpus;
  throw InvalidArgument("--corpus-format must be jsonl or text, got \"" + c.corpus_format + "\"");
}

TokenStore load_values(const Artifacts& a) {
  require_file(a.values, "value store", "run 'build values'");
  return load_token_store(a.values);
}

ToyModel load_model(const Artifacts& a, const TokenStore& values) {
  require_file(a.model, "model description", "run 'build keys'");
  ToyModel m(model_spec_from_json(read_json(a.model)));
  m.fit_bigram(values);
  return m;
}

KeyStore open_keys(const Artifacts& a) {
  require_file(a.keys, "key store", "run 'build keys'");
  return KeyStore::open(a.keys);
}

IVFPQIndex load_token_index(const Artifacts& a) {
  require_file(a.index, "token index", "run 'build index'");
  return load_index(a.index);
}

// ---------------------------------------------------------------------------

int cmd_gen_corpus(const RunConfig& c) {
  SyntheticCorpusSpec s;
  s.sentences = c.sentences;
  s.src_vocab = c.src_vocab;
  s.tgt_vocab = c.tgt_vocab;
  s.min_len = c.shortest;
  s.max_len = c.longest;
  s.seed = derive_seed(c.seed, seed_tag::kCorpus);
  const auto corpus = make_synthetic_corpus(s);
  const fs::path out = c.output.empty() ? fs::path(c.dir) / "corpus.jsonl" : fs::path(c.output);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_corpus_jsonl(corpus, out);
  log("gen-corpus", std::to_string(corpus.size()) + " sentences, " + std::to_string(corpus.target_tokens()) +
                        " target tokens -> " + out.string());
  return 0;
}

int cmd_build_values(const RunConfig& c) {
  const Artifacts a(c);
  const auto corpus = load_corpus(c);
  fs::create_directories(a.dir);
  const auto ts = store_values(corpus, a.values);
  log("build values", std::to_string(ts.size()) + " tokens in " + std::to_string(ts.sentences()) + " sentences -> " +
                          a.values.string());
  return 0;
}

int cmd_build_keys(const RunConfig& c) {
  const Artifacts a(c);
  const auto corpus = load_corpus(c);
  if (c.chunk_rows < 1 || c.chunk_rows > 0xFFFFFFFFULL) throw InvalidArgument("--chunk-rows must lie in [1, 2^32)");
  const auto spec = model_spec(c, corpus.src_vocab, corpus.tgt_vocab);
  const auto model = toy_model(spec, &corpus);
  const auto plan = plan_batches(corpus, c.max_tokens);
  fs::create_directories(a.dir);

  const auto t0 = std::chrono::steady_clock::now();
  const auto keys = compute_keys(model, corpus, plan, a.keys, static_cast<std::uint32_t>(c.chunk_rows));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  write_text(a.model, model_spec_json(spec).dump(2) + "\n");
  ojson t;
  t["compute_keys"] = secs;
  t["batches"] = plan.batches.size();
  t["padded_tokens"] = plan.padded_tokens(corpus);
  write_text(a.key_timing, t.dump(2) + "\n");
  log("build keys", std::to_string(keys.size()) + " keys (d=" + std::to_string(keys.dim()) + ") in " +
                        std::to_string(plan.batches.size()) + " batches, padding " +
                        std::to_string(plan.padding(corpus)) + " -> " + a.keys.string());
  return 0;
}

int cmd_build_index(const RunConfig& c) {
  const Artifacts a(c);
  const auto keys = open_keys(a);
  const auto opt = token_index_options(c);
  validate_ivfpq_config(keys.dim(), opt);
  if (opt.nlist > keys.size()) {
    throw InvalidArgument("--nlist=" + std::to_string(opt.nlist) + " exceeds the " + std::to_string(keys.size()) + " keys");
  }
  StageTimings t;
  if (fs::is_regular_file(a.key_timing)) t.compute_keys = timing_from_json(read_json(a.key_timing)).compute_keys;
  const auto idx = build_index(keys, opt, a.index, &t);
  if (idx.total() != keys.size()) throw InvalidState("index holds " + std::to_string(idx.total()) + " of " +
                                                     std::to_string(keys.size()) + " keys");
  write_text(a.timing_json, timing_json(t).dump(2) + "\n");
  write_text(a.timing_txt, timing_text(t));
  std::cout << timing_text(t);
  log("build index", std::to_string(idx.total()) + " keys, nlist=" + std::to_string(idx.nlist()) + ", M=" +
                         std::to_string(idx.M()) + (opt.use_opq ? ", OPQ" : "") + " -> " + a.index.string());
  return 0;
}

int cmd_build_sentence_index(const RunConfig& c) {
  const Artifacts a(c);
  const auto corpus = load_corpus(c);
  const auto values = load_values(a);
  const auto model = load_model(a, values);
  const auto keys = open_keys(a);
  if (values.size() != keys.size() || corpus.target_tokens() != keys.size()) {
    throw InvalidArgument("corpus, value store and key store disagree on the token count (" +
                          std::to_string(corpus.target_tokens()) + ", " + std::to_string(values.size()) + ", " +
                          std::to_string(keys.size()) + ")");
  }
  const auto sopt = sentence_index_options(c);
  validate_ivfpq_config(model.dim(), sopt);
  if (sopt.nlist > corpus.size()) {
    throw InvalidArgument("--sent-nlist=" + std::to_string(sopt.nlist) + " exceeds the " + std::to_string(corpus.size()) +
                          " sentences");
  }
  const auto fopt = flat_code_options(c);
  if (fopt.M == 0 || keys.dim() % fopt.M != 0) {
    throw InvalidArgument("--flat-M=" + std::to_string(fopt.M) + " must divide d=" + std::to_string(keys.dim()));
  }

  const auto sd = build_sentence_datastore(model, corpus, sopt);
  save_sentence_datastore(sd, a.sentences);
  const auto fc = build_flat_codes(keys, fopt);
  save_flat_codes(fc, a.flat);
  log("build sentence-index", std::to_string(sd.size()) + " sentences -> " + a.sentences.string() + ", " +
                                  std::to_string(fc.size()) + " token codes -> " + a.flat.string());
  return 0;
}

// ---------------------------------------------------------------------------

struct TranslateInput {
  std::vector<TokenSeq> sources;
  std::vector<TokenSeq> refs;  // empty unless every line has "tgt"
};

TranslateInput read_translate_input(const fs::path& path) {
  auto is = open_for_read(path);
  TranslateInput in;
  bool all_refs = true;
  std::string line;
  std::uint64_t at = 0;
  for (std::size_t n = 1; std::getline(is, line); ++n) {
    const std::uint64_t start = at;
    at += line.size() + 1;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(path.string() + " line " + std::to_string(n) + ": " + e.what(), start);
    }
    const auto ids = [&](const char* field) {
      TokenSeq out;
      for (const auto& v : j.at(field)) {
        if (!v.is_number_unsigned()) {
          throw FormatError(path.string() + " line " + std::to_string(n) + ": \"" + field + "\" must hold token ids", start);
        }
        out.push_back(v.get<TokenId>());
      }
      return out;
    };
    if (!j.is_object() || !j.contains("src") || !j["src"].is_array()) {
      throw FormatError(path.string() + " line " + std::to_string(n) + ": expected {\"src\": [ids], ...}", start);
    }
    in.sources.push_back(ids("src"));
    if (in.sources.back().empty()) throw InvalidArgument(path.string() + " line " + std::to_string(n) + ": empty source");
    if (j.contains("tgt") && j["tgt"].is_array()) {
      in.refs.push_back(ids("tgt"));
    } else {
      all_refs = false;
    }
  }
  if (!all_refs) in.refs.clear();
  return in;
}

int cmd_translate(const RunConfig& c) {
  const Artifacts a(c);
  const bool base_only = c.mode == "none";
  RunConfig kc = c;
  if (base_only) kc.mode = "vanilla";
  const auto knn = knn_config(kc);
  const auto dec = decode_options(c);

  std::string input = c.input;
  if (input.empty()) {
    if (c.corpus_format != "jsonl") throw InvalidArgument("--input is required unless --corpus is jsonl");
    input = c.corpus;
  }
  if (input.empty()) throw InvalidArgument("--input or --corpus is required");
  require_file(input, "translation input", "check --input");

  const auto values = load_values(a);
  const auto model = load_model(a, values);
  std::optional<IVFPQIndex> index;
  std::optional<SentenceDatastore> sd;
  std::optional<FlatTokenCodes> fc;
  std::unique_ptr<Retriever> retriever;
  if (!base_only && knn.mode == RetrievalMode::vanilla) {
    index = load_token_index(a);
    retriever = std::make_unique<IndexRetriever>(*index, values, knn.nprobe);
  } else if (!base_only) {
    require_file(a.sentences, "sentence datastore", "subset mode needs 'build sentence-index'");
    require_file(a.flat, "flat token codes", "subset mode needs 'build sentence-index'");
    sd = load_sentence_datastore(a.sentences);
    fc = load_flat_codes(a.flat);
    if (fc->d != model.dim() || sd->keys.dim() != model.dim()) {
      throw InvalidArgument("sentence datastore dimension does not match the model");
    }
    retriever = std::make_unique<SubsetRetriever>(*sd, *fc, values, model, knn.subset_n, knn.nprobe);
  }

  const auto in = read_translate_input(input);
  log("translate", std::to_string(in.sources.size()) + " sources, mode " + c.mode);
  const auto t0 = std::chrono::steady_clock::now();
  const auto out = translate_all(model, retriever.get(), in.sources, knn, dec);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const fs::path out_path = c.output.empty() ? a.dir / "translations.jsonl" : fs::path(c.output);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  std::ostringstream records;
  std::uint64_t tokens = 0;
  std::size_t fallbacks = 0;
  std::vector<std::size_t> subset_sizes;
  std::vector<TokenSeq> hyps;
  for (const auto& t : out) {
    records << translation_record(t).dump() << '\n';
    tokens += t.hyp.size();
    fallbacks += t.warning.has_value();
    if (t.subset_size) subset_sizes.push_back(*t.subset_size);
    hyps.push_back(t.hyp);
  }
  write_text(out_path, records.str());

  ojson s;
  s["mode"] = c.mode;
  s["retrieval"] = "per-hypothesis";
  s["k"] = knn.k;
  s["tau"] = knn.tau;
  s["lambda"] = knn.lambda;
  s["nprobe"] = knn.nprobe;
  if (!base_only && knn.mode == RetrievalMode::subset) s["n"] = knn.subset_n;
  s["beam"] = dec.beam;
  s["sentences"] = out.size();
  s["tokens"] = tokens;
  s["wall_seconds"] = wall;
  s["tok_per_sec"] = wall > 0.0 ? double(tokens) / wall : 0.0;
  if (!in.refs.empty()) s["accuracy"] = token_accuracy(hyps, in.refs);
  if (!subset_sizes.empty()) {
    std::uint64_t sum = 0;
    for (auto n : subset_sizes) sum += n;
    s["subset_tokens"] = {{"min", *std::min_element(subset_sizes.begin(), subset_sizes.end())},
                          {"mean", double(sum) / double(subset_sizes.size())},
                          {"max", *std::max_element(subset_sizes.begin(), subset_sizes.end())}};
  }
  s["fallbacks"] = fallbacks;
  s["output"] = out_path.string();
  fs::path summary_path = out_path;
  summary_path.replace_extension(".summary.json");
  write_text(summary_path, s.dump(2) + "\n");
  std::cout << s.dump(2) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_search(const RunConfig& c) {
  const Artifacts a(c);
  const auto knn = knn_config(c);
  const auto values = load_values(a);
  const auto src = parse_id_list(c.src);
  const auto prefix = parse_id_list(c.prefix);
  const TokenSeq src_ids(src.begin(), src.end());
  const TokenSeq prefix_ids(prefix.begin(), prefix.end());

  std::optional<ToyModel> model;
  if (!src_ids.empty()) model = load_model(a, values);
  Vector query;
  if (c.row >= 0) {
    const auto keys = open_keys(a);
    if (std::uint64_t(c.row) >= keys.size()) {
      throw InvalidArgument("--row=" + std::to_string(c.row) + " past the " + std::to_string(keys.size()) + " keys");
    }
    const auto r = keys.read_rows(std::uint64_t(c.row), 1);
    query.assign(r.row(0).begin(), r.row(0).end());
  } else if (model) {
    query = model->context_key(src_ids, prefix_ids);
  } else {
    throw InvalidArgument("search needs --row or --src");
  }

  ojson j;
  j["mode"] = mode_name(knn.mode);
  j["k"] = knn.k;
  ojson hits = ojson::array();
  if (knn.mode == RetrievalMode::vanilla) {
    const auto index = load_token_index(a);
    if (index.total() != values.size()) throw InvalidArgument("token index and value store disagree on the token count");
    j["nprobe"] = knn.nprobe;
    for (const auto& h : index.search(query, {knn.k, knn.nprobe})) {
      hits.push_back({{"id", h.id}, {"distance", h.distance}, {"value", values.tokens[h.id]}});
    }
  } else {
    if (!model) throw InvalidArgument("subset search needs --src to select sentences");
    require_file(a.sentences, "sentence datastore", "subset mode needs 'build sentence-index'");
    require_file(a.flat, "flat token codes", "subset mode needs 'build sentence-index'");
    const auto sd = load_sentence_datastore(a.sentences);
    const auto fc = load_flat_codes(a.flat);
    const auto view = retrieve_subset(sd, fc, values, *model, src_ids, knn.subset_n, knn.nprobe);
    j["n"] = knn.subset_n;
    j["subset_size"] = view.size();
    for (const auto& h : subset_search(view, fc, query, knn.k)) {
      hits.push_back({{"id", h.id}, {"distance", h.distance}, {"value", h.value}});
    }
  }
  j["hits"] = hits;
  std::cout << j.dump(2) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_bench(const RunConfig& c, bool recall) {
  const Artifacts a(c);
  if (c.k < 1) throw InvalidArgument("--k must be >= 1");
  const auto index = load_token_index(a);
  const auto keys = open_keys(a);
  if (keys.dim() != index.d_raw()) {
    throw InvalidArgument("ground truth dimension mismatch: key store d=" + std::to_string(keys.dim()) + ", index d=" +
                          std::to_string(index.d_raw()));
  }
  if (c.queries < 1) throw InvalidArgument("--queries must be >= 1");
  std::vector<std::size_t> nprobes = parse_id_list(c.nprobes);
  if (nprobes.empty()) nprobes = recall ? nprobe_ladder(index.nlist()) : std::vector<std::size_t>{c.nprobe};

  auto rows = sample_indices(keys.size(), std::min<std::size_t>(c.queries, keys.size()), derive_seed(c.seed, seed_tag::kBench));
  std::sort(rows.begin(), rows.end());
  const auto queries = keys.read_sample(rows);
  std::optional<GroundTruth> truth;
  if (recall) {
    log("bench recall", "exact ground truth for " + std::to_string(queries.rows()) + " queries over " +
                            std::to_string(keys.size()) + " keys");
    truth = exact_knn(keys, queries, c.k);
  }
  const auto result = run_bench(index, queries, c.k, nprobes, truth ? &*truth : nullptr, c.repeat);
  if (c.csv.empty()) {
    write_bench_csv(std::cout, result);
  } else {
    auto os = open_for_write(c.csv);
    write_bench_csv(os, result);
    if (!os.flush()) throw StorageError("failed writing " + c.csv);
  }
  if (recall) check_recall_monotone(result);
  return 0;
}

// ---------------------------------------------------------------------------

template <class T>
void add_field(CLI::App& app, const std::string& name, T* p, const std::string& help) {
  if constexpr (std::is_same_v<T, bool>) {
    app.add_flag("--" + name, *p, help)->default_str(*p ? "true" : "false");
  } else if constexpr (std::is_same_v<T, std::string>) {
    app.add_option("--" + name, *p, help)->default_str(p->empty() ? "\"\"" : *p);
  } else {
    app.add_option("--" + name, *p, help);
  }
}

std::optional<std::string> config_path_from(int argc, char** argv) {
  std::optional<std::string> path;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--config" && i + 1 < argc) path = argv[i + 1];
    if (arg.rfind("--config=", 0) == 0) path = arg.substr(9);
  }
  return path;
}

int fail(int code, const std::string& msg) {
  std::cerr << "knnseq: error: " << msg << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  RunConfig cfg;
  CLI::App app{"knnseq: kNN-MT datastore build, translation, search and benchmarks"};
  app.option_defaults()->always_capture_default();
  app.fallthrough();
  app.require_subcommand(1);
  app.footer(
      "Precedence: flags, then the --config JSON file (keys equal flag names), then defaults.\n"
      "Stage seeds: mix64(seed ^ fnv1a64(tag)) for the tags corpus, model, index,\n"
      "sentence-index, flat-codes and bench. Boolean flags also accept --flag=false.\n"
      "Exit codes: 0 ok, 2 usage/validation, 3 malformed data, 4 invariant violation.");

  std::string config_path;
  app.add_option("--config", config_path, "JSON config file");
  for (auto& f : config_fields(cfg)) {
    std::visit([&](auto* p) { add_field(app, f.name, p, f.help); }, f.ptr);
  }

  auto* gen = app.add_subcommand("gen-corpus", "write a synthetic parallel corpus as jsonl");
  auto* build = app.add_subcommand("build", "datastore build stages");
  build->require_subcommand(1);
  auto* b_values = build->add_subcommand("values", "store the target tokens (values.ksvl)");
  auto* b_keys = build->add_subcommand("keys", "compute context keys (keys.ksky, model.json)");
  auto* b_index = build->add_subcommand("index", "train and fill the IVFPQ token index (index.ksix, timing report)");
  auto* b_sent = build->add_subcommand("sentence-index", "sentence datastore and flat token codes for subset mode");
  auto* translate = app.add_subcommand("translate", "beam search with kNN interpolation (mode none|vanilla|subset)");
  auto* search = app.add_subcommand("search", "nearest datastore tokens for one query");
  auto* bench = app.add_subcommand("bench", "token index benchmarks, CSV output");
  bench->require_subcommand(1);
  auto* b_recall = bench->add_subcommand("recall", "recall@k against brute-force ground truth per nprobe");
  auto* b_speed = bench->add_subcommand("speed", "latency percentiles and throughput per nprobe");

  try {
    if (const auto path = config_path_from(argc, argv)) load_config_file(cfg, *path);
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  } catch (const FormatError& e) {
    return fail(kExitFormat, e.what());
  } catch (const std::exception& e) {
    return fail(kExitUsage, e.what());
  }

  try {
    if (cfg.threads < 1) throw InvalidArgument("--threads must be >= 1");
    set_num_threads(static_cast<unsigned>(cfg.threads));
    if (*gen) return cmd_gen_corpus(cfg);
    if (*b_values) return cmd_build_values(cfg);
    if (*b_keys) return cmd_build_keys(cfg);
    if (*b_index) return cmd_build_index(cfg);
    if (*b_sent) return cmd_build_sentence_index(cfg);
    if (*translate) return cmd_translate(cfg);
    if (*search) return cmd_search(cfg);
    if (*b_recall) return cmd_bench(cfg, true);
    if (*b_speed) return cmd_bench(cfg, false);
    return fail(kExitUsage, "no command given");
  } catch (const InvalidArgument& e) {
    return fail(kExitUsage, e.what());
  } catch (const StorageError& e) {
    return fail(kExitUsage, e.what());
  } catch (const FormatError& e) {
    return fail(kExitFormat, e.what());
  } catch (const InvalidState& e) {
    return fail(kExitInvariant, e.what());
  } catch (const std::exception& e) {
    return fail(kExitInvariant, e.what());
  }
}
