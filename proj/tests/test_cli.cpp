#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <sstream>

#include "json.hpp"
#include "knnseq/datastore.hpp"
#include "test_util.hpp"

namespace knnseq {
namespace {

using testing::scratch_dir;
using testing::slurp;
using testing::spit;

namespace fs = std::filesystem;

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(KNNSEQ_CLI) + " " + args + " 2>/dev/null";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  for (std::size_t n; (n = fread(buf, 1, sizeof buf, p)) > 0;) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

// Small settings shared by every pipeline run.
const std::string kSmall = "--seed 3 --d 16 --nlist 8 --M 4 --L 16 --kmeans-iters 8 --pq-iters 8 --opq-iters 3 "
                           "--sent-nlist 4 --sent-M 4 --flat-M 4 --nprobe 4 --k 16 --n 20";

std::string build_all(const fs::path& dir, const fs::path& corpus, const std::string& extra = "") {
  const std::string common = "--dir " + dir.string() + " --corpus " + corpus.string() + " " + kSmall + " " + extra;
  for (const char* stage : {"build values", "build keys", "build index", "build sentence-index"}) {
    const auto r = run(common + " " + stage);
    if (r.code != 0) return std::string(stage) + " exited " + std::to_string(r.code);
  }
  return "";
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = scratch_dir("cli");
    corpus_ = root_ / "corpus.jsonl";
    ASSERT_EQ(run("gen-corpus --seed 1 --sentences 150 --src-vocab 64 --tgt-vocab 64 --shortest 3 --longest 10 --output " +
                  corpus_.string())
                  .code,
              0);
    ASSERT_EQ(build_all(root_ / "a", corpus_), "");
  }

  static std::string common(const std::string& sub = "a") {
    return "--dir " + (root_ / sub).string() + " --corpus " + corpus_.string() + " " + kSmall;
  }

  static inline fs::path root_;
  static inline fs::path corpus_;
};

TEST_F(Cli, HelpListsEveryFlagWithDefaults) {
  const auto r = run("--help");
  EXPECT_EQ(r.code, 0);
  for (const char* want : {"--k UINT [64]", "--nprobe UINT [32]", "--tau FLOAT [100]", "--lambda FLOAT [0.4]",
                           "--n UINT [512]", "--M UINT [64]", "--seed UINT [0]", "--threads UINT [1]",
                           "--opq [false]", "--config"}) {
    EXPECT_NE(r.out.find(want), std::string::npos) << want;
  }
  for (const auto& l : lines(r.out)) {
    if (l.rfind("  --", 0) == 0 && l.find("--config") == std::string::npos) {
      EXPECT_NE(l.find('['), std::string::npos) << "no default shown: " << l;
    }
  }
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("build").code, 2);
  EXPECT_EQ(run("build index --nlist notanumber").code, 2);
  EXPECT_EQ(run("build values --corpus " + (root_ / "missing.jsonl").string()).code, 2);
  EXPECT_EQ(run("build values").code, 2);
  EXPECT_EQ(run(common() + " translate --lambda 1.5").code, 2);
  EXPECT_EQ(run(common() + " translate --mode sideways").code, 2);
  EXPECT_EQ(run(common() + " build index --nlist 100000").code, 2);
  EXPECT_EQ(run(common() + " --threads 0 build values").code, 2);
  EXPECT_EQ(run(common() + " search").code, 2);
}

TEST_F(Cli, PipelineArtifactsAndTimingReport) {
  const auto dir = root_ / "a";
  for (const char* f : {"values.ksvl", "keys.ksky", "index.ksix", "model.json", "timing.json", "timing.txt",
                        "sentences.kssd", "tokens.kspq"}) {
    EXPECT_TRUE(fs::is_regular_file(dir / f)) << f;
  }
  const auto corpus = read_corpus_jsonl(corpus_);
  EXPECT_EQ(load_index(dir / "index.ksix").total(), corpus.target_tokens());
  EXPECT_EQ(load_token_store(dir / "values.ksvl"), TokenStore::from_corpus(corpus));
  const auto text = lines(slurp(dir / "timing.txt"));
  ASSERT_EQ(text.size(), 5U);
  const char* rows[] = {"compute_keys", "train_index", "build_index", "total"};
  for (int i = 0; i < 4; ++i) EXPECT_EQ(text[i + 1].substr(0, text[i + 1].find(' ')), rows[i]);
  const auto j = nlohmann::ordered_json::parse(slurp(dir / "timing.json"));
  std::vector<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.push_back(k);
  EXPECT_EQ(keys, (std::vector<std::string>{"compute_keys", "train_index", "build_index", "total"}));
  EXPECT_NEAR(j["total"].get<double>(),
              j["compute_keys"].get<double>() + j["train_index"].get<double>() + j["build_index"].get<double>(), 1e-9);
}

TEST_F(Cli, OpqIndexSharesTheKeyStageTiming) {
  const auto dir = root_ / "opq";
  fs::create_directories(dir);
  for (const char* f : {"values.ksvl", "keys.ksky", "keys.timing.json", "model.json"}) fs::copy_file(root_ / "a" / f, dir / f);
  const auto r = run(common("opq") + " build index --opq");
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("compute_keys"), std::string::npos);
  const auto plain = nlohmann::json::parse(slurp(root_ / "a" / "timing.json"));
  const auto opq = nlohmann::json::parse(slurp(dir / "timing.json"));
  EXPECT_EQ(plain["compute_keys"], opq["compute_keys"]);
  EXPECT_NE(slurp(root_ / "a" / "index.ksix"), slurp(dir / "index.ksix"));
  EXPECT_TRUE(load_index(dir / "index.ksix").opq().has_value());
}

TEST_F(Cli, RerunIsByteIdenticalAndInputsAreUntouched) {
  const auto before = slurp(corpus_);
  ASSERT_EQ(build_all(root_ / "b", corpus_), "");
  for (const char* f : {"values.ksvl", "keys.ksky", "index.ksix", "model.json", "sentences.kssd", "tokens.kspq"}) {
    EXPECT_EQ(slurp(root_ / "a" / f), slurp(root_ / "b" / f)) << f;
  }
  EXPECT_EQ(slurp(corpus_), before);
}

TEST_F(Cli, TranslateModesAndSummary) {
  const auto out = root_ / "t";
  const auto van = run(common() + " translate --output " + (out / "van.jsonl").string());
  ASSERT_EQ(van.code, 0);
  const auto sub = run(common() + " translate --mode subset --output " + (out / "sub.jsonl").string());
  ASSERT_EQ(sub.code, 0);
  const auto none = run(common() + " translate --mode none --output " + (out / "none.jsonl").string());
  ASSERT_EQ(none.code, 0);
  const auto l0 = run(common() + " translate --lambda 0 --output " + (out / "l0.jsonl").string());
  ASSERT_EQ(l0.code, 0);

  // Lambda 0 matches the model-only run in every hyp field.
  const auto a = lines(slurp(out / "l0.jsonl"));
  const auto b = lines(slurp(out / "none.jsonl"));
  ASSERT_EQ(a.size(), 150U);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(nlohmann::json::parse(a[i])["hyp"], nlohmann::json::parse(b[i])["hyp"]);
  }

  for (const char* name : {"van", "sub"}) {
    const auto s = nlohmann::json::parse(slurp(out / (std::string(name) + ".summary.json")));
    EXPECT_EQ(s["retrieval"], "per-hypothesis");
    const double tokens = s["tokens"].get<double>();
    const double wall = s["wall_seconds"].get<double>();
    EXPECT_GT(s["tok_per_sec"].get<double>(), 0.0);
    EXPECT_NEAR(s["tok_per_sec"].get<double>(), tokens / wall, 0.01 * tokens / wall);
    std::uint64_t counted = 0;
    for (const auto& l : lines(slurp(out / (std::string(name) + ".jsonl")))) {
      counted += nlohmann::json::parse(l)["hyp"].size();
    }
    EXPECT_EQ(s["tokens"].get<std::uint64_t>(), counted);
    EXPECT_GT(s["accuracy"].get<double>(), nlohmann::json::parse(slurp(out / "none.summary.json"))["accuracy"].get<double>());
  }
  const auto s = nlohmann::json::parse(slurp(out / "sub.summary.json"));
  EXPECT_EQ(s["mode"], "subset");
  EXPECT_TRUE(s.contains("subset_tokens"));
  EXPECT_TRUE(nlohmann::json::parse(lines(slurp(out / "sub.jsonl"))[0]).contains("subset_size"));
}

TEST_F(Cli, MissingArtifactsForTheModeExitTwo) {
  const auto dir = root_ / "partial";
  fs::create_directories(dir);
  for (const char* f : {"values.ksvl", "keys.ksky", "model.json", "index.ksix"}) fs::copy_file(root_ / "a" / f, dir / f);
  EXPECT_EQ(run(common("partial") + " translate --mode subset").code, 2);
  EXPECT_EQ(run(common("partial") + " translate --mode vanilla --output " + (dir / "o.jsonl").string()).code, 0);
  fs::remove(dir / "index.ksix");
  EXPECT_EQ(run(common("partial") + " translate --mode vanilla").code, 2);
}

TEST_F(Cli, CorruptArtifactsExitThree) {
  const auto dir = root_ / "corrupt";
  fs::create_directories(dir);
  for (const char* f : {"values.ksvl", "keys.ksky", "model.json", "index.ksix"}) fs::copy_file(root_ / "a" / f, dir / f);
  const auto bytes = slurp(dir / "index.ksix");
  spit(dir / "index.ksix", bytes.substr(0, bytes.size() / 2));
  EXPECT_EQ(run(common("corrupt") + " translate").code, 3);
  spit(dir / "model.json", "{not json");
  EXPECT_EQ(run(common("corrupt") + " translate").code, 3);
  spit(root_ / "bad_corpus.jsonl", "{\"src\": [4]}\n");
  EXPECT_EQ(run("--dir " + dir.string() + " --corpus " + (root_ / "bad_corpus.jsonl").string() + " build values").code, 3);
}

TEST_F(Cli, ConfigFilePrecedence) {
  const auto dir = root_ / "cfg";
  fs::create_directories(dir);
  for (const char* f : {"values.ksvl", "keys.ksky", "model.json"}) fs::copy_file(root_ / "a" / f, dir / f);
  spit(root_ / "cfg.json", R"({"nlist": 4, "M": 2, "L": 16, "kmeans-iters": 5, "pq-iters": 5, "dir": ")" +
                               dir.string() + R"("})");
  ASSERT_EQ(run("--config " + (root_ / "cfg.json").string() + " build index").code, 0);
  EXPECT_EQ(load_index(dir / "index.ksix").nlist(), 4U);
  EXPECT_EQ(load_index(dir / "index.ksix").M(), 2U);
  // A flag, before or after the subcommand, beats the file.
  ASSERT_EQ(run("--config " + (root_ / "cfg.json").string() + " build index --nlist 2").code, 0);
  EXPECT_EQ(load_index(dir / "index.ksix").nlist(), 2U);
  ASSERT_EQ(run("--nlist 3 --config=" + (root_ / "cfg.json").string() + " build index").code, 0);
  EXPECT_EQ(load_index(dir / "index.ksix").nlist(), 3U);
  spit(root_ / "bad_cfg.json", R"({"nlistt": 4})");
  EXPECT_EQ(run("--config " + (root_ / "bad_cfg.json").string() + " build index").code, 2);
  spit(root_ / "broken_cfg.json", R"({"nlist": )");
  EXPECT_EQ(run("--config " + (root_ / "broken_cfg.json").string() + " build index").code, 3);
}

TEST_F(Cli, SearchPrintsHits) {
  const auto r = run(common() + " search --row 3");
  ASSERT_EQ(r.code, 0);
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["hits"].size(), 16U);
  EXPECT_EQ(j["hits"][0]["id"], 3);
  EXPECT_EQ(run(common() + " search --row 3 --k 5").code, 2);  // repeated flag
  const auto corpus = read_corpus_jsonl(corpus_);
  const auto& p = corpus.pairs[0];
  std::string src;
  for (auto t : p.src) src += (src.empty() ? "" : " ") + std::to_string(t);
  const auto s = run(common() + " search --mode subset --src \"" + src + "\" --prefix \"" + std::to_string(p.tgt[0]) + "\"");
  ASSERT_EQ(s.code, 0);
  const auto js = nlohmann::json::parse(s.out);
  EXPECT_EQ(js["hits"].size(), 16U);
  EXPECT_GT(js["subset_size"].get<int>(), 0);
  EXPECT_EQ(run(common() + " search --row 99999999").code, 2);
}

TEST_F(Cli, BenchRecallAndSpeedCsv) {
  const auto r = run(common() + " bench recall --queries 40");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto rows = lines(r.out);
  ASSERT_EQ(rows.size(), 5U);  // header + nprobe 1, 2, 4, 8
  EXPECT_EQ(rows[0], "nprobe,k,recall,p50_us,p95_us,qps");
  double prev = -1.0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    std::vector<std::string> cells;
    std::istringstream is(rows[i]);
    for (std::string c; std::getline(is, c, ',');) cells.push_back(c);
    ASSERT_EQ(cells.size(), 6U);
    const double recall = std::stod(cells[2]);
    EXPECT_GE(recall, prev);
    prev = recall;
  }
  const auto csv = root_ / "speed.csv";
  ASSERT_EQ(run(common() + " bench speed --queries 20 --nprobes 1,8 --csv " + csv.string()).code, 0);
  const auto speed = lines(slurp(csv));
  ASSERT_EQ(speed.size(), 3U);
  EXPECT_EQ(speed[0], "nprobe,k,recall,p50_us,p95_us,qps");
  EXPECT_EQ(speed[2].substr(0, 5), "8,16,");
}

TEST_F(Cli, BenchDimensionMismatchExitsTwo) {
  const auto dir = root_ / "mismatch";
  fs::create_directories(dir);
  fs::copy_file(root_ / "a" / "index.ksix", dir / "index.ksix");
  {
    KeyStoreWriter w(dir / "keys.ksky", 8, 100);
    w.write_rows(0, testing::random_matrix(100, 8, 1));
    w.finish();
  }
  EXPECT_EQ(run(common("mismatch") + " bench recall").code, 2);
}

}  // namespace
}  // namespace knnseq
