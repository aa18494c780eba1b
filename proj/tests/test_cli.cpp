#include <doctest.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ilrec/cli.hpp"

using namespace ilrec;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           fs::path("ilrec_cli_" + std::to_string(::getpid()) + "_" +
                    std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::string file(const std::string& name, const std::string& content) {
    fs::path p = path / name;
    std::ofstream out(p);
    out << content;
    return p.string();
  }
  std::string sub(const std::string& name) const {
    return (path / name).string();
  }
};

struct CliResult {
  int code = -1;
  std::string out;
  std::string err;
};

CliResult run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  CliResult r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

bool contains(const std::string& hay, const std::string& needle) {
  return hay.find(needle) != std::string::npos;
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Fixed four-user interaction log. After the per-item count filter at
// min_count 1 (a no-op) the short user u4 is dropped, leaving 3 users over
// 4 items with 10 interactions.
std::string small_tsv() {
  return
      "u1\ta\t1\n"
      "u1\tb\t2\n"
      "u1\tc\t3\n"
      "u1\td\t4\n"
      "u2\ta\t1\n"
      "u2\tb\t2\n"
      "u2\tc\t3\n"
      "u3\ta\t1\n"
      "u3\tb\t2\n"
      "u3\td\t3\n"
      "u4\ta\t1\n"
      "u4\tb\t2\n";
}

// Shared tiny synthetic corpus + model shape used by the train/eval tests.
std::vector<std::string> tiny_prepare_args(const std::string& out_dir,
                                           int num_candidates) {
  return {"prepare",
          "--set", "corpus.synthetic=true",
          "--set", "corpus.synthetic_users=30",
          "--set", "corpus.synthetic_items=12",
          "--set", "corpus.synthetic_clusters=3",
          "--set", "corpus.synthetic_min_len=6",
          "--set", "corpus.synthetic_max_len=9",
          "--set", "corpus.min_interactions=1",
          "--set", "corpus.max_len=6",
          "--set", "corpus.b=6",
          "--set", "eval.num_candidates=" + std::to_string(num_candidates),
          "--seed", "3",
          "--out", out_dir};
}

std::vector<std::string> tiny_model_sets(const std::string& data_dir) {
  return {"--set", "corpus.data_dir=" + data_dir,
          "--set", "corpus.max_len=6",
          "--set", "corpus.b=6",
          "--set", "model.embed_dim=8",
          "--set", "model.ff_dim=16"};
}

void append(std::vector<std::string>& args, const std::vector<std::string>& more) {
  args.insert(args.end(), more.begin(), more.end());
}

}  // namespace

TEST_CASE("prepare summarizes a hand-checked corpus and writes every file") {
  TempDir tmp;
  const std::string tsv = tmp.file("log.tsv", small_tsv());
  const std::string out_dir = tmp.sub("prep");
  CliResult r = run({"prepare",
                     "--set", "corpus.input=" + tsv,
                     "--set", "corpus.format=tsv",
                     "--set", "corpus.min_interactions=1",
                     "--set", "corpus.b=4",
                     "--out", out_dir});
  CAPTURE(r.err);
  CHECK(r.code == 0);

  // Hand-counted: 3 surviving users, 4 items, 10 interactions,
  // sparsity 1 - 10/12, average length 10/3.
  CHECK(contains(r.out, "users\t3\n"));
  CHECK(contains(r.out, "items\t4\n"));
  CHECK(contains(r.out, "interactions\t10\n"));
  CHECK(contains(r.out, "sparsity\t16.6667%\n"));
  CHECK(contains(r.out, "avg_len\t3.333333333\n"));

  // Targets per user are the last three interactions; only u1 (4 items) has
  // a training example.
  CHECK(contains(r.out, "train_examples\t1\n"));
  CHECK(contains(r.out, "valid_examples\t3\n"));
  CHECK(contains(r.out, "test_examples\t3\n"));
  CHECK(contains(r.out, "prepared\t" + out_dir));

  CHECK(contains(r.err, "dropped user u4"));

  for (const char* name : {"dataset.json", "splits.jsonl", "identifiers.tsv",
                           "stats.txt", "candidates_valid.jsonl",
                           "candidates_test.jsonl"})
    CHECK(fs::exists(fs::path(out_dir) / name));

  // stats.txt holds the same summary that went to stdout.
  const std::string stats = read_bytes(out_dir + "/stats.txt");
  CHECK(contains(r.out, stats));
}

TEST_CASE("prepare failures: missing input, bad file, no survivors") {
  TempDir tmp;
  SUBCASE("missing input file names the path") {
    CliResult r = run({"prepare",
                       "--set", "corpus.input=" + tmp.sub("absent.tsv"),
                       "--set", "corpus.format=tsv",
                       "--out", tmp.sub("o")});
    CHECK(r.code == 2);
    CHECK(contains(r.err, "config error"));
    CHECK(contains(r.err, tmp.sub("absent.tsv")));
    CHECK(r.out.empty());
  }
  SUBCASE("neither input nor synthetic configured") {
    CliResult r = run({"prepare", "--out", tmp.sub("o")});
    CHECK(r.code == 2);
    CHECK(contains(r.err, "corpus.input"));
  }
  SUBCASE("filtering that removes everyone is reported") {
    const std::string tsv = tmp.file("short.tsv", "u1\ta\t1\nu1\tb\t2\n");
    CliResult r = run({"prepare",
                       "--set", "corpus.input=" + tsv,
                       "--set", "corpus.format=tsv",
                       "--set", "corpus.min_interactions=1",
                       "--out", tmp.sub("o")});
    CHECK(r.code == 2);
    CHECK(contains(r.err, "no users remain"));
  }
}

TEST_CASE("config overrides: unknown keys, bad values, malformed sets") {
  TempDir tmp;
  SUBCASE("unknown key") {
    CliResult r = run({"prepare", "--set", "corpus.nonsense=1",
                       "--out", tmp.sub("o")});
    CHECK(r.code == 2);
    CHECK(contains(r.err, "unknown config key: corpus.nonsense"));
  }
  SUBCASE("unknown section") {
    CliResult r = run({"prepare", "--set", "wibble.key=1",
                       "--out", tmp.sub("o")});
    CHECK(r.code == 2);
    CHECK(contains(r.err, "unknown config section"));
  }
  SUBCASE("missing equals sign") {
    CliResult r = run({"prepare", "--set", "corpus.max_len",
                       "--out", tmp.sub("o")});
    CHECK(r.code == 2);
    CHECK(contains(r.err, "section.key=value"));
  }
  SUBCASE("unparseable value names the key") {
    CliResult r = run({"prepare", "--set", "hyper.alpha=squirrel",
                       "--out", tmp.sub("o")});
    CHECK(r.code == 2);
    CHECK(contains(r.err, "hyper.alpha"));
    CHECK(contains(r.err, "squirrel"));
  }
  SUBCASE("out-of-range value fails validation") {
    CliResult r = run({"prepare", "--set", "corpus.b=1",
                       "--out", tmp.sub("o")});
    CHECK(r.code == 2);
    CHECK(contains(r.err, "corpus.b"));
  }
}

TEST_CASE("distillation weight is accepted under both spellings") {
  TempDir tmp;
  // A negative weight is rejected by validation, which proves the key was
  // parsed into the right field.
  for (const char* key : {"hyper.lambda=-1", "hyper.lambda_=-1"}) {
    CliResult r = run({"prepare", "--set", key, "--out", tmp.sub("o")});
    CAPTURE(key);
    CHECK(r.code == 2);
    CHECK(contains(r.err, "lambda must be >= 0"));
  }
  // And a valid value under the alias passes config validation.
  const std::string tsv = tmp.file("log.tsv", small_tsv());
  CliResult ok = run({"prepare",
                      "--set", "corpus.input=" + tsv,
                      "--set", "corpus.format=tsv",
                      "--set", "corpus.min_interactions=1",
                      "--set", "hyper.lambda_=0.25",
                      "--out", tmp.sub("ok")});
  CHECK(ok.code == 0);
}

TEST_CASE("ini config files drive a run and report errors with file:line") {
  TempDir tmp;
  SUBCASE("a full ini file prepares a corpus") {
    const std::string ini = tmp.file("run.ini",
        "# tiny synthetic corpus\n"
        "[corpus]\n"
        "synthetic = true\n"
        "synthetic_users = 18\n"
        "synthetic_items = 8\n"
        "synthetic_clusters = 2\n"
        "synthetic_min_len = 5\n"
        "synthetic_max_len = 7\n"
        "min_interactions = 1\n"
        "max_len = 5\n"
        "b = 3\n"
        "\n"
        "[eval]\n"
        "num_candidates = 4\n"
        "\n"
        "[output]\n"
        "dir = " + tmp.sub("prep_ini") + "\n");
    CliResult r = run({"prepare", "--config", ini});
    CAPTURE(r.err);
    CHECK(r.code == 0);
    CHECK(contains(r.out, "prepared\t" + tmp.sub("prep_ini")));
    CHECK(fs::exists(fs::path(tmp.sub("prep_ini")) / "splits.jsonl"));
  }
  SUBCASE("command-line overrides win over the file") {
    const std::string ini = tmp.file("base.ini",
        "[corpus]\nmin_interactions = 999\n");
    const std::string tsv = tmp.file("log.tsv", small_tsv());
    CliResult r = run({"prepare", "--config", ini,
                       "--set", "corpus.input=" + tsv,
                       "--set", "corpus.format=tsv",
                       "--set", "corpus.min_interactions=1",
                       "--out", tmp.sub("o")});
    CHECK(r.code == 0);
    CHECK(contains(r.out, "users\t3\n"));
  }
  SUBCASE("missing file") {
    CliResult r = run({"prepare", "--config", tmp.sub("absent.ini")});
    CHECK(r.code == 2);
    CHECK(contains(r.err, "cannot open config file"));
  }
  SUBCASE("line without equals sign") {
    const std::string ini = tmp.file("bad.ini", "[corpus]\nmax_len 7\n");
    CliResult r = run({"prepare", "--config", ini});
    CHECK(r.code == 2);
    CHECK(contains(r.err, ini + ":2"));
    CHECK(contains(r.err, "expected key = value"));
  }
  SUBCASE("unknown key inside the file") {
    const std::string ini = tmp.file("bad2.ini", "[corpus]\nwibble = 3\n");
    CliResult r = run({"prepare", "--config", ini});
    CHECK(r.code == 2);
    CHECK(contains(r.err, ini + ":2"));
    CHECK(contains(r.err, "unknown config key: corpus.wibble"));
  }
  SUBCASE("malformed section header") {
    const std::string ini = tmp.file("bad3.ini", "[corpus\nb = 4\n");
    CliResult r = run({"prepare", "--config", ini});
    CHECK(r.code == 2);
    CHECK(contains(r.err, ini + ":1"));
    CHECK(contains(r.err, "malformed section header"));
  }
  SUBCASE("key before any section") {
    const std::string ini = tmp.file("bad4.ini", "b = 4\n");
    CliResult r = run({"prepare", "--config", ini});
    CHECK(r.code == 2);
    CHECK(contains(r.err, "outside any [section]"));
  }
}

TEST_CASE("the seed option fans out to every per-section seed") {
  TempDir tmp;
  // One run sets --seed, the other spells out the corpus seeds it implies;
  // the prepared files must be byte-identical.
  auto a = tiny_prepare_args(tmp.sub("a"), 5);
  CliResult ra = run(a);
  REQUIRE(ra.code == 0);

  auto b = tiny_prepare_args(tmp.sub("b"), 5);
  for (auto& s : b)
    if (s == "--seed") s = "--ignored";  // placeholder, replaced below
  std::vector<std::string> b2;
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b[i] == "--ignored") { ++i; continue; }  // drop --seed 3
    b2.push_back(b[i]);
  }
  append(b2, {"--set", "corpus.synthetic_seed=3",
              "--set", "corpus.identifier_seed=3"});
  CliResult rb = run(b2);
  REQUIRE(rb.code == 0);

  for (const char* name : {"splits.jsonl", "identifiers.tsv", "dataset.json",
                           "candidates_valid.jsonl", "candidates_test.jsonl"})
    CHECK(read_bytes(tmp.sub("a") + "/" + name) ==
          read_bytes(tmp.sub("b") + "/" + name));
}

TEST_CASE("train writes artifacts and repeat runs are byte-identical") {
  TempDir tmp;
  const std::string data = tmp.sub("data");
  REQUIRE(run(tiny_prepare_args(data, 5)).code == 0);

  auto train_args = [&](const std::string& out_dir, const char* seed) {
    std::vector<std::string> args = {"train"};
    append(args, tiny_model_sets(data));
    append(args, {"--set", "train.epochs=2",
                  "--set", "train.batch_size=16",
                  "--seed", seed,
                  "--out", out_dir});
    return args;
  };

  CliResult r1 = run(train_args(tmp.sub("run1"), "5"));
  CAPTURE(r1.err);
  REQUIRE(r1.code == 0);

  for (const char* name : {"model.ckpt", "cf_scorer.bin", "metrics.csv",
                           "layers.csv"})
    CHECK(fs::exists(fs::path(tmp.sub("run1")) / name));

  CHECK(contains(r1.out, "best_epoch\t2\n"));
  CHECK(contains(r1.out, "valid_hit@5\t"));
  CHECK(contains(r1.out, "valid_hit@10\t"));
  CHECK(contains(r1.out, "valid_ndcg@5\t"));
  CHECK(contains(r1.out, "valid_ndcg@10\t"));
  CHECK(contains(r1.out, "checkpoint\t" + tmp.sub("run1") + "/model.ckpt"));
  CHECK(contains(r1.err, "steps\t"));
  CHECK(contains(r1.err, "trunk_forwards_per_step\t1\n"));

  // Same seed, fresh output directory: every report byte matches.
  CliResult r2 = run(train_args(tmp.sub("run2"), "5"));
  REQUIRE(r2.code == 0);
  // The summary lines match except for the checkpoint path itself.
  auto strip_path_line = [](const std::string& s) {
    return s.substr(0, s.find("checkpoint\t"));
  };
  CHECK(strip_path_line(r1.out) == strip_path_line(r2.out));
  for (const char* name : {"metrics.csv", "layers.csv", "model.ckpt"})
    CHECK(read_bytes(tmp.sub("run1") + "/" + name) ==
          read_bytes(tmp.sub("run2") + "/" + name));

  // A different seed changes the numbers.
  CliResult r3 = run(train_args(tmp.sub("run3"), "6"));
  REQUIRE(r3.code == 0);
  CHECK(read_bytes(tmp.sub("run1") + "/metrics.csv") !=
        read_bytes(tmp.sub("run3") + "/metrics.csv"));
}

TEST_CASE("train rejects a prepared directory that disagrees with the config") {
  TempDir tmp;
  const std::string data = tmp.sub("data");
  REQUIRE(run(tiny_prepare_args(data, 5)).code == 0);

  SUBCASE("missing data_dir") {
    CliResult r = run({"train", "--out", tmp.sub("o")});
    CHECK(r.code == 2);
    CHECK(contains(r.err, "corpus.data_dir"));
  }
  SUBCASE("nonexistent data_dir") {
    CliResult r = run({"train", "--set",
                       "corpus.data_dir=" + tmp.sub("nowhere"),
                       "--out", tmp.sub("o")});
    CHECK(r.code == 2);
  }
  SUBCASE("history length mismatch names the key") {
    std::vector<std::string> args = {"train"};
    append(args, tiny_model_sets(data));
    args[4] = "corpus.max_len=5";  // disagree with the prepared max_len 6
    append(args, {"--out", tmp.sub("o")});
    CliResult r = run(args);
    CHECK(r.code == 2);
    CHECK(contains(r.err, "corpus.max_len"));
  }
  SUBCASE("identifier base mismatch names the key") {
    std::vector<std::string> args = {"train"};
    append(args, tiny_model_sets(data));
    args[6] = "corpus.b=7";  // disagree with the prepared base 6
    append(args, {"--out", tmp.sub("o")});
    CliResult r = run(args);
    CHECK(r.code == 2);
    CHECK(contains(r.err, "corpus.b"));
  }
}

TEST_CASE("eval prints ranking metrics as one json object") {
  TempDir tmp;
  const std::string data = tmp.sub("data");
  REQUIRE(run(tiny_prepare_args(data, 5)).code == 0);

  std::vector<std::string> train_args = {"train"};
  append(train_args, tiny_model_sets(data));
  append(train_args, {"--set", "train.epochs=1",
                      "--set", "train.batch_size=16",
                      "--seed", "5",
                      "--out", tmp.sub("run")});
  REQUIRE(run(train_args).code == 0);
  const std::string ckpt = tmp.sub("run") + "/model.ckpt";

  auto eval_args = [&](const std::vector<std::string>& extra) {
    std::vector<std::string> args = {"eval"};
    append(args, tiny_model_sets(data));
    append(args, {"--set", "eval.checkpoint=" + ckpt});
    append(args, extra);
    return args;
  };

  CliResult full = run(eval_args({}));
  CAPTURE(full.err);
  REQUIRE(full.code == 0);
  // Exactly one line of JSON with exactly the four default-k metrics.
  CHECK(full.out.back() == '\n');
  CHECK(std::count(full.out.begin(), full.out.end(), '\n') == 1);
  const auto j = nlohmann::json::parse(full.out);
  REQUIRE(j.size() == 4);
  for (const char* key : {"hit@5", "hit@10", "ndcg@5", "ndcg@10"}) {
    REQUIRE(j.contains(key));
    const double v = j[key].get<double>();
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK(j["hit@5"].get<double>() <= j["hit@10"].get<double>());
  CHECK(j["ndcg@5"].get<double>() <= j["ndcg@10"].get<double>());

  SUBCASE("custom cutoffs change the keys") {
    CliResult r = run(eval_args({"--set", "eval.ks=1,3"}));
    REQUIRE(r.code == 0);
    const auto jk = nlohmann::json::parse(r.out);
    REQUIRE(jk.size() == 4);
    CHECK(jk.contains("hit@1"));
    CHECK(jk.contains("hit@3"));
    CHECK(jk.contains("ndcg@1"));
    CHECK(jk.contains("ndcg@3"));
  }
  SUBCASE("validation split works too") {
    CliResult r = run(eval_args({"--set", "eval.split=valid"}));
    CHECK(r.code == 0);
    CHECK(nlohmann::json::parse(r.out).size() == 4);
  }
  SUBCASE("candidate ranking never scores below full ranking") {
    CliResult cand = run(eval_args({"--set", "eval.mode=candidates"}));
    REQUIRE(cand.code == 0);
    const auto jc = nlohmann::json::parse(cand.out);
    for (const char* key : {"hit@5", "hit@10", "ndcg@5", "ndcg@10"})
      CHECK(jc[key].get<double>() >= j[key].get<double>() - 1e-12);
  }
}

TEST_CASE("eval failures: missing or mismatched checkpoints") {
  TempDir tmp;
  const std::string data = tmp.sub("data");
  REQUIRE(run(tiny_prepare_args(data, 5)).code == 0);

  std::vector<std::string> train_args = {"train"};
  append(train_args, tiny_model_sets(data));
  append(train_args, {"--set", "train.epochs=1",
                      "--set", "train.batch_size=16",
                      "--seed", "5",
                      "--out", tmp.sub("run")});
  REQUIRE(run(train_args).code == 0);
  const std::string ckpt = tmp.sub("run") + "/model.ckpt";

  SUBCASE("checkpoint path not configured") {
    std::vector<std::string> args = {"eval"};
    append(args, tiny_model_sets(data));
    CliResult r = run(args);
    CHECK(r.code == 2);
    CHECK(contains(r.err, "eval.checkpoint"));
  }
  SUBCASE("checkpoint file missing") {
    std::vector<std::string> args = {"eval"};
    append(args, tiny_model_sets(data));
    append(args, {"--set", "eval.checkpoint=" + tmp.sub("absent.ckpt")});
    CliResult r = run(args);
    CHECK(r.code == 2);
    CHECK(r.out.empty());
  }
  SUBCASE("corrupted checkpoint") {
    const std::string bad = tmp.file("bad.ckpt", "this is not a checkpoint");
    std::vector<std::string> args = {"eval"};
    append(args, tiny_model_sets(data));
    append(args, {"--set", "eval.checkpoint=" + bad});
    CliResult r = run(args);
    CHECK(r.code == 2);
    CHECK(r.out.empty());
  }
  SUBCASE("architecture mismatch names the differing fields") {
    std::vector<std::string> args = {"eval"};
    append(args, tiny_model_sets(data));
    append(args, {"--set", "eval.checkpoint=" + ckpt,
                  "--set", "model.embed_dim=16"});
    CliResult r = run(args);
    CHECK(r.code == 2);
    CHECK(contains(r.err, "embed_dim"));
    CHECK(r.out.empty());
  }
}

TEST_CASE("gradcheck passes clean and fails the corrupted control") {
  CliResult ok = run({"gradcheck"});
  CAPTURE(ok.out);
  CHECK(ok.code == 0);
  CHECK(contains(ok.out, "PASS"));
  CHECK(!contains(ok.out, "FAIL"));
  CHECK(contains(ok.out, "cpo_closed_form"));
  CHECK(contains(ok.out, "gradcheck: all terms pass"));

  CliResult bad = run({"gradcheck", "--corrupt-gradient"});
  CHECK(bad.code == 1);
  CHECK(contains(bad.out, "FAIL"));
  CHECK(contains(bad.out, "gradcheck: FAILURES above"));
}

TEST_CASE("help text and usage errors") {
  SUBCASE("--help exits cleanly and lists the commands") {
    CliResult r = run({"--help"});
    CHECK(r.code == 0);
    for (const char* cmd : {"prepare", "train", "eval", "gradcheck"})
      CHECK(contains(r.out, cmd));
  }
  SUBCASE("no command") {
    CliResult r = run({});
    CHECK(r.code == 2);
    CHECK(contains(r.err, "usage error"));
  }
  SUBCASE("unknown command") {
    CliResult r = run({"frobnicate"});
    CHECK(r.code == 2);
    CHECK(contains(r.err, "usage error"));
  }
  SUBCASE("unknown option") {
    CliResult r = run({"train", "--bogus"});
    CHECK(r.code == 2);
    CHECK(contains(r.err, "usage error"));
  }
}
