#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <sys/wait.h>

#include "json.hpp"
#include "spanforge/cli.hpp"
#include "spanforge/kvconfig.hpp"
#include "spanforge/metrics.hpp"
#include "spanforge/spandecode.hpp"

using namespace spanforge;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

// Small corpus and model so the whole pipeline runs in seconds.
struct Workspace {
  fs::path root, spec, train;

  explicit Workspace(const std::string& name)
      : root(fs::temp_directory_path() / ("spanforge_test_cli_" + name)), spec(root / "spec.cfg"), train(root / "train.cfg") {
    fs::remove_all(root);
    fs::create_directories(root);
    std::ofstream(spec) << "num_examples = 90\npassage_len = 24\nanswer_max_len = 3\n"
                           "prefix_overlap_count = 1\nsuffix_overlap_count = 1\nfull_decoys = 1\n";
    std::ofstream(train) << "# tiny\nmax_len = 32\nquestion_max_len = 4\nd_model = 8\nd_ff = 16\n"
                            "batch_size = 16\nk_z = 5\nk_a = 10\nepochs = 1\nmax_answer_len = 3\n"
                            "checkpoint_every = 0\nprobe_count = 1\n";
  }
};

}  // namespace

TEST_CASE("usage errors exit 1") {
  CHECK(cli({}).code == 1);
  CHECK(cli({"frobnicate"}).code == 1);
  const auto unknown = cli({"gen", "--bogus", "x"});
  CHECK(unknown.code == 1);
  CHECK(unknown.err.find("error") != std::string::npos);
  CHECK(cli({"gen"}).code == 1);  // --out missing
  CHECK(cli({"eval", "--out", "x.csv"}).code == 1);
  CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("runtime failures exit 2") {
  Workspace w("errors");
  const auto r = cli({"eval", "--ckpt", (w.root / "nope.bin").string(), "--data", w.root.string(), "--out",
                      (w.root / "r.csv").string()});
  CHECK(r.code == 2);
  CHECK(cli({"train-base", "--out", (w.root / "b").string()}).code == 2);  // no dataset
  CHECK(cli({"gen", "--out", (w.root / "d").string(), "--config", "vocab_size=3"}).code == 2);
  CHECK(cli({"sweep", "--axis", "depth", "--out", (w.root / "s").string()}).code == 2);
}

TEST_CASE("full pipeline through the library entry point") {
  Workspace w("pipeline");
  const auto data = w.root / "data";
  REQUIRE(cli({"gen", "--spec", w.spec.string(), "--out", data.string(), "--seed", "5"}).code == 0);
  for (const char* f : {"train.jsonl", "dev.jsonl", "test.jsonl", "vocab.txt"}) CHECK(fs::exists(data / f));
  CHECK(lines_of(data / "train.jsonl").size() == 60);

  const auto base = w.root / "base";
  REQUIRE(cli({"train-base", "--base", w.train.string(), "--data", data.string(), "--out", base.string()}).code == 0);
  CHECK(fs::exists(base / "final.bin"));
  CHECK(fs::exists(base / "runlog.jsonl"));

  const auto col = w.root / "collect";
  REQUIRE(cli({"collect", "--base", w.train.string(), "--data", data.string(), "--ckpt", (base / "final.bin").string(),
               "--out", col.string()})
              .code == 0);
  const auto z = read_zstore(col / "zstore.jsonl");
  CHECK(z.size() == 60);
  for (const auto& r : z) CHECK(r.spans.size() == 5);
  const auto summary = nlohmann::json::parse(slurp(col / "collect.json"));
  CHECK(summary.at("records") == 60);

  const auto ft = w.root / "ft";
  REQUIRE(cli({"train", "--base", w.train.string(), "--data", data.string(), "--ckpt", (base / "final.bin").string(),
               "--out", ft.string(), "--config", "zstore=" + (col / "zstore.jsonl").string(), "--config", "tau=2"})
              .code == 0);
  CHECK(fs::exists(ft / "final.bin"));
  CHECK(slurp(ft / "config.txt").find("tau = 2") != std::string::npos);

  const auto csv = w.root / "eval" / "report.csv";
  REQUIRE(cli({"eval", "--ckpt", (ft / "final.bin").string(), "--data", (data / "test.jsonl").string(), "--k", "1,3,5,10",
               "--out", csv.string(), "--base", w.train.string()})
              .code == 0);
  const auto rows = lines_of(csv);
  REQUIRE(rows.size() == 5);
  CHECK(rows[0] == "k,em,f1");
  CHECK(rows[1].rfind("1,", 0) == 0);
  CHECK(rows[4].rfind("10,", 0) == 0);
  const auto rep = read_report_json(w.root / "eval" / "report.json");
  CHECK(rep.records.size() == 15);
  double prev = 0;
  for (int k : {1, 3, 5, 10}) {
    CHECK(rep.topk_em.at(k) >= prev);
    prev = rep.topk_em.at(k);
  }

  // Directory form of --data reads test.jsonl; directory form of --out writes report.csv inside it.
  REQUIRE(cli({"eval", "--ckpt", (ft / "final.bin").string(), "--data", data.string(), "--out",
               (w.root / "eval2").string(), "--base", w.train.string()})
              .code == 0);
  CHECK(slurp(w.root / "eval2" / "report.csv") == slurp(csv));

  // train without a zstore collects into its own --out directory.
  const auto ft2 = w.root / "ft2";
  REQUIRE(cli({"train", "--base", w.train.string(), "--data", data.string(), "--ckpt", (base / "final.bin").string(),
               "--out", ft2.string(), "--config", "tau=2"})
              .code == 0);
  CHECK(slurp(ft2 / "zstore.jsonl") == slurp(col / "zstore.jsonl"));
  CHECK(slurp(ft2 / "final.bin") == slurp(ft / "final.bin"));
}

TEST_CASE("sweep and report recount") {
  Workspace w("sweep");
  const auto out = w.root / "sweep";
  const auto r = cli({"sweep", "--axis", "alpha", "--values", "0.1,0.9", "--seeds", "0,1", "--base", w.train.string(),
                      "--spec", w.spec.string(), "--out", out.string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("best: ") != std::string::npos);
  CHECK(fs::exists(out / "data" / "train.jsonl"));
  std::vector<fs::path> dirs;
  // Sweep order: seeds outer, values inner.
  for (const char* s : {"0", "1"})
    for (const char* v : {"0.1", "0.9"}) {
      const auto d = out / (std::string("alpha=") + v) / (std::string("seed=") + s);
      CHECK(fs::exists(d / "report.json"));
      CHECK(fs::exists(d / "report.csv"));
      CHECK(fs::exists(d / "zstore.jsonl"));
      dirs.push_back(d);
    }

  // Recount mean F1 per value from the raw per-example records.
  std::map<std::string, double> mean_f1;
  for (const auto& d : dirs) {
    const auto j = nlohmann::json::parse(slurp(d / "report.json"));
    double f1 = 0;
    for (const auto& rec : j.at("records")) f1 += rec.at("f1").get<double>();
    mean_f1[d.parent_path().filename().string().substr(6)] += f1 / j.at("records").size() / 2.0;
  }
  const auto rows = lines_of(out / "aggregate.csv");
  REQUIRE(rows.size() == 1 + 4 + 2);
  CHECK(rows[0] == "axis,value,seed,em,f1");
  int means = 0;
  for (const auto& row : rows) {
    const auto cols = split(row, ',');
    REQUIRE(cols.size() == 5);
    if (cols[2] != "mean") continue;
    ++means;
    CHECK(cols[0] == "alpha");
    CHECK(std::stod(cols[4]) == doctest::Approx(mean_f1.at(cols[1])).epsilon(1e-12));
  }
  CHECK(means == 2);

  const auto again = cli({"report", dirs[0].string(), dirs[1].string(), dirs[2].string(), dirs[3].string(), "--out",
                          (w.root / "report").string()});
  REQUIRE(again.code == 0);
  CHECK(slurp(w.root / "report" / "aggregate.csv") == slurp(out / "aggregate.csv"));
  CHECK(again.out == slurp(out / "summary.txt"));

  const auto missing = cli({"report", dirs[0].string(), (w.root / "nowhere").string()});
  CHECK(missing.code == 2);
  CHECK(missing.err.find("nowhere") != std::string::npos);
}

TEST_CASE("aggregate arithmetic") {
  const fs::path root = fs::temp_directory_path() / "spanforge_test_agg";
  fs::remove_all(root);
  std::vector<fs::path> dirs;
  const double f1s[] = {0.5, 0.6, 0.7};
  for (int s = 0; s < 3; ++s) {
    const auto d = root / ("seed=" + std::to_string(s));
    fs::create_directories(d);
    EvalReport rep;
    rep.k_list = {1};
    rep.records.push_back({"x", {"a"}, "a", 0, f1s[s], {{1, 0}}, {{1, f1s[s]}}});
    rep.aggregate();
    write_report_json(d / "report.json", rep);
    std::ofstream(d / "run.json") << nlohmann::json{{"axis", "tau"}, {"value", "10"}, {"seed", s}}.dump();
    dirs.push_back(d);
  }
  const auto one = aggregate_runs({dirs[1]});
  CHECK(one.values.at(0).mean_f1 == 0.6);
  const auto all = aggregate_runs(dirs);
  REQUIRE(all.values.size() == 1);
  CHECK(all.values[0].mean_f1 == doctest::Approx(0.6));
  CHECK(all.values[0].runs == 3);
  CHECK(all.runs[2].seed == "2");
  CHECK(format_table(all).find("| tau |") != std::string::npos);
}

TEST_CASE("sweep defaults") {
  CHECK(default_sweep_values("tau") == std::vector<std::string>{"1", "2", "4", "8", "10", "12", "20"});
  CHECK(default_sweep_values("alpha").size() == 5);
  CHECK(default_sweep_values("z_size") == std::vector<std::string>{"1", "5", "10", "20", "50"});
  CHECK(default_sweep_values("mining").size() == 5);
  SweepSpec s{"alpha", {}, {0}};
  CHECK_THROWS(s.validate());
}

TEST_CASE("installed binary honours the exit-code contract") {
  const char* bin = std::getenv("SPANFORGE_BIN");
  if (!bin) return;
  const std::string b = std::string("'") + bin + "'";
  auto status = [](const std::string& cmd) { return WEXITSTATUS(std::system((cmd + " >/dev/null 2>&1").c_str())); };
  Workspace w("binary");
  CHECK(status(b + " --help") == 0);
  CHECK(status(b + " nope") == 1);
  CHECK(status(b + " gen --out " + (w.root / "bin_data").string() + " --spec " + w.spec.string()) == 0);
  CHECK(fs::exists(w.root / "bin_data" / "vocab.txt"));
  CHECK(status(b + " eval --ckpt /nonexistent --data " + (w.root / "bin_data").string() + " --out " +
               (w.root / "x.csv").string()) == 2);
}
