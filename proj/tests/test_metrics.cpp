#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "spanforge/encoder.hpp"
#include "spanforge/metrics.hpp"
#include "spanforge/rng.hpp"

using namespace spanforge;
namespace fs = std::filesystem;

namespace {

// Tokens "s" and "e" light up the start and end heads; everything else scores 0.
struct Oracle {
  Vocab vocab{std::vector<std::string>{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "x", "s", "m", "e", "q"}};
  ModelParams params;

  Oracle() {
    EncoderConfig c;
    c.vocab_size = vocab.size();
    c.max_len = 16;
    c.d_model = 2;
    c.d_ff = 2;
    c.k_hard = 1;
    params = ModelParams::zeros(c);
    params.token_emb.row(vocab.id("s")) << 1, 0;
    params.token_emb.row(vocab.id("e")) << 0, 1;
    params.head_W << 10, 0, 0, 10;
  }
};

Example make(const std::string& id, Span gold) {
  Example ex{id, {"q"}, {"x", "s", "m", "e", "x"}, gold, ""};
  ex.gold_text = join_tokens(ex.passage, gold.start, gold.end);
  return ex;
}

}  // namespace

TEST_CASE("normalize") {
  CHECK(normalize("  Saint  Bernadette ") == "saint bernadette");
  CHECK(normalize("1876") == "1876");
  CHECK(normalize("\tA\nb ") == "a b");
  CHECK(normalize("The cat, a dog.", Normalization::Squad) == "cat dog");
  CHECK(normalize("The cat, a dog.") == "the cat, a dog.");

  Rng rng(5);
  const std::string alphabet = "aB c\t.,Th e\nAN1";
  for (int i = 0; i < 1000; ++i) {
    std::string s;
    for (int j = rng.below(20); j > 0; --j) s += alphabet[static_cast<std::size_t>(rng.below(static_cast<int>(alphabet.size())))];
    for (auto mode : {Normalization::Plain, Normalization::Squad}) CHECK(normalize(normalize(s, mode), mode) == normalize(s, mode));
  }
}

TEST_CASE("exact match and F1") {
  CHECK(exact_match("September 1876", "september 1876") == 1);
  CHECK(exact_match("September", "September 1876") == 0);
  CHECK(exact_match("", "x") == 0);
  CHECK(f1_overlap("Saint Bernadette", "Saint Bernadette Soubirous") == doctest::Approx(0.8));
  CHECK(f1_overlap("a b", "a b") == 1.0);
  CHECK(f1_overlap("a b", "c d") == 0.0);
  CHECK(f1_overlap("", "") == 1.0);
  CHECK(f1_overlap("", "a") == 0.0);
  CHECK(f1_overlap("a a b", "a b b") == doctest::Approx(2.0 / 3));

  Rng rng(6);
  const std::vector<std::string> words{"a", "b", "c", "d"};
  for (int i = 0; i < 1000; ++i) {
    auto draw = [&] {
      std::string s;
      for (int j = rng.below(5); j > 0; --j) s += words[static_cast<std::size_t>(rng.below(4))] + " ";
      return s;
    };
    const auto p = draw(), g = draw();
    CHECK(f1_overlap(p, g) == doctest::Approx(f1_overlap(g, p)).epsilon(1e-15));
    CHECK(f1_overlap(p, g) >= exact_match(p, g));
  }
}

TEST_CASE("top-k EM") {
  const std::vector<std::string> preds{"x", "y", "gold", "z"};
  CHECK(topk_em(preds, "gold", 3) == 1);
  CHECK(topk_em(preds, "gold", 2) == 0);
  CHECK(topk_em(preds, "x", 1) == exact_match("x", "x"));
  CHECK(topk_em(preds, "gold", 100) == 1);
  CHECK_THROWS_AS(topk_em(preds, "gold", 0), std::invalid_argument);

  Rng rng(7);
  for (int i = 0; i < 1000; ++i) {
    std::vector<std::string> list;
    for (int j = 1 + rng.below(12); j > 0; --j) list.push_back(std::to_string(rng.below(6)));
    const std::string gold = std::to_string(rng.below(6));
    for (int k = 1; k < 14; ++k) CHECK(topk_em(list, gold, k) <= topk_em(list, gold, k + 1));
  }
}

TEST_CASE("evaluate with an oracle model") {
  Oracle o;
  const std::vector<Example> data{make("a", {1, 3}), make("b", {1, 3})};
  const auto rep = evaluate(o.params, data, o.vocab, {{1, 3, 10}, 8, Normalization::Plain});
  CHECK(rep.em == 1.0);
  CHECK(rep.f1 == 1.0);
  for (int k : {1, 3, 10}) {
    CHECK(rep.topk_em.at(k) == 1.0);
    CHECK(rep.topk_f1.at(k) == 1.0);
  }
  CHECK(rep.truncated == 0);
}

TEST_CASE("evaluate matches a hand-computed record") {
  Oracle o;
  // Scores: (s,e) = 20; spans starting at s or ending at e = 10; the rest 0. Ties go to the smaller start.
  const auto rep = evaluate(o.params, {make("a", {1, 3}), make("b", {2, 2})}, o.vocab, {{1, 3, 10}, 8, Normalization::Plain});
  REQUIRE(rep.records.size() == 2);
  const auto& r = rep.records[1];
  CHECK(r.id == "b");
  CHECK(r.gold == "m");
  REQUIRE(r.top_preds.size() == 10);
  CHECK(std::vector<std::string>(r.top_preds.begin(), r.top_preds.begin() + 4) ==
        std::vector<std::string>{"s m e", "x s m e", "s", "s m"});
  CHECK(r.em == 0);
  CHECK(r.f1 == doctest::Approx(0.5));
  CHECK(r.topk_em.at(10) == 0);
  CHECK(r.topk_f1.at(1) == doctest::Approx(0.5));
  CHECK(r.topk_f1.at(3) == doctest::Approx(0.5));
  CHECK(r.topk_f1.at(10) == doctest::Approx(2.0 / 3));
  CHECK(rep.em == doctest::Approx(0.5));
  CHECK(rep.f1 == doctest::Approx(0.75));

  double mean = 0;
  for (const auto& rec : rep.records) mean += rec.em / 2.0;
  CHECK(rep.em == mean);
}

TEST_CASE("evaluate scores truncated gold as a miss and rejects an empty dataset") {
  Oracle o;
  Example far{"far", {"q"}, std::vector<std::string>(20, "x"), {18, 18}, "x"};
  const auto rep = evaluate(o.params, {far}, o.vocab, {});
  CHECK(rep.truncated == 1);
  CHECK_THROWS_AS(evaluate(o.params, {}, o.vocab, {}), std::invalid_argument);
  CHECK_THROWS_AS(evaluate(o.params, {far}, o.vocab, {{0}, 8, Normalization::Plain}), std::invalid_argument);
}

TEST_CASE("report files") {
  Oracle o;
  const auto rep = evaluate(o.params, {make("a", {1, 3}), make("b", {2, 2})}, o.vocab, {{1, 3}, 8, Normalization::Plain});
  const fs::path dir = fs::temp_directory_path() / "spanforge_test_metrics";
  fs::create_directories(dir);
  write_report_json(dir / "r.json", rep);
  const auto back = read_report_json(dir / "r.json");
  CHECK(back.em == rep.em);
  CHECK(back.f1 == rep.f1);
  CHECK(back.topk_f1 == rep.topk_f1);
  CHECK(back.records[1].top_preds == rep.records[1].top_preds);

  write_report_csv(dir / "r.csv", rep);
  std::ifstream in(dir / "r.csv");
  std::string header, row1, row3, extra;
  std::getline(in, header);
  std::getline(in, row1);
  std::getline(in, row3);
  CHECK(header == "k,em,f1");
  CHECK(row1.rfind("1,0.5,", 0) == 0);
  CHECK(row3.rfind("3,", 0) == 0);
  CHECK_FALSE(std::getline(in, extra));
}
