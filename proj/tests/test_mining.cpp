#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>

#include "spanforge/mining.hpp"
#include "spanforge/rng.hpp"

using namespace spanforge;

namespace {

// Passage occupies rows [1, n-2]; rows are chosen by the caller.
ForwardTrace trace_with_rows(const Mat64& rows) {
  ForwardTrace tr;
  tr.token_reprs = rows;
  const int n = static_cast<int>(rows.rows());
  tr.start_logits = Vec64::Zero(n);
  tr.end_logits = Vec64::Zero(n);
  tr.passage_region = {1, n - 2};
  tr.question_region = {0, 0};
  return tr;
}

PredictionSet set_of(const std::vector<Span>& spans) {
  PredictionSet a;
  for (const auto& s : spans) a.ranked.push_back({s, 0.0, 0.0});
  return a;
}

SpanTextFn positional_text() {
  return [](const Span& s) { return "t" + std::to_string(s.start) + "_" + std::to_string(s.end); };
}

}  // namespace

TEST_CASE("strategy parsing") {
  const auto d = MiningStrategy{};
  CHECK(d.variant == MiningStrategy::Variant::MostSimilar);
  CHECK(d.theta == 1);
  CHECK(MiningStrategy::parse("top1", 1).name() == "top1");
  CHECK(MiningStrategy::parse("random", 1, 4).seed == 4);
  CHECK(MiningStrategy::parse("most_similar", 10).theta == 10);
  CHECK_THROWS_AS(MiningStrategy::parse("nearest", 1), std::invalid_argument);
  CHECK_THROWS_AS(MiningStrategy::parse("most_similar", 0), std::invalid_argument);
}

TEST_CASE("only eligible candidate is returned") {
  Mat64 rows(4, 2);
  rows << 0, 0, 1, 0, 0, 1, 0, 0;
  const auto tr = trace_with_rows(rows);
  const GoldRef gold{{1, 1}, "t1_1"};
  const auto a = set_of({{1, 1}, {2, 2}});
  for (const auto& s : {MiningStrategy::parse("most_similar", 1), MiningStrategy::parse("top1", 1),
                        MiningStrategy::parse("random", 1, 3)})
    CHECK(select_hard_negatives(tr, a, gold, positional_text(), s, "ex", 0) == std::vector<Span>{{2, 2}});
}

TEST_CASE("argmax similarity") {
  // Gold row (1,0); candidates at cosine 0.3, 0.9, 0.5.
  auto at = [](double c) { return std::pair{c, std::sqrt(1 - c * c)}; };
  Mat64 rows(6, 2);
  rows.setZero();
  rows.row(1) << 1, 0;
  for (auto [r, c] : std::vector<std::pair<int, double>>{{2, 0.3}, {3, 0.9}, {4, 0.5}}) rows.row(r) << at(c).first, at(c).second;
  const auto tr = trace_with_rows(rows);
  const GoldRef gold{{1, 1}, "t1_1"};
  const auto a = set_of({{2, 2}, {1, 1}, {4, 4}, {3, 3}});
  CHECK(select_hard_negatives(tr, a, gold, positional_text(), MiningStrategy{}) == std::vector<Span>{{3, 3}});
  CHECK(select_hard_negatives(tr, a, gold, positional_text(), MiningStrategy::parse("most_similar", 2)) ==
        std::vector<Span>{{3, 3}, {4, 4}});
  CHECK(select_hard_negatives(tr, a, gold, positional_text(), MiningStrategy::parse("most_similar", 20)).size() == 3);
  CHECK(select_hard_negatives(tr, a, gold, positional_text(), MiningStrategy::parse("top1", 1)) ==
        std::vector<Span>{{2, 2}});
}

TEST_CASE("ties keep prediction-set order") {
  Mat64 rows(5, 2);
  rows << 0, 0, 1, 0, 2, 0, 3, 0, 0, 0;
  const auto tr = trace_with_rows(rows);
  const GoldRef gold{{1, 1}, "t1_1"};
  CHECK(select_hard_negatives(tr, set_of({{3, 3}, {2, 2}}), gold, positional_text(), MiningStrategy{}) ==
        std::vector<Span>{{3, 3}});
  CHECK(select_hard_negatives(tr, set_of({{2, 2}, {3, 3}}), gold, positional_text(), MiningStrategy{}) ==
        std::vector<Span>{{2, 2}});
}

TEST_CASE("textual duplicates of gold are excluded") {
  Mat64 rows(5, 2);
  rows << 0, 0, 1, 0, 1, 0.01, 0, 1, 0, 0;
  const auto tr = trace_with_rows(rows);
  const GoldRef gold{{1, 1}, "Blue"};
  auto text = [](const Span& s) { return s.start == 2 ? std::string("  blue ") : std::string("red"); };
  CHECK_FALSE(is_eligible_negative({2, 2}, gold, text));
  CHECK_FALSE(is_eligible_negative({1, 1}, gold, text));
  CHECK(is_eligible_negative({3, 3}, gold, text));
  CHECK(select_hard_negatives(tr, set_of({{2, 2}, {3, 3}}), gold, text, MiningStrategy{}) == std::vector<Span>{{3, 3}});
  // Top1 falls through to rank 2 when rank 1 equals gold.
  CHECK(select_hard_negatives(tr, set_of({{1, 1}, {3, 3}}), gold, text, MiningStrategy::parse("top1", 1)) ==
        std::vector<Span>{{3, 3}});
  // Every candidate equals gold: skip.
  CHECK(select_hard_negatives(tr, set_of({{1, 1}, {2, 2}}), gold, text, MiningStrategy{}).empty());
  CHECK_THROWS_AS(select_hard_negatives(tr, PredictionSet{}, gold, text, MiningStrategy{}), std::invalid_argument);
}

TEST_CASE("most similar agrees with an exhaustive loop and is scale invariant") {
  Rng rng(31);
  for (int trial = 0; trial < 500; ++trial) {
    const int n = 6 + rng.below(12);
    const int d = 2 + rng.below(5);
    Mat64 rows(n, d);
    for (Eigen::Index i = 0; i < rows.size(); ++i) rows.data()[i] = rng.uniform(-1, 1);
    const auto tr = trace_with_rows(rows);
    const Region r = tr.passage_region;
    auto rand_span = [&] {
      const int s = r.first + rng.below(r.size());
      return Span{s, std::min(r.last, s + rng.below(3))};
    };
    const Span g = rand_span();
    std::vector<Span> cands;
    for (int c = 0; c < 10; ++c) {
      const Span s = rand_span();
      if (std::find(cands.begin(), cands.end(), s) == cands.end()) cands.push_back(s);
    }
    const GoldRef gold{g, positional_text()(g)};
    const auto got = select_hard_negatives(tr, set_of(cands), gold, positional_text(), MiningStrategy{});

    // Independent recompute.
    auto pooled = [&](const Span& s) {
      Vec64 v = Vec64::Zero(d);
      for (int t = s.start; t <= s.end; ++t) v += rows.row(t).transpose();
      return Vec64(v / (s.end - s.start + 1));
    };
    const Vec64 gv = pooled(g);
    std::optional<Span> best;
    double best_sim = -2;
    for (const auto& c : cands) {
      if (c == g) continue;
      const Vec64 cv = pooled(c);
      const double sim = cv.dot(gv) / (cv.norm() * gv.norm());
      if (sim > best_sim) best_sim = sim, best = c;
    }
    if (!best) {
      CHECK(got.empty());
      continue;
    }
    REQUIRE(got.size() == 1);
    CHECK(got[0] == *best);
    CHECK(got[0] != g);

    auto scaled = tr;
    scaled.token_reprs *= 0.1 + 5 * rng.unit();
    CHECK(select_hard_negatives(scaled, set_of(cands), gold, positional_text(), MiningStrategy{}) == got);
  }
}

TEST_CASE("random sampling is deterministic per example and step") {
  Mat64 rows = Mat64::Ones(12, 2);
  const auto tr = trace_with_rows(rows);
  std::vector<Span> cands;
  for (int i = 1; i <= 10; ++i) cands.push_back({i, i});
  const auto a = set_of(cands);
  const GoldRef gold{{1, 1}, "t1_1"};
  const auto strat = MiningStrategy::parse("random", 1, 99);
  std::set<int> seen;
  for (std::uint64_t step = 0; step < 50; ++step) {
    const auto x = select_hard_negatives(tr, a, gold, positional_text(), strat, "q7", step);
    CHECK(x == select_hard_negatives(tr, a, gold, positional_text(), strat, "q7", step));
    REQUIRE(x.size() == 1);
    CHECK(x[0] != gold.span);
    seen.insert(x[0].start);
  }
  CHECK(seen.size() > 3);
  int differ = 0;
  for (std::uint64_t step = 0; step < 20; ++step)
    differ += select_hard_negatives(tr, a, gold, positional_text(), strat, "q7", step) !=
              select_hard_negatives(tr, a, gold, positional_text(), strat, "q8", step);
  CHECK(differ > 0);
}
