#include "spanforge/spandecode.hpp"

#include <algorithm>
#include <fstream>
#include <queue>
#include <stdexcept>
#include <tuple>

#include "json.hpp"

namespace spanforge {

namespace {

void check_args(const SpanScores& s, int k, int max_answer_len) {
  if (k < 1) throw std::invalid_argument("topk_spans: k must be >= 1");
  if (max_answer_len < 1) throw std::invalid_argument("topk_spans: max_answer_len must be >= 1");
  if (s.passage_region.empty()) throw std::invalid_argument("topk_spans: empty passage region");
  if (s.passage_region.last >= s.start_logits.size() || s.start_logits.size() != s.end_logits.size())
    throw std::invalid_argument("topk_spans: logits do not cover the passage region");
}

// a ranks strictly before b: higher score, then smaller start, then smaller end.
bool ranks_before(const ScoredSpan& a, const ScoredSpan& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.span.start != b.span.start) return a.span.start < b.span.start;
  return a.span.end < b.span.end;
}

}  // namespace

ScoredSpan score_span(const SpanScores& s, const Span& span) {
  if (span.start > span.end || !s.passage_region.contains(span))
    throw std::out_of_range("score_span: span outside the passage region");
  const Vec64 ls = log_softmax(s.start_logits);
  const Vec64 le = log_softmax(s.end_logits);
  return {span, s.start_logits(span.start) + s.end_logits(span.end), ls(span.start) + le(span.end)};
}

long long candidate_count(int passage_len, int max_answer_len) {
  long long total = 0;
  for (int i = 0; i < passage_len; ++i) total += std::min(max_answer_len, passage_len - i);
  return total;
}

PredictionSet topk_spans(const SpanScores& s, int k, int max_answer_len) {
  check_args(s, k, max_answer_len);
  const Vec64 ls = log_softmax(s.start_logits);
  const Vec64 le = log_softmax(s.end_logits);

  // Bounded heap whose top is the worst retained candidate.
  auto worse_on_top = [](const ScoredSpan& a, const ScoredSpan& b) { return ranks_before(a, b); };
  std::priority_queue<ScoredSpan, std::vector<ScoredSpan>, decltype(worse_on_top)> heap(worse_on_top);
  const auto& r = s.passage_region;
  for (int i = r.first; i <= r.last; ++i) {
    const int j_max = std::min(r.last, i + max_answer_len - 1);
    for (int j = i; j <= j_max; ++j) {
      ScoredSpan cand{{i, j}, s.start_logits(i) + s.end_logits(j), ls(i) + le(j)};
      if (static_cast<int>(heap.size()) < k) {
        heap.push(cand);
      } else if (ranks_before(cand, heap.top())) {
        heap.pop();
        heap.push(cand);
      }
    }
  }
  PredictionSet out;
  out.kind = PredictionKind::ADynamic;
  out.ranked.resize(heap.size());
  for (auto it = out.ranked.rbegin(); it != out.ranked.rend(); ++it) {
    *it = heap.top();
    heap.pop();
  }
  return out;
}

PredictionSet brute_force_topk(const SpanScores& s, int k, int max_answer_len) {
  check_args(s, k, max_answer_len);
  const int p0 = s.passage_region.first;
  const int p1 = s.passage_region.last;
  std::vector<ScoredSpan> all;
  for (int i = p0; i <= p1; ++i) {
    for (int j = p0; j <= p1; ++j) {
      if (j < i || j - i + 1 > max_answer_len) continue;
      ScoredSpan c;
      c.span = {i, j};
      c.score = s.start_logits(i) + s.end_logits(j);
      all.push_back(c);
    }
  }
  std::sort(all.begin(), all.end(), [](const ScoredSpan& a, const ScoredSpan& b) {
    return std::make_tuple(-a.score, a.span.start, a.span.end) < std::make_tuple(-b.score, b.span.start, b.span.end);
  });
  if (static_cast<int>(all.size()) > k) all.resize(static_cast<std::size_t>(k));

  // Normalizers computed directly rather than through log_softmax.
  auto log_norm = [&](const Vec64& logits) {
    double hi = logits(p0);
    for (int i = p0; i <= p1; ++i) hi = std::max(hi, logits(i));
    double z = 0.0;
    for (int i = p0; i <= p1; ++i) z += std::exp(logits(i) - hi);
    return hi + std::log(z);
  };
  const double zs = log_norm(s.start_logits);
  const double ze = log_norm(s.end_logits);
  for (auto& c : all) c.log_prob = (s.start_logits(c.span.start) - zs) + (s.end_logits(c.span.end) - ze);

  PredictionSet out;
  out.kind = PredictionKind::ADynamic;
  out.ranked = std::move(all);
  return out;
}

PredictionSet build_Z(const PredictionSet& preds, const ScoredSpan& gold, int k, GoldMatch match,
                      const std::function<std::string(const Span&)>& text_of) {
  if (k < 1) throw std::invalid_argument("build_Z: k must be >= 1");
  if (match == GoldMatch::Text && !text_of) throw std::invalid_argument("build_Z: text matching needs text_of");
  const std::string gold_text = match == GoldMatch::Text ? text_of(gold.span) : std::string{};
  auto is_gold = [&](const ScoredSpan& c) {
    return match == GoldMatch::Position ? c.span == gold.span : text_of(c.span) == gold_text;
  };

  const std::size_t head = std::min(preds.ranked.size(), static_cast<std::size_t>(k));
  std::optional<int> rank;
  for (std::size_t i = 0; i < head; ++i) {
    if (is_gold(preds.ranked[i])) {
      rank = static_cast<int>(i) + 1;
      break;
    }
  }

  PredictionSet z;
  z.kind = PredictionKind::ZFrozen;
  z.gold_rank = rank;
  if (rank) {
    if (preds.ranked.size() < static_cast<std::size_t>(k))
      throw std::invalid_argument("build_Z: only " + std::to_string(preds.ranked.size()) +
                                  " candidates available for |Z| = " + std::to_string(k));
    z.ranked.assign(preds.ranked.begin(), preds.ranked.begin() + k);
  } else {
    if (preds.ranked.size() + 1 < static_cast<std::size_t>(k))
      throw std::invalid_argument("build_Z: only " + std::to_string(preds.ranked.size() + 1) +
                                  " candidates available after inserting gold for |Z| = " + std::to_string(k));
    z.ranked.assign(preds.ranked.begin(), preds.ranked.begin() + (k - 1));
    z.ranked.push_back(gold);
  }
  return z;
}

// ---------------------------------------------------------------------------

using nlohmann::json;

std::string to_json_line(const ZRecord& r) {
  json j;
  j["id"] = r.id;
  json spans = json::array();
  for (const auto& s : r.spans)
    spans.push_back({{"start", s.span.start}, {"end", s.span.end}, {"score", s.score}, {"log_prob", s.log_prob}});
  j["spans"] = std::move(spans);
  j["gold_rank"] = r.gold_rank ? json(*r.gold_rank) : json(nullptr);
  return j.dump();
}

void write_zstore(const std::filesystem::path& path, const std::vector<ZRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write Z-store " + path.string());
  for (const auto& r : records) out << to_json_line(r) << '\n';
}

std::vector<ZRecord> read_zstore(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open Z-store " + path.string());
  std::vector<ZRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      ZRecord r;
      r.id = j.at("id").get<std::string>();
      for (const auto& s : j.at("spans"))
        r.spans.push_back({{s.at("start").get<int>(), s.at("end").get<int>()},
                           s.at("score").get<double>(),
                           s.at("log_prob").get<double>()});
      if (!j.at("gold_rank").is_null()) r.gold_rank = j.at("gold_rank").get<int>();
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace spanforge
