#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "spanforge/encoder.hpp"

namespace spanforge {

struct ScoredSpan {
  Span span;  // sequence coordinates
  double score = 0.0;     // start_logit + end_logit
  double log_prob = 0.0;  // log P(start) + log P(end)

  bool operator==(const ScoredSpan&) const = default;
};

enum class PredictionKind { ZFrozen, ADynamic };

struct PredictionSet {
  std::vector<ScoredSpan> ranked;
  PredictionKind kind = PredictionKind::ADynamic;
  // Z only: 1-based rank of gold among the decoded candidates, empty when it was inserted.
  std::optional<int> gold_rank;

  std::size_t size() const { return ranked.size(); }
};

// Start/end logits restricted to the passage region. Everything the decoders need.
struct SpanScores {
  Vec64 start_logits;
  Vec64 end_logits;
  Region passage_region;

  static SpanScores from(const ForwardTrace& trace) {
    return {trace.start_logits, trace.end_logits, trace.passage_region};
  }
};

// Score and log-probability of one span.
ScoredSpan score_span(const SpanScores& scores, const Span& span);

// Number of legal spans: sum over starts of min(cap, remaining length).
long long candidate_count(int passage_len, int max_answer_len);

PredictionSet topk_spans(const SpanScores& scores, int k, int max_answer_len);
inline PredictionSet topk_spans(const ForwardTrace& trace, int k, int max_answer_len) {
  return topk_spans(SpanScores::from(trace), k, max_answer_len);
}

// Test oracle: materialize every legal span, fully sort, truncate.
PredictionSet brute_force_topk(const SpanScores& scores, int k, int max_answer_len);

enum class GoldMatch { Position, Text };

// Frozen Z of size k: the top-k when gold is among them, otherwise the top-(k-1)
// followed by gold in the last slot. With GoldMatch::Text, membership compares
// span texts via `text_of`.
PredictionSet build_Z(const PredictionSet& preds, const ScoredSpan& gold, int k,
                      GoldMatch match = GoldMatch::Position,
                      const std::function<std::string(const Span&)>& text_of = {});

// Z-store: one JSON object per line; spans are stored in passage coordinates.
struct ZRecord {
  std::string id;
  std::vector<ScoredSpan> spans;  // passage coordinates
  std::optional<int> gold_rank;
};

void write_zstore(const std::filesystem::path& path, const std::vector<ZRecord>& records);
std::vector<ZRecord> read_zstore(const std::filesystem::path& path);
std::string to_json_line(const ZRecord& r);

}  // namespace spanforge
