#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "spanforge/encoder.hpp"
#include "spanforge/metrics.hpp"
#include "spanforge/spandecode.hpp"

namespace spanforge {

struct MiningStrategy {
  enum class Variant { MostSimilar, Top1Prediction, RandomSample };

  Variant variant = Variant::MostSimilar;
  int theta = 1;           // MostSimilar only
  std::uint64_t seed = 0;  // RandomSample stream

  static MiningStrategy parse(const std::string& variant, int theta, std::uint64_t seed = 0);
  std::string name() const;  // "most_similar", "top1" or "random"
  void validate() const;
};

// Gold answer of one example, in sequence coordinates, with its resolved text.
struct GoldRef {
  Span span;
  std::string text;
};

using SpanTextFn = std::function<std::string(const Span&)>;

// A candidate is eligible when it differs from gold both by position and by normalized text.
bool is_eligible_negative(const Span& cand, const GoldRef& gold, const SpanTextFn& text_of,
                          Normalization mode = Normalization::Plain);

// Hard negatives for one example. An empty result means no candidate is eligible
// and the example should skip the contrastive term.
std::vector<Span> select_hard_negatives(const ForwardTrace& trace, const PredictionSet& a, const GoldRef& gold,
                                        const SpanTextFn& text_of, const MiningStrategy& strategy,
                                        const std::string& example_id = {}, std::uint64_t step = 0,
                                        Normalization mode = Normalization::Plain);

}  // namespace spanforge
