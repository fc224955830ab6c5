#include "spanforge/mining.hpp"

#include <algorithm>
#include <stdexcept>

#include "spanforge/rng.hpp"

namespace spanforge {

MiningStrategy MiningStrategy::parse(const std::string& variant, int theta, std::uint64_t seed) {
  MiningStrategy s;
  if (variant == "most_similar") s.variant = Variant::MostSimilar;
  else if (variant == "top1") s.variant = Variant::Top1Prediction;
  else if (variant == "random") s.variant = Variant::RandomSample;
  else throw std::invalid_argument("mining: unknown variant '" + variant + "'");
  s.theta = theta;
  s.seed = seed;
  s.validate();
  return s;
}

std::string MiningStrategy::name() const {
  switch (variant) {
    case Variant::MostSimilar: return "most_similar";
    case Variant::Top1Prediction: return "top1";
    case Variant::RandomSample: return "random";
  }
  return "?";
}

void MiningStrategy::validate() const {
  if (theta < 1) throw std::invalid_argument("mining: theta must be >= 1");
}

bool is_eligible_negative(const Span& cand, const GoldRef& gold, const SpanTextFn& text_of, Normalization mode) {
  if (cand == gold.span) return false;
  return normalize(text_of(cand), mode) != normalize(gold.text, mode);
}

std::vector<Span> select_hard_negatives(const ForwardTrace& trace, const PredictionSet& a, const GoldRef& gold,
                                        const SpanTextFn& text_of, const MiningStrategy& strategy,
                                        const std::string& example_id, std::uint64_t step, Normalization mode) {
  strategy.validate();
  if (a.ranked.empty()) throw std::invalid_argument("select_hard_negatives: empty prediction set");
  std::vector<Span> eligible;
  for (const auto& c : a.ranked)
    if (is_eligible_negative(c.span, gold, text_of, mode)) eligible.push_back(c.span);
  if (eligible.empty()) return {};

  switch (strategy.variant) {
    case MiningStrategy::Variant::Top1Prediction:
      return {eligible.front()};
    case MiningStrategy::Variant::RandomSample: {
      Rng rng(mix_seed(strategy.seed ^ hash_string(example_id) ^ mix_seed(step)));
      return {eligible[static_cast<std::size_t>(rng.below(static_cast<int>(eligible.size())))]};
    }
    case MiningStrategy::Variant::MostSimilar: {
      const Vec64 g = span_repr(trace, gold.span);
      std::vector<std::pair<double, std::size_t>> sims;
      sims.reserve(eligible.size());
      for (std::size_t i = 0; i < eligible.size(); ++i)
        sims.emplace_back(cosine_sim(span_repr(trace, eligible[i]), g), i);
      // Ties keep the rank order of the prediction set.
      std::stable_sort(sims.begin(), sims.end(), [](const auto& x, const auto& y) { return x.first > y.first; });
      const std::size_t n = std::min(sims.size(), static_cast<std::size_t>(strategy.theta));
      std::vector<Span> out;
      for (std::size_t i = 0; i < n; ++i) out.push_back(eligible[sims[i].second]);
      return out;
    }
  }
  return {};
}

}  // namespace spanforge
