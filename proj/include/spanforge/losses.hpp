#pragma once

#include <vector>

#include "spanforge/encoder.hpp"
#include "spanforge/spandecode.hpp"

namespace spanforge {

// How hard-loss weights are indexed: by rank within Z, or by the candidate's
// boundary relation to gold (exact, start only, end only, neither).
enum class HardWeighting { Rank, Type };
inline constexpr int kBoundaryTypes = 4;

struct LossConfig {
  double tau = 10.0;   // contrastive temperature
  double alpha = 0.5;  // weight of the contrastive term in the combined objective
  int k_Z = 20;        // frozen prediction-set size
  int k_A = 50;        // dynamic prediction-set size used for mining
  int batch_size = 32;
  HardWeighting hard_weighting = HardWeighting::Rank;

  // Number of hard-weight logits the model carries.
  int hard_weight_count() const { return hard_weighting == HardWeighting::Rank ? k_Z : kBoundaryTypes; }
  void validate() const;
};

// A span-level loss value and its gradient w.r.t. the start/end logits.
struct SpanLoss {
  double value = 0.0;
  Vec64 d_start;
  Vec64 d_end;
  Vec64 d_hard_logits;  // hard_loss only
};

// log P(start = s) + log P(end = e), the two heads treated as independent.
double span_log_prob(const ForwardTrace& trace, const Span& span);

SpanLoss ce_loss(const ForwardTrace& trace, const Span& gold);
SpanLoss mml_loss(const ForwardTrace& trace, const std::vector<Span>& z);
// Weights w = softmax(u) indexed by rank: |Z| must equal len(u).
SpanLoss hard_loss(const ForwardTrace& trace, const std::vector<Span>& z, const Vec64& hard_logits);
// w_l proportional to exp(u[groups[l]]); rank weighting is groups[l] = l.
SpanLoss hard_loss_grouped(const ForwardTrace& trace, const std::vector<Span>& z, const std::vector<int>& groups,
                           const Vec64& hard_logits);
// 0 exact, 1 start matches only, 2 end matches only, 3 neither.
int boundary_type(const Span& candidate, const Span& gold);

std::vector<Span> spans_of(const PredictionSet& set);

// One anchor of the contrastive batch: question, gold answer, mined hard negatives.
struct ContrastItem {
  Vec64 question;
  Vec64 gold;
  std::vector<Vec64> hard;
};

struct ContrastLoss {
  double value = 0.0;  // mean over items
  std::vector<Vec64> d_question;
  std::vector<Vec64> d_gold;
  std::vector<std::vector<Vec64>> d_hard;
};

// Per item i the candidates are gold_i, its hard negatives, and the other items' golds;
// similarities are cosine divided by tau.
ContrastLoss contrastive_loss(const std::vector<ContrastItem>& batch, double tau);

double combined_loss(double contrast, double hard, double alpha);

}  // namespace spanforge
