#include "spanforge/losses.hpp"

#include <stdexcept>

namespace spanforge {

void LossConfig::validate() const {
  if (!(tau > 0)) throw std::invalid_argument("loss config: tau must be positive");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("loss config: alpha must lie in [0, 1]");
  if (k_Z < 1 || k_A < 1) throw std::invalid_argument("loss config: prediction-set sizes must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("loss config: batch_size must be >= 1");
}

namespace {

struct HeadDists {
  Vec64 log_start, log_end;  // -inf outside the passage region
  Vec64 p_start, p_end;
};

HeadDists head_dists(const ForwardTrace& tr) {
  HeadDists h;
  h.log_start = log_softmax(tr.start_logits);
  h.log_end = log_softmax(tr.end_logits);
  h.p_start = softmax(tr.start_logits);
  h.p_end = softmax(tr.end_logits);
  return h;
}

void check_span(const ForwardTrace& tr, const Span& s) {
  if (s.start > s.end || !tr.passage_region.contains(s))
    throw std::out_of_range("span loss: span outside the passage region");
}

}  // namespace

double span_log_prob(const ForwardTrace& trace, const Span& span) {
  check_span(trace, span);
  return log_softmax(trace.start_logits)(span.start) + log_softmax(trace.end_logits)(span.end);
}

// d(-sum_l c_l log P(z_l)) / d logits = sum_l c_l (p - onehot(z_l)), per head.
static void accumulate_weighted_nll_grad(const HeadDists& h, const std::vector<Span>& z, const Vec64& coef,
                                         SpanLoss& out) {
  const double total = coef.sum();
  out.d_start = total * h.p_start;
  out.d_end = total * h.p_end;
  for (std::size_t l = 0; l < z.size(); ++l) {
    out.d_start(z[l].start) -= coef(static_cast<Eigen::Index>(l));
    out.d_end(z[l].end) -= coef(static_cast<Eigen::Index>(l));
  }
}

SpanLoss ce_loss(const ForwardTrace& trace, const Span& gold) {
  check_span(trace, gold);
  const HeadDists h = head_dists(trace);
  SpanLoss out;
  out.value = -(h.log_start(gold.start) + h.log_end(gold.end));
  accumulate_weighted_nll_grad(h, {gold}, Vec64::Ones(1), out);
  return out;
}

SpanLoss mml_loss(const ForwardTrace& trace, const std::vector<Span>& z) {
  if (z.empty()) throw std::invalid_argument("mml_loss: empty prediction set");
  for (const auto& s : z) check_span(trace, s);
  const HeadDists h = head_dists(trace);
  Vec64 lp(static_cast<Eigen::Index>(z.size()));
  for (std::size_t l = 0; l < z.size(); ++l)
    lp(static_cast<Eigen::Index>(l)) = h.log_start(z[l].start) + h.log_end(z[l].end);
  const double lse = log_sum_exp(lp);
  SpanLoss out;
  out.value = -lse;
  const Vec64 posterior = (lp.array() - lse).exp().matrix();
  accumulate_weighted_nll_grad(h, z, posterior, out);
  return out;
}

SpanLoss hard_loss(const ForwardTrace& trace, const std::vector<Span>& z, const Vec64& hard_logits) {
  if (static_cast<Eigen::Index>(z.size()) != hard_logits.size())
    throw std::invalid_argument("hard_loss: |Z| = " + std::to_string(z.size()) + " but " +
                                std::to_string(hard_logits.size()) + " weight logits");
  std::vector<int> groups(z.size());
  for (std::size_t l = 0; l < z.size(); ++l) groups[l] = static_cast<int>(l);
  return hard_loss_grouped(trace, z, groups, hard_logits);
}

SpanLoss hard_loss_grouped(const ForwardTrace& trace, const std::vector<Span>& z, const std::vector<int>& groups,
                           const Vec64& hard_logits) {
  if (z.empty()) throw std::invalid_argument("hard_loss: empty prediction set");
  if (groups.size() != z.size()) throw std::invalid_argument("hard_loss: one group index per element required");
  for (int g : groups)
    if (g < 0 || g >= hard_logits.size()) throw std::invalid_argument("hard_loss: group index out of range");
  for (const auto& s : z) check_span(trace, s);
  const HeadDists h = head_dists(trace);
  const auto n = static_cast<Eigen::Index>(z.size());
  Vec64 logits(n);
  for (Eigen::Index l = 0; l < n; ++l) logits(l) = hard_logits(groups[static_cast<std::size_t>(l)]);
  const Vec64 w = softmax(logits);
  Vec64 nll(n);
  for (std::size_t l = 0; l < z.size(); ++l)
    nll(static_cast<Eigen::Index>(l)) = -(h.log_start(z[l].start) + h.log_end(z[l].end));
  SpanLoss out;
  out.value = w.dot(nll);
  accumulate_weighted_nll_grad(h, z, w, out);
  // d/du_g sum_l w_l c_l = sum_{l in g} w_l (c_l - sum_m w_m c_m)
  out.d_hard_logits = Vec64::Zero(hard_logits.size());
  for (Eigen::Index l = 0; l < n; ++l)
    out.d_hard_logits(groups[static_cast<std::size_t>(l)]) += w(l) * (nll(l) - out.value);
  return out;
}

int boundary_type(const Span& candidate, const Span& gold) {
  const bool s = candidate.start == gold.start;
  const bool e = candidate.end == gold.end;
  if (s && e) return 0;
  if (s) return 1;
  if (e) return 2;
  return 3;
}

std::vector<Span> spans_of(const PredictionSet& set) {
  std::vector<Span> out;
  out.reserve(set.ranked.size());
  for (const auto& s : set.ranked) out.push_back(s.span);
  return out;
}

ContrastLoss contrastive_loss(const std::vector<ContrastItem>& batch, double tau) {
  if (batch.empty()) throw std::invalid_argument("contrastive_loss: empty batch");
  if (!(tau > 0)) throw std::invalid_argument("contrastive_loss: tau must be positive");
  const std::size_t B = batch.size();
  ContrastLoss out;
  out.d_question.resize(B);
  out.d_gold.resize(B);
  out.d_hard.resize(B);
  for (std::size_t i = 0; i < B; ++i) {
    const auto d = batch[i].question.size();
    out.d_question[i] = Vec64::Zero(d);
    out.d_gold[i] = Vec64::Zero(batch[i].gold.size());
    out.d_hard[i].assign(batch[i].hard.size(), Vec64::Zero(d));
  }

  const double inv_b = 1.0 / static_cast<double>(B);
  for (std::size_t i = 0; i < B; ++i) {
    const auto& item = batch[i];
    // Candidate order: own gold, own hard negatives, other golds.
    std::vector<const Vec64*> cands;
    std::vector<Vec64*> grads;
    cands.push_back(&item.gold);
    grads.push_back(&out.d_gold[i]);
    for (std::size_t h = 0; h < item.hard.size(); ++h) {
      cands.push_back(&item.hard[h]);
      grads.push_back(&out.d_hard[i][h]);
    }
    for (std::size_t n = 0; n < B; ++n) {
      if (n == i) continue;
      cands.push_back(&batch[n].gold);
      grads.push_back(&out.d_gold[n]);
    }
    Vec64 logits(static_cast<Eigen::Index>(cands.size()));
    for (std::size_t c = 0; c < cands.size(); ++c)
      logits(static_cast<Eigen::Index>(c)) = cosine_sim(item.question, *cands[c]) / tau;
    const double lse = log_sum_exp(logits);
    out.value += (lse - logits(0)) * inv_b;

    Vec64 dlogits = (logits.array() - lse).exp().matrix();
    dlogits(0) -= 1.0;
    for (std::size_t c = 0; c < cands.size(); ++c) {
      const double coef = dlogits(static_cast<Eigen::Index>(c)) * inv_b / tau;
      const auto g = cosine_sim_grad(item.question, *cands[c]);
      out.d_question[i] += coef * g.du;
      *grads[c] += coef * g.dv;
    }
  }
  return out;
}

double combined_loss(double contrast, double hard, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("combined_loss: alpha must lie in [0, 1]");
  return alpha * contrast + (1.0 - alpha) * hard;
}

}  // namespace spanforge
