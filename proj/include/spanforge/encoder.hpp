#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "spanforge/corpus.hpp"
#include "spanforge/numeric.hpp"

namespace spanforge {

struct EncoderConfig {
  int vocab_size = 200;
  int max_len = 64;
  int question_max_len = 64;
  int d_model = 32;
  int d_ff = 64;
  int layers = 1;
  int k_hard = 20;  // number of hard-learning weight logits (= |Z|)

  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

struct Block {
  Mat64 Wq, Wk, Wv;  // d x d
  Mat64 W1;          // d x d_ff
  Mat64 W2;          // d_ff x d
};

// Every learnable tensor. Gradients use the same type.
struct ModelParams {
  EncoderConfig config;
  Mat64 token_emb;  // V x d
  Mat64 pos_emb;    // L x d
  std::vector<Block> blocks;
  Mat64 head_W;     // 2 x d; row 0 scores starts, row 1 scores ends
  Vec64 head_b;     // 2
  Vec64 hard_logits;  // k; softmax gives the hard-learning weights

  static ModelParams zeros(const EncoderConfig& config);

  // Visits every tensor as a flat contiguous array, in checkpoint order.
  template <typename F>
  void for_each_tensor(F&& f) {
    f("token_emb", token_emb.data(), token_emb.size());
    f("pos_emb", pos_emb.data(), pos_emb.size());
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      auto& b = blocks[i];
      const std::string p = "block" + std::to_string(i) + ".";
      f(p + "Wq", b.Wq.data(), b.Wq.size());
      f(p + "Wk", b.Wk.data(), b.Wk.size());
      f(p + "Wv", b.Wv.data(), b.Wv.size());
      f(p + "W1", b.W1.data(), b.W1.size());
      f(p + "W2", b.W2.data(), b.W2.size());
    }
    f("head_W", head_W.data(), head_W.size());
    f("head_b", head_b.data(), head_b.size());
    f("hard_logits", hard_logits.data(), hard_logits.size());
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    const_cast<ModelParams*>(this)->for_each_tensor(
        [&](const std::string& name, double* data, Eigen::Index n) { f(name, static_cast<const double*>(data), n); });
  }

  Eigen::Index size() const;
  Vec64 flatten() const;
  void assign(const Vec64& flat);
  ModelParams& operator+=(const ModelParams& other);
  ModelParams& operator*=(double s);
  void set_zero();
  bool all_finite() const;
};

using ParamGrads = ModelParams;

ModelParams init_params(const EncoderConfig& config, std::uint64_t seed);

struct BlockCache {
  Mat64 input;   // n x d
  Mat64 q, k, v; // n x d
  Mat64 attn;    // n x n, row-stochastic
  Mat64 mid;     // input + attn * v
  Mat64 pre;     // mid * W1, before relu
  Mat64 act;     // relu(pre)
};

struct ForwardTrace {
  Mat64 token_reprs;  // n x d; last block output
  Vec64 start_logits; // n; mask value outside the passage region
  Vec64 end_logits;
  Region passage_region;
  Region question_region;
  std::vector<int> token_ids;  // valid prefix only
  std::vector<BlockCache> cache;

  int length() const { return static_cast<int>(token_reprs.rows()); }
};

ForwardTrace forward(const ModelParams& params, const EncodedExample& enc);

// Gradients arriving at the trace: w.r.t. the start/end logits (entries outside the
// passage region are ignored) and, optionally, w.r.t. token_reprs (n x d or empty).
struct TraceUpstream {
  Vec64 d_start;
  Vec64 d_end;
  Mat64 d_reprs;

  static TraceUpstream zeros(const ForwardTrace& trace);
};

ParamGrads backward(const ModelParams& params, const ForwardTrace& trace, const TraceUpstream& upstream);
// Accumulates into grads instead of allocating.
void backward_into(const ModelParams& params, const ForwardTrace& trace, const TraceUpstream& upstream,
                   ParamGrads& grads);

Vec64 span_repr(const ForwardTrace& trace, const Span& seq_span);
Vec64 question_repr(const ForwardTrace& trace);

// Routes a gradient w.r.t. a mean-pooled row range back onto token_reprs rows.
void add_pool_grad(Mat64& d_reprs, int first, int last, const Vec64& g);

// Binary checkpoint; see README for the byte layout.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace spanforge
