#include "spanforge/encoder.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "spanforge/rng.hpp"

namespace spanforge {

void EncoderConfig::validate() const {
  if (vocab_size <= Vocab::kNumSpecial) throw std::invalid_argument("encoder: vocab_size too small");
  if (max_len < 4) throw std::invalid_argument("encoder: max_len must be >= 4");
  if (d_model < 1 || d_ff < 1) throw std::invalid_argument("encoder: dimensions must be positive");
  if (layers < 1) throw std::invalid_argument("encoder: layers must be >= 1");
  if (k_hard < 1) throw std::invalid_argument("encoder: k_hard must be >= 1");
  if (question_max_len < 0) throw std::invalid_argument("encoder: question_max_len must be >= 0");
}

ModelParams ModelParams::zeros(const EncoderConfig& c) {
  c.validate();
  ModelParams p;
  p.config = c;
  p.token_emb = Mat64::Zero(c.vocab_size, c.d_model);
  p.pos_emb = Mat64::Zero(c.max_len, c.d_model);
  p.blocks.resize(static_cast<std::size_t>(c.layers));
  for (auto& b : p.blocks) {
    b.Wq = Mat64::Zero(c.d_model, c.d_model);
    b.Wk = Mat64::Zero(c.d_model, c.d_model);
    b.Wv = Mat64::Zero(c.d_model, c.d_model);
    b.W1 = Mat64::Zero(c.d_model, c.d_ff);
    b.W2 = Mat64::Zero(c.d_ff, c.d_model);
  }
  p.head_W = Mat64::Zero(2, c.d_model);
  p.head_b = Vec64::Zero(2);
  p.hard_logits = Vec64::Zero(c.k_hard);
  return p;
}

Eigen::Index ModelParams::size() const {
  Eigen::Index n = 0;
  for_each_tensor([&](const std::string&, const double*, Eigen::Index k) { n += k; });
  return n;
}

Vec64 ModelParams::flatten() const {
  Vec64 out(size());
  Eigen::Index off = 0;
  for_each_tensor([&](const std::string&, const double* data, Eigen::Index k) {
    out.segment(off, k) = Eigen::Map<const Vec64>(data, k);
    off += k;
  });
  return out;
}

void ModelParams::assign(const Vec64& flat) {
  if (flat.size() != size()) throw std::invalid_argument("ModelParams::assign: size mismatch");
  Eigen::Index off = 0;
  for_each_tensor([&](const std::string&, double* data, Eigen::Index k) {
    Eigen::Map<Vec64>(data, k) = flat.segment(off, k);
    off += k;
  });
}

ModelParams& ModelParams::operator+=(const ModelParams& other) {
  if (!(config == other.config)) throw std::invalid_argument("ModelParams: shape mismatch");
  token_emb += other.token_emb;
  pos_emb += other.pos_emb;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].Wq += other.blocks[i].Wq;
    blocks[i].Wk += other.blocks[i].Wk;
    blocks[i].Wv += other.blocks[i].Wv;
    blocks[i].W1 += other.blocks[i].W1;
    blocks[i].W2 += other.blocks[i].W2;
  }
  head_W += other.head_W;
  head_b += other.head_b;
  hard_logits += other.hard_logits;
  return *this;
}

ModelParams& ModelParams::operator*=(double s) {
  for_each_tensor([&](const std::string&, double* data, Eigen::Index k) { Eigen::Map<Vec64>(data, k) *= s; });
  return *this;
}

void ModelParams::set_zero() {
  for_each_tensor([](const std::string&, double* data, Eigen::Index k) { Eigen::Map<Vec64>(data, k).setZero(); });
}

bool ModelParams::all_finite() const {
  bool ok = true;
  for_each_tensor([&](const std::string&, const double* data, Eigen::Index k) {
    ok = ok && Eigen::Map<const Vec64>(data, k).allFinite();
  });
  return ok;
}

ModelParams init_params(const EncoderConfig& config, std::uint64_t seed) {
  ModelParams p = ModelParams::zeros(config);
  Rng rng(mix_seed(seed ^ 0x5eed'1e55'0000'0001ULL));
  const double bound = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  auto fill = [&](Mat64& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
  };
  fill(p.token_emb);
  fill(p.pos_emb);
  for (auto& b : p.blocks) {
    fill(b.Wq);
    fill(b.Wk);
    fill(b.Wv);
    fill(b.W1);
    fill(b.W2);
  }
  fill(p.head_W);
  return p;
}

// ---------------------------------------------------------------------------

namespace {

void row_softmax_inplace(Mat64& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    auto row = s.row(r);
    const double hi = row.maxCoeff();
    row = (row.array() - hi).exp();
    row /= row.sum();
  }
}

}  // namespace

ForwardTrace forward(const ModelParams& params, const EncodedExample& enc) {
  const auto& c = params.config;
  const int n = enc.length;
  if (n < 1 || n > c.max_len)
    throw std::invalid_argument("forward: sequence length " + std::to_string(n) + " outside [1, " +
                                std::to_string(c.max_len) + "]");
  for (int t = 0; t < n; ++t)
    if (!enc.attention_mask.empty() && enc.attention_mask[static_cast<std::size_t>(t)] == 0)
      throw std::invalid_argument("forward: attention mask must cover a contiguous prefix");
  if (enc.passage_region.empty()) throw std::invalid_argument("forward: empty passage region");

  ForwardTrace tr;
  tr.passage_region = enc.passage_region;
  tr.question_region = enc.question_region;
  tr.token_ids.assign(enc.token_ids.begin(), enc.token_ids.begin() + n);

  Mat64 h(n, c.d_model);
  for (int t = 0; t < n; ++t) {
    const int id = tr.token_ids[static_cast<std::size_t>(t)];
    if (id < 0 || id >= c.vocab_size)
      throw std::invalid_argument("forward: token id " + std::to_string(id) + " out of vocabulary range");
    h.row(t) = params.token_emb.row(id) + params.pos_emb.row(t);
  }

  const double scale = 1.0 / std::sqrt(static_cast<double>(c.d_model));
  tr.cache.resize(params.blocks.size());
  for (std::size_t l = 0; l < params.blocks.size(); ++l) {
    const auto& b = params.blocks[l];
    auto& bc = tr.cache[l];
    bc.input = h;
    bc.q.noalias() = h * b.Wq;
    bc.k.noalias() = h * b.Wk;
    bc.v.noalias() = h * b.Wv;
    bc.attn.noalias() = bc.q * bc.k.transpose();
    bc.attn *= scale;
    row_softmax_inplace(bc.attn);
    bc.mid = h;
    bc.mid.noalias() += bc.attn * bc.v;
    bc.pre.noalias() = bc.mid * b.W1;
    bc.act = bc.pre.cwiseMax(0.0);
    h = bc.mid;
    h.noalias() += bc.act * b.W2;
  }
  tr.token_reprs = std::move(h);

  const Vec64 start = tr.token_reprs * params.head_W.row(0).transpose();
  const Vec64 end = tr.token_reprs * params.head_W.row(1).transpose();
  tr.start_logits = Vec64::Constant(n, mask_value());
  tr.end_logits = Vec64::Constant(n, mask_value());
  for (int t = enc.passage_region.first; t <= enc.passage_region.last; ++t) {
    tr.start_logits(t) = start(t) + params.head_b(0);
    tr.end_logits(t) = end(t) + params.head_b(1);
  }
  return tr;
}

TraceUpstream TraceUpstream::zeros(const ForwardTrace& trace) {
  const int n = trace.length();
  return {Vec64::Zero(n), Vec64::Zero(n), Mat64::Zero(n, trace.token_reprs.cols())};
}

void backward_into(const ModelParams& params, const ForwardTrace& trace, const TraceUpstream& up,
                   ParamGrads& g) {
  const auto& c = params.config;
  const int n = trace.length();
  if (up.d_start.size() != n || up.d_end.size() != n)
    throw std::invalid_argument("backward: logit gradient length mismatch");
  if (up.d_reprs.size() != 0 && (up.d_reprs.rows() != n || up.d_reprs.cols() != c.d_model))
    throw std::invalid_argument("backward: token_reprs gradient shape mismatch");
  if (!(g.config == c)) throw std::invalid_argument("backward: gradient storage shape mismatch");
  if (trace.cache.size() != params.blocks.size())
    throw std::invalid_argument("backward: trace does not match parameters");

  // Logit gradients, restricted to the passage region.
  Mat64 dlogits = Mat64::Zero(n, 2);
  for (int t = trace.passage_region.first; t <= trace.passage_region.last; ++t) {
    dlogits(t, 0) = up.d_start(t);
    dlogits(t, 1) = up.d_end(t);
  }
  g.head_W.noalias() += dlogits.transpose() * trace.token_reprs;
  g.head_b += dlogits.colwise().sum().transpose();

  Mat64 dh = dlogits * params.head_W;
  if (up.d_reprs.size() != 0) dh += up.d_reprs;

  const double scale = 1.0 / std::sqrt(static_cast<double>(c.d_model));
  for (std::size_t li = params.blocks.size(); li-- > 0;) {
    const auto& b = params.blocks[li];
    const auto& bc = trace.cache[li];
    auto& gb = g.blocks[li];

    // h = mid + relu(mid W1) W2
    gb.W2.noalias() += bc.act.transpose() * dh;
    Mat64 dpre = dh * b.W2.transpose();
    dpre = (bc.pre.array() > 0.0).select(dpre, 0.0);
    gb.W1.noalias() += bc.mid.transpose() * dpre;
    Mat64 dmid = dh;
    dmid.noalias() += dpre * b.W1.transpose();

    // mid = input + A V, A = softmax(Q K^T * scale)
    Mat64 dA = dmid * bc.v.transpose();
    Mat64 dV = bc.attn.transpose() * dmid;
    const Vec64 rowdot = (dA.array() * bc.attn.array()).rowwise().sum();
    Mat64 dS = bc.attn.array() * (dA.colwise() - rowdot).array();
    dS *= scale;
    Mat64 dQ = dS * bc.k;
    Mat64 dK = dS.transpose() * bc.q;

    gb.Wq.noalias() += bc.input.transpose() * dQ;
    gb.Wk.noalias() += bc.input.transpose() * dK;
    gb.Wv.noalias() += bc.input.transpose() * dV;

    Mat64 dinput = dmid;
    dinput.noalias() += dQ * b.Wq.transpose();
    dinput.noalias() += dK * b.Wk.transpose();
    dinput.noalias() += dV * b.Wv.transpose();
    dh = std::move(dinput);
  }

  for (int t = 0; t < n; ++t) {
    g.token_emb.row(trace.token_ids[static_cast<std::size_t>(t)]) += dh.row(t);
    g.pos_emb.row(t) += dh.row(t);
  }
}

ParamGrads backward(const ModelParams& params, const ForwardTrace& trace, const TraceUpstream& upstream) {
  ParamGrads g = ModelParams::zeros(params.config);
  backward_into(params, trace, upstream, g);
  return g;
}

Vec64 span_repr(const ForwardTrace& trace, const Span& s) {
  if (s.start > s.end || !trace.passage_region.contains(s))
    throw std::out_of_range("span_repr: span outside the passage region");
  return mean_pool_range(trace.token_reprs, s.start, s.end);
}

Vec64 question_repr(const ForwardTrace& trace) {
  if (trace.question_region.empty()) throw std::invalid_argument("question_repr: empty question");
  return mean_pool_range(trace.token_reprs, trace.question_region.first, trace.question_region.last);
}

void add_pool_grad(Mat64& d_reprs, int first, int last, const Vec64& g) {
  const double w = 1.0 / static_cast<double>(last - first + 1);
  for (int t = first; t <= last; ++t) d_reprs.row(t) += w * g.transpose();
}

// ---------------------------------------------------------------------------
// Checkpoint: "SPFGCKPT", u32 version, 7 x u32 config, u64 count, count x f64; all little-endian.

namespace {

constexpr char kMagic[8] = {'S', 'P', 'F', 'G', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put_le(std::ostream& out, T value) {
  static_assert(std::is_integral_v<T>);
  unsigned char buf[sizeof(T)];
  auto u = static_cast<std::make_unsigned_t<T>>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) throw std::runtime_error("checkpoint: truncated file");
  std::make_unsigned_t<T> u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<std::make_unsigned_t<T>>(buf[i]) << (8 * i);
  return static_cast<T>(u);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  const auto& c = params.config;
  out.write(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, kVersion);
  for (int v : {c.vocab_size, c.max_len, c.question_max_len, c.d_model, c.d_ff, c.layers, c.k_hard})
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  const Vec64 flat = params.flatten();
  put_le<std::uint64_t>(out, static_cast<std::uint64_t>(flat.size()));
  for (Eigen::Index i = 0; i < flat.size(); ++i) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(flat(i)));
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  const auto version = get_le<std::uint32_t>(in);
  if (version != kVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  EncoderConfig c;
  int* fields[] = {&c.vocab_size, &c.max_len, &c.question_max_len, &c.d_model, &c.d_ff, &c.layers, &c.k_hard};
  for (int* f : fields) *f = static_cast<int>(get_le<std::uint32_t>(in));
  ModelParams p = ModelParams::zeros(c);
  const auto count = get_le<std::uint64_t>(in);
  if (count != static_cast<std::uint64_t>(p.size()))
    throw std::runtime_error("checkpoint: parameter count does not match its config");
  Vec64 flat(p.size());
  for (Eigen::Index i = 0; i < flat.size(); ++i) flat(i) = std::bit_cast<double>(get_le<std::uint64_t>(in));
  p.assign(flat);
  return p;
}

}  // namespace spanforge
