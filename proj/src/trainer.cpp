#include "spanforge/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include "json.hpp"
#include "spanforge/parallel.hpp"
#include "spanforge/rng.hpp"

namespace spanforge {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  loss.validate();
  if (max_len < 4) throw std::invalid_argument("train config: max_len must be >= 4");
  if (d_model < 1 || d_ff < 1 || layers < 1) throw std::invalid_argument("train config: invalid encoder dims");
  if (theta < 1) throw std::invalid_argument("train config: theta must be >= 1");
  if (!(optim.lr >= 0)) throw std::invalid_argument("train config: lr must be >= 0");
  if (!(optim.beta1 >= 0 && optim.beta1 < 1 && optim.beta2 >= 0 && optim.beta2 < 1))
    throw std::invalid_argument("train config: betas must lie in [0, 1)");
  if (!(optim.eps > 0)) throw std::invalid_argument("train config: adam_eps must be positive");
  if (!(optim.weight_decay >= 0)) throw std::invalid_argument("train config: weight_decay must be >= 0");
  if (!(optim.warmup_proportion >= 0 && optim.warmup_proportion <= 1))
    throw std::invalid_argument("train config: warmup_proportion must lie in [0, 1]");
  if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
  if (base_epochs < 0) throw std::invalid_argument("train config: base_epochs must be >= 0");
  if (max_steps < 0) throw std::invalid_argument("train config: max_steps must be >= 0");
  if (max_answer_len < 1) throw std::invalid_argument("train config: max_answer_len must be >= 1");
  if (phase != "base" && phase != "collect" && phase != "finetune")
    throw std::invalid_argument("train config: phase must be base, collect or finetune");
  (void)mining_strategy();
}

EncoderConfig TrainConfig::encoder_config(int vocab_size) const {
  EncoderConfig c;
  c.vocab_size = vocab_size;
  c.max_len = max_len;
  c.question_max_len = question_max_len;
  c.d_model = d_model;
  c.d_ff = d_ff;
  c.layers = layers;
  c.k_hard = loss.hard_weight_count();
  return c;
}

MiningStrategy TrainConfig::mining_strategy() const {
  return MiningStrategy::parse(mining, theta, mix_seed(seed ^ 0x6d696e65ULL));
}

namespace {

const char* objective_name(SpanObjective o) {
  switch (o) {
    case SpanObjective::Hard: return "hard";
    case SpanObjective::Mml: return "mml";
    case SpanObjective::Ce: return "ce";
  }
  return "?";
}

}  // namespace

KeyValues TrainConfig::to_key_values() const {
  KeyValues kv;
  kv["corpus"] = corpus;
  kv["max_len"] = std::to_string(max_len);
  kv["question_max_len"] = std::to_string(question_max_len);
  kv["d_model"] = std::to_string(d_model);
  kv["d_ff"] = std::to_string(d_ff);
  kv["layers"] = std::to_string(layers);
  kv["tau"] = format_double(loss.tau);
  kv["alpha"] = format_double(loss.alpha);
  kv["k_z"] = std::to_string(loss.k_Z);
  kv["k_a"] = std::to_string(loss.k_A);
  kv["batch_size"] = std::to_string(loss.batch_size);
  kv["mining"] = mining;
  kv["theta"] = std::to_string(theta);
  kv["optimizer"] = "adamw";
  kv["lr"] = format_double(optim.lr);
  kv["beta1"] = format_double(optim.beta1);
  kv["beta2"] = format_double(optim.beta2);
  kv["adam_eps"] = format_double(optim.eps);
  kv["weight_decay"] = format_double(optim.weight_decay);
  kv["warmup_proportion"] = format_double(optim.warmup_proportion);
  kv["epochs"] = std::to_string(epochs);
  kv["base_epochs"] = std::to_string(base_epochs);
  kv["max_steps"] = std::to_string(max_steps);
  kv["checkpoint_every"] = std::to_string(checkpoint_every);
  kv["eval_every"] = std::to_string(eval_every);
  kv["seed"] = std::to_string(seed);
  kv["phase"] = phase;
  kv["max_answer_len"] = std::to_string(max_answer_len);
  kv["z_match"] = z_match == GoldMatch::Position ? "position" : "text";
  kv["z_refresh_every"] = std::to_string(z_refresh_every);
  kv["span_objective"] = objective_name(span_objective);
  kv["hard_weighting"] = loss.hard_weighting == HardWeighting::Rank ? "rank" : "type";
  kv["probe_count"] = std::to_string(probe_count);
  kv["probe_top_n"] = std::to_string(probe_top_n);
  kv["normalization"] = normalization == Normalization::Plain ? "plain" : "squad";
  kv["zstore"] = zstore;
  return kv;
}

TrainConfig parse_train_config(const KeyValues& kv, TrainConfig c) {
  auto as_int = [](const std::string& k, const std::string& v) { return static_cast<int>(parse_int(k, v)); };
  for (const auto& [key, value] : kv) {
    if (key == "corpus") c.corpus = value;
    else if (key == "max_len") c.max_len = as_int(key, value);
    else if (key == "question_max_len") c.question_max_len = as_int(key, value);
    else if (key == "d_model") c.d_model = as_int(key, value);
    else if (key == "d_ff") c.d_ff = as_int(key, value);
    else if (key == "layers") c.layers = as_int(key, value);
    else if (key == "tau") c.loss.tau = parse_double(key, value);
    else if (key == "alpha") c.loss.alpha = parse_double(key, value);
    else if (key == "k_z") c.loss.k_Z = as_int(key, value);
    else if (key == "k_a") c.loss.k_A = as_int(key, value);
    else if (key == "batch_size") c.loss.batch_size = as_int(key, value);
    else if (key == "mining") c.mining = value;
    else if (key == "theta") c.theta = as_int(key, value);
    else if (key == "optimizer") {
      if (value != "adamw") throw std::invalid_argument("train config: only optimizer = adamw is supported");
    } else if (key == "lr") c.optim.lr = parse_double(key, value);
    else if (key == "beta1") c.optim.beta1 = parse_double(key, value);
    else if (key == "beta2") c.optim.beta2 = parse_double(key, value);
    else if (key == "adam_eps") c.optim.eps = parse_double(key, value);
    else if (key == "weight_decay") c.optim.weight_decay = parse_double(key, value);
    else if (key == "warmup_proportion") c.optim.warmup_proportion = parse_double(key, value);
    else if (key == "epochs") c.epochs = as_int(key, value);
    else if (key == "base_epochs") c.base_epochs = as_int(key, value);
    else if (key == "max_steps") c.max_steps = as_int(key, value);
    else if (key == "checkpoint_every") c.checkpoint_every = as_int(key, value);
    else if (key == "eval_every") c.eval_every = as_int(key, value);
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_int(key, value));
    else if (key == "phase") c.phase = value;
    else if (key == "max_answer_len") c.max_answer_len = as_int(key, value);
    else if (key == "z_match") {
      if (value == "position") c.z_match = GoldMatch::Position;
      else if (value == "text") c.z_match = GoldMatch::Text;
      else throw std::invalid_argument("train config: z_match must be position or text");
    } else if (key == "z_refresh_every") c.z_refresh_every = as_int(key, value);
    else if (key == "span_objective") {
      if (value == "hard") c.span_objective = SpanObjective::Hard;
      else if (value == "mml") c.span_objective = SpanObjective::Mml;
      else if (value == "ce") c.span_objective = SpanObjective::Ce;
      else throw std::invalid_argument("train config: span_objective must be hard, mml or ce");
    } else if (key == "hard_weighting") {
      if (value == "rank") c.loss.hard_weighting = HardWeighting::Rank;
      else if (value == "type") c.loss.hard_weighting = HardWeighting::Type;
      else throw std::invalid_argument("train config: hard_weighting must be rank or type");
    } else if (key == "probe_count") c.probe_count = as_int(key, value);
    else if (key == "probe_top_n") c.probe_top_n = as_int(key, value);
    else if (key == "normalization") {
      if (value == "plain") c.normalization = Normalization::Plain;
      else if (value == "squad") c.normalization = Normalization::Squad;
      else throw std::invalid_argument("train config: normalization must be plain or squad");
    } else if (key == "zstore") c.zstore = value;
    else throw std::invalid_argument("train config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  KeyValues kv = read_key_values(path);
  apply_overrides(kv, overrides);
  return parse_train_config(kv);
}

void write_train_config(const std::filesystem::path& path, const TrainConfig& config) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& [k, v] : config.to_key_values()) out << k << " = " << v << '\n';
}

// ---------------------------------------------------------------------------
// Optimizer

AdamState adam_init(const ModelParams& params) {
  AdamState s;
  s.m = Vec64::Zero(params.size());
  s.v = Vec64::Zero(params.size());
  return s;
}

void adamw_step(ModelParams& params, const ParamGrads& grads, AdamState& state, const OptimizerConfig& h,
                double lr) {
  Vec64 p = params.flatten();
  const Vec64 g = grads.flatten();
  if (g.size() != p.size() || state.m.size() != p.size())
    throw std::invalid_argument("adamw_step: shape mismatch");
  if (!g.allFinite()) throw TrainingError("adamw_step: non-finite gradient");
  ++state.t;
  state.m = h.beta1 * state.m + (1.0 - h.beta1) * g;
  state.v = h.beta2 * state.v + (1.0 - h.beta2) * g.cwiseAbs2();
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
  p -= (lr * h.weight_decay) * p;
  p.array() -= lr * (state.m.array() / bc1) / ((state.v.array() / bc2).sqrt() + h.eps);
  params.assign(p);
}

double scheduled_lr(const OptimizerConfig& h, long long step, long long total_steps) {
  const auto warmup = static_cast<long long>(std::floor(h.warmup_proportion * static_cast<double>(total_steps)));
  if (warmup <= 0 || step >= warmup) return h.lr;
  return h.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
}

// ---------------------------------------------------------------------------
// Run log

void RunLog::step(const std::string& phase, long long step, int epoch, double lr, const StepLosses& l) {
  if (step <= last_step) throw std::logic_error("RunLog: step indices must increase");
  last_step = step;
  json j;
  j["event"] = "step";
  j["phase"] = phase;
  j["step"] = step;
  j["epoch"] = epoch;
  j["lr"] = lr;
  j["hard"] = l.hard;
  j["contrast"] = l.contrast;
  j["combined"] = l.combined;
  j["skipped_contrastive"] = l.skipped;
  lines.push_back(j.dump());
}

void RunLog::event(const std::string& line) { lines.push_back(line); }

void RunLog::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write run log " + path.string());
  for (const auto& l : lines) out << l << '\n';
}

std::vector<ProbeRecord> log_probe_predictions(const ModelParams& params, const std::vector<Example>& probes,
                                               const Vocab& vocab, int n, long long step, int max_answer_len,
                                               RunLog* log) {
  const EncodeOptions opts{params.config.max_len, params.config.question_max_len};
  std::vector<ProbeRecord> out;
  for (const auto& ex : probes) {
    const EncodedExample enc = encode(ex, vocab, opts);
    const ForwardTrace tr = forward(params, enc);
    const PredictionSet preds = topk_spans(tr, n, max_answer_len);
    ProbeRecord rec{ex.id, step, {}};
    for (const auto& s : preds.ranked)
      rec.preds.push_back({to_passage(enc, s.span), span_text(ex, enc, s.span), std::exp(s.log_prob)});
    if (log) {
      json j;
      j["event"] = "probe";
      j["step"] = step;
      j["id"] = ex.id;
      j["gold"] = ex.gold_text;
      json preds_json = json::array();
      for (const auto& p : rec.preds)
        preds_json.push_back({{"start", p.span.start}, {"end", p.span.end}, {"text", p.text}, {"prob", p.prob}});
      j["preds"] = std::move(preds_json);
      log->event(j.dump());
    }
    out.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shared plumbing

LoadedData load_data_dir(const std::filesystem::path& dir) {
  LoadedData d;
  d.data.train = read_jsonl(dir / "train.jsonl");
  if (std::filesystem::exists(dir / "dev.jsonl")) d.data.dev = read_jsonl(dir / "dev.jsonl");
  if (std::filesystem::exists(dir / "test.jsonl")) d.data.test = read_jsonl(dir / "test.jsonl");
  if (std::filesystem::exists(dir / "vocab.txt")) {
    d.vocab = Vocab::load(dir / "vocab.txt");
  } else {
    d.vocab = Vocab::build({&d.data.train, &d.data.dev, &d.data.test});
  }
  return d;
}

double ZCollection::recall_at(int k) const {
  if (records.empty()) return 0.0;
  std::size_t hit = 0;
  for (const auto& r : records)
    if (r.gold_rank && *r.gold_rank <= k) ++hit;
  return static_cast<double>(hit) / static_cast<double>(records.size());
}

namespace {

struct Prepared {
  const Example* example;
  EncodedExample enc;
};

std::vector<Prepared> prepare(const std::vector<Example>& examples, const Vocab& vocab, const EncoderConfig& c,
                              std::size_t& skipped) {
  std::vector<Prepared> out;
  const EncodeOptions opts{c.max_len, c.question_max_len};
  skipped = 0;
  for (const auto& ex : examples) {
    EncodedExample enc = encode(ex, vocab, opts);
    if (!enc.usable) {
      ++skipped;
      continue;
    }
    out.push_back({&ex, std::move(enc)});
  }
  return out;
}

std::function<std::string(const Span&)> text_fn(const Example& ex, const EncodedExample& enc) {
  return [&ex, &enc](const Span& s) { return span_text(ex, enc, s); };
}

// Per-epoch permutation drawn from the run seed.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(seed ^ mix_seed(0x5368'7566ULL + static_cast<std::uint64_t>(epoch))));
  rng.shuffle(order);
  return order;
}

long long planned_steps(const TrainConfig& c, std::size_t n, int epochs) {
  const auto B = static_cast<std::size_t>(c.loss.batch_size);
  const long long per_epoch = static_cast<long long>((n + B - 1) / B);
  long long total = per_epoch * epochs;
  if (c.max_steps > 0) total = std::min<long long>(total, c.max_steps);
  return total;
}

BatchObjective objective_with_traces(const ModelParams& params, const std::vector<FinetuneBatchItem>& batch,
                                     const std::vector<ForwardTrace>& traces, const LossConfig& loss,
                                     SpanObjective objective) {
  const std::size_t B = batch.size();
  const double alpha = loss.alpha;
  const double span_weight = (1.0 - alpha) / static_cast<double>(B);

  std::vector<SpanLoss> span_losses(B);
  parallel_for(B, [&](std::size_t i) {
    const auto& item = batch[i];
    switch (objective) {
      case SpanObjective::Ce: span_losses[i] = ce_loss(traces[i], item.enc.gold_in_sequence); break;
      case SpanObjective::Mml: span_losses[i] = mml_loss(traces[i], item.z); break;
      case SpanObjective::Hard:
        if (loss.hard_weighting == HardWeighting::Rank) {
          span_losses[i] = hard_loss(traces[i], item.z, params.hard_logits);
        } else {
          std::vector<int> types;
          for (const auto& s : item.z) types.push_back(boundary_type(s, item.enc.gold_in_sequence));
          span_losses[i] = hard_loss_grouped(traces[i], item.z, types, params.hard_logits);
        }
        break;
    }
  });

  std::vector<TraceUpstream> ups(B);
  for (std::size_t i = 0; i < B; ++i) {
    ups[i].d_start = span_weight * span_losses[i].d_start;
    ups[i].d_end = span_weight * span_losses[i].d_end;
  }

  BatchObjective out;
  double span_total = 0.0;
  for (const auto& l : span_losses) span_total += l.value;
  out.losses.hard = span_total / static_cast<double>(B);

  if (alpha > 0.0) {
    std::vector<std::size_t> members;
    std::vector<ContrastItem> items;
    for (std::size_t i = 0; i < B; ++i) {
      const auto& item = batch[i];
      if (item.negatives.empty() || traces[i].question_region.empty()) {
        ++out.losses.skipped;
        continue;
      }
      ContrastItem ci;
      ci.question = question_repr(traces[i]);
      ci.gold = span_repr(traces[i], item.enc.gold_in_sequence);
      for (const auto& s : item.negatives) ci.hard.push_back(span_repr(traces[i], s));
      members.push_back(i);
      items.push_back(std::move(ci));
    }
    if (!items.empty()) {
      const ContrastLoss cl = contrastive_loss(items, loss.tau);
      out.losses.contrast = cl.value;
      for (std::size_t m = 0; m < members.size(); ++m) {
        const std::size_t i = members[m];
        const auto& tr = traces[i];
        Mat64 d = Mat64::Zero(tr.length(), tr.token_reprs.cols());
        const auto& q = tr.question_region;
        add_pool_grad(d, q.first, q.last, alpha * cl.d_question[m]);
        const Span& g = batch[i].enc.gold_in_sequence;
        add_pool_grad(d, g.start, g.end, alpha * cl.d_gold[m]);
        for (std::size_t h = 0; h < batch[i].negatives.size(); ++h) {
          const Span& s = batch[i].negatives[h];
          add_pool_grad(d, s.start, s.end, alpha * cl.d_hard[m][h]);
        }
        ups[i].d_reprs = std::move(d);
      }
    }
  }
  out.losses.combined = combined_loss(out.losses.contrast, out.losses.hard, alpha);
  out.value = out.losses.combined;

  std::vector<ParamGrads> per(B);
  parallel_for(B, [&](std::size_t i) {
    per[i] = ModelParams::zeros(params.config);
    backward_into(params, traces[i], ups[i], per[i]);
  });
  out.grads = ModelParams::zeros(params.config);
  for (std::size_t i = 0; i < B; ++i) out.grads += per[i];
  if (objective == SpanObjective::Hard) {
    for (std::size_t i = 0; i < B; ++i) out.grads.hard_logits += span_weight * span_losses[i].d_hard_logits;
  }
  return out;
}

void check_finite(const BatchObjective& obj, const std::vector<FinetuneBatchItem>& batch, long long step) {
  if (std::isfinite(obj.value) && std::isfinite(obj.losses.hard) && std::isfinite(obj.losses.contrast)) return;
  std::string id = batch.empty() ? "?" : batch.front().example->id;
  throw TrainingError("non-finite loss at step " + std::to_string(step) + " (batch starting at example " + id + ")");
}

std::vector<Example> probe_set(const LoadedData& data, int count) {
  const auto& src = data.data.dev.empty() ? data.data.train : data.data.dev;
  const auto n = std::min(src.size(), static_cast<std::size_t>(std::max(count, 0)));
  return {src.begin(), src.begin() + static_cast<std::ptrdiff_t>(n)};
}

struct Checkpointer {
  const TrainConfig& config;
  const LoadedData& data;
  const std::optional<std::filesystem::path>& out_dir;
  std::vector<Example> probes;
  std::string phase;

  void at(const ModelParams& params, long long step, RunLog& log) const {
    if (!probes.empty() && config.probe_top_n > 0)
      log_probe_predictions(params, probes, data.vocab, config.probe_top_n, step, config.max_answer_len, &log);
    if (out_dir) {
      const auto name = "ckpt-" + std::to_string(step) + ".bin";
      save_checkpoint(*out_dir / name, params);
      json j{{"event", "checkpoint"}, {"phase", phase}, {"step", step}, {"file", name}};
      log.event(j.dump());
    }
  }

  void maybe_eval(const ModelParams& params, long long step, RunLog& log) const {
    if (config.eval_every <= 0 || step % config.eval_every != 0 || data.data.dev.empty()) return;
    EvalOptions opts;
    opts.k_list = {1};
    opts.max_answer_len = config.max_answer_len;
    opts.normalization = config.normalization;
    const EvalReport r = evaluate(params, data.data.dev, data.vocab, opts);
    json j{{"event", "eval"}, {"phase", phase}, {"step", step}, {"split", "dev"}, {"em", r.em}, {"f1", r.f1}};
    log.event(j.dump());
  }
};

void finish_run(const TrainResult& result, const std::optional<std::filesystem::path>& out_dir,
                const TrainConfig& config) {
  if (!out_dir) return;
  save_checkpoint(*out_dir / "final.bin", result.params);
  result.log.write(*out_dir / "runlog.jsonl");
  write_train_config(*out_dir / "config.txt", config);
}

}  // namespace

BatchObjective finetune_objective(const ModelParams& params, const std::vector<FinetuneBatchItem>& batch,
                                  const LossConfig& loss, SpanObjective span_objective) {
  if (batch.empty()) throw std::invalid_argument("finetune_objective: empty batch");
  std::vector<ForwardTrace> traces(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) { traces[i] = forward(params, batch[i].enc); });
  return objective_with_traces(params, batch, traces, loss, span_objective);
}

// ---------------------------------------------------------------------------
// Phases

TrainResult train_base(const TrainConfig& config, const LoadedData& data,
                       const std::optional<std::filesystem::path>& out_dir) {
  config.validate();
  if (out_dir) std::filesystem::create_directories(*out_dir);
  TrainResult result;
  result.params = init_params(config.encoder_config(data.vocab.size()), config.seed);
  const auto prepared = prepare(data.data.train, data.vocab, result.params.config, result.skipped_examples);
  if (prepared.empty()) throw std::invalid_argument("train_base: no usable training examples");

  LossConfig loss = config.loss;
  loss.alpha = 0.0;
  const int epochs = config.base_epochs > 0 ? config.base_epochs : config.epochs;
  const long long total = planned_steps(config, prepared.size(), epochs);
  AdamState state = adam_init(result.params);
  const Checkpointer ckpt{config, data, out_dir, probe_set(data, config.probe_count), "base"};
  ckpt.at(result.params, 0, result.log);

  const auto B = static_cast<std::size_t>(config.loss.batch_size);
  long long step = 0;
  for (int epoch = 0; epoch < epochs && step < total; ++epoch) {
    const auto order = epoch_order(prepared.size(), config.seed, epoch);
    for (std::size_t off = 0; off < order.size() && step < total; off += B) {
      std::vector<FinetuneBatchItem> batch;
      for (std::size_t i = off; i < std::min(order.size(), off + B); ++i) {
        const auto& p = prepared[order[i]];
        batch.push_back({p.example, p.enc, {}, {}});
      }
      const BatchObjective obj = finetune_objective(result.params, batch, loss, SpanObjective::Ce);
      check_finite(obj, batch, step + 1);
      const double lr = scheduled_lr(config.optim, step, total);
      adamw_step(result.params, obj.grads, state, config.optim, lr);
      ++step;
      RunLog::StepLosses l = obj.losses;
      result.log.step("base", step, epoch, lr, l);
      if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0) ckpt.at(result.params, step, result.log);
      ckpt.maybe_eval(result.params, step, result.log);
    }
  }
  result.steps = step;
  if (config.checkpoint_every <= 0 || step % config.checkpoint_every != 0) ckpt.at(result.params, step, result.log);
  finish_run(result, out_dir, config);
  return result;
}

ZCollection collect_Z(const ModelParams& params, const std::vector<Example>& examples, const Vocab& vocab, int k_Z,
                      int max_answer_len, GoldMatch match) {
  if (k_Z < 1) throw std::invalid_argument("collect_Z: k_Z must be >= 1");
  ZCollection out;
  const auto prepared = prepare(examples, vocab, params.config, out.skipped);
  out.records.resize(prepared.size());
  parallel_for(prepared.size(), [&](std::size_t i) {
    const auto& p = prepared[i];
    try {
      const ForwardTrace tr = forward(params, p.enc);
      const SpanScores scores = SpanScores::from(tr);
      const PredictionSet preds = topk_spans(scores, k_Z, max_answer_len);
      const ScoredSpan gold = score_span(scores, p.enc.gold_in_sequence);
      const PredictionSet z = build_Z(preds, gold, k_Z, match, text_fn(*p.example, p.enc));
      ZRecord rec;
      rec.id = p.example->id;
      rec.gold_rank = z.gold_rank;
      for (auto s : z.ranked) {
        s.span = to_passage(p.enc, s.span);
        rec.spans.push_back(s);
      }
      out.records[i] = std::move(rec);
    } catch (const std::exception& e) {
      throw std::runtime_error("collect_Z: example " + p.example->id + ": " + e.what());
    }
  });
  for (const auto& r : out.records) {
    if (r.gold_rank) ++out.gold_rank_hist[*r.gold_rank];
    else ++out.inserted;
  }
  return out;
}

TrainResult finetune(const TrainConfig& config, const LoadedData& data, const std::vector<ZRecord>& zstore,
                     const ModelParams& init, const std::optional<std::filesystem::path>& out_dir,
                     const FinetuneHooks& hooks) {
  config.validate();
  if (out_dir) std::filesystem::create_directories(*out_dir);
  const int needed = config.loss.hard_weight_count();
  if (init.config.k_hard != needed && !init.hard_logits.isZero(0.0))
    throw std::invalid_argument("finetune: checkpoint has " + std::to_string(init.config.k_hard) +
                                " trained hard-weight logits but the loss config needs " + std::to_string(needed));
  TrainResult result;
  result.params = init;
  // A base checkpoint never trains u, so its length can follow the fine-tuning config.
  result.params.config.k_hard = needed;
  result.params.hard_logits = Vec64::Zero(needed);
  if (init.config.k_hard == needed) result.params.hard_logits = init.hard_logits;
  const auto prepared = prepare(data.data.train, data.vocab, init.config, result.skipped_examples);
  if (prepared.empty()) throw std::invalid_argument("finetune: no usable training examples");

  // Z per prepared example, in sequence coordinates. Missing entries fail before any update.
  std::unordered_map<std::string, const ZRecord*> by_id;
  for (const auto& r : zstore) by_id[r.id] = &r;
  std::vector<std::vector<Span>> z(prepared.size());
  for (std::size_t i = 0; i < prepared.size(); ++i) {
    const auto it = by_id.find(prepared[i].example->id);
    if (it == by_id.end()) throw std::invalid_argument("finetune: Z-store has no entry for example " + prepared[i].example->id);
    for (const auto& s : it->second->spans) z[i].push_back(to_sequence(prepared[i].enc, s.span));
    if (config.span_objective == SpanObjective::Hard && config.loss.hard_weighting == HardWeighting::Rank &&
        static_cast<int>(z[i].size()) != config.loss.k_Z)
      throw std::invalid_argument("finetune: Z for example " + prepared[i].example->id + " has " +
                                  std::to_string(z[i].size()) + " spans, expected " + std::to_string(config.loss.k_Z));
  }

  const MiningStrategy strategy = config.mining_strategy();
  const long long total = planned_steps(config, prepared.size(), config.epochs);
  AdamState state = adam_init(result.params);
  const Checkpointer ckpt{config, data, out_dir, probe_set(data, config.probe_count), "finetune"};
  ckpt.at(result.params, 0, result.log);

  const auto B = static_cast<std::size_t>(config.loss.batch_size);
  long long step = 0;
  for (int epoch = 0; epoch < config.epochs && step < total; ++epoch) {
    const auto order = epoch_order(prepared.size(), config.seed, epoch);
    for (std::size_t off = 0; off < order.size() && step < total; off += B) {
      if (config.z_refresh_every > 0 && step > 0 && step % config.z_refresh_every == 0) {
        std::vector<Example> train_examples;
        for (const auto& p : prepared) train_examples.push_back(*p.example);
        const ZCollection fresh = collect_Z(result.params, train_examples, data.vocab, config.loss.k_Z,
                                            config.max_answer_len, config.z_match);
        for (std::size_t i = 0; i < prepared.size(); ++i) {
          z[i].clear();
          for (const auto& s : fresh.records[i].spans) z[i].push_back(to_sequence(prepared[i].enc, s.span));
        }
        result.log.event(json{{"event", "z_refresh"}, {"step", step}}.dump());
      }

      const std::size_t end = std::min(order.size(), off + B);
      std::vector<FinetuneBatchItem> batch;
      for (std::size_t i = off; i < end; ++i) {
        const auto idx = order[i];
        batch.push_back({prepared[idx].example, prepared[idx].enc, z[idx], {}});
      }
      std::vector<ForwardTrace> traces(batch.size());
      parallel_for(batch.size(), [&](std::size_t i) {
        traces[i] = forward(result.params, batch[i].enc);
        if (config.loss.alpha > 0.0) {
          const auto& item = batch[i];
          const PredictionSet a = topk_spans(traces[i], config.loss.k_A, config.max_answer_len);
          const GoldRef gold{item.enc.gold_in_sequence, item.example->gold_text};
          batch[i].negatives = select_hard_negatives(traces[i], a, gold, text_fn(*item.example, item.enc), strategy,
                                                     item.example->id, static_cast<std::uint64_t>(step),
                                                     config.normalization);
        }
      });
      if (hooks.on_mined)
        for (const auto& item : batch) hooks.on_mined(*item.example, item.enc, item.negatives);

      const BatchObjective obj = objective_with_traces(result.params, batch, traces, config.loss, config.span_objective);
      check_finite(obj, batch, step + 1);
      if (hooks.on_gradient) hooks.on_gradient(step + 1, obj.grads);
      const double lr = scheduled_lr(config.optim, step, total);
      adamw_step(result.params, obj.grads, state, config.optim, lr);
      ++step;
      result.log.step("finetune", step, epoch, lr, obj.losses);
      if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0) ckpt.at(result.params, step, result.log);
      ckpt.maybe_eval(result.params, step, result.log);
    }
  }
  result.steps = step;
  if (config.checkpoint_every <= 0 || step % config.checkpoint_every != 0) ckpt.at(result.params, step, result.log);
  finish_run(result, out_dir, config);
  return result;
}

}  // namespace spanforge
