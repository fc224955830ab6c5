#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "spanforge/corpus.hpp"
#include "spanforge/encoder.hpp"
#include "spanforge/kvconfig.hpp"
#include "spanforge/losses.hpp"
#include "spanforge/metrics.hpp"
#include "spanforge/mining.hpp"
#include "spanforge/spandecode.hpp"

namespace spanforge {

struct OptimizerConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double warmup_proportion = 0.1;
};

// Span-level term combined with the contrastive loss during fine-tuning.
enum class SpanObjective { Hard, Mml, Ce };

struct TrainConfig {
  std::string corpus;  // dataset directory (train/dev/test.jsonl + vocab.txt)
  int max_len = 64;
  int question_max_len = 64;
  int d_model = 32;
  int d_ff = 64;
  int layers = 1;
  LossConfig loss;
  std::string mining = "most_similar";
  int theta = 1;
  OptimizerConfig optim;
  int epochs = 4;
  int base_epochs = 0;  // base phase; 0 reuses epochs
  int max_steps = 0;  // 0: no cap
  int checkpoint_every = 1000;
  int eval_every = 0;
  std::uint64_t seed = 0;
  std::string phase = "base";  // base | collect | finetune
  int max_answer_len = 8;
  GoldMatch z_match = GoldMatch::Position;
  int z_refresh_every = 0;  // steps; 0 keeps Z frozen
  SpanObjective span_objective = SpanObjective::Hard;
  int probe_count = 4;
  int probe_top_n = 4;
  Normalization normalization = Normalization::Plain;
  std::string zstore;  // Z-store path for the finetune phase

  void validate() const;
  EncoderConfig encoder_config(int vocab_size) const;
  MiningStrategy mining_strategy() const;
  KeyValues to_key_values() const;
};

TrainConfig parse_train_config(const KeyValues& kv, TrainConfig base = {});
TrainConfig load_train_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
void write_train_config(const std::filesystem::path& path, const TrainConfig& config);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// --- optimizer --------------------------------------------------------------

struct AdamState {
  Vec64 m, v;
  long long t = 0;
};

AdamState adam_init(const ModelParams& params);
// One decoupled-weight-decay Adam update at learning rate lr.
void adamw_step(ModelParams& params, const ParamGrads& grads, AdamState& state, const OptimizerConfig& hyper,
                double lr);
// Linear warm-up over the first warmup_proportion of total_steps, then constant.
double scheduled_lr(const OptimizerConfig& hyper, long long step, long long total_steps);

// --- run log ---------------------------------------------------------------

// Append-only JSON Lines record of a run.
struct RunLog {
  std::vector<std::string> lines;
  long long last_step = -1;

  struct StepLosses {
    double hard = 0.0;
    double contrast = 0.0;
    double combined = 0.0;
    int skipped = 0;  // examples without an eligible hard negative
  };

  void step(const std::string& phase, long long step, int epoch, double lr, const StepLosses& losses);
  void event(const std::string& json_line);
  void write(const std::filesystem::path& path) const;
};

struct ProbePrediction {
  Span span;  // passage coordinates
  std::string text;
  double prob = 0.0;
};

struct ProbeRecord {
  std::string id;
  long long step = 0;
  std::vector<ProbePrediction> preds;
};

std::vector<ProbeRecord> log_probe_predictions(const ModelParams& params, const std::vector<Example>& probes,
                                               const Vocab& vocab, int n, long long step, int max_answer_len,
                                               RunLog* log = nullptr);

// --- pipeline ----------------------------------------------------------------

struct LoadedData {
  Dataset data;
  Vocab vocab;
};

LoadedData load_data_dir(const std::filesystem::path& dir);

struct TrainResult {
  ModelParams params;
  RunLog log;
  long long steps = 0;
  std::size_t skipped_examples = 0;  // unusable after encoding
};

// Minibatch AdamW over the span cross-entropy. Checkpoints go to out_dir when given.
TrainResult train_base(const TrainConfig& config, const LoadedData& data,
                       const std::optional<std::filesystem::path>& out_dir = std::nullopt);

struct ZCollection {
  std::vector<ZRecord> records;
  std::map<int, std::size_t> gold_rank_hist;  // rank -> count; inserted golds are not counted
  std::size_t inserted = 0;
  std::size_t skipped = 0;  // unusable examples

  double recall_at(int k) const;  // fraction of records with gold_rank <= k
};

ZCollection collect_Z(const ModelParams& params, const std::vector<Example>& examples, const Vocab& vocab, int k_Z,
                      int max_answer_len, GoldMatch match = GoldMatch::Position);

struct FinetuneHooks {
  // Called with every mined negative set; used by acceptance checks.
  std::function<void(const Example&, const EncodedExample&, const std::vector<Span>&)> on_mined;
  // Called with the accumulated gradient right before each optimizer step.
  std::function<void(long long step, const ParamGrads&)> on_gradient;
};

TrainResult finetune(const TrainConfig& config, const LoadedData& data, const std::vector<ZRecord>& zstore,
                     const ModelParams& init, const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                     const FinetuneHooks& hooks = {});

// One fine-tuning objective evaluation on a fixed batch with fixed Z and fixed mined negatives.
// Exposed for gradient verification.
struct FinetuneBatchItem {
  const Example* example = nullptr;
  EncodedExample enc;
  std::vector<Span> z;          // sequence coordinates
  std::vector<Span> negatives;  // sequence coordinates; empty skips the contrastive term
};

struct BatchObjective {
  double value = 0.0;
  RunLog::StepLosses losses;
  ParamGrads grads;
};

BatchObjective finetune_objective(const ModelParams& params, const std::vector<FinetuneBatchItem>& batch,
                                  const LossConfig& loss, SpanObjective span_objective);

}  // namespace spanforge
