#include "spanforge/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "spanforge/trainer.hpp"

namespace spanforge {

namespace fs = std::filesystem;
using nlohmann::json;

void SweepSpec::validate() const {
  if (axis != "tau" && axis != "alpha" && axis != "z_size" && axis != "mining")
    throw std::invalid_argument("sweep: axis must be tau, alpha, z_size or mining");
  if (values.empty()) throw std::invalid_argument("sweep: no values");
  if (seeds.empty()) throw std::invalid_argument("sweep: no seeds");
}

std::vector<std::string> default_sweep_values(const std::string& axis) {
  if (axis == "tau") return {"1", "2", "4", "8", "10", "12", "20"};
  if (axis == "alpha") return {"0.1", "0.3", "0.5", "0.7", "0.9"};
  if (axis == "z_size") return {"1", "5", "10", "20", "50"};
  if (axis == "mining") return {"most_similar:1", "most_similar:10", "most_similar:20", "top1", "random"};
  throw std::invalid_argument("sweep: unknown axis '" + axis + "'");
}

const ValueSummary& SweepAggregate::best() const {
  if (values.empty()) throw std::logic_error("sweep aggregate is empty");
  return *std::max_element(values.begin(), values.end(),
                           [](const auto& a, const auto& b) { return a.mean_f1 < b.mean_f1; });
}

const ValueSummary& SweepAggregate::worst() const {
  if (values.empty()) throw std::logic_error("sweep aggregate is empty");
  return *std::min_element(values.begin(), values.end(),
                           [](const auto& a, const auto& b) { return a.mean_f1 < b.mean_f1; });
}

SweepAggregate aggregate_runs(const std::vector<fs::path>& run_dirs) {
  SweepAggregate agg;
  for (const auto& dir : run_dirs) {
    if (!fs::exists(dir / "report.json")) {
      agg.missing.push_back(dir);
      continue;
    }
    const EvalReport rep = read_report_json(dir / "report.json");
    RunSummary r;
    r.value = dir.filename().string();
    r.seed = "-";
    if (fs::exists(dir / "run.json")) {
      std::ifstream in(dir / "run.json");
      const json j = json::parse(in);
      r.axis = j.value("axis", "");
      r.value = j.value("value", r.value);
      r.seed = std::to_string(j.value("seed", std::uint64_t{0}));
    }
    r.em = rep.em;
    r.f1 = rep.f1;
    agg.runs.push_back(std::move(r));
  }
  for (const auto& r : agg.runs) {
    auto it = std::find_if(agg.values.begin(), agg.values.end(), [&](const auto& v) { return v.value == r.value; });
    if (it == agg.values.end()) {
      agg.values.push_back({r.value, 0.0, 0.0, 0});
      it = std::prev(agg.values.end());
    }
    it->mean_em += r.em;
    it->mean_f1 += r.f1;
    ++it->runs;
  }
  for (auto& v : agg.values) {
    v.mean_em /= static_cast<double>(v.runs);
    v.mean_f1 /= static_cast<double>(v.runs);
  }
  return agg;
}

void write_aggregate_csv(const fs::path& path, const SweepAggregate& agg) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "axis,value,seed,em,f1\n";
  const std::string axis = agg.runs.empty() ? std::string{} : agg.runs.front().axis;
  for (const auto& r : agg.runs)
    out << r.axis << ',' << r.value << ',' << r.seed << ',' << format_double(r.em) << ',' << format_double(r.f1)
        << '\n';
  for (const auto& v : agg.values)
    out << axis << ',' << v.value << ",mean," << format_double(v.mean_em) << ',' << format_double(v.mean_f1) << '\n';
}

std::string format_table(const SweepAggregate& agg) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  const std::string axis = agg.runs.empty() || agg.runs.front().axis.empty() ? "value" : agg.runs.front().axis;
  os << "| " << axis << " | runs | mean EM | mean F1 |\n|---|---|---|---|\n";
  for (const auto& v : agg.values)
    os << "| " << v.value << " | " << v.runs << " | " << v.mean_em << " | " << v.mean_f1 << " |\n";
  if (!agg.values.empty()) {
    os << "best: " << agg.best().value << " (F1 " << agg.best().mean_f1 << ")\n";
    os << "worst: " << agg.worst().value << " (F1 " << agg.worst().mean_f1 << ")\n";
  }
  return os.str();
}

namespace {

struct Common {
  std::optional<std::uint64_t> seed;
  std::string out, spec, ckpt, data, k = "1,3,5,10", axis, values, seeds = "0", base;
  std::vector<std::string> config;
  std::vector<std::string> run_dirs;
};

TrainConfig train_config(const Common& c) {
  KeyValues kv = c.base.empty() ? KeyValues{} : read_key_values(c.base);
  apply_overrides(kv, c.config);
  TrainConfig cfg = parse_train_config(kv);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

LoadedData data_for(const Common& c, const TrainConfig& cfg) {
  const std::string dir = c.data.empty() ? cfg.corpus : c.data;
  if (dir.empty()) throw std::invalid_argument("no dataset: pass --data or set corpus in the config");
  return load_data_dir(dir);
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw CLI::RequiredError(flag);
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(1) << '\n';
}

json collection_summary(const ZCollection& z, int k_Z) {
  json hist = json::object();
  for (const auto& [rank, n] : z.gold_rank_hist) hist[std::to_string(rank)] = n;
  return {{"records", z.records.size()},
          {"inserted", z.inserted},
          {"skipped", z.skipped},
          {"gold_rank_hist", hist},
          {"recall_at_k", z.recall_at(k_Z)}};
}

int cmd_gen(const Common& c, std::ostream& out) {
  require(c.out, "--out");
  KeyValues kv = c.spec.empty() ? KeyValues{} : read_key_values(c.spec);
  apply_overrides(kv, c.config);
  CorpusSpec spec = parse_corpus_spec(kv);
  if (c.seed) spec.seed = *c.seed;
  const SyntheticCorpus corpus = generate_corpus(spec);
  save_dataset(c.out, corpus.data, corpus.vocab);
  out << "wrote " << corpus.data.train.size() << '/' << corpus.data.dev.size() << '/' << corpus.data.test.size()
      << " examples to " << c.out << '\n';
  return 0;
}

int cmd_train_base(const Common& c, std::ostream& out) {
  require(c.out, "--out");
  const TrainConfig cfg = train_config(c);
  const LoadedData data = data_for(c, cfg);
  const TrainResult r = train_base(cfg, data, fs::path(c.out));
  out << "base training: " << r.steps << " steps, checkpoint " << (fs::path(c.out) / "final.bin").string() << '\n';
  return 0;
}

ZCollection collect_into(const ModelParams& params, const LoadedData& data, const TrainConfig& cfg,
                         const fs::path& dir) {
  fs::create_directories(dir);
  ZCollection z = collect_Z(params, data.data.train, data.vocab, cfg.loss.k_Z, cfg.max_answer_len, cfg.z_match);
  write_zstore(dir / "zstore.jsonl", z.records);
  write_json(dir / "collect.json", collection_summary(z, cfg.loss.k_Z));
  return z;
}

int cmd_collect(const Common& c, std::ostream& out) {
  require(c.out, "--out");
  require(c.ckpt, "--ckpt");
  const TrainConfig cfg = train_config(c);
  const LoadedData data = data_for(c, cfg);
  const ModelParams params = load_checkpoint(c.ckpt);
  const ZCollection z = collect_into(params, data, cfg, c.out);
  out << "collected " << z.records.size() << " prediction sets, gold inserted in " << z.inserted << '\n';
  return 0;
}

int cmd_train(const Common& c, std::ostream& out) {
  require(c.out, "--out");
  require(c.ckpt, "--ckpt");
  TrainConfig cfg = train_config(c);
  cfg.phase = "finetune";
  const LoadedData data = data_for(c, cfg);
  const ModelParams base = load_checkpoint(c.ckpt);
  std::vector<ZRecord> zstore;
  if (cfg.zstore.empty()) {
    zstore = collect_into(base, data, cfg, c.out).records;
    cfg.zstore = (fs::path(c.out) / "zstore.jsonl").string();
  } else {
    zstore = read_zstore(cfg.zstore);
  }
  const TrainResult r = finetune(cfg, data, zstore, base, fs::path(c.out));
  out << "fine-tuning: " << r.steps << " steps, checkpoint " << (fs::path(c.out) / "final.bin").string() << '\n';
  return 0;
}

int cmd_eval(const Common& c, std::ostream& out) {
  require(c.out, "--out");
  require(c.ckpt, "--ckpt");
  require(c.data, "--data");
  const TrainConfig cfg = train_config(c);
  const ModelParams params = load_checkpoint(c.ckpt);
  std::vector<Example> examples;
  Vocab vocab;
  const fs::path data(c.data);
  if (fs::is_directory(data)) {
    examples = read_jsonl(data / "test.jsonl");
    vocab = Vocab::load(data / "vocab.txt");
  } else {
    examples = read_jsonl(data);
    const fs::path vocab_path = data.parent_path() / "vocab.txt";
    if (!fs::exists(vocab_path)) throw std::runtime_error("no vocab.txt next to " + data.string());
    vocab = Vocab::load(vocab_path);
  }
  EvalOptions opts;
  opts.k_list = parse_int_list(c.k);
  opts.max_answer_len = cfg.max_answer_len;
  opts.normalization = cfg.normalization;
  const EvalReport rep = evaluate(params, examples, vocab, opts);
  fs::path csv(c.out);
  if (csv.extension() != ".csv") {
    fs::create_directories(csv);
    csv /= "report.csv";
  } else if (csv.has_parent_path()) {
    fs::create_directories(csv.parent_path());
  }
  write_report_csv(csv, rep);
  write_report_json(fs::path(csv).replace_extension(".json"), rep);
  out << "EM " << format_double(rep.em) << " F1 " << format_double(rep.f1) << " over " << rep.records.size()
      << " examples\n";
  return 0;
}

void apply_axis(TrainConfig& cfg, const std::string& axis, const std::string& value) {
  if (axis == "tau") {
    cfg.loss.tau = parse_double("tau", value);
  } else if (axis == "alpha") {
    cfg.loss.alpha = parse_double("alpha", value);
  } else if (axis == "z_size") {
    // The prediction-set size study runs without the contrastive term.
    cfg.loss.k_Z = static_cast<int>(parse_int("z_size", value));
    cfg.loss.alpha = 0.0;
  } else if (axis == "mining") {
    const auto colon = value.find(':');
    cfg.mining = value.substr(0, colon);
    cfg.theta = colon == std::string::npos ? 1 : static_cast<int>(parse_int("theta", value.substr(colon + 1)));
  }
  cfg.validate();
}

std::string dir_safe(std::string s) {
  std::replace(s.begin(), s.end(), ':', '-');
  return s;
}

int cmd_sweep(const Common& c, std::ostream& out) {
  require(c.out, "--out");
  require(c.axis, "--axis");
  SweepSpec sweep;
  sweep.axis = c.axis;
  sweep.values = c.values.empty() ? default_sweep_values(c.axis) : split(c.values, ',');
  for (int s : parse_int_list(c.seeds)) {
    if (s < 0) throw std::invalid_argument("sweep: seeds must be non-negative");
    sweep.seeds.push_back(static_cast<std::uint64_t>(s));
  }
  sweep.validate();

  const fs::path root(c.out);
  fs::create_directories(root);
  TrainConfig base_cfg = train_config(c);
  LoadedData data;
  if (!c.data.empty() || !base_cfg.corpus.empty()) {
    data = data_for(c, base_cfg);
  } else {
    KeyValues kv = c.spec.empty() ? KeyValues{} : read_key_values(c.spec);
    const SyntheticCorpus corpus = generate_corpus(parse_corpus_spec(kv));
    save_dataset(root / "data", corpus.data, corpus.vocab);
    data = {corpus.data, corpus.vocab};
  }
  for (const auto& v : sweep.values) {
    TrainConfig probe = base_cfg;
    apply_axis(probe, sweep.axis, v);
  }

  std::vector<fs::path> run_dirs;
  for (const auto seed : sweep.seeds) {
    TrainConfig bcfg = base_cfg;
    bcfg.seed = seed;
    bcfg.phase = "base";
    const fs::path base_dir = root / "base" / ("seed=" + std::to_string(seed));
    const TrainResult base = train_base(bcfg, data, base_dir);
    out << "seed " << seed << ": base trained (" << base.steps << " steps)\n";
    for (const auto& v : sweep.values) {
      TrainConfig cfg = base_cfg;
      cfg.seed = seed;
      cfg.phase = "finetune";
      apply_axis(cfg, sweep.axis, v);
      const fs::path dir = root / (sweep.axis + "=" + dir_safe(v)) / ("seed=" + std::to_string(seed));
      const ZCollection z = collect_into(base.params, data, cfg, dir);
      cfg.zstore = (dir / "zstore.jsonl").string();
      const TrainResult r = finetune(cfg, data, z.records, base.params, dir);
      EvalOptions opts;
      opts.max_answer_len = cfg.max_answer_len;
      opts.normalization = cfg.normalization;
      const EvalReport rep = evaluate(r.params, data.data.test, data.vocab, opts);
      write_report_json(dir / "report.json", rep);
      write_report_csv(dir / "report.csv", rep);
      write_json(dir / "run.json", {{"axis", sweep.axis}, {"value", v}, {"seed", seed}});
      run_dirs.push_back(dir);
      out << "  " << sweep.axis << '=' << v << ": EM " << format_double(rep.em) << " F1 " << format_double(rep.f1)
          << '\n';
    }
  }
  const SweepAggregate agg = aggregate_runs(run_dirs);
  write_aggregate_csv(root / "aggregate.csv", agg);
  const std::string table = format_table(agg);
  std::ofstream(root / "summary.txt", std::ios::binary) << table;
  out << table;
  return 0;
}

int cmd_report(const Common& c, std::ostream& out, std::ostream& err) {
  if (c.run_dirs.empty()) throw CLI::RequiredError("run directories");
  std::vector<fs::path> dirs(c.run_dirs.begin(), c.run_dirs.end());
  const SweepAggregate agg = aggregate_runs(dirs);
  if (!agg.missing.empty()) {
    err << "missing report.json in:\n";
    for (const auto& m : agg.missing) err << "  " << m.string() << '\n';
    return 2;
  }
  const std::string table = format_table(agg);
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    write_aggregate_csv(fs::path(c.out) / "aggregate.csv", agg);
    std::ofstream(fs::path(c.out) / "summary.txt", std::ios::binary) << table;
  }
  out << table;
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"spanforge: extractive span QA with hard-learning and answer-aware contrastive fine-tuning"};
  app.require_subcommand(1);
  Common c;
  auto seed_opt = [&](CLI::App* s) {
    s->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& v) { c.seed = v; }, "random seed");
  };
  auto config_opt = [&](CLI::App* s) {
    s->add_option("--config", c.config, "KEY=VALUE override (repeatable)");
  };

  auto* gen = app.add_subcommand("gen", "generate a synthetic corpus");
  gen->add_option("--spec", c.spec, "corpus spec file");
  gen->add_option("--out", c.out, "output directory");
  seed_opt(gen);
  config_opt(gen);

  auto* tb = app.add_subcommand("train-base", "train the base span model");
  auto* col = app.add_subcommand("collect", "collect frozen top-k prediction sets");
  auto* tr = app.add_subcommand("train", "fine-tune from a base checkpoint");
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  for (auto* s : {tb, col, tr, ev}) {
    s->add_option("--base", c.base, "training config file");
    s->add_option("--data", c.data, "dataset directory (or .jsonl file for eval)");
    s->add_option("--out", c.out, "output directory (eval: CSV path or directory)");
    seed_opt(s);
    config_opt(s);
  }
  for (auto* s : {col, tr, ev}) s->add_option("--ckpt", c.ckpt, "checkpoint file");
  ev->add_option("--k", c.k, "comma-separated k list");

  auto* sw = app.add_subcommand("sweep", "run a hyperparameter sweep from shared base checkpoints");
  sw->add_option("--axis", c.axis, "tau | alpha | z_size | mining");
  sw->add_option("--values", c.values, "comma-separated axis values");
  sw->add_option("--seeds", c.seeds, "comma-separated seeds");
  sw->add_option("--base", c.base, "training config file");
  sw->add_option("--data", c.data, "dataset directory");
  sw->add_option("--spec", c.spec, "corpus spec used when no dataset is given");
  sw->add_option("--out", c.out, "output directory");
  config_opt(sw);

  auto* rep = app.add_subcommand("report", "aggregate evaluated run directories");
  rep->add_option("dirs", c.run_dirs, "run directories");
  rep->add_option("--out", c.out, "directory for aggregate.csv and summary.txt");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_gen(c, out);
    if (tb->parsed()) return cmd_train_base(c, out);
    if (col->parsed()) return cmd_collect(c, out);
    if (tr->parsed()) return cmd_train(c, out);
    if (ev->parsed()) return cmd_eval(c, out);
    if (sw->parsed()) return cmd_sweep(c, out);
    if (rep->parsed()) return cmd_report(c, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: missing required option " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace spanforge
