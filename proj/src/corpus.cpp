#include "spanforge/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "spanforge/rng.hpp"

namespace spanforge {

using nlohmann::json;

std::string join_tokens(const std::vector<std::string>& tokens, int first, int last) {
  std::string out;
  for (int i = first; i <= last; ++i) {
    if (i > first) out += ' ';
    out += tokens.at(static_cast<std::size_t>(i));
  }
  return out;
}

void validate(const Example& ex) {
  const int n = static_cast<int>(ex.passage.size());
  if (ex.gold.start < 0 || ex.gold.start > ex.gold.end || ex.gold.end >= n)
    throw std::invalid_argument("example " + ex.id + ": gold span outside passage");
  if (join_tokens(ex.passage, ex.gold.start, ex.gold.end) != ex.gold_text)
    throw std::invalid_argument("example " + ex.id + ": gold text does not match passage tokens");
}

// ---------------------------------------------------------------------------
// Vocab

Vocab::Vocab() : Vocab(std::vector<std::string>{"[PAD]", "[UNK]", "[CLS]", "[SEP]"}) {}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  static const char* kSpecials[] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
  if (tokens_.size() < kNumSpecial) throw std::invalid_argument("vocab: missing special tokens");
  for (int i = 0; i < kNumSpecial; ++i)
    if (tokens_[static_cast<std::size_t>(i)] != kSpecials[i])
      throw std::invalid_argument(std::string("vocab: line ") + std::to_string(i + 1) +
                                  " must be " + kSpecials[i]);
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second)
      throw std::invalid_argument("vocab: duplicate token '" + tokens_[i] + "'");
  }
}

int Vocab::add(const std::string& token) {
  auto [it, inserted] = index_.emplace(token, size());
  if (inserted) tokens_.push_back(token);
  return it->second;
}

Vocab Vocab::build(const std::vector<const std::vector<Example>*>& splits) {
  Vocab v;
  for (const auto* split : splits) {
    for (const auto& ex : *split) {
      for (const auto& t : ex.question) v.add(t);
      for (const auto& t : ex.passage) v.add(t);
    }
  }
  return v;
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocabulary " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return Vocab(std::move(tokens));
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write vocabulary " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

int Vocab::id(const std::string& token) const {
  const auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

// ---------------------------------------------------------------------------
// Synthetic corpus

CorpusSpec parse_corpus_spec(const KeyValues& kv, CorpusSpec spec) {
  for (const auto& [key, value] : kv) {
    if (key == "vocab_size") spec.vocab_size = static_cast<int>(parse_int(key, value));
    else if (key == "num_examples") spec.num_examples = static_cast<int>(parse_int(key, value));
    else if (key == "passage_len") spec.passage_len = static_cast<int>(parse_int(key, value));
    else if (key == "answer_min_len") spec.answer_min_len = static_cast<int>(parse_int(key, value));
    else if (key == "answer_max_len") spec.answer_max_len = static_cast<int>(parse_int(key, value));
    else if (key == "prefix_overlap_count")
      spec.distractors.prefix_overlap_count = static_cast<int>(parse_int(key, value));
    else if (key == "suffix_overlap_count")
      spec.distractors.suffix_overlap_count = static_cast<int>(parse_int(key, value));
    else if (key == "full_decoys") spec.distractors.full_decoys = static_cast<int>(parse_int(key, value));
    else if (key == "seed") spec.seed = static_cast<std::uint64_t>(parse_int(key, value));
    else throw std::invalid_argument("corpus spec: unknown key '" + key + "'");
  }
  return spec;
}

CorpusSpec load_corpus_spec(const std::filesystem::path& path) {
  return parse_corpus_spec(read_key_values(path));
}

namespace {

struct TokenClasses {
  std::vector<std::string> qwords, keys, values, fillers;
};

TokenClasses partition_vocab(int vocab_size) {
  const int avail = vocab_size - Vocab::kNumSpecial;
  if (avail < 32) throw std::invalid_argument("corpus spec: vocab_size too small");
  TokenClasses c;
  const int n_q = 4;
  const int n_keys = std::max(4, avail / 24);
  const int n_values = 2 * (avail - n_q - n_keys) / 3;
  const int n_fill = avail - n_q - n_keys - n_values;
  for (int i = 0; i < n_q; ++i) c.qwords.push_back("q" + std::to_string(i));
  for (int i = 0; i < n_keys; ++i) c.keys.push_back("k" + std::to_string(i));
  for (int i = 0; i < n_values; ++i) c.values.push_back("v" + std::to_string(i));
  for (int i = 0; i < n_fill; ++i) c.fillers.push_back("w" + std::to_string(i));
  return c;
}

// Values are dealt round-robin into one family per key, and within a family
// into four roles. A fact about key j is a run drawn from family j: one
// "single" value, or an opener, middles, and a closer.
struct Family {
  std::vector<std::string> openers, middles, closers, singles;
};

Family family(const TokenClasses& tc, std::size_t key_index) {
  Family f;
  const std::size_t k = tc.keys.size();
  std::vector<std::string>* roles[] = {&f.openers, &f.middles, &f.closers, &f.singles};
  for (std::size_t i = key_index; i < tc.values.size(); i += k) roles[(i / k) % 4]->push_back(tc.values[i]);
  return f;
}

int distractor_max_len(const CorpusSpec& s) { return std::max(2, s.answer_max_len); }

void check_feasible(const CorpusSpec& s) {
  const auto& d = s.distractors;
  if (s.num_examples < 6) throw std::invalid_argument("corpus spec: num_examples must be >= 6");
  if (s.answer_min_len < 1 || s.answer_min_len > s.answer_max_len)
    throw std::invalid_argument("corpus spec: invalid answer length range");
  if (s.answer_max_len > s.passage_len)
    throw std::invalid_argument("corpus spec: answer_max_len exceeds passage_len");
  if (d.prefix_overlap_count < 0 || d.suffix_overlap_count < 0 || d.full_decoys < 0)
    throw std::invalid_argument("corpus spec: negative distractor count");
  const int worst = (1 + s.answer_max_len) +
                    (d.prefix_overlap_count + d.suffix_overlap_count) * (1 + distractor_max_len(s)) +
                    d.full_decoys * (1 + s.answer_max_len);
  if (worst > s.passage_len)
    throw std::invalid_argument("corpus spec infeasible: answer plus distractors need " +
                                std::to_string(worst) + " tokens but passage_len is " +
                                std::to_string(s.passage_len));
}

template <typename T>
const T& pick(Rng& rng, const std::vector<T>& items) {
  return items[static_cast<std::size_t>(rng.below(static_cast<int>(items.size())))];
}

Example make_example(const CorpusSpec& spec, const TokenClasses& tc, Rng& rng, std::string id) {
  const auto& d = spec.distractors;
  const auto key_index = static_cast<std::size_t>(rng.below(static_cast<int>(tc.keys.size())));
  const std::string& key = tc.keys[key_index];
  std::vector<std::size_t> other_keys;
  for (std::size_t k = 0; k < tc.keys.size(); ++k)
    if (k != key_index) other_keys.push_back(k);

  const int len = spec.answer_min_len + rng.below(spec.answer_max_len - spec.answer_min_len + 1);
  auto run_of = [&](std::size_t k, int n) {
    const Family fam = family(tc, k);
    if (n == 1) return std::vector<std::string>{pick(rng, fam.singles)};
    std::vector<std::string> run{pick(rng, fam.openers)};
    for (int j = 2; j < n; ++j) run.push_back(pick(rng, fam.middles));
    run.push_back(pick(rng, fam.closers));
    return run;
  };
  const std::vector<std::string> gold = run_of(key_index, len);
  const std::string first = gold.front();
  const std::string last = gold.back();

  // Each segment is a key token followed by a value run. Overlap distractors
  // are runs of another key whose first (or last) value is gold's.
  std::vector<std::vector<std::string>> segments;
  auto segment = [&](const std::string& k, std::vector<std::string> run) {
    run.insert(run.begin(), k);
    segments.push_back(std::move(run));
  };
  segment(key, gold);
  const int dmax = distractor_max_len(spec);
  for (int i = 0; i < d.prefix_overlap_count; ++i) {
    const std::size_t k = pick(rng, other_keys);
    auto run = run_of(k, 2 + rng.below(dmax - 1));
    run.front() = first;
    segment(tc.keys[k], std::move(run));
  }
  for (int i = 0; i < d.suffix_overlap_count; ++i) {
    const std::size_t k = pick(rng, other_keys);
    auto run = run_of(k, 2 + rng.below(dmax - 1));
    run.back() = last;
    segment(tc.keys[k], std::move(run));
  }
  for (int i = 0; i < d.full_decoys; ++i) {
    const std::size_t k = pick(rng, other_keys);
    segment(tc.keys[k], run_of(k, spec.answer_min_len + rng.below(spec.answer_max_len - spec.answer_min_len + 1)));
  }

  std::vector<int> order(segments.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  rng.shuffle(order);

  int used = 0;
  for (const auto& s : segments) used += static_cast<int>(s.size());
  std::vector<int> gaps(segments.size() + 1, 0);
  for (int i = 0; i < spec.passage_len - used; ++i) ++gaps[static_cast<std::size_t>(rng.below(static_cast<int>(gaps.size())))];

  Example ex;
  ex.id = std::move(id);
  ex.question = {pick(rng, tc.qwords), key};
  for (std::size_t slot = 0; slot <= order.size(); ++slot) {
    for (int g = 0; g < gaps[slot]; ++g) ex.passage.push_back(pick(rng, tc.fillers));
    if (slot == order.size()) break;
    const int which = order[slot];
    if (which == 0) {
      ex.gold.start = static_cast<int>(ex.passage.size()) + 1;
      ex.gold.end = ex.gold.start + len - 1;
    }
    const auto& s = segments[static_cast<std::size_t>(which)];
    ex.passage.insert(ex.passage.end(), s.begin(), s.end());
  }
  ex.gold_text = join_tokens(ex.passage, ex.gold.start, ex.gold.end);
  return ex;
}

}  // namespace

SyntheticCorpus generate_corpus(const CorpusSpec& spec) {
  const TokenClasses tc = partition_vocab(spec.vocab_size);
  check_feasible(spec);
  Rng rng(mix_seed(spec.seed));

  std::vector<Example> all;
  all.reserve(static_cast<std::size_t>(spec.num_examples));
  for (int i = 0; i < spec.num_examples; ++i) {
    std::ostringstream id;
    id << "syn-" << spec.seed << '-' << i;
    all.push_back(make_example(spec, tc, rng, id.str()));
  }

  SyntheticCorpus out;
  const auto n_dev = static_cast<std::size_t>(spec.num_examples / 6);
  const auto n_test = n_dev;
  const auto n_train = all.size() - n_dev - n_test;
  out.data.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.data.dev.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train),
                      all.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev));
  out.data.test.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev), all.end());

  std::vector<std::string> tokens{"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
  for (const auto* cls : {&tc.qwords, &tc.keys, &tc.values, &tc.fillers})
    tokens.insert(tokens.end(), cls->begin(), cls->end());
  out.vocab = Vocab(std::move(tokens));
  return out;
}

// ---------------------------------------------------------------------------
// SQuAD v1.1 ingestion

namespace {

const json& require(const json& node, const char* field, const std::string& path) {
  if (!node.is_object() || !node.contains(field))
    throw std::runtime_error("squad: missing '" + std::string(field) + "' at " + path);
  return node.at(field);
}

const json& require_array(const json& node, const char* field, const std::string& path) {
  const auto& v = require(node, field, path);
  if (!v.is_array()) throw std::runtime_error("squad: '" + path + "." + field + "' is not an array");
  return v;
}

const std::string& require_string(const json& node, const char* field, const std::string& path) {
  const auto& v = require(node, field, path);
  if (!v.is_string()) throw std::runtime_error("squad: '" + path + "." + field + "' is not a string");
  return v.get_ref<const std::string&>();
}

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

struct TokenOffsets {
  std::vector<std::string> tokens;
  std::vector<std::size_t> begin, end;  // [begin, end) character offsets
};

TokenOffsets whitespace_tokenize(const std::string& text) {
  TokenOffsets t;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    if (i >= text.size()) break;
    const std::size_t b = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    t.tokens.push_back(text.substr(b, i - b));
    t.begin.push_back(b);
    t.end.push_back(i);
  }
  return t;
}

std::vector<std::string> tokens_of(const std::string& text) { return whitespace_tokenize(text).tokens; }

}  // namespace

SquadLoad parse_squad_json(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("squad: invalid JSON: ") + e.what());
  }
  SquadLoad out;
  const auto& data = require_array(root, "data", "$");
  for (std::size_t a = 0; a < data.size(); ++a) {
    const std::string apath = "$.data[" + std::to_string(a) + "]";
    const auto& paragraphs = require_array(data[a], "paragraphs", apath);
    for (std::size_t p = 0; p < paragraphs.size(); ++p) {
      const std::string ppath = apath + ".paragraphs[" + std::to_string(p) + "]";
      const auto& context = require_string(paragraphs[p], "context", ppath);
      const TokenOffsets ctx = whitespace_tokenize(context);
      const auto& qas = require_array(paragraphs[p], "qas", ppath);
      for (std::size_t q = 0; q < qas.size(); ++q) {
        const std::string qpath = ppath + ".qas[" + std::to_string(q) + "]";
        const auto& id = require_string(qas[q], "id", qpath);
        const auto& question = require_string(qas[q], "question", qpath);
        const auto& answers = require_array(qas[q], "answers", qpath);
        if (answers.empty()) {
          ++out.dropped;
          continue;
        }
        const std::string anpath = qpath + ".answers[0]";
        const auto& answer_text = require_string(answers[0], "text", anpath);
        const auto& start_node = require(answers[0], "answer_start", anpath);
        if (!start_node.is_number_integer())
          throw std::runtime_error("squad: '" + anpath + ".answer_start' is not an integer");
        const auto char_start = start_node.get<long long>();
        const auto answer_tokens = whitespace_tokenize(answer_text);
        if (char_start < 0 || answer_tokens.tokens.empty()) {
          ++out.dropped;
          continue;
        }
        const std::size_t cb = static_cast<std::size_t>(char_start) + answer_tokens.begin.front();
        const std::size_t ce = static_cast<std::size_t>(char_start) + answer_tokens.end.back();
        const auto sb = std::find(ctx.begin.begin(), ctx.begin.end(), cb);
        const auto se = std::find(ctx.end.begin(), ctx.end.end(), ce);
        if (sb == ctx.begin.end() || se == ctx.end.end() ||
            context.compare(static_cast<std::size_t>(char_start), answer_text.size(), answer_text) != 0) {
          ++out.dropped;
          continue;
        }
        Example ex;
        ex.id = id;
        ex.question = tokens_of(question);
        ex.passage = ctx.tokens;
        ex.gold.start = static_cast<int>(sb - ctx.begin.begin());
        ex.gold.end = static_cast<int>(se - ctx.end.begin());
        if (ex.gold.end < ex.gold.start) {
          ++out.dropped;
          continue;
        }
        ex.gold_text = join_tokens(ex.passage, ex.gold.start, ex.gold.end);
        out.examples.push_back(std::move(ex));
      }
    }
  }
  return out;
}

SquadLoad load_squad_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_squad_json(buf.str());
}

// ---------------------------------------------------------------------------
// JSON Lines

std::string to_json_line(const Example& ex) {
  json j;
  j["id"] = ex.id;
  j["question"] = ex.question;
  j["passage"] = ex.passage;
  j["answer"] = {{"start", ex.gold.start}, {"end", ex.gold.end}, {"text", ex.gold_text}};
  return j.dump();
}

Example from_json_line(const std::string& line) {
  const json j = json::parse(line);
  Example ex;
  ex.id = j.at("id").get<std::string>();
  ex.question = j.at("question").get<std::vector<std::string>>();
  ex.passage = j.at("passage").get<std::vector<std::string>>();
  const auto& a = j.at("answer");
  ex.gold = {a.at("start").get<int>(), a.at("end").get<int>()};
  ex.gold_text = a.at("text").get<std::string>();
  validate(ex);
  return ex;
}

std::vector<Example> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset " + path.string());
  std::vector<Example> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(from_json_line(line));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<Example>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write dataset " + path.string());
  for (const auto& ex : examples) out << to_json_line(ex) << '\n';
}

void save_dataset(const std::filesystem::path& dir, const Dataset& data, const Vocab& vocab) {
  std::filesystem::create_directories(dir);
  write_jsonl(dir / "train.jsonl", data.train);
  write_jsonl(dir / "dev.jsonl", data.dev);
  write_jsonl(dir / "test.jsonl", data.test);
  vocab.save(dir / "vocab.txt");
}

// ---------------------------------------------------------------------------
// Encoding

EncodedExample encode(const Example& ex, const Vocab& vocab, const EncodeOptions& opts) {
  if (opts.max_len < 4)
    throw std::invalid_argument("encode: max_len " + std::to_string(opts.max_len) +
                                " cannot hold [CLS] [SEP] [SEP] and one passage token");
  if (ex.passage.empty()) throw std::invalid_argument("encode: example " + ex.id + " has an empty passage");
  EncodedExample enc;
  const int q_len = std::min({static_cast<int>(ex.question.size()), opts.question_max_len, opts.max_len - 4});
  const int p_room = opts.max_len - 3 - q_len;
  const int p_len = std::min(static_cast<int>(ex.passage.size()), p_room);

  enc.token_ids.assign(static_cast<std::size_t>(opts.max_len), Vocab::kPad);
  enc.attention_mask.assign(static_cast<std::size_t>(opts.max_len), 0);
  int pos = 0;
  auto put = [&](int id) {
    enc.token_ids[static_cast<std::size_t>(pos)] = id;
    enc.attention_mask[static_cast<std::size_t>(pos)] = 1;
    ++pos;
  };
  put(Vocab::kCls);
  enc.question_region = {pos, pos + q_len - 1};
  for (int i = 0; i < q_len; ++i) put(vocab.id(ex.question[static_cast<std::size_t>(i)]));
  put(Vocab::kSep);
  enc.passage_region = {pos, pos + p_len - 1};
  for (int i = 0; i < p_len; ++i) put(vocab.id(ex.passage[static_cast<std::size_t>(i)]));
  put(Vocab::kSep);
  enc.length = pos;
  enc.passage_tokens_kept = p_len;
  enc.gold_in_sequence = to_sequence(enc, ex.gold);
  enc.usable = enc.passage_region.contains(enc.gold_in_sequence);
  return enc;
}

Decoded decode(const EncodedExample& enc, const Vocab& vocab) {
  Decoded d;
  for (int i = enc.question_region.first; i <= enc.question_region.last; ++i)
    d.question.push_back(vocab.token(enc.token_ids[static_cast<std::size_t>(i)]));
  for (int i = enc.passage_region.first; i <= enc.passage_region.last; ++i)
    d.passage.push_back(vocab.token(enc.token_ids[static_cast<std::size_t>(i)]));
  return d;
}

std::string span_text(const Example& ex, const EncodedExample& enc, const Span& seq_span) {
  const Span p = to_passage(enc, seq_span);
  return join_tokens(ex.passage, p.start, p.end);
}

}  // namespace spanforge
