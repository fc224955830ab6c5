#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <vector>

#include "spanforge/kvconfig.hpp"

namespace spanforge {

// Inclusive (start, end) token-index pair.
struct Span {
  int start = 0;
  int end = 0;

  int length() const { return end - start + 1; }
  auto operator<=>(const Span&) const = default;
};

std::string join_tokens(const std::vector<std::string>& tokens, int first, int last);

struct Example {
  std::string id;
  std::vector<std::string> question;
  std::vector<std::string> passage;
  Span gold;             // passage coordinates
  std::string gold_text; // passage tokens [gold.start..gold.end] joined by single spaces
};

// Throws std::invalid_argument when the gold span or its text is inconsistent with the passage.
void validate(const Example& ex);

struct Dataset {
  std::vector<Example> train;
  std::vector<Example> dev;
  std::vector<Example> test;
};

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kSep = 3;
  static constexpr int kNumSpecial = 4;

  Vocab();
  explicit Vocab(std::vector<std::string> tokens);

  // Adds every question and passage token in first-seen order.
  static Vocab build(const std::vector<const std::vector<Example>*>& splits);
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  int id(const std::string& token) const;
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(tokens_.size()); }
  int add(const std::string& token);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct DistractorPolicy {
  int prefix_overlap_count = 2;
  int suffix_overlap_count = 2;
  int full_decoys = 2;
};

struct CorpusSpec {
  int vocab_size = 200;
  int num_examples = 3000;  // split 4:1:1 into train/dev/test
  int passage_len = 48;
  int answer_min_len = 1;
  int answer_max_len = 4;
  DistractorPolicy distractors;
  std::uint64_t seed = 7;
};

// Flat "key = value" text; unknown keys are an error.
CorpusSpec load_corpus_spec(const std::filesystem::path& path);
CorpusSpec parse_corpus_spec(const KeyValues& kv, CorpusSpec base = {});

struct SyntheticCorpus {
  Dataset data;
  Vocab vocab;
};

SyntheticCorpus generate_corpus(const CorpusSpec& spec);

struct SquadLoad {
  std::vector<Example> examples;
  std::size_t dropped = 0;
};

SquadLoad load_squad_json(const std::filesystem::path& path);
SquadLoad parse_squad_json(const std::string& text);

// JSON Lines dataset file.
std::vector<Example> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, const std::vector<Example>& examples);
std::string to_json_line(const Example& ex);
Example from_json_line(const std::string& line);

void save_dataset(const std::filesystem::path& dir, const Dataset& data, const Vocab& vocab);

struct Region {
  int first = 0;
  int last = -1;

  bool empty() const { return last < first; }
  int size() const { return last - first + 1; }
  bool contains(int i) const { return i >= first && i <= last; }
  bool contains(const Span& s) const { return contains(s.start) && contains(s.end); }
};

struct EncodedExample {
  std::vector<int> token_ids;       // padded to max_len
  std::vector<std::uint8_t> attention_mask;
  int length = 0;                   // number of valid positions
  Region question_region;
  Region passage_region;
  Span gold_in_sequence;
  bool usable = true;               // false when truncation cut the gold span
  int passage_tokens_kept = 0;
};

struct EncodeOptions {
  int max_len = 64;
  int question_max_len = 64;
};

EncodedExample encode(const Example& ex, const Vocab& vocab, const EncodeOptions& opts);

struct Decoded {
  std::vector<std::string> question;
  std::vector<std::string> passage;
};

Decoded decode(const EncodedExample& enc, const Vocab& vocab);

// Passage text of a span given in sequence coordinates.
std::string span_text(const Example& ex, const EncodedExample& enc, const Span& seq_span);

inline Span to_sequence(const EncodedExample& enc, const Span& passage_span) {
  return {passage_span.start + enc.passage_region.first, passage_span.end + enc.passage_region.first};
}
inline Span to_passage(const EncodedExample& enc, const Span& seq_span) {
  return {seq_span.start - enc.passage_region.first, seq_span.end - enc.passage_region.first};
}

}  // namespace spanforge
