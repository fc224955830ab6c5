#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "spanforge/corpus.hpp"

namespace spanforge {

struct ModelParams;

enum class Normalization {
  Plain,  // lowercase, trim, collapse whitespace
  Squad,  // Plain plus punctuation and English article removal
};

std::string normalize(const std::string& text, Normalization mode = Normalization::Plain);

int exact_match(const std::string& pred, const std::string& gold, Normalization mode = Normalization::Plain);
double f1_overlap(const std::string& pred, const std::string& gold, Normalization mode = Normalization::Plain);
int topk_em(const std::vector<std::string>& ranked_preds, const std::string& gold, int k,
            Normalization mode = Normalization::Plain);

struct ExampleRecord {
  std::string id;
  std::vector<std::string> top_preds;
  std::string gold;
  int em = 0;
  double f1 = 0.0;
  std::map<int, int> topk_em;     // k -> 0/1
  std::map<int, double> topk_f1;  // k -> best F1 among the first k predictions
};

struct EvalReport {
  std::vector<ExampleRecord> records;
  std::vector<int> k_list;
  double em = 0.0;
  double f1 = 0.0;
  std::map<int, double> topk_em;
  std::map<int, double> topk_f1;
  std::size_t truncated = 0;  // examples whose gold span did not survive encoding (scored as misses)

  // Recomputes aggregates as means of the per-example fields.
  void aggregate();
};

struct EvalOptions {
  std::vector<int> k_list{1, 3, 5, 10};
  int max_answer_len = 8;
  Normalization normalization = Normalization::Plain;
};

EvalReport evaluate(const ModelParams& params, const std::vector<Example>& dataset, const Vocab& vocab,
                    const EvalOptions& opts);

// Scores already-ranked prediction texts (the model-free half of evaluate).
ExampleRecord score_example(const std::string& id, std::vector<std::string> ranked_preds, const std::string& gold,
                            const std::vector<int>& k_list, Normalization mode = Normalization::Plain);

void write_report_json(const std::filesystem::path& path, const EvalReport& report);
EvalReport read_report_json(const std::filesystem::path& path);
// Columns k,em,f1: one row per k.
void write_report_csv(const std::filesystem::path& path, const EvalReport& report);

}  // namespace spanforge
