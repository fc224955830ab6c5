#include "spanforge/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "json.hpp"
#include "spanforge/encoder.hpp"
#include "spanforge/kvconfig.hpp"
#include "spanforge/parallel.hpp"
#include "spanforge/spandecode.hpp"

namespace spanforge {

namespace {

std::vector<std::string> words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

}  // namespace

std::string normalize(const std::string& text, Normalization mode) {
  std::string s;
  s.reserve(text.size());
  for (unsigned char c : text) {
    if (mode == Normalization::Squad && c < 128 && std::ispunct(c)) continue;
    s.push_back(c < 128 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
  }
  std::string out;
  for (const auto& w : words(s)) {
    if (mode == Normalization::Squad && (w == "a" || w == "an" || w == "the")) continue;
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

int exact_match(const std::string& pred, const std::string& gold, Normalization mode) {
  return normalize(pred, mode) == normalize(gold, mode) ? 1 : 0;
}

double f1_overlap(const std::string& pred, const std::string& gold, Normalization mode) {
  const auto p = words(normalize(pred, mode));
  const auto g = words(normalize(gold, mode));
  if (p.empty() && g.empty()) return 1.0;
  if (p.empty() || g.empty()) return 0.0;
  std::unordered_map<std::string, int> counts;
  for (const auto& w : g) ++counts[w];
  int overlap = 0;
  for (const auto& w : p) {
    auto it = counts.find(w);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double precision = static_cast<double>(overlap) / static_cast<double>(p.size());
  const double recall = static_cast<double>(overlap) / static_cast<double>(g.size());
  return 2.0 * precision * recall / (precision + recall);
}

int topk_em(const std::vector<std::string>& ranked, const std::string& gold, int k, Normalization mode) {
  if (k < 1) throw std::invalid_argument("topk_em: k must be >= 1");
  const std::size_t n = std::min(ranked.size(), static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < n; ++i)
    if (exact_match(ranked[i], gold, mode)) return 1;
  return 0;
}

ExampleRecord score_example(const std::string& id, std::vector<std::string> ranked, const std::string& gold,
                            const std::vector<int>& k_list, Normalization mode) {
  ExampleRecord r;
  r.id = id;
  r.gold = gold;
  r.top_preds = std::move(ranked);
  const std::string top1 = r.top_preds.empty() ? std::string{} : r.top_preds.front();
  r.em = r.top_preds.empty() ? 0 : exact_match(top1, gold, mode);
  r.f1 = r.top_preds.empty() ? 0.0 : f1_overlap(top1, gold, mode);
  for (int k : k_list) {
    r.topk_em[k] = topk_em(r.top_preds, gold, k, mode);
    double best = 0.0;
    const std::size_t n = std::min(r.top_preds.size(), static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < n; ++i) best = std::max(best, f1_overlap(r.top_preds[i], gold, mode));
    r.topk_f1[k] = best;
  }
  return r;
}

void EvalReport::aggregate() {
  em = f1 = 0.0;
  topk_em.clear();
  topk_f1.clear();
  for (int k : k_list) {
    topk_em[k] = 0.0;
    topk_f1[k] = 0.0;
  }
  if (records.empty()) return;
  for (const auto& r : records) {
    em += r.em;
    f1 += r.f1;
    for (int k : k_list) {
      topk_em[k] += r.topk_em.at(k);
      topk_f1[k] += r.topk_f1.at(k);
    }
  }
  const double n = static_cast<double>(records.size());
  em /= n;
  f1 /= n;
  for (int k : k_list) {
    topk_em[k] /= n;
    topk_f1[k] /= n;
  }
}

EvalReport evaluate(const ModelParams& params, const std::vector<Example>& dataset, const Vocab& vocab,
                    const EvalOptions& opts) {
  if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");
  if (opts.k_list.empty()) throw std::invalid_argument("evaluate: empty k list");
  for (int k : opts.k_list)
    if (k < 1) throw std::invalid_argument("evaluate: k must be >= 1");
  const int k_max = *std::max_element(opts.k_list.begin(), opts.k_list.end());
  const EncodeOptions enc_opts{params.config.max_len, params.config.question_max_len};

  EvalReport report;
  report.k_list = opts.k_list;
  std::sort(report.k_list.begin(), report.k_list.end());
  report.k_list.erase(std::unique(report.k_list.begin(), report.k_list.end()), report.k_list.end());
  report.records.resize(dataset.size());
  std::vector<char> truncated(dataset.size(), 0);
  parallel_for(dataset.size(), [&](std::size_t i) {
    const Example& ex = dataset[i];
    const EncodedExample enc = encode(ex, vocab, enc_opts);
    truncated[i] = enc.usable ? 0 : 1;
    const ForwardTrace tr = forward(params, enc);
    const PredictionSet preds = topk_spans(tr, k_max, opts.max_answer_len);
    std::vector<std::string> texts;
    for (const auto& s : preds.ranked) texts.push_back(span_text(ex, enc, s.span));
    report.records[i] = score_example(ex.id, std::move(texts), ex.gold_text, report.k_list, opts.normalization);
  });
  for (char t : truncated) report.truncated += static_cast<std::size_t>(t);
  report.aggregate();
  return report;
}

// ---------------------------------------------------------------------------

using nlohmann::json;

void write_report_json(const std::filesystem::path& path, const EvalReport& report) {
  json j;
  j["k_list"] = report.k_list;
  j["em"] = report.em;
  j["f1"] = report.f1;
  json tem = json::object(), tf1 = json::object();
  for (const auto& [k, v] : report.topk_em) tem[std::to_string(k)] = v;
  for (const auto& [k, v] : report.topk_f1) tf1[std::to_string(k)] = v;
  j["topk_em"] = tem;
  j["topk_f1"] = tf1;
  j["truncated"] = report.truncated;
  json recs = json::array();
  for (const auto& r : report.records) {
    json jr;
    jr["id"] = r.id;
    jr["top_preds"] = r.top_preds;
    jr["gold"] = r.gold;
    jr["em"] = r.em;
    jr["f1"] = r.f1;
    json rk = json::object(), rf = json::object();
    for (const auto& [k, v] : r.topk_em) rk[std::to_string(k)] = v;
    for (const auto& [k, v] : r.topk_f1) rf[std::to_string(k)] = v;
    jr["topk_em"] = rk;
    jr["topk_f1"] = rf;
    recs.push_back(std::move(jr));
  }
  j["records"] = std::move(recs);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write report " + path.string());
  out << j.dump(1) << '\n';
}

EvalReport read_report_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open report " + path.string());
  const json j = json::parse(in);
  EvalReport r;
  r.k_list = j.at("k_list").get<std::vector<int>>();
  r.truncated = j.value("truncated", std::size_t{0});
  for (const auto& jr : j.at("records")) {
    ExampleRecord rec;
    rec.id = jr.at("id").get<std::string>();
    rec.top_preds = jr.at("top_preds").get<std::vector<std::string>>();
    rec.gold = jr.at("gold").get<std::string>();
    rec.em = jr.at("em").get<int>();
    rec.f1 = jr.at("f1").get<double>();
    for (const auto& [k, v] : jr.at("topk_em").items()) rec.topk_em[std::stoi(k)] = v.get<int>();
    for (const auto& [k, v] : jr.at("topk_f1").items()) rec.topk_f1[std::stoi(k)] = v.get<double>();
    r.records.push_back(std::move(rec));
  }
  r.aggregate();
  return r;
}

void write_report_csv(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write report " + path.string());
  out << "k,em,f1\n";
  for (int k : report.k_list)
    out << k << ',' << format_double(report.topk_em.at(k)) << ',' << format_double(report.topk_f1.at(k)) << '\n';
}

}  // namespace spanforge
