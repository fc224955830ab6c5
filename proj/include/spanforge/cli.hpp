#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "spanforge/metrics.hpp"

namespace spanforge {

// Exit codes: 0 success, 1 usage error, 2 runtime failure.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

struct SweepSpec {
  std::string axis;  // tau | alpha | z_size | mining
  std::vector<std::string> values;
  std::vector<std::uint64_t> seeds;

  void validate() const;
};

std::vector<std::string> default_sweep_values(const std::string& axis);

// One evaluated run inside a sweep.
struct RunSummary {
  std::string axis, value;
  std::string seed;
  double em = 0.0, f1 = 0.0;
};

struct ValueSummary {
  std::string value;
  double mean_em = 0.0, mean_f1 = 0.0;
  std::size_t runs = 0;
};

struct SweepAggregate {
  std::vector<RunSummary> runs;
  std::vector<ValueSummary> values;  // first-seen order
  std::vector<std::filesystem::path> missing;

  const ValueSummary& best() const;   // highest mean F1
  const ValueSummary& worst() const;  // lowest mean F1
};

// Reads report.json (and run.json when present) from every run directory.
SweepAggregate aggregate_runs(const std::vector<std::filesystem::path>& run_dirs);
void write_aggregate_csv(const std::filesystem::path& path, const SweepAggregate& agg);
std::string format_table(const SweepAggregate& agg);

}  // namespace spanforge
