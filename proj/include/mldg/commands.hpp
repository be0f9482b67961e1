#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mldg/analysis.hpp"
#include "mldg/config.hpp"
#include "mldg/metrics.hpp"

namespace mldg {

struct NamedSet {
  std::string name;
  DomainSet set;
};

struct RunData {
  Corpus corpus;
  std::vector<NamedSet> eval_sets;
};

// Synthetic corpus or manifest, plus the configured eval sets.
RunData load_run_data(const RunConfig& config);
// Errors (config kind) when the data cannot feed the configured model:
// feature shape, domain count, batch sizes, missing classes.
void check_run_data(const RunConfig& config, const RunData& data);

struct GenerateReceipt {
  std::uint64_t seed = 0;
  std::uint64_t spec_hash = 0;
  std::size_t n_train = 0;
  std::size_t n_dev = 0;
  std::size_t n_eval = 0;
};

// Writes manifest.csv, features/ and receipt.json under out. A non-empty
// out is refused unless force, in which case it is wiped first.
GenerateReceipt cmd_generate(const RunConfig& config, const std::filesystem::path& out, bool force);

struct SeedSummary {
  std::uint64_t seed = 0;
  int best_epoch = 0;
  double val_eer = 0.0;
  int epochs_run = 0;
  bool stopped_early = false;
};

// Trains every seed into <out>/seed_<s>/{checkpoint.bin,log.jsonl} and
// writes <out>/config.json and <out>/summary.tsv.
std::vector<SeedSummary> cmd_train(const RunConfig& config, std::ostream* progress = nullptr);

struct EvalRow {
  std::string set;
  std::uint64_t seed = 0;
  double eer = 0.0;
  double threshold = 0.0;
};

struct EvalAggregate {
  std::string set;
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;  // NaN with a single seed
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::vector<EvalAggregate> aggregates;
};

std::filesystem::path checkpoint_path(const std::filesystem::path& run_dir, std::uint64_t seed);

// Scores every configured eval set with every seed's checkpoint. Writes
// <run>/eval/scores/<set>/seed_<s>.txt, per_seed.tsv, report.tsv and, with
// det, det/<set>/seed_<s>.tsv. All checkpoints are checked before scoring.
EvalReport cmd_eval(const std::filesystem::path& run_dir, bool det = false);

struct SweepRow {
  Method method = Method::mldg;
  std::optional<int> rank;
  std::size_t trainable_params = 0;
  std::optional<std::uint64_t> reference_params;
  std::vector<EvalAggregate> results;  // one per eval set
};

// For each (method, rank): train and evaluate into <out>/<method>_r<rank>,
// then write <out>/sweep.tsv.
std::vector<SweepRow> cmd_sweep(const RunConfig& config, const std::vector<std::optional<int>>& ranks,
                                const std::vector<Method>& methods, std::ostream* progress = nullptr);

struct AnalyzeInput {
  std::string label;
  std::filesystem::path checkpoint;
};

struct AnalyzeResult {
  std::vector<std::pair<std::string, SvdReport>> reports;
};

// Writes grids_<label>.csv per checkpoint, effective_rank.tsv and a
// summary.tsv with one mean-effective-rank column per checkpoint.
AnalyzeResult cmd_analyze(const std::vector<AnalyzeInput>& inputs, const std::filesystem::path& out,
                          double tau = 0.01);

std::string rank_label(const std::optional<int>& rank);
std::optional<int> parse_rank(const std::string& s);

}  // namespace mldg
