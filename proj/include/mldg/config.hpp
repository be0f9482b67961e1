#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mldg/data.hpp"
#include "mldg/meta.hpp"
#include "mldg/model.hpp"

namespace mldg {

inline constexpr int kConfigSchemaVersion = 1;

struct EvalSetRef {
  std::string name;
  std::string manifest;  // absolute once resolved

  bool operator==(const EvalSetRef&) const = default;
};

// Optional large-scale geometry used only for the parameter-count column
// of sweep tables.
struct ReferenceScale {
  int n_layers = 24;
  int d_model = 1024;
  int n_targets = 4;
  std::uint64_t head_params = 447000;

  bool operator==(const ReferenceScale&) const = default;
};

struct RunConfig {
  Method method = Method::mldg;
  EncoderConfig model;
  ModelOptions options;  // rank, freeze_base, lora_scale, lora_init_std
  TrainConfig train;     // method is mirrored from `method`
  std::vector<std::uint64_t> seeds = {999, 2023, 555, 123, 42};

  // Data: either a manifest or a synthetic corpus spec plus its seed.
  std::optional<std::string> manifest;
  CorpusSpec corpus = default_corpus_spec();
  std::uint64_t data_seed = 7;
  std::vector<EvalSetRef> eval_sets;  // empty -> the corpus eval split as "heldout"

  std::optional<ReferenceScale> reference;
  std::string out = "runs/default";
};

// Canonical JSON text (sorted keys, 2-space indent, trailing newline).
std::string to_canonical_text(const RunConfig& config);
// Strict parse: unknown keys, wrong types and a missing or unknown
// schema_version are config errors. Missing keys keep their defaults.
RunConfig parse_config_text(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const RunConfig& config);

// "a.b.c=value"; value parses as JSON when it can, else as a string.
void apply_override(RunConfig& config, const std::string& assignment);
// All assignments first, then one validation pass, so related keys such as
// lr_min and lr_max can move together.
void apply_overrides(RunConfig& config, const std::vector<std::string>& assignments);

// Relative manifest paths become absolute against base.
void resolve_paths(RunConfig& config, const std::filesystem::path& base);

// Hash of everything that determines a single-seed run except the seed
// list and output location.
std::uint64_t config_hash(const RunConfig& config);

std::string corpus_spec_text(const CorpusSpec& spec);
std::uint64_t corpus_spec_hash(const CorpusSpec& spec);

}  // namespace mldg
