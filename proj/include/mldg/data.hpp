#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "mldg/tensor.hpp"

namespace mldg {

inline constexpr int kBonafide = 0;
inline constexpr int kSpoof = 1;

// Feature payload that is either resident or read from disk on first use.
// Loading is guarded by a once-flag, so shared read-only access is safe.
class FeatureSource {
 public:
  explicit FeatureSource(Tensor resident);
  explicit FeatureSource(std::filesystem::path path);

  const Tensor& get() const;
  const std::filesystem::path& path() const { return path_; }
  bool loaded() const { return loaded_; }

 private:
  std::filesystem::path path_;
  mutable std::once_flag once_;
  mutable Tensor value_;
  mutable bool loaded_ = false;
};

struct Example {
  std::string example_id;
  int label = kBonafide;
  int domain_id = 0;
  std::shared_ptr<const FeatureSource> source;

  const Tensor& features() const { return source->get(); }
};

struct Domain {
  int domain_id = 0;
  std::vector<Example> examples;

  std::size_t count(int label) const;
};

// Labeled examples grouped by domain, domains in ascending id order.
struct DomainSet {
  std::vector<Domain> domains;

  std::size_t size() const;
  std::size_t num_domains() const { return domains.size(); }
  std::vector<const Example*> all() const;
  bool has_both_classes() const;
  Domain& domain(int domain_id);  // created on demand, order preserved
};

struct Corpus {
  DomainSet train;
  DomainSet dev;
  DomainSet eval;
};

// Spoof-specific nuisance added on top of the shared cue.
enum class ArtifactKind { harmonic, ar_noise };
const char* to_string(ArtifactKind kind);
ArtifactKind artifact_kind_from_string(const std::string& s);

struct ArtifactSpec {
  int id = 1;
  ArtifactKind kind = ArtifactKind::harmonic;
  int harmonic = 4;        // spectral harmonic index (harmonic kind)
  int band_start = 0;      // first bin of the AR band (ar_noise kind)
  int band_width = 3;
  double ar_coeff = 0.8;
  double amplitude = 1.0;
};

struct DomainSpec {
  int domain_id = 1;
  ArtifactSpec spoof_artifact;
  double shared_cue_strength = 0.6;
  int n_spoof = 30;
  int n_bonafide = 10;
  double noise_scale = 0.3;
};

struct CorpusSpec {
  int seq_len = 32;
  int d_model = 16;
  std::vector<DomainSpec> train;
  std::vector<DomainSpec> held_out;
  // Validation counts per training domain, relative to the training counts.
  double dev_fraction = 0.5;
};

// Six training attack domains and two held-out ones with unseen artifacts.
CorpusSpec default_corpus_spec();

// Pure function of (spec, seed). Bonafide utterances of each split are
// dealt round-robin across that split's domains, so the pools are disjoint.
Corpus generate_corpus(const CorpusSpec& spec, std::uint64_t seed);

// Frequency bins attenuated in every spoof example.
std::vector<int> notch_bins(int d_model);
// Mean level of the notch bins; the closed-form cue detector. Lower means
// more spoof-like, so it is directly usable as a bonafide score.
double cue_statistic(const Tensor& features);

// Feature files: "MLDGFEAT" magic, u32 ndim, ndim x u64 dims, then
// float64 payload; all little-endian.
void write_feature_file(const std::filesystem::path& path, const Tensor& tensor);
Tensor read_feature_file(const std::filesystem::path& path);

struct ManifestRow {
  std::size_t row = 0;  // 1-based data row, header excluded
  std::string example_id;
  std::string path;
  int label = 0;
  int domain_id = 0;
  std::string split;
};

inline constexpr const char* kManifestHeader = "example_id,path,label,domain_id,split";

// Writes features/<id>.bin for every example plus manifest.csv.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
std::vector<ManifestRow> read_manifest_rows(const std::filesystem::path& path);
// Validates every row (labels, splits, unique ids, files present); payloads
// load lazily on first access.
Corpus load_manifest(const std::filesystem::path& path);

}  // namespace mldg
