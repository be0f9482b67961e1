#include "mldg/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <unordered_set>

#include "mldg/error.hpp"
#include "mldg/rng.hpp"

namespace mldg {

static_assert(std::endian::native == std::endian::little,
              "feature and checkpoint files are written in host order; little-endian required");

FeatureSource::FeatureSource(Tensor resident) : value_(std::move(resident)), loaded_(true) {
  std::call_once(once_, [] {});
}

FeatureSource::FeatureSource(std::filesystem::path path) : path_(std::move(path)) {}

const Tensor& FeatureSource::get() const {
  std::call_once(once_, [this] {
    value_ = read_feature_file(path_);
    loaded_ = true;
  });
  return value_;
}

std::size_t Domain::count(int label) const {
  return static_cast<std::size_t>(std::count_if(
      examples.begin(), examples.end(), [label](const Example& e) { return e.label == label; }));
}

std::size_t DomainSet::size() const {
  std::size_t n = 0;
  for (const auto& d : domains) n += d.examples.size();
  return n;
}

std::vector<const Example*> DomainSet::all() const {
  std::vector<const Example*> out;
  out.reserve(size());
  for (const auto& d : domains)
    for (const auto& e : d.examples) out.push_back(&e);
  return out;
}

bool DomainSet::has_both_classes() const {
  bool bona = false, spoof = false;
  for (const auto& d : domains) {
    bona = bona || d.count(kBonafide) > 0;
    spoof = spoof || d.count(kSpoof) > 0;
  }
  return bona && spoof;
}

Domain& DomainSet::domain(int domain_id) {
  auto it = std::lower_bound(domains.begin(), domains.end(), domain_id,
                             [](const Domain& d, int id) { return d.domain_id < id; });
  if (it == domains.end() || it->domain_id != domain_id) {
    it = domains.insert(it, Domain{domain_id, {}});
  }
  return *it;
}

const char* to_string(ArtifactKind kind) {
  return kind == ArtifactKind::harmonic ? "harmonic" : "ar_noise";
}

ArtifactKind artifact_kind_from_string(const std::string& s) {
  if (s == "harmonic") return ArtifactKind::harmonic;
  if (s == "ar_noise") return ArtifactKind::ar_noise;
  fail(ErrorKind::config, "unknown artifact kind '" + s + "'");
}

CorpusSpec default_corpus_spec() {
  CorpusSpec spec;
  auto harmonic = [](int id, int k) {
    ArtifactSpec a;
    a.id = id;
    a.kind = ArtifactKind::harmonic;
    a.harmonic = k;
    a.amplitude = 0.8;
    return a;
  };
  auto ar = [](int id, int start, double coeff) {
    ArtifactSpec a;
    a.id = id;
    a.kind = ArtifactKind::ar_noise;
    a.band_start = start;
    a.band_width = 3;
    a.ar_coeff = coeff;
    a.amplitude = 0.8;
    return a;
  };
  const std::vector<ArtifactSpec> train_artifacts = {
      harmonic(1, 4), harmonic(2, 5), harmonic(3, 6), ar(4, 9, 0.9), ar(5, 12, 0.7), harmonic(6, 7)};
  for (std::size_t i = 0; i < train_artifacts.size(); ++i) {
    DomainSpec d;
    d.domain_id = static_cast<int>(i) + 1;
    d.spoof_artifact = train_artifacts[i];
    spec.train.push_back(d);
  }
  const std::vector<ArtifactSpec> held_out_artifacts = {harmonic(7, 3), ar(8, 1, 0.8)};
  for (std::size_t i = 0; i < held_out_artifacts.size(); ++i) {
    DomainSpec d;
    d.domain_id = static_cast<int>(i) + 7;
    d.spoof_artifact = held_out_artifacts[i];
    d.n_spoof = 60;
    d.n_bonafide = 60;
    spec.held_out.push_back(d);
  }
  return spec;
}

std::vector<int> notch_bins(int d_model) {
  if (d_model < 3) return {0};
  const int c = d_model / 3;
  return {c, c + 1};
}

double cue_statistic(const Tensor& features) {
  const auto bins = notch_bins(static_cast<int>(features.cols()));
  double s = 0.0;
  for (std::size_t t = 0; t < features.rows(); ++t)
    for (int f : bins) s += features.at(t, static_cast<std::size_t>(f));
  return s / static_cast<double>(features.rows() * bins.size());
}

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

bool in_notch(const std::vector<int>& notch, int f) {
  return std::find(notch.begin(), notch.end(), f) != notch.end();
}

// Smooth spectral envelope with a slow temporal modulation.
Tensor synth_base(Rng& rng, int seq_len, int d_model, double noise_scale) {
  Tensor x({static_cast<std::size_t>(seq_len), static_cast<std::size_t>(d_model)});
  const double level = rng.uniform(-0.3, 0.3);
  double amp[3], phase[3];
  for (int h = 0; h < 3; ++h) {
    amp[h] = rng.uniform(0.2, 0.6) / (h + 1);
    phase[h] = rng.uniform(0.0, kTwoPi);
  }
  const double omega = 1.0 + static_cast<double>(rng.index(3));
  const double psi = rng.uniform(0.0, kTwoPi);
  for (int t = 0; t < seq_len; ++t) {
    const double mod = 1.0 + 0.3 * std::sin(kTwoPi * omega * t / seq_len + psi);
    for (int f = 0; f < d_model; ++f) {
      double env = 0.0;
      for (int h = 0; h < 3; ++h) env += amp[h] * std::cos(kTwoPi * (h + 1) * f / d_model + phase[h]);
      x.at(t, f) = 1.0 + level + env * mod;
    }
  }
  if (noise_scale > 0.0) {
    for (double& v : x.data()) v += rng.normal(0.0, noise_scale);
  }
  return x;
}

void apply_notch(Tensor& x, double strength) {
  const auto notch = notch_bins(static_cast<int>(x.cols()));
  for (std::size_t t = 0; t < x.rows(); ++t)
    for (int f : notch) x.at(t, static_cast<std::size_t>(f)) -= strength;
}

void apply_artifact(Tensor& x, const ArtifactSpec& a, Rng& rng) {
  const int seq_len = static_cast<int>(x.rows());
  const int d = static_cast<int>(x.cols());
  const auto notch = notch_bins(d);
  const double gain = a.amplitude * rng.uniform(0.8, 1.2);
  if (a.kind == ArtifactKind::harmonic) {
    const double phase = 0.7 * a.id;
    const double drift = rng.uniform(0.0, kTwoPi);
    for (int t = 0; t < seq_len; ++t) {
      const double mod = 1.0 + 0.2 * std::sin(kTwoPi * 2.0 * t / seq_len + drift);
      for (int f = 0; f < d; ++f) {
        if (in_notch(notch, f)) continue;
        x.at(t, f) += gain * mod * std::cos(kTwoPi * a.harmonic * f / d + phase);
      }
    }
    return;
  }
  const double innov = std::sqrt(1.0 - a.ar_coeff * a.ar_coeff);
  double z = rng.normal();
  for (int t = 0; t < seq_len; ++t) {
    z = a.ar_coeff * z + innov * rng.normal();
    for (int f = a.band_start; f < a.band_start + a.band_width; ++f) {
      const int bin = ((f % d) + d) % d;
      if (in_notch(notch, bin)) continue;
      x.at(t, bin) += gain * (0.5 + z);
    }
  }
}

void validate_spec(const CorpusSpec& spec) {
  if (spec.seq_len < 1 || spec.d_model < 1) fail(ErrorKind::config, "corpus: seq_len and d_model must be >= 1");
  if (spec.train.size() < 2) {
    fail(ErrorKind::config, "corpus: need at least 2 training domains, got " + std::to_string(spec.train.size()));
  }
  if (spec.held_out.empty()) fail(ErrorKind::config, "corpus: need at least one held-out domain");
  if (!(spec.dev_fraction > 0.0)) fail(ErrorKind::config, "corpus: dev_fraction must be > 0");
  std::set<int> train_artifacts, domain_ids;
  auto check = [&](const DomainSpec& d) {
    if (d.n_spoof < 1 || d.n_bonafide < 1) {
      fail(ErrorKind::config, "corpus: domain " + std::to_string(d.domain_id) + " needs n_spoof, n_bonafide >= 1");
    }
    if (d.shared_cue_strength < 0.0 || d.noise_scale < 0.0) {
      fail(ErrorKind::config, "corpus: domain " + std::to_string(d.domain_id) + " has negative cue or noise");
    }
    if (std::abs(d.spoof_artifact.ar_coeff) >= 1.0) {
      fail(ErrorKind::config, "corpus: AR coefficient must lie in (-1, 1)");
    }
    if (!domain_ids.insert(d.domain_id).second) {
      fail(ErrorKind::config, "corpus: duplicate domain id " + std::to_string(d.domain_id));
    }
  };
  for (const auto& d : spec.train) {
    check(d);
    train_artifacts.insert(d.spoof_artifact.id);
  }
  for (const auto& d : spec.held_out) {
    check(d);
    if (train_artifacts.contains(d.spoof_artifact.id)) {
      fail(ErrorKind::config, "corpus: held-out domain " + std::to_string(d.domain_id) +
                                  " reuses training artifact id " + std::to_string(d.spoof_artifact.id));
    }
  }
}

std::string padded(std::size_t i, int width) {
  std::string s = std::to_string(i);
  if (static_cast<int>(s.size()) < width) s.insert(0, static_cast<std::size_t>(width) - s.size(), '0');
  return s;
}

DomainSet generate_split(const CorpusSpec& spec, const std::vector<DomainSpec>& domains,
                         double fraction, const std::string& split, Rng rng) {
  auto scaled = [fraction](int n) {
    return std::max(1, static_cast<int>(std::ceil(n * fraction - 1e-9)));
  };
  DomainSet set;
  for (const auto& d : domains) {
    Domain& dom = set.domain(d.domain_id);
    Rng drng = rng.fork("spoof." + std::to_string(d.domain_id));
    const int n = scaled(d.n_spoof);
    for (int i = 0; i < n; ++i) {
      Tensor x = synth_base(drng, spec.seq_len, spec.d_model, d.noise_scale);
      apply_notch(x, d.shared_cue_strength);
      apply_artifact(x, d.spoof_artifact, drng);
      dom.examples.push_back({split + "-d" + std::to_string(d.domain_id) + "-spoof-" + padded(i, 4),
                              kSpoof, d.domain_id, std::make_shared<FeatureSource>(std::move(x))});
    }
  }
  // Bonafide pool dealt round-robin over domains with remaining quota.
  std::vector<int> quota;
  int total = 0;
  for (const auto& d : domains) {
    quota.push_back(scaled(d.n_bonafide));
    total += quota.back();
  }
  Rng brng = rng.fork("bonafide");
  std::size_t cursor = 0;
  for (int i = 0; i < total; ++i) {
    while (quota[cursor % domains.size()] == 0) ++cursor;
    const std::size_t k = cursor % domains.size();
    --quota[k];
    ++cursor;
    const DomainSpec& d = domains[k];
    Tensor x = synth_base(brng, spec.seq_len, spec.d_model, d.noise_scale);
    set.domain(d.domain_id)
        .examples.push_back({split + "-bona-" + padded(static_cast<std::size_t>(i), 5), kBonafide,
                             d.domain_id, std::make_shared<FeatureSource>(std::move(x))});
  }
  return set;
}

}  // namespace

Corpus generate_corpus(const CorpusSpec& spec, std::uint64_t seed) {
  validate_spec(spec);
  const Rng root(seed);
  Corpus corpus;
  corpus.train = generate_split(spec, spec.train, 1.0, "train", root.fork("data.train"));
  corpus.dev = generate_split(spec, spec.train, spec.dev_fraction, "dev", root.fork("data.dev"));
  corpus.eval = generate_split(spec, spec.held_out, 1.0, "eval", root.fork("data.eval"));
  return corpus;
}

namespace {

constexpr char kFeatureMagic[8] = {'M', 'L', 'D', 'G', 'F', 'E', 'A', 'T'};

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::filesystem::path& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) fail(ErrorKind::data, "feature file " + path.string() + ": truncated");
  return v;
}

}  // namespace

void write_feature_file(const std::filesystem::path& path, const Tensor& tensor) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorKind::io, "cannot write " + path.string());
  os.write(kFeatureMagic, sizeof(kFeatureMagic));
  write_pod(os, static_cast<std::uint32_t>(tensor.shape().size()));
  for (auto d : tensor.shape()) write_pod(os, static_cast<std::uint64_t>(d));
  os.write(reinterpret_cast<const char*>(tensor.data().data()),
           static_cast<std::streamsize>(tensor.size() * sizeof(double)));
  if (!os) fail(ErrorKind::io, "write failed: " + path.string());
}

Tensor read_feature_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::data, "missing feature file " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kFeatureMagic, sizeof(magic)) != 0) {
    fail(ErrorKind::data, "feature file " + path.string() + ": bad magic");
  }
  const auto ndim = read_pod<std::uint32_t>(is, path);
  if (ndim == 0 || ndim > 8) fail(ErrorKind::data, "feature file " + path.string() + ": bad ndim");
  Shape shape;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    const auto d = read_pod<std::uint64_t>(is, path);
    if (d == 0 || d > (1u << 24)) fail(ErrorKind::data, "feature file " + path.string() + ": bad dimension");
    shape.push_back(static_cast<std::size_t>(d));
  }
  std::vector<double> data(shape_size(shape));
  is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!is) fail(ErrorKind::data, "feature file " + path.string() + ": truncated payload");
  Tensor t(std::move(shape), std::move(data));
  if (!t.all_finite()) fail(ErrorKind::data, "feature file " + path.string() + ": non-finite values");
  return t;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "features");
  std::ofstream manifest(dir / "manifest.csv", std::ios::trunc);
  if (!manifest) fail(ErrorKind::io, "cannot write " + (dir / "manifest.csv").string());
  manifest << kManifestHeader << '\n';
  auto emit = [&](const DomainSet& set, const char* split) {
    for (const auto& d : set.domains) {
      for (const auto& e : d.examples) {
        const std::string rel = "features/" + e.example_id + ".bin";
        write_feature_file(dir / rel, e.features());
        manifest << e.example_id << ',' << rel << ',' << e.label << ',' << e.domain_id << ','
                 << split << '\n';
      }
    }
  };
  emit(corpus.train, "train");
  emit(corpus.dev, "dev");
  emit(corpus.eval, "eval");
}

std::vector<ManifestRow> read_manifest_rows(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::data, "missing manifest " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != kManifestHeader) {
    fail(ErrorKind::data, "manifest " + path.string() + ": expected header '" + kManifestHeader + "'");
  }
  std::vector<ManifestRow> rows;
  std::size_t row_no = 0;
  while (std::getline(is, line)) {
    ++row_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto where = [&] { return "manifest " + path.string() + " row " + std::to_string(row_no) + ": "; };
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cols.push_back(cell);
    if (cols.size() != 5) fail(ErrorKind::data, where() + "expected 5 columns, got " + std::to_string(cols.size()));
    ManifestRow row;
    row.row = row_no;
    row.example_id = cols[0];
    row.path = cols[1];
    if (row.example_id.empty()) fail(ErrorKind::data, where() + "empty example_id");
    if (cols[2] == "0") {
      row.label = kBonafide;
    } else if (cols[2] == "1") {
      row.label = kSpoof;
    } else {
      fail(ErrorKind::data, where() + "unknown label '" + cols[2] + "'");
    }
    try {
      std::size_t used = 0;
      row.domain_id = std::stoi(cols[3], &used);
      if (used != cols[3].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      fail(ErrorKind::data, where() + "bad domain_id '" + cols[3] + "'");
    }
    row.split = cols[4];
    if (row.split != "train" && row.split != "dev" && row.split != "eval") {
      fail(ErrorKind::data, where() + "unknown split '" + row.split + "'");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

Corpus load_manifest(const std::filesystem::path& path) {
  const auto rows = read_manifest_rows(path);
  const auto base = path.parent_path();
  std::unordered_set<std::string> seen;
  Corpus corpus;
  for (const auto& row : rows) {
    auto where = [&] { return "manifest " + path.string() + " row " + std::to_string(row.row) + ": "; };
    if (!seen.insert(row.example_id).second) {
      fail(ErrorKind::data, where() + "duplicate example_id '" + row.example_id + "'");
    }
    std::filesystem::path file = row.path;
    if (file.is_relative()) file = base / file;
    if (!std::filesystem::exists(file)) fail(ErrorKind::data, where() + "missing file " + file.string());
    DomainSet& set = row.split == "train" ? corpus.train : row.split == "dev" ? corpus.dev : corpus.eval;
    set.domain(row.domain_id)
        .examples.push_back({row.example_id, row.label, row.domain_id, std::make_shared<FeatureSource>(file)});
  }
  return corpus;
}

}  // namespace mldg
