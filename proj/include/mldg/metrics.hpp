#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace mldg {

// Higher score means more bonafide. Labels follow data.hpp (0 bonafide,
// 1 spoof).
struct ScoreRecord {
  std::string example_id;
  double score = 0.0;
  int label = 0;

  bool operator==(const ScoreRecord&) const = default;
};

using ScoreSet = std::vector<ScoreRecord>;

// Operating point at decision threshold t: accept as bonafide iff score >= t.
//   FAR = fraction of spoof accepted, FRR = fraction of bonafide rejected.
struct DetPoint {
  double threshold = 0.0;  // +-inf at the two endpoints
  double far = 0.0;
  double frr = 0.0;
  double probit_far = 0.0;
  double probit_frr = 0.0;
};

// Points ordered by rising threshold: FAR non-increasing, FRR
// non-decreasing, from (1, 0) at -inf to (0, 1) at +inf.
struct DetCurve {
  std::vector<DetPoint> points;
  bool probit = false;
};

struct EerResult {
  double eer = 0.0;
  double threshold = 0.0;
};

// EER where the FAR and FRR sequences cross, interpolated linearly between
// the bracketing threshold points when no point has FAR == FRR.
EerResult eer(const ScoreSet& scores);
DetCurve det_curve(const ScoreSet& scores, bool probit);
// FAR == FRR crossing of a curve, same interpolation rule as eer().
EerResult det_crossing(const DetCurve& curve);

// Standard-normal quantile with the argument clamped to [1e-6, 1 - 1e-6].
double probit(double p);

struct SeedAggregate {
  std::vector<double> values;
  double mean = 0.0;
  double std = 0.0;  // sample (n - 1) standard deviation
};

SeedAggregate aggregate_seeds(const std::vector<double>& values);

// "example_id score label" per line, scores printed round-trip exact.
void write_score_file(const std::filesystem::path& path, const ScoreSet& scores);
ScoreSet read_score_file(const std::filesystem::path& path);
// Tab-separated: threshold far frr probit_far probit_frr.
void write_det_file(const std::filesystem::path& path, const DetCurve& curve);

}  // namespace mldg
