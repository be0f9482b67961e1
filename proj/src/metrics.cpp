#include "mldg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <boost/math/distributions/normal.hpp>

#include "mldg/data.hpp"
#include "mldg/error.hpp"

namespace mldg {

namespace {

void validate(const ScoreSet& scores) {
  std::size_t bona = 0, spoof = 0;
  for (const auto& r : scores) {
    if (!std::isfinite(r.score)) fail(ErrorKind::data, "score set: non-finite score for '" + r.example_id + "'");
    if (r.label == kBonafide) {
      ++bona;
    } else if (r.label == kSpoof) {
      ++spoof;
    } else {
      fail(ErrorKind::data, "score set: bad label " + std::to_string(r.label) + " for '" + r.example_id + "'");
    }
  }
  if (bona == 0 || spoof == 0) {
    fail(ErrorKind::data, "score set: need both classes for EER (bonafide " + std::to_string(bona) +
                              ", spoof " + std::to_string(spoof) + ")");
  }
}

// One point per distinct threshold plus the two infinite endpoints.
std::vector<DetPoint> sweep(const ScoreSet& scores) {
  validate(scores);
  std::vector<std::pair<double, int>> sorted;
  sorted.reserve(scores.size());
  double n_bona = 0, n_spoof = 0;
  for (const auto& r : scores) {
    sorted.emplace_back(r.score, r.label);
    (r.label == kBonafide ? n_bona : n_spoof) += 1;
  }
  std::sort(sorted.begin(), sorted.end());

  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<DetPoint> pts;
  pts.push_back({-inf, 1.0, 0.0});
  // At threshold t = sorted[i].first, rejected = everything strictly below t.
  std::size_t rejected_bona = 0, rejected_spoof = 0;
  for (std::size_t i = 0; i < sorted.size();) {
    const double t = sorted[i].first;
    pts.push_back({t, (n_spoof - static_cast<double>(rejected_spoof)) / n_spoof,
                   static_cast<double>(rejected_bona) / n_bona});
    while (i < sorted.size() && sorted[i].first == t) {
      (sorted[i].second == kBonafide ? rejected_bona : rejected_spoof) += 1;
      ++i;
    }
  }
  pts.push_back({inf, 0.0, 1.0});
  return pts;
}

EerResult crossing(const std::vector<DetPoint>& pts) {
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double d = pts[i].far - pts[i].frr;
    if (d > 0.0) continue;
    if (d == 0.0 || i == 0) return {pts[i].far, pts[i].threshold};
    const DetPoint& a = pts[i - 1];
    const DetPoint& b = pts[i];
    const double da = a.far - a.frr;
    const double lambda = da / (da - d);
    const double value = a.far + lambda * (b.far - a.far);
    double threshold;
    if (std::isfinite(a.threshold) && std::isfinite(b.threshold)) {
      threshold = a.threshold + lambda * (b.threshold - a.threshold);
    } else {
      threshold = std::isfinite(a.threshold) ? a.threshold : b.threshold;
    }
    return {value, threshold};
  }
  // Unreachable: the last point always has FAR - FRR = -1.
  fail(ErrorKind::state, "eer: no crossing found");
}

}  // namespace

EerResult eer(const ScoreSet& scores) { return crossing(sweep(scores)); }

double probit(double p) {
  static const boost::math::normal_distribution<double> standard;
  const double clamped = std::clamp(p, 1e-6, 1.0 - 1e-6);
  return boost::math::quantile(standard, clamped);
}

DetCurve det_curve(const ScoreSet& scores, bool use_probit) {
  DetCurve curve{sweep(scores), use_probit};
  if (use_probit) {
    for (auto& p : curve.points) {
      p.probit_far = probit(p.far);
      p.probit_frr = probit(p.frr);
    }
  }
  return curve;
}

EerResult det_crossing(const DetCurve& curve) {
  if (curve.points.empty()) fail(ErrorKind::data, "det_crossing: empty curve");
  return crossing(curve.points);
}

SeedAggregate aggregate_seeds(const std::vector<double>& values) {
  if (values.size() < 2) {
    fail(ErrorKind::data, "aggregate_seeds: need >= 2 values, got " + std::to_string(values.size()));
  }
  // Sorted copy so the result does not depend on seed order.
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  const double mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : sorted) ss += (v - mean) * (v - mean);
  return {values, mean, std::sqrt(ss / (n - 1.0))};
}

void write_score_file(const std::filesystem::path& path, const ScoreSet& scores) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorKind::io, "cannot write " + path.string());
  os.precision(17);
  for (const auto& r : scores) os << r.example_id << ' ' << r.score << ' ' << r.label << '\n';
}

ScoreSet read_score_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::data, "missing score file " + path.string());
  ScoreSet out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    ScoreRecord r;
    if (!(ss >> r.example_id >> r.score >> r.label)) {
      fail(ErrorKind::data, "score file " + path.string() + " line " + std::to_string(line_no) + ": parse error");
    }
    out.push_back(std::move(r));
  }
  return out;
}

void write_det_file(const std::filesystem::path& path, const DetCurve& curve) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorKind::io, "cannot write " + path.string());
  os.precision(17);
  os << "threshold\tfar\tfrr\tprobit_far\tprobit_frr\n";
  for (const auto& p : curve.points) {
    const double pf = curve.probit ? p.probit_far : probit(p.far);
    const double pr = curve.probit ? p.probit_frr : probit(p.frr);
    os << p.threshold << '\t' << p.far << '\t' << p.frr << '\t' << pf << '\t' << pr << '\n';
  }
}

}  // namespace mldg
