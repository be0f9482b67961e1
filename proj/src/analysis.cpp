#include "mldg/analysis.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "mldg/error.hpp"
#include "mldg/linalg.hpp"

namespace mldg {

const char* to_string(FactorKind kind) {
  switch (kind) {
    case FactorKind::A: return "A";
    case FactorKind::B: return "B";
    case FactorKind::AB: return "AB";
  }
  return "?";
}

namespace {

FactorKind factor_from_string(const std::string& s) {
  if (s == "A") return FactorKind::A;
  if (s == "B") return FactorKind::B;
  if (s == "AB") return FactorKind::AB;
  fail(ErrorKind::data, "heatmap grid: unknown factor '" + s + "'");
}

}  // namespace

const std::vector<double>& AdapterSpectra::spectrum(FactorKind kind) const {
  switch (kind) {
    case FactorKind::A: return a;
    case FactorKind::B: return b;
    case FactorKind::AB: return ab;
  }
  return a;
}

double SvdReport::mean_effective_rank(FactorKind kind) const {
  if (entries.empty()) return 0.0;
  double s = 0.0;
  for (const auto& e : entries) {
    s += kind == FactorKind::A ? e.effective_rank_a : kind == FactorKind::B ? e.effective_rank_b : e.effective_rank_ab;
  }
  return s / static_cast<double>(entries.size());
}

int effective_rank(std::span<const double> sv, double tau) {
  if (sv.empty()) return 0;
  const double top = *std::max_element(sv.begin(), sv.end());
  if (top <= 0.0) return 0;
  return static_cast<int>(std::count_if(sv.begin(), sv.end(), [&](double s) { return s >= tau * top; }));
}

SvdReport svd_adapters(std::span<const LoraAdapter> adapters, double tau) {
  if (adapters.empty()) fail(ErrorKind::data, "svd_adapters: no adapters to analyze");
  if (!(tau > 0.0 && tau < 1.0)) fail(ErrorKind::config, "svd_adapters: tau must lie in (0, 1)");
  SvdReport report;
  report.tau = tau;
  for (const auto& ad : adapters) {
    AdapterSpectra s;
    s.layer = ad.layer_index;
    s.target = ad.target;
    s.rank = ad.rank;
    s.a = svd(ad.A).S;
    s.b = svd(ad.B).S;
    s.ab = svd(adapter_delta(ad)).S;
    s.effective_rank_a = effective_rank(s.a, tau);
    s.effective_rank_b = effective_rank(s.b, tau);
    s.effective_rank_ab = effective_rank(s.ab, tau);
    report.entries.push_back(std::move(s));
  }
  std::stable_sort(report.entries.begin(), report.entries.end(), [](const auto& x, const auto& y) {
    return std::pair(x.layer, static_cast<int>(x.target)) < std::pair(y.layer, static_cast<int>(y.target));
  });
  return report;
}

SvdReport svd_adapters(const Checkpoint& checkpoint, double tau) {
  const Model model = model_from_checkpoint(checkpoint);
  const auto adapters = model.encoder.adapters(model.params);
  if (adapters.empty()) fail(ErrorKind::data, "svd_adapters: checkpoint has no LoRA adapters");
  return svd_adapters(adapters, tau);
}

std::vector<HeatmapGrid> export_heatmap_grid(const SvdReport& report) {
  if (report.entries.empty()) fail(ErrorKind::data, "export_heatmap_grid: empty report");
  std::size_t rows = 0;
  for (const auto& e : report.entries) rows = std::max<std::size_t>(rows, static_cast<std::size_t>(e.rank));
  std::vector<HeatmapGrid> grids;
  for (FactorKind kind : {FactorKind::A, FactorKind::B, FactorKind::AB}) {
    HeatmapGrid g;
    g.factor = kind;
    g.cells.assign(rows, std::vector<double>(report.entries.size(), 0.0));
    for (std::size_t c = 0; c < report.entries.size(); ++c) {
      const auto& e = report.entries[c];
      g.columns.push_back("layer" + std::to_string(e.layer) + "." + to_string(e.target));
      const auto& sv = e.spectrum(kind);
      for (std::size_t i = 0; i < std::min(rows, sv.size()); ++i) g.cells[i][c] = sv[i];
    }
    grids.push_back(std::move(g));
  }
  return grids;
}

void write_heatmap_grids(const std::filesystem::path& path, const std::vector<HeatmapGrid>& grids) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorKind::io, "cannot write " + path.string());
  os.precision(17);
  for (const auto& g : grids) {
    os << "# factor " << to_string(g.factor) << '\n' << "index";
    for (const auto& c : g.columns) os << ',' << c;
    os << '\n';
    for (std::size_t i = 0; i < g.rows(); ++i) {
      os << i;
      for (double v : g.cells[i]) os << ',' << v;
      os << '\n';
    }
  }
}

std::vector<HeatmapGrid> read_heatmap_grids(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::data, "missing grid file " + path.string());
  std::vector<HeatmapGrid> grids;
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
  };
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line.rfind("# factor ", 0) == 0) {
      HeatmapGrid g;
      g.factor = factor_from_string(line.substr(9));
      if (!std::getline(is, line)) fail(ErrorKind::data, "grid file: missing header row");
      auto header = split(line);
      if (header.empty() || header[0] != "index") fail(ErrorKind::data, "grid file: bad header row");
      g.columns.assign(header.begin() + 1, header.end());
      grids.push_back(std::move(g));
      continue;
    }
    if (grids.empty()) fail(ErrorKind::data, "grid file: data before factor header");
    auto cells = split(line);
    HeatmapGrid& g = grids.back();
    if (cells.size() != g.columns.size() + 1) fail(ErrorKind::data, "grid file: ragged row");
    std::vector<double> row;
    for (std::size_t i = 1; i < cells.size(); ++i) row.push_back(std::stod(cells[i]));
    g.cells.push_back(std::move(row));
  }
  return grids;
}

}  // namespace mldg
