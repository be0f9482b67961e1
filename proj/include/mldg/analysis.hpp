#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mldg/checkpoint.hpp"
#include "mldg/model.hpp"

namespace mldg {

enum class FactorKind { A, B, AB };
const char* to_string(FactorKind kind);

// Spectra of one adapter; each list sorted descending.
struct AdapterSpectra {
  int layer = 0;
  AdaptTarget target = AdaptTarget::query;
  int rank = 0;
  std::vector<double> a;
  std::vector<double> b;
  std::vector<double> ab;  // spectrum of scale * A * B
  int effective_rank_a = 0;
  int effective_rank_b = 0;
  int effective_rank_ab = 0;

  const std::vector<double>& spectrum(FactorKind kind) const;
};

// Ordered by (layer, target).
struct SvdReport {
  double tau = 0.01;
  std::vector<AdapterSpectra> entries;

  double mean_effective_rank(FactorKind kind) const;
};

SvdReport svd_adapters(std::span<const LoraAdapter> adapters, double tau = 0.01);
SvdReport svd_adapters(const Checkpoint& checkpoint, double tau = 0.01);

// Number of singular values >= tau * sigma_1 (0 for an all-zero spectrum).
int effective_rank(std::span<const double> singular_values, double tau);

// Singular-value index x adapter grid for one factor kind. Columns follow
// the report order and are labelled "layer<l>.<target>". Rows run to the
// largest adapter rank; shorter spectra are zero-padded and the product
// spectrum is cut at the rank, beyond which it vanishes.
struct HeatmapGrid {
  FactorKind factor = FactorKind::A;
  std::vector<std::string> columns;
  std::vector<std::vector<double>> cells;  // cells[index][column]

  std::size_t rows() const { return cells.size(); }
  std::size_t cols() const { return columns.size(); }
  bool operator==(const HeatmapGrid&) const = default;
};

std::vector<HeatmapGrid> export_heatmap_grid(const SvdReport& report);

// Plain-text tables, one block per factor:
//   # factor <A|B|AB>
//   index,<column>,<column>,...
//   0,<value>,...
void write_heatmap_grids(const std::filesystem::path& path, const std::vector<HeatmapGrid>& grids);
std::vector<HeatmapGrid> read_heatmap_grids(const std::filesystem::path& path);

}  // namespace mldg
