#pragma once

#include <array>
#include <vector>

#include "dlct/tensor.hpp"

namespace dlct {

// Axis-aligned box in normalized [0,1] coordinates. Zero-area boxes are
// rejected at construction.
struct BoundingBox {
  double x_min = 0.0, y_min = 0.0, x_max = 0.0, y_max = 0.0;

  BoundingBox() = default;
  BoundingBox(double x0, double y0, double x1, double y1);

  double cx() const { return 0.5 * (x_min + x_max); }
  double cy() const { return 0.5 * (y_min + y_max); }
  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }

  // Strictly positive overlap area; boundary contact counts as zero.
  double overlap_area(const BoundingBox& other) const;
};

// Uniform tiling of the unit square; cell (i, j) is row i, column j.
struct GridLayout {
  int rows = 7;
  int cols = 7;

  GridLayout() = default;
  GridLayout(int r, int c);

  int cells() const { return rows * cols; }
  BoundingBox cell_box(int i, int j) const;
};

// Bipartite region<->grid adjacency with self-loops on every node. Node
// order: regions first, then grid cells row-major.
struct AlignmentGraph {
  int n_regions = 0;
  int n_grids = 0;
  std::vector<uint8_t> adj;  // (n_regions+n_grids)^2, symmetric

  int nodes() const { return n_regions + n_grids; }
  bool connected(int a, int b) const { return adj[static_cast<size_t>(a) * nodes() + b] != 0; }
  // Region-to-grid slice as a row-major [n_regions, n_grids] mask.
  std::vector<uint8_t> region_to_grid_mask() const;
  std::vector<uint8_t> grid_to_region_mask() const;

  static AlignmentGraph complete_bipartite(int n_regions, int n_grids);
};

AlignmentGraph build_alignment_graph(const std::vector<BoundingBox>& boxes, const GridLayout& layout);

// Sinusoidal grid positional encoding: row [PE_i ; PE_j], each half of size
// d_model/2 with interleaved sin/cos. Parameter-free constant.
Tensor grid_positional_encoding(const GridLayout& layout, int d_model);

// One sinusoidal embedding row for a scalar position at dimension dim.
void sinusoid_embed(double pos, int dim, double wavelength_base, double* out);

// Linear embedding of the 4 box corners by a learned [d_model, 4] matrix.
Tensor region_positional_encoding(const std::vector<BoundingBox>& boxes, const Tensor& w_emb);

// Center-form pairwise geometry: (log(max(|dx|,eps)/w_i), log(max(|dy|,eps)/h_i),
// log(w_i/w_j), log(h_i/h_j)) with eps = 1e-3.
std::array<double, 4> relative_geometry_raw(const BoundingBox& box_i, const BoundingBox& box_j);

// Constant [N_q, N_k, d_geom] tensor of sinusoidally embedded raw geometry;
// each raw component occupies d_geom/4 dims, wavelength base 1000.
Tensor relative_geometry_features(const std::vector<BoundingBox>& queries,
                                  const std::vector<BoundingBox>& keys, int d_geom);

// Projects embedded geometry to one positive scalar per head:
// ReLU(feat * w_g) floored at omega_floor so log stays finite.
// feats: [N_q, N_k, d_geom], w_g: [d_geom, heads] -> [heads, N_q, N_k].
Tensor relative_geometry_bias(const Tensor& feats, const Tensor& w_g, double omega_floor = 1e-6);

inline constexpr double kGeometryEps = 1e-3;
inline constexpr double kOmegaFloor = 1e-6;
inline constexpr int kGeometryDim = 64;
inline constexpr double kGeometryWavelengthBase = 1000.0;

}  // namespace dlct
