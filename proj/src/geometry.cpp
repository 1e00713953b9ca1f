#include "dlct/geometry.hpp"

#include <cmath>
#include <stdexcept>

#include "dlct/ops.hpp"

namespace dlct {

BoundingBox::BoundingBox(double x0, double y0, double x1, double y1)
    : x_min(x0), y_min(y0), x_max(x1), y_max(y1) {
  if (!(x_min < x_max) || !(y_min < y_max)) {
    throw std::invalid_argument("BoundingBox: x_min < x_max and y_min < y_max required (zero-area boxes rejected)");
  }
}

double BoundingBox::overlap_area(const BoundingBox& other) const {
  const double w = std::min(x_max, other.x_max) - std::max(x_min, other.x_min);
  const double h = std::min(y_max, other.y_max) - std::max(y_min, other.y_min);
  if (w <= 0.0 || h <= 0.0) return 0.0;
  return w * h;
}

GridLayout::GridLayout(int r, int c) : rows(r), cols(c) {
  if (r <= 0 || c <= 0) throw std::invalid_argument("GridLayout: counts must be positive");
}

BoundingBox GridLayout::cell_box(int i, int j) const {
  if (i < 0 || i >= rows || j < 0 || j >= cols) throw std::out_of_range("GridLayout: cell index out of range");
  return BoundingBox(static_cast<double>(j) / cols, static_cast<double>(i) / rows,
                     static_cast<double>(j + 1) / cols, static_cast<double>(i + 1) / rows);
}

std::vector<uint8_t> AlignmentGraph::region_to_grid_mask() const {
  std::vector<uint8_t> m(static_cast<size_t>(n_regions) * n_grids);
  for (int r = 0; r < n_regions; ++r) {
    for (int g = 0; g < n_grids; ++g) {
      m[static_cast<size_t>(r) * n_grids + g] = connected(r, n_regions + g) ? 1 : 0;
    }
  }
  return m;
}

std::vector<uint8_t> AlignmentGraph::grid_to_region_mask() const {
  std::vector<uint8_t> m(static_cast<size_t>(n_grids) * n_regions);
  for (int g = 0; g < n_grids; ++g) {
    for (int r = 0; r < n_regions; ++r) {
      m[static_cast<size_t>(g) * n_regions + r] = connected(n_regions + g, r) ? 1 : 0;
    }
  }
  return m;
}

AlignmentGraph AlignmentGraph::complete_bipartite(int n_regions, int n_grids) {
  AlignmentGraph g;
  g.n_regions = n_regions;
  g.n_grids = n_grids;
  const int n = g.nodes();
  g.adj.assign(static_cast<size_t>(n) * n, 0);
  for (int v = 0; v < n; ++v) g.adj[static_cast<size_t>(v) * n + v] = 1;
  for (int r = 0; r < n_regions; ++r) {
    for (int c = 0; c < n_grids; ++c) {
      g.adj[static_cast<size_t>(r) * n + (n_regions + c)] = 1;
      g.adj[static_cast<size_t>(n_regions + c) * n + r] = 1;
    }
  }
  return g;
}

AlignmentGraph build_alignment_graph(const std::vector<BoundingBox>& boxes, const GridLayout& layout) {
  AlignmentGraph g;
  g.n_regions = static_cast<int>(boxes.size());
  g.n_grids = layout.cells();
  const int n = g.nodes();
  g.adj.assign(static_cast<size_t>(n) * n, 0);
  for (int v = 0; v < n; ++v) g.adj[static_cast<size_t>(v) * n + v] = 1;
  for (int r = 0; r < g.n_regions; ++r) {
    for (int i = 0; i < layout.rows; ++i) {
      for (int j = 0; j < layout.cols; ++j) {
        const int cell = g.n_regions + i * layout.cols + j;
        if (boxes[static_cast<size_t>(r)].overlap_area(layout.cell_box(i, j)) > 0.0) {
          g.adj[static_cast<size_t>(r) * n + cell] = 1;
          g.adj[static_cast<size_t>(cell) * n + r] = 1;
        }
      }
    }
  }
  return g;
}

void sinusoid_embed(double pos, int dim, double wavelength_base, double* out) {
  // pairs (sin, cos) over dim/2 frequencies: pos / base^(2k/dim)
  for (int k = 0; 2 * k < dim; ++k) {
    const double freq = std::pow(wavelength_base, -2.0 * k / static_cast<double>(dim));
    out[2 * k] = std::sin(pos * freq);
    if (2 * k + 1 < dim) out[2 * k + 1] = std::cos(pos * freq);
  }
}

Tensor grid_positional_encoding(const GridLayout& layout, int d_model) {
  if (d_model % 4 != 0) {
    throw std::invalid_argument("grid_positional_encoding: d_model must be divisible by 4, got " +
                                std::to_string(d_model));
  }
  const int half = d_model / 2;
  std::vector<double> data(static_cast<size_t>(layout.cells()) * d_model);
  std::vector<double> row_pe(static_cast<size_t>(half));
  std::vector<double> col_pe(static_cast<size_t>(half));
  for (int i = 0; i < layout.rows; ++i) {
    sinusoid_embed(static_cast<double>(i), half, 10000.0, row_pe.data());
    for (int j = 0; j < layout.cols; ++j) {
      sinusoid_embed(static_cast<double>(j), half, 10000.0, col_pe.data());
      double* out = data.data() + static_cast<size_t>(i * layout.cols + j) * d_model;
      for (int k = 0; k < half; ++k) out[k] = row_pe[static_cast<size_t>(k)];
      for (int k = 0; k < half; ++k) out[half + k] = col_pe[static_cast<size_t>(k)];
    }
  }
  return Tensor::from_data({layout.cells(), d_model}, std::move(data));
}

Tensor region_positional_encoding(const std::vector<BoundingBox>& boxes, const Tensor& w_emb) {
  if (w_emb.rank() != 2 || w_emb.shape()[1] != 4) {
    throw std::invalid_argument("region_positional_encoding: w_emb must be [d_model, 4]");
  }
  std::vector<double> corners;
  corners.reserve(boxes.size() * 4);
  for (const BoundingBox& b : boxes) {
    corners.push_back(b.x_min);
    corners.push_back(b.y_min);
    corners.push_back(b.x_max);
    corners.push_back(b.y_max);
  }
  Tensor b = Tensor::from_data({static_cast<int64_t>(boxes.size()), 4}, std::move(corners));
  return matmul(b, transpose_last2(w_emb));
}

std::array<double, 4> relative_geometry_raw(const BoundingBox& box_i, const BoundingBox& box_j) {
  const double dx = std::max(std::fabs(box_i.cx() - box_j.cx()), kGeometryEps);
  const double dy = std::max(std::fabs(box_i.cy() - box_j.cy()), kGeometryEps);
  return {std::log(dx / box_i.width()), std::log(dy / box_i.height()),
          std::log(box_i.width() / box_j.width()), std::log(box_i.height() / box_j.height())};
}

Tensor relative_geometry_features(const std::vector<BoundingBox>& queries,
                                  const std::vector<BoundingBox>& keys, int d_geom) {
  if (d_geom % 8 != 0) {
    throw std::invalid_argument("relative_geometry_features: d_geom must be divisible by 8");
  }
  const int comp_dim = d_geom / 4;
  const int64_t nq = static_cast<int64_t>(queries.size());
  const int64_t nk = static_cast<int64_t>(keys.size());
  std::vector<double> data(static_cast<size_t>(nq * nk * d_geom));
  for (int64_t i = 0; i < nq; ++i) {
    for (int64_t j = 0; j < nk; ++j) {
      const auto raw = relative_geometry_raw(queries[static_cast<size_t>(i)], keys[static_cast<size_t>(j)]);
      double* out = data.data() + static_cast<size_t>((i * nk + j) * d_geom);
      for (int c = 0; c < 4; ++c) {
        sinusoid_embed(raw[static_cast<size_t>(c)], comp_dim, kGeometryWavelengthBase, out + c * comp_dim);
      }
    }
  }
  return Tensor::from_data({nq, nk, d_geom}, std::move(data));
}

Tensor relative_geometry_bias(const Tensor& feats, const Tensor& w_g, double omega_floor) {
  if (feats.rank() != 3) throw std::invalid_argument("relative_geometry_bias: feats must be [N_q, N_k, d_geom]");
  if (w_g.rank() != 2 || w_g.shape()[0] != feats.shape()[2]) {
    throw std::invalid_argument("relative_geometry_bias: w_g must be [d_geom, heads]");
  }
  for (double v : feats.data()) {
    if (!std::isfinite(v)) throw std::domain_error("relative_geometry_bias: non-finite geometry features");
  }
  const int64_t nq = feats.shape()[0];
  const int64_t nk = feats.shape()[1];
  const int64_t dg = feats.shape()[2];
  const int64_t heads = w_g.shape()[1];
  Tensor flat = reshape(feats, {nq * nk, dg});
  Tensor scores = matmul(flat, w_g);                       // [nq*nk, heads]
  Tensor cube = reshape(scores, {nq, nk, heads});
  Tensor per_head = permute(cube, {2, 0, 1});              // [heads, nq, nk]
  return clamp_min(relu(per_head), omega_floor);
}

}  // namespace dlct
