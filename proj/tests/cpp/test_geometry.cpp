#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "dlct/geometry.hpp"
#include "dlct/ops.hpp"
#include "test_util.hpp"

using namespace dlct;
using dlct::testing::max_abs_diff;
using dlct::testing::random_tensor;

namespace {

BoundingBox random_box(Rng& rng, double grid_step = 0.0) {
  for (;;) {
    double x0 = rng.uniform(0.0, 0.9);
    double y0 = rng.uniform(0.0, 0.9);
    double x1 = rng.uniform(x0 + 0.05, 1.0);
    double y1 = rng.uniform(y0 + 0.05, 1.0);
    if (grid_step > 0.0) {
      auto snap = [grid_step](double v) { return std::round(v / grid_step) * grid_step; };
      x0 = snap(x0);
      y0 = snap(y0);
      x1 = snap(x1);
      y1 = snap(y1);
    }
    if (x0 < x1 && y0 < y1) return BoundingBox(x0, y0, x1, y1);
  }
}

}  // namespace

TEST_CASE("bounding box rejects zero area") {
  CHECK_THROWS_AS(BoundingBox(0.2, 0.1, 0.2, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(BoundingBox(0.2, 0.5, 0.4, 0.5), std::invalid_argument);
  BoundingBox b(0.1, 0.2, 0.5, 0.8);
  CHECK(b.cx() == doctest::Approx(0.3));
  CHECK(b.cy() == doctest::Approx(0.5));
  CHECK(b.width() == doctest::Approx(0.4));
  CHECK(b.height() == doctest::Approx(0.6));
}

TEST_CASE("grid cells tile the unit square and satisfy box invariants") {
  for (const GridLayout layout : {GridLayout(2, 2), GridLayout(4, 4), GridLayout(7, 7), GridLayout(3, 5)}) {
    double total = 0.0;
    for (int i = 0; i < layout.rows; ++i) {
      for (int j = 0; j < layout.cols; ++j) {
        const BoundingBox c = layout.cell_box(i, j);  // constructor enforces invariants
        total += c.area();
        for (int i2 = 0; i2 < layout.rows; ++i2) {
          for (int j2 = 0; j2 < layout.cols; ++j2) {
            if (i2 == i && j2 == j) continue;
            CHECK(c.overlap_area(layout.cell_box(i2, j2)) == 0.0);
          }
        }
      }
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("grid positional encoding basics") {
  CHECK_THROWS_AS(grid_positional_encoding(GridLayout(2, 2), 6), std::invalid_argument);

  Tensor pe = grid_positional_encoding(GridLayout(3, 4), 16);
  REQUIRE(pe.shape() == Shape{12, 16});
  // cell (0, 0): both halves alternate sin(0)=0, cos(0)=1
  for (int k = 0; k < 16; k += 2) {
    CHECK(pe.data()[static_cast<size_t>(k)] == 0.0);
    CHECK(pe.data()[static_cast<size_t>(k + 1)] == 1.0);
  }
  // first half encodes the row index only
  for (int j1 = 0; j1 < 4; ++j1) {
    for (int j2 = 0; j2 < 4; ++j2) {
      for (int i = 0; i < 3; ++i) {
        for (int k = 0; k < 8; ++k) {
          CHECK(pe.data()[static_cast<size_t>((i * 4 + j1) * 16 + k)] ==
                pe.data()[static_cast<size_t>((i * 4 + j2) * 16 + k)]);
        }
      }
    }
  }
}

TEST_CASE("grid positional encoding matches the sinusoid formula at 7x7 d=512") {
  Tensor pe = grid_positional_encoding(GridLayout(7, 7), 512);
  REQUIRE(pe.shape() == Shape{49, 512});
  const int half = 256;
  for (int i : {0, 3, 6}) {
    for (int j : {0, 2, 5}) {
      const double* row = pe.data().data() + static_cast<size_t>((i * 7 + j) * 512);
      for (int k = 0; k < half / 2; k += 17) {
        const double denom = std::pow(10000.0, 2.0 * k / static_cast<double>(half));
        CHECK(row[2 * k] == doctest::Approx(std::sin(i / denom)).epsilon(1e-14));
        CHECK(row[2 * k + 1] == doctest::Approx(std::cos(i / denom)).epsilon(1e-14));
        CHECK(row[half + 2 * k] == doctest::Approx(std::sin(j / denom)).epsilon(1e-14));
        CHECK(row[half + 2 * k + 1] == doctest::Approx(std::cos(j / denom)).epsilon(1e-14));
      }
    }
  }
}

TEST_CASE("grid positional encoding rows are distinct at 7x7") {
  Tensor pe = grid_positional_encoding(GridLayout(7, 7), 4);
  std::set<std::vector<double>> rows;
  for (int c = 0; c < 49; ++c) {
    rows.insert(std::vector<double>(pe.data().begin() + c * 4, pe.data().begin() + (c + 1) * 4));
  }
  CHECK(rows.size() == 49);
}

TEST_CASE("region positional encoding") {
  std::vector<BoundingBox> boxes = {BoundingBox(0.1, 0.2, 0.4, 0.6), BoundingBox(0.1, 0.2, 0.4, 0.6),
                                    BoundingBox(0.5, 0.5, 0.9, 0.8)};
  Tensor zero_w = Tensor::zeros({8, 4});
  Tensor enc0 = region_positional_encoding(boxes, zero_w);
  REQUIRE(enc0.shape() == Shape{3, 8});
  for (double v : enc0.data()) CHECK(v == 0.0);

  Rng rng(21);
  Tensor w = random_tensor({8, 4}, rng, -1.0, 1.0, true);
  Tensor enc = region_positional_encoding(boxes, w);
  for (int d = 0; d < 8; ++d) {
    CHECK(enc.data()[static_cast<size_t>(d)] == enc.data()[static_cast<size_t>(8 + d)]);
  }

  Tensor mixer = random_tensor({3, 8}, rng);
  auto f = [&]() { return sum_all(mul(region_positional_encoding(boxes, w), mixer)); };
  CHECK(grad_check(f, w, 1e-5, 1e-4).pass);
}

TEST_CASE("relative geometry raw values") {
  BoundingBox b(0.3, 0.3, 0.7, 0.7);  // center (0.5, 0.5), w=h=0.4
  auto same = relative_geometry_raw(b, b);
  CHECK(same[0] == doctest::Approx(std::log(1e-3 / 0.4)).epsilon(1e-12));
  CHECK(same[1] == doctest::Approx(std::log(1e-3 / 0.4)).epsilon(1e-12));
  CHECK(same[2] == 0.0);
  CHECK(same[3] == 0.0);

  // centers (0.5,0.5) w=h=0.2 vs (0.7,0.6) w=0.4 h=0.1
  BoundingBox bi(0.4, 0.4, 0.6, 0.6);
  BoundingBox bj(0.5, 0.55, 0.9, 0.65);
  auto v = relative_geometry_raw(bi, bj);
  CHECK(v[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(v[1] == doctest::Approx(std::log(0.5)).epsilon(1e-12));
  CHECK(v[2] == doctest::Approx(std::log(0.5)).epsilon(1e-12));
  CHECK(v[3] == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // swapping i and j flips the sign of the size ratios and swaps denominators
  auto r = relative_geometry_raw(bj, bi);
  CHECK(r[2] == doctest::Approx(-v[2]).epsilon(1e-12));
  CHECK(r[3] == doctest::Approx(-v[3]).epsilon(1e-12));
  CHECK(v[0] == doctest::Approx(std::log(0.2 / bi.width())).epsilon(1e-12));
  CHECK(r[0] == doctest::Approx(std::log(0.2 / bj.width())).epsilon(1e-12));
}

TEST_CASE("relative geometry embedding and bias") {
  Rng rng(33);
  std::vector<BoundingBox> regions;
  for (int i = 0; i < 6; ++i) regions.push_back(random_box(rng));

  Tensor feats = relative_geometry_features(regions, regions, kGeometryDim);
  REQUIRE(feats.shape() == Shape{6, 6, 64});

  Tensor w0 = Tensor::zeros({64, 8});
  Tensor bias0 = relative_geometry_bias(feats, w0);
  REQUIRE(bias0.shape() == Shape{8, 6, 6});
  for (double v : bias0.data()) CHECK(v == kOmegaFloor);

  // constant omega cancels under softmax: uniform over keys
  Tensor logw = dlct::log(bias0);
  Tensor sm = softmax(reshape(logw, {8 * 6, 6}), -1);
  for (double v : sm.data()) CHECK(v == doctest::Approx(1.0 / 6.0).epsilon(1e-12));

  Tensor w = random_tensor({64, 4}, rng, 0.01, 0.3, true);
  Tensor mixer = random_tensor({4, 6, 6}, rng);
  auto f = [&]() { return sum_all(mul(relative_geometry_bias(feats, w), mixer)); };
  CHECK(grad_check(f, w, 1e-5, 1e-4).pass);
}

TEST_CASE("alignment graph hand cases") {
  GridLayout quad(2, 2);
  {
    AlignmentGraph g = build_alignment_graph({BoundingBox(0, 0, 1, 1)}, quad);
    for (int c = 0; c < 4; ++c) CHECK(g.connected(0, 1 + c));
  }
  {
    AlignmentGraph g = build_alignment_graph({BoundingBox(0, 0, 0.5, 0.5)}, quad);
    CHECK(g.connected(0, 1));        // cell (0,0)
    CHECK_FALSE(g.connected(0, 2));  // boundary contact with (0,1)
    CHECK_FALSE(g.connected(0, 3));  // boundary contact with (1,0)
    CHECK_FALSE(g.connected(0, 4));
  }
  {
    AlignmentGraph g = build_alignment_graph({}, quad);
    CHECK(g.n_regions == 0);
    for (int v = 0; v < g.nodes(); ++v) {
      CHECK(g.connected(v, v));
      int neighbours = 0;
      for (int u = 0; u < g.nodes(); ++u) neighbours += g.connected(v, u) ? 1 : 0;
      CHECK(neighbours == 1);
    }
  }
}

TEST_CASE("alignment graph properties over random box sets") {
  for (uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(seed * 31 + 7);
    GridLayout layout(2 + static_cast<int>(rng.uniform_int(3)), 2 + static_cast<int>(rng.uniform_int(3)));
    std::vector<BoundingBox> boxes;
    const int nb = static_cast<int>(rng.uniform_int(5));
    for (int i = 0; i < nb; ++i) boxes.push_back(random_box(rng));
    AlignmentGraph g = build_alignment_graph(boxes, layout);
    const int n = g.nodes();
    for (int a = 0; a < n; ++a) {
      CHECK(g.connected(a, a));
      bool any = false;
      for (int b = 0; b < n; ++b) {
        CHECK(g.connected(a, b) == g.connected(b, a));
        any = any || g.connected(a, b);
        if (a != b && ((a < g.n_regions) == (b < g.n_regions))) {
          CHECK_FALSE(g.connected(a, b));  // bipartite between levels
        }
      }
      CHECK(any);
    }
    for (int r = 0; r < g.n_regions; ++r) {
      for (int i = 0; i < layout.rows; ++i) {
        for (int j = 0; j < layout.cols; ++j) {
          const bool expect = boxes[static_cast<size_t>(r)].overlap_area(layout.cell_box(i, j)) > 0.0;
          CHECK(g.connected(r, g.n_regions + i * layout.cols + j) == expect);
        }
      }
    }
  }
}

TEST_CASE("relative geometry is exactly translation invariant on a dyadic grid") {
  Rng rng(4);
  const double step = 1.0 / 4096.0;
  for (int trial = 0; trial < 200; ++trial) {
    BoundingBox a = random_box(rng, step);
    BoundingBox b = random_box(rng, step);
    const double tx = rng.uniform_int(64) * step;
    const double ty = rng.uniform_int(64) * step;
    BoundingBox a2(a.x_min + tx, a.y_min + ty, a.x_max + tx, a.y_max + ty);
    BoundingBox b2(b.x_min + tx, b.y_min + ty, b.x_max + tx, b.y_max + ty);
    auto v1 = relative_geometry_raw(a, b);
    auto v2 = relative_geometry_raw(a2, b2);
    for (int c = 0; c < 4; ++c) CHECK(v1[static_cast<size_t>(c)] == v2[static_cast<size_t>(c)]);
  }
}

TEST_CASE("uniform scaling leaves relative geometry unchanged away from the clamp") {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    BoundingBox a = random_box(rng);
    BoundingBox b = random_box(rng);
    // keep centre offsets safely above the clamp at every scale tried
    if (std::fabs(a.cx() - b.cx()) < 0.05 || std::fabs(a.cy() - b.cy()) < 0.05) continue;
    for (double s : {0.25, 0.5, 2.0}) {
      BoundingBox a2(a.x_min * s, a.y_min * s, a.x_max * s, a.y_max * s);
      BoundingBox b2(b.x_min * s, b.y_min * s, b.x_max * s, b.y_max * s);
      auto v1 = relative_geometry_raw(a, b);
      auto v2 = relative_geometry_raw(a2, b2);
      for (int c = 0; c < 4; ++c) {
        CHECK(v1[static_cast<size_t>(c)] == doctest::Approx(v2[static_cast<size_t>(c)]).epsilon(1e-12));
      }
    }
  }
}
