#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <sstream>

#include "dlct/ops.hpp"
#include "dlct/tensor.hpp"
#include "dlct/tensor_io.hpp"
#include "test_util.hpp"

using namespace dlct;
using dlct::testing::materialize_broadcast;
using dlct::testing::max_abs_diff;
using dlct::testing::random_tensor;

TEST_CASE("elementwise basics") {
  Tensor a = Tensor::from_data({3}, {-1.0, 0.0, 2.0});
  Tensor r = relu(a);
  CHECK(r.data()[0] == 0.0);
  CHECK(r.data()[1] == 0.0);
  CHECK(r.data()[2] == 2.0);

  Tensor s = add(Tensor::from_data({2}, {1.0, 2.0}), Tensor::from_data({2}, {3.0, 4.0}));
  CHECK(s.data()[0] == 4.0);
  CHECK(s.data()[1] == 6.0);

  Tensor l = log(Tensor::from_data({1}, {std::exp(1.0)}));
  CHECK(l.item() == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("elementwise error paths") {
  Tensor a = Tensor::from_data({2}, {1.0, 2.0});
  Tensor b = Tensor::from_data({3}, {1.0, 2.0, 3.0});
  CHECK_THROWS_AS(add(a, b), std::invalid_argument);

  Tensor bad = Tensor::from_data({3}, {1.0, -2.0, 3.0});
  try {
    log(bad);
    FAIL("expected domain error");
  } catch (const std::domain_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("log") != std::string::npos);
    CHECK(msg.find("index 1") != std::string::npos);
  }
}

TEST_CASE("matmul basics") {
  Tensor eye = Tensor::from_data({2, 2}, {1.0, 0.0, 0.0, 1.0});
  Tensor a = Tensor::from_data({2, 2}, {3.0, -1.0, 7.0, 0.5});
  CHECK(max_abs_diff(matmul(eye, a), a) == 0.0);

  Tensor m = Tensor::from_data({2, 2}, {1.0, 2.0, 3.0, 4.0});
  Tensor v = Tensor::from_data({2, 1}, {5.0, 6.0});
  Tensor out = matmul(m, v);
  CHECK(out.data()[0] == 17.0);
  CHECK(out.data()[1] == 39.0);

  CHECK_THROWS_AS(matmul(m, Tensor::zeros({3, 2})), std::invalid_argument);
}

TEST_CASE("matmul gradient of sum(A*B) equals ones x B^T") {
  Rng rng(11);
  Tensor a = random_tensor({3, 4}, rng, -1.0, 1.0, true);
  Tensor b = random_tensor({4, 2}, rng);
  auto f = [&]() { return sum_all(matmul(a, b)); };
  auto report = grad_check(f, a, 1e-5, 1e-4);
  CHECK(report.pass);
  // closed form: dA[i,k] = sum_j B[k,j]
  a.zero_grad();
  Tape tape;
  tape.backward(f());
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 4; ++k) {
      double expect = 0.0;
      for (int j = 0; j < 2; ++j) expect += b.data()[static_cast<size_t>(k * 2 + j)];
      CHECK(a.grad()[static_cast<size_t>(i * 4 + k)] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("batched matmul broadcasts batch dims") {
  Rng rng(5);
  Tensor a = random_tensor({3, 2, 4}, rng);
  Tensor b = random_tensor({4, 5}, rng);
  Tensor out = matmul(a, b);
  REQUIRE(out.shape() == Shape{3, 2, 5});
  for (int p = 0; p < 3; ++p) {
    for (int i = 0; i < 2; ++i) {
      for (int j = 0; j < 5; ++j) {
        double expect = 0.0;
        for (int k = 0; k < 4; ++k) {
          expect += a.data()[static_cast<size_t>(p * 8 + i * 4 + k)] * b.data()[static_cast<size_t>(k * 5 + j)];
        }
        CHECK(out.data()[static_cast<size_t>(p * 10 + i * 5 + j)] == doctest::Approx(expect).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("softmax examples") {
  Tensor u = softmax(Tensor::from_data({3}, {0.0, 0.0, 0.0}), -1);
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  Tensor stable = softmax(Tensor::from_data({2}, {1000.0, 0.0}), -1);
  CHECK(stable.data()[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(stable.data()[1] >= 0.0);
  CHECK(std::isfinite(stable.data()[0]));
  CHECK(std::isfinite(stable.data()[1]));

  Tensor h = softmax(Tensor::from_data({3}, {1.0, 2.0, 3.0}), -1);
  CHECK(h.data()[0] == doctest::Approx(0.09003057317038046).epsilon(1e-12));
  CHECK(h.data()[1] == doctest::Approx(0.24472847105479767).epsilon(1e-12));
  CHECK(h.data()[2] == doctest::Approx(0.66524095577482190).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and stay positive") {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const int64_t r = 1 + rng.uniform_int(4);
    const int64_t c = 1 + rng.uniform_int(6);
    Tensor x = random_tensor({r, c}, rng, -30.0, 30.0);
    Tensor y = softmax(x, -1);
    for (int64_t i = 0; i < r; ++i) {
      double sum = 0.0;
      for (int64_t j = 0; j < c; ++j) {
        const double v = y.data()[static_cast<size_t>(i * c + j)];
        CHECK(v > 0.0);
        sum += v;
      }
      CHECK(std::fabs(sum - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("softmax over a non-terminal axis") {
  Rng rng(3);
  Tensor x = random_tensor({2, 3, 4}, rng);
  Tensor y = softmax(x, 1);
  for (int i = 0; i < 2; ++i) {
    for (int k = 0; k < 4; ++k) {
      double sum = 0.0;
      for (int j = 0; j < 3; ++j) sum += y.data()[static_cast<size_t>(i * 12 + j * 4 + k)];
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("layer_norm examples") {
  Tensor gain = Tensor::from_data({4}, {1.0, 1.0, 1.0, 1.0});
  Tensor bias = Tensor::zeros({4});

  Tensor constant = layer_norm(Tensor::full({1, 4}, 3.25), gain, bias);
  for (double v : constant.data()) CHECK(v == 0.0);

  Tensor g2 = Tensor::from_data({2}, {1.0, 1.0});
  Tensor b2 = Tensor::zeros({2});
  Tensor pm = layer_norm(Tensor::from_data({1, 2}, {1.0, -1.0}), g2, b2);
  CHECK(pm.data()[0] == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(pm.data()[1] == doctest::Approx(-1.0).epsilon(1e-4));

  Tensor zero_gain = Tensor::zeros({4});
  Tensor b_const = Tensor::full({4}, 0.7);
  Tensor out = layer_norm(Tensor::from_data({1, 4}, {5.0, -2.0, 0.1, 9.0}), zero_gain, b_const);
  for (double v : out.data()) CHECK(v == 0.7);
}

TEST_CASE("backward linearity and accumulation") {
  Tensor x = Tensor::from_data({3}, {0.5, -2.0, 1.5}, true);
  {
    Tape tape;
    Tensor loss = sum_all(x);
    tape.backward(loss);
    for (double g : x.grad()) CHECK(g == 1.0);
    // second sweep doubles leaf grads exactly
    tape.backward(loss);
    for (double g : x.grad()) CHECK(g == 2.0);
  }
  x.zero_grad();
  {
    Tape tape;
    Tensor loss = sum_all(mul(x, x));
    tape.backward(loss);
    for (int i = 0; i < 3; ++i) {
      CHECK(x.grad()[static_cast<size_t>(i)] == doctest::Approx(2.0 * x.data()[static_cast<size_t>(i)]).epsilon(1e-15));
    }
  }
}

TEST_CASE("backward accumulates across tapes") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  for (int k = 0; k < 2; ++k) {
    Tape tape;
    tape.backward(sum_all(x));
  }
  for (double g : x.grad()) CHECK(g == 2.0);
}

TEST_CASE("backward rejects non-scalar loss") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tape tape;
  Tensor y = add(x, x);
  CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("grad_check exact for linear f with dyadic step") {
  Tensor x = Tensor::from_data({3}, {0.5, 0.25, -1.0}, true);
  const double h = std::ldexp(1.0, -17);
  auto report = grad_check([&]() { return sum_all(x); }, x, h, 1e-12);
  CHECK(report.pass);
  CHECK(report.max_rel_err == 0.0);
}

TEST_CASE("grad_check softmax-then-pick") {
  Rng rng(7);
  Tensor x = random_tensor({1, 5}, rng, -2.0, 2.0, true);
  auto f = [&]() { return sum_all(pick(softmax(x, -1), {2})); };
  auto report = grad_check(f, x, 1e-5, 1e-6);
  CHECK(report.pass);
}

TEST_CASE("grad_check flags non-deterministic functions") {
  Tensor x = Tensor::from_data({1}, {1.0}, true);
  int calls = 0;
  auto f = [&]() {
    ++calls;
    return scale(x, static_cast<double>(calls));
  };
  CHECK_THROWS_AS(grad_check(f, x), std::runtime_error);
}

TEST_CASE("gradient suite: every op on randomized shapes") {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed * 7919 + 1);
    const int64_t m = 1 + rng.uniform_int(3);
    const int64_t k = 1 + rng.uniform_int(3);
    const int64_t n = 1 + rng.uniform_int(3);

    Tensor a = random_tensor({m, k}, rng, -1.0, 1.0, true);
    Tensor b = random_tensor({m, k}, rng, -1.0, 1.0, true);
    Tensor brow = random_tensor({k}, rng, -1.0, 1.0, true);
    Tensor w = random_tensor({k, n}, rng, -1.0, 1.0, true);
    Tensor pos = random_tensor({m, k}, rng, 0.1, 2.0, true);
    Tensor away = random_tensor({m, k}, rng, 0.2, 1.0, true);  // keep relu/clamp off their kinks
    Tensor gain = random_tensor({k}, rng, 0.5, 1.5, true);
    Tensor bias = random_tensor({k}, rng, -0.5, 0.5, true);
    Tensor weight = random_tensor({m, n}, rng);  // constant mixing weights

    auto mix = [&](Tensor t, const Tensor& wt) { return sum_all(mul(t, wt)); };
    Tensor wmk = random_tensor({m, k}, rng);
    Tensor wm = random_tensor({m}, rng);

    const Tensor leaves_arr[] = {a, b, brow, w, pos, away, gain, bias};
    std::span<const Tensor> all_leaves(leaves_arr, 8);

    struct Case {
      const char* name;
      std::function<Tensor()> f;
    };
    Rng drng(seed + 17);
    const Case cases[] = {
        {"add", [&]() { return mix(add(a, b), wmk); }},
        {"add_bcast", [&]() { return mix(add(a, brow), wmk); }},
        {"sub", [&]() { return mix(sub(a, b), wmk); }},
        {"mul", [&]() { return mix(mul(a, b), wmk); }},
        {"mul_bcast", [&]() { return mix(mul(a, brow), wmk); }},
        {"scale", [&]() { return mix(scale(a, -1.7), wmk); }},
        {"add_scalar", [&]() { return mix(add_scalar(a, 0.3), wmk); }},
        {"relu", [&]() { return mix(relu(away), wmk); }},
        {"exp", [&]() { return mix(dlct::exp(a), wmk); }},
        {"log", [&]() { return mix(dlct::log(pos), wmk); }},
        {"clamp_min", [&]() { return mix(clamp_min(away, 0.1), wmk); }},
        {"matmul", [&]() { return mix(matmul(a, w), weight); }},
        {"permute", [&]() { return mix(permute(a, {1, 0}), Tensor::full({k, m}, 0.5)); }},
        {"reshape", [&]() { return mix(reshape(a, {k * m}), Tensor::full({k * m}, 0.25)); }},
        {"concat",
         [&]() {
           const Tensor parts[] = {a, b};
           return mix(concat(std::span<const Tensor>(parts, 2), 0), Tensor::full({2 * m, k}, 0.5));
         }},
        {"rows", [&]() { return mix(rows(a, {0, m - 1, 0}), Tensor::full({3, k}, 0.4)); }},
        {"pick", [&]() { return sum_all(pick(a, std::vector<int64_t>(static_cast<size_t>(m), k - 1))); }},
        {"softmax", [&]() { return mix(softmax(a, -1), wmk); }},
        {"softmax_axis0", [&]() { return mix(softmax(a, 0), wmk); }},
        {"log_softmax", [&]() { return mix(log_softmax_last(a), wmk); }},
        {"layer_norm", [&]() { return mix(layer_norm(a, gain, bias), wmk); }},
        {"sum_all", [&]() { return sum_all(a); }},
        {"mean_all", [&]() { return mean_all(a); }},
        {"dropout",
         [&]() {
           Rng local(12345);  // fixed stream keeps f deterministic
           return mix(dropout(a, 0.4, local, true), wmk);
         }},
    };
    for (const auto& c : cases) {
      auto report = grad_check(c.f, all_leaves, 1e-5, 1e-4);
      if (!report.pass) {
        MESSAGE("op ", c.name, " seed ", seed, " worst ", report.worst);
      }
      REQUIRE(report.pass);
    }
    (void)wm;
  }
}

TEST_CASE("broadcasting matches materialized broadcast") {
  for (uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed + 100);
    Tensor a = random_tensor({2, 3, 4}, rng);
    const Shape bshapes[] = {{4}, {3, 4}, {1, 4}, {2, 1, 4}, {2, 3, 1}, {1, 3, 1}};
    for (const Shape& bs : bshapes) {
      Tensor b = random_tensor(bs, rng);
      Tensor direct = mul(a, b);
      Tensor expanded = mul(materialize_broadcast(a, direct.shape()), materialize_broadcast(b, direct.shape()));
      CHECK(max_abs_diff(direct, expanded) == 0.0);
    }
  }
}

TEST_CASE("forward determinism is bitwise") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    Tensor x = random_tensor({4, 6}, rng);
    Tensor g = random_tensor({6}, rng, 0.5, 1.5);
    Tensor b = random_tensor({6}, rng);
    Tensor y = layer_norm(softmax(matmul(x, random_tensor({6, 6}, rng)), -1), g, b);
    return std::vector<double>(y.data().begin(), y.data().end());
  };
  auto r1 = run(42);
  auto r2 = run(42);
  CHECK(std::memcmp(r1.data(), r2.data(), r1.size() * sizeof(double)) == 0);
}

TEST_CASE("DLT1 round trip and corruption") {
  Rng rng(9);
  Tensor t = random_tensor({2, 3, 5}, rng, -10.0, 10.0);
  std::ostringstream os;
  write_dlt1(os, t);
  std::string bytes = os.str();
  {
    std::istringstream is(bytes);
    Tensor back = read_dlt1(is);
    REQUIRE(back.shape() == t.shape());
    for (int64_t i = 0; i < t.numel(); ++i) {
      CHECK(back.data()[static_cast<size_t>(i)] ==
            static_cast<double>(static_cast<float>(t.data()[static_cast<size_t>(i)])));
    }
  }
  bytes[0] = 'X';
  std::istringstream bad(bytes);
  CHECK_THROWS_WITH_AS(read_dlt1(bad), doctest::Contains("magic"), std::runtime_error);
}

TEST_CASE("finite checks police NaN/Inf when enabled") {
  set_finite_checks(false);
  Tensor big = Tensor::full({2}, 1e308);
  Tensor silent = dlct::exp(big);  // overflows to inf silently
  CHECK(std::isinf(silent.data()[0]));
  set_finite_checks(true);
  CHECK_THROWS_AS(dlct::exp(big), std::domain_error);
  set_finite_checks(false);
}
