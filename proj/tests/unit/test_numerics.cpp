#include <doctest.h>

#include <cmath>
#include <numbers>

#include <Eigen/LU>

#include "helpers.hpp"
#include "tpu/numerics.hpp"
#include "tpu/parallel.hpp"

using namespace tpu;
using tpu::test::vec;

TEST_CASE("solve_root: affine equation converges in one Newton step") {
  auto r = solve_root([](const Vector& x) -> Vector { return x.array() - 3.0; }, vec({0.0}));
  CHECK(r.x[0] == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(r.residual <= 1e-8);
}

TEST_CASE("solve_root: two-dimensional system reaches (2, 2)") {
  auto f = [](const Vector& x) -> Vector { return vec({x[0] * x[0] - 4.0, x[1] - x[0]}); };
  auto r = solve_root(f, vec({1.0, 0.0}));
  CHECK(r.x[0] == doctest::Approx(2.0).epsilon(1e-8));
  CHECK(r.x[1] == doctest::Approx(2.0).epsilon(1e-8));
  CHECK(f(r.x).cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("solve_root: x^2 + 1 has no real root") {
  auto f = [](const Vector& x) -> Vector { return vec({x[0] * x[0] + 1.0}); };
  try {
    solve_root(f, vec({0.5}));
    FAIL("expected an error");
  } catch (const NonConvergence& e) {
    CHECK(e.last_iterate().size() == 1);
    CHECK(e.residual() >= 1.0);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::SingularJacobian);
  }
}

TEST_CASE("solve_root: Broyden alone solves the same system") {
  RootConfig cfg;
  cfg.method = RootMethod::Broyden;
  auto f = [](const Vector& x) -> Vector { return vec({x[0] * x[0] - 4.0, x[1] - x[0]}); };
  auto r = solve_root(f, vec({1.5, 1.0}), cfg);
  CHECK(r.method_used == RootMethod::Broyden);
  CHECK(f(r.x).cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("solve_root on linear systems matches the direct solve") {
  Rng rng(3, 0);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix a(4, 4);
    for (int i = 0; i < 16; ++i) a.data()[i] = rng.normal();
    a += 4.0 * Matrix::Identity(4, 4);
    Vector b(4);
    for (int i = 0; i < 4; ++i) b[i] = rng.normal();
    auto r = solve_root([&](const Vector& x) -> Vector { return a * x - b; }, Vector::Zero(4));
    const Vector direct = a.partialPivLu().solve(b);
    CHECK((r.x - direct).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("fd_jacobian matches the analytic logistic score Jacobian") {
  Rng rng(11, 0);
  const int n = 50;
  Matrix w(n, 2);
  Vector y(n);
  for (int i = 0; i < n; ++i) {
    w(i, 0) = 1.0;
    w(i, 1) = rng.normal();
    y[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
  }
  auto score = [&](const Vector& t) -> Vector {
    const Vector eta = w * t;
    Vector s = Vector::Zero(2);
    for (int i = 0; i < n; ++i) s += (y[i] - 1.0 / (1.0 + std::exp(-eta[i]))) * w.row(i).transpose();
    return s;
  };
  for (int trial = 0; trial < 10; ++trial) {
    const Vector t = vec({rng.normal(), rng.normal()});
    const Matrix fd = fd_jacobian(score, t, score(t));
    Matrix an = Matrix::Zero(2, 2);
    const Vector eta = w * t;
    for (int i = 0; i < n; ++i) {
      const double p = 1.0 / (1.0 + std::exp(-eta[i]));
      an -= p * (1 - p) * w.row(i).transpose() * w.row(i);
    }
    CHECK((fd - an).cwiseAbs().maxCoeff() < 1e-4);
  }
}

TEST_CASE("gauss_hermite: low orders and moments") {
  const auto& r1 = gauss_hermite(1);
  CHECK(r1.nodes[0] == doctest::Approx(0.0));
  CHECK(r1.weights[0] == doctest::Approx(std::sqrt(std::numbers::pi)).epsilon(1e-14));
  const auto& r2 = gauss_hermite(2);
  CHECK(r2.weights.dot(r2.nodes.cwiseAbs2()) == doctest::Approx(std::sqrt(std::numbers::pi) / 2).epsilon(1e-13));
  const auto& r20 = gauss_hermite(20);
  CHECK(std::abs(r20.weights.dot(r20.nodes.array().pow(4).matrix()) - 3 * std::sqrt(std::numbers::pi) / 4) < 1e-10);
  for (int n : {1, 5, 30, 60}) {
    const auto& r = gauss_hermite(n);
    CHECK(std::abs(r.weights.sum() - std::sqrt(std::numbers::pi)) < 1e-10);
    CHECK((r.weights.array() > 0).all());
  }
}

TEST_CASE("gauss_hermite integrates random polynomials of degree <= 2n-1") {
  // int u^k e^{-u^2} = Gamma((k+1)/2) for even k, 0 for odd k
  Rng rng(5, 0);
  for (int n : {3, 10, 30}) {
    const auto& r = gauss_hermite(n);
    for (int trial = 0; trial < 5; ++trial) {
      const int deg = 2 * n - 1;
      std::vector<double> c(static_cast<std::size_t>(deg + 1));
      for (auto& v : c) v = rng.normal();
      double exact = 0.0, scale = 0.0;
      for (int k = 0; k <= deg; k += 2) {
        exact += c[static_cast<std::size_t>(k)] * std::tgamma((k + 1) / 2.0);
        scale += std::abs(c[static_cast<std::size_t>(k)]) * std::tgamma((k + 1) / 2.0);
      }
      double quad = 0.0;
      for (Eigen::Index j = 0; j < r.nodes.size(); ++j) {
        double p = 0.0;
        for (int k = deg; k >= 0; --k) p = p * r.nodes[j] + c[static_cast<std::size_t>(k)];
        quad += r.weights[j] * p;
      }
      CHECK(std::abs(quad - exact) <= 1e-9 * scale);
    }
  }
}

TEST_CASE("gaussian_kernel values and symmetry") {
  const double z1[] = {0.0};
  CHECK(gaussian_kernel(z1) == doctest::Approx(1.0 / std::sqrt(2 * std::numbers::pi)));
  const double p[] = {1.0}, m[] = {-1.0};
  CHECK(gaussian_kernel(p) == gaussian_kernel(m));
  const double z2[] = {0.0, 0.0};
  CHECK(gaussian_kernel(z2) == doctest::Approx(1.0 / (2 * std::numbers::pi)));
  CHECK(std::log(gaussian_kernel(p)) == doctest::Approx(log_gaussian_kernel(p)));
}

TEST_CASE("silverman_bandwidth: formula, scale equivariance and degenerate path") {
  // Sample with sd = 1 and IQR/1.34 > 1 so the sd branch is taken.
  Rng rng(9, 0);
  std::vector<double> s(200);
  for (auto& v : s) v = rng.normal();
  double mean = 0, sd = 0;
  for (double v : s) mean += v;
  mean /= 200;
  for (double v : s) sd += (v - mean) * (v - mean);
  sd = std::sqrt(sd / 199);
  for (auto& v : s) v = (v - mean) / sd;
  std::vector<double> sorted = s;
  const double iqr = quantile(sorted, 0.75) - quantile(sorted, 0.25);
  const double spread = std::min(1.0, iqr / 1.34);
  CHECK(silverman_bandwidth(s) == doctest::Approx(1.06 * spread * std::pow(200.0, -0.2)).epsilon(1e-12));
  std::vector<double> s2 = s;
  for (auto& v : s2) v *= 2;
  CHECK(silverman_bandwidth(s2) == doctest::Approx(2 * silverman_bandwidth(s)).epsilon(1e-12));
  std::vector<double> c(10, 3.0);
  bool degenerate = false;
  const double h = silverman_bandwidth(c, &degenerate);
  CHECK(degenerate);
  CHECK(h > 0.0);
  // reference value for unit spread at n = 200
  CHECK(1.06 * std::pow(200.0, -0.2) == doctest::Approx(0.3669).epsilon(1e-3));
}

TEST_CASE("solve_psd: identity, diagonal, random SPD and ridge") {
  Matrix b(2, 3);
  b << 1, 2, 3, 4, 5, 6;
  CHECK((solve_psd(Matrix::Identity(2, 2), b).x - b).cwiseAbs().maxCoeff() < 1e-14);
  Matrix d = Matrix::Zero(2, 2);
  d(0, 0) = 2;
  d(1, 1) = 4;
  const auto r = solve_psd(d, Matrix::Identity(2, 2));
  CHECK(r.x(0, 0) == doctest::Approx(0.5));
  CHECK(r.x(1, 1) == doctest::Approx(0.25));
  CHECK_FALSE(r.ridged);

  // 3x3 against the cofactor inverse.
  Rng rng(21, 0);
  for (int trial = 0; trial < 10; ++trial) {
    Matrix g(3, 3);
    for (int i = 0; i < 9; ++i) g.data()[i] = rng.normal();
    const Matrix a = g * g.transpose() + Matrix::Identity(3, 3);
    Matrix cof(3, 3);
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        const int r0 = (i + 1) % 3, r1 = (i + 2) % 3, c0 = (j + 1) % 3, c1 = (j + 2) % 3;
        cof(i, j) = a(r0, c0) * a(r1, c1) - a(r0, c1) * a(r1, c0);
      }
    }
    const double det = a.row(0).dot(cof.row(0));
    const Matrix inv = cof.transpose() / det;
    CHECK((solve_psd(a, Matrix::Identity(3, 3)).x - inv).cwiseAbs().maxCoeff() < 1e-10);
  }
  // 5x5 residual bound.
  Matrix g(5, 5);
  for (int i = 0; i < 25; ++i) g.data()[i] = rng.normal();
  const Matrix a5 = g * g.transpose() + 0.1 * Matrix::Identity(5, 5);
  Matrix b5(5, 2);
  for (int i = 0; i < 10; ++i) b5.data()[i] = rng.normal();
  CHECK((a5 * solve_psd(a5, b5).x - b5).cwiseAbs().maxCoeff() <= 1e-8 * b5.cwiseAbs().maxCoeff());

  Matrix sing(2, 2);
  sing << 1, 1, 1, 1;
  CHECK(solve_psd(sing, vec({1.0, 1.0})).ridged);
  Matrix asym(2, 2);
  asym << 1, 2, 0, 1;
  CHECK_THROWS_AS(solve_psd(asym, vec({1.0, 1.0})), Error);
}

TEST_CASE("sample_cov hand examples and PSD property") {
  Matrix two(2, 1);
  two << 0, 2;
  CHECK(sample_cov(two)(0, 0) == doctest::Approx(2.0));
  Matrix same = Matrix::Ones(5, 3);
  CHECK(sample_cov(same).cwiseAbs().maxCoeff() == 0.0);
  Matrix four(4, 2);
  four << 1, 0, 0, 1, -1, 0, 0, -1;
  const Matrix c = sample_cov(four);
  CHECK(c(0, 0) == doctest::Approx(2.0 / 3));
  CHECK(c(1, 1) == doctest::Approx(2.0 / 3));
  CHECK(c(0, 1) == doctest::Approx(0.0));
  CHECK_THROWS(sample_cov(Matrix::Ones(1, 2)));
  Rng rng(1, 1);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix rows(6, 4);
    for (int i = 0; i < 24; ++i) rows.data()[i] = rng.normal();
    const Matrix s = sample_cov(rows);
    CHECK(test::min_eigen(s) >= -1e-10 * s.trace());
  }
}

TEST_CASE("seeded_rng determinism, stream separation and uniform mean") {
  Rng a = seeded_rng(42, 7), b = seeded_rng(42, 7);
  for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());
  Rng c = seeded_rng(42, 1), d = seeded_rng(42, 2);
  int same = 0;
  for (int i = 0; i < 100; ++i) same += c.uniform() == d.uniform();
  CHECK(same == 0);
  Rng e = seeded_rng(42, 1);
  double m = 0;
  for (int i = 0; i < 100000; ++i) m += e.uniform();
  CHECK(std::abs(m / 1e5 - 0.5) < 0.01);
  Rng f = seeded_rng(1, 1);
  for (int i = 0; i < 1000; ++i) CHECK(f.index(7) < 7);
}

TEST_CASE("parallel_for visits every index and propagates errors") {
  std::vector<int> hit(100, 0);
  parallel_for(100, 4, [&](std::size_t i) { hit[i] += 1; });
  for (int h : hit) CHECK(h == 1);
  CHECK_THROWS_AS(parallel_for(10, 3, [](std::size_t i) {
                    if (i == 5) fail(ErrorCode::InvalidArgument, "boom");
                  }),
                  Error);
}
