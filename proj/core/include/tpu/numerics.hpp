#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "tpu/error.hpp"

namespace tpu {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

enum class RootMethod { NewtonFd, Broyden };

struct RootConfig {
  double tol = 1e-8;  // sup-norm of the residual
  int max_iter = 100;
  RootMethod method = RootMethod::NewtonFd;
  // Newton falls back to Broyden when the finite-difference Jacobian is singular.
  bool broyden_fallback = true;
};

struct RootResult {
  Vector x;
  double residual = 0.0;
  int iterations = 0;
  int evaluations = 0;
  RootMethod method_used = RootMethod::NewtonFd;
};

using VectorFunction = std::function<Vector(const Vector&)>;

/// Solves f(x) = 0 starting from x0. Throws NonConvergence (with the last
/// iterate) when the cap is reached and Error{SingularJacobian} when the
/// Jacobian cannot be factored and no fallback is allowed.
RootResult solve_root(const VectorFunction& f, const Vector& x0, const RootConfig& cfg = {});

/// Forward-difference Jacobian of f at x; fx = f(x) is passed in to save one evaluation.
Matrix fd_jacobian(const VectorFunction& f, const Vector& x, const Vector& fx);

struct QuadratureRule {
  Vector nodes;
  Vector weights;
};

/// Physicists' Gauss-Hermite rule for weight exp(-u^2). Rules are cached per order.
const QuadratureRule& gauss_hermite(int n);

/// Product of standard normal densities.
double gaussian_kernel(std::span<const double> u);
double log_gaussian_kernel(std::span<const double> u);

struct Bandwidth {
  Vector h;
  bool degenerate = false;  // at least one coordinate fell back to the |mean| rule
};

/// Silverman's rule of thumb per column of `samples` (rows are observations).
Bandwidth silverman_bandwidth(const Matrix& samples);
double silverman_bandwidth(std::span<const double> sample, bool* degenerate = nullptr);

struct PsdSolve {
  Matrix x;
  bool ridged = false;
};

/// Solves A X = B for symmetric A. A diagonal ridge of 1e-10 tr(A)/dim is added
/// when A is singular within tolerance.
PsdSolve solve_psd(const Matrix& a, const Matrix& b);

/// Sample covariance of the rows (denominator rows - 1).
Matrix sample_cov(const Matrix& rows);

/// Empirical quantile with linear interpolation (type 7).
double quantile(std::vector<double> values, double p);

double normal_cdf(double x);

/// Deterministic generator keyed by (base_seed, stream_id). Distinct streams
/// are seeded through a splitmix64 mix of both keys.
class Rng {
 public:
  using result_type = std::uint64_t;

  Rng(std::uint64_t base_seed, std::uint64_t stream_id);

  static constexpr result_type min() { return std::mt19937_64::min(); }
  static constexpr result_type max() { return std::mt19937_64::max(); }
  result_type operator()() { return engine_(); }

  double uniform();  // (0, 1)
  double normal();
  double normal(double mean, double sd) { return mean + sd * normal(); }
  double exponential();
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline Rng seeded_rng(std::uint64_t base_seed, std::uint64_t stream_id) {
  return Rng(base_seed, stream_id);
}

}  // namespace tpu
