#include "tpu/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <numbers>
#include <optional>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/LU>

namespace tpu {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::NonConvergence: return "NonConvergence";
    case ErrorCode::SingularJacobian: return "SingularJacobian";
    case ErrorCode::NotSymmetric: return "NotSymmetric";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::DegenerateSample: return "DegenerateSample";
    case ErrorCode::EmptyStratum: return "EmptyStratum";
    case ErrorCode::OverSampledStratum: return "OverSampledStratum";
    case ErrorCode::SchemaMismatch: return "SchemaMismatch";
    case ErrorCode::InconsistentMissingness: return "InconsistentMissingness";
    case ErrorCode::NonPositiveWeight: return "NonPositiveWeight";
    case ErrorCode::InsufficientCompleteCases: return "InsufficientCompleteCases";
    case ErrorCode::RankDeficient: return "RankDeficient";
    case ErrorCode::Separation: return "Separation";
    case ErrorCode::NoEvents: return "NoEvents";
    case ErrorCode::ZeroDensity: return "ZeroDensity";
    case ErrorCode::UnderflowDenominator: return "UnderflowDenominator";
    case ErrorCode::TooManyFailures: return "TooManyFailures";
    case ErrorCode::SingularMiddleBlock: return "SingularMiddleBlock";
    case ErrorCode::StudyAborted: return "StudyAborted";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

namespace {

double sup_norm(const Vector& v) {
  return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff();
}

bool all_finite(const Vector& v) { return v.allFinite(); }

// Factorization of the Jacobian; nullopt when numerically singular.
std::optional<Vector> newton_step(const Matrix& jac, const Vector& fx) {
  if (!jac.allFinite()) return std::nullopt;
  Eigen::FullPivLU<Matrix> lu(jac);
  if (!lu.isInvertible()) return std::nullopt;
  if (jac.rows() > 1 && lu.rcond() < 1e-14) return std::nullopt;
  Vector step = lu.solve(-fx);
  if (!all_finite(step)) return std::nullopt;
  return step;
}

struct LineSearchOutcome {
  Vector x;
  Vector fx;
  bool improved;
};

// Backtracking on the residual norm. Returns the last trial when no step
// reduces the residual so the outer loop can keep moving.
LineSearchOutcome backtrack(const VectorFunction& f, const Vector& x, const Vector& fx,
                            const Vector& step, int& evals) {
  const double f0 = fx.norm();
  double t = 1.0;
  Vector best_x = x;
  Vector best_f = fx;
  for (int k = 0; k < 30; ++k, t *= 0.5) {
    Vector xt = x + t * step;
    Vector ft = f(xt);
    ++evals;
    if (!all_finite(ft)) continue;
    if (ft.norm() <= (1.0 - 1e-4 * t) * f0) return {std::move(xt), std::move(ft), true};
    if (k == 0 || ft.norm() < best_f.norm()) {
      best_x = xt;
      best_f = ft;
    }
  }
  return {best_x, best_f, false};
}

RootResult run_broyden(const VectorFunction& f, const Vector& x0, const RootConfig& cfg) {
  RootResult out;
  out.method_used = RootMethod::Broyden;
  Vector x = x0;
  Vector fx = f(x);
  int evals = 1;
  if (!all_finite(fx)) fail(ErrorCode::InvalidArgument, "function not finite at starting point");
  Matrix jac = fd_jacobian(f, x, fx);
  evals += static_cast<int>(x.size());
  for (int iter = 0; iter < cfg.max_iter; ++iter) {
    if (sup_norm(fx) <= cfg.tol) {
      out.x = x;
      out.residual = sup_norm(fx);
      out.iterations = iter;
      out.evaluations = evals;
      return out;
    }
    auto step = newton_step(jac, fx);
    if (!step) {
      jac = fd_jacobian(f, x, fx);
      evals += static_cast<int>(x.size());
      step = newton_step(jac, fx);
      if (!step) fail(ErrorCode::SingularJacobian, "Broyden Jacobian is singular");
    }
    auto ls = backtrack(f, x, fx, *step, evals);
    Vector dx = ls.x - x;
    Vector df = ls.fx - fx;
    const double dx2 = dx.squaredNorm();
    if (dx2 > 0.0) jac += ((df - jac * dx) * dx.transpose()) / dx2;
    if (!ls.improved) {
      jac = fd_jacobian(f, ls.x, ls.fx);
      evals += static_cast<int>(x.size());
    }
    x = std::move(ls.x);
    fx = std::move(ls.fx);
  }
  if (sup_norm(fx) <= cfg.tol) {
    out.x = x;
    out.residual = sup_norm(fx);
    out.iterations = cfg.max_iter;
    out.evaluations = evals;
    return out;
  }
  throw NonConvergence("Broyden iteration cap reached", x, sup_norm(fx));
}

RootResult run_newton(const VectorFunction& f, const Vector& x0, const RootConfig& cfg) {
  RootResult out;
  out.method_used = RootMethod::NewtonFd;
  Vector x = x0;
  Vector fx = f(x);
  int evals = 1;
  if (!all_finite(fx)) fail(ErrorCode::InvalidArgument, "function not finite at starting point");
  for (int iter = 0; iter < cfg.max_iter; ++iter) {
    if (sup_norm(fx) <= cfg.tol) {
      out.x = x;
      out.residual = sup_norm(fx);
      out.iterations = iter;
      out.evaluations = evals;
      return out;
    }
    Matrix jac = fd_jacobian(f, x, fx);
    evals += static_cast<int>(x.size());
    auto step = newton_step(jac, fx);
    if (!step) {
      if (cfg.broyden_fallback) {
        RootResult fb = run_broyden(f, x0, cfg);
        fb.evaluations += evals;
        return fb;
      }
      fail(ErrorCode::SingularJacobian, "finite-difference Jacobian is singular");
    }
    auto ls = backtrack(f, x, fx, *step, evals);
    x = std::move(ls.x);
    fx = std::move(ls.fx);
  }
  if (sup_norm(fx) <= cfg.tol) {
    out.x = x;
    out.residual = sup_norm(fx);
    out.iterations = cfg.max_iter;
    out.evaluations = evals;
    return out;
  }
  throw NonConvergence("Newton iteration cap reached", x, sup_norm(fx));
}

}  // namespace

Matrix fd_jacobian(const VectorFunction& f, const Vector& x, const Vector& fx) {
  const double root_eps = std::sqrt(std::numeric_limits<double>::epsilon());
  Matrix jac(fx.size(), x.size());
  Vector xh = x;
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    const double h = root_eps * std::max(std::abs(x[j]), 1.0);
    xh[j] = x[j] + h;
    const double dh = xh[j] - x[j];  // exactly representable step
    jac.col(j) = (f(xh) - fx) / dh;
    xh[j] = x[j];
  }
  return jac;
}

RootResult solve_root(const VectorFunction& f, const Vector& x0, const RootConfig& cfg) {
  require(cfg.tol > 0.0, ErrorCode::InvalidArgument, "root tolerance must be positive");
  require(cfg.max_iter >= 1, ErrorCode::InvalidArgument, "max_iter must be at least 1");
  if (cfg.method == RootMethod::Broyden) return run_broyden(f, x0, cfg);
  return run_newton(f, x0, cfg);
}

namespace {

QuadratureRule build_gauss_hermite(int n) {
  // Golub-Welsch eigenvalues as starting points, then Newton polishing on the
  // orthonormal Hermite recurrence so that small tail weights keep full
  // relative precision.
  QuadratureRule rule;
  rule.nodes.resize(n);
  rule.weights.resize(n);
  if (n == 1) {
    rule.nodes[0] = 0.0;
    rule.weights[0] = std::sqrt(std::numbers::pi);
    return rule;
  }
  Matrix jacobi = Matrix::Zero(n, n);
  for (int k = 1; k < n; ++k) {
    const double b = std::sqrt(0.5 * k);
    jacobi(k, k - 1) = b;
    jacobi(k - 1, k) = b;
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(jacobi, Eigen::EigenvaluesOnly);
  const double pim4 = std::pow(std::numbers::pi, -0.25);
  for (int i = 0; i < n; ++i) {
    double x = eig.eigenvalues()[i];
    double dp = 1.0;
    for (int it = 0; it < 20; ++it) {
      double p1 = pim4;
      double p2 = 0.0;
      for (int j = 1; j <= n; ++j) {
        const double p3 = p2;
        p2 = p1;
        p1 = x * std::sqrt(2.0 / j) * p2 - std::sqrt(static_cast<double>(j - 1) / j) * p3;
      }
      dp = std::sqrt(2.0 * n) * p2;
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) <= 1e-15 * std::max(1.0, std::abs(x))) break;
    }
    // Recompute derivative at the polished node.
    double p1 = pim4;
    double p2 = 0.0;
    for (int j = 1; j <= n; ++j) {
      const double p3 = p2;
      p2 = p1;
      p1 = x * std::sqrt(2.0 / j) * p2 - std::sqrt(static_cast<double>(j - 1) / j) * p3;
    }
    dp = std::sqrt(2.0 * n) * p2;
    rule.nodes[i] = x;
    rule.weights[i] = 2.0 / (dp * dp);
  }
  // Enforce exact antisymmetry of the nodes.
  for (int i = 0; i < n / 2; ++i) {
    const double a = 0.5 * (rule.nodes[n - 1 - i] - rule.nodes[i]);
    const double w = 0.5 * (rule.weights[i] + rule.weights[n - 1 - i]);
    rule.nodes[i] = -a;
    rule.nodes[n - 1 - i] = a;
    rule.weights[i] = w;
    rule.weights[n - 1 - i] = w;
  }
  if (n % 2 == 1) rule.nodes[n / 2] = 0.0;
  return rule;
}

}  // namespace

const QuadratureRule& gauss_hermite(int n) {
  require(n >= 1, ErrorCode::InvalidArgument, "quadrature order must be >= 1");
  static std::mutex mu;
  static std::map<int, QuadratureRule> cache;
  std::lock_guard lock(mu);
  auto it = cache.find(n);
  if (it == cache.end()) it = cache.emplace(n, build_gauss_hermite(n)).first;
  return it->second;
}

double log_gaussian_kernel(std::span<const double> u) {
  constexpr double log_norm = -0.91893853320467274178;  // -log(sqrt(2 pi))
  double s = 0.0;
  for (double v : u) s += log_norm - 0.5 * v * v;
  return s;
}

double gaussian_kernel(std::span<const double> u) { return std::exp(log_gaussian_kernel(u)); }

double quantile(std::vector<double> values, double p) {
  require(!values.empty(), ErrorCode::InvalidArgument, "quantile of empty sample");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

double silverman_bandwidth(std::span<const double> sample, bool* degenerate) {
  const auto m = sample.size();
  require(m >= 2, ErrorCode::InvalidArgument, "bandwidth needs at least two observations");
  double mean = 0.0;
  for (double v : sample) mean += v;
  mean /= static_cast<double>(m);
  double ss = 0.0;
  for (double v : sample) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(m - 1));
  std::vector<double> copy(sample.begin(), sample.end());
  const double iqr = (quantile(copy, 0.75) - quantile(copy, 0.25)) / 1.34;
  const double factor = 1.06 * std::pow(static_cast<double>(m), -0.2);
  double spread = 0.0;
  if (sd > 0.0 && iqr > 0.0) {
    spread = std::min(sd, iqr);
  } else {
    spread = std::max(sd, iqr);
  }
  if (degenerate) *degenerate = false;
  if (!(spread > 0.0)) {
    if (degenerate) *degenerate = true;
    return factor * std::abs(mean) + 1e-8;
  }
  return factor * spread;
}

Bandwidth silverman_bandwidth(const Matrix& samples) {
  Bandwidth bw;
  bw.h.resize(samples.cols());
  for (Eigen::Index j = 0; j < samples.cols(); ++j) {
    std::vector<double> col(samples.rows());
    for (Eigen::Index i = 0; i < samples.rows(); ++i) col[i] = samples(i, j);
    bool deg = false;
    bw.h[j] = silverman_bandwidth(col, &deg);
    bw.degenerate = bw.degenerate || deg;
  }
  return bw;
}

PsdSolve solve_psd(const Matrix& a, const Matrix& b) {
  require(a.rows() == a.cols(), ErrorCode::DimensionMismatch, "solve_psd: A must be square");
  require(a.rows() == b.rows(), ErrorCode::DimensionMismatch, "solve_psd: row mismatch");
  const double scale = 1.0 + a.cwiseAbs().maxCoeff();
  require((a - a.transpose()).cwiseAbs().maxCoeff() <= 1e-10 * scale, ErrorCode::NotSymmetric,
          "solve_psd: matrix is not symmetric");
  PsdSolve out;
  const Eigen::Index d = a.rows();
  if (d == 0) {
    out.x = Matrix(0, b.cols());
    return out;
  }
  Eigen::LDLT<Matrix> ldlt(a);
  bool singular = ldlt.info() != Eigen::Success;
  if (!singular) {
    const Vector diag = ldlt.vectorD().cwiseAbs();
    const double dmax = diag.maxCoeff();
    singular = !(dmax > 0.0) || diag.minCoeff() <= 1e-12 * dmax;
  }
  if (!singular) {
    out.x = ldlt.solve(b);
    const double bnorm = b.cwiseAbs().maxCoeff();
    if ((a * out.x - b).cwiseAbs().maxCoeff() <= 1e-8 * std::max(bnorm, 1e-300)) return out;
  }
  double ridge = 1e-10 * a.trace() / static_cast<double>(d);
  if (!(ridge > 0.0)) ridge = 1e-10;
  Matrix ar = a;
  ar.diagonal().array() += ridge;
  Eigen::LDLT<Matrix> ridged(ar);
  out.x = ridged.solve(b);
  out.ridged = true;
  return out;
}

Matrix sample_cov(const Matrix& rows) {
  require(rows.rows() >= 2, ErrorCode::InvalidArgument, "sample_cov needs at least two rows");
  const Eigen::RowVectorXd mean = rows.colwise().mean();
  const Matrix centered = rows.rowwise() - mean;
  Matrix cov = (centered.transpose() * centered) / static_cast<double>(rows.rows() - 1);
  return 0.5 * (cov + cov.transpose());
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

namespace {

std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

Rng::Rng(std::uint64_t base_seed, std::uint64_t stream_id) {
  const std::uint64_t a = splitmix64(base_seed);
  const std::uint64_t b = splitmix64(stream_id ^ 0xd1b54a32d192ed03ULL);
  const std::uint64_t c = splitmix64(a ^ (b << 1));
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32),
                    static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(c >> 32)};
  engine_.seed(seq);
}

double Rng::uniform() {
  for (;;) {
    const double u = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    if (u > 0.0) return u;
  }
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Marsaglia polar method; independent of the standard library's distribution code.
  double u, v, s;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double m = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * m;
  has_spare_ = true;
  return u * m;
}

double Rng::exponential() { return -std::log(uniform()); }

std::size_t Rng::index(std::size_t n) {
  require(n > 0, ErrorCode::InvalidArgument, "index range must be nonempty");
  const std::uint64_t range = n;
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % range;
  for (;;) {
    const std::uint64_t r = engine_();
    if (r < limit) return static_cast<std::size_t>(r % range);
  }
}

}  // namespace tpu
