#pragma once

#include <functional>
#include <span>
#include <variant>
#include <vector>

#include "tpu/data_model.hpp"
#include "tpu/numerics.hpp"

namespace tpu {

/// F(x | z) evaluated at one z: atoms and probabilities (weights sum to 1).
struct DiscreteLaw {
  Matrix support;  // m x q
  Vector weights;  // m
};

/// Nadaraya-Watson estimate of F(x | z) over the Phase-II subsample with a
/// product Gaussian kernel on the selected conditioning columns of z.
struct KernelCondDist {
  Matrix support;              // m x q, subsample x values
  Matrix conditioning;         // m x k, subsample z[cond_cols]
  std::vector<int> cond_cols;
  Vector bandwidth;            // k
  bool bandwidth_degenerate = false;
};

/// X | z ~ N(coef' (1, z[cols]), tau^2) independently per x component.
struct NormalLinearCondDist {
  std::vector<int> regressor_cols;
  Matrix coef;  // (1 + k) x q
  Vector tau;   // q
  bool degenerate = false;
};

enum class KnownLaw {
  /// (X, Z) bivariate normal with standard margins, X* = X + e.
  BivariateNormal,
  /// (X, log Z) bivariate normal with standard margins, X* = max(X, limit) + e.
  DetectionLimit,
};

/// Analytic conditional law of a scalar X given (X*, Z).
struct KnownCondDist {
  KnownLaw law = KnownLaw::BivariateNormal;
  double rho_xz = 0.0;   // Corr(X, Z) (or Corr(X, log Z)); 0 when there is no Z
  double sigma_e = 1.0;  // sd of the auxiliary noise
  int xstar_col = 0;
  int z_col = -1;        // -1 when X has no cheap-covariate parent
  double limit = -1.0;   // detection limit for DetectionLimit
};

/// X is a deterministic copy of z[cols]: a point mass at the observed value.
struct PointMassCondDist {
  std::vector<int> z_cols;
};

using CondDist = std::variant<KernelCondDist, NormalLinearCondDist, KnownCondDist, PointMassCondDist>;

constexpr int kDefaultHermiteOrder = 30;

/// Builds the kernel estimator on the subsample; bandwidth defaults to
/// Silverman's rule per conditioning column.
KernelCondDist fit_kernel_cond_dist(const SampleView& subsample, std::vector<int> cond_cols,
                                    std::optional<Vector> bandwidth = std::nullopt);

/// Kernel weights at z (all subsample atoms retained).
DiscreteLaw kernel_cond_dist(const KernelCondDist& dist, const Vector& z);
DiscreteLaw kernel_cond_dist(const SampleView& subsample, const Vector& z, const Vector& bandwidth);

NormalLinearCondDist fit_normal_linear(const SampleView& subsample, std::vector<int> regressor_cols);

/// Discretizes any CondDist at z; continuous laws use Gauss-Hermite of the given order.
DiscreteLaw evaluate(const CondDist& dist, const Vector& z, int order = kDefaultHermiteOrder);

struct PsiIntegral {
  Vector numerator;    // sum_j w_j psi(x_j) f(x_j) * exp(-log_scale)
  double denominator;  // sum_j w_j f(x_j) * exp(-log_scale)
  double log_scale = 0.0;

  Vector ratio() const { return numerator / denominator; }
};

/// Integrand: writes psi(x) into the span and returns log f(x).
using PsiIntegrand = std::function<double(std::span<const double> x, std::span<double> psi)>;

/// (int psi f dF, int f dF) by exact weighted sums over the atoms. Throws
/// UnderflowDenominator when every f is below 1e-300.
PsiIntegral integrate_psi_f(const DiscreteLaw& law, int psi_dim, const PsiIntegrand& integrand);

/// Same integral computed with a log-sum-exp shift (never underflows unless all weights vanish).
PsiIntegral integrate_psi_f_log(const DiscreteLaw& law, int psi_dim, const PsiIntegrand& integrand);

}  // namespace tpu
