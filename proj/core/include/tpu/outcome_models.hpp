#pragma once

#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "tpu/data_model.hpp"
#include "tpu/numerics.hpp"

namespace tpu {

enum class ModelKind { Linear, Logistic, Cox };

std::string_view to_string(ModelKind k) noexcept;
ModelKind parse_model_kind(std::string_view s);
OutcomeKind outcome_kind_for(ModelKind k) noexcept;

/// Regressor vector W = (1?, x?, z[z_cols]). The intercept is never used for Cox.
struct CovariateLayout {
  bool intercept = false;
  bool use_x = true;
  std::vector<int> z_cols;

  int dim(int x_dim) const noexcept {
    return (intercept ? 1 : 0) + (use_x ? x_dim : 0) + static_cast<int>(z_cols.size());
  }
  void build(std::span<const double> x, const Vector& z, std::span<double> out) const;
  Vector build(const Subject& s) const;
  std::vector<std::string> labels(const ColumnNames& names) const;
};

/// Model family + regressor layout.
struct ModelSpec {
  ModelKind kind = ModelKind::Linear;
  CovariateLayout layout;
};

/// Outcomes, regressors and weights handed to the fitters.
struct FitData {
  std::vector<Outcome> outcomes;
  Matrix w;        // n x d
  Vector weights;  // r/pi for subsample fits, 1 for full-sample fits
};

enum class Weighting { Ipw, Unit };

/// Builds FitData from a view. With use_x the view must contain only r = 1 subjects.
FitData make_fit_data(const SampleView& view, const CovariateLayout& layout, Weighting weighting);

struct LinearNuisance {
  double sigma = 1.0;
};

struct LogisticNuisance {};

/// Subsample quantities behind the Cox influence function and density:
/// Breslow jumps at the distinct event times plus the weighted subsample
/// itself, from which s0/s1 and dF are recomputed at any theta.
struct CoxNuisance {
  Vector event_times;  // distinct, ascending
  Vector jumps;        // Breslow dLambda at event_times
  Vector cumhaz;       // Lambda at event_times
  Vector fbar;         // weighted empirical F(t) at event_times
  // weighted subsample, sorted by time ascending
  Vector times;
  std::vector<int> status;
  Matrix w;  // n x d
  Vector weights;

  double cumulative_hazard(double t) const;
  double jump_at(double t) const;
  double fbar_at(double t) const;
};

using Nuisance = std::variant<LinearNuisance, LogisticNuisance, CoxNuisance>;

struct FitResult {
  Vector theta;
  Nuisance nuisance;
  bool converged = false;
  double score_norm = 0.0;
  int iterations = 0;
  bool degenerate = false;  // zero residual variance (linear)
  bool flat = false;        // score identically zero in some direction (Cox)
};

FitResult fit_linear(const FitData& data);
FitResult fit_logistic(const FitData& data);
FitResult fit_cox(const FitData& data);
FitResult fit_model(ModelKind kind, const FitData& data);

/// Breslow baseline and Cox nuisance at a given theta (used by fit_cox, exposed for tests).
CoxNuisance cox_nuisance(const FitData& data, const Vector& theta);

/// Weighted log partial likelihood (Breslow ties).
double cox_log_partial_likelihood(const FitData& data, const Vector& theta);

/// Weighted score of the model at theta (sum of weight * psi); for Cox this is the partial-likelihood score.
Vector model_score(ModelKind kind, const FitData& data, const Vector& theta);

/// Risk-set summaries of the Cox influence function at a fixed theta.
class CoxRiskSummary {
 public:
  CoxRiskSummary(const CoxNuisance& nuisance, const Vector& theta);

  /// Per-time terms: ebar(t) = s1/s0 at the risk set {T >= t} (clamped to the
  /// largest subsample time), and the cumulative sums A(t), B(t) over event
  /// times <= t of dF/s0 and dF s1/s0^2.
  struct Terms {
    const double* ebar;
    double a;
    const double* b;
  };
  Terms at(double t) const;
  int dim() const noexcept { return dim_; }
  /// Linear predictors are evaluated as exp(eta - shift()) against A and B.
  double shift() const noexcept { return shift_; }

 private:
  int dim_;
  double shift_ = 0.0;
  Vector distinct_times_;  // ascending distinct subsample times
  Matrix ebar_;            // d x distinct
  Vector event_times_;
  Vector a_cum_;           // per event time
  Matrix b_cum_;           // d x events
  Vector zero_;
};

/// theta-specific evaluator of log f(Y | W) and psi(Y, W). prepare() caches the
/// W-independent parts for one outcome; eval() is the per-atom hot path.
class ModelEvaluator {
 public:
  ModelEvaluator(ModelKind kind, const Vector& theta, const Nuisance& nuisance,
                 bool include_cox_jump = false);

  struct Prepared {
    double y = 0.0;
    int status = 0;
    double cumhaz = 0.0;
    double log_jump = 0.0;
    CoxRiskSummary::Terms cox{nullptr, 0.0, nullptr};
  };

  Prepared prepare(const Outcome& outcome) const;
  /// Writes psi into `psi` (length dim) and returns log f.
  double eval(const Prepared& p, std::span<const double> w, std::span<double> psi) const;
  double log_density(const Prepared& p, std::span<const double> w) const;

  int dim() const noexcept { return static_cast<int>(theta_.size()); }
  ModelKind kind() const noexcept { return kind_; }
  const Vector& theta() const noexcept { return theta_; }

 private:
  ModelKind kind_;
  Vector theta_;
  const Nuisance* nuisance_;
  double sigma_ = 1.0;
  double log_norm_ = 0.0;
  bool include_jump_ = false;
  std::unique_ptr<CoxRiskSummary> cox_;
};

/// psi for one subject at (theta, nuisance).
Vector influence(ModelKind kind, const Outcome& outcome, const Vector& w, const Vector& theta,
                 const Nuisance& nuisance);

/// f(Y | X, Z). For Cox the dLambda(T)^Delta factor is included only when requested.
double cond_density(ModelKind kind, const Outcome& outcome, const Vector& w, const Vector& theta,
                    const Nuisance& nuisance, bool include_cox_jump = false);
double log_cond_density(ModelKind kind, const Outcome& outcome, const Vector& w, const Vector& theta,
                        const Nuisance& nuisance, bool include_cox_jump = false);

}  // namespace tpu
