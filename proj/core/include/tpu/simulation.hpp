#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tpu/data_model.hpp"
#include "tpu/outcome_models.hpp"
#include "tpu/update_engine.hpp"

namespace tpu {

enum class CovariateSetting {
  OneCovariate,  // X ~ N(0,1), auxiliary X* = X + e
  TwoCovariateI, // (X, Z) bivariate normal, corr 0.7
  TwoCovariateII // (X, log Z) truncated bivariate normal, X* censored at -1
};
enum class SamplingScheme { Mcar, Mar };

std::string_view to_string(CovariateSetting s) noexcept;
std::string_view to_string(SamplingScheme s) noexcept;

struct ScenarioConfig {
  ModelKind model = ModelKind::Linear;
  CovariateSetting setting = CovariateSetting::OneCovariate;
  double rho = 0.7;  // Corr(X, X*)
  SamplingScheme design = SamplingScheme::Mcar;
  std::size_t n = 1000;
  std::size_t n2 = 200;
  std::size_t reps = 200;
  std::size_t B = 100;
  std::vector<double> lambda_grid{0.005, 0.01, 0.02, 0.04};  // used by logistic phi* specs only
  std::uint64_t seed = 1;
  PenaltyScaling penalty = PenaltyScaling::Averaged;
  std::size_t threads = 1;

  /// Throws InvalidArgument naming the offending field.
  void validate() const;
};

/// Scenario constants solved from Monte Carlo targets.
struct Calibration {
  double sigma_e = 0.0;        // sd of the auxiliary noise
  double tau = 0.0;            // censoring cap (Cox only)
  double censoring_rate = 0.0; // achieved on the calibration draws (Cox only)
};

/// Cached per (model, setting, rho); uses 10^6 draws from a fixed stream.
Calibration calibrate(const ScenarioConfig& cfg);

/// True regression coefficients of the scenario.
Vector true_theta(const ScenarioConfig& cfg);
std::vector<std::string> coefficient_labels(const ScenarioConfig& cfg);

/// One replicate's dataset (stream = rep). Stratum shortfalls under MAR are
/// resolved by inflating the other stratum; a message is appended to `warnings`.
TwoPhaseDataset generate(const ScenarioConfig& cfg, std::size_t rep, const Calibration& cal,
                         std::vector<std::string>* warnings = nullptr);

/// Method labels the scenario supports, in table order.
std::vector<std::string> available_methods(const ScenarioConfig& cfg);

/// Working specs and method wiring for the requested labels.
struct StudyPlan {
  ModelSpec model;
  UpdateProblem problem;
  std::vector<MethodSpec> methods;
};
StudyPlan plan_study(const ScenarioConfig& cfg, const Calibration& cal, const std::vector<std::string>& methods);

struct MetricsRow {
  std::string method;
  std::vector<std::string> coef;
  Vector bias;
  Vector ssd;
  Vector ese;
  Vector cp;
  Vector re;
};

/// Per-method estimates and standard errors collected over replicates.
struct MethodDraws {
  std::string label;
  Matrix estimates;  // reps x p
  Matrix se;         // reps x p
};

/// Bias, SSD, ESE, CP (estimate +- 1.96 ESE) and RE against `reference`'s SSD.
std::vector<MetricsRow> aggregate_metrics(const std::vector<MethodDraws>& draws, const Vector& truth,
                                          const std::vector<std::string>& coef, const std::string& reference);

struct StudyResult {
  std::vector<MetricsRow> rows;
  Calibration calibration;
  std::size_t failed_reps = 0;
  std::vector<std::string> spec_labels;
  std::vector<std::vector<double>> lambdas;             // per rep, per spec
  std::vector<std::vector<std::size_t>> stratum_counts; // per rep: sampled count per stratum
  std::vector<std::string> warnings;
  std::vector<MethodDraws> draws;
};

/// Runs every replicate; aborts with StudyAborted when more than 5% fail.
StudyResult run_study(const ScenarioConfig& cfg, const std::vector<std::string>& methods);

std::string metrics_csv(const std::vector<MetricsRow>& rows);
std::string metrics_markdown(const std::vector<MetricsRow>& rows);

}  // namespace tpu
