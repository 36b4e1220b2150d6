#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "tpu/covariate_models.hpp"
#include "tpu/data_model.hpp"
#include "tpu/numerics.hpp"
#include "tpu/outcome_models.hpp"

namespace tpu {

/// How the L2 penalty enters the summed working equations.
/// Averaged: -2 lambda n0^{2/3} theta (resp. n^{2/3}); Literal: -2 lambda n0^{-1/3} theta.
enum class PenaltyScaling { Averaged, Literal };

std::string_view to_string(PenaltyScaling p) noexcept;
PenaltyScaling parse_penalty_scaling(std::string_view s);
double penalty_coefficient(double lambda, std::size_t size, PenaltyScaling scaling);

struct KernelRecipe {
  std::vector<int> cond_cols;
  std::optional<Vector> bandwidth;
};
struct NormalLinearRecipe {
  std::vector<int> regressor_cols;
};
/// How F(x | z) is obtained from the subsample (known and point-mass laws need no fit).
using CondRecipe = std::variant<KernelRecipe, NormalLinearRecipe, KnownCondDist, PointMassCondDist>;

CondDist fit_cond_dist(const CondRecipe& recipe, const SampleView& subsample);

/// The outcome model of the same family refitted with Y on z[z_cols] only.
struct DefaultWorking {
  std::vector<int> z_cols;
};
/// Working pair built from phi* under a conditional-distribution recipe.
struct PhiStarWorking {
  CondRecipe recipe;
  std::vector<double> lambda_grid{0.0};  // ascending
};

struct WorkingSpec {
  std::string label;
  std::variant<DefaultWorking, PhiStarWorking> kind;
};

struct WorkingPair {
  Vector vartheta_s;
  Vector vartheta_f;
  std::string label;
  double lambda_used = 0.0;

  Vector difference() const { return vartheta_s - vartheta_f; }
};

struct UpdateProblem {
  ModelSpec model;
  std::vector<WorkingSpec> specs;
  PenaltyScaling penalty = PenaltyScaling::Averaged;
  RootConfig root;
  bool include_cox_jump = false;
  int hermite_order = kDefaultHermiteOrder;
};

/// Batched phi* for a fixed set of subjects. Conditional laws are discretized
/// once at construction; evaluation at any theta is a vectorized sweep over atoms.
class PhiStarSystem {
 public:
  PhiStarSystem(const ModelSpec& model, const Nuisance& nuisance, const CondDist& dist, const SampleView& subjects,
                bool include_cox_jump = false, int order = kDefaultHermiteOrder);

  std::size_t size() const noexcept { return subjects_.size(); }
  int dim() const noexcept { return dim_; }

  /// sum_k weights[k] phi*_k(theta); subjects with zero weight are skipped.
  Vector weighted_sum(const Vector& theta, const Vector& weights) const;
  Vector phi(std::size_t k, const Vector& theta) const;

 private:
  struct Item {
    Outcome outcome;
    Vector z;
    DiscreteLaw law;
    Vector log_weights;
    double cumhaz = 0.0;   // Cox: Lambda(T) at the fixed baseline
    double log_jump = 0.0; // Cox: log dLambda(T), used only when requested
  };
  void accumulate(const Item& item, const Vector& theta, const CoxRiskSummary* risk, double weight,
                  Vector& out) const;

  ModelSpec model_;
  const Nuisance* nuisance_;
  bool include_jump_;
  int dim_;
  double sigma_ = 1.0;
  std::vector<Item> subjects_;
};

/// phi*(y, z) = int psi f dF / int f dF, computed atom by atom in the direct
/// domain with a log-sum-exp retry on underflow.
Vector phi_star(const Subject& subject, const Vector& theta, const ModelSpec& model, const Nuisance& nuisance,
                const CondDist& dist, bool include_cox_jump = false, int order = kDefaultHermiteOrder);

/// Solves the subsample (IPW) and full-sample phi* equations from theta_init.
WorkingPair solve_working_pair(const TwoPhaseDataset& data, const Vector& theta_init, const ModelSpec& model,
                               const Nuisance& nuisance, const CondDist& dist, double lambda,
                               PenaltyScaling scaling = PenaltyScaling::Averaged, const RootConfig& root = {},
                               bool include_cox_jump = false, int order = kDefaultHermiteOrder);

/// Working pair of the default outcome model of Y on z[z_cols].
WorkingPair default_working_pair(const TwoPhaseDataset& data, const ModelSpec& model, const DefaultWorking& spec);

/// Outlier rule over bootstrap working pairs. A missing pair (failed solve) is
/// an outlier; so is any component beyond 6 MADs of the replicate median
/// (skipped when the MAD is zero) or beyond 50 in absolute value.
std::vector<bool> outlier_flags(const std::vector<std::optional<WorkingPair>>& pairs);
bool has_outliers(const std::vector<std::optional<WorkingPair>>& pairs);

struct LambdaChoice {
  double lambda = 0.0;
  std::size_t index = 0;
  bool all_outliers = false;  // every grid value had outliers; the largest was taken
};
/// Smallest grid value without outliers. `outliers_at(i)` is called in ascending
/// order and only as far as needed.
LambdaChoice select_lambda(const std::vector<double>& grid, const std::function<bool(std::size_t)>& outliers_at);

/// Resamples with replacement within each (stratum, r) cell, keeping cell sizes and pi.
TwoPhaseDataset bootstrap_resample(const TwoPhaseDataset& data, Rng& rng);

struct SigmaBlocks {
  Matrix s11;
  Matrix s12;
  Matrix s22;
};

/// n * sample covariance of stacked rows (theta*, D*), split after the first p columns.
SigmaBlocks sigma_from_draws(const Matrix& rows, std::size_t n, int p);

/// Blocks of a stacked covariance for a subset of difference groups.
SigmaBlocks select_blocks(const Matrix& sigma, int p, const std::vector<int>& group_sizes,
                          const std::vector<int>& groups);

/// Bootstrap draws of `pipeline` evaluated on resampled datasets. Replicate b
/// uses stream_offset + b. Failing replicates are dropped.
struct BootstrapDraws {
  Matrix rows;
  std::size_t failures = 0;
  std::size_t requested = 0;
};
using ReplicatePipeline = std::function<Vector(const TwoPhaseDataset&, std::size_t)>;
BootstrapDraws bootstrap_draws(const TwoPhaseDataset& data, const ReplicatePipeline& pipeline, std::size_t B,
                               std::uint64_t base_seed, std::uint64_t stream_offset = 0, std::size_t threads = 1);
/// Throws TooManyFailures when more than 10% of the replicates failed.
SigmaBlocks bootstrap_sigma(const TwoPhaseDataset& data, const ReplicatePipeline& pipeline, std::size_t B,
                            std::uint64_t base_seed, int p, std::uint64_t stream_offset = 0,
                            std::size_t threads = 1, std::size_t* failures = nullptr);

struct UpdateResult {
  Vector theta_bar;
  Matrix cov;
  std::vector<WorkingPair> components;
  Vector relative_efficiency;  // diag(s11 / n) / diag(cov)
  bool ridged = false;
};

/// Joint update with the pairs concatenated in order.
UpdateResult update(const Vector& theta_s, const std::vector<WorkingPair>& pairs, const SigmaBlocks& sigma,
                    std::size_t n);

/// Sequential update with explicit per-step blocks: step k describes the
/// covariance of (current estimate, D_k) on the n-scale.
UpdateResult sequential_update(const Vector& theta_s, const std::vector<WorkingPair>& pairs,
                               const std::vector<SigmaBlocks>& steps, std::size_t n);

/// Sequential update whose per-step blocks are derived from the joint blocks
/// of (theta, D_1, ..., D_q).
UpdateResult sequential_update(const Vector& theta_s, const std::vector<WorkingPair>& pairs,
                               const SigmaBlocks& joint, std::size_t n);

/// Plug-in Sigma(phi) from draws (rows are observations). Optional probabilities
/// weight the rows (uniform when empty).
Matrix projection_variance(const Matrix& psi, const Matrix& phi, const Vector& pi, const Vector& prob = Vector());

struct MethodSpec {
  std::string label;
  std::vector<int> specs;  // indices into UpdateProblem::specs; empty = original estimator
};

struct MethodEstimate {
  std::string label;
  Vector estimate;
  Matrix cov;
  Vector se;
  bool ridged = false;
};

struct AnalysisConfig {
  std::size_t B = 200;
  std::uint64_t seed = 1;
  std::uint64_t stream_offset = 0;
  std::size_t threads = 1;
};

struct AnalysisResult {
  Vector theta_s;
  std::vector<WorkingPair> pairs;
  std::vector<LambdaChoice> lambdas;  // per spec
  Matrix sigma;                       // n * cov of (theta*, D_1*, ...)
  std::vector<int> group_sizes;
  std::size_t boot_failures = 0;
  std::vector<MethodEstimate> methods;
  std::size_t n = 0;
};

/// Original fit, lambda selection, working pairs, shared bootstrap and every requested update.
AnalysisResult analyze(const TwoPhaseDataset& data, const UpdateProblem& problem,
                       const std::vector<MethodSpec>& methods, const AnalysisConfig& cfg);

/// Subsample IPW fit of the outcome model.
FitResult fit_original(const TwoPhaseDataset& data, const ModelSpec& model);

}  // namespace tpu
