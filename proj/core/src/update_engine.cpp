#include "tpu/update_engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <numbers>

#include <Eigen/Eigenvalues>

#include "tpu/parallel.hpp"

namespace tpu {

std::string_view to_string(PenaltyScaling p) noexcept {
  return p == PenaltyScaling::Averaged ? "averaged" : "literal";
}

PenaltyScaling parse_penalty_scaling(std::string_view s) {
  if (s == "averaged") return PenaltyScaling::Averaged;
  if (s == "literal") return PenaltyScaling::Literal;
  fail(ErrorCode::InvalidArgument, "unknown penalty scaling '" + std::string(s) + "'");
}

double penalty_coefficient(double lambda, std::size_t size, PenaltyScaling scaling) {
  require(lambda >= 0.0, ErrorCode::InvalidArgument, "lambda must be non-negative");
  if (lambda == 0.0) return 0.0;
  const double m = static_cast<double>(size);
  const double expo = scaling == PenaltyScaling::Averaged ? 2.0 / 3.0 : -1.0 / 3.0;
  return 2.0 * lambda * std::pow(m, expo);
}

CondDist fit_cond_dist(const CondRecipe& recipe, const SampleView& subsample) {
  return std::visit(
      [&](const auto& r) -> CondDist {
        using T = std::decay_t<decltype(r)>;
        if constexpr (std::is_same_v<T, KernelRecipe>) {
          return fit_kernel_cond_dist(subsample, r.cond_cols, r.bandwidth);
        } else if constexpr (std::is_same_v<T, NormalLinearRecipe>) {
          return fit_normal_linear(subsample, r.regressor_cols);
        } else {
          return r;
        }
      },
      recipe);
}

// ---------------------------------------------------------------------------
// phi*

namespace {

constexpr double kTiny = 1e-300;

Eigen::ArrayXd softplus(const Eigen::ArrayXd& x) {
  return x.max(0.0) + (-x.abs()).exp().log1p();
}

}  // namespace

PhiStarSystem::PhiStarSystem(const ModelSpec& model, const Nuisance& nuisance, const CondDist& dist,
                             const SampleView& subjects, bool include_cox_jump, int order)
    : model_(model), nuisance_(&nuisance), include_jump_(include_cox_jump) {
  const auto& data = subjects.dataset();
  require(model_.layout.use_x, ErrorCode::InvalidArgument, "phi* needs a model that uses x");
  require(!(model_.kind == ModelKind::Cox && model_.layout.intercept), ErrorCode::InvalidArgument,
          "Cox model takes no intercept");
  dim_ = model_.layout.dim(data.x_dim());
  switch (model_.kind) {
    case ModelKind::Linear: {
      const auto* ln = std::get_if<LinearNuisance>(&nuisance);
      require(ln != nullptr && ln->sigma > 0.0, ErrorCode::InvalidArgument, "linear model needs sigma > 0");
      sigma_ = ln->sigma;
      break;
    }
    case ModelKind::Logistic:
      require(std::holds_alternative<LogisticNuisance>(nuisance), ErrorCode::InvalidArgument,
              "logistic model needs a LogisticNuisance");
      break;
    case ModelKind::Cox:
      require(std::holds_alternative<CoxNuisance>(nuisance), ErrorCode::InvalidArgument,
              "Cox model needs a CoxNuisance");
      break;
  }
  subjects_.reserve(subjects.size());
  for (std::size_t k = 0; k < subjects.size(); ++k) {
    const Subject& s = subjects[k];
    require(kind_of(s.outcome) == outcome_kind_for(model_.kind), ErrorCode::InvalidArgument,
            "outcome type does not match the model");
    Item it{s.outcome, s.z, evaluate(dist, s.z, order), Vector(), 0.0, 0.0};
    require(it.law.support.cols() == data.x_dim(), ErrorCode::DimensionMismatch,
            "conditional law dimension does not match x");
    it.log_weights = it.law.weights.array().log().matrix();
    if (model_.kind == ModelKind::Cox) {
      const auto& cn = std::get<CoxNuisance>(nuisance);
      const auto& so = std::get<SurvivalOutcome>(s.outcome);
      it.cumhaz = cn.cumulative_hazard(so.time);
      if (include_jump_ && so.status == 1) {
        const double j = cn.jump_at(so.time);
        it.log_jump = j > 0.0 ? std::log(j) : -std::numeric_limits<double>::infinity();
      }
    }
    subjects_.push_back(std::move(it));
  }
}

void PhiStarSystem::accumulate(const Item& item, const Vector& theta, const CoxRiskSummary* risk, double weight,
                               Vector& out) const {
  const auto& lay = model_.layout;
  const Eigen::Index q = item.law.support.cols();
  const Eigen::Index off = lay.intercept ? 1 : 0;
  double c = lay.intercept ? theta[0] : 0.0;
  for (std::size_t j = 0; j < lay.z_cols.size(); ++j) {
    c += theta[off + q + static_cast<Eigen::Index>(j)] * item.z[lay.z_cols[j]];
  }
  const Eigen::ArrayXd eta = (item.law.support * theta.segment(off, q)).array() + c;

  // f is formed directly; log f is only needed when the direct sum underflows.
  Eigen::ArrayXd f;
  Eigen::ArrayXd alpha;
  Eigen::ArrayXd g;
  std::function<Eigen::ArrayXd()> log_f;
  double delta = 0.0;
  CoxRiskSummary::Terms terms{nullptr, 0.0, nullptr};
  switch (model_.kind) {
    case ModelKind::Linear: {
      const double y = std::get<ContinuousOutcome>(item.outcome).y;
      alpha = y - eta;
      const double log_norm = -std::log(sigma_) - 0.5 * std::log(2.0 * std::numbers::pi);
      f = (log_norm - 0.5 * (alpha / sigma_).square()).exp();
      log_f = [&alpha, log_norm, this] { return Eigen::ArrayXd(log_norm - 0.5 * (alpha / sigma_).square()); };
      break;
    }
    case ModelKind::Logistic: {
      const double y = std::get<BinaryOutcome>(item.outcome).y;
      const Eigen::ArrayXd e = (-eta.abs()).exp();
      const Eigen::ArrayXd big = 1.0 / (1.0 + e);   // sigmoid(|eta|)
      const Eigen::ArrayXd small = e / (1.0 + e);   // sigmoid(-|eta|)
      const Eigen::ArrayXd p = (eta >= 0.0).select(big, small);
      const Eigen::ArrayXd q = (eta >= 0.0).select(small, big);
      alpha = y - p;
      f = y == 1.0 ? p : q;
      log_f = [&eta, y] { return Eigen::ArrayXd(y * eta - softplus(eta)); };
      break;
    }
    case ModelKind::Cox: {
      const auto& so = std::get<SurvivalOutcome>(item.outcome);
      delta = so.status;
      terms = risk->at(so.time);
      g = (eta - risk->shift()).exp();
      const bool jump = include_jump_ && so.status == 1;
      log_f = [&eta, &item, delta, jump] {
        Eigen::ArrayXd l = delta * eta - item.cumhaz * eta.exp();
        if (jump) l += item.log_jump;
        return l;
      };
      f = log_f().exp();
      alpha = delta - terms.a * g;
      break;
    }
  }

  // Direct domain first; shift by the largest log term only when it underflows.
  Eigen::ArrayXd s = item.law.weights.array() * f;
  double s0 = s.sum();
  if (!(f.maxCoeff() >= kTiny) || !(s0 >= kTiny)) {
    const Eigen::ArrayXd lw = item.log_weights.array() + log_f();
    const double mx = lw.maxCoeff();
    if (!std::isfinite(mx)) fail(ErrorCode::UnderflowDenominator, "every atom has zero density");
    s = (lw - mx).exp();
    s0 = s.sum();
  }
  require(std::isfinite(s0) && s0 > 0.0, ErrorCode::UnderflowDenominator, "phi* denominator vanished");

  const Eigen::ArrayXd sa = s * alpha;
  const double s_alpha = sa.sum() / s0;
  const double scale = weight;
  if (lay.intercept) out[0] += scale * s_alpha;
  out.segment(off, q).noalias() += (scale / s0) * (item.law.support.transpose() * sa.matrix());
  for (std::size_t j = 0; j < lay.z_cols.size(); ++j) {
    out[off + q + static_cast<Eigen::Index>(j)] += scale * s_alpha * item.z[lay.z_cols[j]];
  }
  if (model_.kind == ModelKind::Cox) {
    const double sg = (s * g).sum() / s0;
    for (Eigen::Index j = 0; j < dim_; ++j) out[j] += scale * (sg * terms.b[j] - delta * terms.ebar[j]);
  }
}

Vector PhiStarSystem::weighted_sum(const Vector& theta, const Vector& weights) const {
  require(theta.size() == dim_, ErrorCode::DimensionMismatch, "theta dimension");
  require(weights.size() == static_cast<Eigen::Index>(subjects_.size()), ErrorCode::DimensionMismatch,
          "weights dimension");
  std::unique_ptr<CoxRiskSummary> risk;
  if (model_.kind == ModelKind::Cox) risk = std::make_unique<CoxRiskSummary>(std::get<CoxNuisance>(*nuisance_), theta);
  Vector out = Vector::Zero(dim_);
  for (std::size_t k = 0; k < subjects_.size(); ++k) {
    const double w = weights[static_cast<Eigen::Index>(k)];
    if (w == 0.0) continue;
    accumulate(subjects_[k], theta, risk.get(), w, out);
  }
  return out;
}

Vector PhiStarSystem::phi(std::size_t k, const Vector& theta) const {
  require(k < subjects_.size(), ErrorCode::InvalidArgument, "subject index out of range");
  std::unique_ptr<CoxRiskSummary> risk;
  if (model_.kind == ModelKind::Cox) risk = std::make_unique<CoxRiskSummary>(std::get<CoxNuisance>(*nuisance_), theta);
  Vector out = Vector::Zero(dim_);
  accumulate(subjects_[k], theta, risk.get(), 1.0, out);
  return out;
}

Vector phi_star(const Subject& subject, const Vector& theta, const ModelSpec& model, const Nuisance& nuisance,
                const CondDist& dist, bool include_cox_jump, int order) {
  const DiscreteLaw law = evaluate(dist, subject.z, order);
  const int q = static_cast<int>(law.support.cols());
  const int d = model.layout.dim(q);
  require(theta.size() == d, ErrorCode::DimensionMismatch, "theta dimension");
  ModelEvaluator ev(model.kind, theta, nuisance, include_cox_jump);
  const auto prep = ev.prepare(subject.outcome);
  std::vector<double> w(static_cast<std::size_t>(d));
  auto integrand = [&](std::span<const double> x, std::span<double> psi) {
    model.layout.build(x, subject.z, w);
    return ev.eval(prep, w, psi);
  };
  try {
    return integrate_psi_f(law, d, integrand).ratio();
  } catch (const Error& e) {
    if (e.code() != ErrorCode::UnderflowDenominator) throw;
  }
  return integrate_psi_f_log(law, d, integrand).ratio();
}

WorkingPair solve_working_pair(const TwoPhaseDataset& data, const Vector& theta_init, const ModelSpec& model,
                               const Nuisance& nuisance, const CondDist& dist, double lambda,
                               PenaltyScaling scaling, const RootConfig& root, bool include_cox_jump, int order) {
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const SampleView full(data, std::move(all));
  const PhiStarSystem sys(model, nuisance, dist, full, include_cox_jump, order);
  require(theta_init.size() == sys.dim(), ErrorCode::DimensionMismatch, "theta_init dimension");

  const auto n = static_cast<Eigen::Index>(data.size());
  Vector ws(n);
  for (Eigen::Index i = 0; i < n; ++i) ws[i] = data[static_cast<std::size_t>(i)].r / data[static_cast<std::size_t>(i)].pi;
  const Vector wf = Vector::Ones(n);
  const double pen_s = penalty_coefficient(lambda, data.complete_cases(), scaling);
  const double pen_f = penalty_coefficient(lambda, data.size(), scaling);

  WorkingPair pair;
  pair.lambda_used = lambda;
  pair.vartheta_s =
      solve_root([&](const Vector& t) -> Vector { return sys.weighted_sum(t, ws) - pen_s * t; }, theta_init, root).x;
  pair.vartheta_f =
      solve_root([&](const Vector& t) -> Vector { return sys.weighted_sum(t, wf) - pen_f * t; }, theta_init, root).x;
  return pair;
}

WorkingPair default_working_pair(const TwoPhaseDataset& data, const ModelSpec& model, const DefaultWorking& spec) {
  require(!spec.z_cols.empty(), ErrorCode::InvalidArgument, "default working model needs at least one z column");
  CovariateLayout lay;
  lay.intercept = model.layout.intercept && model.kind != ModelKind::Cox;
  lay.use_x = false;
  lay.z_cols = spec.z_cols;
  const auto views = split(data);
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const SampleView full(data, std::move(all));
  WorkingPair pair;
  pair.vartheta_s = fit_model(model.kind, make_fit_data(views.subsample, lay, Weighting::Ipw)).theta;
  pair.vartheta_f = fit_model(model.kind, make_fit_data(full, lay, Weighting::Unit)).theta;
  return pair;
}

// ---------------------------------------------------------------------------
// lambda selection

namespace {

double median_of(std::vector<double> v) {
  const std::size_t m = v.size();
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(m / 2), v.end());
  double hi = v[m / 2];
  if (m % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(m / 2));
  return 0.5 * (lo + hi);
}

}  // namespace

std::vector<bool> outlier_flags(const std::vector<std::optional<WorkingPair>>& pairs) {
  std::vector<bool> flags(pairs.size(), false);
  std::vector<std::size_t> present;
  for (std::size_t b = 0; b < pairs.size(); ++b) {
    if (pairs[b]) {
      present.push_back(b);
    } else {
      flags[b] = true;
    }
  }
  if (present.empty()) return flags;
  const auto& first = *pairs[present.front()];
  const Eigen::Index ds = first.vartheta_s.size();
  const Eigen::Index d = ds + first.vartheta_f.size();
  auto component = [&](std::size_t b, Eigen::Index j) {
    const auto& p = *pairs[b];
    return j < ds ? p.vartheta_s[j] : p.vartheta_f[j - ds];
  };
  std::vector<double> col(present.size());
  std::vector<double> dev(present.size());
  for (Eigen::Index j = 0; j < d; ++j) {
    for (std::size_t k = 0; k < present.size(); ++k) col[k] = component(present[k], j);
    const double med = median_of(col);
    for (std::size_t k = 0; k < present.size(); ++k) dev[k] = std::abs(col[k] - med);
    const double mad = median_of(dev);
    for (std::size_t k = 0; k < present.size(); ++k) {
      const double v = col[k];
      if (!std::isfinite(v) || std::abs(v) > 50.0 || (mad > 0.0 && dev[k] > 6.0 * mad)) flags[present[k]] = true;
    }
  }
  return flags;
}

bool has_outliers(const std::vector<std::optional<WorkingPair>>& pairs) {
  const auto f = outlier_flags(pairs);
  return std::find(f.begin(), f.end(), true) != f.end();
}

LambdaChoice select_lambda(const std::vector<double>& grid, const std::function<bool(std::size_t)>& outliers_at) {
  require(!grid.empty(), ErrorCode::InvalidArgument, "lambda grid is empty");
  for (std::size_t i = 1; i < grid.size(); ++i) {
    require(grid[i] > grid[i - 1], ErrorCode::InvalidArgument, "lambda grid must be strictly ascending");
  }
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!outliers_at(i)) return {grid[i], i, false};
  }
  return {grid.back(), grid.size() - 1, true};
}

// ---------------------------------------------------------------------------
// bootstrap

TwoPhaseDataset bootstrap_resample(const TwoPhaseDataset& data, Rng& rng) {
  std::map<std::pair<int, int>, std::vector<std::size_t>> cells;
  for (std::size_t i = 0; i < data.size(); ++i) cells[{data[i].stratum, data[i].r}].push_back(i);
  std::vector<Subject> out;
  out.reserve(data.size());
  for (const auto& [key, members] : cells) {
    for (std::size_t k = 0; k < members.size(); ++k) out.push_back(data[members[rng.index(members.size())]]);
  }
  return TwoPhaseDataset(std::move(out), data.x_dim(), data.z_dim(), data.design(), data.names());
}

SigmaBlocks sigma_from_draws(const Matrix& rows, std::size_t n, int p) {
  require(p >= 0 && p <= rows.cols(), ErrorCode::DimensionMismatch, "p exceeds the draw width");
  const Matrix s = static_cast<double>(n) * sample_cov(rows);
  const Eigen::Index k = rows.cols() - p;
  return {s.topLeftCorner(p, p), s.topRightCorner(p, k), s.bottomRightCorner(k, k)};
}

SigmaBlocks select_blocks(const Matrix& sigma, int p, const std::vector<int>& group_sizes,
                          const std::vector<int>& groups) {
  std::vector<int> offsets(group_sizes.size());
  int acc = p;
  for (std::size_t g = 0; g < group_sizes.size(); ++g) {
    offsets[g] = acc;
    acc += group_sizes[g];
  }
  require(acc == sigma.rows() && sigma.rows() == sigma.cols(), ErrorCode::DimensionMismatch,
          "group sizes do not match sigma");
  std::vector<Eigen::Index> idx;
  for (int g : groups) {
    require(g >= 0 && static_cast<std::size_t>(g) < group_sizes.size(), ErrorCode::InvalidArgument,
            "group index out of range");
    for (int j = 0; j < group_sizes[static_cast<std::size_t>(g)]; ++j) idx.push_back(offsets[static_cast<std::size_t>(g)] + j);
  }
  const auto k = static_cast<Eigen::Index>(idx.size());
  SigmaBlocks b{sigma.topLeftCorner(p, p), Matrix(p, k), Matrix(k, k)};
  for (Eigen::Index a = 0; a < k; ++a) {
    b.s12.col(a) = sigma.block(0, idx[a], p, 1);
    for (Eigen::Index c = 0; c < k; ++c) b.s22(a, c) = sigma(idx[a], idx[c]);
  }
  return b;
}

BootstrapDraws bootstrap_draws(const TwoPhaseDataset& data, const ReplicatePipeline& pipeline, std::size_t B,
                               std::uint64_t base_seed, std::uint64_t stream_offset, std::size_t threads) {
  require(B >= 2, ErrorCode::InvalidArgument, "bootstrap needs B >= 2");
  std::vector<std::optional<Vector>> out(B);
  parallel_for(B, threads, [&](std::size_t b) {
    Rng rng(base_seed, stream_offset + b);
    try {
      const auto rep = bootstrap_resample(data, rng);
      Vector v = pipeline(rep, b);
      if (v.allFinite()) out[b] = std::move(v);
    } catch (const Error&) {
      // dropped and counted below
    }
  });
  BootstrapDraws draws;
  draws.requested = B;
  Eigen::Index width = -1;
  std::size_t ok = 0;
  for (const auto& v : out) {
    if (!v) continue;
    if (width < 0) width = v->size();
    require(v->size() == width, ErrorCode::DimensionMismatch, "pipeline output width changed between replicates");
    ++ok;
  }
  draws.rows.resize(static_cast<Eigen::Index>(ok), std::max<Eigen::Index>(width, 0));
  Eigen::Index r = 0;
  for (const auto& v : out) {
    if (v) draws.rows.row(r++) = v->transpose();
  }
  draws.failures = B - ok;
  return draws;
}

namespace {

void check_failures(std::size_t failures, std::size_t B, std::size_t ok) {
  if (failures * 10 > B || ok < 2) {
    fail(ErrorCode::TooManyFailures,
         std::to_string(failures) + " of " + std::to_string(B) + " bootstrap replicates failed");
  }
}

}  // namespace

SigmaBlocks bootstrap_sigma(const TwoPhaseDataset& data, const ReplicatePipeline& pipeline, std::size_t B,
                            std::uint64_t base_seed, int p, std::uint64_t stream_offset, std::size_t threads,
                            std::size_t* failures) {
  const auto draws = bootstrap_draws(data, pipeline, B, base_seed, stream_offset, threads);
  if (failures) *failures = draws.failures;
  check_failures(draws.failures, B, static_cast<std::size_t>(draws.rows.rows()));
  return sigma_from_draws(draws.rows, data.size(), p);
}

// ---------------------------------------------------------------------------
// update

namespace {

Vector concat_differences(const std::vector<WorkingPair>& pairs) {
  Eigen::Index k = 0;
  for (const auto& pr : pairs) {
    require(pr.vartheta_s.size() == pr.vartheta_f.size(), ErrorCode::DimensionMismatch,
            "working pair sides differ in dimension");
    k += pr.vartheta_s.size();
  }
  Vector d(k);
  Eigen::Index off = 0;
  for (const auto& pr : pairs) {
    d.segment(off, pr.vartheta_s.size()) = pr.difference();
    off += pr.vartheta_s.size();
  }
  return d;
}

Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

}  // namespace

UpdateResult update(const Vector& theta_s, const std::vector<WorkingPair>& pairs, const SigmaBlocks& sigma,
                    std::size_t n) {
  const Eigen::Index p = theta_s.size();
  const Vector d = concat_differences(pairs);
  const Eigen::Index k = d.size();
  require(sigma.s11.rows() == p && sigma.s11.cols() == p && sigma.s12.rows() == p && sigma.s12.cols() == k &&
              sigma.s22.rows() == k && sigma.s22.cols() == k,
          ErrorCode::DimensionMismatch, "sigma blocks do not match theta and the working pairs");
  require(n >= 1, ErrorCode::InvalidArgument, "n must be positive");
  UpdateResult res;
  res.components = pairs;
  const double nn = static_cast<double>(n);
  if (k == 0) {
    res.theta_bar = theta_s;
    res.cov = symmetrize(sigma.s11) / nn;
  } else {
    Matrix rhs(k, 1 + p);
    rhs.col(0) = d;
    rhs.rightCols(p) = sigma.s12.transpose();
    const auto sol = solve_psd(symmetrize(sigma.s22), rhs);
    res.ridged = sol.ridged;
    res.theta_bar = theta_s - sigma.s12 * sol.x.col(0);
    res.cov = symmetrize(sigma.s11 - sigma.s12 * sol.x.rightCols(p)) / nn;
  }
  res.relative_efficiency = (sigma.s11.diagonal() / nn).cwiseQuotient(res.cov.diagonal());
  return res;
}

UpdateResult sequential_update(const Vector& theta_s, const std::vector<WorkingPair>& pairs,
                               const std::vector<SigmaBlocks>& steps, std::size_t n) {
  require(steps.size() == pairs.size() && !pairs.empty(), ErrorCode::DimensionMismatch,
          "one set of sigma blocks per working pair is required");
  Vector cur = theta_s;
  UpdateResult last;
  bool ridged = false;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    last = update(cur, {pairs[k]}, steps[k], n);
    ridged = ridged || last.ridged;
    cur = last.theta_bar;
  }
  last.components = pairs;
  last.ridged = ridged;
  last.relative_efficiency =
      (steps.front().s11.diagonal() / static_cast<double>(n)).cwiseQuotient(last.cov.diagonal());
  return last;
}

UpdateResult sequential_update(const Vector& theta_s, const std::vector<WorkingPair>& pairs,
                               const SigmaBlocks& joint, std::size_t n) {
  const Eigen::Index p = theta_s.size();
  const Eigen::Index k = joint.s22.rows();
  Matrix full(p + k, p + k);
  full.topLeftCorner(p, p) = joint.s11;
  full.topRightCorner(p, k) = joint.s12;
  full.bottomLeftCorner(k, p) = joint.s12.transpose();
  full.bottomRightCorner(k, k) = joint.s22;
  // Current estimate as a linear map T of the stacked vector (theta, D_1, ..., D_q).
  Matrix t = Matrix::Zero(p, p + k);
  t.leftCols(p).setIdentity();
  std::vector<SigmaBlocks> steps;
  Eigen::Index off = p;
  for (const auto& pr : pairs) {
    const Eigen::Index dk = pr.vartheta_s.size();
    require(off + dk <= p + k, ErrorCode::DimensionMismatch, "pairs exceed the joint sigma");
    const Matrix e_rows = full.middleRows(off, dk);  // E_k * full
    SigmaBlocks sb{symmetrize(t * full * t.transpose()), t * e_rows.transpose(),
                   symmetrize(full.block(off, off, dk, dk))};
    const auto sol = solve_psd(sb.s22, sb.s12.transpose());
    t.middleCols(off, dk) -= sol.x.transpose();
    steps.push_back(std::move(sb));
    off += dk;
  }
  require(off == p + k, ErrorCode::DimensionMismatch, "pairs do not cover the joint sigma");
  return sequential_update(theta_s, pairs, steps, n);
}

Matrix projection_variance(const Matrix& psi, const Matrix& phi, const Vector& pi, const Vector& prob) {
  const Eigen::Index n = psi.rows();
  require(phi.rows() == n && pi.size() == n && (prob.size() == 0 || prob.size() == n), ErrorCode::DimensionMismatch,
          "draw arrays must have equal length");
  require(n >= 1, ErrorCode::InvalidArgument, "no draws");
  require((pi.array() > 0.0).all() && (pi.array() <= 1.0).all(), ErrorCode::InvalidArgument, "pi must lie in (0, 1]");
  const Vector p = prob.size() ? prob : Vector::Constant(n, 1.0 / static_cast<double>(n));
  const Vector a = p.cwiseQuotient(pi);
  const Vector b = a.cwiseProduct((1.0 - pi.array()).matrix());
  const Matrix e1 = psi.transpose() * a.asDiagonal() * psi;
  const Matrix c = psi.transpose() * b.asDiagonal() * phi;
  const Matrix m = symmetrize(phi.transpose() * b.asDiagonal() * phi);
  if (m.cwiseAbs().maxCoeff() == 0.0 && c.cwiseAbs().maxCoeff() == 0.0) return symmetrize(e1);
  Eigen::SelfAdjointEigenSolver<Matrix> es(m);
  const double top = es.eigenvalues().cwiseAbs().maxCoeff();
  require(top > 0.0 && es.eigenvalues().minCoeff() > 1e-12 * top, ErrorCode::SingularMiddleBlock,
          "middle block of the variance formula is singular");
  return symmetrize(e1 - c * m.ldlt().solve(c.transpose()));
}

// ---------------------------------------------------------------------------
// orchestration

FitResult fit_original(const TwoPhaseDataset& data, const ModelSpec& model) {
  const auto views = split(data);
  require(!views.subsample.empty(), ErrorCode::InsufficientCompleteCases, "no complete cases");
  return fit_model(model.kind, make_fit_data(views.subsample, model.layout, Weighting::Ipw));
}

namespace {

WorkingPair compute_pair(const TwoPhaseDataset& data, const FitResult& fit, const UpdateProblem& problem,
                         std::size_t spec, double lambda) {
  const auto& ws = problem.specs[spec];
  WorkingPair pair;
  if (const auto* dw = std::get_if<DefaultWorking>(&ws.kind)) {
    pair = default_working_pair(data, problem.model, *dw);
  } else {
    const auto& ps = std::get<PhiStarWorking>(ws.kind);
    const CondDist dist = fit_cond_dist(ps.recipe, split(data).subsample);
    pair = solve_working_pair(data, fit.theta, problem.model, fit.nuisance, dist, lambda, problem.penalty,
                              problem.root, problem.include_cox_jump, problem.hermite_order);
  }
  pair.label = ws.label;
  return pair;
}

const std::vector<double>& grid_of(const WorkingSpec& ws) {
  static const std::vector<double> zero{0.0};
  if (const auto* ps = std::get_if<PhiStarWorking>(&ws.kind)) return ps->lambda_grid;
  return zero;
}

struct Replicate {
  std::shared_ptr<const TwoPhaseDataset> data;
  std::optional<FitResult> fit;
  std::vector<std::optional<WorkingPair>> pairs;
  bool ok = false;
};

}  // namespace

AnalysisResult analyze(const TwoPhaseDataset& data, const UpdateProblem& problem,
                       const std::vector<MethodSpec>& methods, const AnalysisConfig& cfg) {
  require(cfg.B >= 2, ErrorCode::InvalidArgument, "bootstrap needs B >= 2");
  const std::size_t nspec = problem.specs.size();
  for (const auto& ws : problem.specs) {
    const auto& g = grid_of(ws);
    require(!g.empty(), ErrorCode::InvalidArgument, "empty lambda grid for '" + ws.label + "'");
  }
  for (const auto& m : methods) {
    for (int s : m.specs) {
      require(s >= 0 && static_cast<std::size_t>(s) < nspec, ErrorCode::InvalidArgument,
              "method '" + m.label + "' refers to an unknown working spec");
    }
  }

  AnalysisResult res;
  res.n = data.size();
  const FitResult main_fit = fit_original(data, problem.model);
  res.theta_s = main_fit.theta;
  const int p = static_cast<int>(res.theta_s.size());

  // Stage 1: every bootstrap replicate at the smallest lambda of each grid.
  std::vector<Replicate> reps(cfg.B);
  parallel_for(cfg.B, cfg.threads, [&](std::size_t b) {
    Replicate& rep = reps[b];
    rep.pairs.assign(nspec, std::nullopt);
    try {
      Rng rng(cfg.seed, cfg.stream_offset + b);
      rep.data = std::make_shared<const TwoPhaseDataset>(bootstrap_resample(data, rng));
      rep.fit = fit_original(*rep.data, problem.model);
      rep.ok = rep.fit->theta.allFinite();
    } catch (const Error&) {
      rep.ok = false;
    }
    if (!rep.ok) return;
    for (std::size_t s = 0; s < nspec; ++s) {
      try {
        rep.pairs[s] = compute_pair(*rep.data, *rep.fit, problem, s, grid_of(problem.specs[s]).front());
      } catch (const Error&) {
        if (std::holds_alternative<DefaultWorking>(problem.specs[s].kind)) {
          rep.ok = false;
          return;
        }
      }
    }
  });

  // Stage 2: walk each grid upward while the replicates show outliers.
  res.lambdas.resize(nspec);
  for (std::size_t s = 0; s < nspec; ++s) {
    const auto& grid = grid_of(problem.specs[s]);
    if (grid.size() == 1) {
      res.lambdas[s] = {grid.front(), 0, false};
      continue;
    }
    res.lambdas[s] = select_lambda(grid, [&](std::size_t i) {
      if (i > 0) {
        parallel_for(cfg.B, cfg.threads, [&](std::size_t b) {
          Replicate& rep = reps[b];
          if (!rep.ok) return;
          try {
            rep.pairs[s] = compute_pair(*rep.data, *rep.fit, problem, s, grid[i]);
          } catch (const Error&) {
            rep.pairs[s].reset();
          }
        });
      }
      std::vector<std::optional<WorkingPair>> col;
      for (const auto& rep : reps) {
        if (rep.ok) col.push_back(rep.pairs[s]);
      }
      return has_outliers(col);
    });
  }

  // Stage 3: working pairs on the data at the selected lambdas.
  res.pairs.reserve(nspec);
  for (std::size_t s = 0; s < nspec; ++s) res.pairs.push_back(compute_pair(data, main_fit, problem, s, res.lambdas[s].lambda));
  for (const auto& pr : res.pairs) res.group_sizes.push_back(static_cast<int>(pr.vartheta_s.size()));

  // Stage 4: shared covariance of (theta*, D_1*, ..., D_q*).
  std::vector<Vector> rows;
  for (const auto& rep : reps) {
    if (!rep.ok) continue;
    bool complete = true;
    for (const auto& pr : rep.pairs) complete = complete && pr.has_value();
    if (!complete) continue;
    Eigen::Index width = p;
    for (const auto& pr : rep.pairs) width += pr->vartheta_s.size();
    Vector row(width);
    row.head(p) = rep.fit->theta;
    Eigen::Index off = p;
    for (const auto& pr : rep.pairs) {
      const Vector dlt = pr->difference();
      row.segment(off, dlt.size()) = dlt;
      off += dlt.size();
    }
    if (row.allFinite()) rows.push_back(std::move(row));
  }
  res.boot_failures = cfg.B - rows.size();
  check_failures(res.boot_failures, cfg.B, rows.size());
  Matrix draws(static_cast<Eigen::Index>(rows.size()), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) draws.row(static_cast<Eigen::Index>(r)) = rows[r].transpose();
  res.sigma = static_cast<double>(res.n) * sample_cov(draws);

  for (const auto& m : methods) {
    MethodEstimate est;
    est.label = m.label;
    std::vector<WorkingPair> chosen;
    for (int s : m.specs) chosen.push_back(res.pairs[static_cast<std::size_t>(s)]);
    const auto blocks = select_blocks(res.sigma, p, res.group_sizes, m.specs);
    const auto upd = update(res.theta_s, chosen, blocks, res.n);
    est.estimate = upd.theta_bar;
    est.cov = upd.cov;
    est.se = upd.cov.diagonal().cwiseMax(0.0).cwiseSqrt();
    est.ridged = upd.ridged;
    res.methods.push_back(std::move(est));
  }
  return res;
}

}  // namespace tpu
