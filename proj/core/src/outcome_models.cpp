#include "tpu/outcome_models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include <Eigen/Cholesky>
#include <Eigen/QR>

namespace tpu {

std::string_view to_string(ModelKind k) noexcept {
  switch (k) {
    case ModelKind::Linear: return "linear";
    case ModelKind::Logistic: return "logistic";
    case ModelKind::Cox: return "cox";
  }
  return "unknown";
}

ModelKind parse_model_kind(std::string_view s) {
  if (s == "linear") return ModelKind::Linear;
  if (s == "logistic") return ModelKind::Logistic;
  if (s == "cox") return ModelKind::Cox;
  fail(ErrorCode::InvalidArgument, "unknown model '" + std::string(s) + "'");
}

OutcomeKind outcome_kind_for(ModelKind k) noexcept {
  switch (k) {
    case ModelKind::Linear: return OutcomeKind::Continuous;
    case ModelKind::Logistic: return OutcomeKind::Binary;
    case ModelKind::Cox: return OutcomeKind::Survival;
  }
  return OutcomeKind::Continuous;
}

void CovariateLayout::build(std::span<const double> x, const Vector& z, std::span<double> out) const {
  std::size_t k = 0;
  if (intercept) out[k++] = 1.0;
  if (use_x) {
    for (double v : x) out[k++] = v;
  }
  for (int c : z_cols) out[k++] = z[c];
}

Vector CovariateLayout::build(const Subject& s) const {
  const int x_dim = s.x ? static_cast<int>(s.x->size()) : 0;
  require(!use_x || s.x.has_value(), ErrorCode::InconsistentMissingness,
          "regressors need x but the subject has r = 0");
  Vector w(dim(x_dim));
  std::span<const double> xs;
  if (s.x) xs = std::span<const double>(s.x->data(), s.x->size());
  build(xs, s.z, std::span<double>(w.data(), w.size()));
  return w;
}

std::vector<std::string> CovariateLayout::labels(const ColumnNames& names) const {
  std::vector<std::string> out;
  if (intercept) out.emplace_back("(intercept)");
  if (use_x) out.insert(out.end(), names.x.begin(), names.x.end());
  for (int c : z_cols) out.push_back(names.z.at(c));
  return out;
}

FitData make_fit_data(const SampleView& view, const CovariateLayout& layout, Weighting weighting) {
  FitData fd;
  const auto& data = view.dataset();
  const int d = layout.dim(data.x_dim());
  fd.outcomes.reserve(view.size());
  fd.w.resize(static_cast<Eigen::Index>(view.size()), d);
  fd.weights.resize(static_cast<Eigen::Index>(view.size()));
  for (std::size_t k = 0; k < view.size(); ++k) {
    const Subject& s = view[k];
    fd.outcomes.push_back(s.outcome);
    fd.w.row(static_cast<Eigen::Index>(k)) = layout.build(s).transpose();
    fd.weights[static_cast<Eigen::Index>(k)] = weighting == Weighting::Ipw ? s.r / s.pi : 1.0;
  }
  return fd;
}

namespace {

double outcome_value(const Outcome& o) {
  if (const auto* c = std::get_if<ContinuousOutcome>(&o)) return c->y;
  if (const auto* b = std::get_if<BinaryOutcome>(&o)) return static_cast<double>(b->y);
  fail(ErrorCode::InvalidArgument, "survival outcome where a scalar outcome was expected");
}

void check_rank(const FitData& data) {
  const Eigen::Index n = data.w.rows();
  const Eigen::Index d = data.w.cols();
  require(n >= d && d > 0, ErrorCode::RankDeficient, "fewer observations than regressors");
  Matrix sw = data.weights.cwiseSqrt().asDiagonal() * data.w;
  Eigen::ColPivHouseholderQR<Matrix> qr(sw);
  qr.setThreshold(1e-10);
  require(qr.rank() == d, ErrorCode::RankDeficient, "weighted design matrix is rank deficient");
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double logistic_loglik(const FitData& data, const Vector& theta) {
  const Vector eta = data.w * theta;
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    const double y = outcome_value(data.outcomes[i]);
    ll += data.weights[i] * (y * eta[i] - softplus(eta[i]));
  }
  return ll;
}

}  // namespace

FitResult fit_linear(const FitData& data) {
  check_rank(data);
  const Eigen::Index n = data.w.rows();
  Vector y(n);
  for (Eigen::Index i = 0; i < n; ++i) y[i] = outcome_value(data.outcomes[i]);
  const Vector sw = data.weights.cwiseSqrt();
  Eigen::ColPivHouseholderQR<Matrix> qr(sw.asDiagonal() * data.w);
  FitResult fr;
  fr.theta = qr.solve(sw.cwiseProduct(y));
  const Vector resid = y - data.w * fr.theta;
  const double wsum = data.weights.sum();
  const double sigma2 = data.weights.dot(resid.cwiseAbs2()) / wsum;
  const double yscale = std::max(1.0, y.cwiseAbs().maxCoeff());
  fr.degenerate = std::sqrt(sigma2) <= 1e-10 * yscale;
  fr.nuisance = LinearNuisance{std::sqrt(sigma2)};
  const Vector score = data.w.transpose() * data.weights.cwiseProduct(resid);
  fr.score_norm = score.cwiseAbs().maxCoeff();
  fr.converged = true;
  fr.iterations = 1;
  return fr;
}

FitResult fit_logistic(const FitData& data) {
  for (const auto& o : data.outcomes) {
    const double y = outcome_value(o);
    require(y == 0.0 || y == 1.0, ErrorCode::InvalidArgument, "logistic outcome must be 0 or 1");
  }
  check_rank(data);
  const Eigen::Index d = data.w.cols();
  Vector theta = Vector::Zero(d);
  FitResult fr;
  double ll = logistic_loglik(data, theta);
  constexpr int kMaxIter = 200;
  for (int iter = 1; iter <= kMaxIter; ++iter) {
    const Vector eta = data.w * theta;
    Vector resid(eta.size());
    Vector curv(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      const double p = sigmoid(eta[i]);
      resid[i] = data.weights[i] * (outcome_value(data.outcomes[i]) - p);
      curv[i] = data.weights[i] * p * (1.0 - p);
    }
    const Vector score = data.w.transpose() * resid;
    const Matrix info = data.w.transpose() * curv.asDiagonal() * data.w;
    fr.score_norm = score.cwiseAbs().maxCoeff();
    fr.iterations = iter;
    if (fr.score_norm <= 1e-10 * std::max(1.0, data.weights.sum())) {
      fr.converged = true;
      break;
    }
    Eigen::LDLT<Matrix> ldlt(info);
    Vector step = ldlt.solve(score);
    if (!step.allFinite()) fail(ErrorCode::Separation, "logistic information matrix collapsed");
    double t = 1.0;
    Vector next = theta + step;
    double ll_next = logistic_loglik(data, next);
    for (int k = 0; k < 40 && !(ll_next >= ll - 1e-12 * std::abs(ll)); ++k) {
      t *= 0.5;
      next = theta + t * step;
      ll_next = logistic_loglik(data, next);
    }
    theta = next;
    ll = ll_next;
    if (theta.norm() > 50.0) fail(ErrorCode::Separation, "logistic estimates diverge (|theta| > 50)");
    if ((t * step).cwiseAbs().maxCoeff() <= 1e-13 * std::max(1.0, theta.cwiseAbs().maxCoeff())) {
      fr.converged = true;
      break;
    }
  }
  if (!fr.converged) throw NonConvergence("logistic Newton iteration cap reached", theta, fr.score_norm);
  // The score flattens out long before |theta| reaches 50 on separated data, so
  // a "converged" fit with fitted probabilities pinned at 0/1 is divergence too.
  if ((data.w * theta).cwiseAbs().maxCoeff() > 30.0) {
    fail(ErrorCode::Separation, "logistic fit pushes probabilities to 0/1");
  }
  fr.theta = theta;
  fr.nuisance = LogisticNuisance{};
  return fr;
}

// ---------------------------------------------------------------------------
// Cox

namespace {

struct SortedCox {
  std::vector<Eigen::Index> order;  // ascending time
  Vector times;
  std::vector<int> status;
};

SortedCox sort_cox(const FitData& data) {
  SortedCox s;
  const Eigen::Index n = data.w.rows();
  s.order.resize(n);
  std::iota(s.order.begin(), s.order.end(), Eigen::Index{0});
  auto time_of = [&](Eigen::Index i) { return std::get<SurvivalOutcome>(data.outcomes[i]).time; };
  std::stable_sort(s.order.begin(), s.order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return time_of(a) < time_of(b); });
  s.times.resize(n);
  s.status.resize(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto& o = std::get<SurvivalOutcome>(data.outcomes[s.order[k]]);
    s.times[k] = o.time;
    s.status[k] = o.status;
  }
  return s;
}

struct CoxDerivatives {
  double loglik = 0.0;
  Vector score;
  Matrix info;
};

// Breslow partial likelihood with shifted exponentials.
CoxDerivatives cox_derivatives(const FitData& data, const SortedCox& s, const Vector& theta, bool want_info) {
  const Eigen::Index n = data.w.rows();
  const Eigen::Index d = data.w.cols();
  const Vector eta = data.w * theta;
  const double shift = n ? eta.maxCoeff() : 0.0;
  CoxDerivatives out;
  out.score = Vector::Zero(d);
  out.info = Matrix::Zero(d, d);
  double s0 = 0.0;
  Vector s1 = Vector::Zero(d);
  Matrix s2 = Matrix::Zero(d, d);
  Eigen::Index k = n - 1;
  while (k >= 0) {
    // accumulate the tie group at times[k]
    const double t = s.times[k];
    double dw = 0.0;
    Vector ev = Vector::Zero(d);
    double ev_eta = 0.0;
    Eigen::Index j = k;
    for (; j >= 0 && s.times[j] == t; --j) {
      const Eigen::Index i = s.order[j];
      const double wi = data.weights[i];
      const double e = wi * std::exp(eta[i] - shift);
      s0 += e;
      s1 += e * data.w.row(i).transpose();
      if (want_info) s2.noalias() += e * data.w.row(i).transpose() * data.w.row(i);
      if (s.status[j] == 1) {
        dw += wi;
        ev += wi * data.w.row(i).transpose();
        ev_eta += wi * eta[i];
      }
    }
    if (dw > 0.0) {
      const Vector ebar = s1 / s0;
      out.loglik += ev_eta - dw * (std::log(s0) + shift);
      out.score += ev - dw * ebar;
      if (want_info) out.info += dw * (s2 / s0 - ebar * ebar.transpose());
    }
    k = j;
  }
  return out;
}

}  // namespace

double cox_log_partial_likelihood(const FitData& data, const Vector& theta) {
  return cox_derivatives(data, sort_cox(data), theta, false).loglik;
}

CoxNuisance cox_nuisance(const FitData& data, const Vector& theta) {
  const SortedCox s = sort_cox(data);
  const Eigen::Index n = data.w.rows();
  const Eigen::Index d = data.w.cols();
  CoxNuisance nu;
  nu.times = s.times;
  nu.status = s.status;
  nu.w.resize(n, d);
  nu.weights.resize(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    nu.w.row(k) = data.w.row(s.order[k]);
    nu.weights[k] = data.weights[s.order[k]];
  }
  const double wsum = nu.weights.sum();
  const Vector eta = nu.w * theta;
  // Risk-set sums S0 at each position (suffix sums over time-sorted subjects).
  Vector suffix(n + 1);
  suffix[n] = 0.0;
  for (Eigen::Index k = n - 1; k >= 0; --k) suffix[k] = suffix[k + 1] + nu.weights[k] * std::exp(eta[k]);
  std::vector<double> et, jumps, fb;
  double cum_events = 0.0;
  for (Eigen::Index k = 0; k < n;) {
    Eigen::Index j = k;
    double dw = 0.0;
    while (j < n && nu.times[j] == nu.times[k]) {
      if (nu.status[j] == 1) dw += nu.weights[j];
      ++j;
    }
    if (dw > 0.0) {
      et.push_back(nu.times[k]);
      jumps.push_back(dw / suffix[k]);
      cum_events += dw;
      fb.push_back(cum_events / wsum);
    }
    k = j;
  }
  nu.event_times = Eigen::Map<Vector>(et.data(), static_cast<Eigen::Index>(et.size()));
  nu.jumps = Eigen::Map<Vector>(jumps.data(), static_cast<Eigen::Index>(jumps.size()));
  nu.fbar = Eigen::Map<Vector>(fb.data(), static_cast<Eigen::Index>(fb.size()));
  nu.cumhaz.resize(nu.jumps.size());
  double c = 0.0;
  for (Eigen::Index k = 0; k < nu.jumps.size(); ++k) nu.cumhaz[k] = (c += nu.jumps[k]);
  return nu;
}

double CoxNuisance::cumulative_hazard(double t) const {
  const auto* b = event_times.data();
  const auto* e = b + event_times.size();
  const auto pos = std::upper_bound(b, e, t) - b;
  return pos == 0 ? 0.0 : cumhaz[pos - 1];
}

double CoxNuisance::jump_at(double t) const {
  const auto* b = event_times.data();
  const auto* e = b + event_times.size();
  const auto* it = std::lower_bound(b, e, t);
  return (it != e && *it == t) ? jumps[it - b] : 0.0;
}

double CoxNuisance::fbar_at(double t) const {
  const auto* b = event_times.data();
  const auto* e = b + event_times.size();
  const auto pos = std::upper_bound(b, e, t) - b;
  return pos == 0 ? 0.0 : fbar[pos - 1];
}

FitResult fit_cox(const FitData& data) {
  const Eigen::Index n = data.w.rows();
  const Eigen::Index d = data.w.cols();
  require(d > 0, ErrorCode::InvalidArgument, "Cox model needs at least one regressor");
  double events = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    events += std::get<SurvivalOutcome>(data.outcomes[i]).status * data.weights[i];
  }
  require(events > 0.0, ErrorCode::NoEvents, "no events in the Cox fitting sample");
  const SortedCox s = sort_cox(data);
  Vector theta = Vector::Zero(d);
  FitResult fr;
  auto der = cox_derivatives(data, s, theta, true);
  constexpr int kMaxIter = 100;
  for (int iter = 1; iter <= kMaxIter; ++iter) {
    fr.iterations = iter;
    fr.score_norm = der.score.cwiseAbs().maxCoeff();
    const double scale = std::max(1.0, events);
    Eigen::LDLT<Matrix> ldlt(der.info);
    const Vector dg = ldlt.vectorD().cwiseAbs();
    const bool singular = ldlt.info() != Eigen::Success || !(dg.maxCoeff() > 0.0) ||
                          dg.minCoeff() <= 1e-12 * std::max(dg.maxCoeff(), 1e-300);
    if (singular) {
      if (fr.score_norm <= 1e-10 * scale) {
        fr.flat = true;
        fr.converged = true;
        break;
      }
      fail(ErrorCode::RankDeficient, "Cox information matrix is singular");
    }
    if (fr.score_norm <= 1e-10 * scale) {
      fr.converged = true;
      break;
    }
    const Vector step = ldlt.solve(der.score);
    double t = 1.0;
    Vector next = theta + step;
    auto der_next = cox_derivatives(data, s, next, true);
    for (int k = 0; k < 40 && !(der_next.loglik >= der.loglik - 1e-12 * std::abs(der.loglik)); ++k) {
      t *= 0.5;
      next = theta + t * step;
      der_next = cox_derivatives(data, s, next, true);
    }
    const double moved = (next - theta).cwiseAbs().maxCoeff();
    theta = next;
    der = std::move(der_next);
    if (moved <= 1e-13 * std::max(1.0, theta.cwiseAbs().maxCoeff())) {
      fr.score_norm = der.score.cwiseAbs().maxCoeff();
      fr.converged = true;
      break;
    }
  }
  if (!fr.converged) throw NonConvergence("Cox Newton iteration cap reached", theta, fr.score_norm);
  fr.theta = theta;
  fr.nuisance = cox_nuisance(data, theta);
  return fr;
}

FitResult fit_model(ModelKind kind, const FitData& data) {
  switch (kind) {
    case ModelKind::Linear: return fit_linear(data);
    case ModelKind::Logistic: return fit_logistic(data);
    case ModelKind::Cox: return fit_cox(data);
  }
  fail(ErrorCode::InvalidArgument, "unknown model");
}

// ---------------------------------------------------------------------------
// Evaluators

CoxRiskSummary::CoxRiskSummary(const CoxNuisance& nu, const Vector& theta)
    : dim_(static_cast<int>(theta.size())) {
  const Eigen::Index n = nu.times.size();
  const Eigen::Index d = theta.size();
  require(nu.w.cols() == d, ErrorCode::DimensionMismatch, "Cox nuisance dimension does not match theta");
  require(n > 0, ErrorCode::InvalidArgument, "empty Cox nuisance");
  const Vector eta = nu.w * theta;
  shift_ = eta.maxCoeff();
  zero_ = Vector::Zero(d);

  std::vector<double> distinct;
  std::vector<Eigen::Index> first;
  for (Eigen::Index k = 0; k < n; ++k) {
    if (k == 0 || nu.times[k] != nu.times[k - 1]) {
      distinct.push_back(nu.times[k]);
      first.push_back(k);
    }
  }
  const auto m = static_cast<Eigen::Index>(distinct.size());
  distinct_times_ = Eigen::Map<Vector>(distinct.data(), m);
  ebar_.resize(d, m);
  Vector s0_at(m);
  double s0 = 0.0;
  Vector s1 = Vector::Zero(d);
  Eigen::Index k = n - 1;
  for (Eigen::Index g = m - 1; g >= 0; --g) {
    for (; k >= first[g]; --k) {
      const double e = nu.weights[k] * std::exp(eta[k] - shift_);
      s0 += e;
      s1 += e * nu.w.row(k).transpose();
    }
    s0_at[g] = s0;
    ebar_.col(g) = s1 / s0;
  }

  // Event-time cumulative sums of dF/s0 and dF ebar/s0 (without the exp(shift) factor).
  std::vector<double> et;
  std::vector<double> acum;
  std::vector<Vector> bcum;
  double a = 0.0;
  Vector b = Vector::Zero(d);
  for (Eigen::Index g = 0; g < m; ++g) {
    double dw = 0.0;
    const Eigen::Index end = g + 1 < m ? first[g + 1] : n;
    for (Eigen::Index j = first[g]; j < end; ++j) {
      if (nu.status[j] == 1) dw += nu.weights[j];
    }
    if (dw > 0.0) {
      const double inc = dw / s0_at[g];
      a += inc;
      b += inc * ebar_.col(g);
      et.push_back(distinct[g]);
      acum.push_back(a);
      bcum.push_back(b);
    }
  }
  event_times_ = Eigen::Map<Vector>(et.data(), static_cast<Eigen::Index>(et.size()));
  a_cum_ = Eigen::Map<Vector>(acum.data(), static_cast<Eigen::Index>(acum.size()));
  b_cum_.resize(d, static_cast<Eigen::Index>(bcum.size()));
  for (std::size_t j = 0; j < bcum.size(); ++j) b_cum_.col(static_cast<Eigen::Index>(j)) = bcum[j];
}

CoxRiskSummary::Terms CoxRiskSummary::at(double t) const {
  Terms terms{};
  const auto* db = distinct_times_.data();
  const auto* de = db + distinct_times_.size();
  auto m = std::lower_bound(db, de, t) - db;
  if (m == distinct_times_.size()) m = distinct_times_.size() - 1;
  terms.ebar = ebar_.col(m).data();
  const auto* eb = event_times_.data();
  const auto* ee = eb + event_times_.size();
  const auto k = std::upper_bound(eb, ee, t) - eb;
  if (k == 0) {
    terms.a = 0.0;
    terms.b = zero_.data();
  } else {
    terms.a = a_cum_[k - 1];
    terms.b = b_cum_.col(k - 1).data();
  }
  return terms;
}

ModelEvaluator::ModelEvaluator(ModelKind kind, const Vector& theta, const Nuisance& nuisance,
                               bool include_cox_jump)
    : kind_(kind), theta_(theta), nuisance_(&nuisance), include_jump_(include_cox_jump) {
  switch (kind_) {
    case ModelKind::Linear: {
      const auto* ln = std::get_if<LinearNuisance>(&nuisance);
      require(ln != nullptr, ErrorCode::InvalidArgument, "linear model needs a LinearNuisance");
      require(ln->sigma > 0.0, ErrorCode::InvalidArgument, "linear nuisance sigma must be positive");
      sigma_ = ln->sigma;
      log_norm_ = -std::log(sigma_) - 0.5 * std::log(2.0 * std::numbers::pi);
      break;
    }
    case ModelKind::Logistic:
      require(std::holds_alternative<LogisticNuisance>(nuisance), ErrorCode::InvalidArgument,
              "logistic model needs a LogisticNuisance");
      break;
    case ModelKind::Cox: {
      const auto* cn = std::get_if<CoxNuisance>(&nuisance);
      require(cn != nullptr, ErrorCode::InvalidArgument, "Cox model needs a CoxNuisance");
      cox_ = std::make_unique<CoxRiskSummary>(*cn, theta_);
      break;
    }
  }
}

ModelEvaluator::Prepared ModelEvaluator::prepare(const Outcome& outcome) const {
  Prepared p;
  switch (kind_) {
    case ModelKind::Linear: {
      const auto* c = std::get_if<ContinuousOutcome>(&outcome);
      require(c != nullptr, ErrorCode::InvalidArgument, "linear model needs a continuous outcome");
      p.y = c->y;
      break;
    }
    case ModelKind::Logistic: {
      const auto* b = std::get_if<BinaryOutcome>(&outcome);
      require(b != nullptr, ErrorCode::InvalidArgument, "logistic model needs a binary outcome");
      require(b->y == 0 || b->y == 1, ErrorCode::InvalidArgument, "binary outcome must be 0 or 1");
      p.y = b->y;
      break;
    }
    case ModelKind::Cox: {
      const auto* s = std::get_if<SurvivalOutcome>(&outcome);
      require(s != nullptr, ErrorCode::InvalidArgument, "Cox model needs a survival outcome");
      const auto& nu = std::get<CoxNuisance>(*nuisance_);
      p.y = s->time;
      p.status = s->status;
      p.cumhaz = nu.cumulative_hazard(s->time);
      if (include_jump_ && s->status == 1) {
        const double j = nu.jump_at(s->time);
        p.log_jump = j > 0.0 ? std::log(j) : -std::numeric_limits<double>::infinity();
      }
      p.cox = cox_->at(s->time);
      break;
    }
  }
  return p;
}

double ModelEvaluator::log_density(const Prepared& p, std::span<const double> w) const {
  double eta = 0.0;
  for (std::size_t j = 0; j < w.size(); ++j) eta += w[j] * theta_[static_cast<Eigen::Index>(j)];
  switch (kind_) {
    case ModelKind::Linear: {
      const double r = (p.y - eta) / sigma_;
      return log_norm_ - 0.5 * r * r;
    }
    case ModelKind::Logistic: return p.y * eta - softplus(eta);
    case ModelKind::Cox: {
      double lf = p.status * eta - p.cumhaz * std::exp(eta);
      if (include_jump_ && p.status == 1) lf += p.log_jump;
      return lf;
    }
  }
  return 0.0;
}

double ModelEvaluator::eval(const Prepared& p, std::span<const double> w, std::span<double> psi) const {
  const std::size_t d = w.size();
  double eta = 0.0;
  for (std::size_t j = 0; j < d; ++j) eta += w[j] * theta_[static_cast<Eigen::Index>(j)];
  switch (kind_) {
    case ModelKind::Linear: {
      const double resid = p.y - eta;
      for (std::size_t j = 0; j < d; ++j) psi[j] = resid * w[j];
      const double r = resid / sigma_;
      return log_norm_ - 0.5 * r * r;
    }
    case ModelKind::Logistic: {
      const double resid = p.y - sigmoid(eta);
      for (std::size_t j = 0; j < d; ++j) psi[j] = resid * w[j];
      return p.y * eta - softplus(eta);
    }
    case ModelKind::Cox: {
      const double e_rel = std::exp(eta - cox_->shift());
      const double delta = p.status;
      for (std::size_t j = 0; j < d; ++j) {
        psi[j] = delta * (w[j] - p.cox.ebar[j]) - e_rel * (p.cox.a * w[j] - p.cox.b[j]);
      }
      double lf = delta * eta - p.cumhaz * std::exp(eta);
      if (include_jump_ && p.status == 1) lf += p.log_jump;
      return lf;
    }
  }
  return 0.0;
}

Vector influence(ModelKind kind, const Outcome& outcome, const Vector& w, const Vector& theta,
                 const Nuisance& nuisance) {
  require(w.size() == theta.size(), ErrorCode::DimensionMismatch, "regressor/theta dimension mismatch");
  ModelEvaluator ev(kind, theta, nuisance);
  const auto p = ev.prepare(outcome);
  Vector psi(w.size());
  ev.eval(p, std::span<const double>(w.data(), w.size()), std::span<double>(psi.data(), psi.size()));
  return psi;
}

double log_cond_density(ModelKind kind, const Outcome& outcome, const Vector& w, const Vector& theta,
                        const Nuisance& nuisance, bool include_cox_jump) {
  require(w.size() == theta.size(), ErrorCode::DimensionMismatch, "regressor/theta dimension mismatch");
  ModelEvaluator ev(kind, theta, nuisance, include_cox_jump);
  return ev.log_density(ev.prepare(outcome), std::span<const double>(w.data(), w.size()));
}

double cond_density(ModelKind kind, const Outcome& outcome, const Vector& w, const Vector& theta,
                    const Nuisance& nuisance, bool include_cox_jump) {
  const double lf = log_cond_density(kind, outcome, w, theta, nuisance, include_cox_jump);
  require(!std::isnan(lf), ErrorCode::ZeroDensity, "density is not a number");
  const double f = std::exp(lf);
  require(f > 0.0 || include_cox_jump, ErrorCode::ZeroDensity, "conditional density underflows to zero");
  return f;
}

Vector model_score(ModelKind kind, const FitData& data, const Vector& theta) {
  Nuisance nu;
  switch (kind) {
    case ModelKind::Linear: nu = LinearNuisance{1.0}; break;
    case ModelKind::Logistic: nu = LogisticNuisance{}; break;
    case ModelKind::Cox: nu = cox_nuisance(data, theta); break;
  }
  ModelEvaluator ev(kind, theta, nu);
  Vector score = Vector::Zero(theta.size());
  Vector psi(theta.size());
  for (Eigen::Index i = 0; i < data.w.rows(); ++i) {
    const Vector wi = data.w.row(i).transpose();
    ev.eval(ev.prepare(data.outcomes[i]), std::span<const double>(wi.data(), wi.size()),
            std::span<double>(psi.data(), psi.size()));
    score += data.weights[i] * psi;
  }
  return score;
}

}  // namespace tpu
