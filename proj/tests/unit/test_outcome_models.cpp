#include <doctest.h>

#include <cmath>
#include <numbers>

#include "helpers.hpp"
#include "tpu/outcome_models.hpp"

using namespace tpu;
using tpu::test::vec;

namespace {

FitData make_data(std::vector<Outcome> outcomes, Matrix w, Vector weights = {}) {
  FitData d;
  const auto n = static_cast<Eigen::Index>(outcomes.size());
  d.outcomes = std::move(outcomes);
  d.w = std::move(w);
  d.weights = weights.size() ? weights : Vector::Ones(n);
  return d;
}

Matrix column(std::initializer_list<double> v) { return vec(v); }

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error thrown");
  return ErrorCode::Io;
}

FitData synth_fit_data(ModelKind kind, std::uint64_t seed, int n = 120) {
  Rng rng(seed, 0);
  std::vector<Outcome> out;
  Matrix w(n, 2);
  Vector wt(n);
  for (int i = 0; i < n; ++i) {
    w(i, 0) = rng.normal();
    w(i, 1) = rng.uniform() < 0.5 ? 1.0 : 0.0;
    wt[i] = 1.0 / (0.2 + 0.8 * rng.uniform());
    const double eta = 0.7 * w(i, 0) - 0.4 * w(i, 1);
    switch (kind) {
      case ModelKind::Linear:
        out.push_back(ContinuousOutcome{eta + rng.normal()});
        break;
      case ModelKind::Logistic:
        out.push_back(BinaryOutcome{rng.uniform() < 1 / (1 + std::exp(-eta)) ? 1 : 0});
        break;
      case ModelKind::Cox: {
        const double t = rng.exponential() / std::exp(eta);
        const double c = 2.0 * rng.uniform();
        out.push_back(SurvivalOutcome{std::min(t, c), t <= c ? 1 : 0});
        break;
      }
    }
  }
  if (kind != ModelKind::Cox) w.col(1).setOnes();  // intercept for the GLMs
  return make_data(std::move(out), w, wt);
}

}  // namespace

TEST_CASE("fit_linear closed form") {
  const auto f = fit_linear(make_data({ContinuousOutcome{1}, ContinuousOutcome{3}}, column({1, 2})));
  CHECK(f.theta[0] == doctest::Approx(1.4).epsilon(1e-12));
  CHECK(f.converged);
}

TEST_CASE("fit_linear exact fit is flagged degenerate") {
  Matrix w(3, 2);
  w << 1, 0, 1, 1, 1, 2;
  const auto f = fit_linear(make_data({ContinuousOutcome{1}, ContinuousOutcome{3}, ContinuousOutcome{5}}, w));
  CHECK(f.theta[0] == doctest::Approx(1.0));
  CHECK(f.theta[1] == doctest::Approx(2.0));
  CHECK(f.degenerate);
}

TEST_CASE("fit_linear rank deficiency") {
  Matrix w(3, 2);
  w << 1, 1, 2, 2, 3, 3;
  CHECK(code_of([&] {
          fit_linear(make_data({ContinuousOutcome{1}, ContinuousOutcome{2}, ContinuousOutcome{4}}, w));
        }) == ErrorCode::RankDeficient);
}

TEST_CASE("fit_linear sigma is the weighted MLE") {
  auto d = synth_fit_data(ModelKind::Linear, 3);
  const auto f = fit_linear(d);
  const Vector res = [&] {
    Vector r(d.w.rows());
    for (Eigen::Index i = 0; i < r.size(); ++i) r[i] = std::get<ContinuousOutcome>(d.outcomes[i]).y;
    return Vector(r - d.w * f.theta);
  }();
  const double s2 = d.weights.dot(res.cwiseAbs2()) / d.weights.sum();
  CHECK(std::get<LinearNuisance>(f.nuisance).sigma == doctest::Approx(std::sqrt(s2)).epsilon(1e-10));
}

TEST_CASE("fit_logistic symmetric data gives zero") {
  const auto f = fit_logistic(make_data(
      {BinaryOutcome{1}, BinaryOutcome{0}, BinaryOutcome{0}, BinaryOutcome{1}}, column({1, -1, 1, -1})));
  CHECK(std::abs(f.theta[0]) < 1e-10);
  const auto g = fit_logistic(make_data(
      {BinaryOutcome{1}, BinaryOutcome{0}, BinaryOutcome{1}, BinaryOutcome{0}}, column({1, 1, 1, 1})));
  CHECK(std::abs(g.theta[0]) < 1e-10);
}

TEST_CASE("fit_logistic separation") {
  CHECK(code_of([] {
          fit_logistic(make_data({BinaryOutcome{1}, BinaryOutcome{1}, BinaryOutcome{0}, BinaryOutcome{0}},
                                 column({1, 2, -1, -2})));
        }) == ErrorCode::Separation);
}

TEST_CASE("constant weights do not change the fits") {
  for (auto kind : {ModelKind::Linear, ModelKind::Logistic, ModelKind::Cox}) {
    auto d = synth_fit_data(kind, 17);
    d.weights.setOnes();
    auto d2 = d;
    d2.weights.setConstant(2.0);
    const auto a = fit_model(kind, d), b = fit_model(kind, d2);
    CHECK((a.theta - b.theta).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("fit_cox matches a grid search of the partial likelihood") {
  // no ties, pi = 1
  const std::vector<double> t{2.0, 5.0, 1.0, 4.0, 3.0};
  const std::vector<int> delta{1, 0, 1, 1, 1};
  const std::vector<double> x{0.5, -1.0, 1.2, 0.1, -0.3};
  std::vector<Outcome> out;
  for (int i = 0; i < 5; ++i) out.push_back(SurvivalOutcome{t[i], delta[i]});
  const auto d = make_data(out, column({0.5, -1.0, 1.2, 0.1, -0.3}));
  auto pl = [&](double b) {
    double l = 0.0;
    for (int i = 0; i < 5; ++i) {
      if (!delta[i]) continue;
      double s = 0.0;
      for (int j = 0; j < 5; ++j)
        if (t[j] >= t[i]) s += std::exp(b * x[j]);
      l += b * x[i] - std::log(s);
    }
    return l;
  };
  double best = 0.0, lo = -10.0, hi = 10.0;
  for (int round = 0; round < 6; ++round) {
    double best_v = -1e300;
    const double step = (hi - lo) / 2000.0;
    for (int k = 0; k <= 2000; ++k) {
      const double b = lo + k * step;
      if (pl(b) > best_v) {
        best_v = pl(b);
        best = b;
      }
    }
    lo = best - 2 * step;
    hi = best + 2 * step;
  }
  const auto f = fit_cox(d);
  CHECK(std::abs(f.theta[0] - best) < 1e-4);
  CHECK(cox_log_partial_likelihood(d, f.theta) == doctest::Approx(pl(f.theta[0])).epsilon(1e-12));
}

TEST_CASE("fit_cox flat score and no events") {
  const auto flat = fit_cox(make_data({SurvivalOutcome{1, 1}, SurvivalOutcome{2, 0}}, column({1, 1})));
  CHECK(flat.flat);
  CHECK(code_of([] { fit_cox(make_data({SurvivalOutcome{1, 0}, SurvivalOutcome{2, 0}}, column({1, 0}))); }) ==
        ErrorCode::NoEvents);
}

TEST_CASE("Breslow at theta = 0 is Nelson-Aalen") {
  Rng rng(8, 0);
  std::vector<Outcome> out;
  Matrix w(60, 1);
  for (int i = 0; i < 60; ++i) {
    // coarse times to force ties
    out.push_back(SurvivalOutcome{std::floor(5 * rng.uniform()) + 1, rng.uniform() < 0.7 ? 1 : 0});
    w(i, 0) = rng.normal();
  }
  const auto d = make_data(out, w);
  const auto nu = cox_nuisance(d, Vector::Zero(1));
  for (Eigen::Index k = 0; k < nu.event_times.size(); ++k) {
    const double tk = nu.event_times[k];
    double events = 0, risk = 0;
    for (const auto& o : out) {
      const auto& s = std::get<SurvivalOutcome>(o);
      events += s.time == tk && s.status;
      risk += s.time >= tk;
    }
    CHECK(nu.jumps[k] == doctest::Approx(events / risk).epsilon(1e-12));
    CHECK(nu.jumps[k] >= 0.0);
  }
  CHECK(nu.cumulative_hazard(0.0) == 0.0);
}

TEST_CASE("Cox influence matches a longhand Lin-Wei evaluation") {
  const std::vector<double> t{1.0, 2.0, 3.0};
  const std::vector<int> delta{1, 1, 0};
  const std::vector<double> x{0.3, -0.5, 1.0};
  std::vector<Outcome> out;
  for (int i = 0; i < 3; ++i) out.push_back(SurvivalOutcome{t[i], delta[i]});
  const auto d = make_data(out, column({0.3, -0.5, 1.0}));
  const double b = 0.4;
  const auto nu = cox_nuisance(d, vec({b}));
  auto ebar = [&](double s) {
    double s0 = 0, s1 = 0;
    for (int j = 0; j < 3; ++j)
      if (t[j] >= s) {
        s0 += std::exp(b * x[j]);
        s1 += x[j] * std::exp(b * x[j]);
      }
    return s1 / s0;
  };
  auto s0 = [&](double s) {
    double v = 0;
    for (int j = 0; j < 3; ++j)
      if (t[j] >= s) v += std::exp(b * x[j]);
    return v;
  };
  for (int i = 0; i < 3; ++i) {
    double psi = delta[i] * (x[i] - ebar(t[i]));
    for (int j = 0; j < 3; ++j) {
      if (delta[j] && t[j] <= t[i]) psi -= std::exp(b * x[i]) / s0(t[j]) * (x[i] - ebar(t[j]));
    }
    const Vector got = influence(ModelKind::Cox, out[i], vec({x[i]}), vec({b}), nu);
    CHECK(got[0] == doctest::Approx(psi).epsilon(1e-12));
  }
}

TEST_CASE("score-zero at the fit for all models") {
  for (auto kind : {ModelKind::Linear, ModelKind::Logistic, ModelKind::Cox}) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      const auto d = synth_fit_data(kind, seed);
      const auto f = fit_model(kind, d);
      Vector s = Vector::Zero(f.theta.size());
      for (std::size_t i = 0; i < d.outcomes.size(); ++i) {
        const Vector w = d.w.row(static_cast<Eigen::Index>(i)).transpose();
        s += d.weights[static_cast<Eigen::Index>(i)] * influence(kind, d.outcomes[i], w, f.theta, f.nuisance);
      }
      CHECK(s.cwiseAbs().maxCoeff() <= 1e-6);
    }
  }
}

TEST_CASE("logistic score Jacobian matches finite differences") {
  const auto d = synth_fit_data(ModelKind::Logistic, 5);
  Rng rng(2, 2);
  for (int trial = 0; trial < 5; ++trial) {
    const Vector th = vec({rng.normal(), rng.normal()});
    auto f = [&](const Vector& t) { return model_score(ModelKind::Logistic, d, t); };
    const Matrix fd = fd_jacobian(f, th, f(th));
    Matrix an = Matrix::Zero(2, 2);
    for (Eigen::Index i = 0; i < d.w.rows(); ++i) {
      const double p = 1 / (1 + std::exp(-d.w.row(i).dot(th)));
      an -= d.weights[i] * p * (1 - p) * d.w.row(i).transpose() * d.w.row(i);
    }
    CHECK((fd - an).cwiseAbs().maxCoeff() <= 1e-4 * (1 + an.cwiseAbs().maxCoeff()));
  }
}

TEST_CASE("cond_density hand values and normalization") {
  CHECK(cond_density(ModelKind::Linear, ContinuousOutcome{2.0}, vec({2.0}), vec({1.0}), LinearNuisance{1.0}) ==
        doctest::Approx(1 / std::sqrt(2 * std::numbers::pi)));
  for (int y : {0, 1})
    CHECK(cond_density(ModelKind::Logistic, BinaryOutcome{y}, vec({1.3}), vec({0.0}), LogisticNuisance{}) ==
          doctest::Approx(0.5));
  CHECK(cond_density(ModelKind::Logistic, BinaryOutcome{0}, vec({1.3}), vec({0.7}), LogisticNuisance{}) +
            cond_density(ModelKind::Logistic, BinaryOutcome{1}, vec({1.3}), vec({0.7}), LogisticNuisance{}) ==
        doctest::Approx(1.0).epsilon(1e-15));
  // linear density integrates to one (trapezoid on a wide grid)
  double mass = 0.0;
  const double h = 1e-3;
  for (double y = -12; y <= 12; y += h)
    mass += h * cond_density(ModelKind::Linear, ContinuousOutcome{y}, vec({1.0}), vec({0.5}), LinearNuisance{1.7});
  CHECK(std::abs(mass - 1.0) < 1e-6);

  // Cox with Lambda(T) = 0.3 and theta'W = 0, censored
  CoxNuisance nu;
  nu.event_times = vec({1.0});
  nu.jumps = vec({0.3});
  nu.cumhaz = vec({0.3});
  nu.fbar = vec({0.5});
  nu.times = vec({1.0, 2.0});
  nu.status = {1, 0};
  nu.w = Matrix::Zero(2, 1);
  nu.weights = Vector::Ones(2);
  CHECK(cond_density(ModelKind::Cox, SurvivalOutcome{2.0, 0}, vec({0.0}), vec({1.0}), nu) ==
        doctest::Approx(std::exp(-0.3)).epsilon(1e-12));
  CHECK(std::exp(-0.3) == doctest::Approx(0.7408).epsilon(1e-4));
}

TEST_CASE("linear influence vanishes on the regression surface") {
  const Vector psi = influence(ModelKind::Linear, ContinuousOutcome{3.0}, vec({1.0, 2.0}), vec({1.0, 1.0}),
                               LinearNuisance{1.0});
  CHECK(psi.cwiseAbs().maxCoeff() == 0.0);
}
