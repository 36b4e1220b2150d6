#include <doctest.h>

#include <cmath>
#include <map>

#include "helpers.hpp"
#include "tpu/simulation.hpp"
#include "tpu/update_engine.hpp"

using namespace tpu;
using tpu::test::vec;

namespace {

WorkingPair pair_with(const Vector& d) {
  WorkingPair p;
  p.vartheta_s = d;
  p.vartheta_f = Vector::Zero(d.size());
  return p;
}

Matrix random_psd(Rng& rng, int d) {
  Matrix g(d, d + 2);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
  return g * g.transpose() / (d + 2);
}

ScenarioConfig small_cfg(ModelKind kind, std::size_t n = 300, std::size_t n2 = 100) {
  ScenarioConfig cfg;
  cfg.model = kind;
  cfg.n = n;
  cfg.n2 = n2;
  return cfg;
}

// Dataset where every subject is complete: the expensive covariate is also stored as z[0].
TwoPhaseDataset census_with_copy(const TwoPhaseDataset& src) {
  std::vector<Subject> subs;
  Rng rng(99, 0);
  for (const auto& s : src.subjects()) {
    Subject c = s;
    const double x = s.x ? (*s.x)[0] : rng.normal();
    c.x = vec({x});
    c.z = vec({x});
    c.r = 1;
    c.pi = 1.0;
    c.stratum = 0;
    subs.push_back(std::move(c));
  }
  const auto n = subs.size();
  return TwoPhaseDataset(std::move(subs), 1, 1, McarDesign{n});
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error thrown");
  return ErrorCode::Io;
}

}  // namespace

TEST_CASE("penalty coefficients") {
  CHECK(penalty_coefficient(0.01, 1000, PenaltyScaling::Averaged) == doctest::Approx(2 * 0.01 * 100.0));
  CHECK(penalty_coefficient(0.01, 1000, PenaltyScaling::Literal) == doctest::Approx(2 * 0.01 * 0.1));
  CHECK(parse_penalty_scaling("literal") == PenaltyScaling::Literal);
  CHECK(parse_penalty_scaling(to_string(PenaltyScaling::Averaged)) == PenaltyScaling::Averaged);
}

TEST_CASE("update: scalar hand example") {
  SigmaBlocks s{Matrix::Constant(1, 1, 1.0), Matrix::Constant(1, 1, 0.5), Matrix::Constant(1, 1, 1.0)};
  const auto r = update(vec({1.0}), {pair_with(vec({0.2}))}, s, 100);
  CHECK(r.theta_bar[0] == doctest::Approx(0.9).epsilon(1e-14));
  CHECK(r.cov(0, 0) == doctest::Approx(0.0075).epsilon(1e-14));
  CHECK(r.relative_efficiency[0] == doctest::Approx(0.01 / 0.0075));
}

TEST_CASE("update: zero cross block and zero differences") {
  Rng rng(1, 0);
  const Matrix big = random_psd(rng, 4);
  SigmaBlocks s{big.topLeftCorner(2, 2), Matrix::Zero(2, 2), big.bottomRightCorner(2, 2)};
  const auto r = update(vec({1.0, -1.0}), {pair_with(vec({0.3, 0.1}))}, s, 50);
  CHECK(r.theta_bar == vec({1.0, -1.0}));
  CHECK((r.cov - s.s11 / 50).cwiseAbs().maxCoeff() < 1e-14);

  SigmaBlocks s2{big.topLeftCorner(2, 2), big.topRightCorner(2, 2), big.bottomRightCorner(2, 2)};
  const auto z = update(vec({1.0, -1.0}), {pair_with(vec({0.0, 0.0}))}, s2, 50);
  CHECK(z.theta_bar == vec({1.0, -1.0}));
  CHECK_THROWS_AS(update(vec({1.0}), {pair_with(vec({0.0, 0.0}))}, s2, 50), Error);
}

TEST_CASE("update: duplicated component engages the ridge and matches the single update") {
  SigmaBlocks single{Matrix::Constant(1, 1, 1.0), Matrix::Constant(1, 1, 0.5), Matrix::Constant(1, 1, 1.0)};
  SigmaBlocks dup{Matrix::Constant(1, 1, 1.0), Matrix::Constant(1, 2, 0.5), Matrix::Constant(2, 2, 1.0)};
  const auto a = update(vec({1.0}), {pair_with(vec({0.2}))}, single, 100);
  const auto b = update(vec({1.0}), {pair_with(vec({0.2})), pair_with(vec({0.2}))}, dup, 100);
  CHECK(b.ridged);
  CHECK(std::abs(a.theta_bar[0] - b.theta_bar[0]) < 1e-6);
  CHECK(std::abs(a.cov(0, 0) - b.cov(0, 0)) < 1e-6);
}

TEST_CASE("update variance never exceeds the original on random PSD blocks") {
  Rng rng(2, 0);
  for (int trial = 0; trial < 200; ++trial) {
    const Matrix m = random_psd(rng, 5);
    SigmaBlocks s{m.topLeftCorner(2, 2), m.topRightCorner(2, 3), m.bottomRightCorner(3, 3)};
    const auto r = update(vec({0.0, 0.0}), {pair_with(vec({0.1, 0.2, 0.3}))}, s, 10);
    for (int j = 0; j < 2; ++j) CHECK(r.cov(j, j) <= s.s11(j, j) / 10 + 1e-12);
  }
}

TEST_CASE("sequential update: one step equals joint, block-diagonal equals joint") {
  Rng rng(3, 0);
  const Matrix m = random_psd(rng, 3);
  SigmaBlocks one{m.topLeftCorner(1, 1), m.topRightCorner(1, 2), m.bottomRightCorner(2, 2)};
  const std::vector<WorkingPair> p1{pair_with(vec({0.4, -0.1}))};
  const auto j1 = update(vec({1.0}), p1, one, 100);
  const auto s1 = sequential_update(vec({1.0}), p1, one, 100);
  CHECK(std::abs(j1.theta_bar[0] - s1.theta_bar[0]) < 1e-12);
  CHECK(std::abs(j1.cov(0, 0) - s1.cov(0, 0)) < 1e-12);

  // D1 and D2 uncorrelated with each other; theta correlated with both.
  Matrix big = Matrix::Zero(3, 3);
  big << 2.0, 0.6, -0.4, 0.6, 1.0, 0.0, -0.4, 0.0, 0.5;
  SigmaBlocks joint{big.topLeftCorner(1, 1), big.topRightCorner(1, 2), big.bottomRightCorner(2, 2)};
  const std::vector<WorkingPair> p2{pair_with(vec({0.3})), pair_with(vec({-0.2}))};
  const auto j2 = update(vec({1.0}), p2, joint, 100);
  const auto s2 = sequential_update(vec({1.0}), p2, joint, 100);
  CHECK(std::abs(j2.theta_bar[0] - s2.theta_bar[0]) < 1e-12);
  CHECK(std::abs(j2.cov(0, 0) - s2.cov(0, 0)) < 1e-12);
}

TEST_CASE("joint covariance is dominated by sequential on random PSD blocks") {
  Rng rng(4, 0);
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix m = random_psd(rng, 4);
    SigmaBlocks joint{m.topLeftCorner(2, 2), m.topRightCorner(2, 2), m.bottomRightCorner(2, 2)};
    const std::vector<WorkingPair> p{pair_with(vec({0.1})), pair_with(vec({0.2}))};
    const auto j = update(vec({0.0, 0.0}), p, joint, 1);
    const auto s = sequential_update(vec({0.0, 0.0}), p, joint, 1);
    CHECK(test::min_eigen(s.cov - j.cov) >= -1e-10);
  }
}

TEST_CASE("select_lambda rule") {
  const std::vector<double> grid{0.005, 0.01, 0.02, 0.04};
  auto none = select_lambda(grid, [](std::size_t) { return false; });
  CHECK(none.lambda == 0.005);
  CHECK_FALSE(none.all_outliers);
  auto first = select_lambda(grid, [](std::size_t i) { return i == 0; });
  CHECK(first.lambda == 0.01);
  std::vector<std::size_t> asked;
  auto all = select_lambda(grid, [&](std::size_t i) {
    asked.push_back(i);
    return true;
  });
  CHECK(all.lambda == 0.04);
  CHECK(all.all_outliers);
  CHECK(asked == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK_THROWS_AS(select_lambda({0.02, 0.01}, [](std::size_t) { return false; }), Error);
  CHECK_THROWS_AS(select_lambda({}, [](std::size_t) { return false; }), Error);
}

TEST_CASE("outlier flags") {
  std::vector<std::optional<WorkingPair>> pairs;
  for (int b = 0; b < 20; ++b) {
    WorkingPair p;
    p.vartheta_s = vec({1.0 + 0.01 * b});
    p.vartheta_f = vec({1.0 - 0.01 * b});
    pairs.push_back(p);
  }
  CHECK_FALSE(has_outliers(pairs));
  auto with_fail = pairs;
  with_fail[3].reset();
  CHECK(outlier_flags(with_fail)[3]);
  auto with_far = pairs;
  with_far[5]->vartheta_s[0] = 3.0;  // way beyond 6 MADs of ~0.05
  CHECK(outlier_flags(with_far)[5]);
  CHECK_FALSE(outlier_flags(with_far)[4]);
  // all identical: MAD = 0 disables the MAD rule; the 50 cap still applies
  std::vector<std::optional<WorkingPair>> flat(10, pairs[0]);
  CHECK_FALSE(has_outliers(flat));
  flat[2]->vartheta_f[0] = 60.0;
  CHECK(outlier_flags(flat)[2]);
}

TEST_CASE("bootstrap_resample keeps cell sizes and weights") {
  const auto cfg = small_cfg(ModelKind::Linear);
  const auto d = generate(cfg, 0, calibrate(cfg));
  Rng rng(5, 5);
  const auto b = bootstrap_resample(d, rng);
  CHECK(b.size() == d.size());
  CHECK(b.complete_cases() == d.complete_cases());
  for (const auto& s : b.subjects()) CHECK(s.pi == doctest::Approx(100.0 / 300));
}

TEST_CASE("bootstrap of the mean") {
  Rng rng(6, 0);
  std::vector<Subject> subs;
  for (int i = 0; i < 200; ++i) subs.push_back(test::complete(ContinuousOutcome{rng.normal() * 2}, 0.0, vec({0.0})));
  const TwoPhaseDataset d(std::move(subs), 1, 1, McarDesign{200});
  auto mean = [](const TwoPhaseDataset& x, std::size_t) {
    double m = 0;
    for (const auto& s : x.subjects()) m += std::get<ContinuousOutcome>(s.outcome).y;
    return vec({m / static_cast<double>(x.size())});
  };
  double ybar = 0, ss = 0;
  for (const auto& s : d.subjects()) ybar += std::get<ContinuousOutcome>(s.outcome).y;
  ybar /= 200;
  for (const auto& s : d.subjects()) ss += std::pow(std::get<ContinuousOutcome>(s.outcome).y - ybar, 2);
  const double var = ss / 199;
  const auto sig = bootstrap_sigma(d, mean, 400, 7, 1);
  CHECK(sig.s11(0, 0) / 200 == doctest::Approx(var / 200).epsilon(0.15));

  const auto zero = bootstrap_sigma(d, [](const TwoPhaseDataset&, std::size_t) { return vec({1.0, 2.0}); }, 10, 7, 1);
  CHECK(zero.s11.cwiseAbs().maxCoeff() == 0.0);
  CHECK(zero.s12.cwiseAbs().maxCoeff() == 0.0);
  CHECK(zero.s22.cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(bootstrap_sigma(d, mean, 1, 7, 1), Error);

  std::size_t calls = 0;
  auto flaky = [&](const TwoPhaseDataset& x, std::size_t b) -> Vector {
    ++calls;
    if (b % 3 == 0) fail(ErrorCode::Separation, "flaky");
    return mean(x, b);
  };
  CHECK(code_of([&] { bootstrap_sigma(d, flaky, 30, 7, 1); }) == ErrorCode::TooManyFailures);
}

TEST_CASE("bootstrap draws are reproducible from the seed") {
  const auto cfg = small_cfg(ModelKind::Linear);
  const auto d = generate(cfg, 0, calibrate(cfg));
  auto first_y = [](const TwoPhaseDataset& x, std::size_t) {
    return vec({std::get<ContinuousOutcome>(x[0].outcome).y, std::get<ContinuousOutcome>(x[299].outcome).y});
  };
  const auto a = bootstrap_draws(d, first_y, 20, 11, 0, 1);
  const auto b = bootstrap_draws(d, first_y, 20, 11, 0, 3);
  CHECK(a.rows == b.rows);
}

TEST_CASE("phi_star: point mass returns psi, logistic theta = 0 cancels") {
  const auto cfg = small_cfg(ModelKind::Linear);
  const auto d = census_with_copy(generate(cfg, 1, calibrate(cfg)));
  ModelSpec lin{ModelKind::Linear, CovariateLayout{true, true, {}}};
  const Vector th = vec({0.2, 0.9});
  for (std::size_t i = 0; i < 10; ++i) {
    const auto& s = d[i];
    const Vector w = lin.layout.build(s);
    const Vector got = phi_star(s, th, lin, LinearNuisance{1.3}, PointMassCondDist{{0}});
    const Vector want = influence(ModelKind::Linear, s.outcome, w, th, LinearNuisance{1.3});
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-14);
  }

  NormalLinearCondDist nl;
  nl.regressor_cols = {0};
  nl.coef = Matrix(2, 1);
  nl.coef << 0.3, 0.8;
  nl.tau = vec({0.6});
  ModelSpec logi{ModelKind::Logistic, CovariateLayout{true, true, {0}}};
  Rng rng(8, 0);
  for (int t = 0; t < 20; ++t) {
    Subject s = test::incomplete(BinaryOutcome{t % 2}, vec({rng.normal()}));
    const double ex = 0.3 + 0.8 * s.z[0];
    const double c = (t % 2) - 0.5;
    const Vector got = phi_star(s, Vector::Zero(3), logi, LogisticNuisance{}, nl);
    CHECK(got[0] == doctest::Approx(c).epsilon(1e-13));
    CHECK(got[1] == doctest::Approx(c * ex).epsilon(1e-12));
    CHECK(got[2] == doctest::Approx(c * s.z[0]).epsilon(1e-13));
  }
}

TEST_CASE("PhiStarSystem agrees with the generic phi_star path") {
  for (auto kind : {ModelKind::Linear, ModelKind::Logistic, ModelKind::Cox}) {
    auto cfg = small_cfg(kind);
    cfg.setting = CovariateSetting::TwoCovariateI;
    const auto cal = calibrate(cfg);
    const auto d = generate(cfg, 2, cal);
    const auto plan = plan_study(cfg, cal, {"original"});
    const auto fit = fit_original(d, plan.model);
    const auto views = split(d);
    for (const CondRecipe& recipe :
         {CondRecipe{KernelRecipe{{0, 1}, std::nullopt}}, CondRecipe{NormalLinearRecipe{{0, 1}}}}) {
      const auto dist = fit_cond_dist(recipe, views.subsample);
      const PhiStarSystem sys(plan.model, fit.nuisance, dist, views.full);
      const Vector th = fit.theta + vec({0.05, -0.03});
      Vector sum = Vector::Zero(th.size());
      for (std::size_t k = 0; k < d.size(); k += 7) {
        const Vector a = sys.phi(k, th);
        const Vector b = phi_star(d[k], th, plan.model, fit.nuisance, dist);
        CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-10 * (1 + b.cwiseAbs().maxCoeff()));
        sum += b;
      }
      Vector wts = Vector::Zero(static_cast<Eigen::Index>(d.size()));
      for (std::size_t k = 0; k < d.size(); k += 7) wts[static_cast<Eigen::Index>(k)] = 1.0;
      CHECK((sys.weighted_sum(th, wts) - sum).cwiseAbs().maxCoeff() <= 1e-9 * (1 + sum.cwiseAbs().maxCoeff()));
    }
  }
}

TEST_CASE("working pair collapse with r = 1 and point masses") {
  for (auto kind : {ModelKind::Linear, ModelKind::Logistic, ModelKind::Cox}) {
    const auto cfg = small_cfg(kind, 200, 50);
    const auto d = census_with_copy(generate(cfg, 3, calibrate(cfg)));
    ModelSpec model{kind, CovariateLayout{kind != ModelKind::Cox, true, {}}};
    const auto fit = fit_original(d, model);
    const auto p = solve_working_pair(d, fit.theta, model, fit.nuisance, PointMassCondDist{{0}}, 0.0);
    CHECK((p.vartheta_s - fit.theta).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((p.vartheta_f - fit.theta).cwiseAbs().maxCoeff() < 1e-6);

    // any law: with r = 1 and pi = 1 the two equations coincide
    const auto dist = fit_cond_dist(KernelRecipe{{0}, std::nullopt}, split(d).subsample);
    const auto q = solve_working_pair(d, fit.theta, model, fit.nuisance, dist, 0.01);
    CHECK((q.vartheta_s - q.vartheta_f).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("working pair shrinks to zero under a huge penalty") {
  const auto cfg = small_cfg(ModelKind::Linear);
  const auto d = generate(cfg, 4, calibrate(cfg));
  const auto plan = plan_study(cfg, calibrate(cfg), {"original"});
  const auto fit = fit_original(d, plan.model);
  const auto dist = fit_cond_dist(KernelRecipe{{0}, std::nullopt}, split(d).subsample);
  const auto p = solve_working_pair(d, fit.theta, plan.model, fit.nuisance, dist, 1e9);
  CHECK(p.vartheta_s.cwiseAbs().maxCoeff() < 1e-6);
  CHECK(p.vartheta_f.cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("full-sample working equation root matches a bisection oracle") {
  const auto cfg = small_cfg(ModelKind::Linear);
  const auto cal = calibrate(cfg);
  const auto d = generate(cfg, 5, cal);
  const auto plan = plan_study(cfg, cal, {"original"});
  const auto fit = fit_original(d, plan.model);
  const auto dist = fit_cond_dist(KernelRecipe{{0}, std::nullopt}, split(d).subsample);
  const auto p = solve_working_pair(d, fit.theta, plan.model, fit.nuisance, dist, 0.0);
  auto g = [&](double t) {
    double s = 0;
    for (const auto& subj : d.subjects()) s += phi_star(subj, vec({t}), plan.model, fit.nuisance, dist)[0];
    return s;
  };
  double lo = fit.theta[0] - 1, hi = fit.theta[0] + 1;
  REQUIRE(g(lo) * g(hi) < 0);
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    (g(lo) * g(mid) <= 0 ? hi : lo) = mid;
  }
  CHECK(std::abs(p.vartheta_f[0] - 0.5 * (lo + hi)) < 1e-6);
}

TEST_CASE("projection_variance special cases") {
  Rng rng(10, 0);
  const int n = 500;
  Matrix psi(n, 2), phi(n, 1);
  for (int i = 0; i < n; ++i) {
    psi(i, 0) = rng.normal();
    psi(i, 1) = rng.normal();
    phi(i, 0) = rng.normal();
  }
  const Matrix e1 = psi.transpose() * psi / n;
  CHECK((projection_variance(psi, phi, Vector::Ones(n)) - e1).cwiseAbs().maxCoeff() < 1e-12);
  // phi orthogonal to psi under the weighting: cross term is zero
  Matrix psi2(4, 1), phi2(4, 1);
  psi2 << 1, -1, 1, -1;
  phi2 << 1, 1, -1, -1;
  const Vector half = Vector::Constant(4, 0.5);
  CHECK(projection_variance(psi2, phi2, half)(0, 0) == doctest::Approx(2.0));
}

TEST_CASE("analyze: shared bootstrap gives sane output on a small problem") {
  auto cfg = small_cfg(ModelKind::Linear, 400, 120);
  const auto cal = calibrate(cfg);
  const auto d = generate(cfg, 6, cal);
  const auto plan = plan_study(cfg, cal, {"original", "default", "optimal"});
  AnalysisConfig ac;
  ac.B = 30;
  ac.seed = 3;
  const auto r = analyze(d, plan.problem, plan.methods, ac);
  REQUIRE(r.methods.size() == 3);
  CHECK(r.methods[0].estimate == r.theta_s);
  for (const auto& m : r.methods) {
    CHECK(m.se.allFinite());
    CHECK(m.se[0] <= r.methods[0].se[0] + 1e-12);
  }
  const auto again = analyze(d, plan.problem, plan.methods, ac);
  for (std::size_t i = 0; i < 3; ++i) CHECK(again.methods[i].estimate == r.methods[i].estimate);
}
