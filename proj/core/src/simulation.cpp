#include "tpu/simulation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <tuple>

#include "tpu/parallel.hpp"

namespace tpu {

std::string_view to_string(CovariateSetting s) noexcept {
  switch (s) {
    case CovariateSetting::OneCovariate: return "one-covariate";
    case CovariateSetting::TwoCovariateI: return "two-covariate-I";
    case CovariateSetting::TwoCovariateII: return "two-covariate-II";
  }
  return "unknown";
}

std::string_view to_string(SamplingScheme s) noexcept { return s == SamplingScheme::Mcar ? "mcar" : "mar"; }

void ScenarioConfig::validate() const {
  auto bad = [](const std::string& field, const std::string& why) {
    fail(ErrorCode::InvalidArgument, "invalid " + field + ": " + why);
  };
  if (!(rho > 0.0 && rho < 1.0)) bad("rho", "must lie strictly between 0 and 1");
  if (n2 == 0 || n2 >= n) bad("n2", "must satisfy 0 < n2 < n");
  if (reps < 1) bad("reps", "must be at least 1");
  if (B < 2) bad("boot", "must be at least 2");
  if (lambda_grid.empty()) bad("lambda", "grid must not be empty");
  for (std::size_t i = 0; i < lambda_grid.size(); ++i) {
    if (!(lambda_grid[i] >= 0.0)) bad("lambda", "values must be non-negative");
    if (i > 0 && !(lambda_grid[i] > lambda_grid[i - 1])) bad("lambda", "grid must be strictly ascending");
  }
  if (design == SamplingScheme::Mar && n2 != 200) bad("n2", "the MAR design samples 140 + 60 = 200 subjects");
  if (threads < 1) bad("threads", "must be at least 1");
}

namespace {

constexpr double kTruncation = 2.0;   // log Z upper truncation
constexpr double kCorrXZ = 0.7;
constexpr double kDetectionLimit = -1.0;
constexpr std::uint64_t kCalibrationSeed = 0x7b3c2e11d4a9f005ULL;
constexpr std::size_t kCalibrationDraws = 1000000;

bool two_covariates(const ScenarioConfig& cfg) { return cfg.setting != CovariateSetting::OneCovariate; }

struct Covariates {
  double x = 0.0;
  double z = 0.0;  // cheap covariate (Z itself; exp(log Z) in setting II)
};

Covariates draw_covariates(CovariateSetting s, Rng& rng) {
  Covariates c;
  switch (s) {
    case CovariateSetting::OneCovariate:
      c.x = rng.normal();
      break;
    case CovariateSetting::TwoCovariateI: {
      const double z = rng.normal();
      c.z = z;
      c.x = kCorrXZ * z + std::sqrt(1.0 - kCorrXZ * kCorrXZ) * rng.normal();
      break;
    }
    case CovariateSetting::TwoCovariateII: {
      double l = rng.normal();
      while (l > kTruncation) l = rng.normal();
      c.z = std::exp(l);
      c.x = kCorrXZ * l + std::sqrt(1.0 - kCorrXZ * kCorrXZ) * rng.normal();
      break;
    }
  }
  return c;
}

double auxiliary_mean(CovariateSetting s, double x) {
  return s == CovariateSetting::TwoCovariateII ? std::max(x, kDetectionLimit) : x;
}

double linear_predictor(const ScenarioConfig& cfg, const Vector& theta, const Covariates& c) {
  double eta = theta[0] * c.x;
  if (two_covariates(cfg)) eta += theta[1] * c.z;
  return eta;
}

// Probability that C = min(U(0, 5 tau / 3), tau) falls below t.
double censor_prob(double t, double tau) { return t >= tau ? 1.0 : 0.6 * t / tau; }

Calibration compute_calibration(const ScenarioConfig& cfg) {
  Calibration cal;
  const double rho2 = cfg.rho * cfg.rho;
  Rng rng(kCalibrationSeed, static_cast<std::uint64_t>(cfg.setting) * 16 + static_cast<std::uint64_t>(cfg.model));
  std::vector<Covariates> cov;
  const bool need_draws = cfg.setting == CovariateSetting::TwoCovariateII || cfg.model == ModelKind::Cox;
  if (need_draws) {
    cov.resize(kCalibrationDraws);
    for (auto& c : cov) c = draw_covariates(cfg.setting, rng);
  }
  if (cfg.setting == CovariateSetting::TwoCovariateII) {
    // Corr(X, g(X) + e) = rho  <=>  sigma^2 = cov(X, g)^2 / (rho^2 var X) - var g.
    double mx = 0, mg = 0;
    for (const auto& c : cov) {
      mx += c.x;
      mg += auxiliary_mean(cfg.setting, c.x);
    }
    const double m = static_cast<double>(cov.size());
    mx /= m;
    mg /= m;
    double vx = 0, vg = 0, cxg = 0;
    for (const auto& c : cov) {
      const double dx = c.x - mx;
      const double dg = auxiliary_mean(cfg.setting, c.x) - mg;
      vx += dx * dx;
      vg += dg * dg;
      cxg += dx * dg;
    }
    vx /= m - 1;
    vg /= m - 1;
    cxg /= m - 1;
    const double s2 = cxg * cxg / (rho2 * vx) - vg;
    require(s2 > 0.0, ErrorCode::InvalidArgument, "invalid rho: not attainable with the censored auxiliary");
    cal.sigma_e = std::sqrt(s2);
  } else {
    cal.sigma_e = std::sqrt(1.0 / rho2 - 1.0);
  }
  if (cfg.model == ModelKind::Cox) {
    const Vector theta = true_theta(cfg);
    std::vector<double> t(cov.size());
    for (std::size_t i = 0; i < cov.size(); ++i) {
      const double eta = linear_predictor(cfg, theta, cov[i]);
      t[i] = std::sqrt(4.0 * rng.exponential() * std::exp(-eta));
    }
    auto rate = [&](double tau) {
      double s = 0.0;
      for (double ti : t) s += censor_prob(ti, tau);
      return s / static_cast<double>(t.size());
    };
    double lo = 1e-6, hi = 1e3;
    for (int it = 0; it < 200 && hi - lo > 1e-12 * hi; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (rate(mid) > 0.5) lo = mid; else hi = mid;
    }
    cal.tau = 0.5 * (lo + hi);
    cal.censoring_rate = rate(cal.tau);
  }
  return cal;
}

std::string fmt_shortest(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string fmt_fixed(double v, int digits) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, digits);
  return std::string(buf, r.ptr);
}

// Draw k of the given indices without replacement (partial Fisher-Yates).
std::vector<std::size_t> sample_without_replacement(std::vector<std::size_t> pool, std::size_t k, Rng& rng) {
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng.index(pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

}  // namespace

Calibration calibrate(const ScenarioConfig& cfg) {
  static std::mutex mu;
  static std::map<std::tuple<int, int, double>, Calibration> cache;
  const auto key = std::make_tuple(static_cast<int>(cfg.model), static_cast<int>(cfg.setting), cfg.rho);
  {
    std::lock_guard<std::mutex> lock(mu);
    if (auto it = cache.find(key); it != cache.end()) return it->second;
  }
  const Calibration cal = compute_calibration(cfg);
  std::lock_guard<std::mutex> lock(mu);
  cache.emplace(key, cal);
  return cal;
}

Vector true_theta(const ScenarioConfig& cfg) {
  const double main = cfg.model == ModelKind::Cox ? std::log(2.0) : (two_covariates(cfg) ? 1.0 : 0.5);
  if (!two_covariates(cfg)) return Vector::Constant(1, main);
  Vector t(2);
  t << main, 0.5;
  return t;
}

std::vector<std::string> coefficient_labels(const ScenarioConfig& cfg) {
  if (two_covariates(cfg)) return {"x", "z"};
  return {"x"};
}

TwoPhaseDataset generate(const ScenarioConfig& cfg, std::size_t rep, const Calibration& cal,
                         std::vector<std::string>* warnings) {
  cfg.validate();
  Rng rng(cfg.seed, rep);
  const Vector theta = true_theta(cfg);
  const bool two = two_covariates(cfg);
  const std::size_t n = cfg.n;
  std::vector<Subject> subjects(n);
  std::vector<double> xs(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Covariates c = draw_covariates(cfg.setting, rng);
    const double xstar = auxiliary_mean(cfg.setting, c.x) + cal.sigma_e * rng.normal();
    const double eta = linear_predictor(cfg, theta, c);
    Subject& s = subjects[i];
    switch (cfg.model) {
      case ModelKind::Linear: s.outcome = ContinuousOutcome{eta + 0.5 * rng.normal()}; break;
      case ModelKind::Logistic: s.outcome = BinaryOutcome{rng.uniform() < 1.0 / (1.0 + std::exp(-eta)) ? 1 : 0}; break;
      case ModelKind::Cox: {
        const double t = std::sqrt(4.0 * rng.exponential() * std::exp(-eta));
        const double u = rng.uniform() * 5.0 * cal.tau / 3.0;
        const double cens = std::min(u, cal.tau);
        s.outcome = SurvivalOutcome{std::min(t, cens), t <= cens ? 1 : 0};
        break;
      }
    }
    if (two) {
      s.z.resize(2);
      s.z << c.z, xstar;
    } else {
      s.z = Vector::Constant(1, xstar);
    }
    xs[i] = c.x;
  }

  // Phase-II selection.
  std::vector<std::size_t> chosen;
  Design design;
  if (cfg.design == SamplingScheme::Mcar) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    chosen = sample_without_replacement(std::move(all), cfg.n2, rng);
    design = McarDesign{cfg.n2};
  } else {
    // Stratum 0: Y above its 70% quantile, Y = 1, or an observed event. Stratum 1: the rest.
    std::vector<int> stratum(n, 1);
    if (cfg.model == ModelKind::Linear) {
      std::vector<double> ys(n);
      for (std::size_t i = 0; i < n; ++i) ys[i] = std::get<ContinuousOutcome>(subjects[i].outcome).y;
      const double cut = quantile(ys, 0.7);
      for (std::size_t i = 0; i < n; ++i) stratum[i] = ys[i] > cut ? 0 : 1;
    } else if (cfg.model == ModelKind::Logistic) {
      for (std::size_t i = 0; i < n; ++i) stratum[i] = std::get<BinaryOutcome>(subjects[i].outcome).y == 1 ? 0 : 1;
    } else {
      for (std::size_t i = 0; i < n; ++i) stratum[i] = std::get<SurvivalOutcome>(subjects[i].outcome).status == 1 ? 0 : 1;
    }
    std::vector<std::size_t> pools[2];
    for (std::size_t i = 0; i < n; ++i) {
      subjects[i].stratum = stratum[i];
      pools[stratum[i]].push_back(i);
    }
    std::size_t want[2] = {140, 60};
    for (int h = 0; h < 2; ++h) {
      if (pools[h].size() < want[h]) {
        const std::size_t shortfall = want[h] - pools[h].size();
        if (warnings) {
          warnings->push_back("replicate " + std::to_string(rep) + ": stratum " + std::to_string(h) + " has only " +
                              std::to_string(pools[h].size()) + " subjects; other stratum inflated by " +
                              std::to_string(shortfall));
        }
        want[h] = pools[h].size();
        want[1 - h] = std::min(pools[1 - h].size(), want[1 - h] + shortfall);
      }
    }
    for (int h = 0; h < 2; ++h) {
      auto pick = sample_without_replacement(pools[h], want[h], rng);
      chosen.insert(chosen.end(), pick.begin(), pick.end());
    }
    design = StratifiedDesign{{want[0], want[1]}};
  }
  for (std::size_t i : chosen) {
    subjects[i].r = 1;
    subjects[i].x = Vector::Constant(1, xs[i]);
  }
  ColumnNames names;
  names.x = {"x"};
  if (two) {
    names.z = {"z", "xstar"};
    names.z_is_aux = {false, true};
  } else {
    names.z = {"xstar"};
    names.z_is_aux = {true};
  }
  if (cfg.design == SamplingScheme::Mar) names.stratum = "stratum";
  TwoPhaseDataset raw(std::move(subjects), 1, two ? 2 : 1, design, names);
  return compute_design_weights(raw, design);
}

std::vector<std::string> available_methods(const ScenarioConfig& cfg) {
  if (two_covariates(cfg)) return {"original", "default", "linear", "default+linear", "optimal", "default+optimal"};
  return {"original", "default", "optimal"};
}

StudyPlan plan_study(const ScenarioConfig& cfg, const Calibration& cal, const std::vector<std::string>& methods) {
  StudyPlan plan;
  const bool two = two_covariates(cfg);
  plan.model.kind = cfg.model;
  plan.model.layout.intercept = false;
  plan.model.layout.use_x = true;
  if (two) plan.model.layout.z_cols = {0};
  plan.problem.model = plan.model;
  plan.problem.penalty = cfg.penalty;
  // The penalty is applied to logistic working equations only.
  const std::vector<double> grid = cfg.model == ModelKind::Logistic ? cfg.lambda_grid : std::vector<double>{0.0};

  const auto avail = available_methods(cfg);
  std::map<std::string, int> spec_index;
  auto spec_for = [&](const std::string& label) -> int {
    if (auto it = spec_index.find(label); it != spec_index.end()) return it->second;
    WorkingSpec ws;
    ws.label = label;
    if (label == "default") {
      ws.kind = two ? DefaultWorking{{0, 1}} : DefaultWorking{{0}};
    } else if (label == "linear") {
      ws.kind = PhiStarWorking{NormalLinearRecipe{{0, 1}}, grid};
    } else if (two) {
      KnownCondDist k;
      k.law = cfg.setting == CovariateSetting::TwoCovariateII ? KnownLaw::DetectionLimit : KnownLaw::BivariateNormal;
      k.rho_xz = kCorrXZ;
      k.sigma_e = cal.sigma_e;
      k.xstar_col = 1;
      k.z_col = 0;
      k.limit = kDetectionLimit;
      ws.kind = PhiStarWorking{k, grid};
    } else {
      ws.kind = PhiStarWorking{KernelRecipe{{0}, std::nullopt}, grid};
    }
    const int idx = static_cast<int>(plan.problem.specs.size());
    plan.problem.specs.push_back(std::move(ws));
    spec_index[label] = idx;
    return idx;
  };
  for (const auto& m : methods) {
    require(std::find(avail.begin(), avail.end(), m) != avail.end(), ErrorCode::InvalidArgument,
            "invalid methods: '" + m + "' is not available for this scenario");
    MethodSpec ms;
    ms.label = m;
    std::stringstream ss(m);
    std::string part;
    if (m != "original") {
      while (std::getline(ss, part, '+')) ms.specs.push_back(spec_for(part));
    }
    plan.methods.push_back(std::move(ms));
  }
  return plan;
}

std::vector<MetricsRow> aggregate_metrics(const std::vector<MethodDraws>& draws, const Vector& truth,
                                          const std::vector<std::string>& coef, const std::string& reference) {
  std::vector<MetricsRow> rows;
  Vector ref_ssd;
  auto sd_of = [](const Matrix& m) {
    Vector sd(m.cols());
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (m.rows() < 2) {
        sd[j] = 0.0;
        continue;
      }
      const double mean = m.col(j).mean();
      sd[j] = std::sqrt((m.col(j).array() - mean).square().sum() / static_cast<double>(m.rows() - 1));
    }
    return sd;
  };
  for (const auto& d : draws) {
    if (d.label == reference) ref_ssd = sd_of(d.estimates);
  }
  for (const auto& d : draws) {
    require(d.estimates.cols() == truth.size() && d.se.cols() == truth.size() && d.se.rows() == d.estimates.rows(),
            ErrorCode::DimensionMismatch, "method draws do not match the truth");
    require(d.estimates.rows() >= 1, ErrorCode::InvalidArgument, "no replicates to aggregate");
    MetricsRow row;
    row.method = d.label;
    row.coef = coef;
    const double r = static_cast<double>(d.estimates.rows());
    row.bias = d.estimates.colwise().mean().transpose() - truth;
    row.ssd = sd_of(d.estimates);
    row.ese = d.se.colwise().mean().transpose();
    row.cp.resize(truth.size());
    for (Eigen::Index j = 0; j < truth.size(); ++j) {
      double cover = 0.0;
      for (Eigen::Index k = 0; k < d.estimates.rows(); ++k) {
        if (std::abs(d.estimates(k, j) - truth[j]) <= 1.96 * d.se(k, j)) cover += 1.0;
      }
      row.cp[j] = cover / r;
    }
    if (ref_ssd.size() == truth.size()) {
      row.re = ref_ssd.cwiseQuotient(row.ssd).array().square().matrix();
      if (d.label == reference) row.re.setOnes();
    } else {
      row.re = Vector::Constant(truth.size(), std::numeric_limits<double>::quiet_NaN());
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

StudyResult run_study(const ScenarioConfig& cfg, const std::vector<std::string>& methods) {
  cfg.validate();
  require(!methods.empty(), ErrorCode::InvalidArgument, "invalid methods: list is empty");
  StudyResult res;
  res.calibration = calibrate(cfg);
  // The original estimator is always computed: it anchors RE.
  std::vector<std::string> internal = methods;
  if (std::find(internal.begin(), internal.end(), "original") == internal.end()) {
    internal.insert(internal.begin(), "original");
  }
  const StudyPlan plan = plan_study(cfg, res.calibration, internal);
  for (const auto& s : plan.problem.specs) res.spec_labels.push_back(s.label);
  const Vector truth = true_theta(cfg);
  const auto p = truth.size();
  const std::size_t nm = internal.size();

  struct RepOut {
    bool ok = false;
    std::vector<Vector> est, se;
    std::vector<double> lambdas;
    std::vector<std::size_t> counts;
    std::vector<std::string> warnings;
  };
  std::vector<RepOut> outs(cfg.reps);
  parallel_for(cfg.reps, cfg.threads, [&](std::size_t rep) {
    RepOut& o = outs[rep];
    try {
      const auto data = generate(cfg, rep, res.calibration, &o.warnings);
      std::vector<std::size_t> counts(static_cast<std::size_t>(std::max(1, data.stratum_count())), 0);
      for (const auto& s : data.subjects()) {
        if (s.r == 1) ++counts[static_cast<std::size_t>(s.stratum)];
      }
      o.counts = counts;
      AnalysisConfig ac;
      ac.B = cfg.B;
      ac.seed = cfg.seed;
      ac.stream_offset = cfg.reps + rep * cfg.B;
      ac.threads = 1;
      const auto ar = analyze(data, plan.problem, plan.methods, ac);
      for (const auto& m : ar.methods) {
        if (!m.estimate.allFinite() || !m.se.allFinite()) fail(ErrorCode::NonConvergence, "non-finite estimate");
        o.est.push_back(m.estimate);
        o.se.push_back(m.se);
      }
      for (const auto& l : ar.lambdas) o.lambdas.push_back(l.lambda);
      for (std::size_t s = 0; s < ar.lambdas.size(); ++s) {
        if (ar.lambdas[s].all_outliers) {
          o.warnings.push_back("replicate " + std::to_string(rep) + ": every lambda showed outliers for '" +
                               plan.problem.specs[s].label + "'; using the largest");
        }
      }
      o.ok = true;
    } catch (const Error& e) {
      o.ok = false;
      o.warnings.push_back("replicate " + std::to_string(rep) + " failed: " + e.what());
    }
  });

  std::size_t good = 0;
  for (const auto& o : outs) {
    if (o.ok) ++good;
    res.warnings.insert(res.warnings.end(), o.warnings.begin(), o.warnings.end());
  }
  res.failed_reps = cfg.reps - good;
  if (res.failed_reps * 20 > cfg.reps || good == 0) {
    fail(ErrorCode::StudyAborted, std::to_string(res.failed_reps) + " of " + std::to_string(cfg.reps) +
                                      " replicates failed");
  }
  std::vector<MethodDraws> draws(nm);
  for (std::size_t m = 0; m < nm; ++m) {
    draws[m].label = internal[m];
    draws[m].estimates.resize(static_cast<Eigen::Index>(good), p);
    draws[m].se.resize(static_cast<Eigen::Index>(good), p);
  }
  Eigen::Index r = 0;
  for (const auto& o : outs) {
    if (!o.ok) continue;
    for (std::size_t m = 0; m < nm; ++m) {
      draws[m].estimates.row(r) = o.est[m].transpose();
      draws[m].se.row(r) = o.se[m].transpose();
    }
    res.lambdas.push_back(o.lambdas);
    res.stratum_counts.push_back(o.counts);
    ++r;
  }
  auto rows = aggregate_metrics(draws, truth, coefficient_labels(cfg), "original");
  for (const auto& label : methods) {
    for (std::size_t m = 0; m < nm; ++m) {
      if (internal[m] == label) {
        res.rows.push_back(rows[m]);
        break;
      }
    }
  }
  for (const auto& label : methods) {
    for (std::size_t m = 0; m < nm; ++m) {
      if (internal[m] == label) res.draws.push_back(draws[m]);
    }
  }
  return res;
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream os;
  os << "method,coef,bias,ssd,ese,cp,re\n";
  for (const auto& r : rows) {
    for (std::size_t j = 0; j < r.coef.size(); ++j) {
      const auto k = static_cast<Eigen::Index>(j);
      os << r.method << ',' << r.coef[j] << ',' << fmt_shortest(r.bias[k]) << ',' << fmt_shortest(r.ssd[k]) << ','
         << fmt_shortest(r.ese[k]) << ',' << fmt_shortest(r.cp[k]) << ',' << fmt_shortest(r.re[k]) << '\n';
    }
  }
  return os.str();
}

std::string metrics_markdown(const std::vector<MetricsRow>& rows) {
  std::vector<std::vector<std::string>> cells;
  cells.push_back({"Method", "Coef", "Bias", "SSD", "ESE", "CP", "RE"});
  for (const auto& r : rows) {
    for (std::size_t j = 0; j < r.coef.size(); ++j) {
      const auto k = static_cast<Eigen::Index>(j);
      cells.push_back({r.method, r.coef[j], fmt_fixed(r.bias[k], 3), fmt_fixed(r.ssd[k], 3), fmt_fixed(r.ese[k], 3),
                       fmt_fixed(r.cp[k], 3), fmt_fixed(r.re[k], 3)});
    }
  }
  std::vector<std::size_t> width(cells.front().size(), 0);
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream os;
  auto emit = [&](const std::vector<std::string>& row) {
    os << '|';
    for (std::size_t c = 0; c < row.size(); ++c) {
      const std::size_t pad = width[c] - row[c].size();
      if (c < 2) {
        os << ' ' << row[c] << std::string(pad, ' ') << " |";
      } else {
        os << ' ' << std::string(pad, ' ') << row[c] << " |";
      }
    }
    os << '\n';
  };
  emit(cells.front());
  os << '|';
  for (std::size_t c = 0; c < width.size(); ++c) {
    os << (c < 2 ? ":" : "-") << std::string(width[c], '-') << (c < 2 ? "-|" : ":|");
  }
  os << '\n';
  for (std::size_t i = 1; i < cells.size(); ++i) emit(cells[i]);
  return os.str();
}

}  // namespace tpu
