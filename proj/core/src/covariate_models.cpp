#include "tpu/covariate_models.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include <Eigen/QR>

namespace tpu {

namespace {

Matrix gather_x(const SampleView& sub) {
  const int q = sub.dataset().x_dim();
  Matrix x(static_cast<Eigen::Index>(sub.size()), q);
  for (std::size_t k = 0; k < sub.size(); ++k) {
    const Subject& s = sub[k];
    require(s.x.has_value(), ErrorCode::InconsistentMissingness, "subsample member without x");
    x.row(static_cast<Eigen::Index>(k)) = s.x->transpose();
  }
  return x;
}

Matrix gather_z(const SampleView& sub, const std::vector<int>& cols) {
  Matrix z(static_cast<Eigen::Index>(sub.size()), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t k = 0; k < sub.size(); ++k) {
    for (std::size_t j = 0; j < cols.size(); ++j) {
      z(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = sub[k].z[cols[j]];
    }
  }
  return z;
}

}  // namespace

KernelCondDist fit_kernel_cond_dist(const SampleView& subsample, std::vector<int> cond_cols,
                                    std::optional<Vector> bandwidth) {
  require(!subsample.empty(), ErrorCode::InsufficientCompleteCases, "kernel estimator needs a subsample");
  for (int c : cond_cols) {
    require(c >= 0 && c < subsample.dataset().z_dim(), ErrorCode::InvalidArgument,
            "conditioning column out of range");
  }
  KernelCondDist kd;
  kd.cond_cols = std::move(cond_cols);
  kd.support = gather_x(subsample);
  kd.conditioning = gather_z(subsample, kd.cond_cols);
  if (bandwidth) {
    require(bandwidth->size() == static_cast<Eigen::Index>(kd.cond_cols.size()), ErrorCode::DimensionMismatch,
            "bandwidth dimension");
    require((bandwidth->array() > 0.0).all(), ErrorCode::InvalidArgument, "bandwidth must be positive");
    kd.bandwidth = *bandwidth;
  } else if (!kd.cond_cols.empty()) {
    if (subsample.size() >= 2) {
      auto bw = silverman_bandwidth(kd.conditioning);
      kd.bandwidth = bw.h;
      kd.bandwidth_degenerate = bw.degenerate;
    } else {
      kd.bandwidth = Vector::Ones(static_cast<Eigen::Index>(kd.cond_cols.size()));
    }
  }
  return kd;
}

DiscreteLaw kernel_cond_dist(const KernelCondDist& dist, const Vector& z) {
  const Eigen::Index m = dist.support.rows();
  const auto k = static_cast<Eigen::Index>(dist.cond_cols.size());
  DiscreteLaw law;
  law.support = dist.support;
  // log kernel up to a constant; constants cancel on normalization
  Eigen::ArrayXd logk = Eigen::ArrayXd::Zero(m);
  for (Eigen::Index j = 0; j < k; ++j) {
    const Eigen::ArrayXd u = (dist.conditioning.col(j).array() - z[dist.cond_cols[j]]) / dist.bandwidth[j];
    logk -= 0.5 * u.square();
  }
  if (m == 0) {
    law.weights.resize(0);
    return law;
  }
  law.weights = (logk - logk.maxCoeff()).exp().matrix();
  law.weights /= law.weights.sum();
  return law;
}

DiscreteLaw kernel_cond_dist(const SampleView& subsample, const Vector& z, const Vector& bandwidth) {
  std::vector<int> cols(static_cast<std::size_t>(subsample.dataset().z_dim()));
  for (std::size_t j = 0; j < cols.size(); ++j) cols[j] = static_cast<int>(j);
  return kernel_cond_dist(fit_kernel_cond_dist(subsample, std::move(cols), bandwidth), z);
}

NormalLinearCondDist fit_normal_linear(const SampleView& subsample, std::vector<int> regressor_cols) {
  require(!subsample.empty(), ErrorCode::InsufficientCompleteCases, "normal-linear fit needs a subsample");
  NormalLinearCondDist nl;
  nl.regressor_cols = std::move(regressor_cols);
  const Matrix x = gather_x(subsample);
  const Matrix zc = gather_z(subsample, nl.regressor_cols);
  const Eigen::Index m = x.rows();
  const Eigen::Index k = zc.cols();
  Matrix design(m, 1 + k);
  design.col(0).setOnes();
  design.rightCols(k) = zc;
  Vector w(m);
  for (std::size_t i = 0; i < subsample.size(); ++i) w[static_cast<Eigen::Index>(i)] = 1.0 / subsample[i].pi;
  const Vector sw = w.cwiseSqrt();
  Eigen::ColPivHouseholderQR<Matrix> qr(sw.asDiagonal() * design);
  qr.setThreshold(1e-10);
  require(m >= 1 + k && qr.rank() == 1 + k, ErrorCode::RankDeficient,
          "normal-linear regressors are rank deficient on the subsample");
  nl.coef = qr.solve(sw.asDiagonal() * x);
  const Matrix resid = x - design * nl.coef;
  nl.tau.resize(x.cols());
  const double wsum = w.sum();
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    nl.tau[c] = std::sqrt(w.dot(resid.col(c).cwiseAbs2()) / wsum);
    const double scale = std::max(1.0, x.col(c).cwiseAbs().maxCoeff());
    if (nl.tau[c] <= 1e-10 * scale) {
      nl.tau[c] = 0.0;
      nl.degenerate = true;
    }
  }
  return nl;
}

namespace {

// Tensor-product Gauss-Hermite discretization of independent normals.
DiscreteLaw normal_product_law(const Vector& mean, const Vector& sd, int order) {
  const auto& rule = gauss_hermite(order);
  const Eigen::Index q = mean.size();
  std::vector<int> sizes(static_cast<std::size_t>(q));
  Eigen::Index total = 1;
  for (Eigen::Index c = 0; c < q; ++c) {
    sizes[c] = sd[c] > 0.0 ? order : 1;
    total *= sizes[c];
  }
  DiscreteLaw law;
  law.support.resize(total, q);
  law.weights.resize(total);
  const double inv_sqrt_pi = 1.0 / std::sqrt(std::numbers::pi);
  std::vector<int> idx(static_cast<std::size_t>(q), 0);
  for (Eigen::Index a = 0; a < total; ++a) {
    double w = 1.0;
    for (Eigen::Index c = 0; c < q; ++c) {
      if (sizes[c] == 1) {
        law.support(a, c) = mean[c];
      } else {
        law.support(a, c) = mean[c] + std::numbers::sqrt2 * sd[c] * rule.nodes[idx[c]];
        w *= rule.weights[idx[c]] * inv_sqrt_pi;
      }
    }
    law.weights[a] = w;
    for (Eigen::Index c = 0; c < q; ++c) {
      if (++idx[c] < sizes[c]) break;
      idx[c] = 0;
    }
  }
  law.weights /= law.weights.sum();
  return law;
}

DiscreteLaw known_law(const KnownCondDist& k, const Vector& z, int order) {
  const double xstar = z[k.xstar_col];
  double zval = 0.0;
  if (k.z_col >= 0) {
    zval = z[k.z_col];
    if (k.law == KnownLaw::DetectionLimit) {
      require(zval > 0.0, ErrorCode::InvalidArgument, "detection-limit law needs positive Z");
      zval = std::log(zval);
    }
  }
  const double prior_mean = k.rho_xz * zval;
  const double prior_var = 1.0 - k.rho_xz * k.rho_xz;
  const double noise_var = k.sigma_e * k.sigma_e;
  require(prior_var > 0.0 && noise_var > 0.0, ErrorCode::InvalidArgument, "known law variances must be positive");
  if (k.law == KnownLaw::BivariateNormal) {
    const double post_prec = 1.0 / prior_var + 1.0 / noise_var;
    const double post_mean = (prior_mean / prior_var + xstar / noise_var) / post_prec;
    Vector mean(1), sd(1);
    mean[0] = post_mean;
    sd[0] = std::sqrt(1.0 / post_prec);
    return normal_product_law(mean, sd, order);
  }
  // Prior nodes reweighted by the censored-auxiliary likelihood.
  Vector mean(1), sd(1);
  mean[0] = prior_mean;
  sd[0] = std::sqrt(prior_var);
  DiscreteLaw law = normal_product_law(mean, sd, order);
  Vector logw(law.weights.size());
  for (Eigen::Index a = 0; a < logw.size(); ++a) {
    const double g = std::max(law.support(a, 0), k.limit);
    const double r = xstar - g;
    logw[a] = std::log(law.weights[a]) - 0.5 * r * r / noise_var;
  }
  const double mx = logw.maxCoeff();
  for (Eigen::Index a = 0; a < logw.size(); ++a) law.weights[a] = std::exp(logw[a] - mx);
  law.weights /= law.weights.sum();
  return law;
}

}  // namespace

DiscreteLaw evaluate(const CondDist& dist, const Vector& z, int order) {
  return std::visit(
      [&](const auto& d) -> DiscreteLaw {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, KernelCondDist>) {
          return kernel_cond_dist(d, z);
        } else if constexpr (std::is_same_v<T, NormalLinearCondDist>) {
          const auto k = static_cast<Eigen::Index>(d.regressor_cols.size());
          Vector reg(1 + k);
          reg[0] = 1.0;
          for (Eigen::Index j = 0; j < k; ++j) reg[1 + j] = z[d.regressor_cols[j]];
          const Vector mean = d.coef.transpose() * reg;
          return normal_product_law(mean, d.tau, order);
        } else if constexpr (std::is_same_v<T, KnownCondDist>) {
          return known_law(d, z, order);
        } else {
          DiscreteLaw law;
          law.support.resize(1, static_cast<Eigen::Index>(d.z_cols.size()));
          for (std::size_t c = 0; c < d.z_cols.size(); ++c) {
            law.support(0, static_cast<Eigen::Index>(c)) = z[d.z_cols[c]];
          }
          law.weights = Vector::Ones(1);
          return law;
        }
      },
      dist);
}

PsiIntegral integrate_psi_f(const DiscreteLaw& law, int psi_dim, const PsiIntegrand& integrand) {
  PsiIntegral out{Vector::Zero(psi_dim), 0.0, 0.0};
  Vector psi(psi_dim);
  const int q = static_cast<int>(law.support.cols());
  std::vector<double> x(static_cast<std::size_t>(q));
  constexpr double kTiny = 1e-300;
  bool any_above = false;
  for (Eigen::Index a = 0; a < law.support.rows(); ++a) {
    for (int c = 0; c < q; ++c) x[static_cast<std::size_t>(c)] = law.support(a, c);
    const double lf = integrand(x, std::span<double>(psi.data(), psi.size()));
    const double f = std::exp(lf);
    if (f >= kTiny) any_above = true;
    const double wf = law.weights[a] * f;
    out.denominator += wf;
    out.numerator += wf * psi;
  }
  if (!any_above || !(out.denominator >= kTiny)) {
    fail(ErrorCode::UnderflowDenominator, "all conditional densities underflow");
  }
  return out;
}

PsiIntegral integrate_psi_f_log(const DiscreteLaw& law, int psi_dim, const PsiIntegrand& integrand) {
  const Eigen::Index m = law.support.rows();
  const int q = static_cast<int>(law.support.cols());
  Matrix psis(psi_dim, m);
  Vector logw(m);
  std::vector<double> x(static_cast<std::size_t>(q));
  for (Eigen::Index a = 0; a < m; ++a) {
    for (int c = 0; c < q; ++c) x[static_cast<std::size_t>(c)] = law.support(a, c);
    const double lf = integrand(x, std::span<double>(psis.col(a).data(), psi_dim));
    logw[a] = law.weights[a] > 0.0 ? std::log(law.weights[a]) + lf : -std::numeric_limits<double>::infinity();
  }
  PsiIntegral out{Vector::Zero(psi_dim), 0.0, 0.0};
  const double mx = m ? logw.maxCoeff() : -std::numeric_limits<double>::infinity();
  if (!std::isfinite(mx)) fail(ErrorCode::UnderflowDenominator, "every atom has zero density");
  for (Eigen::Index a = 0; a < m; ++a) {
    const double e = std::exp(logw[a] - mx);
    out.denominator += e;
    out.numerator += e * psis.col(a);
  }
  out.log_scale = mx;
  return out;
}

}  // namespace tpu
