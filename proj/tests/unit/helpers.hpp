#pragma once

#include <vector>

#include "tpu/data_model.hpp"
#include "tpu/numerics.hpp"

namespace tpu::test {

inline Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

inline Subject complete(Outcome o, double x, Vector z, double pi = 1.0, int stratum = 0) {
  Subject s;
  s.outcome = o;
  s.z = std::move(z);
  s.x = Vector::Constant(1, x);
  s.r = 1;
  s.pi = pi;
  s.stratum = stratum;
  return s;
}

inline Subject incomplete(Outcome o, Vector z, double pi = 1.0, int stratum = 0) {
  Subject s;
  s.outcome = o;
  s.z = std::move(z);
  s.r = 0;
  s.pi = pi;
  s.stratum = stratum;
  return s;
}

inline std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

/// Smallest eigenvalue of a symmetric matrix.
double min_eigen(const Matrix& m);

}  // namespace tpu::test
