#include "helpers.hpp"

#include <Eigen/Eigenvalues>

namespace tpu::test {

double min_eigen(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (m + m.transpose()));
  return es.eigenvalues().minCoeff();
}

}  // namespace tpu::test
