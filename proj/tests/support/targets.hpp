#pragma once

#include <cmath>

#include "btm/sampler.hpp"

namespace targets {

inline btm::Target std_normal(int dim) {
  return {dim, [](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
            if (g) *g = -x;
            return -0.5 * x.squaredNorm();
          }};
}

// Independent normals with standard deviations `sd`.
inline btm::Target scaled_normal(Eigen::VectorXd sd) {
  const int dim = static_cast<int>(sd.size());
  return {dim, [sd](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
            Eigen::VectorXd z = x.cwiseQuotient(sd);
            if (g) *g = -z.cwiseQuotient(sd);
            return -0.5 * z.squaredNorm();
          }};
}

// Exp(1) in log space: y = exp(x), log p(x) = x - exp(x).
inline btm::Target log_exponential() {
  return {1, [](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
            if (g) (*g)[0] = 1.0 - std::exp(x[0]);
            return x[0] - std::exp(x[0]);
          }};
}

}  // namespace targets
