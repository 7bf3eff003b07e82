#pragma once

#include <Eigen/Dense>

#include <functional>
#include <optional>

namespace nfatom
{

/// Fills weighted residuals r = sqrt(w) * (data - model) and their Jacobian d r / d p.
using ResidualFunction =
    std::function<void(const Eigen::VectorXd& params, Eigen::VectorXd& residuals, Eigen::MatrixXd& jacobian)>;

struct LsqOptions
{
  int max_iterations = 200;
  double relative_tolerance = 1e-8;
  std::optional<Eigen::VectorXd> lower;
  std::optional<Eigen::VectorXd> upper;
};

struct LsqResult
{
  Eigen::VectorXd params;
  Eigen::MatrixXd covariance; // (J^T J)^-1 at the optimum
  double chi2 = 0;            // sum of squared weighted residuals
  int n_residuals = 0;
  int iterations = 0;
  bool converged = false;

  double reduced_chi2() const
  {
    const int dof = n_residuals - static_cast<int>(params.size());
    return dof > 0 ? chi2 / dof : 0.0;
  }
  double standard_error(int i) const;
};

/// Damped Gauss-Newton (Levenberg-Marquardt) with box constraints enforced by projection.
LsqResult levenberg_marquardt(const ResidualFunction& fn, Eigen::VectorXd initial,
                              const LsqOptions& options = {});

} // namespace nfatom
