#include "nfatom/lsq.hpp"

#include <cmath>
#include <limits>

namespace nfatom
{

double LsqResult::standard_error(int i) const
{
  const double v = covariance(i, i);
  return v >= 0 ? std::sqrt(v) : std::numeric_limits<double>::quiet_NaN();
}

namespace
{

void project(Eigen::VectorXd& p, const LsqOptions& options)
{
  if (options.lower)
    p = p.cwiseMax(*options.lower);
  if (options.upper)
    p = p.cwiseMin(*options.upper);
}

bool finite(const Eigen::VectorXd& v)
{
  return v.allFinite();
}

} // namespace

LsqResult levenberg_marquardt(const ResidualFunction& fn, Eigen::VectorXd initial,
                              const LsqOptions& options)
{
  const auto n_params = initial.size();
  project(initial, options);

  Eigen::VectorXd params = initial;
  Eigen::VectorXd residuals;
  Eigen::MatrixXd jacobian;
  fn(params, residuals, jacobian);
  if (!finite(residuals))
    throw std::runtime_error("levenberg_marquardt: non-finite residuals at the initial point");

  double chi2 = residuals.squaredNorm();
  double lambda = 1e-3;
  LsqResult result;
  result.n_residuals = static_cast<int>(residuals.size());

  Eigen::VectorXd trial_residuals;
  Eigen::MatrixXd trial_jacobian;
  int iter = 0;
  for (; iter < options.max_iterations; ++iter)
  {
    const Eigen::MatrixXd jtj = jacobian.transpose() * jacobian;
    const Eigen::VectorXd gradient = jacobian.transpose() * residuals;

    bool stepped = false;
    while (lambda < 1e16)
    {
      Eigen::MatrixXd damped = jtj;
      for (Eigen::Index i = 0; i < n_params; ++i)
        damped(i, i) += lambda * std::max(jtj(i, i), 1e-12);
      const Eigen::VectorXd delta = damped.ldlt().solve(-gradient);
      Eigen::VectorXd trial = params + delta;
      project(trial, options);
      if (!finite(trial))
      {
        lambda *= 10;
        continue;
      }
      fn(trial, trial_residuals, trial_jacobian);
      const double trial_chi2 = trial_residuals.squaredNorm();
      if (std::isfinite(trial_chi2) && trial_chi2 <= chi2)
      {
        const double change = (trial - params).norm() / (params.norm() + 1e-12);
        const bool stalled = chi2 - trial_chi2 <= 1e-14 * chi2;
        params = trial;
        residuals = trial_residuals;
        jacobian = trial_jacobian;
        chi2 = trial_chi2;
        lambda = std::max(lambda / 10, 1e-12);
        stepped = true;
        if (change < options.relative_tolerance || stalled)
          result.converged = true;
        break;
      }
      lambda *= 10;
    }
    if (!stepped)
    {
      // no downhill step at any damping: already at a (possibly constrained) minimum
      result.converged = true;
      break;
    }
    if (result.converged)
      break;
  }

  result.params = params;
  result.chi2 = chi2;
  result.iterations = iter;
  const Eigen::MatrixXd jtj = jacobian.transpose() * jacobian;
  result.covariance = jtj.completeOrthogonalDecomposition().pseudoInverse();
  return result;
}

} // namespace nfatom
