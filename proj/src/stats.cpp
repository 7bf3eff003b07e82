#include "nfatom/stats.hpp"

#include "nfatom/lsq.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <random>

namespace nfatom
{

namespace
{

double normal_cdf(double x, double mean, double sigma)
{
  return 0.5 * std::erfc(-(x - mean) / (sigma * std::sqrt(2.0)));
}

double normal_sf(double x, double mean, double sigma)
{
  return 0.5 * std::erfc((x - mean) / (sigma * std::sqrt(2.0)));
}

struct Moments
{
  double weight = 0, mean = 0, sigma = 0, peak = 0;
};

Moments bin_moments(const Histogram& hist, std::size_t lo, std::size_t hi)
{
  Moments m;
  for (std::size_t i = lo; i < hi; ++i)
  {
    m.weight += hist.counts[i];
    m.mean += hist.counts[i] * hist.center(i);
    m.peak = std::max(m.peak, hist.counts[i]);
  }
  if (m.weight <= 0)
    return m;
  m.mean /= m.weight;
  double var = 0;
  for (std::size_t i = lo; i < hi; ++i)
    var += hist.counts[i] * (hist.center(i) - m.mean) * (hist.center(i) - m.mean);
  m.sigma = std::sqrt(std::max(var / m.weight, 0.0));
  return m;
}

// Split point maximizing the between-class variance of the binned counts.
std::size_t otsu_split(const Histogram& hist)
{
  const std::size_t n = hist.n_bins();
  double best = -1;
  std::size_t best_split = n / 2;
  for (std::size_t s = 1; s < n; ++s)
  {
    const auto left = bin_moments(hist, 0, s);
    const auto right = bin_moments(hist, s, n);
    if (left.weight <= 0 || right.weight <= 0)
      continue;
    const double between = left.weight * right.weight * (left.mean - right.mean) * (left.mean - right.mean);
    if (between > best)
    {
      best = between;
      best_split = s;
    }
  }
  return best_split;
}

// Expectation-maximization on bin centers, refining a two-component starting point.
void refine_by_em(const Histogram& hist, std::vector<GaussianComponent>& comps, int iterations = 100)
{
  const std::size_t n = hist.n_bins();
  const double min_sigma = 0.5 * hist.width(0);
  std::array<double, 2> weight{0.5, 0.5};
  std::vector<double> resp(n);
  for (int it = 0; it < iterations; ++it)
  {
    std::array<double, 2> w{}, m{}, v{};
    for (std::size_t i = 0; i < n; ++i)
    {
      const double x = hist.center(i);
      double dens[2];
      for (int k = 0; k < 2; ++k)
      {
        const double z = (x - comps[k].mean) / comps[k].sigma;
        dens[k] = weight[k] * std::exp(-0.5 * z * z) / comps[k].sigma;
      }
      const double total = dens[0] + dens[1];
      resp[i] = total > 0 ? dens[0] / total : (x < 0.5 * (comps[0].mean + comps[1].mean) ? 1.0 : 0.0);
      w[0] += hist.counts[i] * resp[i];
      w[1] += hist.counts[i] * (1 - resp[i]);
      m[0] += hist.counts[i] * resp[i] * x;
      m[1] += hist.counts[i] * (1 - resp[i]) * x;
    }
    if (w[0] <= 0 || w[1] <= 0)
      return;
    for (int k = 0; k < 2; ++k)
      m[k] /= w[k];
    for (std::size_t i = 0; i < n; ++i)
    {
      const double x = hist.center(i);
      v[0] += hist.counts[i] * resp[i] * (x - m[0]) * (x - m[0]);
      v[1] += hist.counts[i] * (1 - resp[i]) * (x - m[1]) * (x - m[1]);
    }
    for (int k = 0; k < 2; ++k)
    {
      comps[k].mean = m[k];
      comps[k].sigma = std::max(std::sqrt(v[k] / w[k]), min_sigma);
      weight[k] = w[k] / (w[0] + w[1]);
    }
  }
  // peak height per bin of each component
  const double total = std::accumulate(hist.counts.begin(), hist.counts.end(), 0.0);
  for (int k = 0; k < 2; ++k)
    comps[k].amplitude = weight[k] * total * hist.width(0) / (comps[k].sigma * std::sqrt(2 * std::numbers::pi));
}

} // namespace

std::vector<double> Histogram::normalized() const
{
  const double sum = std::accumulate(counts.begin(), counts.end(), 0.0);
  std::vector<double> out(counts.size(), 0.0);
  if (sum > 0)
    for (std::size_t i = 0; i < counts.size(); ++i)
      out[i] = counts[i] / sum;
  return out;
}

std::vector<double> regular_edges(double lo, double hi, double bin_width)
{
  std::vector<double> edges;
  const auto n = static_cast<long>(std::ceil((hi - lo) / bin_width - 1e-9));
  for (long i = 0; i <= std::max(n, 1L); ++i)
    edges.push_back(lo + i * bin_width);
  return edges;
}

Histogram build_histogram(std::span<const double> values, double bin_width, std::optional<double> origin)
{
  if (values.empty())
    throw EmptyInput("build_histogram: no values");
  if (!(bin_width > 0))
    throw std::invalid_argument("build_histogram: bin width must be positive");
  const auto [min_it, max_it] = std::minmax_element(values.begin(), values.end());
  const double lo = origin ? *origin : std::floor(*min_it / bin_width) * bin_width;
  if (*min_it < lo)
    throw std::invalid_argument("build_histogram: origin above the smallest value");
  const auto n_bins = static_cast<std::size_t>(std::floor((*max_it - lo) / bin_width)) + 1;

  Histogram h;
  h.edges.resize(n_bins + 1);
  for (std::size_t i = 0; i <= n_bins; ++i)
    h.edges[i] = lo + static_cast<double>(i) * bin_width;
  h.counts.assign(n_bins, 0.0);
  for (double v : values)
  {
    auto bin = static_cast<std::size_t>(std::floor((v - lo) / bin_width));
    h.counts[std::min(bin, n_bins - 1)] += 1;
  }
  h.n_total = static_cast<double>(values.size());
  return h;
}

Histogram build_histogram_edges(std::span<const double> values, std::vector<double> edges)
{
  if (values.empty())
    throw EmptyInput("build_histogram: no values");
  if (edges.size() < 2 || !std::is_sorted(edges.begin(), edges.end()))
    throw std::invalid_argument("build_histogram: need at least two ascending edges");
  Histogram h;
  h.counts.assign(edges.size() - 1, 0.0);
  for (double v : values)
  {
    if (v < edges.front() || v > edges.back())
      continue;
    auto it = std::upper_bound(edges.begin(), edges.end(), v);
    auto bin = static_cast<std::size_t>(std::distance(edges.begin(), it)) - 1;
    h.counts[std::min(bin, h.counts.size() - 1)] += 1;
  }
  h.edges = std::move(edges);
  h.n_total = std::accumulate(h.counts.begin(), h.counts.end(), 0.0);
  return h;
}

double total_variation_distance(const Histogram& a, const Histogram& b)
{
  if (a.n_bins() != b.n_bins())
    throw ShapeMismatch("total_variation_distance: bin counts differ");
  const auto pa = a.normalized();
  const auto pb = b.normalized();
  double tv = 0;
  for (std::size_t i = 0; i < pa.size(); ++i)
    tv += std::abs(pa[i] - pb[i]);
  return 0.5 * tv;
}

double GaussianFit::evaluate(double x) const
{
  double y = has_offset ? offset : 0.0;
  for (const auto& c : components)
    y += c.amplitude * std::exp(-0.5 * (x - c.mean) * (x - c.mean) / (c.sigma * c.sigma));
  return y;
}

GaussianFit fit_gaussian_mixture(const Histogram& hist, int n_components,
                                 std::optional<GaussianInit> init, bool fit_offset)
{
  if (n_components != 1 && n_components != 2)
    throw std::invalid_argument("fit_gaussian_mixture: 1 or 2 components");
  const auto nonzero = std::count_if(hist.counts.begin(), hist.counts.end(), [](double c) { return c > 0; });
  if (nonzero < 5 * n_components)
    throw InsufficientData("fit_gaussian_mixture: too few populated bins");

  std::vector<GaussianComponent> start;
  if (init && static_cast<int>(init->components.size()) == n_components)
    start = init->components;
  else if (n_components == 1)
  {
    const auto m = bin_moments(hist, 0, hist.n_bins());
    start.push_back({m.peak, m.mean, std::max(m.sigma, 1e-3 * hist.width(0))});
  }
  else
  {
    const auto split = otsu_split(hist);
    for (auto [lo, hi] : {std::pair{std::size_t{0}, split}, std::pair{split, hist.n_bins()}})
    {
      const auto m = bin_moments(hist, lo, hi);
      start.push_back({m.peak, m.mean, std::max(m.sigma, 0.5 * hist.width(0))});
    }
    refine_by_em(hist, start);
  }

  const int n_params = 3 * n_components + (fit_offset ? 1 : 0);
  Eigen::VectorXd p0(n_params);
  for (int k = 0; k < n_components; ++k)
  {
    p0[3 * k] = start[k].amplitude;
    p0[3 * k + 1] = start[k].mean;
    p0[3 * k + 2] = start[k].sigma;
  }
  if (fit_offset)
    p0[n_params - 1] = 0.0;

  const auto n = static_cast<Eigen::Index>(hist.n_bins());
  Eigen::VectorXd inv_sd(n);
  for (Eigen::Index i = 0; i < n; ++i)
    inv_sd[i] = 1.0 / std::sqrt(std::max(hist.counts[i], 1.0));

  auto model_at = [&](const Eigen::VectorXd& p, double x) {
    double model = fit_offset ? p[n_params - 1] : 0.0;
    for (int k = 0; k < n_components; ++k)
    {
      const double z = (x - p[3 * k + 1]) / p[3 * k + 2];
      model += p[3 * k] * std::exp(-0.5 * z * z);
    }
    return model;
  };

  auto residual = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r, Eigen::MatrixXd& J) {
    r.resize(n);
    J.resize(n, n_params);
    for (Eigen::Index i = 0; i < n; ++i)
    {
      const double x = hist.center(static_cast<std::size_t>(i));
      for (int k = 0; k < n_components; ++k)
      {
        const double a = p[3 * k], mu = p[3 * k + 1], s = p[3 * k + 2];
        const double z = (x - mu) / s;
        const double g = std::exp(-0.5 * z * z);
        J(i, 3 * k) = -inv_sd[i] * g;
        J(i, 3 * k + 1) = -inv_sd[i] * a * g * z / s;
        J(i, 3 * k + 2) = -inv_sd[i] * a * g * z * z / s;
      }
      if (fit_offset)
        J(i, n_params - 1) = -inv_sd[i];
      r[i] = inv_sd[i] * (hist.counts[static_cast<std::size_t>(i)] - model_at(p, x));
    }
  };

  const double range = hist.edges.back() - hist.edges.front();
  LsqOptions options;
  Eigen::VectorXd lower = Eigen::VectorXd::Constant(n_params, -std::numeric_limits<double>::infinity());
  Eigen::VectorXd upper = Eigen::VectorXd::Constant(n_params, std::numeric_limits<double>::infinity());
  for (int k = 0; k < n_components; ++k)
  {
    lower[3 * k] = 0.0;
    lower[3 * k + 1] = hist.edges.front();
    upper[3 * k + 1] = hist.edges.back();
    lower[3 * k + 2] = 0.25 * hist.width(0);
    upper[3 * k + 2] = range;
    p0[3 * k + 1] = std::clamp(p0[3 * k + 1], lower[3 * k + 1], upper[3 * k + 1]);
    p0[3 * k + 2] = std::clamp(p0[3 * k + 2], lower[3 * k + 2], upper[3 * k + 2]);
  }
  options.lower = lower;
  options.upper = upper;

  // First pass with data-based weights, then reweight with the model (Poisson maximum likelihood).
  LsqResult res;
  try
  {
    res = levenberg_marquardt(residual, p0, options);
    for (int pass = 0; pass < 4 && res.converged; ++pass)
    {
      for (Eigen::Index i = 0; i < n; ++i)
        inv_sd[i] = 1.0 / std::sqrt(std::max(model_at(res.params, hist.center(static_cast<std::size_t>(i))), 0.5));
      res = levenberg_marquardt(residual, res.params, options);
    }
  }
  catch (const std::runtime_error& e)
  {
    throw FitDiverged(std::string("fit_gaussian_mixture: ") + e.what());
  }
  if (!res.converged || !res.params.allFinite())
    throw FitDiverged("fit_gaussian_mixture: no convergence");

  GaussianFit fit;
  fit.has_offset = fit_offset;
  for (int k = 0; k < n_components; ++k)
  {
    GaussianComponent c;
    c.amplitude = res.params[3 * k];
    c.mean = res.params[3 * k + 1];
    c.sigma = std::abs(res.params[3 * k + 2]);
    c.amplitude_err = res.standard_error(3 * k);
    c.mean_err = res.standard_error(3 * k + 1);
    c.sigma_err = res.standard_error(3 * k + 2);
    fit.components.push_back(c);
  }
  std::sort(fit.components.begin(), fit.components.end(),
            [](const auto& a, const auto& b) { return a.mean < b.mean; });
  if (fit_offset)
  {
    fit.offset = res.params[n_params - 1];
    fit.offset_err = res.standard_error(n_params - 1);
  }
  fit.reduced_chi2 = res.reduced_chi2();
  return fit;
}

namespace
{

// Time from the reference point (start of the next image minus `gap`) bookkeeping.
double model_gap(const DetectionModel& m)
{
  double gap = m.wait_s;
  if (m.condition_on_detection)
    gap += (1.0 - m.f_thr) * m.exposure_s;
  return gap;
}

double survival(double t, double tau)
{
  if (!std::isfinite(tau))
    return 1.0;
  return std::exp(-t / tau);
}

// Mean and sigma of the next-image sum for presence fraction f.
// Full-exposure distribution: distinct values with probabilities, plus its first two moments.
struct AtomDistribution
{
  std::vector<double> values;
  std::vector<double> probs;
  double mean = 0;
  double sigma = 1;
  bool empirical = false;
};

AtomDistribution atom_distribution(const DetectionModel& m)
{
  AtomDistribution d;
  d.mean = m.atom_mean;
  d.sigma = m.atom_sigma;
  if (m.atom_samples.empty())
    return d;
  std::map<double, double> tally;
  for (double x : m.atom_samples)
    tally[x] += 1.0;
  const auto n = static_cast<double>(m.atom_samples.size());
  for (const auto& [x, c] : tally)
  {
    d.values.push_back(x);
    d.probs.push_back(c / n);
  }
  d.mean = mean(m.atom_samples);
  d.sigma = m.atom_samples.size() > 1 ? sample_stddev(m.atom_samples) : 0.0;
  d.empirical = true;
  return d;
}

std::pair<double, double> partial_distribution(const DetectionModel& m, const AtomDistribution& atom, double f)
{
  const double mu = m.bg_mean + f * (atom.mean - m.bg_mean);
  const double var = m.bg_sigma * m.bg_sigma + f * (atom.sigma * atom.sigma - m.bg_sigma * m.bg_sigma);
  return {mu, std::sqrt(std::max(var, 1e-12))};
}

// Partial exposure around one measured sum `a`: the signal part scales with f and the
// remaining noise keeps the variance of the Gaussian description.
std::pair<double, double> partial_around_sample(const DetectionModel& m, const AtomDistribution& atom, double a,
                                                double f)
{
  const double var = (1.0 - f) * (m.bg_sigma * m.bg_sigma + f * atom.sigma * atom.sigma);
  return {m.bg_mean + f * (a - m.bg_mean), std::sqrt(std::max(var, 0.0))};
}

std::size_t bin_of(const std::vector<double>& edges, double x)
{
  if (x < edges.front() || x > edges.back())
    return edges.size();
  auto it = std::upper_bound(edges.begin(), edges.end(), x);
  return std::min(static_cast<std::size_t>(std::distance(edges.begin(), it)) - 1, edges.size() - 2);
}

Histogram empty_like(std::vector<double> edges)
{
  Histogram h;
  h.counts.assign(edges.size() - 1, 0.0);
  h.edges = std::move(edges);
  return h;
}

} // namespace

std::array<double, 3> conditioned_weights(const DetectionModel& m)
{
  const double gap = model_gap(m);
  const double real = 1.0 - m.p_false;
  const double bg = m.p_false + real * (1.0 - survival(gap, m.tau_s));
  const double full = real * survival(gap + m.exposure_s, m.tau_s);
  return {bg, full, std::max(0.0, 1.0 - bg - full)};
}

Histogram predict_conditioned_histogram(const DetectionModel& m, std::vector<double> edges,
                                        double n_total, int quadrature_nodes)
{
  if (edges.size() < 2)
    throw std::invalid_argument("predict_conditioned_histogram: need bin edges");
  Histogram h = empty_like(std::move(edges));
  const auto w = conditioned_weights(m);
  const double gap = model_gap(m);
  const double T = m.exposure_s;
  const double real = 1.0 - m.p_false;

  const auto atom = atom_distribution(m);

  auto bin_prob = [&](std::size_t i, double mu, double sigma) {
    if (sigma <= 0)
      return bin_of(h.edges, mu) == i ? 1.0 : 0.0;
    return normal_cdf(h.edges[i + 1], mu, sigma) - normal_cdf(h.edges[i], mu, sigma);
  };
  // probability mass of the atom-related part at presence fraction f, per bin
  auto atom_part = [&](std::size_t i, double f) {
    if (!atom.empirical)
    {
      const auto [mu, sigma] = partial_distribution(m, atom, f);
      return bin_prob(i, mu, sigma);
    }
    double p = 0;
    for (std::size_t k = 0; k < atom.values.size(); ++k)
    {
      const auto [mu, sigma] = partial_around_sample(m, atom, atom.values[k], f);
      p += atom.probs[k] * bin_prob(i, mu, sigma);
    }
    return p;
  };

  // loss time s in [0, T] after the start of the next image: exact loss probability of each
  // subinterval, atom part at the mean loss time within it (exact for any lifetime as the
  // subintervals shrink)
  const int nodes = std::max(quadrature_nodes, 200);
  const double step = T / nodes;
  double mean_offset = 0.5 * step;
  if (std::isfinite(m.tau_s) && step / m.tau_s > 1e-4)
    mean_offset = m.tau_s - step / std::expm1(step / m.tau_s);
  std::vector<double> node_weight(nodes);
  for (int j = 0; j < nodes; ++j)
    node_weight[j] = std::isfinite(m.tau_s)
                         ? real * (survival(gap + j * step, m.tau_s) - survival(gap + (j + 1) * step, m.tau_s))
                         : 0.0;

  for (std::size_t i = 0; i < h.n_bins(); ++i)
  {
    double p = w[0] * bin_prob(i, m.bg_mean, m.bg_sigma) + w[1] * atom_part(i, 1.0);
    if (w[2] > 0)
      for (int j = 0; j < nodes; ++j)
        p += node_weight[j] * atom_part(i, (j * step + mean_offset) / T);
    h.counts[i] = n_total * p;
  }
  h.n_total = std::accumulate(h.counts.begin(), h.counts.end(), 0.0);
  return h;
}

Histogram predict_conditioned_histogram_mc(const DetectionModel& m, std::vector<double> edges,
                                           double n_total, std::size_t n_draws, RandomStream& rng)
{
  Histogram h = empty_like(std::move(edges));
  const double gap = model_gap(m);
  const double T = m.exposure_s;
  const auto atom = atom_distribution(m);
  std::discrete_distribution<std::size_t> pick(atom.probs.begin(), atom.probs.end());
  for (std::size_t k = 0; k < n_draws; ++k)
  {
    double f = 0.0;
    if (rng.uniform() >= m.p_false)
    {
      // loss time measured from the start of the next image
      const double s = rng.exponential(m.tau_s) - gap;
      f = std::clamp(s / T, 0.0, 1.0);
    }
    double x = 0;
    if (atom.empirical)
    {
      const double a = atom.values[pick(rng.engine())];
      const auto [mu, sigma] = partial_around_sample(m, atom, a, f);
      x = sigma > 0 ? rng.normal(mu, sigma) : mu;
    }
    else
    {
      const auto [mu, sigma] = partial_distribution(m, atom, f);
      x = rng.normal(mu, sigma);
    }
    const auto bin = bin_of(h.edges, x);
    if (bin < h.n_bins())
      h.counts[bin] += 1;
  }
  const double scale = n_total / static_cast<double>(n_draws);
  for (auto& c : h.counts)
    c *= scale;
  h.n_total = std::accumulate(h.counts.begin(), h.counts.end(), 0.0);
  return h;
}

LossSplit loss_split_probabilities(const DetectionModel& m)
{
  const double survive_thr = survival(m.f_thr * m.exposure_s, m.tau_s);
  const double survive_all = survival(m.exposure_s, m.tau_s);
  return {1.0 - survive_thr, survive_thr - survive_all};
}

double ThresholdSweep::detection_probability(double threshold) const
{
  return normal_sf(threshold, single_mean, single_sigma);
}

double ThresholdSweep::model_survival(double threshold) const
{
  return (1.0 - two_atom_weight) * normal_sf(threshold, single_mean, single_sigma) +
         two_atom_weight * normal_sf(threshold, 2.0 * single_mean, std::sqrt(2.0) * single_sigma);
}

ThresholdSweep threshold_sweep(std::span<const double> peak_values, std::vector<double> thresholds)
{
  if (peak_values.size() < 100)
    throw InsufficientData("threshold_sweep: need at least 100 peak values");
  std::vector<double> sorted(peak_values.begin(), peak_values.end());
  std::sort(sorted.begin(), sorted.end());
  if (thresholds.empty())
  {
    const int n = 200;
    const double lo = std::min(0.0, sorted.front());
    const double hi = sorted.back();
    for (int i = 0; i < n; ++i)
      thresholds.push_back(lo + (hi - lo) * i / (n - 1));
  }

  ThresholdSweep sweep;
  sweep.thresholds = thresholds;
  for (double t : thresholds)
  {
    const auto above = sorted.end() - std::upper_bound(sorted.begin(), sorted.end(), t);
    sweep.survival.push_back(static_cast<double>(above) / static_cast<double>(sorted.size()));
  }

  const double median = sorted[sorted.size() / 2];
  const double iqr = sorted[3 * sorted.size() / 4] - sorted[sorted.size() / 4];
  Eigen::VectorXd p0(3);
  p0 << 0.05, median, std::max(iqr / 1.349, 1e-6);

  const auto n = static_cast<Eigen::Index>(thresholds.size());
  auto residual = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r, Eigen::MatrixXd& J) {
    r.resize(n);
    J.resize(n, 3);
    const double w = p[0], mu = p[1], s = p[2];
    const double s2 = std::sqrt(2.0) * s;
    const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
    for (Eigen::Index i = 0; i < n; ++i)
    {
      const double t = thresholds[i];
      const double z1 = (t - mu) / s, z2 = (t - 2 * mu) / s2;
      const double q1 = normal_sf(t, mu, s), q2 = normal_sf(t, 2 * mu, s2);
      const double g1 = std::exp(-0.5 * z1 * z1) * inv_sqrt2pi;
      const double g2 = std::exp(-0.5 * z2 * z2) * inv_sqrt2pi;
      r[i] = sweep.survival[i] - ((1 - w) * q1 + w * q2);
      J(i, 0) = -(q2 - q1);
      J(i, 1) = -((1 - w) * g1 / s + w * g2 * 2.0 / s2);
      J(i, 2) = -((1 - w) * g1 * z1 / s + w * g2 * z2 / s);
    }
  };

  LsqOptions options;
  Eigen::VectorXd lower(3), upper(3);
  lower << 0.0, -std::numeric_limits<double>::infinity(), 1e-9;
  upper << 1.0, std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity();
  options.lower = lower;
  options.upper = upper;
  LsqResult res = levenberg_marquardt(residual, p0, options);
  if (!res.params.allFinite())
    throw FitDiverged("threshold_sweep: fit diverged");

  // residuals are unweighted; scale the covariance by the residual variance
  const double s2 = res.reduced_chi2();
  sweep.two_atom_weight = res.params[0];
  sweep.single_mean = res.params[1];
  sweep.single_sigma = res.params[2];
  sweep.two_atom_weight_err = std::sqrt(std::max(res.covariance(0, 0) * s2, 0.0));
  sweep.single_mean_err = std::sqrt(std::max(res.covariance(1, 1) * s2, 0.0));
  sweep.single_sigma_err = std::sqrt(std::max(res.covariance(2, 2) * s2, 0.0));
  return sweep;
}

FalseDetectionCurve false_detection_curve(const std::vector<std::vector<double>>& frame_peaks,
                                          std::vector<double> thresholds)
{
  FalseDetectionCurve curve;
  curve.thresholds = std::move(thresholds);
  const auto n_frames = static_cast<double>(frame_peaks.size());
  for (double t : curve.thresholds)
  {
    double events = 0, frames_with_event = 0;
    for (const auto& peaks : frame_peaks)
    {
      const auto above = std::count_if(peaks.begin(), peaks.end(), [t](double v) { return v > t; });
      events += static_cast<double>(above);
      frames_with_event += above > 0 ? 1.0 : 0.0;
    }
    curve.mean_per_image.push_back(n_frames > 0 ? events / n_frames : 0.0);
    curve.p_at_least_one.push_back(n_frames > 0 ? frames_with_event / n_frames : 0.0);
  }
  return curve;
}

double mean(std::span<const double> values)
{
  if (values.empty())
    throw EmptyInput("mean: no values");
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double sample_stddev(std::span<const double> values)
{
  if (values.size() < 2)
    throw InsufficientData("sample_stddev: need two values");
  const double mu = mean(values);
  double ss = 0;
  for (double v : values)
    ss += (v - mu) * (v - mu);
  return std::sqrt(ss / static_cast<double>(values.size() - 1));
}

BeerLambertResult beer_lambert_analysis(const std::vector<TransmissionGroup>& groups)
{
  BeerLambertResult out;
  std::array<bool, 4> seen{};
  for (const auto& g : groups)
  {
    if (g.n_atoms < 0 || g.n_atoms > 3)
      continue;
    if (g.counts.size() < 50)
      throw InsufficientGroup("beer_lambert_analysis: fewer than 50 records for " +
                              std::to_string(g.n_atoms) + " atoms");
    out.mean[g.n_atoms] = mean(g.counts);
    out.mean_err[g.n_atoms] = sample_stddev(g.counts) / std::sqrt(static_cast<double>(g.counts.size()));
    seen[g.n_atoms] = true;
  }
  for (int i = 0; i < 4; ++i)
    if (!seen[i])
      throw InsufficientGroup("beer_lambert_analysis: no records for " + std::to_string(i) + " atoms");

  for (int i = 1; i < 4; ++i)
  {
    const double ratio = out.mean[i] / out.mean[i - 1];
    const double rel = std::hypot(out.mean_err[i] / out.mean[i], out.mean_err[i - 1] / out.mean[i - 1]);
    out.extinction[i - 1] = 1.0 - ratio;
    out.extinction_err[i - 1] = ratio * rel;
  }

  // constant extinction: ln N(i) = ln N(0) + i ln(1 - eta), weighted linear regression
  double sw = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (int i = 0; i < 4; ++i)
  {
    const double y = std::log(out.mean[i]);
    const double sd = out.mean_err[i] / out.mean[i];
    const double w = 1.0 / (sd * sd);
    sw += w;
    sx += w * i;
    sy += w * y;
    sxx += w * i * i;
    sxy += w * i * y;
  }
  const double det = sw * sxx - sx * sx;
  const double slope = (sw * sxy - sx * sy) / det;
  const double intercept = (sxx * sy - sx * sxy) / det;
  const double slope_err = std::sqrt(sw / det);
  out.fitted_extinction = 1.0 - std::exp(slope);
  out.fitted_extinction_err = std::exp(slope) * slope_err;

  out.chi2 = 0;
  for (int i = 0; i < 4; ++i)
  {
    const double sd = out.mean_err[i] / out.mean[i];
    const double d = (std::log(out.mean[i]) - intercept - slope * i) / sd;
    out.chi2 += d * d;
  }
  out.dof = 2;
  boost::math::chi_squared dist(out.dof);
  out.p_value = boost::math::cdf(boost::math::complement(dist, out.chi2));
  return out;
}

ModeMixtureFit fit_mode_mixture(const Histogram& observed, const Histogram& common_template,
                                const Histogram& differential_template)
{
  const std::size_t n = observed.n_bins();
  if (common_template.n_bins() != n || differential_template.n_bins() != n)
    throw ShapeMismatch("fit_mode_mixture: templates must share the observed binning");
  const double total = std::accumulate(observed.counts.begin(), observed.counts.end(), 0.0);
  if (total <= 0)
    throw EmptyInput("fit_mode_mixture: empty observed histogram");
  const auto pc = common_template.normalized();
  const auto pd = differential_template.normalized();

  ModeMixtureFit fit;
  double w = 0.5;
  // Pearson weights from the current model, refined a few times
  for (int iter = 0; iter < 5; ++iter)
  {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < n; ++i)
    {
      const double c = total * pc[i], d = total * pd[i];
      const double model = d + w * (c - d);
      const double weight = 1.0 / std::max(model, 1.0);
      num += weight * (observed.counts[i] - d) * (c - d);
      den += weight * (c - d) * (c - d);
    }
    if (den <= 0)
      throw FitDiverged("fit_mode_mixture: templates are identical");
    w = std::clamp(num / den, 0.0, 1.0);
    fit.common_fraction_err = 1.0 / std::sqrt(den);
  }
  fit.common_fraction = w;
  for (std::size_t i = 0; i < n; ++i)
  {
    const double c = total * pc[i], d = total * pd[i];
    const double model = d + w * (c - d);
    fit.chi2 += (observed.counts[i] - model) * (observed.counts[i] - model) / std::max(model, 1.0);
  }
  return fit;
}

} // namespace nfatom
