#include "nfatom/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace nfatom
{

namespace
{
constexpr double two_pi = 2 * std::numbers::pi;
}

InterferenceGeometry InterferenceGeometry::from_config(const ValidatedConfig& vcfg)
{
  InterferenceGeometry g;
  g.lattice_spacing = vcfg.cfg.lattice_spacing;
  g.k0 = vcfg.k0;
  g.k_nf = vcfg.k_nf;
  g.theta = vcfg.cfg.incidence_angle_deg * std::numbers::pi / 180.0;
  return g;
}

InterferenceGeometry InterferenceGeometry::from_parameters(double lattice_spacing_um, double wavelength_um,
                                                           double mode_index, double theta_deg)
{
  InterferenceGeometry g;
  g.lattice_spacing = lattice_spacing_um;
  g.k0 = two_pi / wavelength_um;
  g.k_nf = mode_index * g.k0;
  g.theta = theta_deg * std::numbers::pi / 180.0;
  return g;
}

double InterferenceGeometry::longitudinal_wavenumber() const
{
  return k_nf + k0 * std::sin(theta);
}

double InterferenceGeometry::bragg_angle() const
{
  const double s = (two_pi / lattice_spacing - k_nf) / k0;
  return std::abs(s) <= 1 ? std::asin(s) : std::numeric_limits<double>::quiet_NaN();
}

double phase_increment(const InterferenceGeometry& geom)
{
  return geom.lattice_spacing * geom.longitudinal_wavenumber();
}

double relative_phase(long m, const InterferenceGeometry& geom)
{
  // reduce in units of full turns so that commensurate increments stay exact
  const double turns = phase_increment(geom) / two_pi * static_cast<double>(m);
  double frac = turns - std::floor(turns);
  if (frac >= 1.0)
    frac = 0.0;
  return two_pi * frac;
}

double constructive_spacing(const InterferenceGeometry& geom)
{
  return two_pi / geom.longitudinal_wavenumber();
}

double alias_frequency(const InterferenceGeometry& geom)
{
  return std::abs(1.0 / geom.lattice_spacing - 1.0 / constructive_spacing(geom));
}

long SiteDistribution::sample(RandomStream& rng) const
{
  const double u = rng.uniform();
  double acc = 0;
  for (std::size_t i = 0; i < weights.size(); ++i)
  {
    acc += weights[i];
    if (u < acc)
      return first_site + static_cast<long>(i);
  }
  return first_site + static_cast<long>(weights.size()) - 1;
}

SiteDistribution loading_site_distribution(const ValidatedConfig& vcfg)
{
  const auto& cfg = vcfg.cfg;
  SiteDistribution dist;
  dist.first_site = static_cast<long>(std::ceil(cfg.roi_min_um / cfg.lattice_spacing));
  const long last = static_cast<long>(std::floor(cfg.roi_max_um / cfg.lattice_spacing));
  // probability mass of the Gaussian that rounds onto each site
  const double half = 0.5 * cfg.lattice_spacing;
  const double scale = 1.0 / (cfg.position_sigma_um * std::numbers::sqrt2);
  for (long s = dist.first_site; s <= last; ++s)
  {
    const double x = static_cast<double>(s) * cfg.lattice_spacing;
    const double lo = (x - half - cfg.position_center_um) * scale;
    const double hi = (x + half - cfg.position_center_um) * scale;
    dist.weights.push_back(0.5 * (std::erf(hi) - std::erf(lo)));
  }
  const double total = std::accumulate(dist.weights.begin(), dist.weights.end(), 0.0);
  for (auto& w : dist.weights)
    w /= total;
  return dist;
}

Histogram phase_histogram(const SiteDistribution& dist, const InterferenceGeometry& geom,
                          std::size_t n_samples, RandomStream& rng, int n_bins)
{
  if (dist.weights.size() < 2)
    throw InsufficientData("phase_histogram: need at least two sites");
  Histogram h;
  h.counts.assign(static_cast<std::size_t>(n_bins), 0.0);
  for (int i = 0; i <= n_bins; ++i)
    h.edges.push_back(two_pi * i / n_bins);
  for (std::size_t k = 0; k < n_samples; ++k)
  {
    long a = dist.sample(rng), b = dist.sample(rng);
    while (a == b)
      b = dist.sample(rng);
    // ordered pair: phase of the second atom relative to the first
    const double phase = relative_phase(b - a, geom);
    auto bin = static_cast<std::size_t>(phase / two_pi * n_bins);
    h.counts[std::min(bin, h.counts.size() - 1)] += 1;
  }
  h.n_total = static_cast<double>(n_samples);
  return h;
}

std::vector<double> default_frequency_grid(const std::vector<SeparationSample>& samples, int n_points)
{
  if (samples.size() < 2 || n_points < 2)
    throw InsufficientSamples("default_frequency_grid: need at least two samples");
  std::vector<double> x;
  for (const auto& s : samples)
    x.push_back(s.separation_um);
  std::sort(x.begin(), x.end());
  std::vector<double> gaps;
  for (std::size_t i = 1; i < x.size(); ++i)
    if (x[i] > x[i - 1])
      gaps.push_back(x[i] - x[i - 1]);
  if (gaps.empty())
    throw InsufficientSamples("default_frequency_grid: all separations coincide");
  std::nth_element(gaps.begin(), gaps.begin() + gaps.size() / 2, gaps.end());
  const double f_max = 1.0 / (2.0 * gaps[gaps.size() / 2]);
  std::vector<double> grid(static_cast<std::size_t>(n_points));
  for (int i = 0; i < n_points; ++i)
    grid[static_cast<std::size_t>(i)] = f_max * i / (n_points - 1);
  return grid;
}

namespace
{

struct SinusoidFit
{
  double power = 0;
  double rss = 0;
};

SinusoidFit fit_sinusoid(const std::vector<SeparationSample>& samples, double frequency, double centered_ss)
{
  double sc = 0, ss = 0, scc = 0, sss = 0, scs = 0, sy = 0, syc = 0, sys = 0;
  const double n = static_cast<double>(samples.size());
  for (const auto& s : samples)
  {
    const double arg = two_pi * frequency * s.separation_um;
    const double c = std::cos(arg), si = std::sin(arg);
    sc += c;
    ss += si;
    scc += c * c;
    sss += si * si;
    scs += c * si;
    sy += s.counts;
    syc += s.counts * c;
    sys += s.counts * si;
  }
  // eliminate the offset: centered normal equations for (a, b)
  const double ycm = sy / n;
  const double a11 = scc - sc * sc / n, a22 = sss - ss * ss / n, a12 = scs - sc * ss / n;
  const double r1 = syc - sc * ycm, r2 = sys - ss * ycm;
  const double det = a11 * a22 - a12 * a12;
  SinusoidFit fit;
  fit.rss = centered_ss;
  if (!(det > 1e-9 * n * n))
    return fit;
  const double a = (a22 * r1 - a12 * r2) / det;
  const double b = (a11 * r2 - a12 * r1) / det;
  fit.power = a * a + b * b;
  fit.rss = std::max(centered_ss - (a * r1 + b * r2), 0.0);
  return fit;
}

} // namespace

Periodogram periodogram(const std::vector<SeparationSample>& samples, const std::vector<double>& frequencies)
{
  if (samples.size() < 50)
    throw InsufficientSamples("periodogram: need at least 50 samples");
  if (frequencies.size() < 3 || !std::is_sorted(frequencies.begin(), frequencies.end()))
    throw std::invalid_argument("periodogram: need an ascending grid of at least three frequencies");

  double ybar = 0;
  for (const auto& s : samples)
    ybar += s.counts;
  ybar /= static_cast<double>(samples.size());
  double centered_ss = 0;
  for (const auto& s : samples)
    centered_ss += (s.counts - ybar) * (s.counts - ybar);

  Periodogram pg;
  pg.frequencies = frequencies;
  for (double f : frequencies)
  {
    const auto fit = fit_sinusoid(samples, f, centered_ss);
    pg.power.push_back(fit.power);
    pg.residual_ss.push_back(fit.rss);
  }

  const auto imax = static_cast<std::size_t>(
      std::distance(pg.power.begin(), std::max_element(pg.power.begin(), pg.power.end())));
  auto& peak = pg.peak;
  peak.frequency = frequencies[imax];
  peak.power = pg.power[imax];
  const double step = imax > 0 ? frequencies[imax] - frequencies[imax - 1] : frequencies[1] - frequencies[0];
  peak.uncertainty = step;
  if (imax > 0 && imax + 1 < frequencies.size())
  {
    const double pl = pg.power[imax - 1], p0 = pg.power[imax], pr = pg.power[imax + 1];
    const double denom = pl - 2 * p0 + pr;
    if (denom < 0)
    {
      const double shift = 0.5 * (pl - pr) / denom;
      peak.frequency = frequencies[imax] + shift * step;
      peak.power = p0 - 0.25 * (pl - pr) * shift;
    }
    // curvature of the residual sum of squares: delta chi^2 = 1 at the error
    const double rl = pg.residual_ss[imax - 1], r0 = pg.residual_ss[imax], rr = pg.residual_ss[imax + 1];
    const double curvature = (rl - 2 * r0 + rr) / (step * step);
    const double dof = static_cast<double>(samples.size()) - 3.0;
    const double noise_var = r0 / dof;
    if (curvature > 0 && noise_var > 0)
      peak.uncertainty = std::sqrt(2.0 * noise_var / curvature);
  }

  // full width at half maximum by linear interpolation
  const double half = 0.5 * pg.power[imax];
  double left = frequencies.front(), right = frequencies.back();
  for (std::size_t i = imax; i > 0; --i)
    if (pg.power[i - 1] < half)
    {
      const double t = (half - pg.power[i - 1]) / (pg.power[i] - pg.power[i - 1]);
      left = frequencies[i - 1] + t * (frequencies[i] - frequencies[i - 1]);
      break;
    }
  for (std::size_t i = imax; i + 1 < frequencies.size(); ++i)
    if (pg.power[i + 1] < half)
    {
      const double t = (pg.power[i] - half) / (pg.power[i] - pg.power[i + 1]);
      right = frequencies[i] + t * (frequencies[i + 1] - frequencies[i]);
      break;
    }
  peak.width = right - left;
  return pg;
}

std::vector<double> binned_dft_power(const std::vector<SeparationSample>& samples, double bin_width_um,
                                     const std::vector<double>& frequencies)
{
  if (samples.size() < 50)
    throw InsufficientSamples("binned_dft_power: need at least 50 samples");
  double lo = samples.front().separation_um, hi = lo;
  for (const auto& s : samples)
  {
    lo = std::min(lo, s.separation_um);
    hi = std::max(hi, s.separation_um);
  }
  const auto n_bins = static_cast<std::size_t>(std::floor((hi - lo) / bin_width_um)) + 1;
  std::vector<double> sum(n_bins, 0.0), count(n_bins, 0.0);
  for (const auto& s : samples)
  {
    const auto b = std::min(static_cast<std::size_t>((s.separation_um - lo) / bin_width_um), n_bins - 1);
    sum[b] += s.counts;
    count[b] += 1;
  }
  std::vector<double> centers, values;
  for (std::size_t b = 0; b < n_bins; ++b)
    if (count[b] > 0)
    {
      centers.push_back(lo + (static_cast<double>(b) + 0.5) * bin_width_um);
      values.push_back(sum[b] / count[b]);
    }
  const double avg = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  const double norm = 2.0 / static_cast<double>(values.size());

  std::vector<double> power;
  for (double f : frequencies)
  {
    double re = 0, im = 0;
    for (std::size_t k = 0; k < values.size(); ++k)
    {
      const double arg = two_pi * f * centers[k];
      re += (values[k] - avg) * std::cos(arg);
      im -= (values[k] - avg) * std::sin(arg);
    }
    power.push_back(norm * norm * (re * re + im * im));
  }
  return power;
}

} // namespace nfatom
