#include "doctest.h"

#include "nfatom/experiments.hpp"
#include "nfatom/spectral.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>

using namespace nfatom;

namespace
{

constexpr double two_pi = 2 * std::numbers::pi;

InterferenceGeometry default_geometry() { return InterferenceGeometry::from_config(validate_config(ExperimentConfig{})); }

/// Geometry whose per-site increment is `turns` full turns.
InterferenceGeometry geometry_with_turns(double turns)
{
  const double dz = 0.498, lambda = 0.852, theta = 20.0;
  const double s = std::sin(theta * std::numbers::pi / 180.0);
  return InterferenceGeometry::from_parameters(dz, lambda, turns * lambda / dz - s, theta);
}

std::vector<SeparationSample> irregular_samples(RandomStream& rng, std::size_t n, double freq, double amp,
                                                double noise)
{
  std::vector<SeparationSample> v;
  for (std::size_t i = 0; i < n; ++i)
  {
    const double d = 5.0 + 280.0 * rng.uniform();
    v.push_back({d, 400.0 + amp * std::cos(two_pi * freq * d + 0.3) + rng.normal(0, noise)});
  }
  return v;
}

} // namespace

TEST_CASE("relative phase basics")
{
  const auto g = default_geometry();
  CHECK(relative_phase(0, g) == 0.0);
  for (long m : {1L, 2L, 17L, 300L})
  {
    const double p = relative_phase(m, g);
    CHECK(p >= 0.0);
    CHECK(p < two_pi);
    CHECK(relative_phase(-m, g) == doctest::Approx(two_pi - p).epsilon(1e-9));
  }
}

TEST_CASE("relative phase is periodic for commensurate increments")
{
  // 1 + 3/7 turns per site: period of 7 sites
  const auto g = geometry_with_turns(1.0 + 3.0 / 7.0);
  for (long m = -20; m <= 20; ++m)
  {
    const double a = relative_phase(m, g), b = relative_phase(m + 7, g), c = relative_phase(m + 70, g);
    const auto wrapped = [](double x, double y) { return std::min(std::abs(x - y), two_pi - std::abs(x - y)); };
    CHECK(wrapped(a, b) < 1e-9);
    CHECK(wrapped(a, c) < 1e-9);
  }
}

TEST_CASE("per-site phase increment at the default geometry")
{
  const auto g = default_geometry();
  const double s = std::sin(20.0 * std::numbers::pi / 180.0);
  CHECK(phase_increment(g) == doctest::Approx(0.498 * two_pi * (s + 1.1396352301683073) / 0.852).epsilon(1e-12));
  CHECK(phase_increment(g) == doctest::Approx(5.444).epsilon(0.001));
}

TEST_CASE("constructive-interference spacing")
{
  const auto g = default_geometry();
  CHECK(constructive_spacing(g) == doctest::Approx(0.575).epsilon(0.002));
  CHECK(1.0 / constructive_spacing(g) == doctest::Approx(1.739).epsilon(0.002));

  // collinear limit: unit index at normal incidence
  auto collinear = InterferenceGeometry::from_parameters(0.498, 0.852, 1.0, 0.0);
  CHECK(constructive_spacing(collinear) == doctest::Approx(0.852).epsilon(1e-12));

  auto doubled = g;
  doubled.k_nf *= 2;
  doubled.k0 *= 2;
  CHECK(constructive_spacing(doubled) == doctest::Approx(0.5 * constructive_spacing(g)).epsilon(1e-12));
}

TEST_CASE("alias frequency")
{
  const auto g = default_geometry();
  CHECK(alias_frequency(g) == doctest::Approx(0.269).epsilon(1e-6));
  CHECK(1.0 / alias_frequency(g) == doctest::Approx(3.7).epsilon(0.02));
  // commensurate: one full turn per site
  CHECK(alias_frequency(geometry_with_turns(1.0)) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(std::abs(alias_frequency(geometry_with_turns(1.0))) < 1e-12);

  double prev = std::numeric_limits<double>::infinity();
  for (double theta = 10.0; theta <= 30.0; theta += 0.5)
  {
    const auto gt = InterferenceGeometry::from_parameters(0.498, 0.852, 1.1396352301683073, theta);
    const double f = alias_frequency(gt);
    CHECK(f < prev);
    if (std::isfinite(prev))
      CHECK(prev - f < 0.02); // continuous on this branch
    prev = f;
  }
}

TEST_CASE("Bragg angle")
{
  const auto g = default_geometry();
  const double theta = g.bragg_angle() * 180.0 / std::numbers::pi;
  CHECK(theta == doctest::Approx(34.8).epsilon(0.005));
  const auto at_bragg = InterferenceGeometry::from_parameters(0.498, 0.852, 1.1396352301683073, theta);
  CHECK(alias_frequency(at_bragg) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("relative phases of pairs from the loading distribution are nearly flat")
{
  const auto v = validate_config(ExperimentConfig{});
  const auto dist = loading_site_distribution(v);
  const auto g = InterferenceGeometry::from_config(v);
  const int n_bins = 20;

  // exact bin probabilities of ordered pairs on distinct sites
  std::vector<double> exact(n_bins, 0.0);
  double distinct = 0;
  const auto n_sites = static_cast<long>(dist.weights.size());
  for (long i = 0; i < n_sites; ++i)
    for (long j = 0; j < n_sites; ++j)
    {
      if (i == j)
        continue;
      const double w = dist.weights[static_cast<std::size_t>(i)] * dist.weights[static_cast<std::size_t>(j)];
      const auto bin = static_cast<std::size_t>(relative_phase(j - i, g) / two_pi * n_bins);
      exact[std::min<std::size_t>(bin, n_bins - 1)] += w;
      distinct += w;
    }
  for (double& p : exact)
    p /= distinct;
  // the finite region of interest leaves a small ripple on the flat distribution
  for (double p : exact)
    CHECK(std::abs(p * n_bins - 1.0) < 0.03); // largest deviation is 2.2%

  // the sampler follows the exact distribution
  RandomStream rng(1, 0);
  const std::size_t n = 100000;
  const auto h = phase_histogram(dist, g, n, rng, n_bins);
  REQUIRE(h.n_bins() == static_cast<std::size_t>(n_bins));
  double chi2 = 0;
  for (int b = 0; b < n_bins; ++b)
  {
    const double expected = static_cast<double>(n) * exact[static_cast<std::size_t>(b)];
    chi2 += (h.counts[static_cast<std::size_t>(b)] - expected) * (h.counts[static_cast<std::size_t>(b)] - expected) / expected;
  }
  const boost::math::chi_squared d(n_bins - 1);
  CHECK(boost::math::cdf(boost::math::complement(d, chi2)) > 0.01);
}

TEST_CASE("phase histogram degenerate cases")
{
  RandomStream rng(2, 0);
  SiteDistribution two_sites{500, {0.5, 0.5}};
  const auto h = phase_histogram(two_sites, default_geometry(), 2000, rng, 20);
  CHECK(std::count_if(h.counts.begin(), h.counts.end(), [](double c) { return c > 0; }) <= 2);
  // a full turn per site puts every pair at phase zero (up to rounding into the last bin)
  const auto flat = phase_histogram(loading_site_distribution(validate_config(ExperimentConfig{})),
                                    geometry_with_turns(1.0), 2000, rng, 20);
  CHECK(flat.counts.front() + flat.counts.back() == doctest::Approx(2000.0));
  const double tiny = std::min(relative_phase(37, geometry_with_turns(1.0)), two_pi - relative_phase(37, geometry_with_turns(1.0)));
  CHECK(tiny < 1e-9);
}

TEST_CASE("single tone is recovered")
{
  RandomStream rng(3, 0);
  const auto samples = irregular_samples(rng, 400, 0.269, 40.0, 0.0);
  const auto grid = linear_grid(0.02, 1.0, 1961);
  const auto p = periodogram(samples, grid);
  CHECK(std::abs(p.peak.frequency - 0.269) < (grid[1] - grid[0]));
  CHECK(p.peak.power == doctest::Approx(40.0 * 40.0).epsilon(0.02));
  CHECK(std::all_of(p.power.begin(), p.power.end(), [](double x) { return x >= 0; }));
}

TEST_CASE("periodogram ignores a constant offset")
{
  RandomStream rng(4, 0);
  auto samples = irregular_samples(rng, 200, 0.31, 10.0, 5.0);
  const auto grid = linear_grid(0.05, 0.8, 300);
  const auto a = periodogram(samples, grid);
  for (auto& s : samples)
    s.counts += 1234.5;
  const auto b = periodogram(samples, grid);
  for (std::size_t i = 0; i < grid.size(); ++i)
    CHECK(b.power[i] == doctest::Approx(a.power[i]).epsilon(1e-6));
  CHECK_THROWS_AS(periodogram(std::vector<SeparationSample>(10, {1.0, 1.0}), grid), InsufficientSamples);
}

TEST_CASE("white noise: ordinates above five times the median occur at the null rate")
{
  // ordinates of a white-noise spectrum are close to exponential, so a single frequency
  // exceeds five times the median with probability 2^-5
  RandomStream rng(5, 0);
  const auto grid = linear_grid(0.02, 1.0, 1961);
  std::size_t above = 0, total = 0;
  double worst_null = 0;
  for (int trial = 0; trial < 40; ++trial)
  {
    const auto samples = irregular_samples(rng, 500, 0.269, 0.0, 20.0);
    const auto p = periodogram(samples, grid);
    auto sorted = p.power;
    std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
    const double median = sorted[sorted.size() / 2];
    for (double x : p.power)
      above += x > 5 * median ? 1 : 0;
    total += p.power.size();
    worst_null = std::max(worst_null, *std::max_element(p.power.begin(), p.power.end()) / median);
  }
  CHECK(static_cast<double>(above) / static_cast<double>(total) == doctest::Approx(1.0 / 32).epsilon(0.35));

  // a modest tone at the same noise level stands far above the largest null excursion
  const auto p = periodogram(irregular_samples(rng, 500, 0.269, 10.0, 20.0), grid);
  auto sorted = p.power;
  std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
  CHECK(p.peak.power / sorted[sorted.size() / 2] > worst_null);
  CHECK(p.peak.frequency == doctest::Approx(0.269).epsilon(0.01));
}

TEST_CASE("binned transform agrees on the peak")
{
  RandomStream rng(6, 0);
  const auto samples = irregular_samples(rng, 3000, 0.269, 30.0, 10.0);
  const auto grid = linear_grid(0.02, 1.0, 981);
  const auto power = binned_dft_power(samples, 0.498, grid);
  const auto best = std::max_element(power.begin(), power.end()) - power.begin();
  CHECK(grid[static_cast<std::size_t>(best)] == doctest::Approx(0.269).epsilon(0.02));
}

TEST_CASE("default frequency grid stops at half the median sampling rate")
{
  std::vector<SeparationSample> v;
  for (int i = 0; i < 100; ++i)
    v.push_back({1.0 + 2.0 * i, 0.0});
  const auto g = default_frequency_grid(v, 64);
  REQUIRE(g.size() == 64);
  CHECK(g.back() == doctest::Approx(0.25));
  CHECK(std::is_sorted(g.begin(), g.end()));
}
