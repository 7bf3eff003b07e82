#pragma once

#include "nfatom/core.hpp"
#include "nfatom/stats.hpp"

#include <vector>

namespace nfatom
{

struct InterferenceGeometry
{
  double lattice_spacing = 0; // µm
  double k0 = 0;              // rad/µm
  double k_nf = 0;            // rad/µm
  double theta = 0;           // rad

  static InterferenceGeometry from_config(const ValidatedConfig& vcfg);
  static InterferenceGeometry from_parameters(double lattice_spacing_um, double wavelength_um,
                                              double mode_index, double theta_deg);

  /// k_nf + k0 sin(theta), rad/µm.
  double longitudinal_wavenumber() const;
  /// Incidence angle at which every site adds in phase, rad. NaN when unreachable.
  double bragg_angle() const;
};

/// Relative phase increment between adjacent lattice sites, rad (not reduced).
double phase_increment(const InterferenceGeometry& geom);

/// Phase between the fields two atoms `m` sites apart couple into the fiber, in [0, 2pi).
double relative_phase(long m, const InterferenceGeometry& geom);

/// Atom-atom distance between successive constructive-interference conditions, µm.
double constructive_spacing(const InterferenceGeometry& geom);

/// Apparent spatial frequency when distances are sampled on the lattice, 1/µm.
double alias_frequency(const InterferenceGeometry& geom);

/// Discrete probability distribution over lattice sites.
struct SiteDistribution
{
  long first_site = 0;
  std::vector<double> weights; // normalized

  long sample(RandomStream& rng) const;
};

/// Bell-shaped loading distribution restricted to the region of interest.
SiteDistribution loading_site_distribution(const ValidatedConfig& vcfg);

/// Histogram over [0, 2pi) of relative phases of atom pairs on distinct sites.
Histogram phase_histogram(const SiteDistribution& dist, const InterferenceGeometry& geom,
                          std::size_t n_samples, RandomStream& rng, int n_bins = 20);

struct SeparationSample
{
  double separation_um = 0;
  double counts = 0;
};

struct SpectralPeak
{
  double frequency = 0;   // 1/µm
  double width = 0;       // full width at half maximum, 1/µm
  double uncertainty = 0; // 1/µm
  double power = 0;
};

struct Periodogram
{
  std::vector<double> frequencies; // 1/µm
  std::vector<double> power;
  std::vector<double> residual_ss; // residual sum of squares of the sinusoid fit
  SpectralPeak peak;
};

/// Default frequency grid: up to 1/(2 * median spacing of sorted separations).
std::vector<double> default_frequency_grid(const std::vector<SeparationSample>& samples,
                                           int n_points = 2048);

/// Least-squares sinusoid spectrum of counts vs separation; power = a^2 + b^2 of
/// the fit counts ~ offset + a cos(2 pi f d) + b sin(2 pi f d).
Periodogram periodogram(const std::vector<SeparationSample>& samples,
                        const std::vector<double>& frequencies);

/// Cross-check estimator: bins counts on a regular separation grid (mean per bin)
/// and evaluates the discrete transform power of the mean-subtracted bins.
std::vector<double> binned_dft_power(const std::vector<SeparationSample>& samples,
                                     double bin_width_um,
                                     const std::vector<double>& frequencies);

} // namespace nfatom
