#pragma once

#include "nfatom/core.hpp"

#include <array>
#include <optional>
#include <span>
#include <vector>

namespace nfatom
{

struct Histogram
{
  std::vector<double> edges;
  std::vector<double> counts; // expected-count histograms carry non-integer values
  double n_total = 0;

  std::size_t n_bins() const { return counts.size(); }
  double center(std::size_t i) const { return 0.5 * (edges[i] + edges[i + 1]); }
  double width(std::size_t i) const { return edges[i + 1] - edges[i]; }
  /// Counts divided by their sum.
  std::vector<double> normalized() const;
};

/// Left-closed bins of `bin_width` starting at `origin` (default: floor of the minimum
/// to a multiple of the width); every value lands in a bin.
Histogram build_histogram(std::span<const double> values, double bin_width,
                          std::optional<double> origin = std::nullopt);
/// Left-closed bins on explicit edges; the last bin includes its right edge, values
/// outside the edges are not counted.
Histogram build_histogram_edges(std::span<const double> values, std::vector<double> edges);

std::vector<double> regular_edges(double lo, double hi, double bin_width);

double total_variation_distance(const Histogram& a, const Histogram& b);

struct GaussianComponent
{
  double amplitude = 0; // expected counts at the peak of the density, per bin
  double mean = 0;
  double sigma = 0;
  double amplitude_err = 0;
  double mean_err = 0;
  double sigma_err = 0;
};

struct GaussianFit
{
  std::vector<GaussianComponent> components;
  double offset = 0;
  double offset_err = 0;
  double reduced_chi2 = 0;
  bool has_offset = false;

  double evaluate(double x) const;
};

struct GaussianInit
{
  std::vector<GaussianComponent> components; // amplitude/mean/sigma used as start values
};

/// Weighted least squares of a sum of 1 or 2 Gaussian curves (plus optional constant)
/// against bin counts at bin centers; weights 1/max(count, 1).
GaussianFit fit_gaussian_mixture(const Histogram& hist, int n_components,
                                 std::optional<GaussianInit> init = std::nullopt,
                                 bool fit_offset = false);

/// Loss and false-detection model for the next-image 3x3 sum after a detection.
struct DetectionModel
{
  double p_false = 0;
  double tau_s = 1.0;
  double exposure_s = 0.150;
  double wait_s = 0.0;         // dark time between the detection image and the next
  double f_thr = 0.445;        // presence fraction needed to cross the threshold
  bool condition_on_detection = false; // atom already survived f_thr of the detection image
  double bg_mean = 0, bg_sigma = 1;
  double atom_mean = 0, atom_sigma = 1;
  // measured full-exposure sums; when present they replace the Gaussian atom component and
  // atom_mean/atom_sigma are taken from them
  std::vector<double> atom_samples;
};

/// Mixture weights {pure background, full atom, partial exposure} of the model.
std::array<double, 3> conditioned_weights(const DetectionModel& model);

/// Expected histogram (scaled to `n_total`) by quadrature over the loss time.
Histogram predict_conditioned_histogram(const DetectionModel& model, std::vector<double> edges,
                                        double n_total, int quadrature_nodes = 400);

/// The same model evaluated by Monte Carlo with `n_draws` samples, scaled to `n_total`.
Histogram predict_conditioned_histogram_mc(const DetectionModel& model, std::vector<double> edges,
                                           double n_total, std::size_t n_draws, RandomStream& rng);

struct LossSplit
{
  double p_undetected_loss = 0;
  double p_detected_then_lost = 0;
};

LossSplit loss_split_probabilities(const DetectionModel& model);

struct ThresholdSweep
{
  std::vector<double> thresholds;
  std::vector<double> survival; // fraction of values strictly above each threshold
  double two_atom_weight = 0;
  double single_mean = 0;
  double single_sigma = 0;
  double two_atom_weight_err = 0;
  double single_mean_err = 0;
  double single_sigma_err = 0;

  /// Single-atom detection probability at `threshold`, from the fitted component.
  double detection_probability(double threshold) const;
  /// Fitted two-component survival curve.
  double model_survival(double threshold) const;
};

/// Survival curve of peak values plus the fit of single- and two-atom cumulative
/// Gaussians, the latter at twice the mean and sqrt(2) times the width.
ThresholdSweep threshold_sweep(std::span<const double> peak_values,
                               std::vector<double> thresholds = {});

struct FalseDetectionCurve
{
  std::vector<double> thresholds;
  std::vector<double> mean_per_image;
  std::vector<double> p_at_least_one;
};

/// False-detection statistics from per-frame lists of candidate peak values (in-ROI
/// local maxima of the background-corrected filtered row).
FalseDetectionCurve false_detection_curve(const std::vector<std::vector<double>>& frame_peaks,
                                          std::vector<double> thresholds);

struct TransmissionGroup
{
  int n_atoms = 0;
  std::vector<double> counts;
};

struct BeerLambertResult
{
  std::array<double, 4> mean{};
  std::array<double, 4> mean_err{};
  std::array<double, 3> extinction{};
  std::array<double, 3> extinction_err{};
  double fitted_extinction = 0;
  double fitted_extinction_err = 0;
  double chi2 = 0;
  int dof = 0;
  double p_value = 1;

  bool constant_model_accepted(double alpha = 0.01) const { return p_value > alpha; }
};

BeerLambertResult beer_lambert_analysis(const std::vector<TransmissionGroup>& groups);

struct ModeMixtureFit
{
  double common_fraction = 0;
  double common_fraction_err = 0;
  double chi2 = 0;
};

/// Best weight w of w * common + (1 - w) * differential against observed bin counts;
/// templates are normalized to the observed total before fitting.
ModeMixtureFit fit_mode_mixture(const Histogram& observed, const Histogram& common_template,
                                const Histogram& differential_template);

double mean(std::span<const double> values);
double sample_stddev(std::span<const double> values);

} // namespace nfatom
