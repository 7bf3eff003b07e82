#pragma once

#include "nfatom/core.hpp"
#include "nfatom/detect.hpp"
#include "nfatom/sim.hpp"
#include "nfatom/spectral.hpp"
#include "nfatom/stats.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace nfatom
{

// Run i of every batch draws from RandomStream(seed, i), so results do not depend on the
// number of worker threads. Distinct studies use distinct seed offsets.

/// Full image series (with embedded truth) for runs [0, n_runs).
std::vector<ImageSeries> simulate_series_batch(const ValidatedConfig& vcfg, std::uint64_t seed, std::size_t n_runs,
                                               unsigned threads);

/// Reference frames without atoms, one per run.
std::vector<Frame> simulate_reference_frames(const ValidatedConfig& vcfg, std::uint64_t seed, std::size_t n_frames,
                                             unsigned threads);

/// Detector whose background template averages every reference frame of the batch.
DetectorParams detector_for_batch(const ValidatedConfig& vcfg, const std::vector<ImageSeries>& batch);

/// Column of the pixel closest to an object-plane position.
int column_of(const ValidatedConfig& vcfg, double position_um);

struct ConditionedStudy
{
  std::vector<double> next_sums;      // raw 3x3 sums in the image after a detection
  std::vector<double> confirmed_sums; // ... when the image after that confirms the atom
  std::vector<double> confirmed_peaks;
  std::vector<double> reference_sums; // disjoint 3x3 blocks along the atom row of reference frames
  GaussianFit next_fit;
  GaussianFit confirmed_fit;
  GaussianFit reference_fit;
  double p_false = 0; // reference frames with at least one in-ROI event
  DetectionModel model;

  // loss bookkeeping against the truth, per atom trapped at the start of a detection image
  std::size_t n_trapped = 0;
  double lost_fraction = 0;
  double undetected_loss_fraction = 0;
  double detected_then_lost_fraction = 0;
};

/// Next-image populations of a batch, their fits, the calibrated loss model and the loss split.
ConditionedStudy conditioned_study(const ValidatedConfig& vcfg, const std::vector<ImageSeries>& batch,
                                   const DetectorParams& det);

struct ModelComparison
{
  Histogram empirical;
  Histogram quadrature;
  Histogram monte_carlo;
  double tv_distance = 0;
  double max_mc_deviation = 0; // largest |mc - quadrature| per bin in Monte-Carlo standard errors
};

ModelComparison compare_conditioned_model(const ConditionedStudy& study, double bin_width, std::size_t mc_draws,
                                          RandomStream& rng);

struct SingleAtomStudy
{
  std::vector<double> peak_values; // best corrected value within one pixel of each atom
  ThresholdSweep sweep;
  double empirical_detection = 0;
  double fitted_detection = 0;
  double above_upper_bound = 0;
};

/// Frames holding one atom trapped for the full exposure.
SingleAtomStudy single_atom_study(const ValidatedConfig& vcfg, const DetectorParams& det, std::uint64_t seed,
                                  std::size_t n_frames, unsigned threads);

struct FalseDetectionStudy
{
  std::vector<std::vector<double>> frame_peaks;
  FalseDetectionCurve curve; // thresholds in reference-analysis units
  double p_at_operating = 0;
  double mean_at_operating = 0;
  double max_peak = 0;       // largest candidate over all frames, reference-analysis units
  double zero_threshold = 0; // smallest grid threshold with no false events
};

FalseDetectionStudy false_detection_study(const ValidatedConfig& vcfg, const std::vector<Frame>& references,
                                          const DetectorParams& det);

struct UpperBoundStudy
{
  std::size_t n_events = 0;
  std::size_t n_single = 0;
  std::size_t n_merged = 0;
  std::size_t n_false = 0;
  double discarded_fraction = 0;
  double merged_removed_fraction = 0;
  double single_removed_fraction = 0;
  double merged_fraction = 0;
};

/// Assigns every atom present in a signal frame to its nearest in-ROI event within
/// `match_radius_px` columns; events with two or more atoms are merged, one atom a single,
/// none a false detection.
UpperBoundStudy upper_bound_study(const ValidatedConfig& vcfg, const std::vector<ImageSeries>& batch,
                                  const DetectorParams& det, int match_radius_px = 2);

struct MergedPairStudy
{
  std::size_t n_frames = 0;
  std::size_t n_merged = 0; // frames where the pair produced a single event
  std::size_t n_removed = 0;
  double removed_fraction = 0;
};

/// Frames holding two atoms less than one pixel pitch apart, trapped for the full exposure;
/// the pair counts as merged when the detector reports one event for it.
MergedPairStudy merged_pair_study(const ValidatedConfig& vcfg, const DetectorParams& det, std::uint64_t seed,
                                  std::size_t n_frames, unsigned threads);

struct PairImage
{
  GroundTruth truth;
  std::vector<Frame> frames; // consecutive images used for localization
  Frame summed;
};

/// Two atoms from the loading distribution, trapped throughout `n_frames` images.
PairImage simulate_pair_image(const ValidatedConfig& vcfg, RandomStream& rng, int n_frames);

enum class PairOutcome { not_two, upper_bound, fit_rejected, accepted };

struct PairRunAnalysis
{
  PairOutcome outcome = PairOutcome::not_two;
  std::vector<DetectionEvent> events; // in-ROI events of the first image
  PairLocalization fit;
};

/// Detection in the first image (any event above the upper bound rejects the run, exactly
/// two in-ROI events are required), then localization on the sum of all `frames`.
PairRunAnalysis analyze_pair_run(const ValidatedConfig& vcfg, const DetectorParams& det,
                                 std::span<const Frame> frames);

struct LocalizationStudy
{
  std::vector<double> true_separations;
  std::vector<double> separation_errors; // accepted fits only
  std::vector<double> position_errors;   // both atoms of every accepted fit
  std::size_t n_trials = 0;
  std::size_t n_accepted = 0;
  double position_rmse = 0;
  double separation_rmse = 0;
};

/// Position and separation errors of localize_pair seeded at the true columns.
LocalizationStudy localization_study(const ValidatedConfig& vcfg, std::uint64_t seed, std::size_t n_trials,
                                     unsigned threads);

struct InterferenceStudy
{
  std::vector<SeparationSample> samples;      // measured separation, photon-counter counts
  std::vector<double> true_separations;
  std::size_t n_runs = 0;
  std::size_t n_two_events = 0;
  std::size_t n_upper_rejected = 0;
  std::size_t n_fit_rejected = 0;
  Periodogram spectrum;
};

/// Two-atom runs through detection (threshold and upper bound), localization on the summed
/// images, the error cut, and the photon-counter record of each accepted run.
InterferenceStudy interference_study(const ValidatedConfig& vcfg, std::uint64_t seed, std::size_t n_runs,
                                     const DetectorParams& det, const std::vector<double>& frequencies,
                                     unsigned threads);

struct SpcmStudy
{
  std::vector<double> zero_atom;
  std::vector<double> one_atom;
  std::vector<double> two_atom;
  GaussianFit zero_fit;
  GaussianFit one_fit;
  Histogram two_hist;
  Histogram common_template;
  Histogram differential_template;
  Histogram incoherent_template;
  ModeMixtureFit mixture;
};

SpcmStudy spcm_study(const ValidatedConfig& vcfg, std::uint64_t seed, std::size_t n_runs, std::size_t n_template,
                     double bin_width);

struct TransmissionStudy
{
  std::vector<TransmissionGroup> groups;
  BeerLambertResult result;
};

TransmissionStudy transmission_study(const ValidatedConfig& vcfg, std::uint64_t seed, std::size_t runs_per_group);

struct PhaseStudy
{
  Histogram histogram;
  double chi2 = 0;
  double p_value = 0;
};

PhaseStudy phase_study(const ValidatedConfig& vcfg, std::uint64_t seed, std::size_t n_pairs, int n_bins = 20);

/// Regular grid [lo, hi] with `n` points.
std::vector<double> linear_grid(double lo, double hi, std::size_t n);

} // namespace nfatom
