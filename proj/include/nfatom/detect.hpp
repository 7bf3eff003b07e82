#pragma once

#include "nfatom/core.hpp"

#include <array>
#include <optional>
#include <vector>

namespace nfatom
{

enum class KernelNormalization { unit_sum, unit_peak };

/// Discretized 2D Gaussian, zero outside a square support.
struct DetectionKernel
{
  int size = 11;
  double fwhm_px = 1.5;
  double sigma_px = 0;
  std::vector<double> profile; // 1D factor; weights(x, y) = profile[x] * profile[y]
  Grid weights;

  int radius() const { return size / 2; }
};

DetectionKernel make_kernel(double fwhm_px = 1.5, int size = 11,
                            KernelNormalization norm = KernelNormalization::unit_sum);

/// Same-size 2D correlation with zero padding; the kernel is symmetric so this is also the convolution.
Grid convolve(const Grid& image, const DetectionKernel& kernel);
Grid convolve(const Frame& frame, const DetectionKernel& kernel);

/// Pixel-wise mean of reference frames.
Grid background_template(const std::vector<const Frame*>& reference_frames);
Grid background_template(const std::vector<Frame>& reference_frames);

struct DetectorParams
{
  DetectionKernel kernel;
  Grid convolved_background; // template passed through the same filter
  int atom_row = 0;
  double threshold = 0;
  double roi_min_um = 0;
  double roi_max_um = 0;
  double pixel_pitch_um = 1;
  std::optional<double> upper_bound;

  bool in_roi(int col) const;
};

/// Detector at the configured operating point. `threshold` and `upper_bound` are given
/// in reference-analysis units and scaled by the config's threshold_scale.
DetectorParams make_detector(const ValidatedConfig& vcfg, const Grid& background,
                             std::optional<double> threshold = std::nullopt,
                             std::optional<double> upper_bound = std::nullopt);

struct RowPeak
{
  int col = 0;
  double value = 0;
};

/// Background-corrected filtered values along the atom row.
std::vector<double> corrected_row(const Frame& frame, const DetectorParams& params);

/// Local maxima of a row: greater than the left neighbor and not smaller than the right,
/// plateaus resolved to their leftmost pixel.
std::vector<RowPeak> row_maxima(const std::vector<double>& row);

/// Values of all in-ROI local maxima of the corrected row (candidate peaks for any threshold).
std::vector<double> candidate_peaks(const Frame& frame, const DetectorParams& params);

struct DetectionEvent
{
  int frame_index = 0;
  int pixel_col = 0;
  double convolved_peak_value = 0;
  std::int64_t raw_3x3_sum = 0;
  double position_um = 0;
  bool in_roi = false;
  bool above_upper_bound = false;
};

/// Events for every row maximum above threshold whose 3x3 window lies inside the frame.
std::vector<DetectionEvent> detect_in_frame(const Frame& frame, const DetectorParams& params,
                                            int frame_index = 0);

enum class FrameStatus { detected, absent, not_evaluated };

struct TrackedAtom
{
  int series_id = 0;
  int pixel_col = 0;
  int detection_frame = 0;
  std::vector<FrameStatus> status;     // per frame of the series
  std::vector<std::int64_t> raw_3x3;   // raw sum at pixel_col in every frame, -1 when unavailable
};

/// One entry of the next-image population: a detection frame with exactly one in-ROI event.
struct ConditionedEntry
{
  int series_id = 0;
  int detection_frame = 0;
  int pixel_col = 0;
  double next_raw_3x3 = 0;
  double next_peak_value = 0; // corrected filtered value at the saved pixel in the next frame
  bool confirmed = false;     // the frame after the next one shows a detection at the same spot
};

struct SeriesTracking
{
  std::vector<TrackedAtom> atoms;
  std::vector<ConditionedEntry> entries;

  std::vector<double> next_sums() const;       // all entries
  std::vector<double> confirmed_sums() const;  // doubly-conditioned entries
  std::vector<double> confirmed_peaks() const; // filtered values of the doubly-conditioned entries
};

SeriesTracking track_series(const ImageSeries& series, const DetectorParams& params,
                            const std::vector<int>& detection_frames, int series_id = 0);

struct PairLocalization
{
  std::array<double, 2> positions_um{};
  std::array<double, 2> fit_errors_um{};
  double separation_um = 0;
  double separation_err_um = 0;
  bool accepted = false;
  bool diverged = false;
};

/// Fits two pixel-integrated Gaussians of the PSF width plus an offset to the vertically
/// integrated band around the atom row. Divergence yields accepted = false.
PairLocalization localize_pair(const Frame& frame, std::array<int, 2> seed_cols, const ValidatedConfig& vcfg);

} // namespace nfatom
