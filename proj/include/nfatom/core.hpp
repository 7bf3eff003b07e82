#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nfatom
{

// Lengths in µm, times in s, signals in raw counts throughout.

class Error : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

#define NFATOM_DEFINE_ERROR(Name)          \
  class Name : public Error                \
  {                                        \
  public:                                  \
    using Error::Error;                    \
  }

NFATOM_DEFINE_ERROR(EvenKernelSize);
NFATOM_DEFINE_ERROR(FrameTooSmall);
NFATOM_DEFINE_ERROR(EmptyReferenceSet);
NFATOM_DEFINE_ERROR(ShapeMismatch);
NFATOM_DEFINE_ERROR(RowOutOfRange);
NFATOM_DEFINE_ERROR(FitDiverged);
NFATOM_DEFINE_ERROR(InsufficientData);
NFATOM_DEFINE_ERROR(EmptyInput);
NFATOM_DEFINE_ERROR(InsufficientGroup);
NFATOM_DEFINE_ERROR(InsufficientSamples);
NFATOM_DEFINE_ERROR(TooManyAtoms);
NFATOM_DEFINE_ERROR(ParseError);
NFATOM_DEFINE_ERROR(IoError);

#undef NFATOM_DEFINE_ERROR

struct ConfigViolation
{
  std::string field;
  std::string reason;
};

class InvalidConfig : public Error
{
public:
  explicit InvalidConfig(std::vector<ConfigViolation> violations);

  const std::vector<ConfigViolation>& violations() const { return mViolations; }

private:
  std::vector<ConfigViolation> mViolations;
};

struct ExperimentConfig
{
  // lattice and optics
  double lattice_spacing = 0.498;
  double excitation_wavelength = 0.852;
  double guided_mode_index = 1.1396352301683073;
  double incidence_angle_deg = 20.0;

  // timing
  double trap_lifetime_s = 1.0;
  double integration_time_s = 0.150;
  double inter_image_wait_s = 0.045;
  int images_per_series = 11;
  int reference_images = 1;

  // region of interest and loading
  double roi_min_um = 115.0;
  double roi_max_um = 403.0;
  double mean_atoms_loaded = 3.0;
  double position_center_um = 259.0;
  double position_sigma_um = 65.0;

  // imaging chain
  double magnification = 3.0;
  double camera_pixel_pitch_um = 17.2;
  double psf_e_radius_um = 10.0;
  int frame_width = 84;
  int frame_height = 21;
  int atom_row = 10;

  // camera signal levels (3x3 pixel sums)
  double atom_rate_counts = 114.2;
  double background_mean_counts = 35.2;
  double background_sigma_counts = 10.5;
  double camera_nonuniformity = 0.20;
  double camera_read_noise_counts = 0.2; // per pixel, Gaussian
  double atom_brightness_spread = 0.21;
  double atom_brightness_shape = 1.0; // gamma shape of the dimming fluctuation

  // detection, thresholds in the units of the reference analysis
  double threshold_scale = 0.335;
  double detection_threshold = 18.0;
  double upper_bound_threshold = 80.0;
  std::vector<int> detection_frames = {0, 2, 4, 6, 8};

  // pair localization
  int localization_band_rows = 5;
  int localization_frames = 3;
  double fit_error_max_um = 1.7;

  // fiber-coupled photon counter, external excitation
  double spcm_bg_mean = 309.63;
  double spcm_bg_sigma = 18.89;
  double spcm_single_atom_mean = 36.17;
  double spcm_single_atom_sigma = 30.9;
  double spcm_nonuniformity = 0.05;
  double spcm_coupling_sigma = -1.0; // relative spread of the coupling factor; negative: match the single-atom sigma
  double common_mode_fraction = 0.71;

  // fiber-coupled photon counter, guided probe transmission
  double transmission_bg_counts = 4500.0;
  double transmission_drift = 0.01;
  double per_atom_extinction = 0.040;

  bool operator==(const ExperimentConfig&) const = default;
};

/// Config preset for 100 ms exposures: 30 images plus two references, 40 ms wait.
ExperimentConfig preset_100ms();
/// Config preset for fiber-guided excitation: 400 ms exposures, 4 images plus one reference.
ExperimentConfig preset_guided_excitation();

/// A checked configuration with the derived quantities every module needs.
struct ValidatedConfig
{
  ExperimentConfig cfg;

  double k0 = 0;                  // rad/µm
  double k_nf = 0;                // rad/µm
  double pixel_pitch_um = 0;      // object plane
  double psf_sigma_px = 0;        // Gaussian sigma of the spot
  double excess_noise_factor = 0; // counts per photoelectron; output is round(F k + read noise)
  double background_pixel_mean = 0; // expected counts before rounding
  double spot_flux = 0;           // total expected counts of a centered atom
  double position_u2_mean = 0;    // E[u^2] of the loading distribution, u in [-1,1] over the ROI
  double spcm_coupling_sigma = 0; // relative sigma of the per-atom coupling factor (Gaussian, clipped at zero)
  double spcm_bg_drift = 0;       // relative drift of the background rate

  double operational_threshold() const { return cfg.detection_threshold * cfg.threshold_scale; }
  double operational_upper_bound() const { return cfg.upper_bound_threshold * cfg.threshold_scale; }
  double frame_period_s() const { return cfg.integration_time_s + cfg.inter_image_wait_s; }
  int total_frames() const { return cfg.images_per_series + cfg.reference_images; }

  /// Relative illumination of an atom at `position_um` (camera path), mean 1 over the loading distribution.
  double camera_illumination(double position_um) const;
  /// Relative coupling of an atom at `position_um` into the fiber.
  double spcm_illumination(double position_um) const;
};

/// Checks every invariant and fills in derived quantities. Throws InvalidConfig listing all violations.
ValidatedConfig validate_config(const ExperimentConfig& cfg);

/// Flat `key = value` text, `#` comments. Unknown keys are an error.
std::string serialize_config(const ExperimentConfig& cfg);
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);

enum class FrameKind { signal, reference };

struct Frame
{
  int width = 0;
  int height = 0;
  std::vector<std::int32_t> counts; // row-major
  double exposure_s = 0;
  double t_start_s = 0;
  FrameKind kind = FrameKind::signal;

  Frame() = default;
  Frame(int w, int h) : width(w), height(h), counts(static_cast<std::size_t>(w) * h, 0) {}

  std::int32_t& at(int col, int row) { return counts[static_cast<std::size_t>(row) * width + col]; }
  std::int32_t at(int col, int row) const { return counts[static_cast<std::size_t>(row) * width + col]; }

  bool operator==(const Frame&) const = default;
};

/// Real-valued image, row-major.
struct Grid
{
  int width = 0;
  int height = 0;
  std::vector<double> values;

  Grid() = default;
  Grid(int w, int h, double fill = 0.0)
      : width(w), height(h), values(static_cast<std::size_t>(w) * h, fill)
  {
  }

  double& at(int col, int row) { return values[static_cast<std::size_t>(row) * width + col]; }
  double at(int col, int row) const { return values[static_cast<std::size_t>(row) * width + col]; }
};

Grid to_grid(const Frame& frame);

/// Pixel-wise sum of equally shaped frames; exposure is summed.
Frame sum_frames(std::span<const Frame> frames);

/// Sum of the 3x3 region centered on (col, row); nullopt when the window leaves the frame.
std::optional<std::int64_t> sum3x3(const Frame& frame, int col, int row);

struct AtomRecord
{
  long site_index = 0;
  double position_um = 0;
  double load_time_s = 0;
  double loss_time_s = 0;

  bool operator==(const AtomRecord&) const = default;
};

struct GroundTruth
{
  std::vector<AtomRecord> atoms;

  /// Fraction of [t0, t1] during which `atom` is trapped.
  static double presence_fraction(const AtomRecord& atom, double t0, double t1);

  bool operator==(const GroundTruth&) const = default;
};

struct ImageSeries
{
  std::vector<Frame> frames;
  ExperimentConfig config_snapshot;
  std::optional<GroundTruth> truth;

  std::vector<const Frame*> reference_frames() const;
};

/// Independent deterministic random stream for one simulated run.
class RandomStream
{
public:
  RandomStream(std::uint64_t seed, std::uint64_t stream_id);

  std::uint64_t seed() const { return mSeed; }
  std::uint64_t stream_id() const { return mStreamId; }

  double uniform();
  double normal(double mean = 0.0, double sigma = 1.0);
  long poisson(double mean);
  double exponential(double mean);
  /// max(0, 1 + sigma * z) with z standard normal.
  double clipped_unit_factor(double sigma);

  std::mt19937_64& engine() { return mEngine; }

private:
  std::uint64_t mSeed;
  std::uint64_t mStreamId;
  std::mt19937_64 mEngine;
};

} // namespace nfatom
