#pragma once

#include "nfatom/core.hpp"
#include "nfatom/spectral.hpp"

#include <cstdint>
#include <vector>

namespace nfatom
{

enum class SpcmMode { scatter_into_fiber, transmission };

struct SpcmRecord
{
  std::uint64_t run_id = 0;
  long detected_counts = 0;
  int n_atoms_true = 0;
  std::vector<double> atom_positions_um;
  SpcmMode mode = SpcmMode::scatter_into_fiber;

  bool operator==(const SpcmRecord&) const = default;
};

/// Exponential trap loss with lifetime tau.
struct LossProcess
{
  double lifetime_s = 1.0;

  double survival_probability(double duration_s) const;
  double sample_loss_time(RandomStream& rng) const;
};

/// Poisson number of atoms on distinct lattice sites, bell-shaped over the ROI, exponential loss times.
GroundTruth sample_ground_truth(const ValidatedConfig& vcfg, RandomStream& rng);

/// Exactly `n_atoms` atoms from the loading distribution; no loss when `with_loss` is false.
GroundTruth sample_ground_truth_n(const ValidatedConfig& vcfg, int n_atoms, RandomStream& rng,
                                  bool with_loss = true);

/// Noise-free expected counts per pixel for atoms with the given brightness factors
/// (presence fraction times illumination times fluctuation), plus background.
Grid expected_image(const ValidatedConfig& vcfg, const std::vector<double>& positions_um,
                    const std::vector<double>& brightness, bool include_background = true);

/// One exposure over [t0, t1]: Gaussian atom spots scaled by presence and illumination,
/// background, and Poisson counts with excess noise.
Frame render_frame(const GroundTruth& truth, const ValidatedConfig& vcfg, double t0, double t1,
                   RandomStream& rng, FrameKind kind = FrameKind::signal);

/// Signal frames on the shared timeline, then the reference frames with no atoms.
ImageSeries render_series(const ValidatedConfig& vcfg, RandomStream& rng);

/// Render the series for a given ground truth.
ImageSeries render_series(const ValidatedConfig& vcfg, const GroundTruth& truth, RandomStream& rng);

/// Per-run amplitude factors of the two atoms (unit mean).
struct CouplingFactors
{
  double first = 1.0;
  double second = 1.0;
};

enum class FluctuationMode { mixed, common, differential, incoherent };

/// Noise-free photon-counter expectation for scattering into the fiber.
double expected_scatter_counts(const std::vector<double>& positions_um, const ValidatedConfig& vcfg,
                               CouplingFactors factors = {}, double background = -1,
                               bool coherent = true);

SpcmRecord simulate_spcm_scatter(const std::vector<double>& positions_um, const ValidatedConfig& vcfg,
                                 RandomStream& rng, std::uint64_t run_id = 0,
                                 FluctuationMode mode = FluctuationMode::mixed);

SpcmRecord simulate_spcm_transmission(int n_atoms, const ValidatedConfig& vcfg, RandomStream& rng,
                                      std::uint64_t run_id = 0);

/// Two-atom scatter counts with positions from the loading distribution, for histogram templates.
std::vector<double> sample_two_atom_scatter(const ValidatedConfig& vcfg, FluctuationMode mode,
                                            std::size_t n_runs, RandomStream& rng);

} // namespace nfatom
