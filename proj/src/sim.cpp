#include "nfatom/sim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>

namespace nfatom
{

double LossProcess::survival_probability(double duration_s) const
{
  if (!std::isfinite(lifetime_s))
    return 1.0;
  return std::exp(-duration_s / lifetime_s);
}

double LossProcess::sample_loss_time(RandomStream& rng) const
{
  return rng.exponential(lifetime_s);
}

namespace
{

long sample_site(const ValidatedConfig& vcfg, RandomStream& rng)
{
  const auto& cfg = vcfg.cfg;
  for (;;)
  {
    const double x = rng.normal(cfg.position_center_um, cfg.position_sigma_um);
    const long site = std::lround(x / cfg.lattice_spacing);
    const double snapped = static_cast<double>(site) * cfg.lattice_spacing;
    if (snapped >= cfg.roi_min_um && snapped <= cfg.roi_max_um)
      return site;
  }
}

long sites_in_roi(const ExperimentConfig& cfg)
{
  return static_cast<long>(std::floor(cfg.roi_max_um / cfg.lattice_spacing)) -
         static_cast<long>(std::ceil(cfg.roi_min_um / cfg.lattice_spacing)) + 1;
}

// Expected fraction of a unit-flux Gaussian spot falling into pixels [first, first + n).
std::vector<double> pixel_fractions(double center_px, double sigma_px, int first, int n)
{
  std::vector<double> out(static_cast<std::size_t>(n));
  const double scale = 1.0 / (sigma_px * std::numbers::sqrt2);
  for (int i = 0; i < n; ++i)
  {
    const double lo = (first + i - 0.5 - center_px) * scale;
    const double hi = (first + i + 0.5 - center_px) * scale;
    out[static_cast<std::size_t>(i)] = 0.5 * (std::erf(hi) - std::erf(lo));
  }
  return out;
}

void add_spot(Grid& image, const ValidatedConfig& vcfg, double position_um, double flux)
{
  const double cx = position_um / vcfg.pixel_pitch_um;
  const double cy = vcfg.cfg.atom_row;
  const int reach = static_cast<int>(std::ceil(6 * vcfg.psf_sigma_px)) + 1;
  const int c0 = std::max(0, static_cast<int>(std::floor(cx)) - reach);
  const int c1 = std::min(image.width - 1, static_cast<int>(std::ceil(cx)) + reach);
  const int r0 = std::max(0, static_cast<int>(std::floor(cy)) - reach);
  const int r1 = std::min(image.height - 1, static_cast<int>(std::ceil(cy)) + reach);
  if (c1 < c0 || r1 < r0)
    return;
  const auto fx = pixel_fractions(cx, vcfg.psf_sigma_px, c0, c1 - c0 + 1);
  const auto fy = pixel_fractions(cy, vcfg.psf_sigma_px, r0, r1 - r0 + 1);
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c)
      image.at(c, r) += flux * fx[static_cast<std::size_t>(c - c0)] * fy[static_cast<std::size_t>(r - r0)];
}

} // namespace

GroundTruth sample_ground_truth_n(const ValidatedConfig& vcfg, int n_atoms, RandomStream& rng, bool with_loss)
{
  const auto& cfg = vcfg.cfg;
  n_atoms = static_cast<int>(std::min<long>(n_atoms, sites_in_roi(cfg)));
  const LossProcess loss{cfg.trap_lifetime_s};

  GroundTruth truth;
  std::set<long> occupied;
  while (static_cast<int>(truth.atoms.size()) < n_atoms)
  {
    const long site = sample_site(vcfg, rng);
    if (!occupied.insert(site).second)
      continue; // at most one atom per site
    AtomRecord atom;
    atom.site_index = site;
    atom.position_um = static_cast<double>(site) * cfg.lattice_spacing;
    atom.load_time_s = 0.0;
    atom.loss_time_s = with_loss ? loss.sample_loss_time(rng) : std::numeric_limits<double>::infinity();
    truth.atoms.push_back(atom);
  }
  return truth;
}

GroundTruth sample_ground_truth(const ValidatedConfig& vcfg, RandomStream& rng)
{
  const auto n = static_cast<int>(rng.poisson(vcfg.cfg.mean_atoms_loaded));
  return sample_ground_truth_n(vcfg, n, rng, true);
}

Grid expected_image(const ValidatedConfig& vcfg, const std::vector<double>& positions_um,
                    const std::vector<double>& brightness, bool include_background)
{
  const auto& cfg = vcfg.cfg;
  Grid image(cfg.frame_width, cfg.frame_height, include_background ? vcfg.background_pixel_mean : 0.0);
  for (std::size_t i = 0; i < positions_um.size(); ++i)
  {
    const double b = i < brightness.size() ? brightness[i] : 1.0;
    if (b > 0)
      add_spot(image, vcfg, positions_um[i], vcfg.spot_flux * b);
  }
  return image;
}

Frame render_frame(const GroundTruth& truth, const ValidatedConfig& vcfg, double t0, double t1,
                   RandomStream& rng, FrameKind kind)
{
  const auto& cfg = vcfg.cfg;
  // per-frame brightness 1 + spread * (sqrt(k) - G), G ~ Gamma(k, 1/sqrt(k)): unit mean,
  // standard deviation = spread, skewed toward dimming with skewness -2/sqrt(k)
  const double shape = cfg.atom_brightness_shape;
  const double dim_shape_mean = std::sqrt(shape);
  std::gamma_distribution<double> dim(shape, 1.0 / std::sqrt(shape));
  std::vector<double> positions, brightness;
  for (const auto& atom : truth.atoms)
  {
    const double f = GroundTruth::presence_fraction(atom, t0, t1);
    if (f <= 0)
      continue;
    positions.push_back(atom.position_um);
    // dimming events only: unit mean, standard deviation = spread, long tail toward dark
    const double fluctuation = std::max(0.0, 1.0 + cfg.atom_brightness_spread * (dim_shape_mean - dim(rng.engine())));
    brightness.push_back(f * vcfg.camera_illumination(atom.position_um) * fluctuation);
  }
  const Grid expected = expected_image(vcfg, positions, brightness);

  Frame frame(cfg.frame_width, cfg.frame_height);
  frame.exposure_s = t1 - t0;
  frame.t_start_s = t0;
  frame.kind = kind;
  const double F = vcfg.excess_noise_factor;
  const double read_noise = cfg.camera_read_noise_counts;
  for (std::size_t i = 0; i < frame.counts.size(); ++i)
  {
    const auto electrons = rng.poisson(expected.values[i] / F);
    double value = F * static_cast<double>(electrons);
    if (read_noise > 0)
      value += rng.normal(0.0, read_noise);
    frame.counts[i] = static_cast<std::int32_t>(std::lround(value));
  }
  return frame;
}

ImageSeries render_series(const ValidatedConfig& vcfg, const GroundTruth& truth, RandomStream& rng)
{
  const auto& cfg = vcfg.cfg;
  ImageSeries series;
  series.config_snapshot = cfg;
  series.truth = truth;
  const double period = vcfg.frame_period_s();
  const GroundTruth empty;
  for (int k = 0; k < vcfg.total_frames(); ++k)
  {
    const double t0 = k * period;
    const bool reference = k >= cfg.images_per_series;
    series.frames.push_back(render_frame(reference ? empty : truth, vcfg, t0, t0 + cfg.integration_time_s,
                                         rng, reference ? FrameKind::reference : FrameKind::signal));
  }
  return series;
}

ImageSeries render_series(const ValidatedConfig& vcfg, RandomStream& rng)
{
  const GroundTruth truth = sample_ground_truth(vcfg, rng);
  return render_series(vcfg, truth, rng);
}

namespace
{

long site_separation(const std::vector<double>& positions_um, double lattice_spacing)
{
  return std::lround(std::abs(positions_um[1] - positions_um[0]) / lattice_spacing);
}

} // namespace

double expected_scatter_counts(const std::vector<double>& positions_um, const ValidatedConfig& vcfg,
                               CouplingFactors factors, double background, bool coherent)
{
  if (positions_um.size() > 2)
    throw TooManyAtoms("photon-counter scattering is modeled for at most two atoms");
  const auto& cfg = vcfg.cfg;
  double counts = background >= 0 ? background : cfg.spcm_bg_mean;
  const double g[2] = {factors.first, factors.second};
  double intensity[2] = {0, 0};
  for (std::size_t i = 0; i < positions_um.size(); ++i)
  {
    intensity[i] = cfg.spcm_single_atom_mean * vcfg.spcm_illumination(positions_um[i]) * g[i];
    counts += intensity[i];
  }
  if (positions_um.size() == 2 && coherent)
  {
    const auto geom = InterferenceGeometry::from_config(vcfg);
    const double phase = relative_phase(site_separation(positions_um, cfg.lattice_spacing), geom);
    counts += 2.0 * std::sqrt(intensity[0] * intensity[1]) * std::cos(phase);
  }
  return std::max(counts, 0.0);
}

SpcmRecord simulate_spcm_scatter(const std::vector<double>& positions_um, const ValidatedConfig& vcfg,
                                 RandomStream& rng, std::uint64_t run_id, FluctuationMode mode)
{
  if (positions_um.size() > 2)
    throw TooManyAtoms("photon-counter scattering is modeled for at most two atoms");
  const auto& cfg = vcfg.cfg;

  const double background = cfg.spcm_bg_mean * std::max(0.0, 1.0 + vcfg.spcm_bg_drift * rng.normal());
  CouplingFactors factors;
  factors.first = rng.clipped_unit_factor(vcfg.spcm_coupling_sigma);
  bool shared = false;
  if (mode == FluctuationMode::mixed)
    shared = rng.uniform() < cfg.common_mode_fraction;
  else
    shared = mode == FluctuationMode::common;
  factors.second = shared ? factors.first : rng.clipped_unit_factor(vcfg.spcm_coupling_sigma);

  const bool coherent = mode != FluctuationMode::incoherent;
  const double expected = expected_scatter_counts(positions_um, vcfg, factors, background, coherent);

  SpcmRecord rec;
  rec.run_id = run_id;
  rec.detected_counts = rng.poisson(expected);
  rec.n_atoms_true = static_cast<int>(positions_um.size());
  rec.atom_positions_um = positions_um;
  rec.mode = SpcmMode::scatter_into_fiber;
  return rec;
}

SpcmRecord simulate_spcm_transmission(int n_atoms, const ValidatedConfig& vcfg, RandomStream& rng,
                                      std::uint64_t run_id)
{
  if (n_atoms < 0)
    throw std::invalid_argument("simulate_spcm_transmission: negative atom number");
  const auto& cfg = vcfg.cfg;
  const double drift = std::max(0.0, 1.0 + cfg.transmission_drift * rng.normal());
  const double expected =
      cfg.transmission_bg_counts * std::pow(1.0 - cfg.per_atom_extinction, n_atoms) * drift;
  SpcmRecord rec;
  rec.run_id = run_id;
  rec.detected_counts = rng.poisson(expected);
  rec.n_atoms_true = n_atoms;
  rec.mode = SpcmMode::transmission;
  return rec;
}

std::vector<double> sample_two_atom_scatter(const ValidatedConfig& vcfg, FluctuationMode mode,
                                            std::size_t n_runs, RandomStream& rng)
{
  std::vector<double> counts;
  counts.reserve(n_runs);
  for (std::size_t i = 0; i < n_runs; ++i)
  {
    const auto truth = sample_ground_truth_n(vcfg, 2, rng, false);
    const std::vector<double> positions = {truth.atoms[0].position_um, truth.atoms[1].position_um};
    counts.push_back(static_cast<double>(simulate_spcm_scatter(positions, vcfg, rng, i, mode).detected_counts));
  }
  return counts;
}

} // namespace nfatom
