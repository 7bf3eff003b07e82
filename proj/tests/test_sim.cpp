#include "doctest.h"

#include "nfatom/experiments.hpp"
#include "nfatom/sim.hpp"
#include "nfatom/stats.hpp"

#include <cmath>
#include <numbers>
#include <set>

using namespace nfatom;

namespace
{

double sd_of(const std::vector<double>& v) { return sample_stddev(v); }

} // namespace

TEST_CASE("no atoms when the mean loading is zero")
{
  auto cfg = ExperimentConfig{};
  cfg.mean_atoms_loaded = 0;
  const auto v = validate_config(cfg);
  RandomStream rng(1, 0);
  for (int i = 0; i < 200; ++i)
    CHECK(sample_ground_truth(v, rng).atoms.empty());
}

TEST_CASE("loading statistics, site blockade and region of interest")
{
  const auto v = validate_config(ExperimentConfig{});
  RandomStream rng(2, 0);
  const int n = 100000;
  double total = 0;
  for (int i = 0; i < n; ++i)
  {
    const auto truth = sample_ground_truth(v, rng);
    total += static_cast<double>(truth.atoms.size());
    std::set<long> sites;
    for (const auto& a : truth.atoms)
    {
      sites.insert(a.site_index);
      CHECK(a.position_um == doctest::Approx(a.site_index * v.cfg.lattice_spacing));
      CHECK(a.position_um >= v.cfg.roi_min_um);
      CHECK(a.position_um <= v.cfg.roi_max_um);
      CHECK(a.loss_time_s > a.load_time_s);
    }
    CHECK(sites.size() == truth.atoms.size());
  }
  // Poisson standard error of the mean
  const double se = std::sqrt(3.0 / n);
  CHECK(std::abs(total / n - 3.0) < 3 * se);
}

TEST_CASE("exact atom number draws stay on distinct sites")
{
  auto cfg = ExperimentConfig{};
  cfg.roi_min_um = 200;
  cfg.roi_max_um = 201; // three sites
  const auto v = validate_config(cfg);
  RandomStream rng(3, 0);
  for (int i = 0; i < 100; ++i)
  {
    const auto truth = sample_ground_truth_n(v, 2, rng, false);
    REQUIRE(truth.atoms.size() == 2);
    CHECK(truth.atoms[0].site_index != truth.atoms[1].site_index);
    CHECK(truth.atoms[0].loss_time_s > 1e6);
  }
}

TEST_CASE("exponential loss")
{
  LossProcess loss{1.0};
  CHECK(loss.survival_probability(0.15) == doctest::Approx(std::exp(-0.15)));
  RandomStream rng(4, 0);
  double s = 0;
  const int n = 50000;
  for (int i = 0; i < n; ++i)
    s += loss.sample_loss_time(rng);
  CHECK(s / n == doctest::Approx(1.0).epsilon(0.03));
}

TEST_CASE("reference 3x3 sums match the calibrated background")
{
  const auto v = validate_config(ExperimentConfig{});
  const auto refs = simulate_reference_frames(v, 5, 3000, 1);
  std::vector<double> sums;
  for (const auto& f : refs)
    for (int c = 1; c + 1 < f.width; c += 3)
      sums.push_back(static_cast<double>(sum3x3(f, c, v.cfg.atom_row).value()));
  CHECK(mean(sums) == doctest::Approx(35.2).epsilon(0.01));
  CHECK(sd_of(sums) == doctest::Approx(10.5).epsilon(0.02));
  const auto fit = fit_gaussian_mixture(build_histogram(sums, 2.0), 1);
  CHECK(fit.components[0].mean == doctest::Approx(35.2).epsilon(0.02));
}

TEST_CASE("full-exposure atom under flat illumination gives 149.4 counts")
{
  auto cfg = ExperimentConfig{};
  cfg.camera_nonuniformity = 0;
  cfg.atom_brightness_spread = 0;
  const auto v = validate_config(cfg);
  RandomStream rng(6, 0);
  std::vector<double> sums;
  for (int i = 0; i < 3000; ++i)
  {
    // uniform sub-pixel offset, 3x3 window on the nearest pixel
    const int col = 30 + static_cast<int>(i % 30);
    const double x = (col + rng.uniform() - 0.5) * v.pixel_pitch_um;
    GroundTruth t;
    t.atoms.push_back({std::lround(x / cfg.lattice_spacing), x, 0.0, 1e9});
    const auto f = render_frame(t, v, 0.0, 0.15, rng);
    sums.push_back(static_cast<double>(sum3x3(f, col, cfg.atom_row).value()));
  }
  CHECK(mean(sums) == doctest::Approx(149.4).epsilon(0.005));
}

TEST_CASE("an atom lost at the start of the exposure leaves a reference frame")
{
  const auto v = validate_config(ExperimentConfig{});
  GroundTruth lost;
  lost.atoms.push_back({500, 249.0, 0.0, 0.39});
  RandomStream a(7, 3), b(7, 3);
  const auto with_atom = render_frame(lost, v, 0.39, 0.54, a);
  const auto empty = render_frame(GroundTruth{}, v, 0.39, 0.54, b);
  CHECK(with_atom.counts == empty.counts);
}

TEST_CASE("series layout")
{
  const auto v = validate_config(ExperimentConfig{});
  RandomStream rng(8, 0);
  const auto s = render_series(v, rng);
  REQUIRE(s.frames.size() == 12);
  CHECK(s.frames.back().kind == FrameKind::reference);
  CHECK(s.frames[10].kind == FrameKind::signal);
  CHECK(s.reference_frames().size() == 1);
  CHECK(s.frames[1].t_start_s == doctest::Approx(0.195));
  CHECK(s.truth.has_value());

  const auto v100 = validate_config(preset_100ms());
  const auto s100 = render_series(v100, rng);
  CHECK(s100.frames.size() == 32);
  CHECK(s100.reference_frames().size() == 2);
}

TEST_CASE("without loss every atom is present in every signal frame")
{
  auto cfg = ExperimentConfig{};
  cfg.trap_lifetime_s = 1e12;
  const auto v = validate_config(cfg);
  RandomStream rng(9, 0);
  for (int i = 0; i < 50; ++i)
  {
    const auto s = render_series(v, rng);
    for (const auto& a : s.truth->atoms)
      for (const auto& f : s.frames)
        if (f.kind == FrameKind::signal)
          CHECK(GroundTruth::presence_fraction(a, f.t_start_s, f.t_start_s + f.exposure_s) == 1.0);
  }
}

TEST_CASE("photon-counter background and single-atom levels")
{
  const auto v = validate_config(ExperimentConfig{});
  RandomStream rng(10, 0);
  std::vector<double> zero, one;
  const auto dist = loading_site_distribution(v);
  for (int i = 0; i < 10000; ++i)
  {
    zero.push_back(static_cast<double>(simulate_spcm_scatter({}, v, rng).detected_counts));
    const double x = static_cast<double>(dist.sample(rng)) * v.cfg.lattice_spacing;
    one.push_back(static_cast<double>(simulate_spcm_scatter({x}, v, rng).detected_counts));
  }
  CHECK(mean(zero) == doctest::Approx(309.63).epsilon(0.002));
  CHECK(sd_of(zero) == doctest::Approx(18.89).epsilon(0.03));
  CHECK(mean(one) == doctest::Approx(345.8).epsilon(0.004));
  CHECK(sd_of(one) == doctest::Approx(30.9).epsilon(0.04));
  CHECK_THROWS_AS(simulate_spcm_scatter({200.0, 210.0, 220.0}, v, rng), TooManyAtoms);
}

TEST_CASE("two in-phase atoms give four times the single-atom signal")
{
  auto cfg = ExperimentConfig{};
  const double s = std::sin(cfg.incidence_angle_deg * std::numbers::pi / 180.0);
  cfg.guided_mode_index = cfg.excitation_wavelength / cfg.lattice_spacing - s; // 2 pi per site
  const auto v = validate_config(cfg);
  const double mid = 0.5 * (cfg.roi_min_um + cfg.roi_max_um);
  const double x1 = mid - 0.5 * cfg.lattice_spacing, x2 = mid + 0.5 * cfg.lattice_spacing;
  const double bg = 300.0;
  const double single = expected_scatter_counts({x1}, v, {}, bg) - bg;
  const double pair = expected_scatter_counts({x1, x2}, v, {}, bg) - bg;
  CHECK(pair == doctest::Approx(4 * single).epsilon(1e-9));
}

TEST_CASE("two atoms in antiphase cancel to the background")
{
  auto cfg = ExperimentConfig{};
  const double s = std::sin(cfg.incidence_angle_deg * std::numbers::pi / 180.0);
  cfg.lattice_spacing = cfg.excitation_wavelength / (2 * (cfg.guided_mode_index + s)); // pi per site
  const auto v = validate_config(cfg);
  const double mid = 0.5 * (cfg.roi_min_um + cfg.roi_max_um);
  const double x1 = mid - 0.5 * cfg.lattice_spacing, x2 = mid + 0.5 * cfg.lattice_spacing;
  CHECK(expected_scatter_counts({x1, x2}, v, {}, 300.0) == doctest::Approx(300.0).epsilon(1e-12));
  // without interference the intensities add
  const double single = expected_scatter_counts({x1}, v, {}, 300.0) - 300.0;
  CHECK(expected_scatter_counts({x1, x2}, v, {}, 300.0, false) == doctest::Approx(300.0 + 2 * single));
}

TEST_CASE("guided-probe transmission follows the per-atom extinction")
{
  const auto v = validate_config(ExperimentConfig{});
  RandomStream rng(11, 0);
  for (int n : {0, 3})
  {
    std::vector<double> c;
    for (int i = 0; i < 4000; ++i)
    {
      const auto r = simulate_spcm_transmission(n, v, rng);
      CHECK(r.mode == SpcmMode::transmission);
      c.push_back(static_cast<double>(r.detected_counts));
    }
    const double expected = 4500.0 * std::pow(0.96, n);
    CHECK(std::abs(mean(c) - expected) < 4 * sd_of(c) / std::sqrt(4000.0));
  }
  CHECK(4500.0 * std::pow(0.96, 3) == doctest::Approx(3981.3).epsilon(1e-4));
  CHECK_THROWS_AS(simulate_spcm_transmission(-1, v, rng), std::invalid_argument);
}

TEST_CASE("batches do not depend on the thread count")
{
  const auto v = validate_config(ExperimentConfig{});
  const auto a = simulate_series_batch(v, 12, 8, 1);
  const auto b = simulate_series_batch(v, 12, 8, 3);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
  {
    CHECK(a[i].frames == b[i].frames);
    CHECK(a[i].truth == b[i].truth);
  }
}
