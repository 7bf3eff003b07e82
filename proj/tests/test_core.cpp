#include "doctest.h"

#include "nfatom/core.hpp"
#include "nfatom/spectral.hpp"

#include <boost/math/tools/roots.hpp>

#include <cmath>
#include <numbers>

using namespace nfatom;

TEST_CASE("default config validates and derives the wavenumber")
{
  const auto v = validate_config(ExperimentConfig{});
  CHECK(v.k0 == doctest::Approx(2 * std::numbers::pi / 0.852).epsilon(1e-12));
  CHECK(v.k_nf == doctest::Approx(v.k0 * 1.1396352301683073).epsilon(1e-12));
  CHECK(v.pixel_pitch_um == doctest::Approx(17.2 / 3.0));
  CHECK(v.total_frames() == 12);
  CHECK(v.operational_threshold() == doctest::Approx(18 * 0.335));
}

TEST_CASE("negative lattice spacing is rejected")
{
  ExperimentConfig cfg;
  cfg.lattice_spacing = -1;
  CHECK_THROWS_AS(validate_config(cfg), InvalidConfig);
  try
  {
    validate_config(cfg);
  }
  catch (const InvalidConfig& e)
  {
    REQUIRE_FALSE(e.violations().empty());
    CHECK(e.violations().front().field == "lattice_spacing");
  }
}

TEST_CASE("all violations are reported together")
{
  ExperimentConfig cfg;
  cfg.lattice_spacing = 0;
  cfg.trap_lifetime_s = -2;
  cfg.roi_min_um = cfg.roi_max_um + 1;
  try
  {
    validate_config(cfg);
    FAIL("expected InvalidConfig");
  }
  catch (const InvalidConfig& e)
  {
    CHECK(e.violations().size() >= 3);
  }
}

TEST_CASE("mode index inverts the 0.269 per micron alias frequency")
{
  // |1/dz - (sin(theta) + n)/lambda| = 0.269 on the branch below 1/dz
  const double dz = 0.498, lambda = 0.852, s = std::sin(20.0 * std::numbers::pi / 180.0);
  auto f = [&](double n) { return 1.0 / dz - (s + n) / lambda - 0.269; };
  boost::math::tools::eps_tolerance<double> tol(50);
  const auto [lo, hi] = boost::math::tools::bisect(f, 1.0, 1.45, tol);
  const double n_root = 0.5 * (lo + hi);
  CHECK(n_root == doctest::Approx(1.14).epsilon(0.005));
  CHECK(ExperimentConfig{}.guided_mode_index == doctest::Approx(n_root).epsilon(1e-9));
}

TEST_CASE("config text round-trips")
{
  ExperimentConfig cfg = preset_100ms();
  cfg.spcm_coupling_sigma = 0.123456789012345;
  cfg.detection_frames = {1, 5, 9};
  const auto text = serialize_config(cfg);
  CHECK(parse_config(text) == cfg);
  CHECK(parse_config(serialize_config(ExperimentConfig{})) == ExperimentConfig{});
}

TEST_CASE("config parsing accepts comments and partial files")
{
  const auto cfg = parse_config("# comment\n\n  mean_atoms_loaded = 2.5 \ntrap_lifetime_s=0.5\n");
  CHECK(cfg.mean_atoms_loaded == 2.5);
  CHECK(cfg.trap_lifetime_s == 0.5);
  CHECK(cfg.lattice_spacing == ExperimentConfig{}.lattice_spacing);
}

TEST_CASE("config parsing errors")
{
  CHECK_THROWS_AS(parse_config("no_such_key = 1\n"), ParseError);
  CHECK_THROWS_AS(parse_config("lattice_spacing 0.5\n"), ParseError);
  CHECK_THROWS_AS(parse_config("lattice_spacing = abc\n"), ParseError);
  CHECK_THROWS_AS(load_config("/nonexistent/config.cfg"), IoError);
}

TEST_CASE("100 ms preset: 30 images plus 2 references")
{
  const auto v = validate_config(preset_100ms());
  CHECK(v.total_frames() == 32);
  CHECK(v.cfg.inter_image_wait_s == doctest::Approx(0.040));
  CHECK(v.cfg.integration_time_s == doctest::Approx(0.100));
  CHECK_NOTHROW(validate_config(preset_guided_excitation()));
}

TEST_CASE("presence fraction")
{
  AtomRecord a{0, 100.0, 0.0, 0.3};
  CHECK(GroundTruth::presence_fraction(a, 0.0, 0.15) == 1.0);
  CHECK(GroundTruth::presence_fraction(a, 0.2, 0.4) == doctest::Approx(0.5));
  CHECK(GroundTruth::presence_fraction(a, 0.3, 0.45) == 0.0);
  CHECK(GroundTruth::presence_fraction(a, 0.5, 0.65) == 0.0);
}

TEST_CASE("sum_frames and sum3x3")
{
  Frame a(5, 5), b(5, 5);
  a.exposure_s = b.exposure_s = 0.15;
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 5; ++c)
    {
      a.at(c, r) = 1;
      b.at(c, r) = r * 5 + c;
    }
  const std::vector<Frame> frames = {a, b};
  const auto s = sum_frames(frames);
  CHECK(s.exposure_s == doctest::Approx(0.30));
  CHECK(s.at(4, 4) == 25);
  CHECK(sum3x3(a, 2, 2).value() == 9);
  CHECK(sum3x3(b, 1, 1).value() == 0 + 1 + 2 + 5 + 6 + 7 + 10 + 11 + 12);
  CHECK_FALSE(sum3x3(a, 0, 2).has_value());
  CHECK_FALSE(sum3x3(a, 2, 4).has_value());
  CHECK_THROWS_AS(sum_frames(std::vector<Frame>{}), EmptyInput);
  CHECK_THROWS_AS(sum_frames(std::vector<Frame>{a, Frame(4, 5)}), ShapeMismatch);
}

TEST_CASE("random streams are reproducible and distinct")
{
  RandomStream a(42, 7), b(42, 7), c(42, 8), d(43, 7);
  for (int i = 0; i < 100; ++i)
  {
    const double x = a.uniform();
    CHECK(x == b.uniform());
    CHECK(x >= 0.0);
    CHECK(x < 1.0);
  }
  RandomStream e(42, 7);
  CHECK(e.uniform() != c.uniform());
  RandomStream f(42, 7);
  CHECK(f.uniform() != d.uniform());
}

TEST_CASE("clipped unit factor is never negative")
{
  RandomStream rng(1, 1);
  double sum = 0;
  for (int i = 0; i < 20000; ++i)
  {
    const double g = rng.clipped_unit_factor(1.5);
    CHECK(g >= 0.0);
    sum += g;
  }
  CHECK(sum > 0);
  RandomStream rng0(1, 2);
  CHECK(rng0.clipped_unit_factor(0.0) == 1.0);
}

TEST_CASE("illumination profiles average to one over the loading distribution")
{
  const auto v = validate_config(ExperimentConfig{});
  const auto dist = loading_site_distribution(v);
  double cam = 0, spcm = 0;
  for (std::size_t i = 0; i < dist.weights.size(); ++i)
  {
    const double x = static_cast<double>(dist.first_site + static_cast<long>(i)) * v.cfg.lattice_spacing;
    cam += dist.weights[i] * v.camera_illumination(x);
    spcm += dist.weights[i] * v.spcm_illumination(x);
  }
  CHECK(cam == doctest::Approx(1.0).epsilon(0.01));
  CHECK(spcm == doctest::Approx(1.0).epsilon(0.01));
  const double mid = 0.5 * (v.cfg.roi_min_um + v.cfg.roi_max_um);
  CHECK(v.camera_illumination(mid) - v.camera_illumination(v.cfg.roi_min_um) == doctest::Approx(0.20));
  CHECK(v.spcm_illumination(mid) - v.spcm_illumination(v.cfg.roi_max_um) == doctest::Approx(0.05));
}
