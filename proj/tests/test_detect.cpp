#include "doctest.h"

#include "nfatom/detect.hpp"
#include "nfatom/experiments.hpp"
#include "nfatom/sim.hpp"

#include <algorithm>
#include <cmath>

using namespace nfatom;

namespace
{

Grid brute_force(const Grid& img, const DetectionKernel& k)
{
  Grid out(img.width, img.height);
  const int r = k.radius();
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
    {
      double s = 0;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx)
        {
          const int xx = x + dx, yy = y + dy;
          if (xx >= 0 && yy >= 0 && xx < img.width && yy < img.height)
            s += img.at(xx, yy) * k.weights.at(dx + r, dy + r);
        }
      out.at(x, y) = s;
    }
  return out;
}

GroundTruth fixed_truth(std::vector<double> positions, double loss_time_s = 1e9)
{
  GroundTruth t;
  for (double x : positions)
    t.atoms.push_back({std::lround(x / 0.498), x, 0.0, loss_time_s});
  return t;
}

Frame noiseless_frame(const ValidatedConfig& v, const std::vector<double>& positions, double brightness)
{
  const auto g = expected_image(v, positions, std::vector<double>(positions.size(), brightness));
  Frame f(g.width, g.height);
  for (std::size_t i = 0; i < f.counts.size(); ++i)
    f.counts[i] = static_cast<std::int32_t>(std::lround(g.values[i]));
  return f;
}

DetectorParams detector_from_refs(const ValidatedConfig& v, std::uint64_t seed, int n,
                                  std::optional<double> threshold = std::nullopt)
{
  const auto refs = simulate_reference_frames(v, seed, static_cast<std::size_t>(n), 1);
  return make_detector(v, background_template(refs), threshold);
}

} // namespace

TEST_CASE("kernel shape and normalization")
{
  const auto k = make_kernel(1.5, 11);
  CHECK(k.sigma_px == doctest::Approx(1.5 / 2.3548).epsilon(1e-3));
  CHECK(k.sigma_px == doctest::Approx(0.637).epsilon(1e-3));
  double sum = 0, peak = 0;
  for (double w : k.weights.values)
  {
    sum += w;
    peak = std::max(peak, w);
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(k.weights.at(5, 5) == peak);
  CHECK(k.weights.width == 11);
  for (int y = 0; y < 11; ++y)
    for (int x = 0; x < 11; ++x)
    {
      CHECK(k.weights.at(x, y) == doctest::Approx(k.weights.at(10 - x, y)));
      CHECK(k.weights.at(x, y) == doctest::Approx(k.weights.at(y, x)));
    }

  const auto kp = make_kernel(1.5, 11, KernelNormalization::unit_peak);
  CHECK(kp.weights.at(5, 5) == doctest::Approx(1.0));
  CHECK_THROWS_AS(make_kernel(1.5, 10), EvenKernelSize);
  CHECK_THROWS_AS(make_kernel(1.5, 0), EvenKernelSize);
}

TEST_CASE("impulse response equals the kernel")
{
  const auto k = make_kernel();
  Grid img(31, 21);
  img.at(15, 10) = 1.0;
  const auto out = convolve(img, k);
  for (int y = 0; y < 21; ++y)
    for (int x = 0; x < 31; ++x)
    {
      const int dx = x - 15 + 5, dy = y - 10 + 5;
      const double expect = (dx >= 0 && dx < 11 && dy >= 0 && dy < 11) ? k.weights.at(dx, dy) : 0.0;
      CHECK(out.at(x, y) == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("constant image keeps its value away from the border")
{
  const auto k = make_kernel();
  Grid img(30, 20, 7.5);
  const auto out = convolve(img, k);
  for (int y = 5; y < 15; ++y)
    for (int x = 5; x < 25; ++x)
      CHECK(out.at(x, y) == doctest::Approx(7.5).epsilon(1e-12));
  CHECK(out.at(0, 0) < 7.5);
}

TEST_CASE("separable convolution matches the direct sum")
{
  RandomStream rng(11, 0);
  for (auto [w, h] : {std::pair{32, 32}, std::pair{84, 21}, std::pair{11, 11}})
  {
    Grid img(w, h);
    for (double& v : img.values)
      v = rng.uniform() * 100.0 - 20.0;
    for (double fwhm : {1.5, 3.0})
    {
      const auto k = make_kernel(fwhm, 11);
      const auto fast = convolve(img, k);
      const auto slow = brute_force(img, k);
      double worst = 0;
      for (std::size_t i = 0; i < fast.values.size(); ++i)
        worst = std::max(worst, std::abs(fast.values[i] - slow.values[i]) / std::max(1.0, std::abs(slow.values[i])));
      CHECK(worst < 1e-9);
    }
  }
  CHECK_THROWS_AS(convolve(Grid(10, 20), make_kernel()), FrameTooSmall);
}

TEST_CASE("background template is the pixel mean")
{
  Frame a(12, 12), b(12, 12);
  std::fill(a.counts.begin(), a.counts.end(), 10);
  std::fill(b.counts.begin(), b.counts.end(), 20);
  const auto one = background_template(std::vector<Frame>{a});
  CHECK(std::all_of(one.values.begin(), one.values.end(), [](double v) { return v == 10.0; }));
  const auto two = background_template(std::vector<Frame>{a, b});
  CHECK(std::all_of(two.values.begin(), two.values.end(), [](double v) { return v == 15.0; }));
  CHECK_THROWS_AS(background_template(std::vector<Frame>{}), EmptyReferenceSet);
  CHECK_THROWS_AS(background_template(std::vector<Frame>{a, Frame(12, 11)}), ShapeMismatch);
}

TEST_CASE("template variance shrinks with the number of frames")
{
  const auto v = validate_config(ExperimentConfig{});
  const std::size_t n = 400;
  const auto refs = simulate_reference_frames(v, 77, n, 1);
  const auto tmpl = background_template(refs);
  // per-pixel variance across frames vs. variance of the template around its smooth mean
  double frame_var = 0;
  const int row = v.cfg.atom_row;
  for (int c = 0; c < v.cfg.frame_width; ++c)
  {
    double s = 0, ss = 0;
    for (const auto& f : refs)
    {
      s += f.at(c, row);
      ss += static_cast<double>(f.at(c, row)) * f.at(c, row);
    }
    const double m = s / n;
    frame_var += ss / n - m * m;
  }
  frame_var /= v.cfg.frame_width;
  double tmpl_var = 0, tmpl_mean = 0;
  for (int c = 0; c < v.cfg.frame_width; ++c)
    tmpl_mean += tmpl.at(c, row);
  tmpl_mean /= v.cfg.frame_width;
  for (int c = 0; c < v.cfg.frame_width; ++c)
    tmpl_var += (tmpl.at(c, row) - tmpl_mean) * (tmpl.at(c, row) - tmpl_mean);
  tmpl_var /= v.cfg.frame_width - 1;
  const double ratio = tmpl_var / (frame_var / static_cast<double>(n));
  CHECK(ratio > 0.6);
  CHECK(ratio < 1.5);
}

TEST_CASE("row maxima: strict on the left, plateaus to the leftmost pixel")
{
  const std::vector<double> row = {0, 3, 1, 2, 2, 2, 0, 5, 5, 1, 4};
  const auto peaks = row_maxima(row);
  std::vector<int> cols;
  for (const auto& p : peaks)
    cols.push_back(p.col);
  CHECK(cols == std::vector<int>{1, 3, 7, 10});
  CHECK(peaks[2].value == 5.0);
  CHECK(row_maxima({}).empty());
  CHECK(row_maxima({1, 1, 1}).size() == 1);
  CHECK(row_maxima({3, 2, 1}).size() == 1);
}

TEST_CASE("row maxima detected for all pixels when the threshold is very low")
{
  // every local maximum of the corrected row is a candidate
  const auto v = validate_config(ExperimentConfig{});
  const auto det = detector_from_refs(v, 5, 50, -1e9);
  const auto refs = simulate_reference_frames(v, 6, 20, 1);
  for (const auto& f : refs)
  {
    const auto row = corrected_row(f, det);
    const auto maxima = row_maxima(row);
    const auto events = detect_in_frame(f, det);
    std::size_t inside = 0;
    for (const auto& m : maxima)
      if (m.col >= 1 && m.col + 1 < f.width)
        ++inside;
    CHECK(events.size() == inside);
  }
}

TEST_CASE("event count is monotone in the threshold")
{
  const auto v = validate_config(ExperimentConfig{});
  const auto refs = simulate_reference_frames(v, 8, 30, 1);
  const auto tmpl = background_template(refs);
  RandomStream rng(9, 0);
  for (int i = 0; i < 20; ++i)
  {
    const auto truth = sample_ground_truth(v, rng);
    const auto frame = render_frame(truth, v, 0.0, 0.15, rng);
    std::size_t prev = std::numeric_limits<std::size_t>::max();
    for (double thr : {-50.0, 0.0, 10.0, 18.0, 30.0, 60.0, 200.0})
    {
      const auto n = detect_in_frame(frame, make_detector(v, tmpl, thr, 1e9)).size();
      CHECK(n <= prev);
      prev = n;
    }
  }
}

TEST_CASE("events carry consistent fields")
{
  const auto v = validate_config(ExperimentConfig{});
  const auto det = detector_from_refs(v, 12, 100);
  const auto truth = fixed_truth({150.0, 300.0});
  RandomStream rng(13, 0);
  for (int i = 0; i < 20; ++i)
  {
    const auto frame = render_frame(truth, v, 0.0, 0.15, rng);
    for (const auto& e : detect_in_frame(frame, det, 4))
    {
      CHECK(e.frame_index == 4);
      CHECK(e.convolved_peak_value > det.threshold);
      CHECK(e.position_um == doctest::Approx(e.pixel_col * v.pixel_pitch_um));
      CHECK(e.raw_3x3_sum == sum3x3(frame, e.pixel_col, v.cfg.atom_row).value());
      CHECK(e.in_roi == det.in_roi(e.pixel_col));
      CHECK(e.above_upper_bound == (e.convolved_peak_value > *det.upper_bound));
    }
  }
}

TEST_CASE("single atom is found within one pixel")
{
  const auto v = validate_config(ExperimentConfig{});
  const auto det = detector_from_refs(v, 14, 300);
  RandomStream rng(15, 0);
  int found = 0, split = 0;
  const int n = 2000;
  for (int i = 0; i < n; ++i)
  {
    const double x = 160.0 + 200.0 * rng.uniform();
    const auto frame = render_frame(fixed_truth({x}), v, 0.0, 0.15, rng);
    const int col = column_of(v, x);
    const auto events = detect_in_frame(frame, det);
    const auto near = std::count_if(events.begin(), events.end(),
                                    [col](const auto& e) { return e.in_roi && std::abs(e.pixel_col - col) <= 1; });
    found += near >= 1 ? 1 : 0;
    split += near > 1 ? 1 : 0;
  }
  // isolated-atom detection probability 0.977 +- 0.015
  CHECK(std::abs(static_cast<double>(found) / n - 0.977) <= 0.015);
  // shot noise occasionally splits a dim spot into maxima on either side of its column
  CHECK(static_cast<double>(split) / n < 0.04);
}

TEST_CASE("no false events at threshold 34 on reference frames")
{
  const auto v = validate_config(ExperimentConfig{});
  const auto refs = simulate_reference_frames(v, 16, 1000, 1);
  const auto det34 = make_detector(v, background_template(refs), 34.0);
  const auto det18 = make_detector(v, background_template(refs), 18.0);
  std::size_t n34 = 0, frames18 = 0;
  for (const auto& f : refs)
  {
    const auto e34 = detect_in_frame(f, det34);
    n34 += static_cast<std::size_t>(std::count_if(e34.begin(), e34.end(), [](const auto& e) { return e.in_roi; }));
    const auto e18 = detect_in_frame(f, det18);
    frames18 += std::any_of(e18.begin(), e18.end(), [](const auto& e) { return e.in_roi; }) ? 1 : 0;
  }
  CHECK(n34 == 0);
  const double p = static_cast<double>(frames18) / static_cast<double>(refs.size());
  CHECK(p > 0.03);
  CHECK(p < 0.11);
}

TEST_CASE("two atoms on the same pixel column merge into one event")
{
  const auto v = validate_config(ExperimentConfig{});
  const auto det = detector_from_refs(v, 17, 100);
  const double x = 250.0;
  const auto frame = noiseless_frame(v, {x, x + 0.498}, 1.0);
  const auto events = detect_in_frame(frame, det);
  CHECK(std::count_if(events.begin(), events.end(), [](const auto& e) { return e.in_roi; }) == 1);
}

TEST_CASE("tracking: a persisting atom enters both populations")
{
  auto cfg = ExperimentConfig{};
  cfg.atom_rate_counts = 1000;
  const auto v = validate_config(cfg);
  const auto det = detector_from_refs(v, 18, 50, 40.0);
  RandomStream rng(19, 0);
  const auto series = render_series(v, fixed_truth({260.0}), rng);
  const auto tracking = track_series(series, det, cfg.detection_frames);
  REQUIRE(tracking.entries.size() == cfg.detection_frames.size());
  for (const auto& e : tracking.entries)
  {
    CHECK(e.confirmed);
    CHECK(e.next_raw_3x3 > 500);
  }
  CHECK(tracking.next_sums().size() == tracking.confirmed_sums().size());
  const auto& atom = tracking.atoms.front();
  CHECK(atom.raw_3x3.size() == series.frames.size());
  CHECK(atom.status[1] == FrameStatus::detected);
  CHECK(atom.status.back() == FrameStatus::not_evaluated);
}

TEST_CASE("tracking: an atom lost after its detection image enters S2(a) only")
{
  auto cfg = ExperimentConfig{};
  cfg.atom_rate_counts = 1000;
  const auto v = validate_config(cfg);
  const auto det = detector_from_refs(v, 20, 50, 40.0);
  RandomStream rng(21, 0);
  const auto series = render_series(v, fixed_truth({260.0}, 0.16), rng);
  const auto tracking = track_series(series, det, cfg.detection_frames);
  REQUIRE(tracking.entries.size() == 1);
  const auto& e = tracking.entries.front();
  CHECK(e.detection_frame == 0);
  CHECK_FALSE(e.confirmed);
  CHECK(e.next_raw_3x3 < 100); // background level
  CHECK(tracking.confirmed_sums().empty());
}

TEST_CASE("noiseless pair 20 um apart is recovered")
{
  const auto v = validate_config(ExperimentConfig{});
  for (double x1 : {180.0, 221.3, 260.7, 300.2})
  {
    const double x2 = x1 + 20.0;
    const auto frame = noiseless_frame(v, {x1, x2}, 1000.0);
    const auto fit = localize_pair(frame, {column_of(v, x1), column_of(v, x2)}, v);
    REQUIRE_FALSE(fit.diverged);
    CHECK(std::abs(fit.positions_um[0] - x1) < 0.05);
    CHECK(std::abs(fit.positions_um[1] - x2) < 0.05);
    CHECK(fit.separation_um == doctest::Approx(20.0).epsilon(0.0025));
    CHECK(fit.accepted);
  }
  CHECK_THROWS_AS(localize_pair(noiseless_frame(v, {200.0}, 1.0), {34, 34}, v), std::invalid_argument);
}

TEST_CASE("pairs 3 um apart are mostly rejected")
{
  const auto v = validate_config(ExperimentConfig{});
  RandomStream rng(22, 0);
  int rejected = 0;
  const int n = 200;
  for (int i = 0; i < n; ++i)
  {
    const double x1 = 0.498 * std::round((200.0 + 100.0 * rng.uniform()) / 0.498);
    const double x2 = x1 + 6 * 0.498;
    const auto truth = fixed_truth({x1, x2});
    std::vector<Frame> frames;
    for (int k = 0; k < v.cfg.localization_frames; ++k)
      frames.push_back(render_frame(truth, v, k * v.frame_period_s(), k * v.frame_period_s() + 0.15, rng));
    const int c = column_of(v, 0.5 * (x1 + x2));
    const auto fit = localize_pair(sum_frames(frames), {c, c + 1}, v);
    rejected += fit.accepted ? 0 : 1;
  }
  CHECK(rejected > n / 2);
}
