#include "nfatom/detect.hpp"

#include "nfatom/lsq.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace nfatom
{

DetectionKernel make_kernel(double fwhm_px, int size, KernelNormalization norm)
{
  if (size <= 0 || size % 2 == 0)
    throw EvenKernelSize("make_kernel: size must be odd and positive, got " + std::to_string(size));
  if (!(fwhm_px > 0))
    throw std::invalid_argument("make_kernel: fwhm must be positive");

  DetectionKernel k;
  k.size = size;
  k.fwhm_px = fwhm_px;
  k.sigma_px = fwhm_px / (2.0 * std::sqrt(2.0 * std::log(2.0)));
  const int r = size / 2;
  k.profile.resize(static_cast<std::size_t>(size));
  for (int i = -r; i <= r; ++i)
    k.profile[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (k.sigma_px * k.sigma_px));

  double sum = 0;
  for (double v : k.profile)
    sum += v;
  // 2D weights are the outer product, so normalize the 1D factor
  const double scale = norm == KernelNormalization::unit_sum ? 1.0 / sum : 1.0;
  for (auto& v : k.profile)
    v *= scale;

  k.weights = Grid(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      k.weights.at(x, y) = k.profile[static_cast<std::size_t>(x)] * k.profile[static_cast<std::size_t>(y)];
  return k;
}

Grid convolve(const Grid& image, const DetectionKernel& kernel)
{
  if (image.width < kernel.size || image.height < kernel.size)
    throw FrameTooSmall("convolve: image smaller than the kernel");
  const int r = kernel.radius();
  const auto& p = kernel.profile;

  Grid horizontal(image.width, image.height);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
    {
      double acc = 0;
      const int lo = std::max(-r, -x), hi = std::min(r, image.width - 1 - x);
      for (int d = lo; d <= hi; ++d)
        acc += p[static_cast<std::size_t>(d + r)] * image.at(x + d, y);
      horizontal.at(x, y) = acc;
    }

  Grid out(image.width, image.height);
  for (int y = 0; y < image.height; ++y)
  {
    const int lo = std::max(-r, -y), hi = std::min(r, image.height - 1 - y);
    for (int x = 0; x < image.width; ++x)
    {
      double acc = 0;
      for (int d = lo; d <= hi; ++d)
        acc += p[static_cast<std::size_t>(d + r)] * horizontal.at(x, y + d);
      out.at(x, y) = acc;
    }
  }
  return out;
}

Grid convolve(const Frame& frame, const DetectionKernel& kernel)
{
  return convolve(to_grid(frame), kernel);
}

Grid background_template(const std::vector<const Frame*>& reference_frames)
{
  if (reference_frames.empty())
    throw EmptyReferenceSet("background_template: no reference frames");
  const auto& first = *reference_frames.front();
  Grid mean(first.width, first.height);
  for (const Frame* f : reference_frames)
  {
    if (f->width != first.width || f->height != first.height)
      throw ShapeMismatch("background_template: reference frames differ in shape");
    for (std::size_t i = 0; i < mean.values.size(); ++i)
      mean.values[i] += f->counts[i];
  }
  const double n = static_cast<double>(reference_frames.size());
  for (auto& v : mean.values)
    v /= n;
  return mean;
}

Grid background_template(const std::vector<Frame>& reference_frames)
{
  std::vector<const Frame*> ptrs;
  for (const auto& f : reference_frames)
    ptrs.push_back(&f);
  return background_template(ptrs);
}

bool DetectorParams::in_roi(int col) const
{
  const double x = col * pixel_pitch_um;
  return x >= roi_min_um && x <= roi_max_um;
}

DetectorParams make_detector(const ValidatedConfig& vcfg, const Grid& background,
                             std::optional<double> threshold, std::optional<double> upper_bound)
{
  const auto& cfg = vcfg.cfg;
  DetectorParams p;
  p.kernel = make_kernel();
  p.convolved_background = convolve(background, p.kernel);
  p.atom_row = cfg.atom_row;
  p.threshold = threshold.value_or(cfg.detection_threshold) * cfg.threshold_scale;
  p.upper_bound = upper_bound.value_or(cfg.upper_bound_threshold) * cfg.threshold_scale;
  p.roi_min_um = cfg.roi_min_um;
  p.roi_max_um = cfg.roi_max_um;
  p.pixel_pitch_um = vcfg.pixel_pitch_um;
  return p;
}

std::vector<double> corrected_row(const Frame& frame, const DetectorParams& params)
{
  if (params.atom_row < 0 || params.atom_row >= frame.height)
    throw RowOutOfRange("atom row " + std::to_string(params.atom_row) + " outside the frame");
  if (params.convolved_background.width != frame.width || params.convolved_background.height != frame.height)
    throw ShapeMismatch("background template does not match the frame");
  // only the atom row is needed: vertical pass restricted to that row
  const auto& k = params.kernel;
  const int r = k.radius();
  if (frame.width < k.size || frame.height < k.size)
    throw FrameTooSmall("frame smaller than the kernel");
  std::vector<double> row(static_cast<std::size_t>(frame.width), 0.0);
  const int y = params.atom_row;
  const int ylo = std::max(-r, -y), yhi = std::min(r, frame.height - 1 - y);
  for (int x = 0; x < frame.width; ++x)
  {
    const int xlo = std::max(-r, -x), xhi = std::min(r, frame.width - 1 - x);
    double acc = 0;
    for (int dy = ylo; dy <= yhi; ++dy)
    {
      double line = 0;
      for (int dx = xlo; dx <= xhi; ++dx)
        line += k.profile[static_cast<std::size_t>(dx + r)] * frame.at(x + dx, y + dy);
      acc += k.profile[static_cast<std::size_t>(dy + r)] * line;
    }
    row[static_cast<std::size_t>(x)] = acc - params.convolved_background.at(x, y);
  }
  return row;
}

std::vector<RowPeak> row_maxima(const std::vector<double>& row)
{
  std::vector<RowPeak> peaks;
  const int n = static_cast<int>(row.size());
  const double minus_inf = -std::numeric_limits<double>::infinity();
  int c = 0;
  while (c < n)
  {
    const double left = c > 0 ? row[static_cast<std::size_t>(c - 1)] : minus_inf;
    const double v = row[static_cast<std::size_t>(c)];
    int end = c;
    while (end + 1 < n && row[static_cast<std::size_t>(end + 1)] == v)
      ++end;
    const double right = end + 1 < n ? row[static_cast<std::size_t>(end + 1)] : minus_inf;
    if (v > left && v > right)
      peaks.push_back({c, v});
    c = end + 1;
  }
  return peaks;
}

std::vector<double> candidate_peaks(const Frame& frame, const DetectorParams& params)
{
  std::vector<double> values;
  for (const auto& p : row_maxima(corrected_row(frame, params)))
    if (params.in_roi(p.col) && sum3x3(frame, p.col, params.atom_row))
      values.push_back(p.value);
  return values;
}

std::vector<DetectionEvent> detect_in_frame(const Frame& frame, const DetectorParams& params, int frame_index)
{
  std::vector<DetectionEvent> events;
  for (const auto& p : row_maxima(corrected_row(frame, params)))
  {
    if (!(p.value > params.threshold))
      continue;
    const auto raw = sum3x3(frame, p.col, params.atom_row);
    if (!raw)
      continue;
    DetectionEvent e;
    e.frame_index = frame_index;
    e.pixel_col = p.col;
    e.convolved_peak_value = p.value;
    e.raw_3x3_sum = *raw;
    e.position_um = p.col * params.pixel_pitch_um;
    e.in_roi = params.in_roi(p.col);
    e.above_upper_bound = params.upper_bound && p.value > *params.upper_bound;
    events.push_back(e);
  }
  return events;
}

namespace
{

std::vector<DetectionEvent> in_roi_only(std::vector<DetectionEvent> events)
{
  std::erase_if(events, [](const DetectionEvent& e) { return !e.in_roi; });
  return events;
}

bool detected_near(const std::vector<DetectionEvent>& events, int col)
{
  return std::any_of(events.begin(), events.end(), [col](const auto& e) { return std::abs(e.pixel_col - col) <= 1; });
}

} // namespace

std::vector<double> SeriesTracking::next_sums() const
{
  std::vector<double> v;
  for (const auto& e : entries)
    v.push_back(e.next_raw_3x3);
  return v;
}

std::vector<double> SeriesTracking::confirmed_sums() const
{
  std::vector<double> v;
  for (const auto& e : entries)
    if (e.confirmed)
      v.push_back(e.next_raw_3x3);
  return v;
}

std::vector<double> SeriesTracking::confirmed_peaks() const
{
  std::vector<double> v;
  for (const auto& e : entries)
    if (e.confirmed)
      v.push_back(e.next_peak_value);
  return v;
}

SeriesTracking track_series(const ImageSeries& series, const DetectorParams& params,
                            const std::vector<int>& detection_frames, int series_id)
{
  SeriesTracking out;
  const int n_frames = static_cast<int>(series.frames.size());
  if (n_frames < 3)
    return out;
  auto is_signal = [&](int k) { return k >= 0 && k < n_frames && series.frames[static_cast<std::size_t>(k)].kind == FrameKind::signal; };

  std::vector<std::vector<DetectionEvent>> events(static_cast<std::size_t>(n_frames));
  for (int k = 0; k < n_frames; ++k)
    if (is_signal(k))
      events[static_cast<std::size_t>(k)] = in_roi_only(detect_in_frame(series.frames[static_cast<std::size_t>(k)], params, k));

  for (int k : detection_frames)
  {
    if (!is_signal(k) || !is_signal(k + 1))
      continue;
    const auto& here = events[static_cast<std::size_t>(k)];
    if (here.size() != 1)
      continue;
    const int col = here.front().pixel_col;

    TrackedAtom atom;
    atom.series_id = series_id;
    atom.pixel_col = col;
    atom.detection_frame = k;
    for (int j = 0; j < n_frames; ++j)
    {
      const auto raw = sum3x3(series.frames[static_cast<std::size_t>(j)], col, params.atom_row);
      atom.raw_3x3.push_back(raw ? *raw : -1);
      if (j < k || !is_signal(j))
        atom.status.push_back(FrameStatus::not_evaluated);
      else
        atom.status.push_back(detected_near(events[static_cast<std::size_t>(j)], col) ? FrameStatus::detected
                                                                                       : FrameStatus::absent);
    }

    ConditionedEntry entry;
    entry.series_id = series_id;
    entry.detection_frame = k;
    entry.pixel_col = col;
    entry.next_raw_3x3 = static_cast<double>(atom.raw_3x3[static_cast<std::size_t>(k + 1)]);
    entry.next_peak_value =
        corrected_row(series.frames[static_cast<std::size_t>(k + 1)], params)[static_cast<std::size_t>(col)];
    entry.confirmed = is_signal(k + 2) && detected_near(events[static_cast<std::size_t>(k + 2)], col);
    out.entries.push_back(entry);
    out.atoms.push_back(std::move(atom));
  }
  return out;
}

PairLocalization localize_pair(const Frame& frame, std::array<int, 2> seed_cols, const ValidatedConfig& vcfg)
{
  const auto& cfg = vcfg.cfg;
  PairLocalization out;
  if (seed_cols[0] == seed_cols[1])
    throw std::invalid_argument("localize_pair: seed columns must differ");
  if (seed_cols[0] > seed_cols[1])
    std::swap(seed_cols[0], seed_cols[1]);

  const double sigma = vcfg.psf_sigma_px;
  const int margin = static_cast<int>(std::ceil(4 * sigma)) + 2;
  const int c0 = std::max(0, seed_cols[0] - margin);
  const int c1 = std::min(frame.width - 1, seed_cols[1] + margin);
  const int rows = cfg.localization_band_rows;
  const int r0 = std::max(0, cfg.atom_row - (rows - 1) / 2);
  const int r1 = std::min(frame.height - 1, r0 + rows - 1);

  const int n = c1 - c0 + 1;
  Eigen::VectorXd profile(n);
  for (int c = c0; c <= c1; ++c)
  {
    double s = 0;
    for (int r = r0; r <= r1; ++r)
      s += frame.at(c, r);
    profile[c - c0] = s;
  }

  const double scale = 1.0 / (sigma * std::numbers::sqrt2);
  const double inv_norm = 1.0 / (sigma * std::sqrt(2 * std::numbers::pi));
  auto pixel_fraction = [&](int c, double x, double& dfdx) {
    const double hi = (c + 0.5 - x), lo = (c - 0.5 - x);
    dfdx = -(std::exp(-0.5 * hi * hi / (sigma * sigma)) - std::exp(-0.5 * lo * lo / (sigma * sigma))) * inv_norm;
    return 0.5 * (std::erf(hi * scale) - std::erf(lo * scale));
  };

  // shot noise dominates: weight each column by the inverse of its counts
  Eigen::VectorXd w(n);
  for (int i = 0; i < n; ++i)
    w[i] = 1.0 / std::sqrt(std::max(profile[i], 1.0));

  auto residual = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r, Eigen::MatrixXd& J) {
    r.resize(n);
    J.resize(n, 5);
    for (int i = 0; i < n; ++i)
    {
      const int c = c0 + i;
      double d1 = 0, d2 = 0;
      const double f1 = pixel_fraction(c, p[2], d1);
      const double f2 = pixel_fraction(c, p[4], d2);
      r[i] = w[i] * (profile[i] - (p[0] + p[1] * f1 + p[3] * f2));
      J(i, 0) = -w[i];
      J(i, 1) = -w[i] * f1;
      J(i, 2) = -w[i] * p[1] * d1;
      J(i, 3) = -w[i] * f2;
      J(i, 4) = -w[i] * p[3] * d2;
    }
  };

  const double offset0 = profile.minCoeff();
  double dummy = 0;
  const double peak_fraction = pixel_fraction(0, 0.0, dummy);
  Eigen::VectorXd p0(5);
  p0 << offset0, std::max(profile[seed_cols[0] - c0] - offset0, 1.0) / peak_fraction, seed_cols[0],
      std::max(profile[seed_cols[1] - c0] - offset0, 1.0) / peak_fraction, seed_cols[1];

  LsqOptions options;
  Eigen::VectorXd lower(5), upper(5);
  const double inf = std::numeric_limits<double>::infinity();
  lower << -inf, 0.0, c0, 0.0, c0;
  upper << inf, inf, c1, inf, c1;
  options.lower = lower;
  options.upper = upper;

  LsqResult res;
  try
  {
    res = levenberg_marquardt(residual, p0, options);
  }
  catch (const std::runtime_error&)
  {
    out.diverged = true;
    return out;
  }
  const double dof = n - 5;
  if (!res.converged || !res.params.allFinite() || dof <= 0)
  {
    out.diverged = true;
    return out;
  }

  const double s2 = res.chi2 / dof;
  const Eigen::MatrixXd cov = res.covariance * s2;
  const double pitch = vcfg.pixel_pitch_um;
  int first = 2, second = 4;
  if (res.params[second] < res.params[first])
    std::swap(first, second);
  out.positions_um = {res.params[first] * pitch, res.params[second] * pitch};
  out.fit_errors_um = {std::sqrt(std::max(cov(first, first), 0.0)) * pitch,
                       std::sqrt(std::max(cov(second, second), 0.0)) * pitch};
  out.separation_um = out.positions_um[1] - out.positions_um[0];
  const double sep_var = cov(first, first) + cov(second, second) - 2 * cov(first, second);
  out.separation_err_um = std::sqrt(std::max(sep_var, 0.0)) * pitch;
  out.accepted = out.separation_um > 0 && res.params[1] > 0 && res.params[3] > 0 &&
                 out.fit_errors_um[0] < cfg.fit_error_max_um && out.fit_errors_um[1] < cfg.fit_error_max_um;
  return out;
}

} // namespace nfatom
