#include "nfatom/core.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <tuple>
#include <variant>

namespace nfatom
{

namespace
{

std::string join_violations(const std::vector<ConfigViolation>& violations)
{
  std::string msg = "invalid config:";
  for (const auto& v : violations)
    msg += " [" + v.field + ": " + v.reason + "]";
  return msg;
}

using FieldRef = std::variant<double ExperimentConfig::*, int ExperimentConfig::*,
                              std::vector<int> ExperimentConfig::*>;

struct Field
{
  const char* name;
  FieldRef ref;
};

// Serialization order; keys are the member names.
const std::vector<Field>& field_table()
{
  using C = ExperimentConfig;
  static const std::vector<Field> table = {
      {"lattice_spacing", &C::lattice_spacing},
      {"excitation_wavelength", &C::excitation_wavelength},
      {"guided_mode_index", &C::guided_mode_index},
      {"incidence_angle_deg", &C::incidence_angle_deg},
      {"trap_lifetime_s", &C::trap_lifetime_s},
      {"integration_time_s", &C::integration_time_s},
      {"inter_image_wait_s", &C::inter_image_wait_s},
      {"images_per_series", &C::images_per_series},
      {"reference_images", &C::reference_images},
      {"roi_min_um", &C::roi_min_um},
      {"roi_max_um", &C::roi_max_um},
      {"mean_atoms_loaded", &C::mean_atoms_loaded},
      {"position_center_um", &C::position_center_um},
      {"position_sigma_um", &C::position_sigma_um},
      {"magnification", &C::magnification},
      {"camera_pixel_pitch_um", &C::camera_pixel_pitch_um},
      {"psf_e_radius_um", &C::psf_e_radius_um},
      {"frame_width", &C::frame_width},
      {"frame_height", &C::frame_height},
      {"atom_row", &C::atom_row},
      {"atom_rate_counts", &C::atom_rate_counts},
      {"background_mean_counts", &C::background_mean_counts},
      {"background_sigma_counts", &C::background_sigma_counts},
      {"camera_nonuniformity", &C::camera_nonuniformity},
      {"camera_read_noise_counts", &C::camera_read_noise_counts},
      {"atom_brightness_spread", &C::atom_brightness_spread},
      {"atom_brightness_shape", &C::atom_brightness_shape},
      {"threshold_scale", &C::threshold_scale},
      {"detection_threshold", &C::detection_threshold},
      {"upper_bound_threshold", &C::upper_bound_threshold},
      {"detection_frames", &C::detection_frames},
      {"localization_band_rows", &C::localization_band_rows},
      {"localization_frames", &C::localization_frames},
      {"fit_error_max_um", &C::fit_error_max_um},
      {"spcm_bg_mean", &C::spcm_bg_mean},
      {"spcm_bg_sigma", &C::spcm_bg_sigma},
      {"spcm_single_atom_mean", &C::spcm_single_atom_mean},
      {"spcm_single_atom_sigma", &C::spcm_single_atom_sigma},
      {"spcm_nonuniformity", &C::spcm_nonuniformity},
      {"spcm_coupling_sigma", &C::spcm_coupling_sigma},
      {"common_mode_fraction", &C::common_mode_fraction},
      {"transmission_bg_counts", &C::transmission_bg_counts},
      {"transmission_drift", &C::transmission_drift},
      {"per_atom_extinction", &C::per_atom_extinction},
  };
  return table;
}

std::string format_double(double value)
{
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

std::string trim(const std::string& s)
{
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos)
    return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text)
{
  T value{};
  const char* begin = text.data();
  const char* end = begin + text.size();
  auto res = std::from_chars(begin, end, value);
  if (res.ec != std::errc() || res.ptr != end)
    throw ParseError("config key '" + key + "': cannot parse '" + text + "'");
  return value;
}

// Per-pixel variance not scaling with the signal: read noise plus integer rounding.
double pixel_extra_variance(const ExperimentConfig& cfg)
{
  return cfg.camera_read_noise_counts * cfg.camera_read_noise_counts + 1.0 / 12.0;
}

struct PixelMoments
{
  double mean = 0;
  double var = 0;
};

// Exact mean and variance of round(F k + e), k ~ Poisson(mu / F), e ~ N(0, read_noise).
PixelMoments rounded_pixel_moments(double mu, double F, double read_noise)
{
  const double lambda = mu / F;
  const int k_max = static_cast<int>(lambda + 12.0 * std::sqrt(lambda) + 30.0);
  double p = std::exp(-lambda);
  double m1 = 0, m2 = 0;
  for (int k = 0; k <= k_max; ++k)
  {
    if (k > 0)
      p *= lambda / k;
    const double x = F * k;
    if (read_noise > 0)
    {
      const double inv = 1.0 / (read_noise * std::numbers::sqrt2);
      const long lo = static_cast<long>(std::floor(x - 8.0 * read_noise)) - 1;
      const long hi = static_cast<long>(std::ceil(x + 8.0 * read_noise)) + 1;
      for (long n = lo; n <= hi; ++n)
      {
        const double q = 0.5 * (std::erfc(-(n + 0.5 - x) * inv) - std::erfc(-(n - 0.5 - x) * inv));
        m1 += p * q * n;
        m2 += p * q * static_cast<double>(n) * n;
      }
    }
    else
    {
      const double n = std::round(x);
      m1 += p * n;
      m2 += p * n * n;
    }
  }
  return {m1, m2 - m1 * m1};
}

// Pixel mean and shot-noise scale whose rounded output matches the configured 3x3
// background mean and standard deviation.
std::pair<double, double> calibrate_pixel_noise(const ExperimentConfig& cfg)
{
  const double target_mean = cfg.background_mean_counts / 9.0;
  const double target_var = cfg.background_sigma_counts * cfg.background_sigma_counts / 9.0;
  const double extra = pixel_extra_variance(cfg);
  double mu = target_mean;
  double F = (target_var - extra) / target_mean;
  for (int iter = 0; iter < 500; ++iter)
  {
    const auto m = rounded_pixel_moments(mu, F, cfg.camera_read_noise_counts);
    if (std::abs(m.mean - target_mean) < 1e-12 && std::abs(m.var - target_var) < 1e-12)
      break;
    mu = std::max(mu + (target_mean - m.mean), 1e-9);
    F = std::max(F * (target_var - extra) / std::max(m.var - extra, 1e-9), 1e-6);
  }
  return {mu, F};
}

// Moments E[u^2], E[u^4] of u = (x - roi_mid) / roi_half over the ROI-truncated loading Gaussian.
std::pair<double, double> loading_moments(const ExperimentConfig& cfg)
{
  const int nodes = 2000;
  const double mid = 0.5 * (cfg.roi_min_um + cfg.roi_max_um);
  const double half = 0.5 * (cfg.roi_max_um - cfg.roi_min_um);
  const double h = (cfg.roi_max_um - cfg.roi_min_um) / nodes;
  double norm = 0, m2 = 0, m4 = 0;
  for (int i = 0; i <= nodes; ++i)
  {
    const double x = cfg.roi_min_um + i * h;
    const double z = (x - cfg.position_center_um) / cfg.position_sigma_um;
    const double weight = (i == 0 || i == nodes) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    const double pdf = std::exp(-0.5 * z * z) * weight;
    const double u = (x - mid) / half;
    norm += pdf;
    m2 += pdf * u * u;
    m4 += pdf * u * u * u * u;
  }
  return {m2 / norm, m4 / norm};
}

double quadratic_profile(double position_um, double amplitude, double u2_mean,
                         const ExperimentConfig& cfg)
{
  const double mid = 0.5 * (cfg.roi_min_um + cfg.roi_max_um);
  const double half = 0.5 * (cfg.roi_max_um - cfg.roi_min_um);
  const double u = std::clamp((position_um - mid) / half, -1.0, 1.0);
  return 1.0 + amplitude * (u2_mean - u * u);
}

} // namespace

InvalidConfig::InvalidConfig(std::vector<ConfigViolation> violations)
    : Error(join_violations(violations)), mViolations(std::move(violations))
{
}

ExperimentConfig preset_100ms()
{
  ExperimentConfig cfg;
  cfg.integration_time_s = 0.100;
  cfg.inter_image_wait_s = 0.040;
  cfg.images_per_series = 30;
  cfg.reference_images = 2;
  cfg.atom_rate_counts *= 0.100 / 0.150;
  cfg.background_mean_counts *= 0.100 / 0.150;
  cfg.background_sigma_counts *= std::sqrt(0.100 / 0.150);
  cfg.detection_frames.clear();
  for (int i = 0; i + 2 < cfg.images_per_series; i += 2)
    cfg.detection_frames.push_back(i);
  return cfg;
}

ExperimentConfig preset_guided_excitation()
{
  ExperimentConfig cfg;
  cfg.integration_time_s = 0.400;
  cfg.inter_image_wait_s = 0.040;
  cfg.images_per_series = 4;
  cfg.reference_images = 1;
  cfg.detection_frames = {0};
  return cfg;
}

ValidatedConfig validate_config(const ExperimentConfig& cfg)
{
  std::vector<ConfigViolation> bad;
  auto positive = [&](const char* name, double value) {
    if (!(value > 0) || !std::isfinite(value))
      bad.push_back({name, "must be finite and strictly positive"});
  };
  auto fraction = [&](const char* name, double value) {
    if (!(value >= 0 && value <= 1))
      bad.push_back({name, "must lie in [0, 1]"});
  };

  positive("lattice_spacing", cfg.lattice_spacing);
  positive("excitation_wavelength", cfg.excitation_wavelength);
  if (!(cfg.trap_lifetime_s > 0))
    bad.push_back({"trap_lifetime_s", "must be strictly positive"});
  positive("integration_time_s", cfg.integration_time_s);
  positive("inter_image_wait_s", cfg.inter_image_wait_s);
  positive("roi_min_um", cfg.roi_min_um);
  positive("roi_max_um", cfg.roi_max_um);
  positive("position_sigma_um", cfg.position_sigma_um);
  positive("magnification", cfg.magnification);
  positive("camera_pixel_pitch_um", cfg.camera_pixel_pitch_um);
  positive("psf_e_radius_um", cfg.psf_e_radius_um);
  positive("atom_rate_counts", cfg.atom_rate_counts);
  positive("background_mean_counts", cfg.background_mean_counts);
  positive("background_sigma_counts", cfg.background_sigma_counts);
  if (!(cfg.camera_read_noise_counts >= 0))
    bad.push_back({"camera_read_noise_counts", "must be non-negative"});
  else if (cfg.background_sigma_counts * cfg.background_sigma_counts <= 9.0 * pixel_extra_variance(cfg))
    bad.push_back({"background_sigma_counts", "not above the read and rounding noise of a 3x3 sum"});
  positive("threshold_scale", cfg.threshold_scale);
  positive("detection_threshold", cfg.detection_threshold);
  positive("upper_bound_threshold", cfg.upper_bound_threshold);
  positive("fit_error_max_um", cfg.fit_error_max_um);
  positive("spcm_bg_mean", cfg.spcm_bg_mean);
  positive("spcm_bg_sigma", cfg.spcm_bg_sigma);
  positive("spcm_single_atom_mean", cfg.spcm_single_atom_mean);
  positive("spcm_single_atom_sigma", cfg.spcm_single_atom_sigma);
  positive("transmission_bg_counts", cfg.transmission_bg_counts);

  if (!(cfg.mean_atoms_loaded >= 0))
    bad.push_back({"mean_atoms_loaded", "must be non-negative"});
  positive("atom_brightness_shape", cfg.atom_brightness_shape);
  if (!(cfg.atom_brightness_spread >= 0))
    bad.push_back({"atom_brightness_spread", "must be non-negative"});
  if (!(cfg.transmission_drift >= 0))
    bad.push_back({"transmission_drift", "must be non-negative"});
  fraction("camera_nonuniformity", cfg.camera_nonuniformity);
  fraction("spcm_nonuniformity", cfg.spcm_nonuniformity);
  fraction("common_mode_fraction", cfg.common_mode_fraction);
  fraction("per_atom_extinction", cfg.per_atom_extinction);

  if (!(cfg.roi_min_um < cfg.roi_max_um))
    bad.push_back({"roi_min_um", "must be smaller than roi_max_um"});
  if (!(cfg.incidence_angle_deg > 0 && cfg.incidence_angle_deg < 90))
    bad.push_back({"incidence_angle_deg", "must lie in (0, 90)"});
  if (!(cfg.guided_mode_index >= 1))
    bad.push_back({"guided_mode_index", "must be >= 1"});
  if (cfg.images_per_series < 1)
    bad.push_back({"images_per_series", "must be >= 1"});
  if (cfg.reference_images < 0)
    bad.push_back({"reference_images", "must be >= 0"});
  if (cfg.frame_width < 11 || cfg.frame_height < 3)
    bad.push_back({"frame_width", "frame must be at least 11 x 3 pixels"});
  if (cfg.atom_row < 1 || cfg.atom_row >= cfg.frame_height - 1)
    bad.push_back({"atom_row", "must leave one pixel row on either side inside the frame"});
  if (cfg.upper_bound_threshold <= cfg.detection_threshold)
    bad.push_back({"upper_bound_threshold", "must exceed detection_threshold"});
  if (cfg.localization_band_rows < 1 || cfg.localization_band_rows > cfg.frame_height)
    bad.push_back({"localization_band_rows", "must lie in [1, frame_height]"});
  if (cfg.localization_frames < 1)
    bad.push_back({"localization_frames", "must be >= 1"});
  for (int f : cfg.detection_frames)
    if (f < 0 || f >= cfg.images_per_series)
    {
      bad.push_back({"detection_frames", "index " + std::to_string(f) + " outside the signal frames"});
      break;
    }

  ValidatedConfig v;
  v.cfg = cfg;
  if (bad.empty())
  {
    v.pixel_pitch_um = cfg.camera_pixel_pitch_um / cfg.magnification;
    if (cfg.roi_max_um / v.pixel_pitch_um + 2 > cfg.frame_width - 1)
      bad.push_back({"frame_width", "region of interest does not fit inside the frame"});
  }
  if (bad.empty())
  {
    // single-atom variance must exceed background plus atom shot noise
    const double excess = cfg.spcm_single_atom_sigma * cfg.spcm_single_atom_sigma -
                          cfg.spcm_bg_sigma * cfg.spcm_bg_sigma - cfg.spcm_single_atom_mean;
    if (excess <= 0)
      bad.push_back({"spcm_single_atom_sigma", "narrower than background plus shot noise"});
  }
  if (!bad.empty())
    throw InvalidConfig(std::move(bad));

  v.k0 = 2 * std::numbers::pi / cfg.excitation_wavelength;
  v.k_nf = cfg.guided_mode_index * v.k0;
  v.psf_sigma_px = cfg.psf_e_radius_um / std::numbers::sqrt2 / v.pixel_pitch_um;
  // rounding F k to integers is biased for a non-integer F, so both parameters are solved
  // against the exact moments of the rounded output
  std::tie(v.background_pixel_mean, v.excess_noise_factor) = calibrate_pixel_noise(cfg);
  // the atom row is centered vertically; horizontally the 3x3 window sits on the nearest
  // pixel, so average the captured fraction over a uniform sub-pixel offset
  const double inv = 1.0 / (v.psf_sigma_px * std::numbers::sqrt2);
  const double frac_v = std::erf(1.5 * inv);
  double frac_h = 0;
  constexpr int offsets = 200;
  for (int i = 0; i < offsets; ++i)
  {
    const double u = (i + 0.5) / offsets - 0.5;
    frac_h += 0.5 * (std::erf((1.5 - u) * inv) + std::erf((1.5 + u) * inv)) / offsets;
  }
  v.spot_flux = cfg.atom_rate_counts / (frac_h * frac_v);

  // rounding no longer pulls pixels holding an atom down, so refine the flux against the
  // rounded 3x3 sum as well
  const double bg_rounded = 9.0 * rounded_pixel_moments(v.background_pixel_mean, v.excess_noise_factor,
                                                        cfg.camera_read_noise_counts).mean;
  auto pixel_fraction = [inv](double d) { return 0.5 * (std::erf((d + 0.5) * inv) - std::erf((d - 0.5) * inv)); };
  auto rounded_signal = [&](double flux) {
    constexpr int n_offsets = 20;
    double total = 0;
    for (int i = 0; i < n_offsets; ++i)
    {
      const double u = (i + 0.5) / n_offsets - 0.5;
      for (int dc = -1; dc <= 1; ++dc)
        for (int dr = -1; dr <= 1; ++dr)
        {
          const double mu = v.background_pixel_mean + flux * pixel_fraction(dc - u) * pixel_fraction(dr);
          total += rounded_pixel_moments(mu, v.excess_noise_factor, cfg.camera_read_noise_counts).mean;
        }
    }
    return total / n_offsets - bg_rounded;
  };
  for (int iter = 0; iter < 20; ++iter)
  {
    const double miss = cfg.atom_rate_counts - rounded_signal(v.spot_flux);
    v.spot_flux += miss / (frac_h * frac_v);
    if (std::abs(miss) < 1e-9 * cfg.atom_rate_counts)
      break;
  }

  const auto [u2, u4] = loading_moments(cfg);
  v.position_u2_mean = u2;

  const double bg_var = cfg.spcm_bg_sigma * cfg.spcm_bg_sigma;
  v.spcm_bg_drift = bg_var > cfg.spcm_bg_mean
                        ? std::sqrt(bg_var - cfg.spcm_bg_mean) / cfg.spcm_bg_mean
                        : 0.0;
  const double s = cfg.spcm_single_atom_mean;
  const double var_factor =
      (cfg.spcm_single_atom_sigma * cfg.spcm_single_atom_sigma - bg_var - s) / (s * s);
  const double a = cfg.spcm_nonuniformity;
  const double ill_var = a * a * (u4 - u2 * u2);
  const double g_second_moment = (1 + var_factor) / (1 + ill_var);
  v.spcm_coupling_sigma = cfg.spcm_coupling_sigma >= 0 ? cfg.spcm_coupling_sigma
                                                       : std::sqrt(std::max(g_second_moment - 1.0, 0.0));
  return v;
}

double ValidatedConfig::camera_illumination(double position_um) const
{
  return quadratic_profile(position_um, cfg.camera_nonuniformity, position_u2_mean, cfg);
}

double ValidatedConfig::spcm_illumination(double position_um) const
{
  return quadratic_profile(position_um, cfg.spcm_nonuniformity, position_u2_mean, cfg);
}

std::string serialize_config(const ExperimentConfig& cfg)
{
  std::ostringstream out;
  out << "# nfatom experiment configuration\n";
  for (const auto& field : field_table())
  {
    out << field.name << " = ";
    std::visit(
        [&](auto member) {
          using T = std::decay_t<decltype(cfg.*member)>;
          if constexpr (std::is_same_v<T, double>)
            out << format_double(cfg.*member);
          else if constexpr (std::is_same_v<T, int>)
            out << cfg.*member;
          else
          {
            const auto& list = cfg.*member;
            for (std::size_t i = 0; i < list.size(); ++i)
              out << (i ? "," : "") << list[i];
          }
        },
        field.ref);
    out << '\n';
  }
  return out.str();
}

ExperimentConfig parse_config(const std::string& text)
{
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line))
  {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos)
      line.erase(hash);
    line = trim(line);
    if (line.empty())
      continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));

    const auto& table = field_table();
    auto it = std::find_if(table.begin(), table.end(),
                           [&](const Field& f) { return key == f.name; });
    if (it == table.end())
      throw ParseError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");

    std::visit(
        [&](auto member) {
          using T = std::decay_t<decltype(cfg.*member)>;
          if constexpr (std::is_same_v<T, double> || std::is_same_v<T, int>)
            cfg.*member = parse_number<T>(key, value);
          else
          {
            std::vector<int> list;
            std::istringstream items(value);
            std::string item;
            while (std::getline(items, item, ','))
              if (!trim(item).empty())
                list.push_back(parse_number<int>(key, trim(item)));
            cfg.*member = std::move(list);
          }
        },
        it->ref);
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path)
{
  std::ifstream in(path);
  if (!in)
    throw IoError("cannot open config file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

Grid to_grid(const Frame& frame)
{
  Grid g(frame.width, frame.height);
  std::copy(frame.counts.begin(), frame.counts.end(), g.values.begin());
  return g;
}

Frame sum_frames(std::span<const Frame> frames)
{
  if (frames.empty())
    throw EmptyInput("sum_frames: no frames");
  Frame out = frames.front();
  for (const auto& f : frames.subspan(1))
  {
    if (f.width != out.width || f.height != out.height)
      throw ShapeMismatch("sum_frames: frame dimensions differ");
    for (std::size_t i = 0; i < out.counts.size(); ++i)
      out.counts[i] += f.counts[i];
    out.exposure_s += f.exposure_s;
  }
  return out;
}

std::optional<std::int64_t> sum3x3(const Frame& frame, int col, int row)
{
  if (col < 1 || row < 1 || col >= frame.width - 1 || row >= frame.height - 1)
    return std::nullopt;
  std::int64_t total = 0;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx)
      total += frame.at(col + dx, row + dy);
  return total;
}

double GroundTruth::presence_fraction(const AtomRecord& atom, double t0, double t1)
{
  const double lo = std::max(t0, atom.load_time_s);
  const double hi = std::min(t1, atom.loss_time_s);
  return hi > lo ? (hi - lo) / (t1 - t0) : 0.0;
}

std::vector<const Frame*> ImageSeries::reference_frames() const
{
  std::vector<const Frame*> refs;
  for (const auto& f : frames)
    if (f.kind == FrameKind::reference)
      refs.push_back(&f);
  return refs;
}

namespace
{
std::uint64_t splitmix64(std::uint64_t x)
{
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
} // namespace

RandomStream::RandomStream(std::uint64_t seed, std::uint64_t stream_id)
    : mSeed(seed), mStreamId(stream_id),
      mEngine(splitmix64(splitmix64(seed) ^ splitmix64(stream_id + 0x632be59bd9b4e019ULL)))
{
}

double RandomStream::uniform()
{
  return std::uniform_real_distribution<double>(0.0, 1.0)(mEngine);
}

double RandomStream::normal(double mean, double sigma)
{
  return std::normal_distribution<double>(mean, sigma)(mEngine);
}

long RandomStream::poisson(double mean)
{
  if (mean <= 0)
    return 0;
  return std::poisson_distribution<long>(mean)(mEngine);
}

double RandomStream::exponential(double mean)
{
  if (!std::isfinite(mean))
    return std::numeric_limits<double>::infinity();
  return std::exponential_distribution<double>(1.0 / mean)(mEngine);
}

double RandomStream::clipped_unit_factor(double sigma)
{
  if (sigma <= 0)
    return 1.0;
  return std::max(0.0, 1.0 + normal(0.0, sigma));
}

} // namespace nfatom
