#include "commands.hpp"

#include "nfatom/detect.hpp"
#include "nfatom/experiments.hpp"
#include "nfatom/sim.hpp"
#include "nfatom/spectral.hpp"
#include "nfatom/stats.hpp"

#include "json.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <utility>

namespace nfatom::cli
{

namespace fs = std::filesystem;

namespace
{

constexpr const char* tool_version = "nfatom 1.0.0";

// stream-id blocks of the independent simulated data sets
constexpr std::uint64_t scatter_streams = 1ULL << 40;
constexpr std::uint64_t pair_streams = 2ULL << 40;
constexpr std::uint64_t transmission_streams = 3ULL << 40;
constexpr std::uint64_t template_streams = 4ULL << 40;
constexpr std::uint64_t phase_streams = 5ULL << 40;
constexpr std::uint64_t single_atom_streams = 6ULL << 40;
constexpr std::size_t single_atom_frames = 2000;

constexpr double count_bin_width = 10.0;
constexpr double spcm_bin_width = 5.0;
constexpr double position_bin_um = 50.0;
constexpr int isolation_cols = 5;

/// Atoms of `truth` present at some point of `frame` within isolation_cols of `col`.
std::size_t atoms_near(const ValidatedConfig& vcfg, const GroundTruth& truth, const Frame& frame, int col)
{
  return static_cast<std::size_t>(std::count_if(truth.atoms.begin(), truth.atoms.end(), [&](const auto& a) {
    return std::abs(column_of(vcfg, a.position_um) - col) <= isolation_cols &&
           GroundTruth::presence_fraction(a, frame.t_start_s, frame.t_start_s + frame.exposure_s) > 0;
  }));
}

struct ResolvedConfig
{
  ValidatedConfig vcfg;
  std::optional<fs::path> path;
  std::string hash;
};

ResolvedConfig resolve_config(const CommandOptions& opts, const fs::path& fallback_dir)
{
  ResolvedConfig rc;
  if (opts.config_path)
    rc.path = opts.config_path;
  else if (!fallback_dir.empty() && fs::exists(fallback_dir / "config.cfg"))
    rc.path = fallback_dir / "config.cfg";

  ExperimentConfig cfg;
  if (rc.path)
  {
    const std::string text = read_file(*rc.path);
    rc.hash = content_hash(text);
    cfg = parse_config(text);
  }
  rc.vcfg = validate_config(cfg);
  return rc;
}

unsigned worker_count(const CommandOptions& opts) { return opts.threads > 0 ? opts.threads : default_threads(); }

void ensure_dir(const fs::path& dir)
{
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec)
    throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

struct Manifest
{
  nlohmann::ordered_json json;

  Manifest(const std::string& command, const CommandOptions& opts, const ResolvedConfig& rc)
  {
    json["command"] = command;
    json["tool_version"] = tool_version;
    json["config"] = rc.path ? nlohmann::ordered_json(rc.path->string()) : nlohmann::ordered_json(nullptr);
    json["config_hash"] = rc.hash;
    json["seed"] = opts.seed;
    json["in_dir"] = opts.in_dir.string();
    json["out_dir"] = opts.out_dir.string();
    json["inputs"] = nlohmann::ordered_json::object();
    if (rc.path)
      json["inputs"][rc.path->filename().generic_string()] = rc.hash;
  }

  void input(const fs::path& base, const fs::path& file, const std::string& bytes)
  {
    json["inputs"][fs::relative(file, base).generic_string()] = content_hash(bytes);
  }

  void write(const fs::path& path) const { atomic_write(path, json.dump(2) + "\n"); }
};

std::string run_name(const char* prefix, std::size_t i)
{
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%05zu.nfs", prefix, i);
  return buf;
}

/// Files named <prefix>_NNNNN.nfs in `dir`, sorted, with their run numbers.
std::vector<std::pair<std::size_t, fs::path>> list_runs(const fs::path& dir, const std::string& prefix)
{
  std::vector<std::pair<std::size_t, fs::path>> runs;
  if (!fs::is_directory(dir))
    return runs;
  for (const auto& entry : fs::directory_iterator(dir))
  {
    const auto name = entry.path().filename().string();
    if (!entry.is_regular_file() || entry.path().extension() != ".nfs" || name.rfind(prefix + "_", 0) != 0)
      continue;
    const auto digits = entry.path().stem().string().substr(prefix.size() + 1);
    if (digits.empty() || !std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; }))
      continue;
    runs.emplace_back(std::stoull(digits), entry.path());
  }
  std::sort(runs.begin(), runs.end());
  return runs;
}

void check_shape(const ImageSeries& series, const ValidatedConfig& vcfg, const fs::path& file)
{
  for (const auto& f : series.frames)
    if (f.width != vcfg.cfg.frame_width || f.height != vcfg.cfg.frame_height)
      throw InputError(file.string() + ": frame size differs from the configuration");
}

/// All series under in_dir/series, hashed into the manifest.
struct SeriesSet
{
  std::vector<std::size_t> runs;
  std::vector<ImageSeries> series;
};

SeriesSet load_series(const fs::path& in_dir, const ValidatedConfig& vcfg, Manifest& manifest)
{
  const auto files = list_runs(in_dir / "series", "run");
  if (files.empty())
    throw InputError("no image series found in " + (in_dir / "series").string());
  SeriesSet set;
  for (const auto& [run, path] : files)
  {
    const std::string bytes = read_file(path);
    manifest.input(in_dir, path, bytes);
    ImageSeries s;
    try
    {
      s = decode_series(bytes);
    }
    catch (const ParseError& e)
    {
      throw InputError(path.string() + ": " + e.what());
    }
    check_shape(s, vcfg, path);
    set.runs.push_back(run);
    set.series.push_back(std::move(s));
  }
  return set;
}

/// Attaches truth.csv rows (when present) to their series.
bool attach_truth(const fs::path& in_dir, SeriesSet& set, Manifest& manifest)
{
  const auto path = in_dir / "truth.csv";
  if (!fs::exists(path))
    return false;
  const std::string text = read_file(path);
  manifest.input(in_dir, path, text);
  std::map<std::uint64_t, GroundTruth> by_run;
  for (const auto& row : parse_truth_csv(text))
    by_run[row.run].atoms.push_back(row.atom);
  for (std::size_t i = 0; i < set.series.size(); ++i)
  {
    const auto it = by_run.find(set.runs[i]);
    set.series[i].truth = it != by_run.end() ? it->second : GroundTruth{};
  }
  return true;
}

std::vector<SpcmRecord> load_spcm(const fs::path& in_dir, const std::string& name, Manifest& manifest)
{
  const auto path = in_dir / name;
  const std::string text = read_file(path);
  manifest.input(in_dir, path, text);
  return parse_spcm_csv(text);
}

void require_inputs(const std::string& key, const fs::path& in_dir, const std::vector<std::string>& needed)
{
  std::vector<std::string> missing;
  for (const auto& n : needed)
  {
    const auto p = in_dir / n;
    const bool present = n.back() == '/' ? fs::is_directory(p) && !fs::is_empty(p) : fs::exists(p);
    if (!present)
      missing.push_back(p.string());
  }
  if (missing.empty())
    return;
  std::string msg = "figures " + key + ": missing inputs (run 'simulate' first):";
  for (const auto& m : missing)
    msg += "\n  " + m;
  throw InputError(msg);
}

// Headline number against its reference value.
struct Check
{
  Check(std::string q, double v, double ref, double tol, std::string n = {})
      : quantity(std::move(q)), value(v), reference(ref), tolerance(tol), note(std::move(n))
  {
  }

  std::string quantity;
  double value;
  double reference;
  double tolerance;
  std::string note;
};

std::string report_text(const std::string& title, const std::vector<Check>& checks,
                        const std::vector<std::string>& extra = {})
{
  std::string out = title + "\n";
  char buf[512];
  std::snprintf(buf, sizeof buf, "%-44s %12s %12s %10s  %s\n", "quantity", "simulated", "reference", "tolerance",
                "within");
  out += buf;
  for (const auto& c : checks)
  {
    const bool ok = std::abs(c.value - c.reference) <= c.tolerance;
    std::snprintf(buf, sizeof buf, "%-44s %12.4f %12.4f %10.4f  %s%s%s\n", c.quantity.c_str(), c.value, c.reference,
                  c.tolerance, ok ? "yes" : "no", c.note.empty() ? "" : "  ", c.note.c_str());
    out += buf;
  }
  for (const auto& line : extra)
    out += line + "\n";
  return out;
}

std::string fmt(const char* f, auto... args)
{
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

/// Histogram plus per-bin curve columns.
std::string histogram_table(const Histogram& h, const std::vector<std::pair<std::string, std::vector<double>>>& curves)
{
  std::vector<std::string> header = {"counts_lo", "counts_hi", "entries"};
  for (const auto& c : curves)
    header.push_back(c.first);
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < h.n_bins(); ++i)
  {
    std::vector<double> row = {h.edges[i], h.edges[i + 1], h.counts[i]};
    for (const auto& c : curves)
      row.push_back(c.second[i]);
    rows.push_back(std::move(row));
  }
  return table_csv(header, rows);
}

/// A fitted curve integrated over each bin of `h` (fit amplitudes are per fit-bin width).
std::vector<double> fitted_counts(const GaussianFit& fit, const Histogram& h, double fit_bin_width)
{
  std::vector<double> out;
  for (std::size_t i = 0; i < h.n_bins(); ++i)
    out.push_back(fit.evaluate(h.center(i)) * h.width(i) / fit_bin_width);
  return out;
}

Histogram display_histogram(const std::vector<double>& values, double width)
{
  return build_histogram(values, width, std::floor(*std::min_element(values.begin(), values.end()) / width) * width);
}

struct PositionBins
{
  std::vector<double> lo;
  std::vector<std::vector<double>> values;
};

PositionBins position_bins(const ValidatedConfig& vcfg)
{
  PositionBins b;
  const double extent = vcfg.cfg.frame_width * vcfg.pixel_pitch_um;
  for (double x = 0; x < extent; x += position_bin_um)
    b.lo.push_back(x);
  b.values.resize(b.lo.size());
  return b;
}

void bin_value(PositionBins& b, double position_um, double value)
{
  if (position_um < 0)
    return;
  const auto i = static_cast<std::size_t>(position_um / position_bin_um);
  if (i < b.values.size())
    b.values[i].push_back(value);
}

std::string write_csv(const fs::path& out_dir, const std::string& name, const std::string& content)
{
  atomic_write(out_dir / name, content);
  return name;
}

// ---- figure builders -------------------------------------------------------------------

std::vector<std::string> figure_s2(const CommandOptions& opts, const ValidatedConfig& vcfg, const SeriesSet& set,
                                   const fs::path& out)
{
  const auto& cfg = vcfg.cfg;
  const auto det = detector_for_batch(vcfg, set.series);
  const auto study = conditioned_study(vcfg, set.series, det);
  RandomStream rng(opts.seed, template_streams);
  const auto cmp = compare_conditioned_model(study, count_bin_width, 200000, rng);

  std::vector<std::string> files;
  files.push_back(write_csv(out, "s2a.csv",
                            histogram_table(cmp.empirical, {{"model", cmp.quadrature.counts},
                                                            {"model_mc", cmp.monte_carlo.counts}})));
  const auto hb = display_histogram(study.reference_sums, count_bin_width);
  files.push_back(write_csv(out, "s2b.csv", histogram_table(hb, {{"gaussian_fit", fitted_counts(study.reference_fit, hb, 2.0)}})));
  const auto hc = display_histogram(study.confirmed_sums, count_bin_width);
  files.push_back(write_csv(out, "s2c.csv", histogram_table(hc, {{"gaussian_fit", fitted_counts(study.confirmed_fit, hc, 5.0)}})));

  auto comps = study.next_fit.components;
  std::sort(comps.begin(), comps.end(), [](const auto& a, const auto& b) { return a.mean < b.mean; });
  const double full = cfg.background_mean_counts + cfg.atom_rate_counts;
  const std::vector<Check> checks = {
      {"S2(a) left peak mean", comps.front().mean, cfg.background_mean_counts, 3.0, "measured 38.8"},
      {"S2(a) right peak mean", comps.back().mean, full, 0.05 * full, "measured 146.9"},
      {"S2(b) background mean", study.reference_fit.components[0].mean, 35.2, 3.0, "measured 35.2(2)"},
      {"S2(b) background sigma", study.reference_fit.components[0].sigma, 10.5, 1.05},
      {"S2(c) mean", study.confirmed_fit.components[0].mean, full, 0.05 * full},
      {"model vs S2(a), total variation", cmp.tv_distance, 0.0, 0.05},
      {"model quadrature vs Monte Carlo, max SE", cmp.max_mc_deviation, 0.0, 3.0},
      {"undetected due to loss", study.undetected_loss_fraction, 0.06, 0.015, "measured ~6 %"},
      {"detected then lost", study.detected_then_lost_fraction, 0.08, 0.015, "measured ~8 %"},
      {"lost during an image", study.lost_fraction, 1.0 - std::exp(-cfg.integration_time_s / cfg.trap_lifetime_s),
       0.01},
  };
  files.push_back(write_csv(out, "report_s2.txt",
                            report_text("Figure s2: conditioned 3x3 photon-count histograms", checks,
                                        {fmt("series %zu, S2(a) entries %zu, S2(c) entries %zu, p_false %.4f",
                                             set.series.size(), study.next_sums.size(), study.confirmed_sums.size(),
                                             study.p_false)})));
  return files;
}

std::vector<std::string> figure_s3(const ValidatedConfig& vcfg, const SeriesSet& set, const CommandOptions& opts)
{
  const auto& out = opts.out_dir;
  const auto det = detector_for_batch(vcfg, set.series);
  const auto study = conditioned_study(vcfg, set.series, det);
  const double scale = vcfg.cfg.threshold_scale;

  // peak values of the doubly-conditioned images, in reference-analysis units
  std::vector<double> peaks;
  for (double v : study.confirmed_peaks)
    peaks.push_back(v / scale);
  std::vector<double> grid;
  for (int i = 0; i <= 200; ++i)
    grid.push_back(0.5 * i);
  const auto sweep = threshold_sweep(peaks, grid);
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < grid.size(); ++i)
    rows.push_back({grid[i], sweep.survival[i], sweep.model_survival(grid[i])});

  std::vector<Frame> refs;
  for (const auto& s : set.series)
    for (const Frame* f : s.reference_frames())
      refs.push_back(*f);
  const auto fd = false_detection_study(vcfg, refs, det);
  std::vector<std::vector<double>> rows_b;
  for (std::size_t i = 0; i < fd.curve.thresholds.size(); ++i)
    rows_b.push_back({fd.curve.thresholds[i], fd.curve.mean_per_image[i], fd.curve.p_at_least_one[i]});

  // atoms trapped through a whole image with no neighbours, read out at their own position
  const auto single = single_atom_study(vcfg, det, opts.seed ^ single_atom_streams, single_atom_frames,
                                        worker_count(opts));

  const double op = vcfg.cfg.detection_threshold;
  std::vector<std::string> files;
  files.push_back(write_csv(out, "s3a.csv", table_csv({"threshold", "fraction_above", "model"}, rows)));
  files.push_back(write_csv(out, "s3b.csv", table_csv({"threshold", "false_per_image", "p_at_least_one"}, rows_b)));
  const std::vector<Check> checks = {
      {"single-atom detection probability", sweep.detection_probability(op), 0.977, 0.015, "measured ~97.7 %"},
      {"... isolated atoms, simulated frames", single.fitted_detection, 0.977, 0.015},
      {"P(>=1 false detection)", fd.p_at_operating, 0.07, 0.02, "measured ~7 %"},
  };
  files.push_back(write_csv(
      out, "report_s3.txt",
      report_text("Figure s3: detection probability and false detections vs threshold", checks,
                  {fmt("operating threshold %.1f, fitted two-atom weight %.4f, single mean %.2f sigma %.2f", op,
                       sweep.two_atom_weight, sweep.single_mean, sweep.single_sigma),
                   fmt("false detections vanish from threshold %.1f (measured: >= 34), largest candidate %.2f",
                       fd.zero_threshold, fd.max_peak),
                   fmt("reference frames %zu, doubly-conditioned peaks %zu", refs.size(), peaks.size())})));
  return files;
}

std::vector<std::string> figure_s4(const ValidatedConfig& vcfg, const SeriesSet& set,
                                   const std::vector<SpcmRecord>& spcm, const fs::path& out)
{
  const auto& cfg = vcfg.cfg;
  const auto det = detector_for_batch(vcfg, set.series);

  PositionBins spcm_bins = position_bins(vcfg);
  std::vector<double> spcm_bg;
  for (const auto& r : spcm)
  {
    if (r.mode != SpcmMode::scatter_into_fiber)
      continue;
    if (r.n_atoms_true == 0)
      spcm_bg.push_back(static_cast<double>(r.detected_counts));
    else if (r.n_atoms_true == 1 && !r.atom_positions_um.empty())
      bin_value(spcm_bins, r.atom_positions_um[0], static_cast<double>(r.detected_counts));
  }

  PositionBins camera_bins = position_bins(vcfg);
  PositionBins isolated_bins = position_bins(vcfg);
  PositionBins detected = position_bins(vcfg);
  std::vector<double> camera_bg;
  for (std::size_t i = 0; i < set.series.size(); ++i)
  {
    const auto& series = set.series[i];
    const auto tracking = track_series(series, det, cfg.detection_frames, static_cast<int>(i));
    for (const auto& atom : tracking.atoms)
    {
      const double pos = atom.pixel_col * vcfg.pixel_pitch_um;
      bin_value(detected, pos, 1.0);
      const auto raw = atom.raw_3x3[static_cast<std::size_t>(atom.detection_frame)];
      if (raw < 0)
        continue;
      bin_value(camera_bins, pos, static_cast<double>(raw));
      const auto& frame = series.frames[static_cast<std::size_t>(atom.detection_frame)];
      if (series.truth && atoms_near(vcfg, *series.truth, frame, atom.pixel_col) == 1)
        bin_value(isolated_bins, pos, static_cast<double>(raw));
    }
    for (const Frame* ref : series.reference_frames())
      for (int c = 1; c + 1 < ref->width; c += 3)
        if (const auto s = sum3x3(*ref, c, cfg.atom_row))
          camera_bg.push_back(static_cast<double>(*s));
  }

  auto per_bin = [](const PositionBins& b) {
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < b.lo.size(); ++i)
    {
      const auto& v = b.values[i];
      const double n = static_cast<double>(v.size());
      const double m = v.empty() ? std::nan("") : mean(v);
      const double sem = v.size() > 1 ? sample_stddev(v) / std::sqrt(n) : std::nan("");
      rows.push_back({b.lo[i], b.lo[i] + position_bin_um, n, m, sem});
    }
    return rows;
  };
  const auto rows_a = per_bin(spcm_bins);
  const auto rows_b = per_bin(camera_bins);
  std::vector<std::vector<double>> rows_c;
  for (std::size_t i = 0; i < detected.lo.size(); ++i)
    rows_c.push_back({detected.lo[i], detected.lo[i] + position_bin_um, static_cast<double>(detected.values[i].size())});

  // spread of the background-subtracted per-atom signal over bins centered in the ROI
  auto variation = [&](const std::vector<std::vector<double>>& rows, double bg) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo, sum = 0;
    int n = 0;
    for (const auto& r : rows)
    {
      const double center = 0.5 * (r[0] + r[1]);
      if (center < cfg.roi_min_um || center > cfg.roi_max_um || r[2] < 20)
        continue;
      const double s = r[3] - bg;
      lo = std::min(lo, s);
      hi = std::max(hi, s);
      sum += s;
      ++n;
    }
    return n > 0 ? (hi - lo) / (sum / n) : std::nan("");
  };
  const double spcm_bg_mean = spcm_bg.empty() ? cfg.spcm_bg_mean : mean(spcm_bg);
  const double camera_bg_mean = camera_bg.empty() ? cfg.background_mean_counts : mean(camera_bg);

  const std::vector<std::string> header = {"pos_lo_um", "pos_hi_um", "n", "mean_counts", "sem"};
  std::vector<std::string> files;
  files.push_back(write_csv(out, "s4a.csv", table_csv(header, rows_a)));
  files.push_back(write_csv(out, "s4b.csv", table_csv(header, rows_b)));
  files.push_back(write_csv(out, "s4c.csv", table_csv({"pos_lo_um", "pos_hi_um", "detected_atoms"}, rows_c)));
  const std::vector<Check> checks = {
      {"photon-counter signal variation in ROI", variation(rows_a, spcm_bg_mean), 0.05, 0.05, "measured ~5 %"},
      {"camera signal variation in ROI", variation(rows_b, camera_bg_mean), 0.20, 0.10, "measured ~20 %"},
  };
  std::vector<std::string> notes = {
      fmt("background levels: photon counter %.2f, camera 3x3 %.2f", spcm_bg_mean, camera_bg_mean),
      fmt("region of interest %.0f-%.0f um, %.0f um bins", cfg.roi_min_um, cfg.roi_max_um, position_bin_um)};
  const auto rows_iso = per_bin(isolated_bins);
  if (std::any_of(rows_iso.begin(), rows_iso.end(), [](const auto& r) { return r[2] > 0; }))
    notes.push_back(fmt("camera variation for atoms with no other atom within %d columns: %.4f "
                        "(illumination peak-to-valley %.2f)",
                        isolation_cols, variation(rows_iso, camera_bg_mean), cfg.camera_nonuniformity));
  files.push_back(write_csv(out, "report_s4.txt",
                            report_text("Figure s4: position dependence of single-atom signals", checks, notes)));
  return files;
}

std::vector<std::string> figure_s5(const CommandOptions& opts, const ValidatedConfig& vcfg, const fs::path& out)
{
  const std::size_t n_pairs = 100000;
  const auto study = phase_study(vcfg, opts.seed ^ phase_streams, n_pairs, 20);
  const double expected = static_cast<double>(n_pairs) / 20.0;
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < study.histogram.n_bins(); ++i)
    rows.push_back({study.histogram.edges[i], study.histogram.edges[i + 1], study.histogram.counts[i], expected});
  std::vector<std::string> files;
  files.push_back(write_csv(out, "s5.csv", table_csv({"phase_lo_rad", "phase_hi_rad", "pairs", "flat"}, rows)));
  const auto geom = InterferenceGeometry::from_config(vcfg);
  files.push_back(write_csv(
      out, "report_s5.txt",
      report_text("Figure s5: relative phases of atom pairs", {},
                  {fmt("pairs %zu, bins 20, chi-square vs flat %.2f on 19 dof, p = %.4f (flat accepted at 1 %%: %s)",
                       n_pairs, study.chi2, study.p_value, study.p_value > 0.01 ? "yes" : "no"),
                   fmt("phase increment per site %.4f rad, Bragg angle %.1f deg (measured: about 35 deg)",
                       phase_increment(geom), geom.bragg_angle() * 180.0 / std::numbers::pi)})));
  return files;
}

std::vector<std::string> figure_fig2(const std::vector<SpcmRecord>& records, const fs::path& out)
{
  std::vector<TransmissionGroup> groups(4);
  for (int n = 0; n < 4; ++n)
    groups[static_cast<std::size_t>(n)].n_atoms = n;
  for (const auto& r : records)
    if (r.mode == SpcmMode::transmission && r.n_atoms_true >= 0 && r.n_atoms_true <= 3)
      groups[static_cast<std::size_t>(r.n_atoms_true)].counts.push_back(static_cast<double>(r.detected_counts));
  const auto res = beer_lambert_analysis(groups);

  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& g : groups)
    for (double x : g.counts)
    {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  const double width = 20.0;
  const auto edges = regular_edges(std::floor(lo / width) * width, (std::floor(hi / width) + 1) * width, width);
  std::vector<Histogram> hists;
  for (const auto& g : groups)
    hists.push_back(build_histogram_edges(g.counts, edges));
  std::vector<std::vector<double>> rows_a;
  for (std::size_t i = 0; i + 1 < edges.size(); ++i)
    rows_a.push_back({edges[i], edges[i + 1], hists[0].counts[i], hists[1].counts[i], hists[2].counts[i],
                      hists[3].counts[i]});
  std::vector<std::vector<double>> rows_b, rows_c;
  for (std::size_t n = 0; n < 4; ++n)
    rows_b.push_back({static_cast<double>(n), res.mean[n], res.mean_err[n]});
  for (std::size_t i = 0; i < 3; ++i)
    rows_c.push_back({static_cast<double>(i + 1), res.extinction[i], res.extinction_err[i]});

  std::vector<std::string> files;
  files.push_back(write_csv(out, "fig2a.csv",
                            table_csv({"counts_lo", "counts_hi", "atoms_0", "atoms_1", "atoms_2", "atoms_3"}, rows_a)));
  files.push_back(write_csv(out, "fig2b.csv", table_csv({"n_atoms", "mean_counts", "sem"}, rows_b)));
  files.push_back(write_csv(out, "fig2c.csv", table_csv({"atom", "extinction", "extinction_err"}, rows_c)));
  const double measured[3] = {0.039, 0.039, 0.043};
  std::vector<Check> checks;
  for (std::size_t i = 0; i < 3; ++i)
    checks.push_back({fmt("extinction added by atom %zu", i + 1), res.extinction[i], 0.04,
                      3 * res.extinction_err[i], fmt("measured %.3f", measured[i])});
  files.push_back(write_csv(out, "report_fig2.txt",
                            report_text("Figure fig2: guided-probe transmission vs atom number", checks,
                                        {fmt("constant extinction %.4f +- %.4f, chi-square %.2f on %d dof, p = %.3f",
                                             res.fitted_extinction, res.fitted_extinction_err, res.chi2, res.dof,
                                             res.p_value)})));
  return files;
}

struct PairFiles
{
  std::vector<std::size_t> runs;
  std::vector<std::string> bytes;
};

PairFiles load_pair_files(const fs::path& in_dir, Manifest& manifest)
{
  PairFiles pf;
  for (const auto& [run, path] : list_runs(in_dir / "pairs", "pair"))
  {
    pf.runs.push_back(run);
    pf.bytes.push_back(read_file(path));
    manifest.input(in_dir, path, pf.bytes.back());
  }
  return pf;
}

std::vector<std::string> figure_fig3(const CommandOptions& opts, const ValidatedConfig& vcfg, const SeriesSet& set,
                                     const std::vector<SpcmRecord>& records, const PairFiles& pair_files,
                                     const fs::path& out)
{
  std::vector<double> zero, one;
  std::map<std::uint64_t, double> two_counts;
  for (const auto& r : records)
  {
    if (r.mode != SpcmMode::scatter_into_fiber)
      continue;
    const auto c = static_cast<double>(r.detected_counts);
    if (r.n_atoms_true == 0)
      zero.push_back(c);
    else if (r.n_atoms_true == 1)
      one.push_back(c);
    else if (r.n_atoms_true == 2)
      two_counts[r.run_id] = c;
  }
  if (zero.size() < 10 || one.size() < 10 || two_counts.size() < 10)
    throw InputError("figures fig3: too few photon-counter records");

  const auto h0 = build_histogram(zero, spcm_bin_width);
  const auto h1 = build_histogram(one, spcm_bin_width);
  const auto fit0 = fit_gaussian_mixture(h0, 1);
  const auto fit1 = fit_gaussian_mixture(h1, 1);

  std::vector<double> two;
  for (const auto& [run, c] : two_counts)
    two.push_back(c);
  RandomStream rng(opts.seed, template_streams);
  const std::size_t n_template = 100000;
  const auto common = sample_two_atom_scatter(vcfg, FluctuationMode::common, n_template, rng);
  const auto differential = sample_two_atom_scatter(vcfg, FluctuationMode::differential, n_template, rng);
  const auto incoherent = sample_two_atom_scatter(vcfg, FluctuationMode::incoherent, n_template, rng);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const std::vector<double>* v : {&std::as_const(two), &common, &differential, &incoherent})
    for (double x : *v)
    {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  const auto edges = regular_edges(std::floor(lo / spcm_bin_width) * spcm_bin_width,
                                   (std::floor(hi / spcm_bin_width) + 1) * spcm_bin_width, spcm_bin_width);
  const auto h2 = build_histogram_edges(two, edges);
  const auto tc = build_histogram_edges(common, edges);
  const auto td = build_histogram_edges(differential, edges);
  const auto ti = build_histogram_edges(incoherent, edges);
  const auto mix = fit_mode_mixture(h2, tc, td);
  auto scaled = [&](const Histogram& t) {
    std::vector<double> v;
    for (double c : t.counts)
      v.push_back(c * h2.n_total / t.n_total);
    return v;
  };
  std::vector<double> model;
  const auto sc = scaled(tc), sd = scaled(td);
  for (std::size_t i = 0; i < sc.size(); ++i)
    model.push_back(mix.common_fraction * sc[i] + (1 - mix.common_fraction) * sd[i]);

  // panel (d): detection and localization on the pair images, counts from the same runs
  const auto det = detector_for_batch(vcfg, set.series);
  std::vector<PairRunAnalysis> runs(pair_files.bytes.size());
  parallel_for(runs.size(), worker_count(opts), [&](std::size_t i) {
    const auto series = decode_series(pair_files.bytes[i]);
    runs[i] = analyze_pair_run(vcfg, det, series.frames);
  });
  std::vector<SeparationSample> samples;
  std::size_t upper = 0, fit_rejected = 0;
  for (std::size_t i = 0; i < runs.size(); ++i)
  {
    upper += runs[i].outcome == PairOutcome::upper_bound ? 1 : 0;
    fit_rejected += runs[i].outcome == PairOutcome::fit_rejected ? 1 : 0;
    const auto it = two_counts.find(pair_files.runs[i]);
    if (runs[i].outcome == PairOutcome::accepted && it != two_counts.end())
      samples.push_back({runs[i].fit.separation_um, it->second});
  }
  if (samples.size() < 50)
    throw InputError(fmt("figures fig3: only %zu accepted pair runs, need at least 50 (simulate more runs)",
                         samples.size()));
  const auto spectrum = periodogram(samples, linear_grid(0.02, 1.0, 1961));
  std::vector<std::vector<double>> rows_d;
  for (std::size_t i = 0; i < spectrum.frequencies.size(); ++i)
    rows_d.push_back({spectrum.frequencies[i], spectrum.power[i]});

  std::vector<std::string> files;
  files.push_back(write_csv(out, "fig3a.csv", histogram_table(h0, {{"gaussian_fit", fitted_counts(fit0, h0, spcm_bin_width)}})));
  files.push_back(write_csv(out, "fig3b.csv", histogram_table(h1, {{"gaussian_fit", fitted_counts(fit1, h1, spcm_bin_width)}})));
  files.push_back(write_csv(out, "fig3c.csv",
                            histogram_table(h2, {{"common", sc}, {"differential", sd}, {"incoherent", scaled(ti)},
                                                 {"mixture", model}})));
  files.push_back(write_csv(out, "fig3d.csv", table_csv({"freq_per_um", "power"}, rows_d)));

  const auto geom = InterferenceGeometry::from_config(vcfg);
  const double alias = alias_frequency(geom);
  const auto& z = fit0.components[0];
  const auto& o = fit1.components[0];
  const std::vector<Check> checks = {
      {"0 atoms: mean", z.mean, 309.63, 0.02 * 309.63},
      {"0 atoms: sigma", z.sigma, 18.89, 0.10 * 18.89},
      {"1 atom: mean", o.mean, 345.8, 0.02 * 345.8},
      {"1 atom: sigma", o.sigma, 30.9, 0.10 * 30.9},
      {"2 atoms: common-mode weight", mix.common_fraction, vcfg.cfg.common_mode_fraction, 0.05, "measured 0.71"},
      {"spectral peak (1/um)", spectrum.peak.frequency, alias, 0.01, "measured 0.269(3)"},
  };
  files.push_back(write_csv(
      out, "report_fig3.txt",
      report_text("Figure fig3: photon-counter histograms and interference spectrum", checks,
                  {fmt("alias frequency %.4f 1/um, peak %.4f +- %.4f, width %.4f", alias, spectrum.peak.frequency,
                       spectrum.peak.uncertainty, spectrum.peak.width),
                   fmt("pair runs %zu: upper bound rejected %zu, fit rejected %zu, accepted %zu", runs.size(), upper,
                       fit_rejected, samples.size())})));
  return files;
}

} // namespace

std::size_t effective_runs(const CommandOptions& opts)
{
  if (opts.runs)
    return *opts.runs;
  return opts.paper_scale ? paper_scale_runs : desk_scale_runs;
}

void cmd_simulate(const CommandOptions& opts)
{
  const auto rc = resolve_config(opts, {});
  const auto& vcfg = rc.vcfg;
  const std::size_t n = effective_runs(opts);
  const unsigned threads = worker_count(opts);

  ensure_dir(opts.out_dir);
  Manifest manifest("simulate", opts, rc);
  manifest.json["runs"] = n;
  manifest.json["encoding"] = opts.encoding == SeriesEncoding::le16 ? "le16" : "ascii";
  manifest.write(opts.out_dir / "manifest.json");
  if (n == 0)
    return;

  atomic_write(opts.out_dir / "config.cfg", serialize_config(vcfg.cfg));
  ensure_dir(opts.out_dir / "series");
  ensure_dir(opts.out_dir / "pairs");

  // image series with loading and loss
  std::vector<GroundTruth> truths(n);
  parallel_for(n, threads, [&](std::size_t i) {
    RandomStream rng(opts.seed, i);
    const auto series = render_series(vcfg, rng);
    truths[i] = *series.truth;
    write_series(opts.out_dir / "series" / run_name("run", i), series, opts.encoding);
  });
  std::vector<TruthRow> truth_rows;
  for (std::size_t i = 0; i < n; ++i)
    for (const auto& a : truths[i].atoms)
      truth_rows.push_back({i, a});
  atomic_write(opts.out_dir / "truth.csv", truth_csv(truth_rows));

  // photon counter, external excitation: n runs each with 0, 1 and 2 atoms; every two-atom
  // run also has its localization images
  std::vector<SpcmRecord> scatter(3 * n);
  std::vector<TruthRow> pair_truth_rows;
  std::vector<GroundTruth> pair_truths(n);
  parallel_for(3 * n, threads, [&](std::size_t k) {
    const std::size_t atoms = k / n, i = k % n;
    if (atoms < 2)
    {
      RandomStream rng(opts.seed, scatter_streams + k);
      std::vector<double> positions;
      if (atoms == 1)
        positions.push_back(sample_ground_truth_n(vcfg, 1, rng, false).atoms[0].position_um);
      scatter[k] = simulate_spcm_scatter(positions, vcfg, rng, i);
      return;
    }
    RandomStream rng(opts.seed, pair_streams + i);
    const auto pair = simulate_pair_image(vcfg, rng, vcfg.cfg.localization_frames);
    scatter[k] = simulate_spcm_scatter({pair.truth.atoms[0].position_um, pair.truth.atoms[1].position_um}, vcfg, rng,
                                       i);
    pair_truths[i] = pair.truth;
    ImageSeries series;
    series.frames = pair.frames;
    series.config_snapshot = vcfg.cfg;
    write_series(opts.out_dir / "pairs" / run_name("pair", i), series, opts.encoding);
  });
  for (std::size_t i = 0; i < n; ++i)
    for (const auto& a : pair_truths[i].atoms)
      pair_truth_rows.push_back({i, a});
  atomic_write(opts.out_dir / "pairs_truth.csv", truth_csv(pair_truth_rows));
  atomic_write(opts.out_dir / "spcm_scatter.csv", spcm_csv(scatter));

  // photon counter, guided probe: n runs for each of 0..3 atoms
  std::vector<SpcmRecord> transmission(4 * n);
  parallel_for(4 * n, threads, [&](std::size_t k) {
    RandomStream rng(opts.seed, transmission_streams + k);
    transmission[k] = simulate_spcm_transmission(static_cast<int>(k / n), vcfg, rng, k % n);
  });
  atomic_write(opts.out_dir / "spcm_transmission.csv", spcm_csv(transmission));
}

DetectSummary cmd_detect(const CommandOptions& opts)
{
  if (opts.in_dir.empty() || !fs::is_directory(opts.in_dir))
    throw InputError("input directory '" + opts.in_dir.string() + "' does not exist");
  const auto rc = resolve_config(opts, opts.in_dir);
  const auto& vcfg = rc.vcfg;
  const auto& cfg = vcfg.cfg;

  Manifest manifest("detect", opts, rc);
  if (opts.threshold)
    manifest.json["threshold"] = *opts.threshold;
  auto set = load_series(opts.in_dir, vcfg, manifest);
  const bool has_truth = attach_truth(opts.in_dir, set, manifest);
  ensure_dir(opts.out_dir);
  manifest.write(opts.out_dir / "manifest.json");

  std::vector<const Frame*> refs;
  for (const auto& s : set.series)
    for (const Frame* f : s.reference_frames())
      refs.push_back(f);
  const auto det = make_detector(vcfg, background_template(refs), opts.threshold);

  struct PerSeries
  {
    std::vector<DetectionRow> detections;
    std::vector<TrackedAtom> tracked;
    std::optional<PairRow> pair;
    std::size_t refs = 0, refs_with_event = 0, false_events = 0;
    std::size_t truth_atoms = 0, truth_detected = 0;
    std::size_t isolated_atoms = 0, isolated_detected = 0;
  };
  std::vector<PerSeries> results(set.series.size());
  parallel_for(set.series.size(), worker_count(opts), [&](std::size_t i) {
    const auto& series = set.series[i];
    const int id = static_cast<int>(set.runs[i]);
    auto& r = results[i];
    for (std::size_t k = 0; k < series.frames.size(); ++k)
    {
      const Frame& frame = series.frames[k];
      const auto events = detect_in_frame(frame, det, static_cast<int>(k));
      if (frame.kind == FrameKind::reference)
      {
        const auto in_roi = std::count_if(events.begin(), events.end(), [](const auto& e) { return e.in_roi; });
        ++r.refs;
        r.refs_with_event += in_roi > 0 ? 1 : 0;
        r.false_events += static_cast<std::size_t>(in_roi);
        continue;
      }
      for (const auto& e : events)
        r.detections.push_back({id, e, e.in_roi && !e.above_upper_bound});

      const bool detection_frame =
          std::find(cfg.detection_frames.begin(), cfg.detection_frames.end(), static_cast<int>(k)) !=
          cfg.detection_frames.end();
      if (detection_frame && series.truth)
        for (const auto& atom : series.truth->atoms)
        {
          const int col = column_of(vcfg, atom.position_um);
          if (!det.in_roi(col) || GroundTruth::presence_fraction(atom, frame.t_start_s,
                                                                  frame.t_start_s + frame.exposure_s) < 1.0)
            continue;
          const bool hit = std::any_of(events.begin(), events.end(),
                                       [col](const auto& e) { return e.in_roi && std::abs(e.pixel_col - col) <= 1; });
          ++r.truth_atoms;
          r.truth_detected += hit ? 1 : 0;
          if (atoms_near(vcfg, *series.truth, frame, col) == 1)
          {
            ++r.isolated_atoms;
            r.isolated_detected += hit ? 1 : 0;
          }
        }
    }
    r.tracked = track_series(series, det, cfg.detection_frames, id).atoms;

    const auto n_loc = std::min<std::size_t>(static_cast<std::size_t>(cfg.localization_frames),
                                             series.frames.size() - series.reference_frames().size());
    if (n_loc > 0)
    {
      const auto run = analyze_pair_run(vcfg, det, std::span<const Frame>(series.frames.data(), n_loc));
      if (run.outcome == PairOutcome::accepted || run.outcome == PairOutcome::fit_rejected)
        r.pair = PairRow{id, run.fit};
    }
  });

  DetectSummary summary;
  summary.n_series = set.series.size();
  std::vector<DetectionRow> detections;
  std::vector<TrackedAtom> tracked;
  std::vector<PairRow> pairs;
  std::size_t refs_with_event = 0, false_events = 0, truth_detected = 0, isolated_atoms = 0, isolated_detected = 0;
  for (auto& r : results)
  {
    for (const auto& d : r.detections)
    {
      ++summary.n_events;
      summary.n_accepted += d.accepted ? 1 : 0;
    }
    detections.insert(detections.end(), r.detections.begin(), r.detections.end());
    tracked.insert(tracked.end(), r.tracked.begin(), r.tracked.end());
    if (r.pair)
    {
      ++summary.n_pairs;
      summary.n_pairs_accepted += r.pair->pair.accepted ? 1 : 0;
      pairs.push_back(*r.pair);
    }
    summary.n_reference_frames += r.refs;
    refs_with_event += r.refs_with_event;
    false_events += r.false_events;
    summary.n_truth_atoms += r.truth_atoms;
    truth_detected += r.truth_detected;
    isolated_atoms += r.isolated_atoms;
    isolated_detected += r.isolated_detected;
  }
  if (summary.n_reference_frames > 0)
  {
    summary.false_rate = static_cast<double>(refs_with_event) / static_cast<double>(summary.n_reference_frames);
    summary.false_per_image = static_cast<double>(false_events) / static_cast<double>(summary.n_reference_frames);
  }
  if (has_truth && summary.n_truth_atoms > 0)
    summary.detection_probability =
        static_cast<double>(truth_detected) / static_cast<double>(summary.n_truth_atoms);
  if (has_truth && isolated_atoms > 0)
    summary.isolated_detection_probability =
        static_cast<double>(isolated_detected) / static_cast<double>(isolated_atoms);

  atomic_write(opts.out_dir / "detections.csv", detections_csv(detections));
  atomic_write(opts.out_dir / "tracked.csv", tracked_csv(tracked));
  atomic_write(opts.out_dir / "pairs.csv", pairs_csv(pairs));

  std::string text;
  text += fmt("series = %zu\n", summary.n_series);
  text += fmt("threshold = %.4g\n", opts.threshold.value_or(cfg.detection_threshold));
  text += fmt("events = %zu\n", summary.n_events);
  text += fmt("accepted_events = %zu\n", summary.n_accepted);
  text += fmt("reference_frames = %zu\n", summary.n_reference_frames);
  text += fmt("false_rate = %.6f\n", summary.false_rate);
  text += fmt("false_per_image = %.6f\n", summary.false_per_image);
  if (summary.detection_probability)
  {
    text += fmt("truth_atoms = %zu\n", summary.n_truth_atoms);
    text += fmt("detection_probability = %.6f\n", *summary.detection_probability);
  }
  if (summary.isolated_detection_probability)
    text += fmt("isolated_detection_probability = %.6f\n", *summary.isolated_detection_probability);
  text += fmt("pairs_localized = %zu\n", summary.n_pairs);
  text += fmt("pairs_accepted = %zu\n", summary.n_pairs_accepted);
  atomic_write(opts.out_dir / "summary.txt", text);
  return summary;
}

const std::vector<std::string>& figure_keys()
{
  static const std::vector<std::string> keys = {"s2", "s3", "s4", "s5", "fig2", "fig3"};
  return keys;
}

std::vector<std::string> cmd_figures(const std::string& key, const CommandOptions& opts)
{
  const auto& keys = figure_keys();
  if (std::find(keys.begin(), keys.end(), key) == keys.end())
    throw InputError("unknown figure key '" + key + "'");

  const std::map<std::string, std::vector<std::string>> needs = {
      {"s2", {"series/", "truth.csv"}},
      {"s3", {"series/"}},
      {"s4", {"series/", "spcm_scatter.csv"}},
      {"s5", {}},
      {"fig2", {"spcm_transmission.csv"}},
      {"fig3", {"series/", "pairs/", "spcm_scatter.csv"}},
  };
  const auto& needed = needs.at(key);
  if (!needed.empty())
  {
    if (opts.in_dir.empty())
      throw InputError("figures " + key + ": --in is required");
    require_inputs(key, opts.in_dir, needed);
  }

  const auto rc = resolve_config(opts, opts.in_dir);
  const auto& vcfg = rc.vcfg;
  Manifest manifest("figures " + key, opts, rc);
  SeriesSet set;
  std::vector<SpcmRecord> spcm;
  const auto uses = [&](const std::string& n) { return std::find(needed.begin(), needed.end(), n) != needed.end(); };
  if (uses("series/"))
    set = load_series(opts.in_dir, vcfg, manifest);
  if (uses("spcm_scatter.csv"))
    spcm = load_spcm(opts.in_dir, "spcm_scatter.csv", manifest);
  if (uses("spcm_transmission.csv"))
    spcm = load_spcm(opts.in_dir, "spcm_transmission.csv", manifest);
  // the truth is optional for s4, where it only adds the isolated-atom note
  if (uses("truth.csv") || key == "s4")
    attach_truth(opts.in_dir, set, manifest);

  PairFiles pair_files;
  if (uses("pairs/"))
    pair_files = load_pair_files(opts.in_dir, manifest);

  ensure_dir(opts.out_dir);
  manifest.write(opts.out_dir / ("manifest_" + key + ".json"));
  if (key == "fig3")
    return figure_fig3(opts, vcfg, set, spcm, pair_files, opts.out_dir);
  if (key == "s2")
    return figure_s2(opts, vcfg, set, opts.out_dir);
  if (key == "s3")
    return figure_s3(vcfg, set, opts);
  if (key == "s4")
    return figure_s4(vcfg, set, spcm, opts.out_dir);
  if (key == "s5")
    return figure_s5(opts, vcfg, opts.out_dir);
  return figure_fig2(spcm, opts.out_dir);
}

int exit_code_for(const std::exception& e)
{
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e))
    return 3;
  if (dynamic_cast<const Error*>(&e) || dynamic_cast<const std::invalid_argument*>(&e) ||
      dynamic_cast<const nlohmann::json::exception*>(&e))
    return 2;
  return 1;
}

} // namespace nfatom::cli
