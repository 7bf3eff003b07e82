#include "nfatom/experiments.hpp"

#include "nfatom/io.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

namespace nfatom
{

namespace
{

constexpr double fit_bin_width = 5.0;
constexpr double reference_bin_width = 2.0;

bool event_near(const std::vector<DetectionEvent>& events, int col)
{
  return std::any_of(events.begin(), events.end(),
                     [col](const DetectionEvent& e) { return e.in_roi && std::abs(e.pixel_col - col) <= 1; });
}

} // namespace

std::vector<ImageSeries> simulate_series_batch(const ValidatedConfig& vcfg, std::uint64_t seed, std::size_t n_runs,
                                               unsigned threads)
{
  std::vector<ImageSeries> batch(n_runs);
  parallel_for(n_runs, threads, [&](std::size_t i) {
    RandomStream rng(seed, i);
    batch[i] = render_series(vcfg, rng);
  });
  return batch;
}

std::vector<Frame> simulate_reference_frames(const ValidatedConfig& vcfg, std::uint64_t seed, std::size_t n_frames,
                                             unsigned threads)
{
  std::vector<Frame> frames(n_frames);
  const GroundTruth empty;
  parallel_for(n_frames, threads, [&](std::size_t i) {
    RandomStream rng(seed, i);
    frames[i] = render_frame(empty, vcfg, 0.0, vcfg.cfg.integration_time_s, rng, FrameKind::reference);
  });
  return frames;
}

DetectorParams detector_for_batch(const ValidatedConfig& vcfg, const std::vector<ImageSeries>& batch)
{
  std::vector<const Frame*> refs;
  for (const auto& s : batch)
    for (const Frame* f : s.reference_frames())
      refs.push_back(f);
  return make_detector(vcfg, background_template(refs));
}

int column_of(const ValidatedConfig& vcfg, double position_um)
{
  return static_cast<int>(std::lround(position_um / vcfg.pixel_pitch_um));
}

ConditionedStudy conditioned_study(const ValidatedConfig& vcfg, const std::vector<ImageSeries>& batch,
                                   const DetectorParams& det)
{
  const auto& cfg = vcfg.cfg;
  ConditionedStudy study;
  std::size_t lost = 0, undetected = 0, detected_lost = 0;
  std::size_t n_refs = 0, refs_with_event = 0;

  for (std::size_t i = 0; i < batch.size(); ++i)
  {
    const auto& series = batch[i];
    const auto tracking = track_series(series, det, cfg.detection_frames, static_cast<int>(i));
    for (double x : tracking.next_sums())
      study.next_sums.push_back(x);
    for (double x : tracking.confirmed_sums())
      study.confirmed_sums.push_back(x);
    for (double x : tracking.confirmed_peaks())
      study.confirmed_peaks.push_back(x);

    if (series.truth)
      for (int k : cfg.detection_frames)
      {
        if (k < 0 || k >= static_cast<int>(series.frames.size()))
          continue;
        const Frame& frame = series.frames[static_cast<std::size_t>(k)];
        const double t0 = frame.t_start_s, t1 = t0 + frame.exposure_s;
        const auto events = detect_in_frame(frame, det, k);
        for (const auto& atom : series.truth->atoms)
        {
          if (atom.loss_time_s <= t0 || atom.load_time_s > t0)
            continue;
          ++study.n_trapped;
          if (atom.loss_time_s >= t1)
            continue;
          ++lost;
          if (event_near(events, column_of(vcfg, atom.position_um)))
            ++detected_lost;
          else
            ++undetected;
        }
      }

    for (const Frame* ref : series.reference_frames())
    {
      ++n_refs;
      const auto events = detect_in_frame(*ref, det);
      if (std::any_of(events.begin(), events.end(), [](const DetectionEvent& e) { return e.in_roi; }))
        ++refs_with_event;
      for (int c = 1; c + 1 < ref->width; c += 3)
        if (const auto s = sum3x3(*ref, c, cfg.atom_row))
          study.reference_sums.push_back(static_cast<double>(*s));
    }
  }

  if (study.n_trapped > 0)
  {
    const auto n = static_cast<double>(study.n_trapped);
    study.lost_fraction = static_cast<double>(lost) / n;
    study.undetected_loss_fraction = static_cast<double>(undetected) / n;
    study.detected_then_lost_fraction = static_cast<double>(detected_lost) / n;
  }
  if (n_refs == 0)
    throw EmptyReferenceSet("conditioned_study: batch has no reference frames");
  study.p_false = static_cast<double>(refs_with_event) / static_cast<double>(n_refs);

  if (study.next_sums.empty() || study.confirmed_sums.empty())
    throw InsufficientData("conditioned_study: no conditioned entries in the batch");
  study.next_fit = fit_gaussian_mixture(build_histogram(study.next_sums, fit_bin_width), 2);
  study.confirmed_fit = fit_gaussian_mixture(build_histogram(study.confirmed_sums, fit_bin_width), 1);
  study.reference_fit = fit_gaussian_mixture(build_histogram(study.reference_sums, reference_bin_width), 1);

  auto& m = study.model;
  m.p_false = study.p_false;
  m.tau_s = cfg.trap_lifetime_s;
  m.exposure_s = cfg.integration_time_s;
  m.wait_s = cfg.inter_image_wait_s;
  m.condition_on_detection = true;
  m.bg_mean = study.reference_fit.components[0].mean;
  m.bg_sigma = study.reference_fit.components[0].sigma;
  m.atom_mean = study.confirmed_fit.components[0].mean;
  m.atom_sigma = study.confirmed_fit.components[0].sigma;
  m.atom_samples = study.confirmed_sums;
  return study;
}

ModelComparison compare_conditioned_model(const ConditionedStudy& study, double bin_width, std::size_t mc_draws,
                                          RandomStream& rng)
{
  const auto [lo_it, hi_it] = std::minmax_element(study.next_sums.begin(), study.next_sums.end());
  const double lo = std::floor(*lo_it / bin_width) * bin_width;
  const double hi = (std::floor(*hi_it / bin_width) + 1) * bin_width;
  const auto edges = regular_edges(lo, hi, bin_width);

  ModelComparison cmp;
  cmp.empirical = build_histogram_edges(study.next_sums, edges);
  const double n = cmp.empirical.n_total;
  cmp.quadrature = predict_conditioned_histogram(study.model, edges, n);
  cmp.monte_carlo = predict_conditioned_histogram_mc(study.model, edges, n, mc_draws, rng);
  cmp.tv_distance = total_variation_distance(cmp.empirical, cmp.quadrature);

  const auto draws = static_cast<double>(mc_draws);
  for (std::size_t b = 0; b < cmp.quadrature.n_bins(); ++b)
  {
    const double p = std::clamp(cmp.quadrature.counts[b] / n, 0.0, 1.0);
    const double se = n * std::sqrt(p * (1 - p) / draws);
    const double diff = std::abs(cmp.monte_carlo.counts[b] - cmp.quadrature.counts[b]);
    // a bin the model gives (almost) no mass may still catch a stray draw: one draw is one standard error
    const double z = diff / std::max(se, n / draws);
    cmp.max_mc_deviation = std::max(cmp.max_mc_deviation, z);
  }
  return cmp;
}

SingleAtomStudy single_atom_study(const ValidatedConfig& vcfg, const DetectorParams& det, std::uint64_t seed,
                                  std::size_t n_frames, unsigned threads)
{
  SingleAtomStudy study;
  study.peak_values.resize(n_frames);
  parallel_for(n_frames, threads, [&](std::size_t i) {
    RandomStream rng(seed, i);
    const auto truth = sample_ground_truth_n(vcfg, 1, rng, false);
    const Frame frame = render_frame(truth, vcfg, 0.0, vcfg.cfg.integration_time_s, rng);
    const auto row = corrected_row(frame, det);
    const int col = column_of(vcfg, truth.atoms[0].position_um);
    double best = -std::numeric_limits<double>::infinity();
    for (int c = std::max(col - 1, 0); c <= std::min(col + 1, static_cast<int>(row.size()) - 1); ++c)
      best = std::max(best, row[static_cast<std::size_t>(c)]);
    study.peak_values[i] = best;
  });

  const auto n = static_cast<double>(n_frames);
  const auto above = [&](double t) {
    return static_cast<double>(std::count_if(study.peak_values.begin(), study.peak_values.end(),
                                             [t](double v) { return v > t; })) /
           n;
  };
  study.sweep = threshold_sweep(study.peak_values);
  study.empirical_detection = above(det.threshold);
  study.fitted_detection = study.sweep.detection_probability(det.threshold);
  if (det.upper_bound)
    study.above_upper_bound = above(*det.upper_bound);
  return study;
}

FalseDetectionStudy false_detection_study(const ValidatedConfig& vcfg, const std::vector<Frame>& references,
                                          const DetectorParams& det)
{
  FalseDetectionStudy study;
  const double scale = vcfg.cfg.threshold_scale;
  for (const auto& f : references)
    study.frame_peaks.push_back(candidate_peaks(f, det));

  std::vector<double> grid; // reference-analysis units
  for (int i = 0; i <= 120; ++i)
    grid.push_back(0.5 * i);
  std::vector<double> scaled;
  for (double t : grid)
    scaled.push_back(t * scale);
  study.curve = false_detection_curve(study.frame_peaks, scaled);
  study.curve.thresholds = grid;

  const auto op = false_detection_curve(study.frame_peaks, {det.threshold});
  study.p_at_operating = op.p_at_least_one[0];
  study.mean_at_operating = op.mean_per_image[0];

  double top = -std::numeric_limits<double>::infinity();
  for (const auto& peaks : study.frame_peaks)
    for (double v : peaks)
      top = std::max(top, v);
  study.max_peak = top / scale;
  study.zero_threshold = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < grid.size(); ++i)
    if (study.curve.mean_per_image[i] == 0.0)
    {
      study.zero_threshold = grid[i];
      break;
    }
  return study;
}

UpperBoundStudy upper_bound_study(const ValidatedConfig& vcfg, const std::vector<ImageSeries>& batch,
                                  const DetectorParams& det, int match_radius_px)
{
  UpperBoundStudy study;
  std::size_t discarded = 0, merged_removed = 0, single_removed = 0;
  for (const auto& series : batch)
  {
    if (!series.truth)
      throw InsufficientData("upper_bound_study: series without ground truth");
    for (std::size_t k = 0; k < series.frames.size(); ++k)
    {
      const Frame& frame = series.frames[k];
      if (frame.kind != FrameKind::signal)
        continue;
      const double t0 = frame.t_start_s, t1 = t0 + frame.exposure_s;
      std::vector<DetectionEvent> events;
      for (const auto& e : detect_in_frame(frame, det, static_cast<int>(k)))
        if (e.in_roi)
          events.push_back(e);

      // every atom present in the exposure is assigned to its nearest event, if close enough
      std::vector<int> matched(events.size(), 0);
      for (const auto& atom : series.truth->atoms)
      {
        if (GroundTruth::presence_fraction(atom, t0, t1) <= 0)
          continue;
        const int col = column_of(vcfg, atom.position_um);
        std::size_t best = events.size();
        int best_dist = match_radius_px + 1;
        for (std::size_t j = 0; j < events.size(); ++j)
        {
          const int dist = std::abs(events[j].pixel_col - col);
          if (dist < best_dist)
          {
            best_dist = dist;
            best = j;
          }
        }
        if (best < events.size())
          ++matched[best];
      }

      for (std::size_t j = 0; j < events.size(); ++j)
      {
        const bool cut = events[j].above_upper_bound;
        ++study.n_events;
        discarded += cut ? 1 : 0;
        if (matched[j] == 0)
          ++study.n_false;
        else if (matched[j] == 1)
        {
          ++study.n_single;
          single_removed += cut ? 1 : 0;
        }
        else
        {
          ++study.n_merged;
          merged_removed += cut ? 1 : 0;
        }
      }
    }
  }
  const auto ratio = [](std::size_t a, std::size_t b) {
    return b > 0 ? static_cast<double>(a) / static_cast<double>(b) : 0.0;
  };
  study.discarded_fraction = ratio(discarded, study.n_events);
  study.merged_removed_fraction = ratio(merged_removed, study.n_merged);
  study.single_removed_fraction = ratio(single_removed, study.n_single);
  study.merged_fraction = ratio(study.n_merged, study.n_events);
  return study;
}

MergedPairStudy merged_pair_study(const ValidatedConfig& vcfg, const DetectorParams& det, std::uint64_t seed,
                                  std::size_t n_frames, unsigned threads)
{
  const auto& cfg = vcfg.cfg;
  const long max_sites = std::max(1L, static_cast<long>(vcfg.pixel_pitch_um / cfg.lattice_spacing));
  enum class Outcome { resolved, kept, removed };
  std::vector<Outcome> outcome(n_frames, Outcome::resolved);
  parallel_for(n_frames, threads, [&](std::size_t i) {
    RandomStream rng(seed, i);
    GroundTruth truth;
    for (;;)
    {
      truth = sample_ground_truth_n(vcfg, 1, rng, false);
      AtomRecord second = truth.atoms[0];
      const long m = 1 + static_cast<long>(rng.uniform() * static_cast<double>(max_sites));
      second.site_index += rng.uniform() < 0.5 ? -std::min(m, max_sites) : std::min(m, max_sites);
      second.position_um = static_cast<double>(second.site_index) * cfg.lattice_spacing;
      if (second.position_um >= cfg.roi_min_um && second.position_um <= cfg.roi_max_um)
      {
        truth.atoms.push_back(second);
        break;
      }
    }
    const Frame frame = render_frame(truth, vcfg, 0.0, cfg.integration_time_s, rng);
    const int lo = std::min(column_of(vcfg, truth.atoms[0].position_um), column_of(vcfg, truth.atoms[1].position_um));
    const int hi = std::max(column_of(vcfg, truth.atoms[0].position_um), column_of(vcfg, truth.atoms[1].position_um));
    std::vector<DetectionEvent> near;
    for (const auto& e : detect_in_frame(frame, det))
      if (e.in_roi && e.pixel_col >= lo - 2 && e.pixel_col <= hi + 2)
        near.push_back(e);
    if (near.size() == 1)
      outcome[i] = near.front().above_upper_bound ? Outcome::removed : Outcome::kept;
  });

  MergedPairStudy study;
  study.n_frames = n_frames;
  for (const auto o : outcome)
  {
    study.n_merged += o != Outcome::resolved ? 1 : 0;
    study.n_removed += o == Outcome::removed ? 1 : 0;
  }
  if (study.n_merged > 0)
    study.removed_fraction = static_cast<double>(study.n_removed) / static_cast<double>(study.n_merged);
  return study;
}

PairImage simulate_pair_image(const ValidatedConfig& vcfg, RandomStream& rng, int n_frames)
{
  PairImage pair;
  pair.truth = sample_ground_truth_n(vcfg, 2, rng, false);
  const double period = vcfg.frame_period_s();
  for (int k = 0; k < n_frames; ++k)
    pair.frames.push_back(render_frame(pair.truth, vcfg, k * period, k * period + vcfg.cfg.integration_time_s, rng));
  pair.summed = sum_frames(pair.frames);
  return pair;
}

LocalizationStudy localization_study(const ValidatedConfig& vcfg, std::uint64_t seed, std::size_t n_trials,
                                     unsigned threads)
{
  std::vector<PairLocalization> fits(n_trials);
  std::vector<std::array<double, 2>> truths(n_trials);
  parallel_for(n_trials, threads, [&](std::size_t i) {
    RandomStream rng(seed, i);
    const auto pair = simulate_pair_image(vcfg, rng, vcfg.cfg.localization_frames);
    const double a = pair.truth.atoms[0].position_um, b = pair.truth.atoms[1].position_um;
    truths[i] = {std::min(a, b), std::max(a, b)};
    const int ca = column_of(vcfg, a), cb = column_of(vcfg, b);
    if (ca != cb) // same column: unresolvable, counted as rejected
      fits[i] = localize_pair(pair.summed, {ca, cb}, vcfg);
  });

  LocalizationStudy study;
  study.n_trials = n_trials;
  double ss_pos = 0, ss_sep = 0;
  for (std::size_t i = 0; i < n_trials; ++i)
  {
    study.true_separations.push_back(truths[i][1] - truths[i][0]);
    if (!fits[i].accepted)
      continue;
    const double sep_err = fits[i].separation_um - (truths[i][1] - truths[i][0]);
    study.separation_errors.push_back(sep_err);
    ss_sep += sep_err * sep_err;
    for (int k = 0; k < 2; ++k)
    {
      const double err = fits[i].positions_um[static_cast<std::size_t>(k)] - truths[i][static_cast<std::size_t>(k)];
      study.position_errors.push_back(err);
      ss_pos += err * err;
    }
  }
  study.n_accepted = study.separation_errors.size();
  if (study.n_accepted > 0)
  {
    study.separation_rmse = std::sqrt(ss_sep / static_cast<double>(study.n_accepted));
    study.position_rmse = std::sqrt(ss_pos / static_cast<double>(study.position_errors.size()));
  }
  return study;
}

PairRunAnalysis analyze_pair_run(const ValidatedConfig& vcfg, const DetectorParams& det,
                                 std::span<const Frame> frames)
{
  if (frames.empty())
    throw InsufficientData("analyze_pair_run: no images");
  PairRunAnalysis run;
  for (const auto& e : detect_in_frame(frames.front(), det))
    if (e.in_roi)
      run.events.push_back(e);
  if (std::any_of(run.events.begin(), run.events.end(), [](const DetectionEvent& e) { return e.above_upper_bound; }))
  {
    run.outcome = PairOutcome::upper_bound;
    return run;
  }
  if (run.events.size() != 2)
    return run;
  run.fit = localize_pair(sum_frames(frames), {run.events[0].pixel_col, run.events[1].pixel_col}, vcfg);
  run.outcome = run.fit.accepted ? PairOutcome::accepted : PairOutcome::fit_rejected;
  return run;
}

InterferenceStudy interference_study(const ValidatedConfig& vcfg, std::uint64_t seed, std::size_t n_runs,
                                     const DetectorParams& det, const std::vector<double>& frequencies,
                                     unsigned threads)
{
  struct RunResult
  {
    PairOutcome outcome = PairOutcome::not_two;
    double separation = 0;
    double true_separation = 0;
    double counts = 0;
  };
  std::vector<RunResult> results(n_runs);

  parallel_for(n_runs, threads, [&](std::size_t i) {
    RandomStream rng(seed, i);
    const auto pair = simulate_pair_image(vcfg, rng, vcfg.cfg.localization_frames);
    const std::vector<double> positions = {pair.truth.atoms[0].position_um, pair.truth.atoms[1].position_um};
    const auto record = simulate_spcm_scatter(positions, vcfg, rng, i);
    const auto run = analyze_pair_run(vcfg, det, pair.frames);
    results[i] = {run.outcome, run.fit.separation_um, std::abs(positions[1] - positions[0]),
                  static_cast<double>(record.detected_counts)};
  });

  InterferenceStudy study;
  study.n_runs = n_runs;
  for (const auto& r : results)
  {
    if (r.outcome == PairOutcome::upper_bound)
      ++study.n_upper_rejected;
    if (r.outcome == PairOutcome::fit_rejected || r.outcome == PairOutcome::accepted)
      ++study.n_two_events;
    if (r.outcome == PairOutcome::fit_rejected)
      ++study.n_fit_rejected;
    if (r.outcome == PairOutcome::accepted)
    {
      study.samples.push_back({r.separation, r.counts});
      study.true_separations.push_back(r.true_separation);
    }
  }
  study.spectrum = periodogram(study.samples, frequencies);
  return study;
}

SpcmStudy spcm_study(const ValidatedConfig& vcfg, std::uint64_t seed, std::size_t n_runs, std::size_t n_template,
                     double bin_width)
{
  SpcmStudy study;
  RandomStream rng(seed, 0);
  for (std::size_t i = 0; i < n_runs; ++i)
    study.zero_atom.push_back(static_cast<double>(simulate_spcm_scatter({}, vcfg, rng, i).detected_counts));
  for (std::size_t i = 0; i < n_runs; ++i)
  {
    const auto truth = sample_ground_truth_n(vcfg, 1, rng, false);
    study.one_atom.push_back(
        static_cast<double>(simulate_spcm_scatter({truth.atoms[0].position_um}, vcfg, rng, i).detected_counts));
  }
  study.two_atom = sample_two_atom_scatter(vcfg, FluctuationMode::mixed, n_runs, rng);

  study.zero_fit = fit_gaussian_mixture(build_histogram(study.zero_atom, bin_width), 1);
  study.one_fit = fit_gaussian_mixture(build_histogram(study.one_atom, bin_width), 1);

  const auto common = sample_two_atom_scatter(vcfg, FluctuationMode::common, n_template, rng);
  const auto differential = sample_two_atom_scatter(vcfg, FluctuationMode::differential, n_template, rng);
  const auto incoherent = sample_two_atom_scatter(vcfg, FluctuationMode::incoherent, n_template, rng);

  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const std::vector<double>* v : {&std::as_const(study.two_atom), &common, &differential, &incoherent})
    for (double x : *v)
    {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  const auto edges = regular_edges(std::floor(lo / bin_width) * bin_width,
                                   (std::floor(hi / bin_width) + 1) * bin_width, bin_width);
  study.two_hist = build_histogram_edges(study.two_atom, edges);
  study.common_template = build_histogram_edges(common, edges);
  study.differential_template = build_histogram_edges(differential, edges);
  study.incoherent_template = build_histogram_edges(incoherent, edges);
  study.mixture = fit_mode_mixture(study.two_hist, study.common_template, study.differential_template);
  return study;
}

TransmissionStudy transmission_study(const ValidatedConfig& vcfg, std::uint64_t seed, std::size_t runs_per_group)
{
  TransmissionStudy study;
  RandomStream rng(seed, 0);
  std::uint64_t run = 0;
  for (int n = 0; n <= 3; ++n)
  {
    TransmissionGroup g;
    g.n_atoms = n;
    for (std::size_t i = 0; i < runs_per_group; ++i)
      g.counts.push_back(static_cast<double>(simulate_spcm_transmission(n, vcfg, rng, run++).detected_counts));
    study.groups.push_back(std::move(g));
  }
  study.result = beer_lambert_analysis(study.groups);
  return study;
}

PhaseStudy phase_study(const ValidatedConfig& vcfg, std::uint64_t seed, std::size_t n_pairs, int n_bins)
{
  PhaseStudy study;
  RandomStream rng(seed, 0);
  study.histogram = phase_histogram(loading_site_distribution(vcfg), InterferenceGeometry::from_config(vcfg),
                                    n_pairs, rng, n_bins);
  const double expected = static_cast<double>(n_pairs) / n_bins;
  for (double c : study.histogram.counts)
    study.chi2 += (c - expected) * (c - expected) / expected;
  const boost::math::chi_squared dist(n_bins - 1);
  study.p_value = boost::math::cdf(boost::math::complement(dist, study.chi2));
  return study;
}

std::vector<double> linear_grid(double lo, double hi, std::size_t n)
{
  if (n < 2)
    throw std::invalid_argument("linear_grid: need at least two points");
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i)
    g[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  return g;
}

} // namespace nfatom
