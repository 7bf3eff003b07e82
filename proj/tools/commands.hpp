#pragma once

#include "nfatom/core.hpp"
#include "nfatom/io.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace nfatom::cli
{

/// Missing or unusable command inputs (exit code 2).
class InputError : public Error
{
public:
  using Error::Error;
};

struct CommandOptions
{
  std::optional<std::filesystem::path> config_path;
  std::uint64_t seed = 1;
  std::optional<std::size_t> runs;
  bool paper_scale = false;
  std::filesystem::path in_dir;
  std::filesystem::path out_dir = ".";
  std::optional<double> threshold; // reference-analysis units
  SeriesEncoding encoding = SeriesEncoding::le16;
  unsigned threads = 0; // 0: hardware concurrency; outputs do not depend on it
};

constexpr std::size_t desk_scale_runs = 500;
constexpr std::size_t paper_scale_runs = 6000;

std::size_t effective_runs(const CommandOptions& opts);

/// Writes manifest.json, config.cfg, series/run_NNNNN.nfs with truth.csv, the photon-counter
/// data sets (spcm_scatter.csv with pairs/pair_NNNNN.nfs for its two-atom runs, and
/// spcm_transmission.csv). Zero runs write the manifest only.
void cmd_simulate(const CommandOptions& opts);

struct DetectSummary
{
  std::size_t n_series = 0;
  std::size_t n_events = 0;
  std::size_t n_accepted = 0;
  std::size_t n_reference_frames = 0;
  double false_rate = 0;          // reference frames with at least one in-ROI event
  double false_per_image = 0;
  std::optional<double> detection_probability; // atoms present for a full detection image
  std::optional<double> isolated_detection_probability; // ... with no other atom within 5 columns
  std::size_t n_truth_atoms = 0;
  std::size_t n_pairs = 0;
  std::size_t n_pairs_accepted = 0;
};

/// Runs the pipeline on every series under in_dir/series and writes manifest.json,
/// detections.csv, tracked.csv, pairs.csv and summary.txt.
DetectSummary cmd_detect(const CommandOptions& opts);

const std::vector<std::string>& figure_keys();

/// Plot-ready CSVs and report_<key>.txt for one figure; returns the names of the files written.
std::vector<std::string> cmd_figures(const std::string& key, const CommandOptions& opts);

/// 2 for invalid input, 3 for IO failures, 1 otherwise.
int exit_code_for(const std::exception& e);

} // namespace nfatom::cli
