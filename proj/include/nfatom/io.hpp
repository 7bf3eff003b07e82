#pragma once

#include "nfatom/core.hpp"
#include "nfatom/detect.hpp"
#include "nfatom/sim.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace nfatom
{

enum class SeriesEncoding { ascii, le16 };

/// Container layout: a text header
///   width height n_frames exposure_ms wait_ms
///   encoding ascii|le16
///   reference_frames N
/// followed by one grid per frame, row-major. Reference frames come last.
std::string encode_series(const ImageSeries& series, SeriesEncoding encoding);
ImageSeries decode_series(const std::string& bytes);

void write_series(const std::filesystem::path& path, const ImageSeries& series, SeriesEncoding encoding);
ImageSeries read_series(const std::filesystem::path& path);

/// Writes to a sibling temporary file and renames it into place.
void atomic_write(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

/// 64-bit FNV-1a, printed as 16 hex digits.
std::string content_hash(const std::string& bytes);

struct TruthRow
{
  std::uint64_t run = 0;
  AtomRecord atom;
};

std::string truth_csv(const std::vector<TruthRow>& rows);
std::vector<TruthRow> parse_truth_csv(const std::string& text);

std::string spcm_csv(const std::vector<SpcmRecord>& records);
std::vector<SpcmRecord> parse_spcm_csv(const std::string& text);

struct DetectionRow
{
  int series = 0;
  DetectionEvent event;
  bool accepted = false;
};

std::string detections_csv(const std::vector<DetectionRow>& rows);

struct PairRow
{
  int series = 0;
  PairLocalization pair;
};

std::string pairs_csv(const std::vector<PairRow>& rows);

std::string tracked_csv(const std::vector<TrackedAtom>& atoms);

/// Generic numeric table with a header row.
std::string table_csv(const std::vector<std::string>& header, const std::vector<std::vector<double>>& rows);

/// Runs fn(i) for i in [0, n) on up to `threads` workers; results must be stored by index.
/// The first exception thrown by any task is rethrown after all workers stop.
void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn);

/// Default worker count: hardware concurrency, at least one.
unsigned default_threads();

} // namespace nfatom
