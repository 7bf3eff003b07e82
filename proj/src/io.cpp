#include "nfatom/io.hpp"

#include <atomic>
#include <charconv>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iomanip>
#include <limits>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

namespace nfatom
{

namespace
{

std::string format_double(double v)
{
  if (std::isinf(v))
    return v > 0 ? "inf" : "-inf";
  if (std::isnan(v))
    return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view s, const char* what)
{
  if (s == "inf")
    return std::numeric_limits<double>::infinity();
  if (s == "-inf")
    return -std::numeric_limits<double>::infinity();
  if (s == "nan")
    return std::numeric_limits<double>::quiet_NaN();
  double v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ParseError(std::string("bad number for ") + what + ": '" + std::string(s) + "'");
  return v;
}

template <typename Int>
Int parse_int(std::string_view s, const char* what)
{
  Int v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ParseError(std::string("bad integer for ") + what + ": '" + std::string(s) + "'");
  return v;
}

std::vector<std::string_view> split(std::string_view line, char sep)
{
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;)
  {
    const auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos)
      break;
    start = pos + 1;
  }
  return out;
}

std::vector<std::string_view> lines_of(std::string_view text)
{
  std::vector<std::string_view> out;
  for (auto line : split(text, '\n'))
  {
    if (!line.empty() && line.back() == '\r')
      line.remove_suffix(1);
    if (!line.empty())
      out.push_back(line);
  }
  return out;
}

// Splits a CSV body (after the header) into rows with exactly `columns` fields.
std::vector<std::vector<std::string_view>> csv_rows(std::string_view text, std::string_view header, std::size_t columns)
{
  const auto lines = lines_of(text);
  if (lines.empty() || lines.front() != header)
    throw ParseError("expected CSV header '" + std::string(header) + "'");
  std::vector<std::vector<std::string_view>> rows;
  for (std::size_t i = 1; i < lines.size(); ++i)
  {
    auto fields = split(lines[i], ',');
    if (fields.size() != columns)
      throw ParseError("CSV line " + std::to_string(i + 1) + ": expected " + std::to_string(columns) + " fields");
    rows.push_back(std::move(fields));
  }
  return rows;
}

const char* encoding_name(SeriesEncoding e)
{
  return e == SeriesEncoding::ascii ? "ascii" : "le16";
}

} // namespace

std::string encode_series(const ImageSeries& series, SeriesEncoding encoding)
{
  if (series.frames.empty())
    throw std::invalid_argument("encode_series: series has no frames");
  const Frame& first = series.frames.front();
  std::size_t n_reference = 0;
  for (const auto& f : series.frames)
  {
    if (f.width != first.width || f.height != first.height)
      throw ShapeMismatch("encode_series: frames differ in shape");
    if (f.kind == FrameKind::reference)
      ++n_reference;
  }
  const auto& cfg = series.config_snapshot;

  std::string out;
  out += std::to_string(first.width) + ' ' + std::to_string(first.height) + ' ' +
         std::to_string(series.frames.size()) + ' ' + format_double(cfg.integration_time_s * 1000.0) + ' ' +
         format_double(cfg.inter_image_wait_s * 1000.0) + '\n';
  out += std::string("encoding ") + encoding_name(encoding) + '\n';
  out += "reference_frames " + std::to_string(n_reference) + '\n';

  for (std::size_t k = 0; k < series.frames.size(); ++k)
  {
    const Frame& f = series.frames[k];
    const bool is_reference = k + n_reference >= series.frames.size();
    if ((f.kind == FrameKind::reference) != is_reference)
      throw std::invalid_argument("encode_series: reference frames must come last");
    if (encoding == SeriesEncoding::ascii)
    {
      for (int r = 0; r < f.height; ++r)
      {
        for (int c = 0; c < f.width; ++c)
        {
          if (c)
            out += ' ';
          out += std::to_string(f.at(c, r));
        }
        out += '\n';
      }
    }
    else
    {
      for (const auto v : f.counts)
      {
        if (v < std::numeric_limits<std::int16_t>::min() || v > std::numeric_limits<std::int16_t>::max())
          throw std::out_of_range("encode_series: count does not fit in 16 bits");
        const auto u = static_cast<std::uint16_t>(static_cast<std::int16_t>(v));
        out += static_cast<char>(u & 0xff);
        out += static_cast<char>(u >> 8);
      }
    }
  }
  return out;
}

ImageSeries decode_series(const std::string& bytes)
{
  std::size_t pos = 0;
  auto next_line = [&]() {
    const auto end = bytes.find('\n', pos);
    if (end == std::string::npos)
      throw ParseError("series container: truncated header");
    std::string_view line(bytes.data() + pos, end - pos);
    pos = end + 1;
    return line;
  };

  const auto dims = split(next_line(), ' ');
  if (dims.size() != 5)
    throw ParseError("series container: header must be 'width height n_frames exposure_ms wait_ms'");
  const int width = parse_int<int>(dims[0], "width");
  const int height = parse_int<int>(dims[1], "height");
  const int n_frames = parse_int<int>(dims[2], "n_frames");
  const double exposure_ms = parse_double(dims[3], "exposure_ms");
  const double wait_ms = parse_double(dims[4], "wait_ms");
  if (width <= 0 || height <= 0 || n_frames <= 0)
    throw ParseError("series container: non-positive dimensions");

  const auto enc = split(next_line(), ' ');
  if (enc.size() != 2 || enc[0] != "encoding" || (enc[1] != "ascii" && enc[1] != "le16"))
    throw ParseError("series container: bad encoding line");
  const bool ascii = enc[1] == "ascii";
  const auto refs = split(next_line(), ' ');
  if (refs.size() != 2 || refs[0] != "reference_frames")
    throw ParseError("series container: bad reference_frames line");
  const int n_reference = parse_int<int>(refs[1], "reference_frames");
  if (n_reference < 0 || n_reference > n_frames)
    throw ParseError("series container: reference count out of range");

  ImageSeries series;
  series.config_snapshot.integration_time_s = exposure_ms / 1000.0;
  series.config_snapshot.inter_image_wait_s = wait_ms / 1000.0;
  series.config_snapshot.frame_width = width;
  series.config_snapshot.frame_height = height;
  series.config_snapshot.images_per_series = n_frames - n_reference;
  series.config_snapshot.reference_images = n_reference;
  const double period = (exposure_ms + wait_ms) / 1000.0;
  const std::size_t n_pixels = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);

  for (int k = 0; k < n_frames; ++k)
  {
    Frame f(width, height);
    f.exposure_s = exposure_ms / 1000.0;
    f.t_start_s = k * period;
    f.kind = k >= n_frames - n_reference ? FrameKind::reference : FrameKind::signal;
    if (ascii)
    {
      for (int r = 0; r < height; ++r)
      {
        const auto cells = split(next_line(), ' ');
        if (cells.size() != static_cast<std::size_t>(width))
          throw ParseError("series container: frame " + std::to_string(k) + " row " + std::to_string(r) +
                           " has the wrong number of values");
        for (int c = 0; c < width; ++c)
          f.at(c, r) = parse_int<std::int32_t>(cells[static_cast<std::size_t>(c)], "pixel");
      }
    }
    else
    {
      if (bytes.size() - pos < 2 * n_pixels)
        throw ParseError("series container: truncated binary frame " + std::to_string(k));
      for (std::size_t i = 0; i < n_pixels; ++i)
      {
        const auto lo = static_cast<unsigned char>(bytes[pos + 2 * i]);
        const auto hi = static_cast<unsigned char>(bytes[pos + 2 * i + 1]);
        f.counts[i] = static_cast<std::int16_t>(static_cast<std::uint16_t>(lo | (hi << 8)));
      }
      pos += 2 * n_pixels;
    }
    series.frames.push_back(std::move(f));
  }
  if (pos != bytes.size())
    throw ParseError("series container: trailing data after the last frame");
  return series;
}

void atomic_write(const std::filesystem::path& path, const std::string& content)
{
  // unique temporary name so concurrent writers to different targets never collide
  static std::atomic<unsigned long> counter{0};
  auto tmp = path;
  tmp += ".tmp" + std::to_string(counter.fetch_add(1));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out)
      throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out)
      throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec)
  {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot move " + tmp.string() + " to " + path.string());
  }
}

std::string read_file(const std::filesystem::path& path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad())
    throw IoError("read failed for " + path.string());
  return ss.str();
}

void write_series(const std::filesystem::path& path, const ImageSeries& series, SeriesEncoding encoding)
{
  atomic_write(path, encode_series(series, encoding));
}

ImageSeries read_series(const std::filesystem::path& path)
{
  return decode_series(read_file(path));
}

std::string content_hash(const std::string& bytes)
{
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : bytes)
  {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string truth_csv(const std::vector<TruthRow>& rows)
{
  std::string out = "run,site,pos_um,load_s,loss_s\n";
  for (const auto& r : rows)
    out += std::to_string(r.run) + ',' + std::to_string(r.atom.site_index) + ',' + format_double(r.atom.position_um) +
           ',' + format_double(r.atom.load_time_s) + ',' + format_double(r.atom.loss_time_s) + '\n';
  return out;
}

std::vector<TruthRow> parse_truth_csv(const std::string& text)
{
  std::vector<TruthRow> out;
  for (const auto& f : csv_rows(text, "run,site,pos_um,load_s,loss_s", 5))
  {
    TruthRow r;
    r.run = parse_int<std::uint64_t>(f[0], "run");
    r.atom.site_index = parse_int<long>(f[1], "site");
    r.atom.position_um = parse_double(f[2], "pos_um");
    r.atom.load_time_s = parse_double(f[3], "load_s");
    r.atom.loss_time_s = parse_double(f[4], "loss_s");
    out.push_back(r);
  }
  return out;
}

std::string spcm_csv(const std::vector<SpcmRecord>& records)
{
  std::string out = "run,mode,n_atoms,counts,pos1_um,pos2_um\n";
  for (const auto& r : records)
  {
    auto pos = [&](std::size_t i) {
      return i < r.atom_positions_um.size() ? format_double(r.atom_positions_um[i]) : std::string();
    };
    out += std::to_string(r.run_id) + ',' +
           (r.mode == SpcmMode::scatter_into_fiber ? "scatter" : "transmission") + ',' +
           std::to_string(r.n_atoms_true) + ',' + std::to_string(r.detected_counts) + ',' + pos(0) + ',' + pos(1) +
           '\n';
  }
  return out;
}

std::vector<SpcmRecord> parse_spcm_csv(const std::string& text)
{
  std::vector<SpcmRecord> out;
  for (const auto& f : csv_rows(text, "run,mode,n_atoms,counts,pos1_um,pos2_um", 6))
  {
    SpcmRecord r;
    r.run_id = parse_int<std::uint64_t>(f[0], "run");
    if (f[1] == "scatter")
      r.mode = SpcmMode::scatter_into_fiber;
    else if (f[1] == "transmission")
      r.mode = SpcmMode::transmission;
    else
      throw ParseError("unknown photon-counter mode '" + std::string(f[1]) + "'");
    r.n_atoms_true = parse_int<int>(f[2], "n_atoms");
    r.detected_counts = parse_int<long>(f[3], "counts");
    for (std::size_t i = 4; i < 6; ++i)
      if (!f[i].empty())
        r.atom_positions_um.push_back(parse_double(f[i], "position"));
    out.push_back(std::move(r));
  }
  return out;
}

std::string detections_csv(const std::vector<DetectionRow>& rows)
{
  std::string out = "series,frame,col,pos_um,peak,raw3x3,accepted\n";
  for (const auto& r : rows)
    out += std::to_string(r.series) + ',' + std::to_string(r.event.frame_index) + ',' +
           std::to_string(r.event.pixel_col) + ',' + format_double(r.event.position_um) + ',' +
           format_double(r.event.convolved_peak_value) + ',' + std::to_string(r.event.raw_3x3_sum) + ',' +
           (r.accepted ? "1" : "0") + '\n';
  return out;
}

std::string pairs_csv(const std::vector<PairRow>& rows)
{
  std::string out = "series,pos1_um,pos2_um,sep_um,err1,err2,accepted\n";
  for (const auto& r : rows)
    out += std::to_string(r.series) + ',' + format_double(r.pair.positions_um[0]) + ',' +
           format_double(r.pair.positions_um[1]) + ',' + format_double(r.pair.separation_um) + ',' +
           format_double(r.pair.fit_errors_um[0]) + ',' + format_double(r.pair.fit_errors_um[1]) + ',' +
           (r.pair.accepted ? "1" : "0") + '\n';
  return out;
}

std::string tracked_csv(const std::vector<TrackedAtom>& atoms)
{
  std::string out = "series,col,detection_frame,frame,status,raw3x3\n";
  for (const auto& a : atoms)
    for (std::size_t k = 0; k < a.status.size(); ++k)
    {
      const char* status = a.status[k] == FrameStatus::detected ? "detected"
                           : a.status[k] == FrameStatus::absent ? "absent"
                                                                : "not_evaluated";
      out += std::to_string(a.series_id) + ',' + std::to_string(a.pixel_col) + ',' +
             std::to_string(a.detection_frame) + ',' + std::to_string(k) + ',' + status + ',' +
             std::to_string(a.raw_3x3[k]) + '\n';
    }
  return out;
}

std::string table_csv(const std::vector<std::string>& header, const std::vector<std::vector<double>>& rows)
{
  std::string out;
  for (std::size_t i = 0; i < header.size(); ++i)
    out += (i ? "," : "") + header[i];
  out += '\n';
  for (const auto& row : rows)
  {
    if (row.size() != header.size())
      throw std::invalid_argument("table_csv: row width does not match the header");
    for (std::size_t i = 0; i < row.size(); ++i)
      out += (i ? "," : "") + format_double(row[i]);
    out += '\n';
  }
  return out;
}

void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn)
{
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (threads == 1)
  {
    for (std::size_t i = 0; i < n; ++i)
      fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (;;)
      {
        const std::size_t i = next.fetch_add(1);
        if (i >= n)
          return;
        try
        {
          fn(i);
        }
        catch (...)
        {
          std::lock_guard lock(error_mutex);
          if (!error)
            error = std::current_exception();
          next = n; // stop handing out work
        }
      }
    });
  for (auto& th : pool)
    th.join();
  if (error)
    std::rethrow_exception(error);
}

unsigned default_threads()
{
  return std::max(1u, std::thread::hardware_concurrency());
}

} // namespace nfatom
