#include "doctest.h"

#include "nfatom/io.hpp"
#include "nfatom/sim.hpp"

#include <atomic>
#include <filesystem>
#include <stdexcept>

using namespace nfatom;
namespace fs = std::filesystem;

namespace
{

ImageSeries small_series(std::uint64_t seed)
{
  const auto v = validate_config(ExperimentConfig{});
  RandomStream rng(seed, 0);
  return render_series(v, rng);
}

fs::path scratch_dir(const std::string& name)
{
  const auto dir = fs::temp_directory_path() / ("nfatom_test_io_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

} // namespace

TEST_CASE("series containers round-trip in both encodings")
{
  const auto s = small_series(1);
  for (auto enc : {SeriesEncoding::ascii, SeriesEncoding::le16})
  {
    const auto bytes = encode_series(s, enc);
    const auto back = decode_series(bytes);
    REQUIRE(back.frames.size() == s.frames.size());
    for (std::size_t k = 0; k < s.frames.size(); ++k)
    {
      CHECK(back.frames[k].counts == s.frames[k].counts);
      CHECK(back.frames[k].kind == s.frames[k].kind);
      CHECK(back.frames[k].exposure_s == doctest::Approx(s.frames[k].exposure_s));
      CHECK(back.frames[k].t_start_s == doctest::Approx(s.frames[k].t_start_s));
    }
    CHECK(encode_series(back, enc) == bytes);
  }
}

TEST_CASE("series container errors")
{
  const auto s = small_series(2);
  const auto bytes = encode_series(s, SeriesEncoding::le16);
  CHECK_THROWS_AS(decode_series(bytes.substr(0, bytes.size() - 3)), ParseError);
  CHECK_THROWS_AS(decode_series(bytes + "x"), ParseError);
  CHECK_THROWS_AS(decode_series("garbage"), ParseError);
  CHECK_THROWS_AS(decode_series(""), ParseError);

  auto hot = s;
  hot.frames[0].counts[0] = 70000;
  CHECK_THROWS_AS(encode_series(hot, SeriesEncoding::le16), std::out_of_range);
  CHECK(decode_series(encode_series(hot, SeriesEncoding::ascii)).frames[0].counts[0] == 70000);

  auto misordered = s;
  std::swap(misordered.frames.front(), misordered.frames.back());
  CHECK_THROWS_AS(encode_series(misordered, SeriesEncoding::ascii), std::invalid_argument);
  CHECK_THROWS_AS(encode_series(ImageSeries{}, SeriesEncoding::ascii), std::invalid_argument);
}

TEST_CASE("files: atomic write, read back, missing file")
{
  const auto dir = scratch_dir("files");
  const auto s = small_series(3);
  write_series(dir / "a.nfs", s, SeriesEncoding::le16);
  CHECK(read_series(dir / "a.nfs").frames.front().counts == s.frames.front().counts);
  atomic_write(dir / "t.txt", "hello\n");
  CHECK(read_file(dir / "t.txt") == "hello\n");
  atomic_write(dir / "t.txt", "again\n");
  CHECK(read_file(dir / "t.txt") == "again\n");
  std::size_t n = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir))
    ++n;
  CHECK(n == 2); // no temporaries left behind
  CHECK_THROWS_AS(read_file(dir / "missing.txt"), IoError);
  CHECK_THROWS_AS(atomic_write(dir / "no" / "such" / "dir.txt", "x"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("content hash is 64-bit FNV-1a")
{
  CHECK(content_hash("") == "cbf29ce484222325");
  CHECK(content_hash("a") == "af63dc4c8601ec8c");
  CHECK(content_hash("foobar") == "85944171f73967e8");
}

TEST_CASE("truth and photon-counter tables round-trip")
{
  std::vector<TruthRow> rows = {{0, {520, 258.96, 0.0, 1.2345678901}}, {3, {300, 149.4, 0.0, 0.01}}};
  CHECK(parse_truth_csv(truth_csv(rows)).size() == 2);
  const auto back = parse_truth_csv(truth_csv(rows));
  CHECK(back[1].run == 3);
  CHECK(back[0].atom.site_index == 520);
  CHECK(back[0].atom.loss_time_s == doctest::Approx(1.2345678901).epsilon(1e-12));

  std::vector<SpcmRecord> recs = {{0, 310, 0, {}, SpcmMode::scatter_into_fiber},
                                  {1, 420, 2, {200.2, 240.5}, SpcmMode::scatter_into_fiber},
                                  {2, 4321, 3, {}, SpcmMode::transmission}};
  CHECK(parse_spcm_csv(spcm_csv(recs)) == recs);
  CHECK_THROWS_AS(parse_spcm_csv("wrong,header\n1,2\n"), ParseError);
}

TEST_CASE("generic tables")
{
  const auto t = table_csv({"a", "b"}, {{1, 2.5}, {3, 4}});
  CHECK(t.rfind("a,b\n", 0) == 0);
  CHECK_THROWS_AS(table_csv({"a"}, {{1, 2}}), std::invalid_argument);
}

TEST_CASE("parallel_for covers every index once and rethrows")
{
  for (unsigned threads : {1u, 2u, 5u})
  {
    std::vector<int> hits(1000, 0);
    parallel_for(hits.size(), threads, [&](std::size_t i) { hits[i] += 1; });
    CHECK(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
  }
  std::atomic<int> ran{0};
  CHECK_THROWS_AS(parallel_for(100, 3,
                               [&](std::size_t i) {
                                 ++ran;
                                 if (i == 17)
                                   throw std::runtime_error("task failed");
                               }),
                  std::runtime_error);
  CHECK(default_threads() >= 1);
}
