#include "doctest.h"

#include "commands.hpp"

#include "nfatom/io.hpp"

#include "json.hpp"

#include <filesystem>
#include <map>

using namespace nfatom;
using namespace nfatom::cli;
namespace fs = std::filesystem;

namespace
{

fs::path scratch_dir(const std::string& name)
{
  const auto dir = fs::temp_directory_path() / ("nfatom_test_cli_" + name);
  fs::remove_all(dir);
  return dir;
}

/// Relative path -> content of every file below `dir`.
std::map<std::string, std::string> snapshot(const fs::path& dir)
{
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file())
      files[fs::relative(e.path(), dir).generic_string()] = read_file(e.path());
  return files;
}

CommandOptions simulate_options(const fs::path& out, std::size_t runs, std::uint64_t seed = 7)
{
  CommandOptions o;
  o.out_dir = out;
  o.runs = runs;
  o.seed = seed;
  return o;
}

} // namespace

TEST_CASE("zero runs write the manifest only")
{
  const auto out = scratch_dir("zero");
  cmd_simulate(simulate_options(out, 0));
  const auto files = snapshot(out);
  REQUIRE(files.size() == 1);
  const auto manifest = nlohmann::json::parse(files.at("manifest.json"));
  CHECK(manifest["command"] == "simulate");
  CHECK(manifest["seed"] == 7);
  fs::remove_all(out);
}

TEST_CASE("run counts")
{
  CommandOptions o;
  CHECK(effective_runs(o) == desk_scale_runs);
  o.paper_scale = true;
  CHECK(effective_runs(o) == paper_scale_runs);
  o.runs = 12;
  CHECK(effective_runs(o) == 12);
}

TEST_CASE("simulate is deterministic and independent of the thread count")
{
  const auto a = scratch_dir("det_a"), b = scratch_dir("det_b"), c = scratch_dir("det_c");
  auto oa = simulate_options(a, 6);
  oa.threads = 1;
  auto ob = simulate_options(b, 6);
  ob.threads = 3;
  cmd_simulate(oa);
  cmd_simulate(ob);
  auto sa = snapshot(a), sb = snapshot(b);
  // the manifest records the output directory, everything else must match byte for byte
  CHECK(sa.count("series/run_00005.nfs") == 1);
  CHECK(sa.count("truth.csv") == 1);
  CHECK(sa.count("spcm_scatter.csv") == 1);
  CHECK(sa.count("spcm_transmission.csv") == 1);
  auto ma = nlohmann::json::parse(sa.at("manifest.json")), mb = nlohmann::json::parse(sb.at("manifest.json"));
  ma.erase("out_dir");
  mb.erase("out_dir");
  CHECK(ma == mb);
  sa.erase("manifest.json");
  sb.erase("manifest.json");
  CHECK(sa == sb);

  cmd_simulate(simulate_options(c, 6, 8));
  auto sc = snapshot(c);
  CHECK(sc.at("series/run_00000.nfs") != sa.at("series/run_00000.nfs"));
  for (const auto& d : {a, b, c})
    fs::remove_all(d);
}

TEST_CASE("ascii and binary containers give the same detections")
{
  const auto bin = scratch_dir("enc_bin"), txt = scratch_dir("enc_txt");
  cmd_simulate(simulate_options(bin, 8));
  auto ot = simulate_options(txt, 8);
  ot.encoding = SeriesEncoding::ascii;
  cmd_simulate(ot);
  CommandOptions db, dt;
  db.in_dir = bin;
  db.out_dir = bin / "det";
  dt.in_dir = txt;
  dt.out_dir = txt / "det";
  const auto rb = cmd_detect(db), rt = cmd_detect(dt);
  CHECK(rb.n_events == rt.n_events);
  CHECK(read_file(db.out_dir / "detections.csv") == read_file(dt.out_dir / "detections.csv"));
  fs::remove_all(bin);
  fs::remove_all(txt);
}

TEST_CASE("detect: outputs, summary, and the high threshold")
{
  const auto dir = scratch_dir("detect");
  cmd_simulate(simulate_options(dir, 150));
  CommandOptions o;
  o.in_dir = dir;
  o.out_dir = dir / "det";
  const auto s = cmd_detect(o);
  CHECK(s.n_series == 150);
  CHECK(s.n_reference_frames == 150);
  REQUIRE(s.detection_probability.has_value());
  CHECK(*s.detection_probability > 0.85);
  for (const char* f : {"manifest.json", "detections.csv", "tracked.csv", "pairs.csv", "summary.txt"})
    CHECK(fs::exists(o.out_dir / f));
  const auto manifest = nlohmann::json::parse(read_file(o.out_dir / "manifest.json"));
  CHECK(manifest["inputs"].contains("series/run_00000.nfs"));
  CHECK(manifest["inputs"].contains("config.cfg"));

  o.threshold = 34.0;
  o.out_dir = dir / "det34";
  const auto s34 = cmd_detect(o);
  CHECK(s34.false_rate == 0.0);
  CHECK(s34.n_events < s.n_events);
  fs::remove_all(dir);
}

TEST_CASE("detect rejects missing or empty inputs")
{
  const auto dir = scratch_dir("empty");
  fs::create_directories(dir);
  CommandOptions o;
  o.in_dir = dir;
  o.out_dir = dir / "out";
  CHECK_THROWS_AS(cmd_detect(o), InputError);
  o.in_dir = dir / "nope";
  CHECK_THROWS_AS(cmd_detect(o), InputError);
  try
  {
    cmd_detect(o);
  }
  catch (const std::exception& e)
  {
    CHECK(exit_code_for(e) == 2);
  }
  fs::remove_all(dir);
}

TEST_CASE("figures: keys, missing inputs, and the input-free figure")
{
  const auto dir = scratch_dir("figures");
  CommandOptions o;
  o.out_dir = dir / "out";
  CHECK_THROWS_AS(cmd_figures("s9", o), InputError);
  CHECK_THROWS_AS(cmd_figures("s2", o), InputError); // needs --in
  o.in_dir = dir / "nothing";
  fs::create_directories(o.in_dir);
  try
  {
    cmd_figures("fig3", o);
    FAIL("expected InputError");
  }
  catch (const InputError& e)
  {
    const std::string msg = e.what();
    CHECK(msg.find("pairs/") != std::string::npos);
    CHECK(msg.find("spcm_scatter.csv") != std::string::npos);
  }

  o.in_dir.clear();
  const auto files = cmd_figures("s5", o);
  CHECK(std::find(files.begin(), files.end(), "s5.csv") != files.end());
  CHECK(fs::exists(o.out_dir / "manifest_s5.json"));
  CHECK(fs::exists(o.out_dir / "report_s5.txt"));
  fs::remove_all(dir);
}

TEST_CASE("figures from a small simulated data set")
{
  const auto dir = scratch_dir("figsim");
  cmd_simulate(simulate_options(dir, 120));
  CommandOptions o;
  o.in_dir = dir;
  o.out_dir = dir / "figs";
  for (const char* key : {"s2", "s4", "fig2"})
  {
    const auto files = cmd_figures(key, o);
    CHECK(files.size() >= 2);
    for (const auto& f : files)
      CHECK(fs::file_size(o.out_dir / f) > 0);
  }
  fs::remove_all(dir);
}

TEST_CASE("exit codes")
{
  CHECK(exit_code_for(InputError("x")) == 2);
  CHECK(exit_code_for(InvalidConfig(std::vector<ConfigViolation>{{"a", "b"}})) == 2);
  CHECK(exit_code_for(ParseError("x")) == 2);
  CHECK(exit_code_for(IoError("x")) == 3);
  CHECK(exit_code_for(std::runtime_error("x")) == 1);
}
