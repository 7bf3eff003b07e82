#include "commands.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <iostream>

namespace
{

void add_common(CLI::App* cmd, nfatom::cli::CommandOptions& opts)
{
  cmd->add_option("--config", opts.config_path, "Config file (key = value)");
  cmd->add_option("--seed", opts.seed, "Master seed");
  cmd->add_option("--threads", opts.threads, "Worker threads (outputs do not depend on it)");
  cmd->add_option("--out", opts.out_dir, "Output directory")->required();
}

} // namespace

int main(int argc, char** argv)
{
  using namespace nfatom::cli;
  CLI::App app{"Simulation and analysis of imaged nanofiber-trapped atoms"};
  app.require_subcommand(1);

  CommandOptions opts;
  bool ascii = false, binary = false;

  auto* sim = app.add_subcommand("simulate", "Simulate image series and photon-counter records");
  add_common(sim, opts);
  sim->add_option("--runs", opts.runs, "Number of runs (default 500, 6000 with --paper-scale)");
  sim->add_flag("--paper-scale", opts.paper_scale, "Full-size data set (6000 runs)");
  auto* ascii_flag = sim->add_flag("--ascii", ascii, "Text image container");
  auto* binary_flag = sim->add_flag("--binary", binary, "Little-endian 16-bit image container (default)");
  ascii_flag->excludes(binary_flag);

  auto* det = app.add_subcommand("detect", "Run detection, tracking and pair localization");
  add_common(det, opts);
  det->add_option("--in", opts.in_dir, "Directory written by simulate")->required();
  det->add_option("--threshold", opts.threshold, "Detection threshold, reference-analysis units");

  std::string figure;
  auto* fig = app.add_subcommand("figures", "Plot-ready CSVs and a report for one figure");
  add_common(fig, opts);
  fig->add_option("which", figure, "s2, s3, s4, s5, fig2 or fig3")
      ->required()
      ->check(CLI::IsMember(figure_keys()));
  fig->add_option("--in", opts.in_dir, "Directory written by simulate");

  try
  {
    app.parse(argc, argv);
  }
  catch (const CLI::ParseError& e)
  {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  if (ascii)
    opts.encoding = nfatom::SeriesEncoding::ascii;

  try
  {
    if (*sim)
    {
      cmd_simulate(opts);
      std::printf("simulated %zu runs into %s\n", effective_runs(opts), opts.out_dir.string().c_str());
    }
    else if (*det)
    {
      const auto s = cmd_detect(opts);
      std::printf("series %zu, events %zu (accepted %zu), false rate %.4f", s.n_series, s.n_events, s.n_accepted,
                  s.false_rate);
      if (s.detection_probability)
        std::printf(", detection probability %.4f", *s.detection_probability);
      std::printf("\n");
    }
    else
    {
      for (const auto& f : cmd_figures(figure, opts))
        std::printf("%s\n", (opts.out_dir / f).string().c_str());
    }
  }
  catch (const std::exception& e)
  {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 0;
}
