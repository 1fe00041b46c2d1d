#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "rvit/schedules.hpp"

namespace {

int cmd_schedules_dump(const std::string& kind_s, int steps, double beta_min, double beta_max,
                       bool have_bounds, const std::string& out_path) {
  rvit::ScheduleKind kind = rvit::schedule_kind_from_string(kind_s);
  if (!have_bounds) rvit::default_beta_bounds(kind, beta_min, beta_max);
  rvit::BetaSchedule s = rvit::make_beta_schedule(kind, steps, beta_min, beta_max);
  if (out_path.empty()) {
    rvit::dump_schedule_csv(s, std::cout);
  } else {
    std::ofstream f(out_path);
    if (!f) {
      std::cerr << "error: cannot open " << out_path << " for writing\n";
      return 2;
    }
    rvit::dump_schedule_csv(s, f);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"reconstructive visual instruction tuning, desk scale"};
  app.require_subcommand(1);

  auto* schedules = app.add_subcommand("schedules", "noise schedule utilities");
  schedules->require_subcommand(1);
  auto* dump = schedules->add_subcommand("dump", "emit a schedule as CSV");
  std::string kind = "linear";
  int steps = rvit::kDefaultDiffusionSteps;
  double beta_min = 0.0, beta_max = 0.0;
  std::string out_path;
  dump->add_option("--kind", kind, "linear|scaled_linear|glide_softmax|geodiff_sigmoid");
  dump->add_option("--steps", steps, "number of timesteps");
  auto* bmin = dump->add_option("--beta-min", beta_min, "minimum beta");
  auto* bmax = dump->add_option("--beta-max", beta_max, "maximum beta");
  dump->add_option("--out", out_path, "output file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (dump->parsed()) {
      const bool have_bounds = bmin->count() > 0 || bmax->count() > 0;
      if (bmin->count() > 0 && bmax->count() == 0) {
        std::cerr << "error: --beta-min requires --beta-max\n";
        return 1;
      }
      if (bmax->count() > 0 && bmin->count() == 0) {
        std::cerr << "error: --beta-max requires --beta-min\n";
        return 1;
      }
      return cmd_schedules_dump(kind, steps, beta_min, beta_max, have_bounds, out_path);
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  std::cerr << "error: no subcommand\n";
  return 1;
}
