#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "qfilter/commands.hpp"

namespace {

struct Flags {
  std::string config;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::string out_dir;
  std::string format;
  bool gnuplot = false;
};

void add_common_flags(CLI::App* sub, Flags& f) {
  sub->add_option("-c,--config", f.config, "experiment configuration (JSON, comments allowed)");
  sub->add_option("-p,--preset", f.preset, "built-in preset")->check(CLI::IsMember(qfilter::known_presets()));
  sub->add_option("--seed", f.seed, "master seed (overrides QFILTER_SEED and the config)");
  sub->add_option("-j,--workers", f.workers, "worker threads; never changes results")->check(CLI::PositiveNumber);
  sub->add_option("-o,--out-dir", f.out_dir, "output directory");
  sub->add_option("--format", f.format, "result table format")->check(CLI::IsMember({"csv", "json"}));
  sub->add_flag("--gnuplot", f.gnuplot, "also write a gnuplot script for the fidelity curve");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantum filter simulator: fidelity between a quantum state and its filter"};
  app.require_subcommand(1);
  Flags flags;
  for (const auto& [name, help] : std::initializer_list<std::pair<const char*, const char*>>{
           {"simulate", "run an ensemble and test the fidelity for the submartingale property"},
           {"chain-check", "exact one-step check of the discrete Kraus chain over random state pairs"},
           {"sweep-alpha", "compare photon-counting and diffusive ensembles over an alpha sweep"},
           {"validate", "parse and check a configuration without running anything"}}) {
    add_common_flags(app.add_subcommand(name, help), flags);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : qfilter::kConfigError;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  std::string text;
  if (!flags.config.empty()) {
    std::ifstream in(flags.config, std::ios::binary);
    if (!in) {
      std::cerr << qfilter::detail::error_json(command, qfilter::kConfigError, "ParseError",
                                               "cannot read config file " + flags.config)
                       .dump(2)
                << "\n";
      return qfilter::kConfigError;
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  } else if (flags.preset.empty()) {
    std::cerr << qfilter::detail::error_json(command, qfilter::kConfigError, "ValidationError",
                                             "give --config FILE or --preset NAME")
                     .dump(2)
              << "\n";
    return qfilter::kConfigError;
  }

  qfilter::RunOptions opts;
  if (!flags.preset.empty()) opts.preset = flags.preset;
  opts.seed = flags.seed;
  opts.workers = flags.workers;
  if (!flags.out_dir.empty()) opts.out_dir = flags.out_dir;
  if (!flags.format.empty()) opts.format = flags.format;
  opts.gnuplot = flags.gnuplot;
  return qfilter::run_command(command, text, opts, std::cout, std::cerr);
}
