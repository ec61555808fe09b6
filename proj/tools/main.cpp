#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "preflab/config.hpp"
#include "preflab/errors.hpp"
#include "preflab/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"preflab: a desk-scale preference-optimization laboratory"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed_override;
  bool quiet = false;

  for (const std::string& name : preflab::known_commands()) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "path to the run config (JSON)")->required();
    sub->add_option("--seed", seed_override, "override master_seed from the config");
    sub->add_flag("--quiet", quiet, "suppress progress output");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const preflab::RunConfig config = preflab::parse_config(config_path, seed_override);
    return preflab::dispatch(command, config, std::cerr, quiet);
  } catch (const preflab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
