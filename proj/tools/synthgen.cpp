// synthgen: simulate a courier world and write a dataset directory.

#include <iostream>

#include <CLI11.hpp>

#include "transpdt/synthgen.hpp"

int main(int argc, char** argv) {
  CLI::App app{"synthetic courier-world dataset generator"};
  std::string config, out;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config, "world config (key = value)")->check(CLI::ExistingFile);
  app.add_option("--out", out, "output directory")->required();
  app.add_option("--seed", seed, "override the world seed");
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  try {
    auto kv = config.empty() ? transpdt::KeyValueConfig{} : transpdt::KeyValueConfig::load(config);
    if (seed) kv.set("seed", std::to_string(*seed));
    const auto world = transpdt::generate_world(transpdt::world_config_from(kv));
    std::cout << transpdt::stats_report(transpdt::emit_dataset(world, transpdt::simulate_all(world), out));
  } catch (const transpdt::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
