// carma_lab: generate data, train variants, run interventions, build reports.
//
// Exit codes: 0 ok, 2 config or usage error, 3 runtime failure.

#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "carma/errors.hpp"
#include "carma/lab.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

std::vector<std::uint64_t> parse_seeds(const std::string& spec) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto dash = item.find('-');
    try {
      if (dash != std::string::npos && dash > 0) {
        const auto lo = std::stoull(item.substr(0, dash));
        const auto hi = std::stoull(item.substr(dash + 1));
        if (hi < lo) throw carma::ConfigError("seed range " + item + " is reversed");
        for (auto s = lo; s <= hi; ++s) seeds.push_back(s);
      } else {
        seeds.push_back(std::stoull(item));
      }
    } catch (const std::logic_error&) {
      throw carma::ConfigError("bad seed list '" + spec + "'");
    }
  }
  if (seeds.empty()) throw carma::ConfigError("empty seed list");
  return seeds;
}

std::vector<double> parse_rates(const std::string& spec) {
  std::vector<double> rates;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      rates.push_back(std::stod(item));
    } catch (const std::logic_error&) {
      throw carma::ConfigError("bad rate list '" + spec + "'");
    }
  }
  return rates;
}

}  // namespace

int main(int argc, char** argv) {
  namespace lab = carma::lab;
  CLI::App app{"CARMA lab: layer-wise MI and stability regularization at desk scale"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string root_arg;
  app.add_option("--root", root_arg, "Output root (default $CARMA_LAB_DIR or ./carma_lab_out)");
  std::size_t jobs = 1;
  app.add_option("--jobs,-j", jobs, "Parallel runs")->check(CLI::PositiveNumber);

  auto* gen = app.add_subcommand("gen", "Generate a dataset TSV and manifest");
  std::string gen_task = "idm";
  std::uint64_t gen_seed = 1;
  std::size_t gen_n = 1600;
  std::string gen_out;
  gen->add_option("--task", gen_task, "idm or sc")->check(CLI::IsMember({"idm", "sc"}));
  gen->add_option("--seed", gen_seed, "Generator seed");
  gen->add_option("--n", gen_n, "Number of items");
  gen->add_option("--out", gen_out, "Output directory (default <root>/data)");

  auto* train = app.add_subcommand("train", "Train one variant for a list of seeds");
  std::string config_path, variant = "carma", train_seeds = "1";
  std::string data_path;
  std::vector<std::string> overrides;
  train->add_option("--config", config_path, "JSON config")->check(CLI::ExistingFile);
  train->add_option("--variant", variant, "original, ft or carma")
      ->check(CLI::IsMember({"original", "ft", "carma"}));
  train->add_option("--seeds", train_seeds, "Seeds, e.g. 1,2,3 or 1-5");
  train->add_option("--data", data_path, "Dataset TSV (overrides data.path)");
  train->add_option("--set", overrides, "Override dotted.key=value")->take_all();

  auto* cap = app.add_subcommand("cap", "Constituent-aware pooling sweep over trained runs");
  std::string cap_layers = "all", cap_modes = "all";
  cap->add_option("--layers", cap_layers, "all or comma list");
  cap->add_option("--modes", cap_modes, "all or comma list of mean,max,sum");

  auto* syn = app.add_subcommand("synonyms", "Synonym replacement consistency over trained runs");
  std::string syn_rates = "0.25,0.40", syn_seeds = "1-5";
  syn->add_option("--rates", syn_rates, "Replacement rates");
  syn->add_option("--seeds", syn_seeds, "Replacement seeds (at least 5)");

  auto* report = app.add_subcommand("report", "Summarize cap/synonyms results");
  bool svg = false;
  report->add_flag("--svg", svg, "Also write SVG line plots");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    const lab::fs::path root = root_arg.empty() ? lab::default_root() : lab::fs::path(root_arg);
    if (gen->parsed()) {
      const auto out = lab::cmd_gen(carma::task_from_string(gen_task), gen_seed, gen_n,
                                    gen_out.empty() ? root / "data" : lab::fs::path(gen_out));
      std::cout << out.tsv.string() << "\n" << out.manifest.string() << "\n";
    } else if (train->parsed()) {
      if (!data_path.empty()) overrides.push_back("data.path=" + nlohmann::json(data_path).dump());
      const auto cfg = lab::load_config(
          config_path.empty() ? std::nullopt : std::optional<lab::fs::path>(config_path), overrides);
      for (const auto& dir :
           lab::cmd_train(cfg, carma::variant_from_string(variant), parse_seeds(train_seeds), root,
                          jobs)) {
        std::cout << dir.string() << "\n";
      }
    } else if (cap->parsed()) {
      std::cout << lab::cmd_cap(root, cap_layers, cap_modes, jobs).string() << "\n";
    } else if (syn->parsed()) {
      std::cout << lab::cmd_synonyms(root, parse_rates(syn_rates), parse_seeds(syn_seeds), jobs)
                       .string()
                << "\n";
    } else if (report->parsed()) {
      std::cout << lab::cmd_report(root, svg).string() << "\n";
    }
  } catch (const carma::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const carma::ContractError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
