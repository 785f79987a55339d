#pragma once

// Experiment orchestration behind the carma_lab command line: config schema,
// dataset files, run directories and CSV/markdown reports.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "carma/interventions.hpp"
#include "carma/metrics.hpp"
#include "carma/model.hpp"
#include "carma/tasks.hpp"
#include "carma/trainer.hpp"
#include "json.hpp"

namespace carma::lab {

namespace fs = std::filesystem;

inline constexpr const char* kCodeVersion = "carma-lab 0.1.0";

struct LabConfig {
  Task task = Task::IDM;
  std::uint64_t data_seed = 1;
  std::size_t n_items = 1600;
  std::string data_path;  // TSV; empty means generate from (task, data_seed, n_items)
  TransformerConfig model;
  TrainConfig train;
  bool auto_layers = true;  // use default_layer_range for the CARMA layers
  std::vector<double> rates;
  std::vector<std::uint64_t> synonym_seeds;
  nlohmann::ordered_json resolved;  // full config after defaults and overrides

  // FNV-1a of the resolved config, as 16 hex digits.
  std::string hash() const;
};

nlohmann::ordered_json default_config();

// Merges `user` over the defaults, then applies "dotted.key=value" overrides
// (value parsed as JSON, falling back to a string). Throws ConfigError on
// unknown keys, type mismatches or values that fail validation.
LabConfig parse_config(const nlohmann::json& user, const std::vector<std::string>& overrides = {});
LabConfig load_config(const std::optional<fs::path>& path,
                      const std::vector<std::string>& overrides = {});

// Root for outputs: $CARMA_LAB_DIR, else ./carma_lab_out.
fs::path default_root();

// Writes through a temporary sibling and renames it into place.
void write_atomic(const fs::path& path, const std::string& content);
std::string read_file(const fs::path& path);

// "# <code version> config=<hash>" header line for CSV outputs.
std::string provenance_line(const std::string& config_hash);

// Fixed-format number for reproducible CSVs.
std::string fmt(double value, int precision = 6);

// ---- gen ----

struct GenOutput {
  fs::path tsv;
  fs::path manifest;
};

// Writes <out_dir>/<task>-s<seed>-n<n>.tsv and a .manifest.json beside it.
GenOutput cmd_gen(Task task, std::uint64_t seed, std::size_t n_items, const fs::path& out_dir);

DatasetSplit dataset_for(const LabConfig& cfg);

// ---- train ----

fs::path run_dir(const fs::path& root, Variant variant, Task task, std::uint64_t seed);

// Trains one run per seed into runs/<variant>/<task>/<seed>/ (model.bin,
// train_log.jsonl, summary.json). FT forces lambda = 0. FT and CARMA start
// from the Original weights of the same seed. Runs execute on up to `jobs`
// threads.
std::vector<fs::path> cmd_train(const LabConfig& cfg, Variant variant,
                                const std::vector<std::uint64_t>& seeds, const fs::path& root,
                                std::size_t jobs = 1);

struct RunInfo {
  fs::path dir;
  Variant variant = Variant::FT;
  Task task = Task::IDM;
  std::uint64_t seed = 0;
  LabConfig config;
};

// Every run directory under root/runs, in (variant, task, seed) order.
std::vector<RunInfo> discover_runs(const fs::path& root);

// ---- cap ----

// "all" -> 1..L, otherwise a comma list.
std::vector<std::size_t> parse_layers(const std::string& spec, std::size_t n_layers);
// "all" -> mean,max,sum, otherwise a comma list.
std::vector<PoolMode> parse_modes(const std::string& spec);

// CSV columns: variant,task,intervention,param,layer,layer_norm,seed,metric,value.
// One row per (run, layer, mode) plus a three-mode average row per layer.
fs::path cmd_cap(const fs::path& root, const std::string& layers, const std::string& modes,
                 std::size_t jobs = 1);

// ---- synonyms ----

// Writes synonyms.csv (Model,Ver.,Task,Int.,CS,CV,NI,runs,flag) and
// synonyms_raw.csv (per run and replacement seed). CS is the mean over
// training runs of each run's mean ConsistSyn; CV is taken across runs and
// flagged "insufficient" with fewer than five runs; NI is against FT.
fs::path cmd_synonyms(const fs::path& root, const std::vector<double>& rates,
                      const std::vector<std::uint64_t>& seeds, std::size_t jobs = 1);

// ---- report ----

// Reads cap.csv / synonyms.csv under root and writes report/summary.md plus
// report/cap_<task>.dat (layer_norm, accuracy, variant). Throws
// std::runtime_error when neither input exists.
fs::path cmd_report(const fs::path& root, bool svg = false);

// Minimal SVG line plot of (x, y) series.
std::string svg_line_plot(const std::string& title,
                          const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>& series);

}  // namespace carma::lab
