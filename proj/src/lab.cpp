#include "carma/lab.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "carma/errors.hpp"
#include "carma/eval.hpp"
#include "carma/hash.hpp"
#include "carma/log.hpp"

namespace carma::lab {

using nlohmann::json;
using nlohmann::ordered_json;

// ---- config ----

ordered_json default_config() {
  return ordered_json::parse(R"({
    "task": "idm",
    "data": {"seed": 1, "n_items": 1600, "path": ""},
    "model": {"n_layers": 4, "d_model": 32, "n_heads": 4, "d_mlp": 128, "max_seq": 32,
              "init_std": 0.02},
    "train": {"epochs": 5, "batch_size": 16, "learning_rate": 0.006, "warmup_steps": 500,
              "beta1": 0.9, "beta2": 0.999, "clip_norm": 1.0, "pretrain_epochs": 1},
    "carma": {"lambda": 0.4, "gamma": 0.5, "eta": 0.5, "tau": 0.1, "epsilon": 1e-8,
              "layers": "auto", "max_negatives": 16, "seed": 0,
              "average_over_anchors": false},
    "eval": {"rates": [0.25, 0.40], "synonym_seeds": [1, 2, 3, 4, 5]}
  })");
}

namespace {

void merge_checked(ordered_json& base, const json& user, const std::string& prefix) {
  if (!user.is_object()) throw ConfigError("config: '" + prefix + "' must be an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("config: unknown key '" + key + "'");
    ordered_json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_checked(slot, it.value(), key);
    } else {
      slot = it.value();
    }
  }
}

void apply_override(ordered_json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("config: override '" + assignment + "' is not key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  ordered_json* node = &cfg;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
    if (!node->is_object() || !node->contains(part)) {
      throw ConfigError("config: unknown key '" + key + "'");
    }
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) throw ConfigError("config: '" + key + "' is a section, not a value");
  ordered_json value = ordered_json::parse(raw, nullptr, false);
  *node = value.is_discarded() ? ordered_json(raw) : value;
}

template <class T>
T get(const ordered_json& j, const char* section, const char* key) {
  try {
    return j.at(section).at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + section + "." + key + ": " + e.what());
  }
}

}  // namespace

std::string LabConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(resolved.dump())));
  return buf;
}

LabConfig parse_config(const json& user, const std::vector<std::string>& overrides) {
  ordered_json cfg = default_config();
  merge_checked(cfg, user, "");
  for (const auto& o : overrides) apply_override(cfg, o);

  LabConfig out;
  try {
    out.task = task_from_string(cfg.at("task").get<std::string>());
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: task: ") + e.what());
  }
  out.data_seed = get<std::uint64_t>(cfg, "data", "seed");
  out.n_items = get<std::size_t>(cfg, "data", "n_items");
  out.data_path = get<std::string>(cfg, "data", "path");

  out.model.n_layers = get<std::size_t>(cfg, "model", "n_layers");
  out.model.d_model = get<std::size_t>(cfg, "model", "d_model");
  out.model.n_heads = get<std::size_t>(cfg, "model", "n_heads");
  out.model.d_mlp = get<std::size_t>(cfg, "model", "d_mlp");
  out.model.max_seq = get<std::size_t>(cfg, "model", "max_seq");
  out.model.init_std = get<double>(cfg, "model", "init_std");
  out.model.vocab_size = Tokenizer::standard().vocab_size();

  TrainConfig& t = out.train;
  t.epochs = get<std::size_t>(cfg, "train", "epochs");
  t.batch_size = get<std::size_t>(cfg, "train", "batch_size");
  t.learning_rate = get<double>(cfg, "train", "learning_rate");
  t.warmup_steps = get<std::size_t>(cfg, "train", "warmup_steps");
  t.beta1 = get<double>(cfg, "train", "beta1");
  t.beta2 = get<double>(cfg, "train", "beta2");
  t.clip_norm = get<double>(cfg, "train", "clip_norm");
  t.pretrain_epochs = get<std::size_t>(cfg, "train", "pretrain_epochs");

  CarmaConfig& c = t.carma;
  c.lambda = get<double>(cfg, "carma", "lambda");
  c.gamma = get<double>(cfg, "carma", "gamma");
  c.eta = get<double>(cfg, "carma", "eta");
  c.tau = get<double>(cfg, "carma", "tau");
  c.epsilon = get<double>(cfg, "carma", "epsilon");
  c.max_negatives = get<std::size_t>(cfg, "carma", "max_negatives");
  c.seed = get<std::uint64_t>(cfg, "carma", "seed");
  c.average_over_anchors = get<bool>(cfg, "carma", "average_over_anchors");
  const ordered_json& layers = cfg.at("carma").at("layers");
  try {
    if (layers.is_string() && layers.get<std::string>() == "auto") {
      out.auto_layers = true;
      std::tie(c.layer_start, c.layer_end) = default_layer_range(out.model.n_layers);
    } else {
      const auto range = layers.get<std::vector<std::size_t>>();
      if (range.size() != 2) throw ConfigError("carma.layers needs [start, end]");
      out.auto_layers = false;
      c.layer_start = range[0];
      c.layer_end = range[1];
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: carma.layers must be \"auto\" or [start, end]: ") +
                      e.what());
  }

  out.rates = get<std::vector<double>>(cfg, "eval", "rates");
  out.synonym_seeds = get<std::vector<std::uint64_t>>(cfg, "eval", "synonym_seeds");

  try {
    out.model.validate();
    t.validate(out.model.n_layers);
    c.validate(out.model.n_layers);
    if (out.n_items < kMinItems) {
      throw ContractError("data.n_items must be at least " + std::to_string(kMinItems));
    }
    for (double r : out.rates) {
      if (!(r > 0.0 && r <= 1.0)) throw ContractError("eval.rates must lie in (0, 1]");
    }
  } catch (const ContractError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  out.resolved = std::move(cfg);
  return out;
}

LabConfig load_config(const std::optional<fs::path>& path,
                      const std::vector<std::string>& overrides) {
  json user = json::object();
  if (path) {
    std::ifstream is(*path);
    if (!is) throw ConfigError("config: cannot open " + path->string());
    try {
      user = json::parse(is);
    } catch (const json::exception& e) {
      throw ConfigError("config: " + path->string() + ": " + e.what());
    }
  }
  return parse_config(user, overrides);
}

// ---- files ----

fs::path default_root() {
  if (const char* env = std::getenv("CARMA_LAB_DIR"); env && *env) return env;
  return "carma_lab_out";
}

void write_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp" + std::to_string(fnv1a(path.string() + std::to_string(
                                           std::hash<std::thread::id>{}(std::this_thread::get_id()))));
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os << content;
    if (!os.flush()) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::stringstream buf;
  buf << is.rdbuf();
  return buf.str();
}

std::string provenance_line(const std::string& config_hash) {
  return std::string("# ") + kCodeVersion + " config=" + config_hash + "\n";
}

std::string fmt(double value, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, value);
  return buf;
}

namespace {

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Runs fn(i) for i in [0, n) on up to `jobs` threads; rethrows the first error.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t j = 0; j < jobs; ++j) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::string model_name(const TransformerConfig& m) {
  return "toy-L" + std::to_string(m.n_layers) + "-d" + std::to_string(m.d_model);
}

}  // namespace

// ---- gen ----

GenOutput cmd_gen(Task task, std::uint64_t seed, std::size_t n_items, const fs::path& out_dir) {
  const DatasetSplit data = generate(task, seed, n_items);
  const std::string tsv = dataset_to_tsv(data);
  const std::string stem =
      to_string(task) + "-s" + std::to_string(seed) + "-n" + std::to_string(n_items);
  GenOutput out{out_dir / (stem + ".tsv"), out_dir / (stem + ".manifest.json")};
  ordered_json manifest;
  manifest["generator"] = kGeneratorVersion;
  manifest["generator_hash"] = hex(fnv1a(kGeneratorVersion));
  manifest["content_hash"] = hex(fnv1a(tsv));
  manifest["task"] = to_string(task);
  manifest["seed"] = seed;
  manifest["n_items"] = n_items;
  manifest["train"] = data.train.size();
  manifest["validation"] = data.validation.size();
  manifest["test"] = data.test.size();
  write_atomic(out.tsv, tsv);
  write_atomic(out.manifest, manifest.dump(2) + "\n");
  return out;
}

DatasetSplit dataset_for(const LabConfig& cfg) {
  if (!cfg.data_path.empty()) {
    DatasetSplit data = load_dataset(cfg.data_path);
    if (data.task != cfg.task) {
      throw ConfigError("config: dataset " + cfg.data_path + " holds task " +
                        to_string(data.task) + " but config task is " + to_string(cfg.task));
    }
    return data;
  }
  return generate(cfg.task, cfg.data_seed, cfg.n_items);
}

// ---- train ----

fs::path run_dir(const fs::path& root, Variant variant, Task task, std::uint64_t seed) {
  return root / "runs" / to_string(variant) / to_string(task) / std::to_string(seed);
}

namespace {

std::string epochs_json(const TrainLog& log) {
  ordered_json arr = ordered_json::array();
  for (const auto& e : log.epochs) {
    arr.push_back({{"epoch", e.epoch}, {"validation_accuracy", e.validation_accuracy}});
  }
  return arr.dump();
}

Transformer original_for(const LabConfig& cfg, const DatasetSplit& data, const fs::path& root,
                         std::uint64_t seed) {
  const fs::path dir = run_dir(root, Variant::Original, cfg.task, seed);
  if (fs::exists(dir / "model.bin") && fs::exists(dir / "summary.json")) {
    const json summary = json::parse(read_file(dir / "summary.json"));
    if (summary.value("config_hash", "") == cfg.hash()) return Transformer::load(dir / "model.bin");
  }
  Transformer model(cfg.model, seed);
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  pretrain(model, data, tc);
  return model;
}

}  // namespace

std::vector<fs::path> cmd_train(const LabConfig& cfg, Variant variant,
                                const std::vector<std::uint64_t>& seeds, const fs::path& root,
                                std::size_t jobs) {
  if (seeds.empty()) throw ConfigError("train: no seeds given");
  LabConfig run_cfg = cfg;
  if (variant == Variant::FT) {
    run_cfg.train.carma.lambda = 0.0;
    run_cfg.resolved["carma"]["lambda"] = 0.0;
  }
  run_cfg.train.variant = variant;
  const DatasetSplit data = dataset_for(run_cfg);
  // Original runs are keyed by the config they were pretrained under.
  const LabConfig& base_cfg = cfg;
  std::vector<fs::path> dirs(seeds.size());
  parallel_for(seeds.size(), jobs, [&](std::size_t i) {
    const std::uint64_t seed = seeds[i];
    const fs::path dir = run_dir(root, variant, run_cfg.task, seed);
    TrainConfig tc = run_cfg.train;
    tc.seed = seed;
    TrainLog log;
    Transformer model(run_cfg.model, seed);
    if (variant == Variant::Original) {
      log = pretrain(model, data, tc);
    } else {
      model = original_for(base_cfg, data, root, seed);
      log = train(model, data, tc);
    }
    const double test_acc = evaluate_accuracy(model, data.test);
    fs::create_directories(dir);
    model.save(dir / "model.tmp.bin");
    fs::rename(dir / "model.tmp.bin", dir / "model.bin");
    write_atomic(dir / "train_log.jsonl", log.to_jsonl());
    ordered_json summary;
    summary["variant"] = to_string(variant);
    summary["task"] = to_string(run_cfg.task);
    summary["seed"] = seed;
    summary["config_hash"] = variant == Variant::Original ? base_cfg.hash() : run_cfg.hash();
    summary["config"] = run_cfg.resolved;
    summary["epochs"] = ordered_json::parse(epochs_json(log));
    summary["best_epoch"] = log.best_epoch;
    summary["best_validation_accuracy"] = log.best_validation_accuracy;
    summary["test_accuracy"] = test_acc;
    summary["train_wall_ms"] = log.total_wall_ms();
    write_atomic(dir / "summary.json", summary.dump(2) + "\n");
    dirs[i] = dir;
  });
  return dirs;
}

std::vector<RunInfo> discover_runs(const fs::path& root) {
  std::vector<RunInfo> runs;
  const fs::path base = root / "runs";
  if (!fs::exists(base)) return runs;
  for (Variant v : {Variant::Original, Variant::FT, Variant::CARMA}) {
    for (Task t : {Task::IDM, Task::SC}) {
      const fs::path dir = base / to_string(v) / to_string(t);
      if (!fs::is_directory(dir)) continue;
      std::vector<RunInfo> found;
      for (const auto& entry : fs::directory_iterator(dir)) {
        if (!fs::exists(entry.path() / "summary.json") || !fs::exists(entry.path() / "model.bin"))
          continue;
        const json summary = json::parse(read_file(entry.path() / "summary.json"));
        RunInfo info;
        info.dir = entry.path();
        info.variant = v;
        info.task = t;
        info.seed = summary.at("seed").get<std::uint64_t>();
        info.config = parse_config(summary.at("config"));
        found.push_back(std::move(info));
      }
      std::sort(found.begin(), found.end(),
                [](const RunInfo& a, const RunInfo& b) { return a.seed < b.seed; });
      for (auto& r : found) runs.push_back(std::move(r));
    }
  }
  return runs;
}

// ---- cap ----

namespace {

std::vector<std::string> split_list(const std::string& spec) {
  std::vector<std::string> out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string runs_hash(const std::vector<RunInfo>& runs, const std::string& extra) {
  std::uint64_t h = fnv1a(extra);
  for (const auto& r : runs) h = fnv1a(r.config.hash() + r.dir.filename().string(), h);
  return hex(h);
}

}  // namespace

std::vector<std::size_t> parse_layers(const std::string& spec, std::size_t n_layers) {
  std::vector<std::size_t> out;
  if (spec == "all") {
    for (std::size_t k = 1; k <= n_layers; ++k) out.push_back(k);
    return out;
  }
  for (const auto& item : split_list(spec)) {
    std::size_t k = 0;
    try {
      k = std::stoul(item);
    } catch (const std::exception&) {
      throw ConfigError("cap: bad layer '" + item + "'");
    }
    if (k < 1 || k > n_layers) {
      throw ConfigError("cap: layer " + item + " outside [1, " + std::to_string(n_layers) + "]");
    }
    out.push_back(k);
  }
  if (out.empty()) throw ConfigError("cap: empty layer list");
  return out;
}

std::vector<PoolMode> parse_modes(const std::string& spec) {
  if (spec == "all") return {std::begin(kAllPoolModes), std::end(kAllPoolModes)};
  std::vector<PoolMode> out;
  for (const auto& item : split_list(spec)) {
    try {
      out.push_back(pool_mode_from_string(item));
    } catch (const ContractError& e) {
      throw ConfigError(std::string("cap: ") + e.what());
    }
  }
  if (out.empty()) throw ConfigError("cap: empty mode list");
  return out;
}

fs::path cmd_cap(const fs::path& root, const std::string& layers, const std::string& modes,
                 std::size_t jobs) {
  const auto runs = discover_runs(root);
  if (runs.empty()) throw std::runtime_error("cap: no runs under " + (root / "runs").string());
  const auto pool_modes = parse_modes(modes);
  std::vector<std::string> blocks(runs.size());
  parallel_for(runs.size(), jobs, [&](std::size_t i) {
    const RunInfo& run = runs[i];
    const Transformer model = Transformer::load(run.dir / "model.bin");
    const DatasetSplit data = dataset_for(run.config);
    std::string block;
    for (std::size_t k : parse_layers(layers, model.config().n_layers)) {
      double sum = 0.0;
      double norm = 0.0;
      for (PoolMode mode : pool_modes) {
        const CapResult r = run_cap_eval(model, data.test, k, mode);
        norm = r.normalized_layer;
        sum += r.accuracy;
        block += to_string(run.variant) + "," + to_string(run.task) + ",cap," + to_string(mode) +
                 "," + std::to_string(k) + "," + fmt(norm, 4) + "," + std::to_string(run.seed) +
                 ",accuracy," + fmt(r.accuracy) + "\n";
      }
      block += to_string(run.variant) + "," + to_string(run.task) + ",cap,average," +
               std::to_string(k) + "," + fmt(norm, 4) + "," + std::to_string(run.seed) +
               ",accuracy," + fmt(sum / static_cast<double>(pool_modes.size())) + "\n";
    }
    blocks[i] = std::move(block);
  });
  std::string csv = provenance_line(runs_hash(runs, "cap:" + layers + ":" + modes));
  csv += "variant,task,intervention,param,layer,layer_norm,seed,metric,value\n";
  for (const auto& b : blocks) csv += b;
  const fs::path out = root / "cap.csv";
  write_atomic(out, csv);
  return out;
}

// ---- synonyms ----

fs::path cmd_synonyms(const fs::path& root, const std::vector<double>& rates,
                      const std::vector<std::uint64_t>& seeds, std::size_t jobs) {
  const auto runs = discover_runs(root);
  if (runs.empty()) throw std::runtime_error("synonyms: no runs under " + (root / "runs").string());
  if (rates.empty()) throw ConfigError("synonyms: no rates");
  if (seeds.size() < 5) throw ConfigError("synonyms: at least 5 replacement seeds are required");
  std::vector<std::vector<SynonymEval>> evals(runs.size());
  parallel_for(runs.size(), jobs, [&](std::size_t i) {
    const Transformer model = Transformer::load(runs[i].dir / "model.bin");
    const DatasetSplit data = dataset_for(runs[i].config);
    const SynonymLexicon lexicon = SynonymLexicon::for_task(runs[i].task);
    for (double rate : rates) {
      evals[i].push_back(run_synonym_eval(model, data.test, rate, seeds, lexicon));
    }
  });

  std::string key = "syn:";
  for (double r : rates) key += fmt(r, 4) + ",";
  for (auto s : seeds) key += std::to_string(s) + ",";
  const std::string prov = provenance_line(runs_hash(runs, key));

  std::string raw = prov + "variant,task,intervention,param,layer,seed,metric,value\n";
  struct Group {
    std::vector<double> run_means;
    std::string model;
  };
  // (task, rate index, variant) -> per-run means
  std::map<std::tuple<int, std::size_t, int>, Group> groups;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    for (std::size_t r = 0; r < rates.size(); ++r) {
      const SynonymEval& ev = evals[i][r];
      for (const auto& s : ev.per_seed) {
        raw += to_string(runs[i].variant) + "," + to_string(runs[i].task) + ",synonym," +
               fmt(rates[r], 2) + ",-," + std::to_string(runs[i].seed) + "/" +
               std::to_string(s.seed) + ",consist_syn," +
               (s.consist_syn ? fmt(*s.consist_syn) : std::string()) + "\n";
      }
      Group& g = groups[{static_cast<int>(runs[i].task), r, static_cast<int>(runs[i].variant)}];
      g.model = model_name(runs[i].config.model);
      if (auto m = ev.mean()) g.run_means.push_back(*m);
    }
  }

  std::string csv = prov + "Model,Ver.,Task,Int.,CS,CV,NI,runs,flag\n";
  for (const auto& [k, g] : groups) {
    const auto [task_i, r, variant_i] = k;
    const auto variant = static_cast<Variant>(variant_i);
    const auto task = static_cast<Task>(task_i);
    std::string cs, cv_text, ni_text, flag;
    std::optional<double> mean_cs;
    if (!g.run_means.empty()) {
      double s = 0.0;
      for (double v : g.run_means) s += v;
      mean_cs = s / static_cast<double>(g.run_means.size());
      cs = fmt(*mean_cs, 2);
    } else {
      flag = "no-correct-before";
    }
    if (g.run_means.size() >= 2) {
      if (auto c = cv(g.run_means)) cv_text = fmt(*c, 4);
    }
    if (g.run_means.size() < 5) flag = flag.empty() ? "insufficient" : flag;
    if (variant != Variant::FT && mean_cs) {
      auto base = groups.find({task_i, r, static_cast<int>(Variant::FT)});
      std::optional<double> base_cs;
      if (base != groups.end() && !base->second.run_means.empty()) {
        double s = 0.0;
        for (double v : base->second.run_means) s += v;
        base_cs = s / static_cast<double>(base->second.run_means.size());
      }
      if (!base_cs) {
        warn("synonyms: no FT baseline for " + to_string(task) + " at rate " + fmt(rates[r], 2) +
             "; NI left empty");
      } else if (auto n = ni(*mean_cs, *base_cs)) {
        ni_text = fmt(*n, 2);
      }
    }
    csv += g.model + "," + to_string(variant) + "," + to_string(task) + "," +
           fmt(rates[r] * 100.0, 0) + "%," + cs + "," + cv_text + "," + ni_text + "," +
           std::to_string(g.run_means.size()) + "," + flag + "\n";
  }
  write_atomic(root / "synonyms_raw.csv", raw);
  const fs::path out = root / "synonyms.csv";
  write_atomic(out, csv);
  return out;
}

// ---- report ----

namespace {

std::vector<std::vector<std::string>> read_csv_rows(const fs::path& path) {
  std::vector<std::vector<std::string>> rows;
  std::stringstream ss(read_file(path));
  std::string line;
  bool header = true;
  while (std::getline(ss, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (header) {
      header = false;
      continue;
    }
    std::vector<std::string> cols;
    std::size_t start = 0;
    while (true) {
      const auto pos = line.find(',', start);
      cols.push_back(line.substr(start, pos == std::string::npos ? pos : pos - start));
      if (pos == std::string::npos) break;
      start = pos + 1;
    }
    rows.push_back(std::move(cols));
  }
  return rows;
}

}  // namespace

std::string svg_line_plot(
    const std::string& title,
    const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>& series) {
  const double w = 480, h = 320, pad = 48;
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"320\">\n";
  svg += "<text x=\"240\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" + title + "</text>\n";
  svg += "<line x1=\"48\" y1=\"272\" x2=\"456\" y2=\"272\" stroke=\"black\"/>\n";
  svg += "<line x1=\"48\" y1=\"48\" x2=\"48\" y2=\"272\" stroke=\"black\"/>\n";
  svg += "<text x=\"252\" y=\"300\" text-anchor=\"middle\" font-size=\"11\">layer / L</text>\n";
  svg += "<text x=\"14\" y=\"160\" font-size=\"11\" transform=\"rotate(-90 14 160)\">accuracy %</text>\n";
  auto px = [&](double x) { return pad + x * (w - 2 * pad); };
  auto py = [&](double y) { return h - pad - y / 100.0 * (h - 2 * pad); };
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = colors[s % 5];
    std::string points;
    for (const auto& [x, y] : series[s].second) points += fmt(px(x), 1) + "," + fmt(py(y), 1) + " ";
    svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" points=\"" + points +
           "\"/>\n";
    svg += "<text x=\"" + fmt(w - pad - 60, 0) + "\" y=\"" + fmt(40 + 14.0 * static_cast<double>(s), 0) +
           "\" font-size=\"11\" fill=\"" + color + "\">" + series[s].first + "</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

fs::path cmd_report(const fs::path& root, bool svg) {
  const fs::path cap_csv = root / "cap.csv";
  const fs::path syn_csv = root / "synonyms.csv";
  const bool has_cap = fs::exists(cap_csv);
  const bool has_syn = fs::exists(syn_csv);
  if (!has_cap && !has_syn) {
    throw std::runtime_error("report: empty report, no cap.csv or synonyms.csv under " +
                             root.string());
  }
  const fs::path out_dir = root / "report";
  std::string md = "# CARMA lab report\n\n";

  if (has_cap) {
    // task -> variant -> layer_norm -> (sum, count) over seeds of the mode average
    std::map<std::string, std::map<std::string, std::map<std::string, std::pair<double, int>>>> acc;
    for (const auto& row : read_csv_rows(cap_csv)) {
      if (row.size() != 9 || row[3] != "average") continue;
      auto& cell = acc[row[1]][row[0]][row[5]];
      cell.first += std::stod(row[8]);
      cell.second += 1;
    }
    md += "## CAP accuracy (mean over pooling modes and seeds)\n\n";
    for (const auto& [task, by_variant] : acc) {
      std::string dat = "# x=layer/L y=accuracy series=variant\nlayer_norm,accuracy,variant\n";
      std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>> series;
      md += "### " + task + "\n\n| variant | layer/L | accuracy |\n|---|---|---|\n";
      for (Variant v : {Variant::Original, Variant::FT, Variant::CARMA}) {
        auto it = by_variant.find(to_string(v));
        if (it == by_variant.end()) continue;
        series.push_back({it->first, {}});
        for (const auto& [x, cell] : it->second) {
          const double y = cell.first / cell.second;
          dat += x + "," + fmt(y, 4) + "," + it->first + "\n";
          md += "| " + it->first + " | " + x + " | " + fmt(y, 2) + " |\n";
          series.back().second.push_back({std::stod(x), y});
        }
      }
      md += "\n";
      write_atomic(out_dir / ("cap_" + task + ".dat"), dat);
      if (svg) write_atomic(out_dir / ("cap_" + task + ".svg"), svg_line_plot("CAP " + task, series));
    }
  }
  if (has_syn) {
    md += "## Synonym replacement\n\n| Model | Ver. | Task | Int. | CS | CV | NI | runs | flag |\n"
          "|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& row : read_csv_rows(syn_csv)) {
      md += "|";
      for (const auto& c : row) md += " " + c + " |";
      md += "\n";
    }
    md += "\n";
  }
  const fs::path summary = out_dir / "summary.md";
  write_atomic(summary, md);
  return summary;
}

}  // namespace carma::lab
