#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "carma/errors.hpp"
#include "carma/lab.hpp"
#include "carma/log.hpp"

using namespace carma;
namespace lab = carma::lab;
using nlohmann::json;

namespace {

lab::fs::path fresh_dir(const std::string& name) {
  const auto dir = lab::fs::temp_directory_path() / ("carma_lab_test_" + name);
  lab::fs::remove_all(dir);
  lab::fs::create_directories(dir);
  return dir;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  for (std::string line; std::getline(is, line);) out.push_back(line);
  return out;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CARMA_LAB_EXE) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

lab::LabConfig tiny_config(Task task = Task::SC) {
  return lab::parse_config(json{{"task", to_string(task)}},
                           {"data.n_items=200", "model.n_layers=2", "model.d_model=8",
                            "model.n_heads=2", "model.d_mlp=16", "train.epochs=1",
                            "eval.rates=[0.25,0.4]"});
}

}  // namespace

TEST(Config, DefaultsResolve) {
  const auto cfg = lab::parse_config(json::object());
  EXPECT_EQ(cfg.task, Task::IDM);
  EXPECT_EQ(cfg.model.n_layers, 4u);
  EXPECT_TRUE(cfg.auto_layers);
  EXPECT_EQ(cfg.train.carma.layer_start, 1u);
  EXPECT_EQ(cfg.train.carma.layer_end, 2u);
  EXPECT_EQ(cfg.synonym_seeds.size(), 5u);
  EXPECT_EQ(cfg.hash().size(), 16u);
}

TEST(Config, UnknownKeysRejected) {
  EXPECT_THROW(lab::parse_config(json{{"modle", json::object()}}), ConfigError);
  EXPECT_THROW(lab::parse_config(json{{"model", {{"depth", 3}}}}), ConfigError);
  EXPECT_THROW(lab::parse_config(json::object(), {"train.lr=0.1"}), ConfigError);
}

TEST(Config, OverridesAndValidation) {
  const auto cfg = lab::parse_config(json::object(), {"carma.lambda=0.2", "carma.layers=[1,3]"});
  EXPECT_DOUBLE_EQ(cfg.train.carma.lambda, 0.2);
  EXPECT_FALSE(cfg.auto_layers);
  EXPECT_EQ(cfg.train.carma.layer_end, 3u);
  EXPECT_NE(cfg.hash(), lab::parse_config(json::object()).hash());
  EXPECT_EQ(lab::parse_config(json::object(), {"task=sc"}).task, Task::SC);
  EXPECT_THROW(lab::parse_config(json::object(), {"carma.lambda=2"}), ConfigError);
  EXPECT_THROW(lab::parse_config(json::object(), {"carma.layers=[0,2]"}), ConfigError);
  EXPECT_THROW(lab::parse_config(json::object(), {"data.n_items=10"}), ConfigError);
  EXPECT_THROW(lab::parse_config(json::object(), {"model.n_heads=3"}), ConfigError);
  EXPECT_THROW(lab::parse_config(json::object(), {"novalue"}), ConfigError);
}

TEST(Gen, ByteIdenticalAndManifest) {
  const auto a = fresh_dir("gen_a"), b = fresh_dir("gen_b");
  const auto oa = lab::cmd_gen(Task::IDM, 1, 500, a);
  const auto ob = lab::cmd_gen(Task::IDM, 1, 500, b);
  EXPECT_EQ(oa.tsv.filename(), "idm-s1-n500.tsv");
  EXPECT_EQ(lab::read_file(oa.tsv), lab::read_file(ob.tsv));
  EXPECT_EQ(lines_of(lab::read_file(oa.tsv)).size(), 501u);
  const json manifest = json::parse(lab::read_file(oa.manifest));
  EXPECT_EQ(manifest.at("seed"), 1);
  EXPECT_EQ(manifest.at("n_items"), 500);
  const DatasetSplit back = load_dataset(oa.tsv);
  EXPECT_EQ(back.generator_seed, 1u);
  EXPECT_EQ(back.train.size() + back.validation.size() + back.test.size(), 500u);
}

TEST(Cli, ExitCodes) {
  const auto dir = fresh_dir("cli");
  EXPECT_EQ(run_cli("gen --task idm --seed 1 --n 500 --out " + dir.string()), 0);
  EXPECT_TRUE(lab::fs::exists(dir / "idm-s1-n500.tsv"));
  EXPECT_EQ(run_cli("gen --n 10 --out " + dir.string()), 2);
  EXPECT_EQ(run_cli("gen --task xyz"), 2);
  EXPECT_EQ(run_cli("train --set bogus.key=1 --root " + dir.string()), 2);
  EXPECT_EQ(run_cli("report --root " + (dir / "empty").string()), 3);
  EXPECT_EQ(run_cli(""), 2);
}

TEST(Report, EmptyRootFails) {
  EXPECT_THROW(lab::cmd_report(fresh_dir("empty_report")), std::runtime_error);
}

TEST(Parse, LayersAndModes) {
  EXPECT_EQ(lab::parse_layers("all", 3), (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_EQ(lab::parse_layers("2,3", 4), (std::vector<std::size_t>{2, 3}));
  EXPECT_THROW(lab::parse_layers("5", 4), ConfigError);
  EXPECT_EQ(lab::parse_modes("all").size(), 3u);
  EXPECT_EQ(lab::parse_modes("max"), std::vector<PoolMode>{PoolMode::Max});
  EXPECT_THROW(lab::parse_modes("median"), ConfigError);
}

TEST(Pipeline, EndToEndIsReproducible) {
  const auto root = fresh_dir("pipeline");
  const auto cfg = tiny_config();
  const std::vector<std::uint64_t> seeds{1, 2};
  lab::cmd_train(cfg, Variant::Original, seeds, root);
  lab::cmd_train(cfg, Variant::FT, seeds, root);
  const auto dirs = lab::cmd_train(cfg, Variant::CARMA, seeds, root, 2);
  ASSERT_EQ(dirs.size(), 2u);
  for (const char* f : {"model.bin", "train_log.jsonl", "summary.json"})
    EXPECT_TRUE(lab::fs::exists(dirs[0] / f)) << f;
  EXPECT_EQ(lab::discover_runs(root).size(), 6u);

  const std::string cap = lab::read_file(lab::cmd_cap(root, "all", "all"));
  const auto cap_lines = lines_of(cap);
  EXPECT_EQ(cap_lines[0].rfind("# carma-lab", 0), 0u);
  EXPECT_EQ(cap_lines[1], "variant,task,intervention,param,layer,layer_norm,seed,metric,value");
  // 6 runs x 2 layers x (3 modes + average)
  EXPECT_EQ(cap_lines.size(), 2u + 6 * 2 * 4);

  const std::vector<std::uint64_t> syn_seeds{1, 2, 3, 4, 5};
  const std::string syn = lab::read_file(lab::cmd_synonyms(root, {0.25, 0.40}, syn_seeds));
  const auto syn_lines = lines_of(syn);
  EXPECT_EQ(syn_lines[1], "Model,Ver.,Task,Int.,CS,CV,NI,runs,flag");
  // three variants x two rates
  EXPECT_EQ(syn_lines.size(), 2u + 3 * 2);
  for (std::size_t i = 2; i < syn_lines.size(); ++i)
    EXPECT_NE(syn_lines[i].find("insufficient"), std::string::npos) << syn_lines[i];

  const auto summary = lab::cmd_report(root, true);
  EXPECT_TRUE(lab::fs::exists(summary));
  EXPECT_TRUE(lab::fs::exists(root / "report" / "cap_sc.dat"));

  // Rerunning the whole chain in a second root reproduces every artifact.
  const auto again = fresh_dir("pipeline_again");
  lab::cmd_train(cfg, Variant::Original, seeds, again);
  lab::cmd_train(cfg, Variant::FT, seeds, again, 2);
  lab::cmd_train(cfg, Variant::CARMA, seeds, again);
  EXPECT_EQ(lab::read_file(lab::cmd_cap(again, "all", "all", 2)), cap);
  EXPECT_EQ(lab::read_file(lab::cmd_synonyms(again, {0.25, 0.40}, syn_seeds, 2)), syn);
  EXPECT_EQ(lab::read_file(root / "runs/carma/sc/1/model.bin"),
            lab::read_file(again / "runs/carma/sc/1/model.bin"));
}

TEST(Pipeline, MissingBaselineLeavesNiEmpty) {
  const auto root = fresh_dir("no_baseline");
  lab::cmd_train(tiny_config(), Variant::CARMA, {1}, root);
  ScopedWarningCapture capture;
  const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  const auto lines = lines_of(lab::read_file(lab::cmd_synonyms(root, {0.25}, seeds)));
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_GE(capture.count(), 1);
  // Model,Ver.,Task,Int.,CS,CV,NI,...: CV and NI are both empty with one run.
  EXPECT_NE(lines[2].find(",,,1,"), std::string::npos) << lines[2];
  EXPECT_THROW(lab::cmd_synonyms(root, {0.25}, {1, 2}), ConfigError);
}
