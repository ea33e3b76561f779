// Copyright 2026 The bpfsim Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// bpfsim command-line driver.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "bpf/error.hpp"
#include "bpf/protocol.hpp"

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string method;
  std::string grid = "table5";
  bool dump_bp = false;
  bool dump_bf = false;
  std::vector<std::string> inputs;
};

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw bpf::Error("cannot write " + path.string());
  out << text;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw bpf::Error("missing run artifact: " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw bpf::Error(path.string() + ": parse error at byte " + std::to_string(e.byte));
  }
}

bpf::ExperimentConfig load(const Options& o) {
  bpf::ExperimentConfig cfg = o.config.empty() ? bpf::ExperimentConfig{} : bpf::load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.method.empty()) cfg.method = bpf::parse_method(o.method);
  cfg.validate();
  return cfg;
}

int gen_data(const Options& o) {
  const auto cfg = load(o);
  const auto registry = cfg.registry();
  const auto bench = bpf::build_stage_datasets(cfg.synth, registry, cfg.seed);
  const std::string hash = bpf::config_hash(cfg.synth);
  fs::create_directories(o.out);
  nlohmann::json files = nlohmann::json::array();
  for (const auto& ds : bench.train) {
    const std::string name = "train_stage_" + std::to_string(ds.stage + 1) + ".json";
    bpf::save_dataset((fs::path(o.out) / name).string(), ds, registry, hash);
    files.push_back(name);
  }
  bpf::save_dataset((fs::path(o.out) / "test.json").string(), bench.test, registry, hash);
  files.push_back("test.json");
  const nlohmann::json manifest{{"tool", "bpfsim"},
                                {"version", bpf::kVersion},
                                {"compiler", __VERSION__},
                                {"seed", cfg.seed},
                                {"synth_hash", hash},
                                {"config_hash", bpf::hash_of(cfg)},
                                {"files", files},
                                {"config", bpf::to_json(cfg)}};
  write_file(fs::path(o.out) / "manifest.json", manifest.dump(2) + "\n");
  return 0;
}

int run(const Options& o) {
  const auto cfg = load(o);
  bpf::DumpOptions dump;
  if (o.dump_bp || o.dump_bf) {
    dump.dir = (fs::path(o.out) / "dump").string();
    dump.bridge_past = o.dump_bp;
    dump.bridge_future = o.dump_bf;
  }
  const auto report = bpf::run_experiment(cfg, o.out, dump);
  const auto& final_map = report.final_stage().map;
  std::cerr << report.method << " seed " << report.seed << ": final all mAP "
            << bpf::format_double(final_map.all_map) << "\n";
  return 0;
}

int ablate(const Options& o) {
  const auto base = load(o);
  const auto rows = bpf::ablation_grid(o.grid, base);
  std::ostringstream csv;
  csv << "row,method,old_map,new_map,all_map,avg\n";
  auto opt = [](const std::optional<double>& v) { return v ? bpf::format_double(*v) : std::string(); };
  for (const auto& row : rows) {
    std::string name = "row_" + row.label;
    std::replace_if(name.begin(), name.end(), [](char c) { return c == '=' || c == '/'; }, '_');
    const auto report = bpf::run_experiment(row.config, (fs::path(o.out) / name).string());
    const auto& m = report.final_stage().map;
    csv << row.label << ',' << report.method << ',' << opt(m.old_map) << ',' << opt(m.new_map)
        << ',' << bpf::format_double(m.all_map) << ',' << bpf::format_double(m.avg) << '\n';
    std::cerr << "row " << row.label << " done\n";
  }
  write_file(fs::path(o.out) / (o.grid + ".csv"), csv.str());
  const nlohmann::json manifest{{"tool", "bpfsim"},
                                {"version", bpf::kVersion},
                                {"grid", o.grid},
                                {"seed", base.seed},
                                {"config_hash", bpf::hash_of(base)},
                                {"config", bpf::to_json(base)}};
  write_file(fs::path(o.out) / "manifest.json", manifest.dump(2) + "\n");
  return 0;
}

std::string recall_cell(const nlohmann::json& stat) {
  const auto& v = stat.at("recall");
  return v.is_null() ? std::string() : bpf::format_double(v.get<double>());
}

std::string analysis_output(const Options& o, const std::string& fallback) {
  return o.out.empty() ? (fs::path(o.inputs.front()) / fallback).string() : o.out;
}

int analyze_coocc(const Options& o) {
  const auto report = read_json(fs::path(o.inputs.front()) / "report.json");
  std::ostringstream csv;
  csv << "stage,past,current,future\n";
  for (const auto& s : report.at("stages")) {
    const auto& c = s.at("stats").at("cooccurrence");
    csv << s.at("stage").get<int>() << ',' << bpf::format_double(c.at("past").get<double>()) << ','
        << bpf::format_double(c.at("current").get<double>()) << ','
        << bpf::format_double(c.at("future").get<double>()) << '\n';
  }
  write_file(analysis_output(o, "coocc.csv"), csv.str());
  return 0;
}

int analyze_recall(const Options& o) {
  const auto report = read_json(fs::path(o.inputs.front()) / "report.json");
  std::ostringstream csv;
  csv << "stage,pseudo_old,discard_future,distillprop_old,distillprop_new\n";
  for (const auto& s : report.at("stages")) {
    const auto& st = s.at("stats");
    csv << s.at("stage").get<int>() << ',' << recall_cell(st.at("pseudo_old")) << ','
        << recall_cell(st.at("discard_future")) << ',' << recall_cell(st.at("distillprop_old"))
        << ',' << recall_cell(st.at("distillprop_new")) << '\n';
  }
  write_file(analysis_output(o, "recall.csv"), csv.str());
  return 0;
}

int report(const Options& o) {
  std::ostringstream csv;
  csv << "run,method,seed,stage,old_map,new_map,all_map,avg\n";
  auto cell = [](const nlohmann::json& v) {
    return v.is_null() ? std::string() : bpf::format_double(v.get<double>());
  };
  for (const auto& in : o.inputs) {
    const auto r = read_json(fs::path(in) / "report.json");
    for (const auto& s : r.at("stages")) {
      const auto& m = s.at("map");
      csv << fs::path(in).filename().string() << ',' << r.at("method").get<std::string>() << ','
          << r.at("seed").get<std::uint64_t>() << ',' << s.at("stage").get<int>() << ','
          << cell(m.at("old_map")) << ',' << cell(m.at("new_map")) << ',' << cell(m.at("all_map"))
          << ',' << cell(m.at("avg")) << '\n';
    }
  }
  if (o.out.empty()) {
    std::cout << csv.str();
  } else {
    write_file(o.out, csv.str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic incremental object detection harness"};
  app.require_subcommand(1, 1);
  Options o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Experiment config (TOML)")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "Override the config seed");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate the stage datasets");
  add_common(gen);
  gen->add_option("--out", o.out, "Output directory")->required();

  auto* run_cmd = app.add_subcommand("run", "Run one method over every stage");
  add_common(run_cmd);
  run_cmd->add_option("--method", o.method, "Override the config method");
  run_cmd->add_option("--out", o.out, "Run directory")->required();
  run_cmd->add_flag("--dump-bp", o.dump_bp, "Dump pseudo-label traces per scene");
  run_cmd->add_flag("--dump-bf", o.dump_bf, "Dump attention maps and discard sets per scene");

  auto* abl = app.add_subcommand("ablate", "Run an ablation grid");
  add_common(abl);
  abl->add_option("--grid", o.grid, "table5, table4 or bf-clauses")
      ->check(CLI::IsMember({"table5", "table4", "bf-clauses"}));
  abl->add_option("--out", o.out, "Output directory")->required();

  auto* coocc = app.add_subcommand("analyze-coocc", "Per-stage co-occurrence fractions");
  coocc->add_option("--run", o.inputs, "Run directory")->required()->expected(1);
  coocc->add_option("--out", o.out, "Output CSV (default <run>/coocc.csv)");

  auto* recall = app.add_subcommand("analyze-recall", "Per-stage recall of the bridging steps");
  recall->add_option("--run", o.inputs, "Run directory")->required()->expected(1);
  recall->add_option("--out", o.out, "Output CSV (default <run>/recall.csv)");

  auto* rep = app.add_subcommand("report", "Summarize run directories as CSV");
  rep->add_option("--run", o.inputs, "Run directories")->required();
  rep->add_option("--out", o.out, "Output CSV (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 1;
  }

  try {
    if (gen->parsed()) return gen_data(o);
    if (run_cmd->parsed()) return run(o);
    if (abl->parsed()) return ablate(o);
    if (coocc->parsed()) return analyze_coocc(o);
    if (recall->parsed()) return analyze_recall(o);
    if (rep->parsed()) return report(o);
  } catch (const bpf::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
