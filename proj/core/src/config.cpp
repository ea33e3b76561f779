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

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>
#include <toml.hpp>

#include "bpf/error.hpp"
#include "bpf/protocol.hpp"

namespace bpf {

namespace {

void reject_unknown(const nlohmann::json& given, const nlohmann::json& known,
                    const std::string& path) {
  for (const auto& [key, value] : given.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    if (!known.contains(key)) throw ConfigError("unknown config key '" + where + "'");
    if (value.is_object()) {
      if (!known.at(key).is_object()) throw ConfigError("config key '" + where + "' is not a table");
      reject_unknown(value, known.at(key), where);
    }
  }
}

}  // namespace

nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"seed", c.seed},         {"split", c.split},   {"method", to_string(c.method)},
          {"alpha", c.alpha},       {"synth", c.synth},   {"train", c.train},
          {"bp", c.bp},             {"bf", c.bf},         {"distill", c.distill},
          {"eval", c.eval}};
}

ExperimentConfig config_from_json(const nlohmann::json& j) {
  reject_unknown(j, to_json(ExperimentConfig{}), "");
  ExperimentConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    c.split = j.value("split", c.split);
    c.method = parse_method(j.value("method", to_string(c.method)));
    c.alpha = j.value("alpha", c.alpha);
    const nlohmann::json empty = nlohmann::json::object();
    j.value("synth", empty).get_to(c.synth);
    j.value("train", empty).get_to(c.train);
    j.value("bp", empty).get_to(c.bp);
    j.value("bf", empty).get_to(c.bf);
    j.value("distill", empty).get_to(c.distill);
    j.value("eval", empty).get_to(c.eval);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config type error: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig parse_config(const std::string& toml_text, const std::string& origin) {
  toml::table table;
  try {
    table = toml::parse(toml_text, origin);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << origin << ":" << e.source().begin.line << ":" << e.source().begin.column << ": "
       << e.description();
    throw ConfigError(os.str());
  }
  std::ostringstream js;
  js << toml::json_formatter{table};
  return config_from_json(nlohmann::json::parse(js.str()));
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

}  // namespace bpf
