#pragma once

// Config files for subcommands, in JSON or TOML. Keys name long options and
// may sit at the top level or under a section named after the subcommand,
// e.g. {"train-stitch": {"epochs": 5}}.

#include <fstream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

namespace stitchviz::cli {

class JsonOrTomlConfig : public CLI::ConfigTOML {
 public:
  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    std::stringstream buffer;
    buffer << input.rdbuf();
    const std::string text = buffer.str();
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first == std::string::npos || text[first] != '{') {
      std::istringstream toml(text);
      return CLI::ConfigTOML::from_config(toml);
    }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw CLI::ConfigError(std::string("invalid JSON config: ") + e.what());
    }
    std::vector<CLI::ConfigItem> out;
    flatten(j, "", {}, out);
    return out;
  }

 private:
  static void flatten(const nlohmann::json& j, const std::string& name, std::vector<std::string> parents,
                      std::vector<CLI::ConfigItem>& out) {
    if (j.is_object()) {
      if (!name.empty()) parents.push_back(name);
      for (auto it = j.begin(); it != j.end(); ++it) flatten(it.value(), it.key(), parents, out);
      return;
    }
    CLI::ConfigItem item;
    item.parents = parents;
    item.name = name;
    if (j.is_array()) {
      for (const auto& e : j) item.inputs.push_back(scalar(e, name));
    } else {
      item.inputs.push_back(scalar(j, name));
    }
    out.push_back(std::move(item));
  }

  static std::string scalar(const nlohmann::json& j, const std::string& name) {
    if (j.is_string()) return j.get<std::string>();
    if (j.is_boolean()) return j.get<bool>() ? "true" : "false";
    if (j.is_number()) return j.dump();
    throw CLI::ConversionError("unsupported config value for " + name);
  }
};

// CLI11 only reads config files on the root app, so subcommands apply theirs
// after parsing. Options already given on the command line keep their values.
inline void apply_config_file(CLI::App* app, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CLI::FileError::Missing(path);
  for (const auto& item : JsonOrTomlConfig{}.from_config(in)) {
    if (item.name == "++" || item.name == "--") continue;
    if (!item.parents.empty() && item.parents.back() != app->get_name()) throw CLI::ConfigError::Extras(item.fullname());
    CLI::Option* opt = app->get_option_no_throw("--" + item.name);
    if (opt == nullptr || item.name == "config") throw CLI::ConfigError::Extras(item.fullname());
    if (opt->count() > 0) continue;
    opt->add_result(item.inputs);
    opt->run_callback();
  }
}

}  // namespace stitchviz::cli
