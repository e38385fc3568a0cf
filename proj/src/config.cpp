#include "wmr/config.hpp"

#include "wmr/errors.hpp"

#include <fstream>
#include <sstream>

namespace wmr::config {

namespace {

void flatten_into(const nlohmann::json& j, const std::string& prefix,
                  std::vector<std::pair<std::string, nlohmann::json>>& out) {
  if (j.is_object() && !j.empty()) {
    for (const auto& [k, v] : j.items()) flatten_into(v, prefix.empty() ? k : prefix + "." + k, out);
  } else {
    out.emplace_back(prefix, j);
  }
}

void merge_into(nlohmann::json& base, const nlohmann::json& overlay, const std::string& path) {
  if (!overlay.is_object()) throw InputError("config: expected an object at '" + (path.empty() ? "<root>" : path) + "'");
  for (const auto& [k, v] : overlay.items()) {
    const auto key = path.empty() ? k : path + "." + k;
    if (!base.contains(k)) throw InputError("config: unknown key '" + key + "'");
    auto& slot = base[k];
    if (slot.is_object()) {
      merge_into(slot, v, key);
    } else if (v.is_object()) {
      throw InputError("config: '" + key + "' is a value, not a section");
    } else {
      const bool numeric = slot.is_number() && v.is_number();
      if (!numeric && slot.type() != v.type()) {
        throw InputError("config: '" + key + "' expects " + std::string(slot.type_name()) + ", got " + v.type_name());
      }
      if (slot.is_number_integer() && !v.is_number_integer()) {
        throw InputError("config: '" + key + "' expects an integer");
      }
      slot = v;
    }
  }
}

}  // namespace

std::vector<std::pair<std::string, nlohmann::json>> flatten(const nlohmann::json& j) {
  std::vector<std::pair<std::string, nlohmann::json>> out;
  flatten_into(j, "", out);
  return out;
}

nlohmann::json merge(const nlohmann::json& base, const nlohmann::json& overlay) {
  auto out = base;
  merge_into(out, overlay, "");
  return out;
}

void set_dotted(nlohmann::json& root, const std::string& key, const std::string& text) {
  nlohmann::json* node = &root;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!node->is_object() || !node->contains(part)) throw InputError("config: unknown key '" + key + "'");
    node = &(*node)[part];
  }
  if (node->is_object()) throw InputError("config: '" + key + "' is a section, not a value");
  try {
    if (node->is_boolean()) {
      if (text == "true" || text == "1") {
        *node = true;
      } else if (text == "false" || text == "0") {
        *node = false;
      } else {
        throw InputError("config: '" + key + "' expects true or false, got '" + text + "'");
      }
    } else if (node->is_number_unsigned()) {
      std::size_t used = 0;
      if (text.find('-') != std::string::npos) throw std::invalid_argument(text);
      const auto v = std::stoull(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      *node = v;
    } else if (node->is_number_integer()) {
      std::size_t used = 0;
      const auto v = std::stoll(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      *node = v;
    } else if (node->is_number_float()) {
      std::size_t used = 0;
      const auto v = std::stod(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      *node = v;
    } else if (node->is_string()) {
      *node = text;
    } else {
      *node = nlohmann::json::parse(text);
    }
  } catch (const InputError&) {
    throw;
  } catch (const std::exception&) {
    throw InputError("config: cannot parse '" + text + "' for '" + key + "'");
  }
}

std::pair<std::string, std::string> parse_override(const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) throw InputError("override '" + kv + "' is not of the form key=value");
  return {kv.substr(0, eq), kv.substr(eq + 1)};
}

nlohmann::json read_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot read config file " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw InputError("config file " + path.string() + ": " + e.what());
  }
}

nlohmann::json resolve(const nlohmann::json& defaults, const std::optional<std::filesystem::path>& file,
                       const std::vector<std::string>& overrides) {
  auto out = defaults;
  if (file) out = merge(out, read_file(*file));
  for (const auto& kv : overrides) {
    auto [k, v] = parse_override(kv);
    set_dotted(out, k, v);
  }
  return out;
}

void persist(const std::filesystem::path& path, const nlohmann::json& effective) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw RuntimeFailure("cannot write " + path.string());
  os << effective.dump(2) << '\n';
}

std::string describe_keys(const nlohmann::json& defaults) {
  std::ostringstream os;
  for (const auto& [k, v] : flatten(defaults)) {
    std::string type = v.is_boolean() ? "bool" : v.is_number_integer() ? "int" : v.is_number() ? "float" : v.type_name();
    os << "  " << k << " (" << type << ", default " << v.dump() << ")\n";
  }
  return os.str();
}

}  // namespace wmr::config
