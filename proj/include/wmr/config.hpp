#pragma once

// Hierarchical JSON configuration: defaults, then an optional config file,
// then `key=value` overrides addressed by dotted path ("train.batch_size").
// Only keys present in the defaults are accepted.

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace wmr::config {

/// Leaf values keyed by dotted path, in document order.
std::vector<std::pair<std::string, nlohmann::json>> flatten(const nlohmann::json& j);

/// Recursively overlays `overlay` onto `base`. Throws InputError on keys that
/// `base` does not have or on object/leaf mismatches.
nlohmann::json merge(const nlohmann::json& base, const nlohmann::json& overlay);

/// Parses `text` into the type of the existing leaf at `key` and stores it.
void set_dotted(nlohmann::json& root, const std::string& key, const std::string& text);

/// Splits "key=value"; throws InputError when '=' is missing.
std::pair<std::string, std::string> parse_override(const std::string& kv);

nlohmann::json read_file(const std::filesystem::path& path);

nlohmann::json resolve(const nlohmann::json& defaults, const std::optional<std::filesystem::path>& file,
                       const std::vector<std::string>& overrides);

/// Writes the effective config as pretty JSON.
void persist(const std::filesystem::path& path, const nlohmann::json& effective);

/// One "key (type, default value)" line per leaf.
std::string describe_keys(const nlohmann::json& defaults);

}  // namespace wmr::config
