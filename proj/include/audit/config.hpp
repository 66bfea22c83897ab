#pragma once

#include <filesystem>
#include <string>

#include "audit/core.hpp"
#include "audit/gateway.hpp"
#include "audit/jsonl.hpp"

// Layered run configuration: TOML files (a pragmatic subset: sections,
// strings, numbers, booleans, flat arrays) with ${ENV_VAR} interpolation
// inside strings, loaded into a json tree so flag overrides and snapshots
// stay uniform. Files whose first character is '{' load as plain JSON,
// which is how re-runs from a snapshotted config.json work.

namespace audit {

json parse_toml(const std::string& text, const std::string& origin = "config");

json load_config_file(const std::filesystem::path& path);

// Reads one [roles.<name>] section. Relative mock scenario paths resolve
// against base_dir (the config file's directory).
RoleConfig role_config_from_json(Role role, const json& section,
                                 const std::filesystem::path& base_dir);

json role_config_to_json(const RoleConfig& config);

// Configures every role present under config_root["roles"].
void configure_gateway_from_json(ModelGateway& gateway, const json& config_root,
                                 const std::filesystem::path& base_dir);

Rubric rubric_from_json(const json& section);
json rubric_to_json(const Rubric& rubric);

// Resolves a possibly-relative path from a config file against its
// directory.
std::filesystem::path resolve_config_path(const std::filesystem::path& base_dir,
                                          const std::string& value);

}  // namespace audit
