#pragma once

#include <string>

#include "json.hpp"
#include "moenc/trainer.hpp"

namespace moenc {

// JSON forms of the run configuration. Parsing is strict: unknown keys are
// rejected by name so typos cannot silently fall back to defaults.
nlohmann::json train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Reads and strictly parses a JSON config file; parse errors carry the
// file name and position.
nlohmann::json load_json_file(const std::string& path);

}  // namespace moenc
