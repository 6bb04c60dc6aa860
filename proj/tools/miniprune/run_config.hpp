#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "miniprune/evalkit.hpp"
#include "miniprune/model.hpp"
#include "miniprune/recovery.hpp"
#include "miniprune/scoring.hpp"
#include "miniprune/zo.hpp"

namespace miniprune::cli {

/// Every configurable key with its default value. A user document may only
/// contain keys that appear here, with values of the same JSON kind.
nlohmann::json default_config();

/// Overlays `user` on `base`, rejecting unknown keys and kind changes.
void merge_config(nlohmann::json& base, const nlohmann::json& user, const std::string& path = "");

/// Applies `key.path=value`; value is parsed as JSON, else taken as a string.
void apply_override(nlohmann::json& config, const std::string& assignment);

/// defaults <- optional file <- overrides, then validated.
nlohmann::json load_run_config(const std::filesystem::path& file, const std::vector<std::string>& overrides);

ModelConfig model_config(const nlohmann::json& c);
zo::PerturbSpec perturb_spec(const nlohmann::json& c);
TrainConfig pretrain_config(const nlohmann::json& c);
TrainConfig recover_config(const nlohmann::json& c);
LoraOptions lora_options(const nlohmann::json& c);
MiniLlmOptions prune_options(const nlohmann::json& c, const ModelConfig& model);
CompareSpec compare_spec(const nlohmann::json& c, const ModelConfig& model);

/// Throws ConfigError on any invalid value.
void validate_run_config(const nlohmann::json& c);

}  // namespace miniprune::cli
