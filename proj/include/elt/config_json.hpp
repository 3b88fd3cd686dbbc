#pragma once

#include <json.hpp>

#include "elt/config.hpp"

namespace elt {

nlohmann::json model_config_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json elastic_config_json(const ElasticConfig& cfg);
ElasticConfig elastic_config_from_json(const nlohmann::json& j, const ModelConfig& model);

}  // namespace elt
