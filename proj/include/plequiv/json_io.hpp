#pragma once

#include <initializer_list>
#include <optional>
#include <string>

#include <json.hpp>

#include "plequiv/attacks.hpp"
#include "plequiv/certify.hpp"
#include "plequiv/lane_data.hpp"
#include "plequiv/metrics.hpp"
#include "plequiv/segnet.hpp"
#include "plequiv/train.hpp"

namespace plequiv {

/// Throws std::invalid_argument naming the first key of `j` not in `known`.
void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> known,
                         const std::string& what);

// Missing keys keep their defaults; unknown keys are rejected.
void to_json(nlohmann::json& j, const DatasetConfig& c);
void from_json(const nlohmann::json& j, DatasetConfig& c);
void to_json(nlohmann::json& j, const SegNetConfig& c);
void from_json(const nlohmann::json& j, SegNetConfig& c);
void to_json(nlohmann::json& j, const DiscriminativeParams& c);
void from_json(const nlohmann::json& j, DiscriminativeParams& c);
void to_json(nlohmann::json& j, const ClusterParams& c);
void from_json(const nlohmann::json& j, ClusterParams& c);
void to_json(nlohmann::json& j, const AttackConfig& c);
void from_json(const nlohmann::json& j, AttackConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const CertifyOptions& c);
void from_json(const nlohmann::json& j, CertifyOptions& c);
void to_json(nlohmann::json& j, const EquivalenceSpec& c);
void from_json(const nlohmann::json& j, EquivalenceSpec& c);

}  // namespace plequiv
