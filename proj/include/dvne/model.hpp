#pragma once

#include "dvne/autodiff.hpp"
#include "dvne/deformation.hpp"
#include "dvne/fields.hpp"

#include <array>
#include <filesystem>
#include <string>
#include <vector>

namespace dvne {

enum class ParamGroup { kHuman = 0, kNonrigid = 1, kBackground = 2 };
inline constexpr int kNumParamGroups = 3;

struct ModelConfig {
    FieldShape human_shape{256, 8, {4}, Activation::kSoftplus};
    int human_levels = 6;
    FieldShape background_shape{256, 8, {}, Activation::kSoftplus};
    int background_levels = 8;
    NonrigidConfig nonrigid;
    SkinningConfig skinning;
    Aabb canonical_box;
    SkeletonPose rest;
};

// All trainable state: canonical human field, deformation field and
// background field, with their parameters in one flat set.
class SceneModel {
public:
    SceneModel() = default;
    SceneModel(ModelConfig config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    const CanonicalHumanField& human() const { return human_; }
    const DeformationField& deformation() const { return deformation_; }
    const BackgroundField& background() const { return background_; }

    ad::ParameterSet& params() { return params_; }
    const ad::ParameterSet& params() const { return params_; }

    // [begin, end) offsets of a group's parameters in the flat array.
    std::pair<std::size_t, std::size_t> group_range(ParamGroup g) const;
    std::vector<double> group_values(ParamGroup g) const;

private:
    void build();

    ModelConfig config_;
    CanonicalHumanField human_;
    DeformationField deformation_;
    BackgroundField background_;
    ad::ParameterSet params_;
    std::array<std::pair<std::size_t, std::size_t>, kNumParamGroups> ranges_{};
};

// Binary checkpoint: "DVNE" magic, format version, model description,
// layer-shape table, then little-endian float64 parameter values.
// Written through a temporary file and renamed into place.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const std::filesystem::path& path, const SceneModel& model);
SceneModel load_checkpoint(const std::filesystem::path& path);

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace dvne
