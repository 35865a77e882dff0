#pragma once

#include "dvne/model.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace dvne {

// Every tunable of a run. Keys in the config file are "section.name".
struct RunConfig {
    std::string stage = "reconstruct";  // reconstruct | edit_foreground | edit_background | render
    std::uint64_t seed = 0;

    struct Paths {
        std::string data = "data";
        std::string checkpoint = "stage1.ckpt";
        std::string reference;  // reference bundle directory
        std::string style;      // style image
        std::string out = "out";

        bool operator==(const Paths&) const = default;
    } paths;

    struct Render {
        int width = 128;
        int height = 128;
        int n_scene_samples = 64;
        int n_human_samples = 48;
        double near = 0.1;
        double far = 100.0;
        int chunk = 1024;
        double fov = 50.0;

        bool operator==(const Render&) const = default;
    } render;

    struct Model {
        std::string activation = "softplus";
        int human_width = 128;
        int human_layers = 4;
        int human_levels = 6;
        int background_width = 128;
        int background_layers = 4;
        int background_levels = 8;
        int nonrigid_width = 64;
        int nonrigid_layers = 3;
        int nonrigid_levels = 4;
        double nonrigid_max_offset = 0.1;
        double skinning_falloff = 0.25;
        std::vector<double> canonical_box = {-0.42, -0.34, -0.14, 0.42, 0.52, 0.14};

        bool operator==(const Model&) const = default;
    } model;

    struct Optimizer {
        double lr = 5e-4;
        int warmup = 100;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;

        bool operator==(const Optimizer&) const = default;
    } optimizer;

    struct Stage1 {
        int steps = 2000;
        int patch_size = 8;
        int patches = 2;
        double feature_l2 = 0.5;
        double distortion = 0.01;
        int holdout_every = 8;  // one pixel in this many is held out
        int save_every = 0;

        bool operator==(const Stage1&) const = default;
    } stage1;

    struct Stage2 {
        int steps = 1000;
        std::vector<double> branch_probabilities = {0.2, 0.4, 0.4};
        double lambda_2d = 1.0;
        double lambda_3d = 1.0;
        double zoom_probability = 0.3;
        double elevation_min = -10.0;
        double elevation_max = 45.0;
        double camera_radius = 0.0;  // 0 frames the canonical box
        bool random_gray_background = true;
        std::string prompt = "a person";
        double rgb = 5.0;
        double mask = 0.5;
        double depth = 0.01;

        bool operator==(const Stage2&) const = default;
    } stage2;

    struct Guidance {
        double t_min = 0.02;
        double t_max = 0.98;
        double schedule_offset = 0.008;
        double guidance_scale = 7.5;
        std::string codec = "identity";
        bool skip_codec_jacobian = false;
        std::string prior = "mock-gaussian";  // mock-gaussian | mock-view
        std::vector<double> target_color = {0.85, 0.1, 0.1};

        bool operator==(const Guidance&) const = default;
    } guidance;

    struct Stage3 {
        int steps = 500;
        double nnfm = 1.0;
        double feature_l2 = 0.5;

        bool operator==(const Stage3&) const = default;
    } stage3;

    struct Log {
        std::string level = "info";
        int every = 50;
        std::string metrics;  // CSV path, empty for none
        int preview_every = 0;

        bool operator==(const Log&) const = default;
    } log;

    // Cross-field and range checks; throws ConfigError naming the key.
    void validate() const;

    bool operator==(const RunConfig&) const = default;
};

// Reads the TOML subset used by config files: [section] headers, key =
// value lines, strings, numbers, booleans, flat numeric arrays and #
// comments. Unknown keys are rejected. An empty document gives defaults.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
std::string serialize_config(const RunConfig& config);
// Applies a "section.key=value" override.
void apply_override(RunConfig& config, const std::string& assignment);
std::vector<std::string> config_keys();

ModelConfig model_config(const RunConfig& config, const SkeletonPose& rest);

}  // namespace dvne
