#pragma once

#include "dvne/config.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace dvne {

// Hex SHA-1 of a git blob object ("blob <size>\0" + bytes).
std::string git_blob_hash(std::string_view bytes);
// Blob hash of a file, or the tree hash of a directory computed the way git
// does (entries sorted by name, directories compared with a trailing slash).
std::string git_object_hash(const std::filesystem::path& path);

struct ManifestInput {
    std::string role;  // data, checkpoint, reference, style
    std::string path;
    std::string hash;

    bool operator==(const ManifestInput&) const = default;
};

// Everything needed to re-run one command. Written once before the command
// touches any output; per-stage timings live in a sidecar file.
struct RunManifest {
    static constexpr const char* kSchema = "dvne-manifest v1";
    std::string tool_version;
    std::string command;
    std::uint64_t seed = 0;
    std::string config;  // serialized RunConfig
    std::map<std::string, std::string> arguments;
    std::vector<ManifestInput> inputs;
    std::string input_hash;  // combined hash over `inputs`
    std::string created_utc;
};

// Hashes each existing input and the combined listing.
void hash_inputs(RunManifest& manifest);

// Throws IoError if `path` already exists.
void write_manifest(const std::filesystem::path& path, const RunManifest& manifest);
RunManifest read_manifest(const std::filesystem::path& path);

// "<manifest stem>.timing.json" next to the manifest.
std::filesystem::path timing_path(const std::filesystem::path& manifest_path);
void write_timing(const std::filesystem::path& manifest_path, const std::map<std::string, double>& seconds);

}  // namespace dvne
