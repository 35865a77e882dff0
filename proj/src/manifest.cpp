#include "dvne/manifest.hpp"

#include "dvne/errors.hpp"

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <sstream>

namespace dvne {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string sha1_raw(std::string_view bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha1(), nullptr) != 1) {
        throw IoError("SHA-1 digest failed");
    }
    return std::string(reinterpret_cast<const char*>(md), len);
}

std::string to_hex(const std::string& raw) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    for (unsigned char c : raw) {
        out += digits[c >> 4];
        out += digits[c & 15];
    }
    return out;
}

std::string read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string object_raw(const fs::path& path);

std::string tree_raw(const fs::path& dir) {
    struct Entry {
        std::string name;
        bool is_dir;
        std::string hash;
    };
    std::vector<Entry> entries;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_directory() && !e.is_regular_file()) continue;
        entries.push_back({e.path().filename().string(), e.is_directory(), object_raw(e.path())});
    }
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
        return (a.is_dir ? a.name + "/" : a.name) < (b.is_dir ? b.name + "/" : b.name);
    });
    std::string body;
    for (const Entry& e : entries) {
        body += (e.is_dir ? "40000 " : "100644 ") + e.name;
        body += '\0';
        body += e.hash;
    }
    return sha1_raw("tree " + std::to_string(body.size()) + std::string(1, '\0') + body);
}

std::string object_raw(const fs::path& path) {
    if (fs::is_directory(path)) return tree_raw(path);
    const std::string bytes = read_bytes(path);
    return sha1_raw("blob " + std::to_string(bytes.size()) + std::string(1, '\0') + bytes);
}

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace

std::string git_blob_hash(std::string_view bytes) {
    return to_hex(sha1_raw("blob " + std::to_string(bytes.size()) + std::string(1, '\0') + std::string(bytes)));
}

std::string git_object_hash(const fs::path& path) {
    if (!fs::exists(path)) throw IngestionError("input not found: " + path.string());
    return to_hex(object_raw(path));
}

void hash_inputs(RunManifest& m) {
    std::string listing;
    for (ManifestInput& in : m.inputs) {
        in.hash = git_object_hash(in.path);
        listing += in.role + ' ' + in.hash + '\n';
    }
    m.input_hash = git_blob_hash(listing);
    if (m.created_utc.empty()) m.created_utc = utc_now();
}

void write_manifest(const fs::path& path, const RunManifest& m) {
    if (fs::exists(path)) throw IoError("manifest already exists: " + path.string());
    json inputs = json::array();
    for (const ManifestInput& in : m.inputs) inputs.push_back({{"role", in.role}, {"path", in.path}, {"hash", in.hash}});
    const json j = {{"schema", RunManifest::kSchema},
                    {"tool", "dvne"},
                    {"version", m.tool_version},
                    {"command", m.command},
                    {"seed", m.seed},
                    {"arguments", m.arguments},
                    {"inputs", inputs},
                    {"input_hash", m.input_hash},
                    {"created_utc", m.created_utc},
                    {"config", m.config}};
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("cannot write manifest " + path.string());
}

RunManifest read_manifest(const fs::path& path) {
    if (!fs::exists(path)) throw IngestionError("manifest not found: " + path.string());
    json j;
    try {
        j = json::parse(read_bytes(path));
        if (j.at("schema").get<std::string>() != RunManifest::kSchema) {
            throw IngestionError("unsupported manifest schema in " + path.string());
        }
        RunManifest m;
        m.tool_version = j.at("version").get<std::string>();
        m.command = j.at("command").get<std::string>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.config = j.at("config").get<std::string>();
        m.arguments = j.at("arguments").get<std::map<std::string, std::string>>();
        for (const json& in : j.at("inputs")) {
            m.inputs.push_back({in.at("role").get<std::string>(), in.at("path").get<std::string>(),
                                in.at("hash").get<std::string>()});
        }
        m.input_hash = j.at("input_hash").get<std::string>();
        m.created_utc = j.at("created_utc").get<std::string>();
        return m;
    } catch (const json::exception& e) {
        throw IngestionError("malformed manifest " + path.string() + ": " + e.what());
    }
}

fs::path timing_path(const fs::path& manifest_path) {
    return manifest_path.parent_path() / (manifest_path.stem().string() + ".timing.json");
}

void write_timing(const fs::path& manifest_path, const std::map<std::string, double>& seconds) {
    const fs::path p = timing_path(manifest_path);
    std::ofstream out(p);
    if (!out) throw IoError("cannot write " + p.string());
    out << json(seconds).dump(2) << '\n';
}

}  // namespace dvne
