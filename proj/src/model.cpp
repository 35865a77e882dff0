#include "dvne/model.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <fstream>

namespace dvne {

using nlohmann::json;

SceneModel::SceneModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    build();
    human_.initialize(params_, seed ^ 0x68756d616eULL);
    deformation_.initialize(params_, seed ^ 0x6e6f6e726967ULL);
    background_.initialize(params_, seed ^ 0x6267ULL);
}

void SceneModel::build() {
    human_ = CanonicalHumanField(config_.human_shape, EncodingConfig{config_.human_levels, EncodingKind::kPlain},
                                 config_.canonical_box);
    deformation_ = DeformationField(config_.rest, config_.skinning, config_.nonrigid);
    background_ = BackgroundField(config_.background_shape,
                                  EncodingConfig{config_.background_levels, EncodingKind::kIntegrated});
    params_ = ad::ParameterSet{};
    auto mark = [this](ParamGroup g, std::size_t begin) {
        ranges_[static_cast<std::size_t>(g)] = {begin, params_.size()};
    };
    std::size_t begin = params_.size();
    human_.register_parameters(params_);
    mark(ParamGroup::kHuman, begin);
    begin = params_.size();
    deformation_.register_parameters(params_);
    mark(ParamGroup::kNonrigid, begin);
    begin = params_.size();
    background_.register_parameters(params_);
    mark(ParamGroup::kBackground, begin);
}

std::pair<std::size_t, std::size_t> SceneModel::group_range(ParamGroup g) const {
    return ranges_[static_cast<std::size_t>(g)];
}

std::vector<double> SceneModel::group_values(ParamGroup g) const {
    const auto [b, e] = group_range(g);
    const auto v = params_.values();
    return {v.begin() + static_cast<std::ptrdiff_t>(b), v.begin() + static_cast<std::ptrdiff_t>(e)};
}

// ---- config serialization --------------------------------------------------------

namespace {

json shape_json(const FieldShape& s) {
    return {{"hidden_width", s.hidden_width},
            {"num_hidden_layers", s.num_hidden_layers},
            {"skip_layers", s.skip_layers},
            {"activation", s.activation == Activation::kRelu ? "relu" : "softplus"}};
}

FieldShape shape_from(const json& j) {
    FieldShape s;
    s.hidden_width = j.at("hidden_width").get<int>();
    s.num_hidden_layers = j.at("num_hidden_layers").get<int>();
    s.skip_layers = j.at("skip_layers").get<std::vector<int>>();
    s.activation = j.at("activation").get<std::string>() == "relu" ? Activation::kRelu : Activation::kSoftplus;
    return s;
}

json vec3_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }
Vec3 vec3_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

}  // namespace

std::string model_config_to_json(const ModelConfig& cfg) {
    json j;
    j["human_shape"] = shape_json(cfg.human_shape);
    j["human_levels"] = cfg.human_levels;
    j["background_shape"] = shape_json(cfg.background_shape);
    j["background_levels"] = cfg.background_levels;
    j["nonrigid"] = {{"levels", cfg.nonrigid.encoding.num_levels},
                     {"hidden_width", cfg.nonrigid.hidden_width},
                     {"num_hidden_layers", cfg.nonrigid.num_hidden_layers},
                     {"max_offset", cfg.nonrigid.max_offset}};
    j["skinning_falloff"] = cfg.skinning.falloff_factor;
    j["canonical_box"] = {vec3_json(cfg.canonical_box.lo), vec3_json(cfg.canonical_box.hi)};
    json joints = json::array();
    json tips = json::array();
    for (const auto& p : cfg.rest.joints) joints.push_back(vec3_json(p));
    for (const auto& p : cfg.rest.tips) tips.push_back(vec3_json(p));
    j["rest"] = {{"joints", joints}, {"parents", cfg.rest.parents}, {"tips", tips}};
    return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
    try {
        const json j = json::parse(text);
        ModelConfig cfg;
        cfg.human_shape = shape_from(j.at("human_shape"));
        cfg.human_levels = j.at("human_levels").get<int>();
        cfg.background_shape = shape_from(j.at("background_shape"));
        cfg.background_levels = j.at("background_levels").get<int>();
        const auto& nr = j.at("nonrigid");
        cfg.nonrigid.encoding = EncodingConfig{nr.at("levels").get<int>(), EncodingKind::kPlain};
        cfg.nonrigid.hidden_width = nr.at("hidden_width").get<int>();
        cfg.nonrigid.num_hidden_layers = nr.at("num_hidden_layers").get<int>();
        cfg.nonrigid.max_offset = nr.at("max_offset").get<double>();
        cfg.skinning.falloff_factor = j.at("skinning_falloff").get<double>();
        cfg.canonical_box.lo = vec3_from(j.at("canonical_box").at(0));
        cfg.canonical_box.hi = vec3_from(j.at("canonical_box").at(1));
        const auto& rest = j.at("rest");
        cfg.rest.parents = rest.at("parents").get<std::vector<int>>();
        for (const auto& p : rest.at("joints")) cfg.rest.joints.push_back(vec3_from(p));
        for (const auto& p : rest.at("tips")) cfg.rest.tips.push_back(vec3_from(p));
        cfg.rest.rotations.assign(cfg.rest.joints.size(), Vec3::Zero());
        cfg.rest.validate();
        return cfg;
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("bad model description: ") + e.what());
    }
}

// ---- checkpoint --------------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint32_t get_u32(std::istream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw CheckpointError("truncated checkpoint header");
    return v;
}

void put_string(std::ostream& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in) {
    const auto n = get_u32(in);
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in) throw CheckpointError("truncated checkpoint string");
    return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const SceneModel& model) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write("DVNE", 4);
        put_u32(out, kCheckpointVersion);
        put_string(out, model_config_to_json(model.config()));
        const auto& params = model.params();
        put_u32(out, static_cast<std::uint32_t>(params.num_blocks()));
        for (const auto& b : params.blocks()) {
            put_string(out, b.name);
            put_u32(out, static_cast<std::uint32_t>(b.rows));
            put_u32(out, static_cast<std::uint32_t>(b.cols));
        }
        const auto values = params.values();
        out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
        if (!out) throw IoError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

SceneModel load_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw MissingCheckpoint("checkpoint not found: " + path.string());
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingCheckpoint("cannot open checkpoint " + path.string());
    char magic[4] = {};
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "DVNE", 4) != 0) throw CheckpointError(path.string() + ": bad magic bytes");
    const auto version = get_u32(in);
    if (version != kCheckpointVersion) {
        throw CheckpointError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    }
    SceneModel model(model_config_from_json(get_string(in)), 0);
    auto& params = model.params();
    const auto n_blocks = get_u32(in);
    if (n_blocks != params.num_blocks()) throw CheckpointError(path.string() + ": layer table size mismatch");
    for (std::size_t i = 0; i < n_blocks; ++i) {
        const std::string name = get_string(in);
        const auto rows = get_u32(in);
        const auto cols = get_u32(in);
        const auto& b = params.block(i);
        if (name != b.name || rows != b.rows || cols != b.cols) {
            throw CheckpointError(path.string() + ": layer '" + name + "' does not match the model description");
        }
    }
    auto values = params.values();
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) throw CheckpointError(path.string() + ": truncated parameter data");
    if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError(path.string() + ": trailing bytes");
    return model;
}

}  // namespace dvne
