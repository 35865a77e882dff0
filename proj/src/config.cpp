#include "dvne/config.hpp"

#include "dvne/errors.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <variant>

namespace dvne {

namespace {

struct Value {
    std::variant<std::string, long long, double, bool, std::vector<double>> data;
    int line = 0;
};

[[noreturn]] void fail(const std::string& key, const std::string& what) {
    throw ConfigError("config key '" + key + "': " + what);
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

// Drops a trailing comment, ignoring '#' inside a string.
std::string strip_comment(const std::string& line) {
    bool in_string = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '\\' && in_string) {
            ++i;
        } else if (line[i] == '"') {
            in_string = !in_string;
        } else if (line[i] == '#' && !in_string) {
            return line.substr(0, i);
        }
    }
    return line;
}

bool parse_number(const std::string& text, Value& v) {
    std::string t;
    for (char c : text) {
        if (c != '_') t.push_back(c);
    }
    if (t.empty()) return false;
    const bool is_float = t.find_first_of(".eE") != std::string::npos || t == "inf" || t == "nan" ||
                          t == "+inf" || t == "-inf";
    const char* first = t.data() + (t[0] == '+' ? 1 : 0);
    const char* last = t.data() + t.size();
    if (!is_float) {
        long long i = 0;
        const auto r = std::from_chars(first, last, i);
        if (r.ec != std::errc() || r.ptr != last) return false;
        v.data = i;
        return true;
    }
    double d = 0.0;
    const auto r = std::from_chars(first, last, d);
    if (r.ec != std::errc() || r.ptr != last) return false;
    v.data = d;
    return true;
}

std::string parse_string(const std::string& key, const std::string& text) {
    if (text.size() < 2 || text.back() != '"') fail(key, "unterminated string");
    std::string out;
    for (std::size_t i = 1; i + 1 < text.size(); ++i) {
        char c = text[i];
        if (c == '"') fail(key, "unexpected quote in string");
        if (c == '\\') {
            if (i + 2 >= text.size()) fail(key, "dangling escape");
            const char e = text[++i];
            switch (e) {
                case 'n': c = '\n'; break;
                case 't': c = '\t'; break;
                case '"': c = '"'; break;
                case '\\': c = '\\'; break;
                default: fail(key, std::string("unsupported escape \\") + e);
            }
        }
        out.push_back(c);
    }
    return out;
}

Value parse_value(const std::string& key, const std::string& text, int line) {
    Value v;
    v.line = line;
    if (text.empty()) fail(key, "missing value");
    if (text.front() == '"') {
        v.data = parse_string(key, text);
    } else if (text == "true" || text == "false") {
        v.data = text == "true";
    } else if (text.front() == '[') {
        if (text.back() != ']') fail(key, "unterminated array");
        std::vector<double> arr;
        std::stringstream ss(text.substr(1, text.size() - 2));
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (item.empty()) {
                if (ss.eof()) break;  // trailing comma
                fail(key, "empty array element");
            }
            Value e;
            if (!parse_number(item, e)) fail(key, "array elements must be numbers");
            arr.push_back(std::holds_alternative<long long>(e.data) ? static_cast<double>(std::get<long long>(e.data))
                                                                    : std::get<double>(e.data));
        }
        v.data = std::move(arr);
    } else if (!parse_number(text, v)) {
        fail(key, "cannot parse value '" + text + "'");
    }
    return v;
}

std::map<std::string, Value> parse_document(const std::string& text) {
    std::map<std::string, Value> out;
    std::stringstream in(text);
    std::string raw;
    std::string section;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const std::string line = trim(strip_comment(raw));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("config line " + std::to_string(line_no) + ": bad section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty section name");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
        }
        const std::string name = trim(line.substr(0, eq));
        if (name.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
        const std::string key = section.empty() ? name : section + "." + name;
        if (out.count(key) != 0) fail(key, "defined twice");
        out[key] = parse_value(key, trim(line.substr(eq + 1)), line_no);
    }
    return out;
}

// ---- field table ----------------------------------------------------------------

std::string format_double(double d) {
    if (std::isinf(d)) return d > 0 ? "inf" : "-inf";
    if (std::isnan(d)) return "nan";
    std::ostringstream os;
    os << std::setprecision(17) << d;
    std::string s = os.str();
    if (s.find_first_of(".eE") == std::string::npos) s += ".0";
    return s;
}

std::string quote(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        switch (c) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\t': out += "\\t"; break;
            default: out.push_back(c);
        }
    }
    return out + "\"";
}

void assign(const std::string& key, const Value& v, int& dst) {
    const auto* i = std::get_if<long long>(&v.data);
    if (i == nullptr) fail(key, "expected an integer");
    if (*i < std::numeric_limits<int>::min() || *i > std::numeric_limits<int>::max()) fail(key, "integer out of range");
    dst = static_cast<int>(*i);
}
void assign(const std::string& key, const Value& v, std::uint64_t& dst) {
    const auto* i = std::get_if<long long>(&v.data);
    if (i == nullptr || *i < 0) fail(key, "expected a non-negative integer");
    dst = static_cast<std::uint64_t>(*i);
}
void assign(const std::string& key, const Value& v, double& dst) {
    if (const auto* i = std::get_if<long long>(&v.data)) {
        dst = static_cast<double>(*i);
    } else if (const auto* d = std::get_if<double>(&v.data)) {
        dst = *d;
    } else {
        fail(key, "expected a number");
    }
}
void assign(const std::string& key, const Value& v, bool& dst) {
    const auto* b = std::get_if<bool>(&v.data);
    if (b == nullptr) fail(key, "expected true or false");
    dst = *b;
}
void assign(const std::string& key, const Value& v, std::string& dst) {
    const auto* s = std::get_if<std::string>(&v.data);
    if (s == nullptr) fail(key, "expected a quoted string");
    dst = *s;
}
void assign(const std::string& key, const Value& v, std::vector<double>& dst) {
    const auto* a = std::get_if<std::vector<double>>(&v.data);
    if (a == nullptr) fail(key, "expected an array of numbers");
    dst = *a;
}

std::string render(int v) { return std::to_string(v); }
std::string render(std::uint64_t v) { return std::to_string(v); }
std::string render(double v) { return format_double(v); }
std::string render(bool v) { return v ? "true" : "false"; }
std::string render(const std::string& v) { return quote(v); }
std::string render(const std::vector<double>& v) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + format_double(v[i]);
    return s + "]";
}

struct Field {
    std::string key;
    std::function<void(RunConfig&, const Value&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <typename Access>
Field field(std::string key, Access access) {
    return Field{key,
                 [key, access](RunConfig& c, const Value& v) { assign(key, v, access(c)); },
                 [access](const RunConfig& c) { return render(access(const_cast<RunConfig&>(c))); }};
}

#define DVNE_FIELD(key, member) field(key, [](RunConfig& c) -> auto& { return c.member; })

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        DVNE_FIELD("stage", stage),
        DVNE_FIELD("seed", seed),
        DVNE_FIELD("paths.data", paths.data),
        DVNE_FIELD("paths.checkpoint", paths.checkpoint),
        DVNE_FIELD("paths.reference", paths.reference),
        DVNE_FIELD("paths.style", paths.style),
        DVNE_FIELD("paths.out", paths.out),
        DVNE_FIELD("render.width", render.width),
        DVNE_FIELD("render.height", render.height),
        DVNE_FIELD("render.n_scene_samples", render.n_scene_samples),
        DVNE_FIELD("render.n_human_samples", render.n_human_samples),
        DVNE_FIELD("render.near", render.near),
        DVNE_FIELD("render.far", render.far),
        DVNE_FIELD("render.chunk", render.chunk),
        DVNE_FIELD("render.fov", render.fov),
        DVNE_FIELD("model.activation", model.activation),
        DVNE_FIELD("model.human_width", model.human_width),
        DVNE_FIELD("model.human_layers", model.human_layers),
        DVNE_FIELD("model.human_levels", model.human_levels),
        DVNE_FIELD("model.background_width", model.background_width),
        DVNE_FIELD("model.background_layers", model.background_layers),
        DVNE_FIELD("model.background_levels", model.background_levels),
        DVNE_FIELD("model.nonrigid_width", model.nonrigid_width),
        DVNE_FIELD("model.nonrigid_layers", model.nonrigid_layers),
        DVNE_FIELD("model.nonrigid_levels", model.nonrigid_levels),
        DVNE_FIELD("model.nonrigid_max_offset", model.nonrigid_max_offset),
        DVNE_FIELD("model.skinning_falloff", model.skinning_falloff),
        DVNE_FIELD("model.canonical_box", model.canonical_box),
        DVNE_FIELD("optimizer.lr", optimizer.lr),
        DVNE_FIELD("optimizer.warmup", optimizer.warmup),
        DVNE_FIELD("optimizer.beta1", optimizer.beta1),
        DVNE_FIELD("optimizer.beta2", optimizer.beta2),
        DVNE_FIELD("optimizer.eps", optimizer.eps),
        DVNE_FIELD("stage1.steps", stage1.steps),
        DVNE_FIELD("stage1.patch_size", stage1.patch_size),
        DVNE_FIELD("stage1.patches", stage1.patches),
        DVNE_FIELD("stage1.feature_l2", stage1.feature_l2),
        DVNE_FIELD("stage1.distortion", stage1.distortion),
        DVNE_FIELD("stage1.holdout_every", stage1.holdout_every),
        DVNE_FIELD("stage1.save_every", stage1.save_every),
        DVNE_FIELD("stage2.steps", stage2.steps),
        DVNE_FIELD("stage2.branch_probabilities", stage2.branch_probabilities),
        DVNE_FIELD("stage2.lambda_2d", stage2.lambda_2d),
        DVNE_FIELD("stage2.lambda_3d", stage2.lambda_3d),
        DVNE_FIELD("stage2.zoom_probability", stage2.zoom_probability),
        DVNE_FIELD("stage2.elevation_min", stage2.elevation_min),
        DVNE_FIELD("stage2.elevation_max", stage2.elevation_max),
        DVNE_FIELD("stage2.camera_radius", stage2.camera_radius),
        DVNE_FIELD("stage2.random_gray_background", stage2.random_gray_background),
        DVNE_FIELD("stage2.prompt", stage2.prompt),
        DVNE_FIELD("stage2.rgb", stage2.rgb),
        DVNE_FIELD("stage2.mask", stage2.mask),
        DVNE_FIELD("stage2.depth", stage2.depth),
        DVNE_FIELD("guidance.t_min", guidance.t_min),
        DVNE_FIELD("guidance.t_max", guidance.t_max),
        DVNE_FIELD("guidance.schedule_offset", guidance.schedule_offset),
        DVNE_FIELD("guidance.guidance_scale", guidance.guidance_scale),
        DVNE_FIELD("guidance.codec", guidance.codec),
        DVNE_FIELD("guidance.skip_codec_jacobian", guidance.skip_codec_jacobian),
        DVNE_FIELD("guidance.prior", guidance.prior),
        DVNE_FIELD("guidance.target_color", guidance.target_color),
        DVNE_FIELD("stage3.steps", stage3.steps),
        DVNE_FIELD("stage3.nnfm", stage3.nnfm),
        DVNE_FIELD("stage3.feature_l2", stage3.feature_l2),
        DVNE_FIELD("log.level", log.level),
        DVNE_FIELD("log.every", log.every),
        DVNE_FIELD("log.metrics", log.metrics),
        DVNE_FIELD("log.preview_every", log.preview_every),
    };
    return table;
}

#undef DVNE_FIELD

const Field& find_field(const std::string& key) {
    for (const Field& f : fields()) {
        if (f.key == key) return f;
    }
    throw ConfigError("config key '" + key + "': unknown key");
}

void require(bool ok, const std::string& key, const std::string& constraint) {
    if (!ok) fail(key, constraint);
}

}  // namespace

void RunConfig::validate() const {
    static const std::set<std::string> stages = {"reconstruct", "edit_foreground", "edit_background", "render"};
    require(stages.count(stage) != 0, "stage", "must be one of reconstruct, edit_foreground, edit_background, render");
    require(render.width > 0, "render.width", "must be positive");
    require(render.height > 0, "render.height", "must be positive");
    require(render.n_scene_samples > 0, "render.n_scene_samples", "must be positive");
    require(render.n_human_samples > 0, "render.n_human_samples", "must be positive");
    require(render.near > 0.0, "render.near", "must be positive");
    require(render.far > render.near, "render.far", "must exceed render.near");
    require(render.chunk > 0, "render.chunk", "must be positive");
    require(render.fov > 0.0 && render.fov < 180.0, "render.fov", "must lie in (0, 180)");
    require(model.activation == "softplus" || model.activation == "relu", "model.activation",
            "must be softplus or relu");
    require(model.human_width > 0, "model.human_width", "must be positive");
    require(model.human_layers > 0, "model.human_layers", "must be positive");
    require(model.human_levels >= 0, "model.human_levels", "must be non-negative");
    require(model.background_width > 0, "model.background_width", "must be positive");
    require(model.background_layers > 0, "model.background_layers", "must be positive");
    require(model.background_levels >= 0, "model.background_levels", "must be non-negative");
    require(model.nonrigid_width > 0, "model.nonrigid_width", "must be positive");
    require(model.nonrigid_layers > 0, "model.nonrigid_layers", "must be positive");
    require(model.nonrigid_levels >= 0, "model.nonrigid_levels", "must be non-negative");
    require(model.nonrigid_max_offset >= 0.0, "model.nonrigid_max_offset", "must be non-negative");
    require(model.skinning_falloff > 0.0, "model.skinning_falloff", "must be positive");
    require(model.canonical_box.size() == 6, "model.canonical_box", "needs six numbers (lo xyz, hi xyz)");
    for (int i = 0; i < 3; ++i) {
        require(model.canonical_box[static_cast<std::size_t>(i)] < model.canonical_box[static_cast<std::size_t>(i + 3)],
                "model.canonical_box", "lo must be below hi on every axis");
    }
    require(optimizer.lr > 0.0, "optimizer.lr", "must be positive");
    require(optimizer.warmup >= 0, "optimizer.warmup", "must be non-negative");
    require(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0, "optimizer.beta1", "must lie in [0, 1)");
    require(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0, "optimizer.beta2", "must lie in [0, 1)");
    require(optimizer.eps > 0.0, "optimizer.eps", "must be positive");
    require(stage1.steps >= 0, "stage1.steps", "must be non-negative");
    require(stage1.patch_size > 0, "stage1.patch_size", "must be positive");
    require(stage1.patches > 0, "stage1.patches", "must be positive");
    require(stage1.feature_l2 >= 0.0, "stage1.feature_l2", "must be non-negative");
    require(stage1.distortion >= 0.0, "stage1.distortion", "must be non-negative");
    require(stage1.holdout_every >= 0, "stage1.holdout_every", "must be non-negative (0 disables hold-out)");
    require(stage1.save_every >= 0, "stage1.save_every", "must be non-negative");
    require(stage2.steps >= 0, "stage2.steps", "must be non-negative");
    const auto& p = stage2.branch_probabilities;
    require(p.size() == 3, "stage2.branch_probabilities", "needs three entries");
    double total = 0.0;
    for (double x : p) {
        require(x >= 0.0 && x <= 1.0, "stage2.branch_probabilities", "entries must lie in [0, 1]");
        total += x;
    }
    require(std::abs(total - 1.0) <= 1e-9, "stage2.branch_probabilities",
            "must sum to 1 (got " + format_double(total) + ")");
    require(stage2.lambda_2d >= 0.0, "stage2.lambda_2d", "must be non-negative");
    require(stage2.lambda_3d >= 0.0, "stage2.lambda_3d", "must be non-negative");
    require(stage2.zoom_probability >= 0.0 && stage2.zoom_probability <= 1.0, "stage2.zoom_probability",
            "must lie in [0, 1]");
    require(stage2.elevation_min >= -90.0 && stage2.elevation_min <= stage2.elevation_max, "stage2.elevation_min",
            "must lie in [-90, stage2.elevation_max]");
    require(stage2.elevation_max <= 90.0, "stage2.elevation_max", "must be at most 90");
    require(stage2.camera_radius >= 0.0, "stage2.camera_radius", "must be non-negative");
    require(stage2.rgb >= 0.0, "stage2.rgb", "must be non-negative");
    require(stage2.mask >= 0.0, "stage2.mask", "must be non-negative");
    require(stage2.depth >= 0.0, "stage2.depth", "must be non-negative");
    require(guidance.t_min > 0.0 && guidance.t_min < guidance.t_max, "guidance.t_min", "must satisfy 0 < t_min < t_max");
    require(guidance.t_max < 1.0, "guidance.t_max", "must be below 1");
    require(guidance.schedule_offset > 0.0, "guidance.schedule_offset", "must be positive");
    require(guidance.guidance_scale >= 0.0, "guidance.guidance_scale", "must be non-negative");
    require(guidance.codec == "identity" || guidance.codec == "avgpool4", "guidance.codec",
            "must be identity or avgpool4");
    require(guidance.prior == "mock-gaussian" || guidance.prior == "mock-view", "guidance.prior",
            "must be mock-gaussian or mock-view");
    require(guidance.target_color.size() == 3, "guidance.target_color", "needs three entries");
    require(stage3.steps >= 0, "stage3.steps", "must be non-negative");
    require(stage3.nnfm >= 0.0, "stage3.nnfm", "must be non-negative");
    require(stage3.feature_l2 >= 0.0, "stage3.feature_l2", "must be non-negative");
    static const std::set<std::string> levels = {"trace", "debug", "info", "warn", "error", "off"};
    require(levels.count(log.level) != 0, "log.level", "must be one of trace, debug, info, warn, error, off");
    require(log.every > 0, "log.every", "must be positive");
    require(log.preview_every >= 0, "log.preview_every", "must be non-negative");
}

RunConfig parse_config(const std::string& text) {
    RunConfig c;
    for (const auto& [key, value] : parse_document(text)) find_field(key).set(c, value);
    c.validate();
    return c;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string serialize_config(const RunConfig& config) {
    std::string out;
    std::string section;
    for (const Field& f : fields()) {
        const auto dot = f.key.find('.');
        const std::string sec = dot == std::string::npos ? "" : f.key.substr(0, dot);
        const std::string name = dot == std::string::npos ? f.key : f.key.substr(dot + 1);
        if (sec != section) {
            out += "\n[" + sec + "]\n";
            section = sec;
        }
        out += name + " = " + f.get(config) + "\n";
    }
    return out;
}

void apply_override(RunConfig& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "': expected key=value");
    const std::string key = trim(assignment.substr(0, eq));
    const Field& f = find_field(key);
    f.set(config, parse_value(key, trim(assignment.substr(eq + 1)), 0));
    config.validate();
}

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const Field& f : fields()) keys.push_back(f.key);
    return keys;
}

ModelConfig model_config(const RunConfig& config, const SkeletonPose& rest) {
    config.validate();
    const auto& m = config.model;
    const Activation act = m.activation == "relu" ? Activation::kRelu : Activation::kSoftplus;
    ModelConfig cfg;
    cfg.human_shape = FieldShape{m.human_width, m.human_layers, {}, act};
    cfg.human_levels = m.human_levels;
    cfg.background_shape = FieldShape{m.background_width, m.background_layers, {}, act};
    cfg.background_levels = m.background_levels;
    cfg.nonrigid.encoding = EncodingConfig{m.nonrigid_levels, EncodingKind::kPlain};
    cfg.nonrigid.hidden_width = m.nonrigid_width;
    cfg.nonrigid.num_hidden_layers = m.nonrigid_layers;
    cfg.nonrigid.max_offset = m.nonrigid_max_offset;
    cfg.skinning.falloff_factor = m.skinning_falloff;
    const auto& b = m.canonical_box;
    cfg.canonical_box = Aabb{Vec3(b[0], b[1], b[2]), Vec3(b[3], b[4], b[5])};
    cfg.rest = rest;
    return cfg;
}

}  // namespace dvne
