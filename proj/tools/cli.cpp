#include "cli.hpp"

#include "dvne/checks.hpp"
#include "dvne/errors.hpp"
#include "dvne/manifest.hpp"
#include "dvne/training.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <optional>
#include <regex>

#ifndef DVNE_VERSION
#define DVNE_VERSION "0.0.0"
#endif

namespace dvne::cli {

namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string resolution;
    std::string log_level;
    std::string metrics;
    std::vector<std::string> overrides;
    // Input paths; empty keeps the config value.
    std::string data;
    std::string checkpoint;
    std::string reference;
    std::string style;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "Config file (TOML subset)");
    sub->add_option("--seed", c.seed, "Run seed");
    sub->add_option("--out", c.out, "Output directory");
    sub->add_option("--resolution", c.resolution, "Render resolution WxH");
    sub->add_option("--log-level", c.log_level, "trace, debug, info, warn, error or off");
    sub->add_option("--metrics", c.metrics, "Metrics CSV path (default <out>/metrics.csv)");
    sub->add_option("--set", c.overrides, "Config override key=value (repeatable)");
}

void set_resolution(RunConfig& cfg, const std::string& text) {
    static const std::regex re("([0-9]+)x([0-9]+)");
    std::smatch m;
    if (!std::regex_match(text, m, re)) throw ConfigError("config key 'render.width': --resolution must look like WxH");
    cfg.render.width = std::stoi(m[1]);
    cfg.render.height = std::stoi(m[2]);
}

RunConfig build_config(const Common& c, const std::string& stage) {
    RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
    for (const std::string& o : c.overrides) apply_override(cfg, o);
    if (c.seed) cfg.seed = *c.seed;
    if (!c.resolution.empty()) set_resolution(cfg, c.resolution);
    if (!c.log_level.empty()) cfg.log.level = c.log_level;
    if (!c.metrics.empty()) cfg.log.metrics = c.metrics;
    if (!c.out.empty()) cfg.paths.out = c.out;
    if (!c.data.empty()) cfg.paths.data = c.data;
    if (!c.checkpoint.empty()) cfg.paths.checkpoint = c.checkpoint;
    if (!c.reference.empty()) cfg.paths.reference = c.reference;
    if (!c.style.empty()) cfg.paths.style = c.style;
    if (!stage.empty()) cfg.stage = stage;
    cfg.validate();
    return cfg;
}

void setup_logging(const std::string& level, std::ostream& err) {
    auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err);
    auto logger = std::make_shared<spdlog::logger>("dvne", sink);
    logger->set_pattern("%Y-%m-%dT%H:%M:%S.%e [%l] %v");
    logger->set_level(spdlog::level::from_str(level));
    spdlog::set_default_logger(logger);
}

std::string reference_dir(const RunConfig& cfg) {
    return cfg.paths.reference.empty() ? (fs::path(cfg.paths.data) / "reference").string() : cfg.paths.reference;
}

std::vector<ManifestInput> command_inputs(const std::string& command, const RunConfig& cfg) {
    std::vector<ManifestInput> in;
    if (command == "edit-fg" || command == "edit-bg" || command == "render") {
        if (!fs::exists(cfg.paths.checkpoint)) throw MissingCheckpoint("checkpoint not found: " + cfg.paths.checkpoint);
        in.push_back({"checkpoint", cfg.paths.checkpoint, ""});
    }
    if (command != "synth") in.push_back({"data", cfg.paths.data, ""});
    if (command == "edit-fg") in.push_back({"reference", reference_dir(cfg), ""});
    if (command == "edit-bg") {
        if (cfg.paths.style.empty()) throw ConfigError("config key 'paths.style': required by edit-bg");
        in.push_back({"style", cfg.paths.style, ""});
    }
    return in;
}

SceneSpec synth_spec(const std::map<std::string, std::string>& args) {
    SceneSpec spec = scene_preset(args.at("preset"));
    if (args.count("width")) {
        spec.width = std::stoi(args.at("width"));
        spec.height = std::stoi(args.at("height"));
    }
    spec.validate();
    return spec;
}

// Stage hooks shared by the training commands: metrics, periodic previews
// and (stage 1) periodic checkpoints.
struct HookState {
    std::unique_ptr<MetricsWriter> metrics;
    StageHooks hooks;
};

HookState make_hooks(const RunConfig& cfg, const fs::path& out, const Camera* preview_camera,
                     const SkeletonPose* preview_pose, bool save_checkpoints) {
    HookState s;
    const fs::path metrics = cfg.log.metrics.empty() ? out / "metrics.csv" : fs::path(cfg.log.metrics);
    s.metrics = std::make_unique<MetricsWriter>(metrics);
    s.hooks.metrics = s.metrics.get();
    s.hooks.log_every = cfg.log.every;
    const int preview_every = cfg.log.preview_every;
    const int save_every = save_checkpoints ? cfg.stage1.save_every : 0;
    if (preview_every > 0 || save_every > 0) {
        const RenderOptions opts = render_options(cfg);
        const Camera cam = preview_camera ? preview_camera->resized(cfg.render.width, cfg.render.height) : Camera{};
        const SkeletonPose pose = preview_pose ? *preview_pose : SkeletonPose{};
        s.hooks.on_step = [=](int step, const SceneModel& model) {
            if (preview_every > 0 && preview_camera && step % preview_every == 0) {
                fs::create_directories(out / "previews");
                write_png(out / "previews" / ("step_" + frame_name(step) + ".png"),
                          render_image(model, cam, pose, opts).color);
            }
            if (save_every > 0 && step % save_every == 0) save_checkpoint(out / "model.ckpt", model);
        };
    }
    return s;
}

void run_stage(const std::string& command, const RunConfig& cfg, const std::map<std::string, std::string>& args,
               std::map<std::string, double>& timing) {
    const fs::path out = cfg.paths.out;
    const auto t0 = std::chrono::steady_clock::now();
    auto lap = [&](const std::string& name) {
        timing[name] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };
    if (command == "synth") {
        generate(synth_spec(args), cfg.seed, out);
        lap("synth");
        return;
    }
    const Dataset data = read_dataset(cfg.paths.data);
    lap("load");
    if (command == "reconstruct") {
        HookState h = make_hooks(cfg, out, &data.cameras.front(), &data.poses.front(), true);
        const SceneModel model = stage1_reconstruct(data, cfg, nullptr, h.hooks);
        save_checkpoint(out / "model.ckpt", model);
        lap("stage1");
        return;
    }
    const SceneModel model = load_checkpoint(cfg.paths.checkpoint);
    if (command == "edit-fg") {
        const ReferenceBundle ref = read_reference_bundle(reference_dir(cfg), model.config().rest);
        const auto prior_2d = make_mock_prior(cfg, ConditioningKind::kText);
        const auto prior_3d = make_mock_prior(cfg, ConditioningKind::kView);
        const auto codec = make_codec(cfg.guidance.codec);
        Stage2Inputs in{&ref, data.poses, prior_2d.get(), prior_3d.get(), codec.get()};
        HookState h = make_hooks(cfg, out, &ref.camera, &ref.pose, false);
        save_checkpoint(out / "model.ckpt", stage2_edit_foreground(model, in, cfg, nullptr, h.hooks));
        lap("stage2");
        return;
    }
    if (command == "edit-bg") {
        const Image style = read_png(cfg.paths.style);
        const MockConvProvider provider;
        Stage3Inputs in{&style, &provider, data.cameras, data.poses};
        HookState h = make_hooks(cfg, out, &data.cameras.front(), &data.poses.front(), false);
        save_checkpoint(out / "model.ckpt", stage3_edit_background(model, in, cfg, nullptr, h.hooks));
        lap("stage3");
        return;
    }
    if (command == "render") {
        render_video(model, data.cameras, data.poses, render_options(cfg), cfg.render.width, cfg.render.height, out);
        lap("render");
        return;
    }
    throw InvalidArgument("unknown command '" + command + "'");
}

// Writes the manifest, then runs the command and records its timing.
void execute(const std::string& command, const RunConfig& cfg, const std::map<std::string, std::string>& args) {
    RunManifest m;
    m.tool_version = DVNE_VERSION;
    m.command = command;
    m.seed = cfg.seed;
    m.config = serialize_config(cfg);
    m.arguments = args;
    m.inputs = command_inputs(command, cfg);
    hash_inputs(m);
    const fs::path manifest = fs::path(cfg.paths.out) / "manifest.json";
    write_manifest(manifest, m);
    spdlog::info("{} seed={} inputs={} out={}", command, cfg.seed, m.input_hash, cfg.paths.out);
    std::map<std::string, double> timing;
    run_stage(command, cfg, args, timing);
    write_timing(manifest, timing);
    spdlog::info("{} done in {:.2f}s", command, timing.empty() ? 0.0 : timing.rbegin()->second);
}

void replay(const std::string& manifest_path, const std::string& out) {
    const RunManifest m = read_manifest(manifest_path);
    RunConfig cfg = parse_config(m.config);
    cfg.paths.out = out;
    cfg.log.metrics.clear();
    std::vector<ManifestInput> now = m.inputs;
    for (ManifestInput& in : now) {
        in.hash = git_object_hash(in.path);
        if (in.hash != m.inputs[static_cast<std::size_t>(&in - now.data())].hash) {
            throw Error("input-mismatch", in.role + " input " + in.path + " changed since the manifest was written");
        }
    }
    execute(m.command, cfg, m.arguments);
}

std::string one_line(std::string s) {
    for (char& c : s) {
        if (c == '\n' || c == '\r') c = ' ';
    }
    return s;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Dynamic human-scene video editing toolkit", "dvne"};
    app.require_subcommand(1);
    app.set_version_flag("--version", DVNE_VERSION);

    Common common;
    std::string preset = "short";
    std::string manifest_path;

    CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
    add_common(synth, common);
    synth->add_option("--preset", preset, "short (30 frames) or long (300 frames)")
        ->check(CLI::IsMember({"short", "long"}));

    CLI::App* recon = app.add_subcommand("reconstruct", "Stage 1: fit the scene and human fields");
    add_common(recon, common);
    recon->add_option("--data", common.data, "Dataset directory");

    CLI::App* fg = app.add_subcommand("edit-fg", "Stage 2: edit the human");
    add_common(fg, common);
    fg->add_option("--data", common.data, "Dataset directory (frame poses)");
    fg->add_option("--checkpoint", common.checkpoint, "Input checkpoint");
    fg->add_option("--reference", common.reference, "Reference bundle directory (default <data>/reference)");

    CLI::App* bg = app.add_subcommand("edit-bg", "Stage 3: stylize the background");
    add_common(bg, common);
    bg->add_option("--data", common.data, "Dataset directory (cameras and poses)");
    bg->add_option("--checkpoint", common.checkpoint, "Input checkpoint");
    bg->add_option("--style", common.style, "Style image (PNG)");

    CLI::App* render = app.add_subcommand("render", "Render every dataset camera");
    add_common(render, common);
    render->add_option("--data", common.data, "Dataset directory (cameras and poses)");
    render->add_option("--checkpoint", common.checkpoint, "Input checkpoint");

    CLI::App* check = app.add_subcommand("check", "Run the invariant suites");
    std::string check_level = "warn";
    check->add_option("--log-level", check_level, "Log level");

    CLI::App* rep = app.add_subcommand("replay", "Re-execute a run from its manifest");
    rep->add_option("manifest", manifest_path, "manifest.json of a previous run")->required();
    rep->add_option("--out", common.out, "Output directory for the re-run")->required();
    rep->add_option("--log-level", common.log_level, "Log level");

    app.failure_message(CLI::FailureMessage::help);
    if (args.size() > 1 && !args[1].empty() && args[1][0] != '-' && app.get_subcommand_no_throw(args[1]) == nullptr) {
        err << "error: usage: unknown subcommand '" << args[1] << "'\n" << app.help();
        return 2;
    }
    std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
    try {
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }

    try {
        if (check->parsed()) {
            setup_logging(check_level, err);
            bool ok = true;
            std::string failed;
            for (const CheckResult& r : run_invariant_checks()) {
                out << (r.passed ? "PASS " : "FAIL ") << r.name << " (" << r.seconds << "s) " << r.detail << '\n';
                if (!r.passed) {
                    ok = false;
                    failed += (failed.empty() ? "" : ",") + r.name;
                }
            }
            if (!ok) {
                err << "error: check-failed: " << failed << '\n';
                return 1;
            }
            return 0;
        }
        if (rep->parsed()) {
            setup_logging(common.log_level.empty() ? "info" : common.log_level, err);
            replay(manifest_path, common.out);
            return 0;
        }
        CLI::App* sub = app.get_subcommands().front();
        const std::string command = sub->get_name();
        static const std::map<std::string, std::string> stages = {{"synth", ""},
                                                                  {"reconstruct", "reconstruct"},
                                                                  {"edit-fg", "edit_foreground"},
                                                                  {"edit-bg", "edit_background"},
                                                                  {"render", "render"}};
        const RunConfig cfg = build_config(common, stages.at(command));
        setup_logging(cfg.log.level, err);
        std::map<std::string, std::string> extra;
        if (command == "synth") {
            extra["preset"] = preset;
            if (!common.resolution.empty()) {
                extra["width"] = std::to_string(cfg.render.width);
                extra["height"] = std::to_string(cfg.render.height);
            }
        }
        execute(command, cfg, extra);
        return 0;
    } catch (const ConfigError& e) {
        err << "error: config: " << one_line(e.what()) << '\n';
        return 2;
    } catch (const Error& e) {
        err << "error: " << e.category() << ": " << one_line(e.what()) << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << "error: internal: " << one_line(e.what()) << '\n';
        return 1;
    }
}

}  // namespace dvne::cli
