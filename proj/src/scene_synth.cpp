#include "dvne/scene_synth.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

namespace dvne {

namespace fs = std::filesystem;

void SceneSpec::validate() const {
    if (frames < 1) throw InvalidArgument("scene needs at least one frame");
    if (width < 1 || height < 1) throw InvalidArgument("scene resolution must be positive");
    if (!(camera_radius > 0.0)) throw InvalidArgument("camera radius must be positive");
    if (!(fov_degrees > 0.0 && fov_degrees < 180.0)) throw InvalidArgument("field of view must lie in (0, 180)");
}

SceneSpec scene_preset(const std::string& name) {
    SceneSpec s;
    if (name == "short") {
        s.frames = 30;
        s.orbit_degrees = 120.0;
    } else if (name == "long") {
        s.frames = 300;
        s.orbit_degrees = 180.0;
    } else {
        throw InvalidArgument("unknown preset '" + name + "' (expected short or long)");
    }
    return s;
}

Aabb figure_canonical_box() { return Aabb{Vec3(-0.40, -0.335, -0.12), Vec3(0.40, 0.50, 0.12)}; }

namespace {

// Toy rig joints: 0 pelvis, 1 neck, 2 left shoulder, 3 right shoulder.
std::vector<Capsule> figure_capsules() {
    return {
        {Vec3(0, 0.0, 0), Vec3(0, 0.27, 0), 0.075, 0, Vec3(0.20, 0.35, 0.75)},
        {Vec3(0.045, -0.01, 0), Vec3(0.05, -0.29, 0), 0.04, 0, Vec3(0.25, 0.25, 0.30)},
        {Vec3(-0.045, -0.01, 0), Vec3(-0.05, -0.29, 0), 0.04, 0, Vec3(0.25, 0.25, 0.30)},
        {Vec3(0, 0.33, 0), Vec3(0, 0.40, 0), 0.065, 1, Vec3(0.90, 0.72, 0.58)},
        {Vec3(0.08, 0.28, 0), Vec3(0.30, 0.28, 0), 0.032, 2, Vec3(0.85, 0.55, 0.30)},
        {Vec3(-0.08, 0.28, 0), Vec3(-0.30, 0.28, 0), 0.032, 3, Vec3(0.85, 0.55, 0.30)},
    };
}

Vec3 clamp01(const Vec3& c) { return c.cwiseMax(0.0).cwiseMin(1.0); }

Vec3 primitive_color(const Primitive& p, const Vec3& x, const Vec3& dir) {
    if (p.sky) {
        const double up = std::clamp(dir.y(), -1.0, 1.0);
        const double az = std::atan2(dir.z(), dir.x());
        const Vec3 horizon(0.80, 0.85, 0.90);
        const Vec3 zenith(0.35, 0.55, 0.85);
        const double s = std::max(up, 0.0);
        Vec3 c = (1.0 - s) * horizon + s * zenith;
        c += p.amplitude.cwiseProduct(Vec3(std::sin(3.0 * az + p.phase.x()), std::sin(2.0 * az + p.phase.y()),
                                           std::sin(4.0 * az + p.phase.z())));
        return clamp01(c);
    }
    const double f = p.frequency;
    const Vec3 wave(std::sin(f * x.x() + p.phase.x()) * std::sin(f * x.z() + p.phase.y()),
                    std::sin(f * (x.x() + x.z()) + p.phase.z()), std::cos(f * x.x() - p.phase.y()) * std::sin(f * x.y() + f * x.z()));
    return clamp01(p.base + p.amplitude.cwiseProduct(wave));
}

double intersect_primitive(const Primitive& p, const Ray& ray) {
    if (p.kind == Primitive::Kind::kPlane) {
        const double denom = p.normal.dot(ray.direction);
        if (std::abs(denom) < 1e-12) return -1.0;
        return p.normal.dot(p.point - ray.origin) / denom;
    }
    const Vec3 oc = ray.origin - p.point;
    const double b = oc.dot(ray.direction);
    const double c = oc.squaredNorm() - p.radius * p.radius;
    const double h = b * b - c;
    if (h < 0.0) return -1.0;
    const double s = std::sqrt(h);
    const double t0 = -b - s;
    return t0 > 1e-9 ? t0 : -b + s;
}

SkeletonPose frame_pose(const SkeletonPose& rest, int frame, double phase_offset) {
    if (frame == 0) {
        SkeletonPose p = rest;
        p.frame_index = 0;
        return p;
    }
    const double ph = 2.0 * std::numbers::pi * frame / 30.0 + phase_offset;
    std::vector<Vec3> rots(rest.size(), Vec3::Zero());
    rots[0] = Vec3(0.0, 0.3 * std::sin(0.5 * ph), 0.0);
    rots[1] = Vec3(0.2 * std::sin(ph), 0.0, 0.1 * std::cos(ph));
    rots[2] = Vec3(0.0, 0.2 * std::sin(ph + 0.5), -(0.5 + 0.3 * std::sin(ph)));
    rots[3] = Vec3(0.0, -0.2 * std::sin(ph + 0.5), 0.5 + 0.3 * std::sin(ph + 1.0));
    SkeletonPose p = pose_from_rotations(rest, rots, Vec3(0.05 * std::sin(0.5 * ph), 0.0, 0.03 * std::cos(0.5 * ph)));
    p.frame_index = frame;
    return p;
}

}  // namespace

SyntheticScene build_scene(const SceneSpec& spec, std::uint64_t seed) {
    spec.validate();
    SyntheticScene s;
    s.spec = spec;
    s.rest = toy_rig();
    if (spec.figure) s.capsules = figure_capsules();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    if (spec.ground) {
        Primitive g;
        g.point = Vec3(0, spec.ground_height, 0);
        g.normal = Vec3::UnitY();
        g.base = Vec3(0.45, 0.50, 0.35);
        g.amplitude = Vec3(0.20, 0.15, 0.12);
        g.frequency = 4.0;
        g.phase = Vec3(phase(rng), phase(rng), phase(rng));
        s.background.push_back(g);
    }
    if (spec.sky) {
        Primitive sky;
        sky.kind = Primitive::Kind::kSphere;
        sky.radius = 6.0;
        sky.sky = true;
        sky.amplitude = Vec3(0.05, 0.04, 0.05);
        sky.phase = Vec3(phase(rng), phase(rng), phase(rng));
        s.background.push_back(sky);
    }
    for (const Primitive& p : spec.extra) s.background.push_back(p);
    const double motion_phase = phase(rng);
    for (int f = 0; f < spec.frames; ++f) {
        s.poses.push_back(frame_pose(s.rest, f, motion_phase));
        const double u = spec.frames > 1 ? static_cast<double>(f) / (spec.frames - 1) : 0.5;
        const double az = (u - 0.5) * spec.orbit_degrees * std::numbers::pi / 180.0;
        const Vec3 eye(spec.camera_radius * std::sin(az), spec.camera_height, spec.camera_radius * std::cos(az));
        s.cameras.push_back(look_at(eye, spec.target, Vec3::UnitY(), spec.fov_degrees, spec.width, spec.height, f));
    }
    return s;
}

double intersect_capsule(const Ray& ray, const Vec3& a, const Vec3& b, double radius) {
    const Vec3 ba = b - a;
    const Vec3 oa = ray.origin - a;
    const Vec3& rd = ray.direction;
    const double baba = ba.dot(ba);
    const double bard = ba.dot(rd);
    const double baoa = ba.dot(oa);
    const double rdoa = rd.dot(oa);
    const double oaoa = oa.dot(oa);
    const double qa = baba - bard * bard;
    const double qb = baba * rdoa - baoa * bard;
    const double qc = baba * oaoa - baoa * baoa - radius * radius * baba;
    double best = -1.0;
    if (qa > 1e-14) {
        const double h = qb * qb - qa * qc;
        if (h >= 0.0) {
            const double t = (-qb - std::sqrt(h)) / qa;
            const double y = baoa + t * bard;
            if (y > 0.0 && y < baba && t > 1e-9) return t;
        }
    }
    // End spheres.
    for (const Vec3& c : {a, b}) {
        const Vec3 oc = ray.origin - c;
        const double hb = rd.dot(oc);
        const double hc = oc.dot(oc) - radius * radius;
        const double h = hb * hb - hc;
        if (h < 0.0) continue;
        const double t = -hb - std::sqrt(h);
        if (t > 1e-9 && (best < 0.0 || t < best)) best = t;
    }
    return best;
}

TraceHit trace(const SyntheticScene& scene, const Ray& ray, const SkeletonPose& pose,
               const std::optional<Vec3>& figure_color) {
    TraceHit hit;
    if (!scene.capsules.empty()) {
        const auto transforms = joint_transforms(scene.rest, pose);
        for (const Capsule& c : scene.capsules) {
            const RigidTransform& tr = transforms[static_cast<std::size_t>(c.joint)];
            const double t = intersect_capsule(ray, tr.apply(c.a), tr.apply(c.b), c.radius);
            if (t > 0.0 && (!hit.hit || t < hit.t)) {
                hit.hit = true;
                hit.figure = true;
                hit.t = t;
                if (figure_color) {
                    hit.color = *figure_color;
                } else {
                    // Shade by height in rest space so colour is fixed on the body.
                    const Vec3 rest_point = tr.inverse().apply(ray.at(t));
                    hit.color = clamp01(c.color + Vec3::Constant(0.25 * rest_point.y()));
                }
            }
        }
    }
    for (const Primitive& p : scene.background) {
        const double t = intersect_primitive(p, ray);
        if (t > 1e-9 && (!hit.hit || t < hit.t)) {
            hit.hit = true;
            hit.figure = false;
            hit.t = t;
            hit.color = primitive_color(p, ray.at(t), ray.direction);
        }
    }
    if (!hit.hit) hit.color = scene.spec.background;
    return hit;
}

AnalyticFrame analytic_render(const SyntheticScene& scene, const Camera& camera, const SkeletonPose& pose,
                              const std::optional<Vec3>& figure_color) {
    camera.validate();
    AnalyticFrame f{Image(camera.width, camera.height, 3), Image(camera.width, camera.height, 1),
                    Image(camera.width, camera.height, 1)};
    const Vec3 fwd = camera.forward();
    for (int y = 0; y < camera.height; ++y) {
        for (int x = 0; x < camera.width; ++x) {
            const Ray ray = camera.pixel_ray(x, y);
            const TraceHit h = trace(scene, ray, pose, figure_color);
            const Eigen::Index i = f.color.index(x, y);
            f.color.pixels.row(i) = h.color.transpose();
            f.mask.pixels(i, 0) = h.figure ? 1.0 : 0.0;
            f.depth.pixels(i, 0) = h.hit ? h.t * ray.direction.dot(fwd) : 0.0;
        }
    }
    return f;
}

std::string frame_name(int index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06d", index);
    return buf;
}

Camera reference_camera(const SceneSpec& spec) {
    const Vec3 eye = spec.target + Vec3(0.0, 0.0, spec.camera_radius);
    return look_at(eye, spec.target, Vec3::UnitY(), spec.fov_degrees, spec.width, spec.height);
}

void generate(const SceneSpec& spec, std::uint64_t seed, const fs::path& dir) {
    const SyntheticScene scene = build_scene(spec, seed);
    try {
        for (const char* sub : {"frames", "masks", "depths", "cameras", "poses"}) fs::create_directories(dir / sub);
    } catch (const fs::filesystem_error& e) {
        throw IoError("cannot create dataset directory " + dir.string() + ": " + e.what());
    }
    write_rest_pose_json(dir / "rest_pose.json", scene.rest);
    for (int f = 0; f < spec.frames; ++f) {
        const auto& cam = scene.cameras[static_cast<std::size_t>(f)];
        const auto& pose = scene.poses[static_cast<std::size_t>(f)];
        const AnalyticFrame img = analytic_render(scene, cam, pose);
        const std::string n = frame_name(f);
        write_png(dir / "frames" / (n + ".png"), img.color);
        write_pfm(dir / "masks" / (n + ".pfm"), img.mask);
        write_pfm(dir / "depths" / (n + ".pfm"), img.depth);
        write_camera_json(dir / "cameras" / (n + ".json"), cam);
        write_pose_json(dir / "poses" / (n + ".json"), pose);
    }
    if (spec.write_reference) {
        const fs::path ref = dir / "reference";
        fs::create_directories(ref);
        const Camera cam = reference_camera(spec);
        const AnalyticFrame img = analytic_render(scene, cam, scene.poses[0], spec.reference_color);
        write_png(ref / "image.png", img.color);
        write_pfm(ref / "mask.pfm", img.mask);
        write_pfm(ref / "depth.pfm", img.depth);
        write_camera_json(ref / "camera.json", cam);
        write_pose_json(ref / "pose.json", scene.poses[0]);
    }
}

Dataset read_dataset(const fs::path& dir) {
    if (!fs::is_directory(dir / "frames")) throw IngestionError(dir.string() + ": no frames directory");
    Dataset d;
    const fs::path rest = dir / "rest_pose.json";
    if (!fs::exists(rest)) throw IngestionError(dir.string() + ": missing rest_pose.json");
    d.rest = read_rest_pose_json(rest);
    std::vector<fs::path> frames;
    for (const auto& e : fs::directory_iterator(dir / "frames")) {
        if (e.path().extension() == ".png") frames.push_back(e.path());
    }
    std::sort(frames.begin(), frames.end());
    for (std::size_t i = 0; i < frames.size(); ++i) {
        const std::string n = frames[i].stem().string();
        if (n != frame_name(static_cast<int>(i))) throw IngestionError("frame " + n + ": frame indices are not contiguous");
        auto need = [&](const fs::path& p, const char* what) {
            if (!fs::exists(p)) throw IngestionError("frame " + n + ": missing " + what + " " + p.string());
            return p;
        };
        d.frames.push_back(read_png(frames[i]));
        d.masks.push_back(read_pfm(need(dir / "masks" / (n + ".pfm"), "mask")));
        d.depths.push_back(read_pfm(need(dir / "depths" / (n + ".pfm"), "depth")));
        d.cameras.push_back(read_camera_json(need(dir / "cameras" / (n + ".json"), "camera")));
        d.poses.push_back(read_pose_json(need(dir / "poses" / (n + ".json"), "pose"), &d.rest));
        const Image& img = d.frames.back();
        const Camera& cam = d.cameras.back();
        if (cam.width != img.width || cam.height != img.height) {
            throw IngestionError("frame " + n + ": camera size differs from the image");
        }
    }
    if (d.frames.empty()) throw IngestionError(dir.string() + ": no frames");
    return d;
}

}  // namespace dvne
