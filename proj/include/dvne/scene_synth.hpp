#pragma once

#include "dvne/camera.hpp"
#include "dvne/deformation.hpp"
#include "dvne/fields.hpp"
#include "dvne/image_io.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace dvne {

// Capsule bound to a joint, defined in rest space.
struct Capsule {
    Vec3 a = Vec3::Zero();
    Vec3 b = Vec3::Zero();
    double radius = 0.05;
    int joint = 0;
    Vec3 color = Vec3::Constant(0.5);
};

// Background primitive with a smooth sinusoidal texture.
struct Primitive {
    enum class Kind { kPlane, kSphere } kind = Kind::kPlane;
    Vec3 point = Vec3::Zero();    // plane point or sphere centre
    Vec3 normal = Vec3::UnitY();  // plane normal
    double radius = 1.0;          // sphere radius
    Vec3 base = Vec3::Constant(0.5);
    Vec3 amplitude = Vec3::Zero();
    double frequency = 6.0;
    Vec3 phase = Vec3::Zero();
    bool sky = false;  // colour by direction instead of position
};

struct SceneSpec {
    int frames = 30;
    int width = 128;
    int height = 128;
    double orbit_degrees = 180.0;
    double camera_radius = 1.0;
    double camera_height = 0.12;
    Vec3 target = Vec3(0.0, 0.05, 0.0);
    double fov_degrees = 50.0;
    bool figure = true;
    bool ground = true;
    bool sky = true;
    double ground_height = -0.34;
    Vec3 background = Vec3::Zero();  // colour of rays that hit nothing
    std::vector<Primitive> extra;
    // Front-view T-pose reference with the figure recoloured, written to reference/.
    bool write_reference = true;
    Vec3 reference_color = Vec3(0.85, 0.1, 0.1);

    void validate() const;
};

// "short" (30 frames) or "long" (300 frames).
SceneSpec scene_preset(const std::string& name);

// Box that contains the rest-pose figure.
Aabb figure_canonical_box();

struct SyntheticScene {
    SceneSpec spec;
    SkeletonPose rest;
    std::vector<Capsule> capsules;
    std::vector<Primitive> background;
    std::vector<SkeletonPose> poses;  // frame 0 is the T-pose
    std::vector<Camera> cameras;
};

SyntheticScene build_scene(const SceneSpec& spec, std::uint64_t seed);

struct TraceHit {
    bool hit = false;
    bool figure = false;
    double t = 0.0;
    Vec3 color = Vec3::Zero();
};

// First intersection along the ray; the figure is posed with `pose`.
TraceHit trace(const SyntheticScene& scene, const Ray& ray, const SkeletonPose& pose,
               const std::optional<Vec3>& figure_color = std::nullopt);
// Distance to a capsule along a ray, or a negative value on a miss.
double intersect_capsule(const Ray& ray, const Vec3& a, const Vec3& b, double radius);

struct AnalyticFrame {
    Image color;  // 3 channels
    Image mask;   // 1 where the figure is the first hit
    Image depth;  // camera-space z of the first hit, 0 on a miss
};

AnalyticFrame analytic_render(const SyntheticScene& scene, const Camera& camera, const SkeletonPose& pose,
                              const std::optional<Vec3>& figure_color = std::nullopt);

// Front camera at the orbit radius, level with the target.
Camera reference_camera(const SceneSpec& spec);

// Writes frames/NNNNNN.png, masks/ and depths/ (.pfm), cameras/ and poses/
// (.json) and rest_pose.json under `dir`, plus reference/ (image.png,
// mask.pfm, depth.pfm, camera.json, pose.json) when enabled.
void generate(const SceneSpec& spec, std::uint64_t seed, const std::filesystem::path& dir);

struct Dataset {
    std::vector<Image> frames;
    std::vector<Image> masks;
    std::vector<Image> depths;
    std::vector<Camera> cameras;
    std::vector<SkeletonPose> poses;
    SkeletonPose rest;

    std::size_t size() const { return frames.size(); }
};

// Reads a dataset written by generate(); missing records raise an
// IngestionError naming the frame.
Dataset read_dataset(const std::filesystem::path& dir);
std::string frame_name(int index);

}  // namespace dvne
