#include "dvne/scene_synth.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <iterator>
#include <random>

namespace dvne {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("dvne_synth_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

SceneSpec small_spec(int frames = 4, int res = 12) {
    SceneSpec s = scene_preset("short");
    s.frames = frames;
    s.width = res;
    s.height = res;
    return s;
}

// Sphere tracing on the exact distance to a capsule.
double march_capsule(const Ray& ray, const Vec3& a, const Vec3& b, double r) {
    const Vec3 ab = b - a;
    double t = 0.0;
    for (int i = 0; i < 10000 && t < 50.0; ++i) {
        const Vec3 p = ray.at(t);
        const double h = std::clamp((p - a).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
        const double d = (p - a - h * ab).norm() - r;
        if (d < 1e-12) return t;
        t += d;
    }
    return -1.0;
}

TEST(SceneSynth, CapsuleKnownHits) {
    const Vec3 a(-1, 0, 0), b(1, 0, 0);
    EXPECT_NEAR(intersect_capsule(Ray{Vec3(0, 0, 2), Vec3(0, 0, -1)}, a, b, 0.5), 1.5, 1e-12);
    // Along the axis: hits the end sphere.
    EXPECT_NEAR(intersect_capsule(Ray{Vec3(3, 0, 0), Vec3(-1, 0, 0)}, a, b, 0.5), 1.5, 1e-12);
    EXPECT_LT(intersect_capsule(Ray{Vec3(0, 2, 2), Vec3(0, 0, -1)}, a, b, 0.5), 0.0);
}

TEST(SceneSynth, CapsuleMatchesSphereTracing) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    int hits = 0;
    for (int i = 0; i < 300; ++i) {
        const Vec3 a(u(rng) * 0.3, u(rng) * 0.3, u(rng) * 0.3);
        const Vec3 b(u(rng) * 0.5, u(rng) * 0.5, u(rng) * 0.5);
        const double r = 0.1 + 0.2 * std::abs(u(rng));
        const Vec3 origin = Vec3(u(rng), u(rng), u(rng)).normalized() * 3.0;
        const Vec3 toward = (Vec3(u(rng), u(rng), u(rng)) * 0.4 - origin).normalized();
        const Ray ray{origin, toward};
        const double t = intersect_capsule(ray, a, b, r);
        const double ref = march_capsule(ray, a, b, r);
        ASSERT_EQ(t > 0.0, ref > 0.0) << i;
        if (t > 0.0) {
            ++hits;
            EXPECT_NEAR(t, ref, 1e-6) << i;
        }
    }
    EXPECT_GT(hits, 50);
}

TEST(SceneSynth, FigureHitReturnsFigureColor) {
    const SyntheticScene scene = build_scene(small_spec(), 1);
    const Camera& cam = scene.cameras[0];
    // The ray toward the pelvis origin hits the torso first.
    const Vec3 dir = (Vec3(0, 0.1, 0) - cam.center()).normalized();
    const TraceHit h = trace(scene, Ray{cam.center(), dir}, scene.poses[0], Vec3(1, 0, 0));
    ASSERT_TRUE(h.figure);
    EXPECT_EQ(h.color, Vec3(1, 0, 0));
    EXPECT_NEAR(h.t, march_capsule(Ray{cam.center(), dir}, scene.capsules[0].a, scene.capsules[0].b,
                                   scene.capsules[0].radius), 1e-6);
}

TEST(SceneSynth, MissGivesBackgroundColor) {
    SceneSpec s = small_spec();
    s.sky = false;
    s.ground = false;
    s.figure = false;
    s.background = Vec3(0.1, 0.2, 0.3);
    const SyntheticScene scene = build_scene(s, 1);
    const AnalyticFrame f = analytic_render(scene, scene.cameras[0], scene.poses[0]);
    for (Eigen::Index i = 0; i < f.color.pixels.rows(); ++i) {
        EXPECT_EQ(f.color.pixels.row(i), Eigen::RowVector3d(0.1, 0.2, 0.3));
        EXPECT_EQ(f.depth.pixels(i, 0), 0.0);
    }
}

TEST(SceneSynth, FrontoParallelPlaneDepth) {
    SceneSpec s = small_spec(1, 16);
    s.figure = false;
    s.sky = false;
    s.ground = false;
    Primitive plane;
    plane.point = Vec3(0, 0, -5);
    plane.normal = Vec3::UnitZ();
    s.extra.push_back(plane);
    const SyntheticScene scene = build_scene(s, 1);
    const Camera cam = look_at(Vec3::Zero(), Vec3(0, 0, -1), Vec3::UnitY(), 60.0, 16, 16);
    const AnalyticFrame f = analytic_render(scene, cam, scene.poses[0]);
    EXPECT_NEAR(f.depth.pixels.minCoeff(), 5.0, 1e-6);
    EXPECT_NEAR(f.depth.pixels.maxCoeff(), 5.0, 1e-6);
}

TEST(SceneSynth, MasksEmptyWithoutFigure) {
    SceneSpec s = small_spec(30, 8);
    s.figure = false;
    const fs::path dir = temp_dir("nofig");
    generate(s, 5, dir);
    const Dataset d = read_dataset(dir);
    ASSERT_EQ(d.size(), 30u);
    for (const Image& m : d.masks) EXPECT_EQ(m.pixels.maxCoeff(), 0.0);
    fs::remove_all(dir);
}

TEST(SceneSynth, RegenerationIsBitIdentical) {
    const fs::path a = temp_dir("regen_a");
    const fs::path b = temp_dir("regen_b");
    generate(small_spec(), 11, a);
    generate(small_spec(), 11, b);
    std::size_t files = 0;
    for (const auto& e : fs::recursive_directory_iterator(a)) {
        if (!e.is_regular_file()) continue;
        ++files;
        EXPECT_EQ(slurp(e.path()), slurp(b / fs::relative(e.path(), a))) << e.path();
    }
    EXPECT_EQ(files, 1u + 4u * 5u + 5u);
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST(SceneSynth, FilesRoundTripThroughReaders) {
    const fs::path dir = temp_dir("roundtrip");
    generate(small_spec(), 2, dir);
    const SyntheticScene scene = build_scene(small_spec(), 2);
    const Dataset d = read_dataset(dir);
    ASSERT_EQ(d.size(), 4u);
    for (std::size_t f = 0; f < d.size(); ++f) {
        const AnalyticFrame ref = analytic_render(scene, scene.cameras[f], scene.poses[f]);
        const ad::Tensor quantized = (ref.color.pixels.cwiseMax(0.0).cwiseMin(1.0) * 255.0).array().round() / 255.0;
        EXPECT_EQ(d.frames[f].pixels, quantized);
        EXPECT_EQ(d.masks[f].pixels, ref.mask.pixels.cast<float>().cast<double>());
        EXPECT_EQ(d.depths[f].pixels, ref.depth.pixels.cast<float>().cast<double>());
        EXPECT_EQ(d.cameras[f].camera_to_world, scene.cameras[f].camera_to_world);
        EXPECT_EQ(d.cameras[f].intrinsics, scene.cameras[f].intrinsics);
        for (std::size_t j = 0; j < scene.rest.size(); ++j) {
            EXPECT_EQ(d.poses[f].rotations[j], scene.poses[f].rotations[j]);
            EXPECT_EQ(d.poses[f].joints[j], scene.poses[f].joints[j]);
        }
    }
    EXPECT_GT(d.masks[0].pixels.sum(), 0.0);
    fs::remove_all(dir);
}

TEST(SceneSynth, SequenceStartsInTPoseAndStaysAboveGround) {
    const SyntheticScene scene = build_scene(scene_preset("long"), 4);
    ASSERT_EQ(scene.poses.size(), 300u);
    EXPECT_TRUE(scene.poses[0].is_t_pose());
    EXPECT_FALSE(scene.poses[7].is_t_pose());
    const Aabb box = figure_canonical_box();
    for (const SkeletonPose& pose : scene.poses) {
        const auto tr = joint_transforms(scene.rest, pose);
        for (const Capsule& c : scene.capsules) {
            for (const Vec3& p : {c.a, c.b}) {
                const Vec3 q = tr[static_cast<std::size_t>(c.joint)].apply(p);
                EXPECT_GE(q.y() - c.radius, scene.spec.ground_height - 1e-9);
                if (pose.frame_index == 0) {
                    EXPECT_TRUE(((q.array() - c.radius) >= box.lo.array()).all());
                    EXPECT_TRUE(((q.array() + c.radius) <= box.hi.array()).all());
                }
            }
        }
    }
}

TEST(SceneSynth, MissingRecordNamesFrame) {
    const fs::path dir = temp_dir("missing");
    generate(small_spec(), 2, dir);
    fs::remove(dir / "cameras" / "000002.json");
    try {
        read_dataset(dir);
        FAIL() << "expected an ingestion error";
    } catch (const IngestionError& e) {
        EXPECT_NE(std::string(e.what()).find("000002"), std::string::npos) << e.what();
    }
    fs::remove_all(dir);
}

TEST(SceneSynth, UnwritableDirectoryThrows) {
    const fs::path file = temp_dir("blocker");
    std::ofstream(file) << "x";
    EXPECT_THROW(generate(small_spec(), 1, file / "sub"), IoError);
    fs::remove(file);
}

TEST(SceneSynth, RejectsUnknownPreset) { EXPECT_THROW(scene_preset("medium"), InvalidArgument); }

}  // namespace
}  // namespace dvne
