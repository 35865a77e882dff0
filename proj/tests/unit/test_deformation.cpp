#include "dvne/deformation.hpp"
#include "dvne/model.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <numbers>
#include <random>

namespace dvne {
namespace {

Vec3 random_point(std::mt19937_64& rng, double scale = 0.5) {
    std::uniform_real_distribution<double> u(-scale, scale);
    return {u(rng), u(rng), u(rng)};
}

TEST(Deformation, RestPoseIsIdentity) {
    SceneModel model(testing::tiny_config(), 1);
    const SkeletonPose rest = model.config().rest;
    std::mt19937_64 rng(2);
    for (int i = 0; i < 200; ++i) {
        const Vec3 x = random_point(rng);
        EXPECT_LE((model.deformation().deform(model.params(), x, rest) - x).norm(), 1e-9);
    }
}

TEST(Deformation, SingleBoneRotation) {
    const SkeletonPose rest = single_bone_rig(0.3);
    DeformationField field(rest, SkinningConfig{}, NonrigidConfig{});
    const SkeletonPose posed = pose_from_rotations(rest, {Vec3(0, 0, std::numbers::pi / 2)});
    // A point on the posed bone (now along +y) maps back onto +x.
    const Vec3 x_d(0, 0.2, 0);
    const Vec3 expect = axis_angle_to_matrix(Vec3(0, 0, -std::numbers::pi / 2)) * x_d;
    EXPECT_LE((field.coarse_deform(x_d, posed) - expect).norm(), 1e-6);
    EXPECT_LE((expect - Vec3(0.2, 0, 0)).norm(), 1e-12);
}

TEST(Deformation, SingleBoneCycleConsistency) {
    const SkeletonPose rest = single_bone_rig(0.3);
    DeformationField field(rest, SkinningConfig{}, NonrigidConfig{});
    const SkeletonPose posed = pose_from_rotations(rest, {Vec3(0.3, -0.7, 1.1)}, Vec3(0.1, 0.2, -0.3));
    const PosedSkeleton ps = field.prepare(posed);
    std::mt19937_64 rng(3);
    for (int i = 0; i < 100; ++i) {
        const Vec3 x = random_point(rng);
        EXPECT_LE((field.forward_warp(ps, field.coarse_deform(ps, x)) - x).norm(), 1e-6);
    }
}

TEST(Deformation, WeightsNormalizedAndNonnegative) {
    SceneModel model(testing::tiny_config(), 4);
    const auto& def = model.deformation();
    std::vector<Vec3> rots(4, Vec3::Zero());
    rots[2] = Vec3(0, 0, -1.2);
    rots[1] = Vec3(0.4, 0, 0);
    const PosedSkeleton ps = def.prepare(pose_from_rotations(model.config().rest, rots));
    std::mt19937_64 rng(5);
    for (int i = 0; i < 1000; ++i) {
        const Eigen::VectorXd w = def.posed_weights(ps, random_point(rng, 2.0));
        EXPECT_NEAR(w.sum(), 1.0, 1e-6);
        EXPECT_GE(w.minCoeff(), 0.0);
    }
}

TEST(Deformation, WeightsContinuousAcrossInfluenceBoundaries) {
    SceneModel model(testing::tiny_config(), 6);
    const auto& def = model.deformation();
    const PosedSkeleton ps = def.prepare(model.config().rest);
    // Segments sweeping from the torso across each shoulder and the neck.
    const std::vector<std::pair<Vec3, Vec3>> paths = {
        {Vec3(-0.4, 0.28, 0.0), Vec3(0.4, 0.28, 0.0)},
        {Vec3(0.0, -0.2, 0.02), Vec3(0.0, 0.5, 0.02)},
        {Vec3(-0.3, 0.0, 0.1), Vec3(0.3, 0.45, -0.1)},
    };
    const double step = 1e-4;
    for (const auto& [a, b] : paths) {
        const int n = static_cast<int>((b - a).norm() / step);
        Eigen::VectorXd prev = def.posed_weights(ps, a);
        for (int k = 1; k <= n; ++k) {
            const Eigen::VectorXd cur = def.posed_weights(ps, a + (b - a) * (static_cast<double>(k) / n));
            ASSERT_LT((cur - prev).cwiseAbs().maxCoeff(), 1e-2);
            prev = cur;
        }
    }
}

TEST(Deformation, FineResidualZeroAtInitAndBounded) {
    SceneModel model(testing::tiny_config(), 7);
    const SkeletonPose rest = model.config().rest;
    std::vector<Vec3> rots(4, Vec3(0.2, -0.1, 0.3));
    const SkeletonPose posed = pose_from_rotations(rest, rots);
    EXPECT_EQ(model.deformation().fine_deform(model.params(), Vec3(0.1, 0.1, 0.1), posed), Vec3::Zero());
    testing::randomize(model.params(), 8, 3.0);
    std::mt19937_64 rng(9);
    for (int i = 0; i < 300; ++i) {
        EXPECT_LE(model.deformation().fine_deform(model.params(), random_point(rng), posed).norm(), 0.1 + 1e-12);
    }
}

TEST(Deformation, DeformIsCoarsePlusFine) {
    SceneModel model(testing::tiny_config(), 10);
    testing::randomize(model.params(), 11);
    std::vector<Vec3> rots(4, Vec3(0.1, 0.2, -0.3));
    const SkeletonPose posed = pose_from_rotations(model.config().rest, rots, Vec3(0.05, 0, 0));
    const Vec3 x(0.1, 0.2, 0.05);
    const auto& def = model.deformation();
    const Vec3 coarse = def.coarse_deform(x, posed);
    EXPECT_LE((def.deform(model.params(), x, posed) - (coarse + def.fine_deform(model.params(), coarse, posed))).norm(), 1e-15);
}

TEST(Deformation, FineGradientMatchesFiniteDifferences) {
    SceneModel model(testing::tiny_config(), 12);
    testing::randomize(model.params(), 13);
    std::vector<Vec3> rots(4, Vec3(0.1, 0.2, -0.3));
    const PosedSkeleton ps = model.deformation().prepare(pose_from_rotations(model.config().rest, rots));
    ad::Tensor pts(2, 3);
    pts << 0.1, 0.2, 0.0, -0.1, 0.3, 0.05;
    auto& params = model.params();
    auto eval = [&](ad::Tape& t) {
        return ad::sum(ad::square(model.deformation().fine_deform(t, params, ps, t.constant(pts), true)));
    };
    ad::Tape tape;
    const auto g = tape.backward(eval(tape));
    const std::vector<double> x(params.values().begin(), params.values().end());
    const auto ref = ad::finite_difference_gradient(
        [&](std::span<const double> v) {
            std::copy(v.begin(), v.end(), params.values().begin());
            ad::Tape t(ad::GradMode::kNoGrad);
            const double r = eval(t).scalar();
            std::copy(x.begin(), x.end(), params.values().begin());
            return r;
        },
        x, 1e-5);
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_LE(testing::rel_err(g[i], ref[i], 1e-3), 1e-4) << i;
}

TEST(Deformation, PoseMismatchRejected) {
    DeformationField field(toy_rig(), SkinningConfig{}, NonrigidConfig{});
    EXPECT_THROW(field.coarse_deform(Vec3::Zero(), single_bone_rig()), PoseMismatch);
}

TEST(Deformation, PosedBoundsContainFigure) {
    SceneModel model(testing::tiny_config(), 14);
    const auto& def = model.deformation();
    std::vector<Vec3> rots(4, Vec3::Zero());
    rots[2] = Vec3(0, 0, -1.4);
    rots[3] = Vec3(0, 0, 1.4);
    const PosedSkeleton ps = def.prepare(pose_from_rotations(model.config().rest, rots, Vec3(0.2, 0, 0)));
    const Aabb box = def.posed_bounds(ps, model.config().canonical_box);
    std::mt19937_64 rng(15);
    const Aabb& c = model.config().canonical_box;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 2000; ++i) {
        const Vec3 x_c = c.lo + (c.hi - c.lo).cwiseProduct(Vec3(u(rng), u(rng), u(rng)));
        EXPECT_TRUE(box.contains(def.forward_warp(ps, x_c)));
    }
}

TEST(PoseFiles, RoundTrip) {
    const SkeletonPose rest = smpl24_rig();
    std::vector<Vec3> rots(24);
    std::mt19937_64 rng(16);
    for (auto& r : rots) r = random_point(rng, 0.3);
    SkeletonPose pose = pose_from_rotations(rest, rots, Vec3(0.1, 0.2, 0.3));
    pose.frame_index = 7;
    const auto dir = std::filesystem::temp_directory_path();
    write_rest_pose_json(dir / "dvne_rest.json", rest);
    write_pose_json(dir / "dvne_pose.json", pose);
    const SkeletonPose rest2 = read_rest_pose_json(dir / "dvne_rest.json");
    const SkeletonPose pose2 = read_pose_json(dir / "dvne_pose.json", &rest2);
    EXPECT_EQ(rest2.parents, rest.parents);
    EXPECT_EQ(pose2.frame_index, 7);
    for (std::size_t i = 0; i < 24; ++i) {
        EXPECT_EQ(pose2.joints[i], pose.joints[i]);
        EXPECT_EQ(pose2.rotations[i], pose.rotations[i]);
    }
    const SkeletonPose toy = toy_rig();
    EXPECT_THROW(read_pose_json(dir / "dvne_pose.json", &toy), PoseMismatch);
}

TEST(Skeleton, TPoseDetection) {
    EXPECT_TRUE(toy_rig().is_t_pose());
    std::vector<Vec3> rots(4, Vec3::Zero());
    rots[2] = Vec3(0, 0, 0.5);
    EXPECT_FALSE(pose_from_rotations(toy_rig(), rots).is_t_pose());
}

}  // namespace
}  // namespace dvne
