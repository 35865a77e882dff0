#pragma once

#include "dvne/autodiff.hpp"
#include "dvne/fields.hpp"
#include "dvne/geometry.hpp"
#include "dvne/mlp.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace dvne {

// Joint positions, local axis-angle rotations and the joint tree of one frame.
struct SkeletonPose {
    std::vector<Vec3> joints;
    std::vector<Vec3> rotations;  // radians, axis * angle
    std::vector<int> parents;     // -1 for the root; parents[i] < i
    // Optional end point offset (in rest space) for leaf joints, so a leaf
    // controls a segment rather than a single point. Empty means none.
    std::vector<Vec3> tips;
    int frame_index = 0;

    std::size_t size() const { return joints.size(); }
    // Throws PoseMismatch when sizes disagree or the parent table is not a
    // rooted tree in topological order.
    void validate() const;
    bool is_t_pose(double tol = 1e-9) const;
};

// Four joints: pelvis, neck (with a head tip) and two shoulders (with arm tips).
SkeletonPose toy_rig();
// 24-joint SMPL topology with approximate mean-body rest joint positions.
SkeletonPose smpl24_rig();
// Rest pose with a single joint at the origin and a tip of `length` along +x.
SkeletonPose single_bone_rig(double length = 0.3);

// Copy of `rest` with the given rotations and root translation applied
// through forward kinematics (joint positions are recomputed).
SkeletonPose pose_from_rotations(const SkeletonPose& rest, const std::vector<Vec3>& rotations,
                                 const Vec3& root_translation = Vec3::Zero());

Mat3 axis_angle_to_matrix(const Vec3& axis_angle);

struct RigidTransform {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
    RigidTransform inverse() const { return {rotation.transpose(), -(rotation.transpose() * translation)}; }
};

// Per-joint transforms taking rest-space points to posed space.
std::vector<RigidTransform> joint_transforms(const SkeletonPose& rest, const SkeletonPose& pose);

struct SkinningConfig {
    // Gaussian falloff width of each joint's influence, relative to the
    // length of its longest controlled segment.
    double falloff_factor = 0.25;
};

struct NonrigidConfig {
    EncodingConfig encoding{4, EncodingKind::kPlain};
    int hidden_width = 64;
    int num_hidden_layers = 3;
    double max_offset = 0.1;
};

// Pose-dependent data shared by every query of one frame.
struct PosedSkeleton {
    std::vector<RigidTransform> to_posed;      // rest -> posed per joint
    std::vector<RigidTransform> to_canonical;  // posed -> rest per joint
    std::vector<std::vector<std::pair<Vec3, Vec3>>> posed_segments;
    std::vector<std::vector<std::pair<Vec3, Vec3>>> rest_segments;
    std::vector<double> inv_two_scale_sq;  // 1 / (2 s_i^2)
    ad::Tensor rotation_features;          // 1 x 3J flattened axis-angles
    bool t_pose = false;
};

class DeformationField {
public:
    DeformationField() = default;
    DeformationField(SkeletonPose rest, SkinningConfig skinning, NonrigidConfig nonrigid);

    void register_parameters(ad::ParameterSet& params) { mlp_.register_parameters(params); }
    // The final layer starts at zero so the residual vanishes initially.
    void initialize(ad::ParameterSet& params, std::uint64_t seed) const;

    const SkeletonPose& rest() const { return rest_; }
    const Mlp& mlp() const { return mlp_; }
    const NonrigidConfig& nonrigid() const { return nonrigid_; }

    PosedSkeleton prepare(const SkeletonPose& pose) const;

    // Normalized skinning weights evaluated in posed (or rest) space.
    Eigen::VectorXd posed_weights(const PosedSkeleton& ps, const Vec3& x_d) const;
    Eigen::VectorXd rest_weights(const PosedSkeleton& ps, const Vec3& x_c) const;

    // Inverse linear blend skinning: posed -> canonical.
    Vec3 coarse_deform(const PosedSkeleton& ps, const Vec3& x_d) const;
    Vec3 coarse_deform(const Vec3& x_d, const SkeletonPose& pose) const;
    // Forward linear blend skinning with rest-space weights: canonical -> posed.
    Vec3 forward_warp(const PosedSkeleton& ps, const Vec3& x_c) const;

    // Bounded non-rigid residual for a batch of coarse canonical points.
    ad::Var fine_deform(ad::Tape& tape, const ad::ParameterSet& params, const PosedSkeleton& ps, ad::Var x_coarse,
                        bool trainable) const;
    Vec3 fine_deform(const ad::ParameterSet& params, const Vec3& x_coarse, const SkeletonPose& pose) const;

    Vec3 deform(const ad::ParameterSet& params, const Vec3& x_d, const SkeletonPose& pose) const;

    // Box around the posed figure: posed joints and segment ends expanded by
    // the largest distance from a rest bounding-box corner to the skeleton.
    Aabb posed_bounds(const PosedSkeleton& ps, const Aabb& canonical_box) const;

private:
    Eigen::VectorXd weights(const std::vector<std::vector<std::pair<Vec3, Vec3>>>& segments, const Vec3& x) const;

    SkeletonPose rest_;
    SkinningConfig skinning_;
    NonrigidConfig nonrigid_;
    std::vector<double> scales_;
    Mlp mlp_;
};

// ---- pose files --------------------------------------------------------------

// JSON record with "joints" (N x 3), "rotations" (N x 3), "frame_index".
// The parent table and tips come from the rest pose when reading.
void write_pose_json(const std::filesystem::path& path, const SkeletonPose& pose);
SkeletonPose read_pose_json(const std::filesystem::path& path, const SkeletonPose* rest);
// Rest-pose files additionally carry "parents" and optionally "tips".
void write_rest_pose_json(const std::filesystem::path& path, const SkeletonPose& rest);
SkeletonPose read_rest_pose_json(const std::filesystem::path& path);

}  // namespace dvne
