#include "dvne/deformation.hpp"

#include <nlohmann/json.hpp>

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace dvne {

using nlohmann::json;

void SkeletonPose::validate() const {
    if (joints.size() != rotations.size()) {
        throw PoseMismatch("pose has " + std::to_string(joints.size()) + " joints but " +
                           std::to_string(rotations.size()) + " rotations");
    }
    if (parents.size() != joints.size()) throw PoseMismatch("parent table size differs from joint count");
    if (!tips.empty() && tips.size() != joints.size()) throw PoseMismatch("tip table size differs from joint count");
    if (joints.empty()) throw PoseMismatch("pose has no joints");
    if (parents[0] != -1) throw PoseMismatch("joint 0 must be the root");
    for (std::size_t i = 1; i < parents.size(); ++i) {
        if (parents[i] < 0 || parents[i] >= static_cast<int>(i)) {
            throw PoseMismatch("parent table is not a rooted tree in topological order at joint " + std::to_string(i));
        }
    }
}

bool SkeletonPose::is_t_pose(double tol) const {
    return std::all_of(rotations.begin(), rotations.end(), [tol](const Vec3& r) { return r.norm() <= tol; });
}

namespace {

SkeletonPose make_rest(std::vector<Vec3> joints, std::vector<int> parents, std::vector<Vec3> tips = {}) {
    SkeletonPose p;
    p.rotations.assign(joints.size(), Vec3::Zero());
    p.joints = std::move(joints);
    p.parents = std::move(parents);
    p.tips = std::move(tips);
    p.validate();
    return p;
}

}  // namespace

SkeletonPose toy_rig() {
    return make_rest({Vec3(0, 0, 0), Vec3(0, 0.3, 0), Vec3(0.06, 0.28, 0), Vec3(-0.06, 0.28, 0)}, {-1, 0, 1, 1},
                     {Vec3::Zero(), Vec3(0, 0.12, 0), Vec3(0.26, 0, 0), Vec3(-0.26, 0, 0)});
}

SkeletonPose smpl24_rig() {
    std::vector<Vec3> j = {
        {0.0, 0.0, 0.0},      {0.06, -0.09, 0.0},   {-0.06, -0.09, 0.0},  {0.0, 0.11, 0.0},
        {0.10, -0.47, 0.0},   {-0.10, -0.47, 0.0},  {0.0, 0.25, 0.0},     {0.09, -0.87, -0.04},
        {-0.09, -0.87, -0.04}, {0.0, 0.30, 0.0},    {0.12, -0.93, 0.08},  {-0.12, -0.93, 0.08},
        {0.0, 0.51, 0.0},     {0.08, 0.42, 0.0},    {-0.08, 0.42, 0.0},   {0.0, 0.60, 0.05},
        {0.17, 0.45, 0.0},    {-0.17, 0.45, 0.0},   {0.43, 0.45, 0.0},    {-0.43, 0.45, 0.0},
        {0.68, 0.45, 0.0},    {-0.68, 0.45, 0.0},   {0.76, 0.45, 0.0},    {-0.76, 0.45, 0.0},
    };
    std::vector<int> parents = {-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21};
    return make_rest(std::move(j), std::move(parents));
}

SkeletonPose single_bone_rig(double length) {
    return make_rest({Vec3::Zero()}, {-1}, {Vec3(length, 0, 0)});
}

Mat3 axis_angle_to_matrix(const Vec3& axis_angle) {
    const double angle = axis_angle.norm();
    if (angle < 1e-15) return Mat3::Identity();
    return Eigen::AngleAxisd(angle, axis_angle / angle).toRotationMatrix();
}

std::vector<RigidTransform> joint_transforms(const SkeletonPose& rest, const SkeletonPose& pose) {
    rest.validate();
    pose.validate();
    if (rest.size() != pose.size()) {
        throw PoseMismatch("pose has " + std::to_string(pose.size()) + " joints, rest pose has " +
                           std::to_string(rest.size()));
    }
    const std::size_t n = rest.size();
    std::vector<RigidTransform> global(n);
    std::vector<RigidTransform> out(n);
    const Vec3 root_offset = pose.joints[0] - rest.joints[0];
    for (std::size_t i = 0; i < n; ++i) {
        const Mat3 r = axis_angle_to_matrix(pose.rotations[i]);
        const int p = rest.parents[i];
        if (p < 0) {
            global[i] = {r, rest.joints[i] + root_offset};
        } else {
            const auto& gp = global[static_cast<std::size_t>(p)];
            const Vec3 local_t = rest.joints[i] - rest.joints[static_cast<std::size_t>(p)];
            global[i] = {gp.rotation * r, gp.rotation * local_t + gp.translation};
        }
        out[i] = {global[i].rotation, global[i].translation - global[i].rotation * rest.joints[i]};
    }
    return out;
}

SkeletonPose pose_from_rotations(const SkeletonPose& rest, const std::vector<Vec3>& rotations,
                                 const Vec3& root_translation) {
    SkeletonPose pose = rest;
    pose.rotations = rotations;
    pose.joints[0] = rest.joints[0] + root_translation;
    const auto transforms = joint_transforms(rest, pose);
    for (std::size_t i = 0; i < rest.size(); ++i) pose.joints[i] = transforms[i].apply(rest.joints[i]);
    return pose;
}

namespace {

double segment_distance_sq(const Vec3& x, const Vec3& a, const Vec3& b) {
    const Vec3 ab = b - a;
    const double len2 = ab.squaredNorm();
    double t = len2 > 0.0 ? (x - a).dot(ab) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    return (x - (a + t * ab)).squaredNorm();
}

std::vector<std::vector<std::pair<Vec3, Vec3>>> rest_segments_of(const SkeletonPose& rest) {
    const std::size_t n = rest.size();
    std::vector<std::vector<std::pair<Vec3, Vec3>>> segs(n);
    for (std::size_t i = 1; i < n; ++i) {
        const auto p = static_cast<std::size_t>(rest.parents[i]);
        segs[p].emplace_back(rest.joints[p], rest.joints[i]);
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (!rest.tips.empty() && rest.tips[i].squaredNorm() > 0.0) {
            segs[i].emplace_back(rest.joints[i], rest.joints[i] + rest.tips[i]);
        }
        if (segs[i].empty()) segs[i].emplace_back(rest.joints[i], rest.joints[i]);
    }
    return segs;
}

}  // namespace

DeformationField::DeformationField(SkeletonPose rest, SkinningConfig skinning, NonrigidConfig nonrigid)
    : rest_(std::move(rest)), skinning_(skinning), nonrigid_(nonrigid) {
    rest_.validate();
    if (!(skinning_.falloff_factor > 0.0)) throw InvalidArgument("skinning falloff factor must be positive");
    if (!(nonrigid_.max_offset >= 0.0)) throw InvalidArgument("max_offset must be non-negative");
    const auto segs = rest_segments_of(rest_);
    scales_.resize(rest_.size());
    for (std::size_t i = 0; i < rest_.size(); ++i) {
        double longest = 0.0;
        for (const auto& [a, b] : segs[i]) longest = std::max(longest, (b - a).norm());
        if (longest == 0.0 && rest_.parents[i] >= 0) {
            longest = (rest_.joints[i] - rest_.joints[static_cast<std::size_t>(rest_.parents[i])]).norm();
        }
        if (longest == 0.0) longest = 1.0;
        scales_[i] = skinning_.falloff_factor * longest;
    }
    MlpShape m;
    m.input_dim = nonrigid_.encoding.output_size() + 3 * static_cast<int>(rest_.size());
    m.hidden_width = nonrigid_.hidden_width;
    m.num_hidden_layers = nonrigid_.num_hidden_layers;
    m.output_dim = 3;
    mlp_ = Mlp("nonrigid", m);
}

void DeformationField::initialize(ad::ParameterSet& params, std::uint64_t seed) const {
    mlp_.initialize(params, seed, {0, 1, 2});
}

PosedSkeleton DeformationField::prepare(const SkeletonPose& pose) const {
    PosedSkeleton ps;
    ps.to_posed = joint_transforms(rest_, pose);
    ps.to_canonical.reserve(ps.to_posed.size());
    for (const auto& t : ps.to_posed) ps.to_canonical.push_back(t.inverse());
    ps.rest_segments = rest_segments_of(rest_);
    ps.posed_segments = ps.rest_segments;
    for (std::size_t i = 0; i < ps.posed_segments.size(); ++i) {
        for (auto& [a, b] : ps.posed_segments[i]) {
            a = ps.to_posed[i].apply(a);
            b = ps.to_posed[i].apply(b);
        }
    }
    ps.inv_two_scale_sq.resize(scales_.size());
    for (std::size_t i = 0; i < scales_.size(); ++i) ps.inv_two_scale_sq[i] = 1.0 / (2.0 * scales_[i] * scales_[i]);
    ps.rotation_features.resize(1, 3 * static_cast<Eigen::Index>(pose.size()));
    for (std::size_t i = 0; i < pose.size(); ++i) {
        for (int k = 0; k < 3; ++k) ps.rotation_features(0, static_cast<Eigen::Index>(3 * i) + k) = pose.rotations[i][k];
    }
    ps.t_pose = pose.is_t_pose();
    return ps;
}

Eigen::VectorXd DeformationField::weights(const std::vector<std::vector<std::pair<Vec3, Vec3>>>& segments,
                                          const Vec3& x) const {
    const std::size_t n = segments.size();
    Eigen::VectorXd logits(static_cast<Eigen::Index>(n));
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        double d2 = std::numeric_limits<double>::infinity();
        for (const auto& [a, b] : segments[i]) d2 = std::min(d2, segment_distance_sq(x, a, b));
        logits[static_cast<Eigen::Index>(i)] = -d2 / (2.0 * scales_[i] * scales_[i]);
        best = std::max(best, logits[static_cast<Eigen::Index>(i)]);
    }
    Eigen::VectorXd w = (logits.array() - best).exp();
    return w / w.sum();
}

Eigen::VectorXd DeformationField::posed_weights(const PosedSkeleton& ps, const Vec3& x_d) const {
    return weights(ps.posed_segments, x_d);
}

Eigen::VectorXd DeformationField::rest_weights(const PosedSkeleton& ps, const Vec3& x_c) const {
    return weights(ps.rest_segments, x_c);
}

Vec3 DeformationField::coarse_deform(const PosedSkeleton& ps, const Vec3& x_d) const {
    const Eigen::VectorXd w = posed_weights(ps, x_d);
    Vec3 out = Vec3::Zero();
    for (Eigen::Index i = 0; i < w.size(); ++i) {
        if (w[i] == 0.0) continue;
        out += w[i] * ps.to_canonical[static_cast<std::size_t>(i)].apply(x_d);
    }
    return out;
}

Vec3 DeformationField::coarse_deform(const Vec3& x_d, const SkeletonPose& pose) const {
    return coarse_deform(prepare(pose), x_d);
}

Vec3 DeformationField::forward_warp(const PosedSkeleton& ps, const Vec3& x_c) const {
    const Eigen::VectorXd w = rest_weights(ps, x_c);
    Vec3 out = Vec3::Zero();
    for (Eigen::Index i = 0; i < w.size(); ++i) {
        if (w[i] == 0.0) continue;
        out += w[i] * ps.to_posed[static_cast<std::size_t>(i)].apply(x_c);
    }
    return out;
}

ad::Var DeformationField::fine_deform(ad::Tape& tape, const ad::ParameterSet& params, const PosedSkeleton& ps,
                                      ad::Var x_coarse, bool trainable) const {
    const Eigen::Index n = x_coarse.rows();
    const ad::Var enc = ad::positional_encoding(x_coarse, nonrigid_.encoding.num_levels);
    const ad::Var rot = tape.constant(ps.rotation_features.replicate(n, 1));
    const ad::Var parts[] = {enc, rot};
    const ad::Var raw = mlp_.forward(tape, params, ad::concat_cols(parts), trainable);
    // Componentwise tanh scaled so the offset norm never exceeds max_offset.
    return ad::tanh(raw) * (nonrigid_.max_offset / std::sqrt(3.0));
}

Vec3 DeformationField::fine_deform(const ad::ParameterSet& params, const Vec3& x_coarse, const SkeletonPose& pose) const {
    ad::Tape tape(ad::GradMode::kNoGrad);
    ad::Tensor p(1, 3);
    p.row(0) = x_coarse.transpose();
    const ad::Var off = fine_deform(tape, params, prepare(pose), tape.constant(std::move(p)), false);
    return off.value().row(0).transpose();
}

Vec3 DeformationField::deform(const ad::ParameterSet& params, const Vec3& x_d, const SkeletonPose& pose) const {
    const Vec3 coarse = coarse_deform(x_d, pose);
    return coarse + fine_deform(params, coarse, pose);
}

Aabb DeformationField::posed_bounds(const PosedSkeleton& ps, const Aabb& canonical_box) const {
    double margin = 0.0;
    for (int corner = 0; corner < 8; ++corner) {
        const Vec3 c((corner & 1) ? canonical_box.hi.x() : canonical_box.lo.x(),
                     (corner & 2) ? canonical_box.hi.y() : canonical_box.lo.y(),
                     (corner & 4) ? canonical_box.hi.z() : canonical_box.lo.z());
        double d2 = std::numeric_limits<double>::infinity();
        for (const auto& segs : ps.rest_segments) {
            for (const auto& [a, b] : segs) d2 = std::min(d2, segment_distance_sq(c, a, b));
        }
        margin = std::max(margin, std::sqrt(d2));
    }
    margin += nonrigid_.max_offset;
    Aabb box{Vec3::Constant(std::numeric_limits<double>::infinity()),
             Vec3::Constant(-std::numeric_limits<double>::infinity())};
    for (const auto& segs : ps.posed_segments) {
        for (const auto& [a, b] : segs) {
            box.lo = box.lo.cwiseMin(a).cwiseMin(b);
            box.hi = box.hi.cwiseMax(a).cwiseMax(b);
        }
    }
    box.lo.array() -= margin;
    box.hi.array() += margin;
    return box;
}

// ---- pose files ----------------------------------------------------------------

namespace {

json vec_list(const std::vector<Vec3>& v) {
    json arr = json::array();
    for (const auto& x : v) arr.push_back({x.x(), x.y(), x.z()});
    return arr;
}

std::vector<Vec3> parse_vec_list(const json& j, const std::string& key, const std::filesystem::path& path) {
    if (!j.contains(key) || !j[key].is_array()) {
        throw IngestionError(path.string() + ": missing array field '" + key + "'");
    }
    std::vector<Vec3> out;
    for (const auto& row : j[key]) {
        if (!row.is_array() || row.size() != 3) throw IngestionError(path.string() + ": '" + key + "' rows must have 3 entries");
        out.emplace_back(row[0].get<double>(), row[1].get<double>(), row[2].get<double>());
    }
    return out;
}

json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IngestionError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw IngestionError(path.string() + ": " + e.what());
    }
}

void write_json(const std::filesystem::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(1) << '\n';
}

}  // namespace

void write_pose_json(const std::filesystem::path& path, const SkeletonPose& pose) {
    json j;
    j["joints"] = vec_list(pose.joints);
    j["rotations"] = vec_list(pose.rotations);
    j["frame_index"] = pose.frame_index;
    write_json(path, j);
}

SkeletonPose read_pose_json(const std::filesystem::path& path, const SkeletonPose* rest) {
    const json j = read_json(path);
    SkeletonPose pose;
    pose.joints = parse_vec_list(j, "joints", path);
    pose.rotations = parse_vec_list(j, "rotations", path);
    pose.frame_index = j.value("frame_index", 0);
    if (j.contains("parents")) {
        pose.parents = j["parents"].get<std::vector<int>>();
    } else if (rest != nullptr) {
        pose.parents = rest->parents;
    }
    if (j.contains("tips")) {
        pose.tips = parse_vec_list(j, "tips", path);
    } else if (rest != nullptr) {
        pose.tips = rest->tips;
    }
    if (rest != nullptr && rest->size() != pose.joints.size()) {
        throw PoseMismatch(path.string() + ": pose has " + std::to_string(pose.joints.size()) + " joints, rest has " +
                           std::to_string(rest->size()));
    }
    pose.validate();
    return pose;
}

void write_rest_pose_json(const std::filesystem::path& path, const SkeletonPose& rest) {
    json j;
    j["joints"] = vec_list(rest.joints);
    j["rotations"] = vec_list(rest.rotations);
    j["frame_index"] = rest.frame_index;
    j["parents"] = rest.parents;
    if (!rest.tips.empty()) j["tips"] = vec_list(rest.tips);
    write_json(path, j);
}

SkeletonPose read_rest_pose_json(const std::filesystem::path& path) {
    const json j = read_json(path);
    if (!j.contains("parents")) throw IngestionError(path.string() + ": rest pose needs a 'parents' table");
    return read_pose_json(path, nullptr);
}

}  // namespace dvne
