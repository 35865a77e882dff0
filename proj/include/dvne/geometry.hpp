#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/LU>

#include <span>

namespace dvne {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

struct Ray {
    Vec3 origin = Vec3::Zero();
    Vec3 direction = Vec3::UnitZ();  // unit norm
    double radius_scale = 1e-3;      // cone radius per unit distance along the ray

    // Builds a ray, normalizing the direction. Throws InvalidArgument on a
    // zero direction or non-positive radius scale.
    static Ray make(const Vec3& origin, const Vec3& direction, double radius_scale);

    Vec3 at(double t) const { return origin + t * direction; }
};

// Mean and covariance of a conical frustum segment.
struct FrustumGaussian {
    Vec3 mu = Vec3::Zero();
    Mat3 sigma = Mat3::Zero();
};

enum class EncodingKind { kPlain, kIntegrated };

struct EncodingConfig {
    int num_levels = 8;
    EncodingKind kind = EncodingKind::kPlain;

    int output_size() const { return 6 * num_levels; }
};

// Intervals shorter than this are widened to it before computing moments.
inline constexpr double kMinIntervalWidth = 1e-8;

FrustumGaussian frustum_gaussian(const Ray& ray, double t0, double t1);

// Scene contraction: identity on the unit ball, (2 - 1/|x|) x/|x| outside.
Vec3 contract(const Vec3& x);
Mat3 contract_jacobian(const Vec3& x);
FrustumGaussian contract_gaussian(const FrustumGaussian& g);

// Per level l: [sin(2^l x), cos(2^l x)] (three components each). Output has
// 6 * num_levels entries and is written into `out`.
void positional_encoding(const Vec3& x, int num_levels, std::span<double> out);
Eigen::VectorXd positional_encoding(const Vec3& x, const EncodingConfig& cfg);

// Same layout as positional_encoding, with each entry attenuated by
// exp(-2^(2l-1) diag(sigma)).
void integrated_positional_encoding(const FrustumGaussian& g, int num_levels, std::span<double> out);
Eigen::VectorXd integrated_positional_encoding(const FrustumGaussian& g, const EncodingConfig& cfg);

}  // namespace dvne
