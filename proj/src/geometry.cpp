#include "dvne/geometry.hpp"

#include "dvne/errors.hpp"

#include <cmath>

namespace dvne {

Ray Ray::make(const Vec3& origin, const Vec3& direction, double radius_scale) {
    const double n = direction.norm();
    if (!(n > 0.0) || !std::isfinite(n)) {
        throw InvalidArgument("ray direction must be finite and non-zero");
    }
    if (!(radius_scale > 0.0)) {
        throw InvalidArgument("ray radius_scale must be positive");
    }
    return Ray{origin, direction / n, radius_scale};
}

FrustumGaussian frustum_gaussian(const Ray& ray, double t0, double t1) {
    if (!(t0 > 0.0) || !(t1 > t0)) {
        throw InvalidInterval("frustum interval must satisfy 0 < t0 < t1, got [" + std::to_string(t0) +
                              ", " + std::to_string(t1) + ")");
    }
    if (t1 - t0 < kMinIntervalWidth) t1 = t0 + kMinIntervalWidth;

    // Moments of a cone segment with density proportional to t^2, written in
    // terms of the interval midpoint and half-width for numerical stability.
    const double t_mid = 0.5 * (t0 + t1);
    const double t_half = 0.5 * (t1 - t0);
    const double mid2 = t_mid * t_mid;
    const double half2 = t_half * t_half;
    const double denom = 3.0 * mid2 + half2;

    const double t_mean = t_mid + 2.0 * t_mid * half2 / denom;
    const double t_var = half2 / 3.0 - (4.0 / 15.0) * (half2 * half2 * (12.0 * mid2 - half2)) / (denom * denom);
    const double r2 = ray.radius_scale * ray.radius_scale;
    const double r_var = r2 * (mid2 / 4.0 + (5.0 / 12.0) * half2 - (4.0 / 15.0) * half2 * half2 / denom);

    const Vec3& d = ray.direction;
    const Mat3 ddT = d * d.transpose();
    FrustumGaussian g;
    g.mu = ray.origin + t_mean * d;
    g.sigma = t_var * ddT + r_var * (Mat3::Identity() - ddT);
    g.sigma = 0.5 * (g.sigma + g.sigma.transpose()).eval();
    return g;
}

Vec3 contract(const Vec3& x) {
    const double n = x.norm();
    if (n <= 1.0) return x;
    return (2.0 - 1.0 / n) * (x / n);
}

Mat3 contract_jacobian(const Vec3& x) {
    const double n = x.norm();
    if (n <= 1.0) return Mat3::Identity();
    // f(x) = (2/n - 1/n^2) x
    // df/dx = (2/n - 1/n^2) I + x d(2/n - 1/n^2)/dx^T, d(1/n)/dx = -x/n^3
    const double s = 2.0 / n - 1.0 / (n * n);
    const double ds_dn = -2.0 / (n * n) + 2.0 / (n * n * n);
    return s * Mat3::Identity() + (ds_dn / n) * (x * x.transpose());
}

FrustumGaussian contract_gaussian(const FrustumGaussian& g) {
    const Mat3 j = contract_jacobian(g.mu);
    FrustumGaussian out;
    out.mu = contract(g.mu);
    out.sigma = j * g.sigma * j.transpose();
    out.sigma = 0.5 * (out.sigma + out.sigma.transpose()).eval();
    return out;
}

void positional_encoding(const Vec3& x, int num_levels, std::span<double> out) {
    if (num_levels < 1) throw InvalidArgument("encoding needs at least one level");
    if (out.size() != static_cast<std::size_t>(6 * num_levels)) {
        throw ShapeMismatch("positional encoding output has wrong length");
    }
    double scale = 1.0;
    for (int l = 0; l < num_levels; ++l, scale *= 2.0) {
        for (int k = 0; k < 3; ++k) {
            out[6 * l + k] = std::sin(scale * x[k]);
            out[6 * l + 3 + k] = std::cos(scale * x[k]);
        }
    }
}

Eigen::VectorXd positional_encoding(const Vec3& x, const EncodingConfig& cfg) {
    if (cfg.kind != EncodingKind::kPlain) {
        throw InvalidArgument("positional_encoding expects a plain encoding config");
    }
    Eigen::VectorXd out(cfg.output_size());
    positional_encoding(x, cfg.num_levels, {out.data(), static_cast<std::size_t>(out.size())});
    return out;
}

void integrated_positional_encoding(const FrustumGaussian& g, int num_levels, std::span<double> out) {
    if (num_levels < 1) throw InvalidArgument("encoding needs at least one level");
    if (out.size() != static_cast<std::size_t>(6 * num_levels)) {
        throw ShapeMismatch("integrated positional encoding output has wrong length");
    }
    const Vec3 var = g.sigma.diagonal();
    double scale = 1.0;
    for (int l = 0; l < num_levels; ++l, scale *= 2.0) {
        // 2^(2l-1) = scale^2 / 2
        const double attenuation_scale = 0.5 * scale * scale;
        for (int k = 0; k < 3; ++k) {
            const double damp = std::exp(-attenuation_scale * var[k]);
            out[6 * l + k] = std::sin(scale * g.mu[k]) * damp;
            out[6 * l + 3 + k] = std::cos(scale * g.mu[k]) * damp;
        }
    }
}

Eigen::VectorXd integrated_positional_encoding(const FrustumGaussian& g, const EncodingConfig& cfg) {
    if (cfg.kind != EncodingKind::kIntegrated) {
        throw InvalidArgument("integrated_positional_encoding expects an integrated encoding config");
    }
    Eigen::VectorXd out(cfg.output_size());
    integrated_positional_encoding(g, cfg.num_levels, {out.data(), static_cast<std::size_t>(out.size())});
    return out;
}

}  // namespace dvne
