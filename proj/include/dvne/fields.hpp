#pragma once

#include "dvne/autodiff.hpp"
#include "dvne/geometry.hpp"
#include "dvne/mlp.hpp"

#include <cstdint>

namespace dvne {

struct Aabb {
    Vec3 lo = Vec3::Constant(-1.0);
    Vec3 hi = Vec3::Constant(1.0);

    bool contains(const Vec3& p) const {
        return (p.array() >= lo.array()).all() && (p.array() <= hi.array()).all();
    }
    Vec3 center() const { return 0.5 * (lo + hi); }
    Vec3 extent() const { return hi - lo; }
    // Slab test; returns false when the ray misses. On hit, [t_enter, t_exit].
    bool intersect(const Ray& ray, double& t_enter, double& t_exit) const;
};

struct FieldShape {
    int hidden_width = 256;
    int num_hidden_layers = 8;
    std::vector<int> skip_layers;
    Activation activation = Activation::kSoftplus;
};

struct FieldSample {
    Vec3 color = Vec3::Zero();
    double density = 0.0;
};

// Taped field outputs for a batch of N queries.
struct FieldBatch {
    ad::Var color;    // N x 3, sigmoid
    ad::Var density;  // N x 1, softplus
};

// Output layout of both field networks: column 0 is raw density, 1..3 raw color.
inline constexpr int kFieldOutputs = 4;

// Canonical-space human radiance field queried with the plain encoding.
class CanonicalHumanField {
public:
    CanonicalHumanField() = default;
    CanonicalHumanField(FieldShape shape, EncodingConfig encoding, Aabb bbox);

    void register_parameters(ad::ParameterSet& params) { mlp_.register_parameters(params); }
    void initialize(ad::ParameterSet& params, std::uint64_t seed) const { mlp_.initialize(params, seed, {0}); }

    // Points outside the bounding box get density exactly 0.
    FieldBatch query(ad::Tape& tape, const ad::ParameterSet& params, ad::Var points, bool trainable) const;
    FieldSample query(const ad::ParameterSet& params, const Vec3& x_c) const;

    const Aabb& bbox() const { return bbox_; }
    const EncodingConfig& encoding() const { return encoding_; }
    const Mlp& mlp() const { return mlp_; }

private:
    EncodingConfig encoding_;
    Aabb bbox_;
    Mlp mlp_;
};

// Unbounded background field queried with contracted frustum Gaussians.
class BackgroundField {
public:
    BackgroundField() = default;
    BackgroundField(FieldShape shape, EncodingConfig encoding);

    void register_parameters(ad::ParameterSet& params) { mlp_.register_parameters(params); }
    void initialize(ad::ParameterSet& params, std::uint64_t seed) const { mlp_.initialize(params, seed, {0}); }

    // `encoded` holds one integrated encoding per row (N x 6L).
    FieldBatch query_encoded(ad::Tape& tape, const ad::ParameterSet& params, ad::Var encoded, bool trainable) const;
    // `g` must already be contracted.
    FieldSample query(const ad::ParameterSet& params, const FrustumGaussian& g) const;
    // Point query through the same weights with the plain encoding of `x`.
    FieldSample query_point(const ad::ParameterSet& params, const Vec3& x) const;

    const EncodingConfig& encoding() const { return encoding_; }
    const Mlp& mlp() const { return mlp_; }

private:
    EncodingConfig encoding_;
    Mlp mlp_;
};

FieldBatch split_field_output(ad::Var raw);

}  // namespace dvne
