#include "dvne/fields.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dvne {

bool Aabb::intersect(const Ray& ray, double& t_enter, double& t_exit) const {
    double t0 = -std::numeric_limits<double>::infinity();
    double t1 = std::numeric_limits<double>::infinity();
    for (int k = 0; k < 3; ++k) {
        const double d = ray.direction[k];
        const double o = ray.origin[k];
        if (std::abs(d) < 1e-15) {
            if (o < lo[k] || o > hi[k]) return false;
            continue;
        }
        double a = (lo[k] - o) / d;
        double b = (hi[k] - o) / d;
        if (a > b) std::swap(a, b);
        t0 = std::max(t0, a);
        t1 = std::min(t1, b);
    }
    if (t1 < t0) return false;
    t_enter = t0;
    t_exit = t1;
    return true;
}

FieldBatch split_field_output(ad::Var raw) {
    FieldBatch out;
    out.density = ad::softplus(ad::slice_cols(raw, 0, 1));
    out.color = ad::sigmoid(ad::slice_cols(raw, 1, 3));
    return out;
}

CanonicalHumanField::CanonicalHumanField(FieldShape shape, EncodingConfig encoding, Aabb bbox)
    : encoding_(encoding), bbox_(bbox) {
    if (encoding.kind != EncodingKind::kPlain) throw InvalidArgument("canonical field uses the plain encoding");
    MlpShape m;
    m.input_dim = encoding.output_size();
    m.hidden_width = shape.hidden_width;
    m.num_hidden_layers = shape.num_hidden_layers;
    m.output_dim = kFieldOutputs;
    m.skip_layers = shape.skip_layers;
    m.activation = shape.activation;
    mlp_ = Mlp("human", m);
}

FieldBatch CanonicalHumanField::query(ad::Tape& tape, const ad::ParameterSet& params, ad::Var points,
                                      bool trainable) const {
    const ad::Var enc = ad::positional_encoding(points, encoding_.num_levels);
    FieldBatch out = split_field_output(mlp_.forward(tape, params, enc, trainable));
    const ad::Tensor& p = points.value();
    ad::Tensor inside(p.rows(), 1);
    bool all_inside = true;
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        const bool in = bbox_.contains(Vec3(p(i, 0), p(i, 1), p(i, 2)));
        inside(i, 0) = in ? 1.0 : 0.0;
        all_inside = all_inside && in;
    }
    if (!all_inside) out.density = out.density * tape.constant(std::move(inside));
    return out;
}

FieldSample CanonicalHumanField::query(const ad::ParameterSet& params, const Vec3& x_c) const {
    ad::Tape tape(ad::GradMode::kNoGrad);
    ad::Tensor p(1, 3);
    p.row(0) = x_c.transpose();
    const FieldBatch b = query(tape, params, tape.constant(std::move(p)), false);
    FieldSample s;
    s.density = b.density.value()(0, 0);
    s.color = b.color.value().row(0).transpose();
    return s;
}

BackgroundField::BackgroundField(FieldShape shape, EncodingConfig encoding) : encoding_(encoding) {
    if (encoding.kind != EncodingKind::kIntegrated) throw InvalidArgument("background field uses the integrated encoding");
    MlpShape m;
    m.input_dim = encoding.output_size();
    m.hidden_width = shape.hidden_width;
    m.num_hidden_layers = shape.num_hidden_layers;
    m.output_dim = kFieldOutputs;
    m.skip_layers = shape.skip_layers;
    m.activation = shape.activation;
    mlp_ = Mlp("background", m);
}

FieldBatch BackgroundField::query_encoded(ad::Tape& tape, const ad::ParameterSet& params, ad::Var encoded,
                                          bool trainable) const {
    return split_field_output(mlp_.forward(tape, params, encoded, trainable));
}

FieldSample BackgroundField::query(const ad::ParameterSet& params, const FrustumGaussian& g) const {
    ad::Tape tape(ad::GradMode::kNoGrad);
    ad::Tensor enc(1, encoding_.output_size());
    integrated_positional_encoding(g, encoding_.num_levels, {enc.data(), static_cast<std::size_t>(enc.size())});
    const FieldBatch b = query_encoded(tape, params, tape.constant(std::move(enc)), false);
    FieldSample s;
    s.density = b.density.value()(0, 0);
    s.color = b.color.value().row(0).transpose();
    return s;
}

FieldSample BackgroundField::query_point(const ad::ParameterSet& params, const Vec3& x) const {
    ad::Tape tape(ad::GradMode::kNoGrad);
    ad::Tensor enc(1, encoding_.output_size());
    positional_encoding(x, encoding_.num_levels, {enc.data(), static_cast<std::size_t>(enc.size())});
    const FieldBatch b = query_encoded(tape, params, tape.constant(std::move(enc)), false);
    FieldSample s;
    s.density = b.density.value()(0, 0);
    s.color = b.color.value().row(0).transpose();
    return s;
}

}  // namespace dvne
