#include "dvne/guidance.hpp"

#include <cmath>
#include <numbers>

namespace dvne {

void NoiseSchedule::validate() const {
    if (!(t_min > 0.0) || !(t_max < 1.0) || t_min > t_max) {
        throw InvalidArgument("noise schedule needs 0 < t_min <= t_max < 1");
    }
    if (!(offset > 0.0)) throw InvalidArgument("noise schedule offset must be positive");
}

double NoiseSchedule::alpha_bar(double t) const {
    const auto f = [this](double x) {
        const double c = std::cos((x + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
        return c * c;
    };
    return f(t) / f(0.0);
}

ad::Tensor add_noise(const ad::Tensor& latent, double t, const ad::Tensor& eps, const NoiseSchedule& schedule) {
    if (t < schedule.t_min || t > schedule.t_max) {
        throw InvalidArgument("noise level " + std::to_string(t) + " outside [" + std::to_string(schedule.t_min) +
                              ", " + std::to_string(schedule.t_max) + "]");
    }
    if (latent.rows() != eps.rows() || latent.cols() != eps.cols()) throw ShapeMismatch("noise shape differs from latent");
    const double a = schedule.alpha_bar(t);
    return std::sqrt(a) * latent + std::sqrt(1.0 - a) * eps;
}

double sample_noise_level(const NoiseSchedule& schedule, std::mt19937_64& rng) {
    if (schedule.t_min == schedule.t_max) return schedule.t_min;
    return std::uniform_real_distribution<double>(schedule.t_min, schedule.t_max)(rng);
}

// ---- codecs ----------------------------------------------------------------------------

AvgPoolCodec::AvgPoolCodec(int factor) : factor_(factor) {
    if (factor < 1) throw InvalidArgument("pooling factor must be positive");
}

void AvgPoolCodec::check(const ad::Tensor& image, int width, int height) const {
    if (width % factor_ != 0 || height % factor_ != 0) {
        throw ShapeMismatch("image size must be divisible by the pooling factor " + std::to_string(factor_));
    }
    if (image.rows() != static_cast<Eigen::Index>(width) * height) throw ShapeMismatch("image rows differ from W*H");
}

ad::Tensor AvgPoolCodec::encode(const ad::Tensor& image, int width, int height) const {
    check(image, width, height);
    const int lw = width / factor_;
    const int lh = height / factor_;
    ad::Tensor out = ad::Tensor::Zero(static_cast<Eigen::Index>(lw) * lh, image.cols());
    const double inv = 1.0 / (factor_ * factor_);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            out.row(static_cast<Eigen::Index>(y / factor_) * lw + x / factor_) +=
                inv * image.row(static_cast<Eigen::Index>(y) * width + x);
        }
    }
    return out;
}

ad::Tensor AvgPoolCodec::decode(const ad::Tensor& latent, int width, int height) const {
    const int lw = width / factor_;
    ad::Tensor out(static_cast<Eigen::Index>(width) * height, latent.cols());
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            out.row(static_cast<Eigen::Index>(y) * width + x) = latent.row(static_cast<Eigen::Index>(y / factor_) * lw + x / factor_);
        }
    }
    return out;
}

ad::Tensor AvgPoolCodec::encode_vjp(const ad::Tensor& g, int width, int height) const {
    return decode(g, width, height) / static_cast<double>(factor_ * factor_);
}

std::unique_ptr<LatentCodec> make_codec(const std::string& name) {
    if (name == "identity") return std::make_unique<IdentityCodec>();
    if (name == "avgpool4") return std::make_unique<AvgPoolCodec>(4);
    throw InvalidArgument("unknown codec '" + name + "' (expected identity or avgpool4)");
}

// ---- conditioning ----------------------------------------------------------------------

double relative_azimuth_deg(const Mat3& rotation) {
    return std::atan2(rotation(0, 2), rotation(2, 2)) * 180.0 / std::numbers::pi;
}

ViewBucket view_bucket(double azimuth_deg) {
    double a = std::fmod(azimuth_deg, 360.0);
    if (a > 180.0) a -= 360.0;
    if (a <= -180.0) a += 360.0;
    a = std::abs(a);
    if (a < 60.0) return ViewBucket::kFront;
    if (a <= 120.0) return ViewBucket::kSide;
    return ViewBucket::kBack;
}

const char* view_suffix(ViewBucket bucket) {
    switch (bucket) {
        case ViewBucket::kFront: return "front view";
        case ViewBucket::kSide: return "side view";
        case ViewBucket::kBack: return "back view";
    }
    return "front view";
}

// ---- priors ------------------------------------------------------------------------------

namespace {

ad::Tensor gaussian_score(const ad::Tensor& z_t, const ad::Tensor& mean, double alpha_bar) {
    return (z_t - std::sqrt(alpha_bar) * mean) / std::sqrt(1.0 - alpha_bar);
}

ad::Tensor solid_latent(const Vec3& color, Eigen::Index rows) {
    ad::Tensor m(rows, 3);
    m.rowwise() = color.transpose();
    return m;
}

}  // namespace

GaussianPrior::GaussianPrior(ad::Tensor mean, ConditioningKind kind, std::string label)
    : mean_(std::move(mean)), kind_(kind), label_(std::move(label)) {}

GaussianPrior GaussianPrior::solid(const Vec3& color, ConditioningKind kind, std::string label) {
    GaussianPrior p(ad::Tensor(), kind, std::move(label));
    p.solid_ = true;
    p.color_ = color;
    return p;
}

ad::Tensor GaussianPrior::predict_noise(const ad::Tensor& z_t, double, double alpha_bar, const Conditioning&, int,
                                        int) const {
    if (solid_) return gaussian_score(z_t, solid_latent(color_, z_t.rows()), alpha_bar);
    if (mean_.rows() != z_t.rows() || mean_.cols() != z_t.cols()) {
        throw ShapeMismatch("prior mean is " + std::to_string(mean_.rows()) + "x" + std::to_string(mean_.cols()) +
                            " but the latent is " + std::to_string(z_t.rows()) + "x" + std::to_string(z_t.cols()));
    }
    return gaussian_score(z_t, mean_, alpha_bar);
}

ViewColorPrior::ViewColorPrior(Vec3 front, Vec3 side, Vec3 back, std::string label)
    : front_(std::move(front)), side_(std::move(side)), back_(std::move(back)), label_(std::move(label)) {}

Vec3 ViewColorPrior::target(ViewBucket bucket) const {
    switch (bucket) {
        case ViewBucket::kFront: return front_;
        case ViewBucket::kSide: return side_;
        case ViewBucket::kBack: return back_;
    }
    return front_;
}

ad::Tensor ViewColorPrior::predict_noise(const ad::Tensor& z_t, double, double alpha_bar, const Conditioning& c, int,
                                         int) const {
    const Vec3 color = target(view_bucket(relative_azimuth_deg(c.rotation)));
    return gaussian_score(z_t, solid_latent(color, z_t.rows()), alpha_bar);
}

ad::Tensor RecordingPrior::predict_noise(const ad::Tensor& z_t, double t, double alpha_bar, const Conditioning& c,
                                         int latent_width, int latent_height) const {
    ++calls_;
    return inner_.predict_noise(z_t, t, alpha_bar, c, latent_width, latent_height);
}

// ---- SDS ---------------------------------------------------------------------------------

SdsSeed sds_seed(const SdsContext& ctx, const Conditioning& c) {
    if (ctx.prior == nullptr || ctx.codec == nullptr) throw InvalidArgument("SDS needs a prior and a codec");
    if (ctx.prior->kind() != c.kind) {
        throw PriorError("prior '" + ctx.prior->label() + "' does not accept this conditioning kind");
    }
    ctx.schedule.validate();
    const ad::Tensor& img = ctx.image.value();
    if (img.rows() != static_cast<Eigen::Index>(ctx.width) * ctx.height || img.cols() != 3) {
        throw ShapeMismatch("SDS image must be H*W x 3");
    }
    if (img.minCoeff() < -1e-9 || img.maxCoeff() > 1.0 + 1e-9) throw InvalidArgument("SDS image must lie in [0, 1]");

    std::mt19937_64 rng(ctx.seed);
    SdsSeed out;
    out.t = sample_noise_level(ctx.schedule, rng);
    out.weight = ctx.schedule.weight(out.t);
    const ad::Tensor latent = ctx.codec->encode(img, ctx.width, ctx.height);
    ad::Tensor eps(latent.rows(), latent.cols());
    std::normal_distribution<double> normal;
    for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = normal(rng);
    const ad::Tensor z_t = add_noise(latent, out.t, eps, ctx.schedule);
    ad::Tensor predicted;
    try {
        predicted = ctx.prior->predict_noise(z_t, out.t, ctx.schedule.alpha_bar(out.t), c,
                                             ctx.codec->latent_width(ctx.width), ctx.codec->latent_height(ctx.height));
    } catch (const std::exception& e) {
        throw PriorError("prior '" + ctx.prior->label() + "' failed at t=" + std::to_string(out.t) + ": " + e.what());
    }
    if (predicted.rows() != latent.rows() || predicted.cols() != latent.cols()) {
        throw PriorError("prior '" + ctx.prior->label() + "' returned noise of the wrong shape");
    }
    const ad::Tensor residual = predicted - eps;
    out.residual = 0.5 * residual.squaredNorm() / static_cast<double>(residual.size());
    const ad::Tensor g_latent = (ctx.lambda * out.weight) * residual;
    out.image_grad = ctx.skip_codec_jacobian ? ctx.codec->decode(g_latent, ctx.width, ctx.height)
                                             : ctx.codec->encode_vjp(g_latent, ctx.width, ctx.height);
    return out;
}

namespace {

std::vector<double> backprop(SdsContext& ctx, const SdsSeed& seed) {
    return ctx.image.tape()->backward(ctx.image, seed.image_grad);
}

}  // namespace

std::vector<double> sds_step_2d(SdsContext& ctx, const std::string& text) {
    Conditioning c;
    c.kind = ConditioningKind::kText;
    c.text = text;
    return backprop(ctx, sds_seed(ctx, c));
}

std::vector<double> sds_step_3d(SdsContext& ctx, const Image& reference, const Mat3& rotation, const Vec3& translation) {
    Conditioning c;
    c.kind = ConditioningKind::kView;
    c.reference = &reference;
    c.rotation = rotation;
    c.translation = translation;
    return backprop(ctx, sds_seed(ctx, c));
}

}  // namespace dvne
