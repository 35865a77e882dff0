#pragma once

#include "dvne/autodiff.hpp"
#include "dvne/geometry.hpp"
#include "dvne/image_io.hpp"

#include <atomic>
#include <memory>
#include <random>
#include <string>

namespace dvne {

// Cosine schedule over t in [t_min, t_max] with weighting w(t) = 1 - abar(t).
struct NoiseSchedule {
    double t_min = 0.02;
    double t_max = 0.98;
    double offset = 0.008;

    void validate() const;
    double alpha_bar(double t) const;
    double weight(double t) const { return 1.0 - alpha_bar(t); }
};

// z_t = sqrt(abar) latent + sqrt(1 - abar) eps. Throws for t outside the range.
ad::Tensor add_noise(const ad::Tensor& latent, double t, const ad::Tensor& eps, const NoiseSchedule& schedule);
double sample_noise_level(const NoiseSchedule& schedule, std::mt19937_64& rng);

// Maps images (H*W x 3) to latents and back.
class LatentCodec {
public:
    virtual ~LatentCodec() = default;
    virtual std::string name() const = 0;
    virtual int latent_width(int width) const = 0;
    virtual int latent_height(int height) const = 0;
    virtual ad::Tensor encode(const ad::Tensor& image, int width, int height) const = 0;
    virtual ad::Tensor decode(const ad::Tensor& latent, int width, int height) const = 0;
    // Pulls a latent-space gradient back to image space (vector-Jacobian product).
    virtual ad::Tensor encode_vjp(const ad::Tensor& latent_grad, int width, int height) const = 0;
};

class IdentityCodec final : public LatentCodec {
public:
    std::string name() const override { return "identity"; }
    int latent_width(int width) const override { return width; }
    int latent_height(int height) const override { return height; }
    ad::Tensor encode(const ad::Tensor& image, int, int) const override { return image; }
    ad::Tensor decode(const ad::Tensor& latent, int, int) const override { return latent; }
    ad::Tensor encode_vjp(const ad::Tensor& g, int, int) const override { return g; }
};

// Average pooling over factor x factor blocks; decode repeats each latent pixel.
class AvgPoolCodec final : public LatentCodec {
public:
    explicit AvgPoolCodec(int factor = 4);
    std::string name() const override { return "avgpool" + std::to_string(factor_); }
    int latent_width(int width) const override { return width / factor_; }
    int latent_height(int height) const override { return height / factor_; }
    ad::Tensor encode(const ad::Tensor& image, int width, int height) const override;
    ad::Tensor decode(const ad::Tensor& latent, int width, int height) const override;
    ad::Tensor encode_vjp(const ad::Tensor& g, int width, int height) const override;

private:
    void check(const ad::Tensor& image, int width, int height) const;
    int factor_;
};

std::unique_ptr<LatentCodec> make_codec(const std::string& name);

enum class ConditioningKind { kText, kView };

struct Conditioning {
    ConditioningKind kind = ConditioningKind::kText;
    std::string text;
    // View conditioning: reference image and the rendered camera relative to it.
    const Image* reference = nullptr;
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();
    double guidance_scale = 7.5;
};

// Yaw of a relative camera rotation in degrees, (-180, 180].
double relative_azimuth_deg(const Mat3& rotation);

enum class ViewBucket { kFront, kSide, kBack };
ViewBucket view_bucket(double azimuth_deg);
const char* view_suffix(ViewBucket bucket);

// Noise predictor. Implementations must be read-only and thread-safe.
class GuidancePrior {
public:
    virtual ~GuidancePrior() = default;
    virtual ad::Tensor predict_noise(const ad::Tensor& z_t, double t, double alpha_bar, const Conditioning& c,
                                     int latent_width, int latent_height) const = 0;
    virtual ConditioningKind kind() const = 0;
    // "personalized" or "base".
    virtual std::string label() const = 0;
};

// Closed-form score of a Gaussian centred on a mean latent: the prior that
// denoises every z_t towards `mean`. A mean equal to the current latent
// reproduces the injected noise exactly.
class GaussianPrior final : public GuidancePrior {
public:
    GaussianPrior(ad::Tensor mean, ConditioningKind kind, std::string label = "base");
    // Solid-colour mean broadcast to whatever latent size is requested.
    static GaussianPrior solid(const Vec3& color, ConditioningKind kind, std::string label = "base");

    ad::Tensor predict_noise(const ad::Tensor& z_t, double t, double alpha_bar, const Conditioning& c,
                             int latent_width, int latent_height) const override;
    ConditioningKind kind() const override { return kind_; }
    std::string label() const override { return label_; }

private:
    ad::Tensor mean_;
    bool solid_ = false;
    Vec3 color_ = Vec3::Zero();
    ConditioningKind kind_;
    std::string label_;
};

// View-conditioned solid-colour targets chosen by the azimuth bucket of the
// relative camera.
class ViewColorPrior final : public GuidancePrior {
public:
    ViewColorPrior(Vec3 front, Vec3 side, Vec3 back, std::string label = "base");

    ad::Tensor predict_noise(const ad::Tensor& z_t, double t, double alpha_bar, const Conditioning& c,
                             int latent_width, int latent_height) const override;
    ConditioningKind kind() const override { return ConditioningKind::kView; }
    std::string label() const override { return label_; }
    Vec3 target(ViewBucket bucket) const;

private:
    Vec3 front_;
    Vec3 side_;
    Vec3 back_;
    std::string label_;
};

// Counts calls on an inner prior; used to check which branches reach which prior.
class RecordingPrior final : public GuidancePrior {
public:
    explicit RecordingPrior(const GuidancePrior& inner) : inner_(inner) {}

    ad::Tensor predict_noise(const ad::Tensor& z_t, double t, double alpha_bar, const Conditioning& c,
                             int latent_width, int latent_height) const override;
    ConditioningKind kind() const override { return inner_.kind(); }
    std::string label() const override { return inner_.label(); }
    long calls() const { return calls_.load(); }
    void reset() { calls_ = 0; }

private:
    const GuidancePrior& inner_;
    mutable std::atomic<long> calls_{0};
};

// Everything one SDS evaluation needs; `image` is a taped H*W x 3 render.
struct SdsContext {
    ad::Var image;
    int width = 0;
    int height = 0;
    const GuidancePrior* prior = nullptr;
    const LatentCodec* codec = nullptr;
    NoiseSchedule schedule;
    double lambda = 1.0;
    std::uint64_t seed = 0;
    // Map latent gradients back by decoding instead of the codec's true Jacobian.
    bool skip_codec_jacobian = false;
};

struct SdsSeed {
    ad::Tensor image_grad;  // H*W x 3
    double t = 0.0;
    double weight = 0.0;
    // 0.5 |eps_phi - eps|^2 averaged over latent entries, for logging.
    double residual = 0.0;
};

// Image-space gradient lambda w(t) (eps_phi - eps) pulled back through the codec.
SdsSeed sds_seed(const SdsContext& ctx, const Conditioning& c);

// Back-propagate one SDS term through the context's tape. Each consumes the tape.
std::vector<double> sds_step_2d(SdsContext& ctx, const std::string& text);
std::vector<double> sds_step_3d(SdsContext& ctx, const Image& reference, const Mat3& rotation, const Vec3& translation);

}  // namespace dvne
