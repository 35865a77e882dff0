#include "dvne/guidance.hpp"
#include "dvne/rendering.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numbers>
#include <random>

namespace dvne {
namespace {

ad::Tensor random_tensor(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ad::Tensor t(r, c);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng);
    return t;
}

TEST(NoiseSchedule, MonotoneAndPositiveWeights) {
    const NoiseSchedule s;
    double prev = 2.0;
    for (double t = s.t_min; t <= s.t_max; t += 0.01) {
        const double a = s.alpha_bar(t);
        EXPECT_LT(a, prev);
        EXPECT_GT(s.weight(t), 0.0);
        prev = a;
    }
}

TEST(AddNoise, Examples) {
    const NoiseSchedule s;
    std::mt19937_64 rng(1);
    const ad::Tensor x = random_tensor(8, 3, rng);
    const ad::Tensor eps = random_tensor(8, 3, rng);
    EXPECT_LT((add_noise(x, s.t_min, eps, s) - x).cwiseAbs().maxCoeff(), 0.05);
    const ad::Tensor z = add_noise(x, 0.5, ad::Tensor::Zero(8, 3), s);
    EXPECT_EQ(z, ad::Tensor(std::sqrt(s.alpha_bar(0.5)) * x));
    EXPECT_THROW(add_noise(x, 0.99, eps, s), InvalidArgument);
    EXPECT_THROW(add_noise(x, 0.01, eps, s), InvalidArgument);
}

TEST(AddNoise, MonteCarloVariance) {
    const NoiseSchedule s;
    std::mt19937_64 rng(2);
    const ad::Tensor x = random_tensor(1, 64, rng);
    const double var_x = (x.array() - x.mean()).square().mean();
    const double t = 0.4;
    const double a = s.alpha_bar(t);
    std::normal_distribution<double> n;
    double sum = 0.0;
    double sum2 = 0.0;
    long count = 0;
    for (int draw = 0; draw < 10000; ++draw) {
        ad::Tensor eps(1, 64);
        for (Eigen::Index i = 0; i < 64; ++i) eps(0, i) = n(rng);
        const ad::Tensor z = add_noise(x, t, eps, s);
        for (Eigen::Index i = 0; i < 64; ++i) {
            sum += z(0, i);
            sum2 += z(0, i) * z(0, i);
            ++count;
        }
    }
    const double mean = sum / count;
    const double var = sum2 / count - mean * mean;
    const double expect = a * var_x + (1.0 - a);
    EXPECT_LT(std::abs(var - expect) / expect, 5e-2);
}

TEST(NoiseLevel, ConstantAndInRange) {
    NoiseSchedule fixed;
    fixed.t_min = fixed.t_max = 0.3;
    std::mt19937_64 rng(3);
    EXPECT_EQ(sample_noise_level(fixed, rng), 0.3);
    const NoiseSchedule s;
    for (int i = 0; i < 1000; ++i) {
        const double t = sample_noise_level(s, rng);
        EXPECT_GE(t, s.t_min);
        EXPECT_LE(t, s.t_max);
    }
}

// Kolmogorov-Smirnov against the uniform CDF; 1.628/sqrt(n) is the
// alpha = 0.01 critical value.
TEST(NoiseLevel, UniformKolmogorovSmirnov) {
    const NoiseSchedule s;
    std::mt19937_64 rng(4);
    const int n = 10000;
    std::vector<double> draws(n);
    for (double& d : draws) d = sample_noise_level(s, rng);
    std::sort(draws.begin(), draws.end());
    double stat = 0.0;
    for (int i = 0; i < n; ++i) {
        const double cdf = (draws[static_cast<std::size_t>(i)] - s.t_min) / (s.t_max - s.t_min);
        stat = std::max({stat, std::abs(cdf - static_cast<double>(i) / n), std::abs(cdf - static_cast<double>(i + 1) / n)});
    }
    EXPECT_LT(stat, 1.628 / std::sqrt(static_cast<double>(n)));
}

TEST(Codec, AvgPoolAdjoint) {
    const AvgPoolCodec c(4);
    std::mt19937_64 rng(5);
    const ad::Tensor img = random_tensor(8 * 12, 3, rng);
    const ad::Tensor g = random_tensor(2 * 3, 3, rng);
    const ad::Tensor lat = c.encode(img, 12, 8);
    EXPECT_EQ(lat.rows(), 6);
    EXPECT_NEAR(lat.cwiseProduct(g).sum(), img.cwiseProduct(c.encode_vjp(g, 12, 8)).sum(), 1e-12);
    EXPECT_THROW(c.encode(img, 6, 16), ShapeMismatch);
    EXPECT_EQ(make_codec("identity")->name(), "identity");
    EXPECT_THROW(make_codec("vae"), InvalidArgument);
}

TEST(ViewBucket, Boundaries) {
    EXPECT_EQ(view_bucket(0.0), ViewBucket::kFront);
    EXPECT_EQ(view_bucket(-59.0), ViewBucket::kFront);
    EXPECT_EQ(view_bucket(90.0), ViewBucket::kSide);
    EXPECT_EQ(view_bucket(-100.0), ViewBucket::kSide);
    EXPECT_EQ(view_bucket(180.0), ViewBucket::kBack);
    EXPECT_EQ(view_bucket(310.0), ViewBucket::kFront);
    EXPECT_EQ(view_bucket(300.0), ViewBucket::kSide);
    const Mat3 r = Eigen::AngleAxisd(std::numbers::pi / 2, Vec3::UnitY()).toRotationMatrix();
    EXPECT_NEAR(relative_azimuth_deg(r), 90.0, 1e-12);
}

struct Rendered {
    SceneModel model;
    Camera camera;
    RenderOptions options;
    std::vector<Ray> rays;
    std::vector<std::int64_t> ids;
};

Rendered make_render(int size, std::uint64_t seed) {
    Rendered r{SceneModel(testing::tiny_config(6, 2), seed), {}, {}, {}, {}};
    testing::randomize(r.model.params(), seed + 1);
    r.camera = look_at(Vec3(0.0, 0.1, 1.0), Vec3(0, 0.1, 0), Vec3(0, 1, 0), 30.0, size, size);
    r.options.n_scene_samples = 3;
    r.options.n_human_samples = 3;
    r.options.far = 10.0;
    r.options.background = Vec3(0.5, 0.5, 0.5);
    r.options.render_scene = false;
    r.rays = camera_rays(r.camera);
    for (std::size_t i = 0; i < r.rays.size(); ++i) r.ids.push_back(static_cast<std::int64_t>(i));
    return r;
}

ad::Var render_color(ad::Tape& t, const Rendered& r) {
    return ad::slice_cols(render_rays(t, r.model, r.rays, r.ids, r.model.config().rest, r.options).out, 0, 3);
}

TEST(Sds, PerfectDenoiserGivesZeroGradient) {
    Rendered r = make_render(4, 6);
    ad::Tape probe(ad::GradMode::kNoGrad);
    const ad::Tensor current = render_color(probe, r).value();
    const IdentityCodec identity;
    const AvgPoolCodec pool(2);
    for (const LatentCodec* codec : {static_cast<const LatentCodec*>(&identity), static_cast<const LatentCodec*>(&pool)}) {
        const GaussianPrior text(codec->encode(current, 4, 4), ConditioningKind::kText, "personalized");
        const GaussianPrior view(codec->encode(current, 4, 4), ConditioningKind::kView);
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            {
                ad::Tape t;
                SdsContext ctx{render_color(t, r), 4, 4, &text, codec, {}, 100.0, seed};
                for (double g : sds_step_2d(ctx, "a person")) ASSERT_LE(std::abs(g), 1e-12);
            }
            {
                ad::Tape t;
                SdsContext ctx{render_color(t, r), 4, 4, &view, codec, {}, 100.0, seed};
                Image ref(4, 4, 3);
                for (double g : sds_step_3d(ctx, ref, Mat3::Identity(), Vec3::Zero())) ASSERT_LE(std::abs(g), 1e-12);
            }
        }
    }
}

TEST(Sds, LinearInLambdaAndWeight) {
    Rendered r = make_render(2, 7);
    const IdentityCodec codec;
    const GaussianPrior prior = GaussianPrior::solid(Vec3(1, 0, 0), ConditioningKind::kText);
    auto grad = [&](double lambda) {
        ad::Tape t;
        SdsContext ctx{render_color(t, r), 2, 2, &prior, &codec, {}, lambda, 11};
        return sds_step_2d(ctx, "x");
    };
    const auto g1 = grad(1.5);
    const auto g2 = grad(3.0);
    double norm = 0.0;
    for (std::size_t i = 0; i < g1.size(); ++i) {
        EXPECT_EQ(2.0 * g1[i], g2[i]);
        norm += std::abs(g1[i]);
    }
    EXPECT_GT(norm, 0.0);
    ad::Tape t;
    SdsContext ctx{render_color(t, r), 2, 2, &prior, &codec, {}, 1.0, 11};
    Conditioning c;
    const SdsSeed a = sds_seed(ctx, c);
    NoiseSchedule fixed;
    fixed.t_min = fixed.t_max = a.t;
    ctx.schedule = fixed;
    ctx.lambda = 2.0;
    const SdsSeed b = sds_seed(ctx, c);
    EXPECT_EQ(a.weight, b.weight);
    EXPECT_LE((b.image_grad - 2.0 * a.image_grad).cwiseAbs().maxCoeff(), 1e-15);
}

// Gradient of the taped SDS path equals the analytic image gradient pulled
// through the render Jacobian, checked by finite differences of the
// equivalent surrogate <seed, image>.
TEST(Sds, BackpropMatchesSurrogateFiniteDifferences) {
    Rendered r = make_render(2, 8);
    const AvgPoolCodec codec(2);
    const GaussianPrior prior = GaussianPrior::solid(Vec3(0.9, 0.1, 0.2), ConditioningKind::kView);
    Image ref(2, 2, 3);
    ad::Tape t;
    SdsContext ctx{render_color(t, r), 2, 2, &prior, &codec, {}, 1.0, 3};
    Conditioning c;
    c.kind = ConditioningKind::kView;
    const ad::Tensor seed = sds_seed(ctx, c).image_grad;
    const auto g = sds_step_3d(ctx, ref, Mat3::Identity(), Vec3::Zero());
    const std::vector<double> x(r.model.params().values().begin(), r.model.params().values().end());
    const auto fd = ad::finite_difference_gradient(
        [&](std::span<const double> v) {
            std::copy(v.begin(), v.end(), r.model.params().values().begin());
            ad::Tape tt(ad::GradMode::kNoGrad);
            const double s = render_color(tt, r).value().cwiseProduct(seed).sum();
            std::copy(x.begin(), x.end(), r.model.params().values().begin());
            return s;
        },
        x, 1e-5);
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_LE(testing::rel_err(g[i], fd[i], 1e-3), 1e-4) << i;
}

TEST(Sds, GaussianPriorDescendsToMean) {
    ad::ParameterSet params;
    params.add_block("img", 1, 3);
    params.block_values(0) << 0.1, 0.8, 0.5;
    const Vec3 mean(0.7, 0.2, 0.4);
    const GaussianPrior prior = GaussianPrior::solid(mean, ConditioningKind::kText);
    const IdentityCodec codec;
    // Each step scales the error by 1 - lr * sqrt(abar (1 - abar)), which stays
    // in [0.5, 1) for lr = 1; the stability bound is lr < 4.
    const double lr = 1.0;
    double prev = std::numeric_limits<double>::infinity();
    for (int step = 0; step < 100; ++step) {
        ad::Tape t;
        SdsContext ctx{t.parameter(params, 0), 1, 1, &prior, &codec, {}, 1.0, static_cast<std::uint64_t>(step)};
        const auto g = sds_step_2d(ctx, "x");
        for (std::size_t i = 0; i < 3; ++i) params.values()[i] -= lr * g[i];
        const double dist = (Vec3(params.values()[0], params.values()[1], params.values()[2]) - mean).norm();
        EXPECT_LE(dist, prev + 1e-15);
        prev = dist;
    }
    EXPECT_LT(prev, 0.05);
}

TEST(Sds, TwoViewCompromise) {
    // One colour seen from two views with different per-view targets settles
    // where the two gradients balance: their mean under a fixed noise level.
    ad::ParameterSet params;
    params.add_block("img", 1, 3);
    params.block_values(0) << 0.5, 0.5, 0.5;
    const ViewColorPrior prior(Vec3(1.0, 0.0, 0.2), Vec3(0.0, 0.0, 0.0), Vec3(0.0, 1.0, 0.6));
    const IdentityCodec codec;
    NoiseSchedule fixed;
    fixed.t_min = fixed.t_max = 0.5;
    const Mat3 back = Eigen::AngleAxisd(std::numbers::pi, Vec3::UnitY()).toRotationMatrix();
    Image ref(1, 1, 3);
    for (int step = 0; step < 400; ++step) {
        for (const Mat3& rot : {Mat3(Mat3::Identity()), back}) {
            ad::Tape t;
            SdsContext ctx{t.parameter(params, 0), 1, 1, &prior, &codec, fixed, 1.0, static_cast<std::uint64_t>(step)};
            const auto g = sds_step_3d(ctx, ref, rot, Vec3::Zero());
            for (std::size_t i = 0; i < 3; ++i) params.values()[i] -= 0.5 * g[i];
        }
    }
    // Alternating updates with step h converge to a point biased towards the
    // view applied last; with contraction k the fixed point is
    // (a (1 - k) k + b (1 - k)) / (1 - k^2) per channel.
    const double a_bar = fixed.alpha_bar(0.5);
    const double k = 1.0 - 0.5 * fixed.weight(0.5) * std::sqrt(a_bar) / std::sqrt(1.0 - a_bar);
    for (int c = 0; c < 3; ++c) {
        const double a = prior.target(ViewBucket::kFront)[c];
        const double b = prior.target(ViewBucket::kBack)[c];
        const double expect = (a * (1.0 - k) * k + b * (1.0 - k)) / (1.0 - k * k);
        EXPECT_NEAR(params.values()[static_cast<std::size_t>(c)], expect, 1e-9);
    }
}

TEST(Sds, SeedAverageMatchesAnalyticMean) {
    Rendered r = make_render(2, 9);
    const IdentityCodec codec;
    const Vec3 m(0.3, 0.6, 0.9);
    const GaussianPrior prior = GaussianPrior::solid(m, ConditioningKind::kView);
    NoiseSchedule fixed;
    fixed.t_min = fixed.t_max = 0.35;
    ad::Tape probe(ad::GradMode::kNoGrad);
    const ad::Tensor img = render_color(probe, r).value();
    const double a = fixed.alpha_bar(0.35);
    ad::Tensor analytic = img;
    analytic.rowwise() -= m.transpose();
    analytic *= fixed.weight(0.35) * std::sqrt(a) / std::sqrt(1.0 - a);
    ad::Tensor sum = ad::Tensor::Zero(img.rows(), 3);
    ad::Tensor sum2 = ad::Tensor::Zero(img.rows(), 3);
    const int n = 1000;
    Conditioning c;
    c.kind = ConditioningKind::kView;
    for (int s = 0; s < n; ++s) {
        ad::Tape t(ad::GradMode::kNoGrad);
        SdsContext ctx{t.constant(img), 2, 2, &prior, &codec, fixed, 1.0, static_cast<std::uint64_t>(s)};
        const ad::Tensor g = sds_seed(ctx, c).image_grad;
        sum += g;
        sum2 += g.cwiseProduct(g);
    }
    const ad::Tensor mean = sum / n;
    for (Eigen::Index i = 0; i < mean.size(); ++i) {
        const double var = std::max(0.0, sum2.data()[i] / n - mean.data()[i] * mean.data()[i]);
        const double se = std::sqrt(var / n);
        EXPECT_LE(std::abs(mean.data()[i] - analytic.data()[i]), std::max(3.0 * se, 1e-12));
    }
}

TEST(Sds, ErrorsCarryContext) {
    Rendered r = make_render(2, 10);
    const IdentityCodec codec;
    const GaussianPrior wrong_size(ad::Tensor::Zero(9, 3), ConditioningKind::kText, "base");
    ad::Tape t;
    SdsContext ctx{render_color(t, r), 2, 2, &wrong_size, &codec, {}, 1.0, 0};
    EXPECT_THROW(sds_step_2d(ctx, "x"), PriorError);
    const GaussianPrior view = GaussianPrior::solid(Vec3::Zero(), ConditioningKind::kView);
    ctx.prior = &view;
    EXPECT_THROW(sds_step_2d(ctx, "x"), PriorError);
}

TEST(Sds, RecordingPriorCounts) {
    const GaussianPrior inner = GaussianPrior::solid(Vec3::Zero(), ConditioningKind::kText);
    RecordingPrior rec(inner);
    const IdentityCodec codec;
    ad::Tape t(ad::GradMode::kNoGrad);
    SdsContext ctx{t.constant(ad::Tensor::Constant(1, 3, 0.5)), 1, 1, &rec, &codec, {}, 1.0, 0};
    Conditioning c;
    sds_seed(ctx, c);
    sds_seed(ctx, c);
    EXPECT_EQ(rec.calls(), 2);
    EXPECT_EQ(rec.label(), "base");
}

}  // namespace
}  // namespace dvne
