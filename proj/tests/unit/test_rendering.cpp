#include "dvne/rendering.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <random>

namespace dvne {
namespace {

// Independent scalar evaluation of the compositing sum with product-form
// transmittance.
RenderOutput brute_force(const std::vector<SamplePoint>& s, const std::vector<double>& d) {
    RenderOutput r;
    double acc = 0.0;
    double depth = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        double trans = 1.0;
        for (std::size_t j = 0; j < i; ++j) trans *= std::exp(-s[j].density * d[j]);
        const double w = trans * (1.0 - std::exp(-s[i].density * d[i]));
        r.color += w * s[i].color;
        if (s[i].origin == SampleOrigin::kHuman) r.mask += w;
        acc += w;
        depth += w * s[i].t;
    }
    r.depth = depth / std::max(acc, kDepthEpsilon);
    r.accumulation = acc;
    return r;
}

std::vector<SamplePoint> random_samples(std::mt19937_64& rng, int n) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<SamplePoint> s(static_cast<std::size_t>(n));
    double t = 0.1;
    for (auto& p : s) {
        t += u(rng);
        p.t = t;
        p.color = Vec3(u(rng), u(rng), u(rng));
        p.density = 5.0 * u(rng);
        p.origin = u(rng) < 0.5 ? SampleOrigin::kHuman : SampleOrigin::kScene;
    }
    return s;
}

TEST(SampleRay, UniformSplit) {
    const auto iv = sample_ray(1.0, 2.0, 2, false, nullptr);
    ASSERT_EQ(iv.size(), 2u);
    EXPECT_EQ(iv[0].t0, 1.0);
    EXPECT_EQ(iv[0].t1, 1.5);
    EXPECT_EQ(iv[1].t0, 1.5);
    EXPECT_EQ(iv[1].t1, 2.0);
}

TEST(SampleRay, CoversRangeExactly) {
    for (Spacing sp : {Spacing::kLinear, Spacing::kDisparity}) {
        const auto iv = sample_ray(0.1, 100.0, 64, false, nullptr, sp);
        EXPECT_EQ(iv.front().t0, 0.1);
        EXPECT_EQ(iv.back().t1, 100.0);
        for (std::size_t i = 1; i < iv.size(); ++i) EXPECT_EQ(iv[i].t0, iv[i - 1].t1);
    }
}

TEST(SampleRay, InvalidRange) {
    EXPECT_THROW(sample_ray(0.0, 1.0, 4, false, nullptr), InvalidInterval);
    EXPECT_THROW(sample_ray(2.0, 1.0, 4, false, nullptr), InvalidInterval);
    EXPECT_THROW(sample_ray(1.0, 2.0, 0, false, nullptr), InvalidArgument);
}

// Chi-square over 10 bins of the within-interval offset; 16.92 is the 0.95
// quantile with 9 degrees of freedom.
TEST(SampleRay, StratifiedUniformWithinIntervals) {
    std::mt19937_64 rng(1);
    std::vector<int> bins(10, 0);
    const int draws = 10000;
    for (int i = 0; i < draws / 4; ++i) {
        for (const auto& iv : sample_ray(1.0, 3.0, 4, true, &rng)) {
            ASSERT_GE(iv.t, iv.t0);
            ASSERT_LT(iv.t, iv.t1);
            bins[static_cast<std::size_t>(std::min(9, static_cast<int>(10 * (iv.t - iv.t0) / iv.width())))]++;
        }
    }
    double chi2 = 0.0;
    for (int b : bins) chi2 += (b - draws / 10.0) * (b - draws / 10.0) / (draws / 10.0);
    EXPECT_LT(chi2, 16.92);
}

TEST(Composite, MergeOrderAndTies) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        auto h = random_samples(rng, 5);
        auto s = random_samples(rng, 7);
        for (auto& p : h) p.origin = SampleOrigin::kHuman;
        for (auto& p : s) p.origin = SampleOrigin::kScene;
        if (trial % 2 == 0) s[2].t = h[1].t;
        std::sort(s.begin(), s.end(), [](auto& a, auto& b) { return a.t < b.t; });
        const auto merged = composite(h, s);
        std::vector<SamplePoint> oracle = h;
        oracle.insert(oracle.end(), s.begin(), s.end());
        std::stable_sort(oracle.begin(), oracle.end(), [](auto& a, auto& b) { return a.t < b.t; });
        ASSERT_EQ(merged.size(), oracle.size());
        for (std::size_t i = 0; i < merged.size(); ++i) {
            EXPECT_EQ(merged[i].t, oracle[i].t);
            EXPECT_EQ(merged[i].origin, oracle[i].origin);
        }
    }
    auto one = random_samples(rng, 3);
    const auto same = composite({}, one);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(same[i].t, one[i].t);
    std::swap(one[0], one[2]);
    EXPECT_THROW(composite(one, {}), UnsortedSamples);
}

TEST(VolumeRender, OpaqueAndEmptyLimits) {
    SamplePoint p{2.5, Vec3(0.2, 0.4, 0.6), 1e6, SampleOrigin::kHuman};
    const std::vector<SamplePoint> one = {p};
    const std::vector<double> d = {1.0};
    const RenderOutput r = volume_render(one, d);
    EXPECT_EQ(r.color, p.color);
    EXPECT_EQ(r.mask, 1.0);
    EXPECT_EQ(r.depth, 2.5);
    std::vector<SamplePoint> empty = {p, p};
    empty[0].density = empty[1].density = 0.0;
    const std::vector<double> d2 = {0.5, 0.5};
    const RenderOutput e = volume_render(empty, d2);
    EXPECT_EQ(e.color, Vec3::Zero());
    EXPECT_EQ(e.mask, 0.0);
}

TEST(VolumeRender, MatchesBruteForce) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 0.5);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto s = random_samples(rng, 1 + trial % 9);
        std::vector<double> d(s.size());
        for (auto& v : d) v = u(rng);
        const RenderOutput a = volume_render(s, d);
        const RenderOutput b = brute_force(s, d);
        EXPECT_LE((a.color - b.color).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_LE(std::abs(a.mask - b.mask), 1e-12);
        EXPECT_LE(std::abs(a.depth - b.depth), 1e-12);
        double total = 0.0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i > 0) EXPECT_LE(a.transmittance[i], a.transmittance[i - 1]);
            total += a.weights[i];
        }
        EXPECT_LE(total, 1.0 + 1e-15);
    }
}

struct Fixture {
    SceneModel model;
    Camera camera;
    SkeletonPose pose;
    RenderOptions options;
};

Fixture make_fixture(int width, int height, std::uint64_t seed) {
    Fixture f{SceneModel(testing::tiny_config(), seed), {}, {}, {}};
    testing::randomize(f.model.params(), seed + 1);
    f.camera = look_at(Vec3(0.1, 0.1, 1.0), Vec3(0, 0.1, 0), Vec3(0, 1, 0), 45.0, width, height);
    std::vector<Vec3> rots(4, Vec3::Zero());
    rots[2] = Vec3(0, 0, -0.6);
    f.pose = pose_from_rotations(f.model.config().rest, rots);
    f.options.n_scene_samples = 6;
    f.options.n_human_samples = 5;
    f.options.far = 20.0;
    return f;
}

void kill_human_density(SceneModel& model) {
    auto& p = model.params();
    const auto& mlp = model.human().mlp();
    const std::size_t last_bias = mlp.first_block() + mlp.num_blocks() - 1;
    const std::size_t last_weight = last_bias - 1;
    p.block_values(last_bias)(0, 0) = -1000.0;
    p.block_values(last_weight).row(0).setZero();
}

TEST(RenderPixel, HumanDensityZeroIsBackgroundOnly) {
    Fixture f = make_fixture(16, 16, 4);
    kill_human_density(f.model);
    RenderOptions bg_only = f.options;
    bg_only.render_human = false;
    for (int y = 0; y < 16; y += 3) {
        for (int x = 0; x < 16; x += 3) {
            const RenderOutput a = render_pixel(f.model, f.camera, x, y, f.pose, f.options);
            const RenderOutput b = render_pixel(f.model, f.camera, x, y, f.pose, bg_only);
            EXPECT_LE((a.color - b.color).cwiseAbs().maxCoeff(), 1e-12);
            EXPECT_LE(std::abs(a.depth - b.depth), 1e-12);
            EXPECT_EQ(a.mask, 0.0);
        }
    }
}

TEST(RenderPixel, OpaqueHumanGivesFullMask) {
    Fixture f = make_fixture(16, 16, 5);
    auto& p = f.model.params();
    const auto& hm = f.model.human().mlp();
    const std::size_t hb = hm.first_block() + hm.num_blocks() - 1;
    p.block_values(hb - 1).row(0).setZero();
    p.block_values(hb)(0, 0) = 500.0;
    const auto& bm = f.model.background().mlp();
    const std::size_t bb = bm.first_block() + bm.num_blocks() - 1;
    p.block_values(bb - 1).row(0).setZero();
    p.block_values(bb)(0, 0) = -1000.0;
    // Center pixel looks straight at the torso.
    const RenderOutput r = render_pixel(f.model, f.camera, 8, 8, f.pose, f.options);
    EXPECT_GT(r.mask, 0.999);
}

TEST(RenderPixel, GradientMatchesFiniteDifferences) {
    Fixture f = make_fixture(8, 8, 6);
    f.options.n_scene_samples = 1;
    f.options.n_human_samples = 1;
    auto& params = f.model.params();
    const Ray ray = f.camera.pixel_ray(4, 4);
    const std::int64_t id = 0;
    auto eval = [&](ad::Tape& t) {
        const RayBatch b = render_rays(t, f.model, {&ray, 1}, {&id, 1}, f.pose, f.options);
        EXPECT_EQ(b.human_samples + b.scene_samples, 2u);
        return ad::sum(ad::slice_cols(b.out, 0, 3));
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
    const auto [hb, he] = f.model.group_range(ParamGroup::kHuman);
    const auto [bb, be] = f.model.group_range(ParamGroup::kBackground);
    double h_norm = 0.0;
    double b_norm = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        EXPECT_LE(testing::rel_err(g[i], ref[i], 1e-3), 1e-4) << i;
        if (i >= hb && i < he) h_norm += std::abs(g[i]);
        if (i >= bb && i < be) b_norm += std::abs(g[i]);
    }
    EXPECT_GT(h_norm, 0.0);
    EXPECT_GT(b_norm, 0.0);
}

TEST(RenderRays, AllOutputColumnsDifferentiable) {
    Fixture f = make_fixture(4, 4, 7);
    auto& params = f.model.params();
    const std::vector<Ray> rays = camera_rays(f.camera);
    std::vector<std::int64_t> ids(rays.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::int64_t>(i);
    ad::Tensor seed(static_cast<Eigen::Index>(rays.size()), kRenderColumns);
    std::mt19937_64 rng(8);
    std::normal_distribution<double> n;
    for (Eigen::Index i = 0; i < seed.size(); ++i) seed.data()[i] = n(rng);
    auto eval = [&](ad::Tape& t) {
        const RayBatch b = render_rays(t, f.model, rays, ids, f.pose, f.options);
        return ad::sum(b.out * t.constant(seed));
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

TEST(RenderRays, SceneWeightsMatchCompositing) {
    Fixture f = make_fixture(4, 4, 9);
    f.options.render_human = false;
    f.options.scene_weights = true;
    const std::vector<Ray> rays = camera_rays(f.camera);
    std::vector<std::int64_t> ids(rays.size(), 0);
    ad::Tape tape(ad::GradMode::kNoGrad);
    const RayBatch b = render_rays(tape, f.model, rays, ids, f.pose, f.options);
    const auto& w = b.scene_weights.value();
    const auto& out = b.out.value();
    for (std::size_t r = 0; r < rays.size(); ++r) {
        double acc = 0.0;
        for (int k = 0; k < f.options.n_scene_samples; ++k) acc += w(static_cast<Eigen::Index>(r) * f.options.n_scene_samples + k, 0);
        EXPECT_NEAR(acc, out(static_cast<Eigen::Index>(r), kColAcc), 1e-12);
    }
    EXPECT_NEAR(b.scene_s_width.row(0).sum(), 1.0, 1e-12);
}

TEST(RenderImage, StratificationIndependentOfChunking) {
    Fixture f = make_fixture(6, 5, 10);
    f.options.stratified = true;
    f.options.stratified_seed = 99;
    const RenderedImage a = render_image(f.model, f.camera, f.pose, f.options, 7);
    const RenderedImage b = render_image(f.model, f.camera, f.pose, f.options, 30);
    EXPECT_EQ(a.raw, b.raw);
}

ad::Tensor random_loss_grad(int pixels, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n;
    ad::Tensor g(pixels, kRenderColumns);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = n(rng);
    return g;
}

TEST(Deferred, ChunkedMatchesMonolithic) {
    Fixture f = make_fixture(8, 8, 11);
    const ad::Tensor lg = random_loss_grad(64, 12);
    const auto mono = render_image_monolithic(f.model, f.camera, f.pose, f.options, lg);
    const auto full = render_image_deferred(f.model, f.camera, f.pose, f.options, 64, lg);
    EXPECT_EQ(mono, full);
    const auto single = render_image_deferred(f.model, f.camera, f.pose, f.options, 1, lg);
    for (std::size_t i = 0; i < mono.size(); ++i) EXPECT_LE(std::abs(mono[i] - single[i]), 1e-10);
    EXPECT_THROW(render_image_deferred(f.model, f.camera, f.pose, f.options, 0, lg), InvalidArgument);
    EXPECT_THROW(render_image_deferred(f.model, f.camera, f.pose, f.options, 4, random_loss_grad(10, 1)), ShapeMismatch);
}

TEST(Deferred, ChunkingLowersPeakMemory) {
    Fixture f = make_fixture(128, 128, 13);
    f.options.n_scene_samples = 4;
    f.options.n_human_samples = 4;
    const ad::Tensor lg = random_loss_grad(128 * 128, 14);
    DeferredStats chunked;
    DeferredStats mono;
    render_image_deferred(f.model, f.camera, f.pose, f.options, 64, lg, &chunked);
    render_image_monolithic(f.model, f.camera, f.pose, f.options, lg, &mono);
    EXPECT_EQ(chunked.chunks, 256u);
    EXPECT_LT(chunked.peak_tape_bytes, mono.peak_tape_bytes);
}

}  // namespace
}  // namespace dvne
