#include "dvne/rendering.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <memory>
#include <thread>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace dvne {

// ---- sampling and compositing ------------------------------------------------------

std::vector<Interval> sample_ray(double near, double far, int n_samples, bool stratified, std::mt19937_64* rng,
                                 Spacing spacing) {
    if (!(near > 0.0) || !(far > near)) {
        throw InvalidInterval("sample range must satisfy 0 < near < far, got [" + std::to_string(near) + ", " +
                              std::to_string(far) + "]");
    }
    if (n_samples < 1) throw InvalidArgument("n_samples must be at least 1");
    if (stratified && rng == nullptr) throw InvalidArgument("stratified sampling needs a random generator");
    std::vector<double> edges(static_cast<std::size_t>(n_samples) + 1);
    for (int k = 0; k <= n_samples; ++k) {
        const double u = static_cast<double>(k) / n_samples;
        if (spacing == Spacing::kLinear) {
            edges[static_cast<std::size_t>(k)] = near + (far - near) * u;
        } else {
            edges[static_cast<std::size_t>(k)] = 1.0 / (1.0 / near + (1.0 / far - 1.0 / near) * u);
        }
    }
    edges.front() = near;
    edges.back() = far;
    std::vector<Interval> out(static_cast<std::size_t>(n_samples));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t i = 0; i < out.size(); ++i) {
        Interval& iv = out[i];
        iv.t0 = edges[i];
        iv.t1 = edges[i + 1];
        iv.t = stratified ? iv.t0 + unit(*rng) * (iv.t1 - iv.t0) : 0.5 * (iv.t0 + iv.t1);
    }
    return out;
}

std::vector<SamplePoint> composite(std::span<const SamplePoint> human, std::span<const SamplePoint> scene) {
    auto check_sorted = [](std::span<const SamplePoint> s, const char* name) {
        for (std::size_t i = 1; i < s.size(); ++i) {
            if (s[i].t < s[i - 1].t) throw UnsortedSamples(std::string(name) + " samples are not sorted by depth");
        }
    };
    check_sorted(human, "human");
    check_sorted(scene, "scene");
    std::vector<SamplePoint> out;
    out.reserve(human.size() + scene.size());
    std::size_t i = 0;
    std::size_t j = 0;
    while (i < human.size() || j < scene.size()) {
        if (j == scene.size() || (i < human.size() && human[i].t <= scene[j].t)) {
            out.push_back(human[i++]);
        } else {
            out.push_back(scene[j++]);
        }
    }
    return out;
}

namespace {

// One ray's compositing inputs, already in depth order.
struct RaySamples {
    std::vector<double> sigma;
    std::vector<double> rgb;  // 3 per sample
    std::vector<double> t;
    std::vector<double> delta;
    std::vector<std::uint8_t> human;

    std::size_t size() const { return sigma.size(); }
};

// Writes rgb, mask, depth, accumulation into out[0..5] and T_i, w_i.
void composite_forward(const RaySamples& s, const Vec3& bg, double* out, double* trans, double* weights) {
    double cum = 0.0;
    double acc = 0.0;
    double mask = 0.0;
    double depth_sum = 0.0;
    Vec3 color = Vec3::Zero();
    for (std::size_t i = 0; i < s.size(); ++i) {
        const double tr = std::exp(-cum);
        const double sd = s.sigma[i] * s.delta[i];
        const double w = tr * (1.0 - std::exp(-sd));
        trans[i] = tr;
        weights[i] = w;
        cum += sd;
        acc += w;
        if (s.human[i] != 0) mask += w;
        depth_sum += w * s.t[i];
        color += w * Vec3(s.rgb[3 * i], s.rgb[3 * i + 1], s.rgb[3 * i + 2]);
    }
    color += (1.0 - acc) * bg;
    out[kColR] = color.x();
    out[kColG] = color.y();
    out[kColB] = color.z();
    out[kColMask] = mask;
    out[kColDepth] = depth_sum / std::max(acc, kDepthEpsilon);
    out[kColAcc] = acc;
}

// Gradients of the six outputs w.r.t. per-sample density and colour.
void composite_backward(const RaySamples& s, const Vec3& bg, const double* out, const double* trans,
                        const double* weights, const double* g, double* d_sigma, double* d_rgb) {
    const std::size_t n = s.size();
    const double acc = out[kColAcc];
    const double depth_sum = out[kColDepth] * std::max(acc, kDepthEpsilon);
    std::vector<double> q(n);
    for (std::size_t i = 0; i < n; ++i) {
        double qi = g[kColR] * (s.rgb[3 * i] - bg.x()) + g[kColG] * (s.rgb[3 * i + 1] - bg.y()) +
                    g[kColB] * (s.rgb[3 * i + 2] - bg.z());
        if (s.human[i] != 0) qi += g[kColMask];
        qi += g[kColAcc];
        if (acc > kDepthEpsilon) {
            qi += g[kColDepth] * (s.t[i] / acc - depth_sum / (acc * acc));
        } else {
            qi += g[kColDepth] * s.t[i] / kDepthEpsilon;
        }
        q[i] = qi;
        d_rgb[3 * i] = g[kColR] * weights[i];
        d_rgb[3 * i + 1] = g[kColG] * weights[i];
        d_rgb[3 * i + 2] = g[kColB] * weights[i];
    }
    // dw_i/dsigma_k = -delta_k w_i for i > k, delta_k T_{k+1} for i = k.
    double suffix = 0.0;
    for (std::size_t k = n; k-- > 0;) {
        const double next_t = trans[k] * std::exp(-s.sigma[k] * s.delta[k]);
        d_sigma[k] = s.delta[k] * (q[k] * next_t - suffix);
        suffix += q[k] * weights[k];
    }
}

}  // namespace

RenderOutput volume_render(std::span<const SamplePoint> samples, std::span<const double> deltas, const Vec3& background) {
    if (samples.size() != deltas.size()) throw ShapeMismatch("volume_render needs one delta per sample");
    RaySamples s;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (i > 0 && samples[i].t < samples[i - 1].t) throw UnsortedSamples("volume_render samples are not sorted");
        if (deltas[i] < 0.0) throw InvalidArgument("volume_render deltas must be non-negative");
        s.sigma.push_back(samples[i].density);
        s.rgb.insert(s.rgb.end(), {samples[i].color.x(), samples[i].color.y(), samples[i].color.z()});
        s.t.push_back(samples[i].t);
        s.delta.push_back(deltas[i]);
        s.human.push_back(samples[i].origin == SampleOrigin::kHuman ? 1 : 0);
    }
    RenderOutput r;
    r.transmittance.resize(s.size());
    r.weights.resize(s.size());
    double out[kRenderColumns];
    composite_forward(s, background, out, r.transmittance.data(), r.weights.data());
    r.color = Vec3(out[kColR], out[kColG], out[kColB]);
    r.mask = out[kColMask];
    r.depth = out[kColDepth];
    r.accumulation = out[kColAcc];
    return r;
}

// ---- batched rendering ---------------------------------------------------------------

namespace {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    // splitmix64 finalizer over the combined value
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

struct Entry {
    std::uint8_t human;
    std::int64_t index;  // row in the human or scene tensors
    double t;
    double delta;
};

// Fused compositing over merged human and scene samples for every ray.
ad::Var composite_op(ad::Tape& tape, const FieldBatch* human, const FieldBatch* scene,
                     std::shared_ptr<const std::vector<std::vector<Entry>>> layout, const Vec3& bg) {
    const auto& rays = *layout;
    const Eigen::Index n_rays = static_cast<Eigen::Index>(rays.size());
    ad::Tensor out(n_rays, kRenderColumns);

    auto gather = [&](const ad::Tape& t, const std::vector<Entry>& entries, int h_sigma, int h_rgb, int s_sigma,
                      int s_rgb) {
        RaySamples rs;
        rs.sigma.reserve(entries.size());
        rs.rgb.reserve(3 * entries.size());
        for (const Entry& e : entries) {
            const ad::Tensor& sig = t.value(e.human ? h_sigma : s_sigma);
            const ad::Tensor& col = t.value(e.human ? h_rgb : s_rgb);
            rs.sigma.push_back(sig(e.index, 0));
            rs.rgb.insert(rs.rgb.end(), {col(e.index, 0), col(e.index, 1), col(e.index, 2)});
            rs.t.push_back(e.t);
            rs.delta.push_back(e.delta);
            rs.human.push_back(e.human);
        }
        return rs;
    };

    const int h_sigma = human ? human->density.id() : -1;
    const int h_rgb = human ? human->color.id() : -1;
    const int s_sigma = scene ? scene->density.id() : -1;
    const int s_rgb = scene ? scene->color.id() : -1;

    auto offsets = std::make_shared<std::vector<std::size_t>>(rays.size() + 1, 0);
    for (std::size_t r = 0; r < rays.size(); ++r) (*offsets)[r + 1] = (*offsets)[r] + rays[r].size();
    auto trans = std::make_shared<std::vector<double>>(offsets->back());
    auto weights = std::make_shared<std::vector<double>>(offsets->back());

    for (std::size_t r = 0; r < rays.size(); ++r) {
        const RaySamples rs = gather(tape, rays[r], h_sigma, h_rgb, s_sigma, s_rgb);
        composite_forward(rs, bg, out.row(static_cast<Eigen::Index>(r)).data(), trans->data() + (*offsets)[r],
                          weights->data() + (*offsets)[r]);
    }

    std::vector<int> inputs;
    for (int id : {h_sigma, h_rgb, s_sigma, s_rgb}) {
        if (id >= 0) inputs.push_back(id);
    }
    return tape.record(
        "volume_render", std::move(out), inputs,
        [layout, offsets, trans, weights, bg, h_sigma, h_rgb, s_sigma, s_rgb, gather](ad::Tape& t, int self) {
            const ad::Tensor& g = t.grad(self);
            const ad::Tensor& o = t.value(self);
            ad::Tensor dhs, dhc, dss, dsc;
            if (h_sigma >= 0) {
                dhs = ad::Tensor::Zero(t.value(h_sigma).rows(), 1);
                dhc = ad::Tensor::Zero(t.value(h_rgb).rows(), 3);
            }
            if (s_sigma >= 0) {
                dss = ad::Tensor::Zero(t.value(s_sigma).rows(), 1);
                dsc = ad::Tensor::Zero(t.value(s_rgb).rows(), 3);
            }
            std::vector<double> d_sigma;
            std::vector<double> d_rgb;
            for (std::size_t r = 0; r < layout->size(); ++r) {
                const auto& entries = (*layout)[r];
                if (entries.empty()) continue;
                const RaySamples rs = gather(t, entries, h_sigma, h_rgb, s_sigma, s_rgb);
                d_sigma.assign(entries.size(), 0.0);
                d_rgb.assign(3 * entries.size(), 0.0);
                const auto row = static_cast<Eigen::Index>(r);
                composite_backward(rs, bg, o.row(row).data(), trans->data() + (*offsets)[r],
                                   weights->data() + (*offsets)[r], g.row(row).data(), d_sigma.data(), d_rgb.data());
                for (std::size_t i = 0; i < entries.size(); ++i) {
                    const Entry& e = entries[i];
                    ad::Tensor& ds = e.human ? dhs : dss;
                    ad::Tensor& dc = e.human ? dhc : dsc;
                    ds(e.index, 0) += d_sigma[i];
                    dc(e.index, 0) += d_rgb[3 * i];
                    dc(e.index, 1) += d_rgb[3 * i + 1];
                    dc(e.index, 2) += d_rgb[3 * i + 2];
                }
            }
            if (h_sigma >= 0) {
                t.accumulate_grad(h_sigma, dhs);
                t.accumulate_grad(h_rgb, dhc);
            }
            if (s_sigma >= 0) {
                t.accumulate_grad(s_sigma, dss);
                t.accumulate_grad(s_rgb, dsc);
            }
        });
}

// Per-sample weights of contiguous per-ray segments of `n` samples.
ad::Var ray_weights_op(ad::Var sigma, std::shared_ptr<const std::vector<double>> deltas, std::size_t n) {
    const ad::Tensor& sv = sigma.value();
    const std::size_t total = static_cast<std::size_t>(sv.rows());
    ad::Tensor w(sv.rows(), 1);
    auto trans = std::make_shared<std::vector<double>>(total);
    for (std::size_t start = 0; start < total; start += n) {
        double cum = 0.0;
        for (std::size_t i = start; i < start + n; ++i) {
            const double tr = std::exp(-cum);
            const double sd = sv(static_cast<Eigen::Index>(i), 0) * (*deltas)[i];
            (*trans)[i] = tr;
            w(static_cast<Eigen::Index>(i), 0) = tr * (1.0 - std::exp(-sd));
            cum += sd;
        }
    }
    const int is = sigma.id();
    return sigma.tape()->record("ray_weights", std::move(w), {is}, [is, deltas, trans, n](ad::Tape& t, int self) {
        const ad::Tensor& s = t.value(is);
        const ad::Tensor& w2 = t.value(self);
        const ad::Tensor& g = t.grad(self);
        ad::Tensor ds(s.rows(), 1);
        const auto total2 = static_cast<std::size_t>(s.rows());
        for (std::size_t start = 0; start < total2; start += n) {
            double suffix = 0.0;
            for (std::size_t k = start + n; k-- > start;) {
                const auto kk = static_cast<Eigen::Index>(k);
                const double next_t = (*trans)[k] * std::exp(-s(kk, 0) * (*deltas)[k]);
                ds(kk, 0) = (*deltas)[k] * (g(kk, 0) * next_t - suffix);
                suffix += g(kk, 0) * w2(kk, 0);
            }
        }
        t.accumulate_grad(is, ds);
    });
}

}  // namespace

RayBatch render_rays(ad::Tape& tape, const SceneModel& model, std::span<const Ray> rays,
                     std::span<const std::int64_t> ray_ids, const SkeletonPose& pose, const RenderOptions& options) {
    if (ray_ids.size() != rays.size()) throw ShapeMismatch("render_rays needs one id per ray");
    if (!(options.near > 0.0) || !(options.far > options.near)) throw InvalidInterval("render range must satisfy 0 < near < far");
    const std::size_t n_rays = rays.size();
    const auto& params = model.params();
    auto layout = std::make_shared<std::vector<std::vector<Entry>>>(n_rays);
    RayBatch batch;

    std::vector<std::vector<Entry>> human_entries(n_rays);
    std::vector<std::vector<Entry>> scene_entries(n_rays);
    std::optional<FieldBatch> human_out;
    std::optional<FieldBatch> scene_out;

    if (options.render_human) {
        const DeformationField& deform = model.deformation();
        const PosedSkeleton posed = deform.prepare(pose);
        const Aabb box = deform.posed_bounds(posed, model.human().bbox());
        std::vector<Vec3> coarse;
        for (std::size_t r = 0; r < n_rays; ++r) {
            double te = 0.0;
            double tx = 0.0;
            if (!box.intersect(rays[r], te, tx)) continue;
            const double lo = std::max(te, options.near);
            const double hi = std::min(tx, options.far);
            if (!(hi > lo)) continue;
            std::mt19937_64 rng(mix_seed(options.stratified_seed, static_cast<std::uint64_t>(ray_ids[r]) * 2));
            const auto ivs = sample_ray(lo, hi, options.n_human_samples, options.stratified, &rng);
            for (const Interval& iv : ivs) {
                human_entries[r].push_back({1, static_cast<std::int64_t>(coarse.size()), iv.t, iv.width()});
                coarse.push_back(deform.coarse_deform(posed, rays[r].at(iv.t)));
            }
        }
        if (!coarse.empty()) {
            ad::Tensor xc(static_cast<Eigen::Index>(coarse.size()), 3);
            for (std::size_t i = 0; i < coarse.size(); ++i) xc.row(static_cast<Eigen::Index>(i)) = coarse[i].transpose();
            const ad::Var x_coarse = tape.constant(std::move(xc));
            const ad::Var offset = deform.fine_deform(tape, params, posed, x_coarse, options.train_nonrigid);
            human_out = model.human().query(tape, params, x_coarse + offset, options.train_human);
            batch.human_samples = coarse.size();
        }
    }

    if (options.render_scene) {
        const int ns = options.n_scene_samples;
        const int enc_size = model.background().encoding().output_size();
        const int levels = model.background().encoding().num_levels;
        ad::Tensor enc(static_cast<Eigen::Index>(n_rays) * ns, enc_size);
        auto deltas = std::make_shared<std::vector<double>>();
        deltas->reserve(n_rays * static_cast<std::size_t>(ns));
        batch.scene_s_mid.resize(static_cast<Eigen::Index>(n_rays), ns);
        batch.scene_s_width.resize(static_cast<Eigen::Index>(n_rays), ns);
        const double g_near = 1.0 / options.near;
        const double g_far = 1.0 / options.far;
        auto to_s = [&](double t) { return (1.0 / t - g_near) / (g_far - g_near); };
        for (std::size_t r = 0; r < n_rays; ++r) {
            std::mt19937_64 rng(mix_seed(options.stratified_seed, static_cast<std::uint64_t>(ray_ids[r]) * 2 + 1));
            const auto ivs = sample_ray(options.near, options.far, ns, options.stratified, &rng, Spacing::kDisparity);
            for (int k = 0; k < ns; ++k) {
                const Interval& iv = ivs[static_cast<std::size_t>(k)];
                const auto row = static_cast<Eigen::Index>(r) * ns + k;
                const FrustumGaussian g = contract_gaussian(frustum_gaussian(rays[r], iv.t0, iv.t1));
                integrated_positional_encoding(g, levels, {enc.row(row).data(), static_cast<std::size_t>(enc_size)});
                scene_entries[r].push_back({0, row, iv.t, iv.width()});
                deltas->push_back(iv.width());
                const double s0 = to_s(iv.t0);
                const double s1 = to_s(iv.t1);
                batch.scene_s_mid(static_cast<Eigen::Index>(r), k) = 0.5 * (s0 + s1);
                batch.scene_s_width(static_cast<Eigen::Index>(r), k) = s1 - s0;
            }
        }
        scene_out = model.background().query_encoded(tape, params, tape.constant(std::move(enc)), options.train_scene);
        batch.scene_samples = n_rays * static_cast<std::size_t>(ns);
        if (options.scene_weights) {
            batch.scene_weights = ray_weights_op(scene_out->density, deltas, static_cast<std::size_t>(ns));
        }
    }

    for (std::size_t r = 0; r < n_rays; ++r) {
        auto& merged = (*layout)[r];
        const auto& h = human_entries[r];
        const auto& s = scene_entries[r];
        merged.reserve(h.size() + s.size());
        std::size_t i = 0;
        std::size_t j = 0;
        while (i < h.size() || j < s.size()) {
            if (j == s.size() || (i < h.size() && h[i].t <= s[j].t)) {
                merged.push_back(h[i++]);
            } else {
                merged.push_back(s[j++]);
            }
        }
    }
    batch.out = composite_op(tape, human_out ? &*human_out : nullptr, scene_out ? &*scene_out : nullptr, layout,
                             options.background);
    return batch;
}

RenderOutput render_pixel(const SceneModel& model, const Camera& camera, int x, int y, const SkeletonPose& pose,
                          const RenderOptions& options) {
    camera.validate();
    if (x < 0 || y < 0 || x >= camera.width || y >= camera.height) throw InvalidArgument("pixel outside the image");
    ad::Tape tape(ad::GradMode::kNoGrad);
    const Ray ray = camera.pixel_ray(x, y);
    const std::int64_t id = static_cast<std::int64_t>(y) * camera.width + x;
    const RayBatch b = render_rays(tape, model, {&ray, 1}, {&id, 1}, pose, options);
    const ad::Tensor& o = b.out.value();
    RenderOutput r;
    r.color = Vec3(o(0, kColR), o(0, kColG), o(0, kColB));
    r.mask = o(0, kColMask);
    r.depth = o(0, kColDepth);
    r.accumulation = o(0, kColAcc);
    return r;
}

// ---- images -------------------------------------------------------------------------

int worker_threads() {
    if (const char* env = std::getenv("DVNE_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

void retain_freed_memory() {
#ifdef __GLIBC__
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

namespace {

template <typename Fn>
void parallel_chunks(std::size_t n_chunks, Fn&& fn) {
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(worker_threads()), n_chunks);
    if (workers <= 1) {
        for (std::size_t c = 0; c < n_chunks; ++c) fn(c);
        return;
    }
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t c = w; c < n_chunks; c += workers) fn(c);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace

std::vector<Ray> camera_rays(const Camera& camera) {
    camera.validate();
    std::vector<Ray> rays;
    rays.reserve(static_cast<std::size_t>(camera.width) * camera.height);
    for (int y = 0; y < camera.height; ++y) {
        for (int x = 0; x < camera.width; ++x) rays.push_back(camera.pixel_ray(x, y));
    }
    return rays;
}

RenderedImage to_rendered_image(const ad::Tensor& raw, int width, int height) {
    RenderedImage img;
    img.raw = raw;
    img.color = Image(width, height, 3);
    img.mask = Image(width, height, 1);
    img.depth = Image(width, height, 1);
    img.accumulation = Image(width, height, 1);
    img.color.pixels = raw.leftCols(3);
    img.mask.pixels = raw.col(kColMask);
    img.depth.pixels = raw.col(kColDepth);
    img.accumulation.pixels = raw.col(kColAcc);
    return img;
}

RenderedImage render_image(const SceneModel& model, const Camera& camera, const SkeletonPose& pose,
                           const RenderOptions& options, int chunk) {
    if (chunk <= 0) throw InvalidArgument("chunk must be positive");
    const std::vector<Ray> rays = camera_rays(camera);
    const std::size_t n = rays.size();
    ad::Tensor raw(static_cast<Eigen::Index>(n), kRenderColumns);
    const std::size_t step = static_cast<std::size_t>(chunk);
    const std::size_t n_chunks = (n + step - 1) / step;
    parallel_chunks(n_chunks, [&](std::size_t c) {
        const std::size_t begin = c * step;
        const std::size_t end = std::min(n, begin + step);
        std::vector<std::int64_t> ids(end - begin);
        for (std::size_t i = begin; i < end; ++i) ids[i - begin] = static_cast<std::int64_t>(i);
        ad::Tape tape(ad::GradMode::kNoGrad);
        const RayBatch b = render_rays(tape, model, std::span(rays).subspan(begin, end - begin), ids, pose, options);
        raw.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin)) = b.out.value();
    });
    return to_rendered_image(raw, camera.width, camera.height);
}

namespace {

ad::Tensor seed_rows(const ad::Tensor& loss_grad, std::size_t begin, std::size_t count) {
    ad::Tensor seed = ad::Tensor::Zero(static_cast<Eigen::Index>(count), kRenderColumns);
    seed.leftCols(loss_grad.cols()) =
        loss_grad.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count));
    return seed;
}

void check_loss_grad(const Camera& camera, const ad::Tensor& loss_grad) {
    const auto pixels = static_cast<Eigen::Index>(camera.width) * camera.height;
    if (loss_grad.rows() != pixels || (loss_grad.cols() != 3 && loss_grad.cols() != kRenderColumns)) {
        throw ShapeMismatch("loss gradient must be H*W x 3 or H*W x 6");
    }
}

}  // namespace

std::vector<double> render_image_deferred(const SceneModel& model, const Camera& camera, const SkeletonPose& pose,
                                          const RenderOptions& options, int chunk, const ad::Tensor& loss_grad,
                                          DeferredStats* stats) {
    if (chunk <= 0) throw InvalidArgument("chunk must be positive");
    check_loss_grad(camera, loss_grad);
    const std::vector<Ray> rays = camera_rays(camera);
    const std::size_t n = rays.size();
    const std::size_t step = static_cast<std::size_t>(chunk);
    const std::size_t n_chunks = (n + step - 1) / step;
    const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(worker_threads(), n_chunks));
    std::vector<double> total(model.params().size(), 0.0);
    std::vector<std::vector<double>> partial(workers);
    std::vector<std::size_t> peaks(workers, 0);
    // Chunks are processed in waves; merging happens here, in pixel order.
    for (std::size_t wave = 0; wave < n_chunks; wave += workers) {
        const std::size_t in_wave = std::min(workers, n_chunks - wave);
        parallel_chunks(in_wave, [&](std::size_t k) {
            const std::size_t c = wave + k;
            const std::size_t begin = c * step;
            const std::size_t end = std::min(n, begin + step);
            std::vector<std::int64_t> ids(end - begin);
            for (std::size_t i = begin; i < end; ++i) ids[i - begin] = static_cast<std::int64_t>(i);
            ad::Tape tape;
            const RayBatch b = render_rays(tape, model, std::span(rays).subspan(begin, end - begin), ids, pose, options);
            partial[k] = tape.backward(b.out, seed_rows(loss_grad, begin, end - begin));
            peaks[k] = std::max(peaks[k], tape.peak_bytes());
        });
        for (std::size_t k = 0; k < in_wave; ++k) {
            for (std::size_t i = 0; i < partial[k].size(); ++i) total[i] += partial[k][i];
        }
    }
    if (stats != nullptr) {
        stats->chunks = n_chunks;
        stats->peak_tape_bytes = *std::max_element(peaks.begin(), peaks.end());
    }
    return total;
}

std::vector<double> render_image_monolithic(const SceneModel& model, const Camera& camera, const SkeletonPose& pose,
                                            const RenderOptions& options, const ad::Tensor& loss_grad,
                                            DeferredStats* stats) {
    check_loss_grad(camera, loss_grad);
    const std::vector<Ray> rays = camera_rays(camera);
    std::vector<std::int64_t> ids(rays.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::int64_t>(i);
    ad::Tape tape;
    const RayBatch b = render_rays(tape, model, rays, ids, pose, options);
    std::vector<double> grad = tape.backward(b.out, seed_rows(loss_grad, 0, rays.size()));
    if (grad.empty()) grad.assign(model.params().size(), 0.0);
    if (stats != nullptr) {
        stats->chunks = 1;
        stats->peak_tape_bytes = tape.peak_bytes();
    }
    return grad;
}

}  // namespace dvne
