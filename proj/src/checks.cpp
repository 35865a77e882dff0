#include "dvne/checks.hpp"

#include "dvne/guidance.hpp"
#include "dvne/losses.hpp"
#include "dvne/rendering.hpp"
#include "dvne/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

namespace dvne {

namespace {

std::string fmt(const char* label, double v) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%s=%.3g", label, v);
    return buf;
}

void append(std::string& detail, const std::string& part) {
    if (!detail.empty()) detail += ' ';
    detail += part;
}

Vec3 random_unit(std::mt19937_64& rng) {
    std::normal_distribution<double> n;
    return Vec3(n(rng), n(rng), n(rng)).normalized();
}

ad::Tensor random_tensor(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    ad::Tensor t(r, c);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng);
    return t;
}

double rel_err(double a, double b, double floor) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

ModelConfig small_model(int width) {
    ModelConfig cfg;
    cfg.human_shape = FieldShape{width, 2, {}, Activation::kSoftplus};
    cfg.human_levels = 2;
    cfg.background_shape = FieldShape{width, 2, {}, Activation::kSoftplus};
    cfg.background_levels = 2;
    cfg.nonrigid.encoding = EncodingConfig{2, EncodingKind::kPlain};
    cfg.nonrigid.hidden_width = width;
    cfg.nonrigid.num_hidden_layers = 2;
    cfg.rest = toy_rig();
    cfg.canonical_box = Aabb{Vec3(-0.4, -0.35, -0.15), Vec3(0.4, 0.5, 0.15)};
    return cfg;
}

SceneModel random_model(int width, std::uint64_t seed) {
    SceneModel m(small_model(width), seed);
    std::mt19937_64 rng(seed + 1);
    std::normal_distribution<double> n(0.0, 0.5);
    for (double& v : m.params().values()) v = n(rng);
    return m;
}

// Worst relative error between the taped gradient of `eval` and central differences.
double gradient_error(ad::ParameterSet& params, const std::function<ad::Var(ad::Tape&)>& eval,
                      const ad::Tensor* seed = nullptr) {
    ad::Tape tape;
    const ad::Var out = eval(tape);
    std::vector<double> g = seed ? tape.backward(out, *seed) : tape.backward(out);
    if (g.empty()) g.assign(params.size(), 0.0);
    const std::vector<double> x(params.values().begin(), params.values().end());
    const auto ref = ad::finite_difference_gradient(
        [&](std::span<const double> v) {
            std::copy(v.begin(), v.end(), params.values().begin());
            ad::Tape t(ad::GradMode::kNoGrad);
            const ad::Var o = eval(t);
            const double r = seed ? o.value().cwiseProduct(*seed).sum() : o.scalar();
            std::copy(x.begin(), x.end(), params.values().begin());
            return r;
        },
        x, 1e-5);
    double worst = 0.0;
    double norm = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        worst = std::max(worst, rel_err(g[i], ref[i], 1e-3));
        norm += std::abs(g[i]);
    }
    return norm > 0.0 ? worst : std::numeric_limits<double>::infinity();
}

// Scalar compositing with product-form transmittance.
RenderOutput scalar_composite(const std::vector<SamplePoint>& s, const std::vector<double>& d, const Vec3& bg) {
    RenderOutput r;
    double acc = 0.0;
    double depth = 0.0;
    double trans = 1.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        trans = 1.0;
        for (std::size_t j = 0; j < i; ++j) trans *= std::exp(-s[j].density * d[j]);
        const double w = trans * (1.0 - std::exp(-s[i].density * d[i]));
        r.color += w * s[i].color;
        if (s[i].origin == SampleOrigin::kHuman) r.mask += w;
        acc += w;
        depth += w * s[i].t;
    }
    r.color += (1.0 - acc) * bg;
    r.depth = depth / std::max(acc, kDepthEpsilon);
    r.accumulation = acc;
    return r;
}

double output_gap(const RenderOutput& a, const RenderOutput& b) {
    return std::max({(a.color - b.color).cwiseAbs().maxCoeff(), std::abs(a.mask - b.mask),
                     std::abs(a.depth - b.depth), std::abs(a.accumulation - b.accumulation)});
}

double nnfm_oracle(const ad::Tensor& f, const ad::Tensor& s, double lambda) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < f.rows(); ++i) {
        double best = 2.0;
        for (Eigen::Index j = 0; j < s.rows(); ++j) {
            const double nf = f.row(i).norm();
            const double ns = s.row(j).norm();
            const double d = (nf == 0.0 || ns == 0.0) ? 1.0 : 1.0 - f.row(i).dot(s.row(j)) / (nf * ns);
            best = std::min(best, d);
        }
        total += best;
    }
    return lambda * total / static_cast<double>(f.rows());
}

ReferenceBundle random_reference(int w, int h, std::mt19937_64& rng) {
    ReferenceBundle ref;
    ref.image = Image(w, h, 3);
    ref.image.pixels = random_tensor(static_cast<Eigen::Index>(w) * h, 3, rng, 0.0, 1.0);
    ref.mask = Image(w, h, 1);
    for (Eigen::Index i = 0; i < ref.mask.pixels.rows(); ++i) ref.mask.pixels(i, 0) = (i % 3 == 2) ? 0.0 : 1.0;
    ref.depth = Image(w, h, 1);
    ref.depth.pixels = random_tensor(static_cast<Eigen::Index>(w) * h, 1, rng, 1.0, 3.0);
    ref.camera.width = w;
    ref.camera.height = h;
    ref.pose = toy_rig();
    return ref;
}

double rec_value(const ad::Tensor& color, const ad::Tensor& mask, const ad::Tensor& depth, const ReferenceBundle& ref,
                 const LossWeights& lw) {
    ad::Tape tape(ad::GradMode::kNoGrad);
    return rec_loss(tape, {tape.constant(color), tape.constant(mask), tape.constant(depth)}, ref, lw).total.scalar();
}

}  // namespace

CheckResult timed_check(const std::string& name, const std::function<bool(std::string&)>& fn) {
    CheckResult r;
    r.name = name;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        r.passed = fn(r.detail);
    } catch (const std::exception& e) {
        r.passed = false;
        append(r.detail, std::string("exception: ") + e.what());
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

CheckResult check_geometry() {
    return timed_check("geometry", [](std::string& detail) {
        std::mt19937_64 rng(1);
        std::uniform_real_distribution<double> inside(0.0, 1.0);
        std::uniform_real_distribution<double> far(0.0, 1e6);
        std::uniform_real_distribution<double> mid(0.0, 4.0);
        double identity = 0.0, max_norm = 0.0, seam = 0.0, jac = 0.0;
        for (int i = 0; i < 1000; ++i) {
            const Vec3 d = random_unit(rng);
            const Vec3 x = inside(rng) * (1.0 - 1e-12) * d;
            identity = std::max(identity, (contract(x) - x).norm());
            max_norm = std::max(max_norm, contract(far(rng) * d).norm());
            seam = std::max(seam, (contract((1.0 - 1e-9) * d) - contract((1.0 + 1e-9) * d)).norm());
            const Vec3 p = mid(rng) * d;
            if (std::abs(p.norm() - 1.0) < 1e-4) continue;
            const Mat3 j = contract_jacobian(p);
            const double h = 1e-6;
            for (int c = 0; c < 3; ++c) {
                Vec3 e = Vec3::Zero();
                e[c] = h;
                const Vec3 fd = (contract(p + e) - contract(p - e)) / (2 * h);
                for (int r = 0; r < 3; ++r) jac = std::max(jac, std::abs(j(r, c) - fd[r]) / std::max(1.0, std::abs(j(r, c))));
            }
        }
        double ipe = 0.0;
        std::normal_distribution<double> n;
        for (int i = 0; i < 200; ++i) {
            FrustumGaussian g;
            g.mu = Vec3(n(rng), n(rng), n(rng));
            const Eigen::VectorXd a = integrated_positional_encoding(g, EncodingConfig{8, EncodingKind::kIntegrated});
            const Eigen::VectorXd b = positional_encoding(g.mu, EncodingConfig{8, EncodingKind::kPlain});
            ipe = std::max(ipe, (a - b).cwiseAbs().maxCoeff());
        }
        append(detail, fmt("identity", identity));
        append(detail, fmt("max_norm", max_norm));
        append(detail, fmt("seam", seam));
        append(detail, fmt("jacobian_rel", jac));
        append(detail, fmt("ipe_vs_pe", ipe));
        return identity == 0.0 && max_norm < 2.0 && seam <= 1e-7 && jac < 1e-5 && ipe <= 1e-12;
    });
}

CheckResult check_volume_rendering() {
    return timed_check("volume-rendering", [](std::string& detail) {
        std::mt19937_64 rng(3);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        double oracle = 0.0, neutral = 0.0, weight_sum = 0.0;
        bool monotone = true;
        for (int trial = 0; trial < 1000; ++trial) {
            const int n = 1 + trial % 16;
            std::vector<SamplePoint> s(static_cast<std::size_t>(n));
            std::vector<double> d(s.size());
            double t = 0.1;
            for (std::size_t i = 0; i < s.size(); ++i) {
                t += u(rng);
                s[i] = SamplePoint{t, Vec3(u(rng), u(rng), u(rng)), 8.0 * u(rng),
                                   u(rng) < 0.5 ? SampleOrigin::kHuman : SampleOrigin::kScene};
                d[i] = 0.5 * u(rng);
            }
            const Vec3 bg(u(rng), u(rng), u(rng));
            const RenderOutput a = volume_render(s, d, bg);
            oracle = std::max(oracle, output_gap(a, scalar_composite(s, d, bg)));
            double total = 0.0;
            for (std::size_t i = 0; i < s.size(); ++i) {
                if (i > 0 && a.transmittance[i] > a.transmittance[i - 1]) monotone = false;
                total += a.weights[i];
            }
            weight_sum = std::max(weight_sum, total);
            // Empty samples spliced in anywhere leave the composite unchanged.
            std::vector<SamplePoint> s2;
            std::vector<double> d2;
            for (std::size_t i = 0; i < s.size(); ++i) {
                if (u(rng) < 0.5) {
                    s2.push_back(SamplePoint{s[i].t, Vec3(u(rng), u(rng), u(rng)), 0.0, SampleOrigin::kScene});
                    d2.push_back(u(rng));
                }
                s2.push_back(s[i]);
                d2.push_back(d[i]);
            }
            const RenderOutput b = volume_render(s2, d2, bg);
            neutral = std::max(neutral, std::max((a.color - b.color).cwiseAbs().maxCoeff(), std::abs(a.mask - b.mask)));
        }
        append(detail, fmt("oracle", oracle));
        append(detail, fmt("max_weight_sum", weight_sum));
        append(detail, std::string("monotone=") + (monotone ? "yes" : "no"));
        append(detail, fmt("neutrality", neutral));
        return oracle <= 1e-12 && weight_sum <= 1.0 && monotone && neutral <= 1e-12;
    });
}

CheckResult check_gradients() {
    return timed_check("gradients", [](std::string& detail) {
        SceneModel model = random_model(6, 20);
        const Camera cam = look_at(Vec3(0.0, 0.1, 1.0), Vec3(0, 0.1, 0), Vec3(0, 1, 0), 20.0, 2, 2);
        const std::vector<Ray> rays = camera_rays(cam);
        const std::vector<std::int64_t> ids = {0, 1, 2, 3};
        const SkeletonPose pose = model.config().rest;
        RenderOptions opts;
        opts.n_scene_samples = 3;
        opts.n_human_samples = 3;
        opts.far = 10.0;
        auto render = [&](ad::Tape& t, const RenderOptions& o) { return render_rays(t, model, rays, ids, pose, o); };
        std::mt19937_64 rng(21);
        ReferenceBundle ref = random_reference(2, 2, rng);
        ref.camera = cam;
        const ad::Tensor target = random_tensor(4, 3, rng, 0.0, 1.0);
        const ad::Tensor mask = (ad::Tensor(4, 1) << 1, 0, 1, 1).finished();
        const MockConvProvider provider(5, {{8, 3, 1}});
        Image style(2, 2, 3);
        style.pixels = random_tensor(4, 3, rng, 0.0, 1.0);
        const ad::Tensor style_f = provider.extract(style);
        auto& params = model.params();

        double worst = 0.0;
        auto record = [&](const char* name, double e) {
            append(detail, fmt(name, e));
            worst = std::max(worst, e);
        };
        record("rec", gradient_error(params, [&](ad::Tape& t) {
                   return rec_loss(t, split_render(render(t, opts).out), ref, LossWeights{5.0, 0.5, 1.0, 1.0, 0.5}).total;
               }));
        record("photometric", gradient_error(params, [&](ad::Tape& t) {
                   return photometric_loss(ad::slice_cols(render(t, opts).out, 0, 3), target, &mask);
               }));
        record("nnfm", gradient_error(params, [&](ad::Tape& t) {
                   const FeatureMap f = provider.extract(t, ad::slice_cols(render(t, opts).out, 0, 3), 2, 2);
                   return nnfm_loss(f.data, style_f, 1.0);
               }));
        record("feature_l2", gradient_error(params, [&](ad::Tape& t) {
                   const FeatureMap f = provider.extract(t, ad::slice_cols(render(t, opts).out, 0, 3), 2, 2);
                   return feature_l2_loss(f.data, style_f);
               }));
        RenderOptions scene_only = opts;
        scene_only.render_human = false;
        scene_only.scene_weights = true;
        record("distortion", gradient_error(params, [&](ad::Tape& t) {
                   const RayBatch b = render(t, scene_only);
                   return distortion_loss(b.scene_weights, b.scene_s_mid, b.scene_s_width);
               }));

        // SDS has no scalar loss; its taped gradient must equal the derivative of
        // the surrogate <seed, image> with the seed held fixed.
        RenderOptions fg = opts;
        fg.render_scene = false;
        fg.background = Vec3::Constant(0.5);
        auto color = [&](ad::Tape& t) { return ad::slice_cols(render(t, fg).out, 0, 3); };
        const AvgPoolCodec codec(2);
        const GaussianPrior text = GaussianPrior::solid(Vec3(0.9, 0.1, 0.2), ConditioningKind::kText);
        const GaussianPrior view = GaussianPrior::solid(Vec3(0.9, 0.1, 0.2), ConditioningKind::kView);
        Image ref_img(2, 2, 3);
        for (int path = 0; path < 2; ++path) {
            ad::Tape t;
            SdsContext ctx{color(t), 2, 2, path == 0 ? &text : &view, &codec, {}, 1.0, 3};
            Conditioning c;
            c.kind = path == 0 ? ConditioningKind::kText : ConditioningKind::kView;
            c.reference = &ref_img;
            const ad::Tensor seed = sds_seed(ctx, c).image_grad;
            record(path == 0 ? "sds_2d" : "sds_3d", gradient_error(params, color, &seed));
        }
        return worst < 1e-4;
    });
}

CheckResult check_nnfm_and_depth() {
    return timed_check("nnfm-and-depth", [](std::string& detail) {
        std::mt19937_64 rng(8);
        std::uniform_int_distribution<int> side(1, 16);
        double nnfm = 0.0;
        for (int trial = 0; trial < 40; ++trial) {
            const int c = 1 + trial % 32;
            const int h = trial == 0 ? 16 : side(rng);
            const int w = trial == 0 ? 16 : side(rng);
            const ad::Tensor f = random_tensor(static_cast<Eigen::Index>(h) * w, trial == 0 ? 32 : c, rng, -1.0, 1.0);
            const ad::Tensor s = random_tensor(static_cast<Eigen::Index>(side(rng)) * side(rng), f.cols(), rng, -1.0, 1.0);
            nnfm = std::max(nnfm, std::abs(nnfm_loss(f, s, 0.7) - nnfm_oracle(f, s, 0.7)));
        }
        double affine = 0.0;
        bool anti_exact = true;
        for (int trial = 0; trial < 20; ++trial) {
            const ReferenceBundle ref = random_reference(5, 4, rng);
            const ad::Tensor color = random_tensor(20, 3, rng, 0.0, 1.0);
            const ad::Tensor mask = random_tensor(20, 1, rng, 0.0, 1.0);
            const ad::Tensor depth = random_tensor(20, 1, rng, 0.5, 4.0);
            const LossWeights lw{5.0, 0.5, 0.01 * (trial + 1), 1.0, 0.5};
            const double base = rec_value(color, mask, depth, ref, lw);
            for (double a : {0.01, 0.5, 7.0, 1e3}) {
                for (double b : {-5.0, 0.0, 2.0}) {
                    affine = std::max(affine, std::abs(rec_value(color, mask, (a * depth.array() + b).matrix(), ref, lw) - base));
                }
            }
            const ad::Tensor anti = -ref.depth.pixels;
            if (rec_value(ref.image.pixels, ref.mask.pixels, anti, ref, lw) != lw.depth) anti_exact = false;
        }
        append(detail, fmt("nnfm", nnfm));
        append(detail, fmt("affine", affine));
        append(detail, std::string("anti_correlation_exact=") + (anti_exact ? "yes" : "no"));
        return nnfm <= 1e-12 && affine <= 1e-9 && anti_exact;
    });
}

CheckResult check_sds() {
    return timed_check("sds", [](std::string& detail) {
        SceneModel model = random_model(6, 6);
        const Camera cam = look_at(Vec3(0.0, 0.1, 1.0), Vec3(0, 0.1, 0), Vec3(0, 1, 0), 30.0, 4, 4);
        const std::vector<Ray> rays = camera_rays(cam);
        std::vector<std::int64_t> ids(rays.size());
        for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::int64_t>(i);
        RenderOptions opts;
        opts.n_scene_samples = 3;
        opts.n_human_samples = 3;
        opts.far = 10.0;
        auto color = [&](ad::Tape& t) {
            return ad::slice_cols(render_rays(t, model, rays, ids, model.config().rest, opts).out, 0, 3);
        };
        ad::Tape probe(ad::GradMode::kNoGrad);
        const ad::Tensor current = color(probe).value();
        const IdentityCodec identity;
        const AvgPoolCodec pool(2);
        double null_grad = 0.0;
        for (const LatentCodec* codec : {static_cast<const LatentCodec*>(&identity), static_cast<const LatentCodec*>(&pool)}) {
            const GaussianPrior text(codec->encode(current, 4, 4), ConditioningKind::kText);
            const GaussianPrior view(codec->encode(current, 4, 4), ConditioningKind::kView);
            Image ref(4, 4, 3);
            for (std::uint64_t seed = 0; seed < 20; ++seed) {
                {
                    ad::Tape t;
                    SdsContext ctx{color(t), 4, 4, &text, codec, {}, 100.0, seed};
                    for (double g : sds_step_2d(ctx, "a person")) null_grad = std::max(null_grad, std::abs(g));
                }
                {
                    ad::Tape t;
                    SdsContext ctx{color(t), 4, 4, &view, codec, {}, 100.0, seed};
                    for (double g : sds_step_3d(ctx, ref, Mat3::Identity(), Vec3::Zero())) {
                        null_grad = std::max(null_grad, std::abs(g));
                    }
                }
            }
        }

        // Plain gradient descent on an 8x8 image held as parameters.
        ad::ParameterSet params;
        params.add_block("image", 64, 3);
        std::mt19937_64 rng(4);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (double& v : params.values()) v = u(rng);
        const Vec3 mean(0.7, 0.2, 0.4);
        const GaussianPrior prior = GaussianPrior::solid(mean, ConditioningKind::kText);
        for (int step = 0; step < 500; ++step) {
            ad::Tape t;
            SdsContext ctx{t.parameter(params, 0), 8, 8, &prior, &identity, {}, 1.0, static_cast<std::uint64_t>(step)};
            const auto g = sds_step_2d(ctx, "x");
            for (std::size_t i = 0; i < g.size(); ++i) params.values()[i] -= g[i];
        }
        double dist = 0.0;
        const ad::Tensor& img = params.block_values(0);
        for (Eigen::Index i = 0; i < img.rows(); ++i) dist = std::max(dist, (img.row(i).transpose() - mean).norm());
        append(detail, fmt("perfect_denoiser_grad", null_grad));
        append(detail, fmt("descent_distance", dist));
        return null_grad <= 1e-12 && dist <= 0.05;
    });
}

CheckResult check_deformation() {
    return timed_check("deformation", [](std::string& detail) {
        SceneModel model(small_model(8), 1);
        const SkeletonPose rest = model.config().rest;
        std::mt19937_64 rng(2);
        std::uniform_real_distribution<double> u(-0.5, 0.5);
        double identity = 0.0;
        for (int i = 0; i < 500; ++i) {
            const Vec3 x(u(rng), u(rng), u(rng));
            identity = std::max(identity, (model.deformation().deform(model.params(), x, rest) - x).norm());
        }

        // One bone rotated rigidly: every posed point maps back by the inverse rotation.
        const SkeletonPose bone = single_bone_rig(0.3);
        const DeformationField field(bone, SkinningConfig{}, NonrigidConfig{});
        double rigid = 0.0;
        for (int i = 0; i < 200; ++i) {
            const Vec3 aa = 1.5 * Vec3(u(rng), u(rng), u(rng));
            const Vec3 shift(u(rng), u(rng), u(rng));
            const SkeletonPose posed = pose_from_rotations(bone, {aa}, shift);
            const Vec3 x_d(u(rng), u(rng), u(rng));
            const Vec3 expect = axis_angle_to_matrix(aa).transpose() * (x_d - shift);
            rigid = std::max(rigid, (field.coarse_deform(x_d, posed) - expect).norm());
        }

        const auto& def = model.deformation();
        std::vector<Vec3> rots(4, Vec3::Zero());
        rots[1] = Vec3(0.4, 0, 0);
        rots[2] = Vec3(0, 0, -1.2);
        const SkeletonPose bent = pose_from_rotations(rest, rots);
        const PosedSkeleton ps = def.prepare(bent);
        double norm = 0.0;
        double negative = 0.0;
        for (int i = 0; i < 2000; ++i) {
            const Eigen::VectorXd w = def.posed_weights(ps, 4.0 * Vec3(u(rng), u(rng), u(rng)));
            norm = std::max(norm, std::abs(w.sum() - 1.0));
            negative = std::min(negative, w.minCoeff());
        }

        const Aabb box = model.config().canonical_box;
        const CameraSphere sphere = camera_sphere(RunConfig{}, box);
        bool constraint = true;
        for (const char* arm : {"left arm", "right arm"}) {
            try {
                sample_zoom_camera(zoom_region(arm), ViewBucket::kFront, bent, rest, box, sphere, "p", rng);
                constraint = false;
            } catch (const ConstraintError&) {
            }
            sample_zoom_camera(zoom_region(arm), ViewBucket::kFront, rest, rest, box, sphere, "p", rng);
        }
        append(detail, fmt("rest_identity", identity));
        append(detail, fmt("single_bone", rigid));
        append(detail, fmt("weight_sum", norm));
        append(detail, fmt("min_weight", negative));
        append(detail, std::string("arm_constraint=") + (constraint ? "enforced" : "missing"));
        return identity <= 1e-9 && rigid <= 1e-6 && norm <= 1e-6 && negative >= 0.0 && constraint;
    });
}

CheckResult check_deferred() {
    return timed_check("deferred", [](std::string& detail) {
        SceneModel model = random_model(8, 11);
        const Camera cam = look_at(Vec3(0.1, 0.1, 1.0), Vec3(0, 0.1, 0), Vec3(0, 1, 0), 45.0, 8, 8);
        std::vector<Vec3> rots(4, Vec3::Zero());
        rots[2] = Vec3(0, 0, -0.6);
        const SkeletonPose pose = pose_from_rotations(model.config().rest, rots);
        RenderOptions opts;
        opts.n_scene_samples = 6;
        opts.n_human_samples = 5;
        opts.far = 20.0;
        std::mt19937_64 rng(12);
        std::normal_distribution<double> n;
        ad::Tensor lg(64, kRenderColumns);
        for (Eigen::Index i = 0; i < lg.size(); ++i) lg.data()[i] = n(rng);
        const auto mono = render_image_monolithic(model, cam, pose, opts, lg);
        double worst = 0.0;
        for (int chunk : {1, 3, 7, 16, 64}) {
            const auto g = render_image_deferred(model, cam, pose, opts, chunk, lg);
            for (std::size_t i = 0; i < mono.size(); ++i) worst = std::max(worst, std::abs(g[i] - mono[i]));
        }
        double scale = 0.0;
        for (double v : mono) scale = std::max(scale, std::abs(v));
        append(detail, fmt("max_abs_diff", worst));
        append(detail, fmt("grad_scale", scale));
        return worst <= 1e-10 && scale > 0.0;
    });
}

std::vector<CheckResult> run_invariant_checks() {
    return {check_geometry(), check_volume_rendering(), check_gradients(), check_nnfm_and_depth(),
            check_sds(),      check_deformation(),      check_deferred()};
}

}  // namespace dvne
