#include "dvne/training.hpp"

#include "dvne/errors.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <numbers>

namespace dvne {

namespace fs = std::filesystem;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

void check_finite(double loss, int step, const std::string& branch, const std::map<std::string, double>& terms) {
    if (std::isfinite(loss)) return;
    std::string detail;
    for (const auto& [k, v] : terms) detail += " " + k + "=" + std::to_string(v);
    throw NumericalError("non-finite loss at step " + std::to_string(step) + " (branch " + branch + "):" + detail);
}

void check_finite(std::span<const double> grad, int step, const std::string& branch) {
    for (double g : grad) {
        if (!std::isfinite(g)) {
            throw NumericalError("non-finite gradient at step " + std::to_string(step) + " (branch " + branch + ")");
        }
    }
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void after_step(const StageHooks& hooks, const StepRecord& rec, const SceneModel& model) {
    if (hooks.metrics != nullptr) hooks.metrics->write(rec);
    if (hooks.log_every > 0 && rec.step % hooks.log_every == 0) {
        spdlog::info("step {} branch={} loss={:.6g}{}", rec.step, rec.branch, rec.loss,
                     rec.region.empty() ? "" : " region=" + rec.region);
    }
    if (hooks.on_step) hooks.on_step(rec.step, model);
}

ad::Tensor image_rows(const Image& img, const std::vector<std::int64_t>& pixels) {
    ad::Tensor out(static_cast<Eigen::Index>(pixels.size()), img.channels());
    for (std::size_t i = 0; i < pixels.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = img.pixels.row(pixels[i]);
    return out;
}

}  // namespace

// ---- randomness ------------------------------------------------------------------------

std::uint64_t stream_seed(std::uint64_t seed, std::string_view name) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return splitmix(seed ^ splitmix(h));
}

RngStreams::RngStreams(std::uint64_t seed)
    : branch(stream_seed(seed, "branch")),
      camera(stream_seed(seed, "camera")),
      noise(stream_seed(seed, "noise")),
      stratification(stream_seed(seed, "stratification")) {}

// ---- optimizer ---------------------------------------------------------------------------

AdamConfig adam_config(const RunConfig& config) {
    const auto& o = config.optimizer;
    return AdamConfig{o.lr, o.warmup, o.beta1, o.beta2, o.eps};
}

Adam::Adam(std::size_t size, AdamConfig config)
    : config_(config), m_(size, 0.0), v_(size, 0.0), trainable_(size, 1) {}

void Adam::set_trainable(std::size_t begin, std::size_t end, bool trainable) {
    if (begin > end || end > trainable_.size()) throw InvalidArgument("trainable range out of bounds");
    std::fill(trainable_.begin() + static_cast<std::ptrdiff_t>(begin), trainable_.begin() + static_cast<std::ptrdiff_t>(end),
              trainable ? 1 : 0);
}

void Adam::freeze_all_except(const SceneModel& model, std::initializer_list<ParamGroup> groups) {
    set_trainable(0, trainable_.size(), false);
    for (ParamGroup g : groups) {
        const auto [b, e] = model.group_range(g);
        set_trainable(b, e, true);
    }
}

double Adam::learning_rate() const {
    if (config_.warmup <= 0) return config_.lr;
    return config_.lr * std::min(1.0, static_cast<double>(t_ + 1) / config_.warmup);
}

void Adam::step(std::span<double> values, std::span<const double> grad) {
    if (values.size() != m_.size() || grad.size() != m_.size()) throw ShapeMismatch("optimizer size mismatch");
    const double lr = learning_rate();
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!trainable_[i]) continue;
        m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * grad[i];
        v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * grad[i] * grad[i];
        values[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + config_.eps);
    }
}

// ---- branches and cameras -------------------------------------------------------------

std::string branch_name(BranchKind kind) {
    switch (kind) {
        case BranchKind::kRefRecon: return "REF_RECON";
        case BranchKind::kRandomViewRefPose: return "RANDOM_VIEW_REF_POSE";
        case BranchKind::kRandomViewFramePose: return "RANDOM_VIEW_FRAME_POSE";
    }
    return "?";
}

std::vector<TrainingBranch> make_branches(const std::vector<double>& p) {
    if (p.size() != 3) throw InvalidArgument("expected three branch probabilities");
    double total = 0.0;
    for (double x : p) {
        if (!(x >= 0.0 && x <= 1.0)) throw InvalidArgument("branch probabilities must lie in [0, 1]");
        total += x;
    }
    if (std::abs(total - 1.0) > 1e-9) throw InvalidArgument("branch probabilities must sum to 1");
    return {{BranchKind::kRefRecon, p[0]}, {BranchKind::kRandomViewRefPose, p[1]}, {BranchKind::kRandomViewFramePose, p[2]}};
}

CameraSphere camera_sphere(const RunConfig& config, const Aabb& box) {
    CameraSphere s;
    s.target = 0.5 * (box.lo + box.hi);
    s.elevation_min = config.stage2.elevation_min;
    s.elevation_max = config.stage2.elevation_max;
    s.fov = config.render.fov;
    s.width = config.render.width;
    s.height = config.render.height;
    if (config.stage2.camera_radius > 0.0) {
        s.radius = config.stage2.camera_radius;
    } else {
        // Bounding sphere of the box inside the narrower half-angle, with a small margin.
        const double half = 0.5 * (box.hi - box.lo).norm();
        const double aspect = static_cast<double>(s.width) / s.height;
        const double half_v = 0.5 * s.fov * kDeg;
        const double half_h = std::atan(std::tan(half_v) * aspect);
        s.radius = 1.05 * half / std::sin(std::min(half_v, half_h));
    }
    return s;
}

Camera sphere_camera(const CameraSphere& s, double az, double el, double distance_scale, const Vec3* target) {
    const Vec3 center = target != nullptr ? *target : s.target;
    const double r = s.radius * distance_scale;
    const Vec3 eye = center + r * Vec3(std::sin(az * kDeg) * std::cos(el * kDeg), std::sin(el * kDeg),
                                       std::cos(az * kDeg) * std::cos(el * kDeg));
    return look_at(eye, center, Vec3::UnitY(), s.fov, s.width, s.height);
}

Camera random_camera(const CameraSphere& s, std::mt19937_64& rng, double* azimuth_deg) {
    const double az = uniform(rng, 0.0, 360.0);
    const double el = uniform(rng, s.elevation_min, s.elevation_max);
    if (azimuth_deg != nullptr) *azimuth_deg = az;
    return sphere_camera(s, az, el);
}

BranchKind draw_branch_kind(const std::vector<TrainingBranch>& branches, std::mt19937_64& rng) {
    if (branches.empty()) throw InvalidArgument("no training branches configured");
    const double u = uniform(rng, 0.0, 1.0);
    double acc = 0.0;
    for (const TrainingBranch& b : branches) {
        acc += b.probability;
        if (u < acc && b.probability > 0.0) return b.kind;
    }
    // Round-off at the top end: last branch with mass.
    for (auto it = branches.rbegin(); it != branches.rend(); ++it) {
        if (it->probability > 0.0) return it->kind;
    }
    throw InvalidArgument("all branch probabilities are zero");
}

BranchDraw sample_branch(const std::vector<TrainingBranch>& branches, const CameraSphere& sphere,
                         const Camera& reference_camera, const SkeletonPose& reference_pose,
                         const std::vector<SkeletonPose>& frame_poses, std::mt19937_64& branch_rng,
                         std::mt19937_64& camera_rng) {
    if (frame_poses.empty()) throw InvalidArgument("empty pose sequence");
    BranchDraw d;
    d.kind = draw_branch_kind(branches, branch_rng);
    switch (d.kind) {
        case BranchKind::kRefRecon:
            d.camera = reference_camera;
            d.pose = reference_pose;
            break;
        case BranchKind::kRandomViewRefPose:
            d.camera = random_camera(sphere, camera_rng, &d.azimuth);
            d.pose = reference_pose;
            break;
        case BranchKind::kRandomViewFramePose:
            d.camera = random_camera(sphere, camera_rng, &d.azimuth);
            d.frame = static_cast<int>(uniform_index(camera_rng, frame_poses.size()));
            d.pose = frame_poses[static_cast<std::size_t>(d.frame)];
            break;
    }
    return d;
}

// ---- zoom-in regions ----------------------------------------------------------------

const std::vector<ZoomRegion>& zoom_regions() {
    static const std::vector<ZoomRegion> regions = {
        {"full body", Vec3(0.5, 0.5, 0.5), 1.0, false},
        {"head", Vec3(0.5, 0.88, 0.5), 0.35, false},
        {"upper body", Vec3(0.5, 0.68, 0.5), 0.55, false},
        {"midsection", Vec3(0.5, 0.45, 0.5), 0.45, false},
        {"lower body", Vec3(0.5, 0.2, 0.5), 0.55, false},
        {"left arm", Vec3(0.82, 0.72, 0.5), 0.45, true},
        {"right arm", Vec3(0.18, 0.72, 0.5), 0.45, true},
    };
    return regions;
}

const ZoomRegion& zoom_region(const std::string& name) {
    for (const ZoomRegion& r : zoom_regions()) {
        if (r.name == name) return r;
    }
    throw InvalidArgument("unknown zoom region '" + name + "'");
}

Vec3 zoom_anchor(const ZoomRegion& region, const Aabb& box, const SkeletonPose& rest, const SkeletonPose& pose) {
    const Vec3 canonical = box.lo + region.anchor_fraction.cwiseProduct(box.hi - box.lo);
    if (pose.is_t_pose() && (pose.joints.empty() || pose.joints[0] == rest.joints[0])) return canonical;
    // Nearest joint segment in rest space carries the anchor rigidly.
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < rest.size(); ++j) {
        const Vec3 a = rest.joints[j];
        Vec3 b = a;
        if (!rest.tips.empty() && rest.tips[j].squaredNorm() > 0.0) b = a + rest.tips[j];
        for (std::size_t c = 0; c < rest.size(); ++c) {
            if (rest.parents[c] == static_cast<int>(j)) b = rest.joints[c];
        }
        const Vec3 ab = b - a;
        const double h = ab.squaredNorm() > 0.0 ? std::clamp((canonical - a).dot(ab) / ab.squaredNorm(), 0.0, 1.0) : 0.0;
        const double d = (canonical - a - h * ab).norm();
        if (d < best_d) {
            best_d = d;
            best = j;
        }
    }
    return joint_transforms(rest, pose)[best].apply(canonical);
}

std::string compose_prompt(const std::string& base, const std::string& region, ViewBucket view) {
    return base + ", " + region + ", " + view_suffix(view);
}

ZoomDraw sample_zoom_camera(const ZoomRegion& region, ViewBucket view, const SkeletonPose& pose,
                            const SkeletonPose& rest, const Aabb& box, const CameraSphere& sphere,
                            const std::string& base_prompt, std::mt19937_64& rng) {
    if (region.arm && !pose.is_t_pose()) {
        throw ConstraintError("zoom region '" + region.name + "' is only available under the T-pose");
    }
    double az = 0.0;
    switch (view) {
        case ViewBucket::kFront: az = uniform(rng, -59.0, 59.0); break;
        case ViewBucket::kSide: az = (uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0) * uniform(rng, 61.0, 119.0); break;
        case ViewBucket::kBack: az = 180.0 + uniform(rng, -59.0, 59.0); break;
    }
    const double el = uniform(rng, sphere.elevation_min, sphere.elevation_max);
    ZoomDraw z;
    z.anchor = zoom_anchor(region, box, rest, pose);
    z.camera = sphere_camera(sphere, az, el, region.distance_scale, &z.anchor);
    z.prompt = compose_prompt(base_prompt, region.name, view);
    z.azimuth = az;
    return z;
}

void relative_camera(const Camera& reference, const Camera& camera, Mat3& rotation, Vec3& translation) {
    const Mat3 r_ref = reference.camera_to_world.block<3, 3>(0, 0);
    const Mat3 r_cam = camera.camera_to_world.block<3, 3>(0, 0);
    rotation = r_cam * r_ref.transpose();
    translation = camera.center() - rotation * reference.center();
}

// ---- metrics ----------------------------------------------------------------------------

const std::vector<std::string>& MetricsWriter::term_columns() {
    static const std::vector<std::string> cols = {"photometric", "feature_l2", "distortion", "rgb",  "mask",
                                                  "depth",       "sds_2d",     "sds_3d",     "nnfm", "style_l2"};
    return cols;
}

MetricsWriter::MetricsWriter(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
    out_.open(path, std::ios::app);
    if (!out_) throw IoError("cannot open metrics file " + path.string());
    if (fresh) {
        out_ << kSchema << "\nstep,branch,region,loss";
        for (const auto& c : term_columns()) out_ << ',' << c;
        out_ << ",wall_time\n";
        out_.flush();
    }
}

void MetricsWriter::write(const StepRecord& r) {
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    out_ << r.step << ',' << r.branch << ',' << '"' << r.region << '"' << ',' << num(r.loss);
    for (const auto& c : term_columns()) {
        out_ << ',';
        const auto it = r.terms.find(c);
        if (it != r.terms.end()) out_ << num(it->second);
    }
    out_ << ',' << num(r.wall_seconds) << '\n';
    out_.flush();
}

// ---- shared helpers --------------------------------------------------------------------

RenderOptions render_options(const RunConfig& config) {
    RenderOptions o;
    o.n_scene_samples = config.render.n_scene_samples;
    o.n_human_samples = config.render.n_human_samples;
    o.near = config.render.near;
    o.far = config.render.far;
    return o;
}

SceneModel initial_model(const RunConfig& config, const SkeletonPose& rest) {
    return SceneModel(model_config(config, rest), stream_seed(config.seed, "init"));
}

bool is_held_out(int frame, std::int64_t pixel, int every) {
    if (every <= 0) return false;
    const std::uint64_t h = splitmix((static_cast<std::uint64_t>(frame) << 32) ^ static_cast<std::uint64_t>(pixel));
    return h % static_cast<std::uint64_t>(every) == 0;
}

// ---- stage 1 -----------------------------------------------------------------------------

std::vector<int> evaluation_frames(const Dataset& data, int count) {
    std::vector<int> frames;
    const int n = static_cast<int>(data.size());
    count = std::min(count, n);
    for (int i = 0; i < count; ++i) frames.push_back(static_cast<int>((static_cast<long>(i) * n) / count));
    return frames;
}

double evaluate_photometric(const SceneModel& model, const Dataset& data, const RenderOptions& options,
                            const std::vector<int>& frames, int holdout_every, bool held_out) {
    double sum = 0.0;
    double count = 0.0;
    for (int f : frames) {
        const auto fi = static_cast<std::size_t>(f);
        const RenderedImage r = render_image(model, data.cameras[fi], data.poses[fi], options);
        const Image& target = data.frames[fi];
        for (Eigen::Index i = 0; i < target.pixels.rows(); ++i) {
            if (is_held_out(f, i, holdout_every) != held_out) continue;
            sum += (r.color.pixels.row(i) - target.pixels.row(i)).squaredNorm();
            count += 3.0;
        }
    }
    if (count == 0.0) throw InvalidArgument("no pixels to evaluate");
    return sum / count;
}

SceneModel stage1_reconstruct(const Dataset& data, const RunConfig& config, Stage1Report* report,
                              const StageHooks& hooks, const SceneModel* init) {
    config.validate();
    if (data.size() < 2) throw IngestionError("reconstruction needs at least two frames");
    if (data.cameras.size() != data.size() || data.poses.size() != data.size()) {
        throw IngestionError("frame " + frame_name(static_cast<int>(std::min(data.cameras.size(), data.poses.size()))) +
                             ": missing camera or pose record");
    }
    const auto& s1 = config.stage1;
    for (std::size_t f = 0; f < data.size(); ++f) {
        if (data.frames[f].width < s1.patch_size || data.frames[f].height < s1.patch_size) {
            throw InvalidArgument("frame " + frame_name(static_cast<int>(f)) + " is smaller than one patch");
        }
    }
    SceneModel model = init != nullptr ? *init : initial_model(config, data.rest);
    Adam adam(model.params().size(), adam_config(config));
    RngStreams rng(config.seed);
    const MockConvProvider provider;
    const RenderOptions base = render_options(config);
    const std::vector<int> eval_frames = evaluation_frames(data);
    if (report != nullptr) {
        *report = Stage1Report{};
        report->initial_heldin = evaluate_photometric(model, data, base, eval_frames, s1.holdout_every, false);
    }
    const int p = s1.patch_size;
    const auto t0 = Clock::now();
    for (int step = 1; step <= s1.steps; ++step) {
        const int f = static_cast<int>(uniform_index(rng.camera, data.size()));
        const auto fi = static_cast<std::size_t>(f);
        const Image& frame = data.frames[fi];
        const Camera& cam = data.cameras[fi];
        std::vector<Ray> rays;
        std::vector<std::int64_t> ids;
        std::vector<std::int64_t> pixels;
        for (int k = 0; k < s1.patches; ++k) {
            const int x0 = static_cast<int>(uniform_index(rng.camera, static_cast<std::size_t>(frame.width - p + 1)));
            const int y0 = static_cast<int>(uniform_index(rng.camera, static_cast<std::size_t>(frame.height - p + 1)));
            for (int y = y0; y < y0 + p; ++y) {
                for (int x = x0; x < x0 + p; ++x) {
                    const std::int64_t px = frame.index(x, y);
                    rays.push_back(cam.pixel_ray(x, y));
                    pixels.push_back(px);
                    ids.push_back(static_cast<std::int64_t>(f) * frame.width * frame.height + px);
                }
            }
        }
        const auto n = static_cast<Eigen::Index>(rays.size());
        ad::Tensor keep(n, 1);
        for (Eigen::Index i = 0; i < n; ++i) keep(i, 0) = is_held_out(f, pixels[static_cast<std::size_t>(i)], s1.holdout_every) ? 0.0 : 1.0;
        const ad::Tensor target = image_rows(frame, pixels);

        RenderOptions opts = base;
        opts.stratified = true;
        opts.stratified_seed = rng.stratification();
        opts.scene_weights = s1.distortion > 0.0;
        ad::Tape tape;
        const RayBatch batch = render_rays(tape, model, rays, ids, data.poses[fi], opts);
        const ad::Var color = ad::slice_cols(batch.out, 0, 3);
        StepRecord rec;
        rec.step = step;
        rec.branch = "RECONSTRUCT";
        ad::Var total = photometric_loss(color, target, &keep);
        rec.terms["photometric"] = total.scalar();
        if (s1.feature_l2 > 0.0) {
            // Held-out pixels are zeroed in both images so they carry no signal.
            const ad::Tensor keep3 = keep.replicate(1, 3);
            const ad::Var masked = ad::mul(color, tape.constant(keep3));
            const ad::Tensor masked_target = target.cwiseProduct(keep3);
            ad::Var feat_sum;
            for (int k = 0; k < s1.patches; ++k) {
                std::vector<std::int64_t> rows(static_cast<std::size_t>(p * p));
                for (int i = 0; i < p * p; ++i) rows[static_cast<std::size_t>(i)] = k * p * p + i;
                const ad::Var patch = ad::gather_rows(masked, rows);
                Image tgt(p, p, 3);
                for (int i = 0; i < p * p; ++i) tgt.pixels.row(i) = masked_target.row(k * p * p + i);
                const FeatureMap fm = provider.extract(tape, patch, p, p);
                const ad::Var l = feature_l2_loss(fm.data, provider.extract(tgt));
                feat_sum = feat_sum.valid() ? feat_sum + l : l;
            }
            const ad::Var feat = feat_sum * (1.0 / s1.patches);
            rec.terms["feature_l2"] = feat.scalar();
            total = total + s1.feature_l2 * feat;
        }
        if (s1.distortion > 0.0 && batch.scene_weights.valid()) {
            const ad::Var dist = distortion_loss(batch.scene_weights, batch.scene_s_mid, batch.scene_s_width);
            rec.terms["distortion"] = dist.scalar();
            total = total + s1.distortion * dist;
        }
        rec.loss = total.scalar();
        check_finite(rec.loss, step, rec.branch, rec.terms);
        const std::vector<double> grad = tape.backward(total);
        check_finite(grad, step, rec.branch);
        adam.step(model.params().values(), grad);
        rec.wall_seconds = seconds_since(t0);
        if (report != nullptr) {
            report->losses.push_back(rec.loss);
            report->photometric.push_back(rec.terms["photometric"]);
        }
        after_step(hooks, rec, model);
    }
    if (report != nullptr) {
        report->final_heldin = evaluate_photometric(model, data, base, eval_frames, s1.holdout_every, false);
        report->final_heldout = s1.holdout_every > 0
                                    ? evaluate_photometric(model, data, base, eval_frames, s1.holdout_every, true)
                                    : report->final_heldin;
    }
    return model;
}

// ---- stage 2 -----------------------------------------------------------------------------

double reference_view_error(const SceneModel& model, const ReferenceBundle& ref, const RenderOptions& options) {
    const RenderedImage r = render_image(model, ref.camera, ref.pose, options);
    double sum = 0.0;
    double count = 0.0;
    for (Eigen::Index i = 0; i < ref.image.pixels.rows(); ++i) {
        if (ref.mask.pixels(i, 0) == 0.0) continue;
        sum += (r.color.pixels.row(i) - ref.image.pixels.row(i)).squaredNorm();
        count += 3.0;
    }
    if (count == 0.0) throw InvalidArgument("reference mask is empty");
    return sum / count;
}

SceneModel stage2_edit_foreground(SceneModel model, const Stage2Inputs& in, const RunConfig& config,
                                  Stage2Report* report, const StageHooks& hooks) {
    config.validate();
    if (in.reference == nullptr) throw InvalidArgument("foreground editing needs a reference bundle");
    const ReferenceBundle& ref = *in.reference;
    ref.validate();
    const auto& s2 = config.stage2;
    const auto branches = make_branches(s2.branch_probabilities);
    const bool needs_sds = s2.branch_probabilities[1] > 0.0 || s2.branch_probabilities[2] > 0.0;
    if (needs_sds && (in.prior_2d == nullptr || in.codec == nullptr)) {
        throw InvalidArgument("SDS branches need a text-conditioned prior and a codec");
    }
    if (s2.branch_probabilities[1] > 0.0 && s2.lambda_3d > 0.0 && in.prior_3d == nullptr) {
        throw InvalidArgument("RANDOM_VIEW_REF_POSE needs a view-conditioned prior");
    }
    std::vector<SkeletonPose> frames = in.frame_poses;
    if (frames.empty()) frames.push_back(ref.pose);
    const Aabb box = model.config().canonical_box;
    const SkeletonPose& rest = model.config().rest;
    const CameraSphere sphere = camera_sphere(config, box);
    const NoiseSchedule schedule{config.guidance.t_min, config.guidance.t_max, config.guidance.schedule_offset};
    const LossWeights weights{s2.rgb, s2.mask, s2.depth, 1.0, 0.5};
    Adam adam(model.params().size(), adam_config(config));
    adam.freeze_all_except(model, {ParamGroup::kHuman});
    RngStreams rng(config.seed);
    RenderOptions base = render_options(config);
    base.train_scene = false;
    base.train_nonrigid = false;
    if (report != nullptr) *report = Stage2Report{};
    const auto t0 = Clock::now();
    for (int step = 1; step <= s2.steps; ++step) {
        BranchDraw draw = sample_branch(branches, sphere, ref.camera, ref.pose, frames, rng.branch, rng.camera);
        StepRecord rec;
        rec.step = step;
        rec.branch = branch_name(draw.kind);
        RenderOptions opts = base;
        opts.stratified = true;
        opts.stratified_seed = rng.stratification();
        ad::Tape tape;
        std::vector<double> grad;
        if (draw.kind == BranchKind::kRefRecon) {
            opts.render_scene = false;
            const std::vector<Ray> rays = camera_rays(ref.camera);
            std::vector<std::int64_t> ids(rays.size());
            for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::int64_t>(i);
            const RayBatch batch = render_rays(tape, model, rays, ids, ref.pose, opts);
            const RecLoss rl = rec_loss(tape, split_render(batch.out), ref, weights);
            rec.terms["rgb"] = rl.rgb;
            rec.terms["mask"] = rl.mask;
            if (!rl.depth_skipped) rec.terms["depth"] = rl.depth;
            rec.loss = rl.total.scalar();
            check_finite(rec.loss, step, rec.branch, rec.terms);
            grad = tape.backward(rl.total);
        } else {
            std::string prompt;
            const ViewBucket full_view = view_bucket(draw.azimuth > 180.0 ? draw.azimuth - 360.0 : draw.azimuth);
            if (uniform(rng.camera, 0.0, 1.0) < s2.zoom_probability) {
                std::vector<const ZoomRegion*> pool;
                for (const ZoomRegion& r : zoom_regions()) {
                    if (!r.arm || draw.pose.is_t_pose()) pool.push_back(&r);
                }
                const ZoomRegion& region = *pool[uniform_index(rng.camera, pool.size())];
                ZoomDraw z = sample_zoom_camera(region, full_view, draw.pose, rest, box, sphere, s2.prompt, rng.camera);
                draw.camera = z.camera;
                prompt = z.prompt;
                rec.region = region.name;
            } else {
                prompt = s2.prompt + ", " + view_suffix(full_view);
            }
            if (s2.random_gray_background) {
                opts.render_scene = false;
                opts.background = Vec3::Constant(uniform(rng.noise, 0.0, 1.0));
            }
            const std::vector<Ray> rays = camera_rays(draw.camera);
            std::vector<std::int64_t> ids(rays.size());
            for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::int64_t>(i);
            const RayBatch batch = render_rays(tape, model, rays, ids, draw.pose, opts);
            const ad::Var image = ad::slice_cols(batch.out, 0, 3);
            SdsContext ctx{image, draw.camera.width, draw.camera.height, in.prior_2d, in.codec, schedule, s2.lambda_2d,
                           rng.noise(), config.guidance.skip_codec_jacobian};
            ad::Tensor seed = ad::Tensor::Zero(image.rows(), 3);
            rec.loss = 0.0;
            if (s2.lambda_2d > 0.0) {
                Conditioning c;
                c.kind = ConditioningKind::kText;
                c.text = prompt;
                c.guidance_scale = config.guidance.guidance_scale;
                const SdsSeed s = sds_seed(ctx, c);
                seed += s.image_grad;
                rec.terms["sds_2d"] = s.residual;
                rec.loss += s.residual;
            }
            if (draw.kind == BranchKind::kRandomViewRefPose && s2.lambda_3d > 0.0) {
                SdsContext ctx3 = ctx;
                ctx3.prior = in.prior_3d;
                ctx3.lambda = s2.lambda_3d;
                ctx3.seed = rng.noise();
                Conditioning c;
                c.kind = ConditioningKind::kView;
                c.reference = &ref.image;
                c.guidance_scale = config.guidance.guidance_scale;
                relative_camera(ref.camera, draw.camera, c.rotation, c.translation);
                const SdsSeed s = sds_seed(ctx3, c);
                seed += s.image_grad;
                rec.terms["sds_3d"] = s.residual;
                rec.loss += s.residual;
            }
            check_finite(rec.loss, step, rec.branch, rec.terms);
            grad = tape.backward(image, seed);
        }
        check_finite(grad, step, rec.branch);
        adam.step(model.params().values(), grad);
        rec.wall_seconds = seconds_since(t0);
        if (report != nullptr) {
            report->losses.push_back(rec.loss);
            report->branches.push_back(draw.kind);
            report->regions.push_back(rec.region);
        }
        after_step(hooks, rec, model);
    }
    return model;
}

// ---- stage 3 -----------------------------------------------------------------------------

SceneModel stage3_edit_background(SceneModel model, const Stage3Inputs& in, const RunConfig& config,
                                  Stage3Report* report, const StageHooks& hooks) {
    config.validate();
    if (in.style == nullptr || in.provider == nullptr) throw InvalidArgument("style transfer needs a style image and a feature provider");
    if (in.cameras.empty() || in.cameras.size() != in.poses.size()) {
        throw InvalidArgument("style transfer needs matching camera and pose records");
    }
    const auto& s3 = config.stage3;
    const SceneModel original = model;
    Adam adam(model.params().size(), adam_config(config));
    adam.freeze_all_except(model, {ParamGroup::kBackground});
    RngStreams rng(config.seed);
    RenderOptions opts = render_options(config);
    opts.render_human = false;
    opts.train_human = false;
    opts.train_nonrigid = false;
    const int w = config.render.width;
    const int h = config.render.height;
    const ad::Tensor style_features = in.provider->extract(*in.style);
    const Eigen::VectorXd style_stats = feature_statistics(style_features);
    std::map<std::size_t, ad::Tensor> content;
    if (report != nullptr) *report = Stage3Report{};
    const auto t0 = Clock::now();
    for (int step = 1; step <= s3.steps; ++step) {
        const std::size_t k = uniform_index(rng.camera, in.cameras.size());
        const Camera cam = in.cameras[k].resized(w, h);
        const SkeletonPose& pose = in.poses[k];
        if (content.count(k) == 0) {
            const RenderedImage src = render_image(original, cam, pose, opts, config.render.chunk);
            content[k] = in.provider->extract(src.color);
        }
        // First pass without taping: the full-resolution image and its loss gradient.
        const RenderedImage r = render_image(model, cam, pose, opts, config.render.chunk);
        ad::Tape tape;
        const ad::Var image = tape.variable(r.color.pixels);
        const FeatureMap fm = in.provider->extract(tape, image, w, h);
        StepRecord rec;
        rec.step = step;
        rec.branch = "STYLE";
        const ad::Var nn = nnfm_loss(fm.data, style_features, s3.nnfm);
        const ad::Var l2 = feature_l2_loss(fm.data, content[k]);
        const ad::Var total = nn + s3.feature_l2 * l2;
        rec.terms["nnfm"] = nn.scalar();
        rec.terms["style_l2"] = l2.scalar();
        rec.loss = total.scalar();
        check_finite(rec.loss, step, rec.branch, rec.terms);
        const double dist = (feature_statistics(fm.data.value()) - style_stats).norm();
        tape.backward(total);
        const ad::Tensor image_grad = tape.grad(image);
        // Second pass: chunked re-render seeded with the cached pixel gradients.
        const std::vector<double> grad = render_image_deferred(model, cam, pose, opts, config.render.chunk, image_grad);
        check_finite(grad, step, rec.branch);
        adam.step(model.params().values(), grad);
        rec.wall_seconds = seconds_since(t0);
        if (report != nullptr) {
            report->losses.push_back(rec.loss);
            report->nnfm.push_back(rec.terms["nnfm"]);
            report->feature_l2.push_back(rec.terms["style_l2"]);
            report->statistics_distance.push_back(dist);
        }
        after_step(hooks, rec, model);
    }
    return model;
}

// ---- rendering and IO -------------------------------------------------------------------

std::vector<Image> render_video(const SceneModel& model, const std::vector<Camera>& cameras,
                                const std::vector<SkeletonPose>& poses, const RenderOptions& options, int width,
                                int height, const fs::path& dir) {
    if (cameras.size() != poses.size()) {
        throw IngestionError("frame " + frame_name(static_cast<int>(std::min(cameras.size(), poses.size()))) +
                             ": missing camera or pose record");
    }
    if (!dir.empty()) fs::create_directories(dir / "frames");
    std::vector<Image> out;
    for (std::size_t i = 0; i < cameras.size(); ++i) {
        const Camera cam = cameras[i].resized(width, height);
        RenderedImage r = render_image(model, cam, poses[i], options);
        if (!dir.empty()) write_png(dir / "frames" / (frame_name(static_cast<int>(i)) + ".png"), r.color);
        out.push_back(std::move(r.color));
    }
    return out;
}

ReferenceBundle read_reference_bundle(const fs::path& dir, const SkeletonPose& rest) {
    auto need = [&](const char* name) {
        const fs::path p = dir / name;
        if (!fs::exists(p)) throw IngestionError("reference bundle " + dir.string() + ": missing " + name);
        return p;
    };
    ReferenceBundle b;
    b.image = read_png(need("image.png"));
    b.mask = read_pfm(need("mask.pfm"));
    b.depth = read_pfm(need("depth.pfm"));
    b.camera = read_camera_json(need("camera.json"));
    b.pose = read_pose_json(need("pose.json"), &rest);
    b.validate();
    return b;
}

void write_reference_bundle(const fs::path& dir, const ReferenceBundle& b) {
    b.validate();
    fs::create_directories(dir);
    write_png(dir / "image.png", b.image);
    write_pfm(dir / "mask.pfm", b.mask);
    write_pfm(dir / "depth.pfm", b.depth);
    write_camera_json(dir / "camera.json", b.camera);
    write_pose_json(dir / "pose.json", b.pose);
}

std::unique_ptr<GuidancePrior> make_mock_prior(const RunConfig& config, ConditioningKind kind) {
    const auto& c = config.guidance.target_color;
    const Vec3 target(c[0], c[1], c[2]);
    const std::string label = kind == ConditioningKind::kText ? "personalized" : "base";
    if (config.guidance.prior == "mock-view" && kind == ConditioningKind::kView) {
        return std::make_unique<ViewColorPrior>(target, target, target, label);
    }
    return std::make_unique<GaussianPrior>(GaussianPrior::solid(target, kind, label));
}

}  // namespace dvne
