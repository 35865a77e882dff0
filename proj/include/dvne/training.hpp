#pragma once

#include "dvne/config.hpp"
#include "dvne/guidance.hpp"
#include "dvne/losses.hpp"
#include "dvne/model.hpp"
#include "dvne/rendering.hpp"
#include "dvne/scene_synth.hpp"

#include <array>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace dvne {

// ---- randomness ------------------------------------------------------------------------

std::uint64_t stream_seed(std::uint64_t seed, std::string_view name);

// Named sub-streams derived from one run seed.
struct RngStreams {
    explicit RngStreams(std::uint64_t seed);
    std::mt19937_64 branch;
    std::mt19937_64 camera;
    std::mt19937_64 noise;
    std::mt19937_64 stratification;
};

// ---- optimizer ---------------------------------------------------------------------------

struct AdamConfig {
    double lr = 5e-4;
    int warmup = 100;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};
AdamConfig adam_config(const RunConfig& config);

// Adam with a linear learning-rate warmup. Frozen entries are never touched.
class Adam {
public:
    Adam(std::size_t size, AdamConfig config);

    void set_trainable(std::size_t begin, std::size_t end, bool trainable);
    void freeze_all_except(const SceneModel& model, std::initializer_list<ParamGroup> groups);
    void step(std::span<double> values, std::span<const double> grad);
    // Rate used by the next step.
    double learning_rate() const;
    long steps() const { return t_; }

private:
    AdamConfig config_;
    std::vector<double> m_;
    std::vector<double> v_;
    std::vector<char> trainable_;
    long t_ = 0;
};

// ---- branches and cameras -------------------------------------------------------------

enum class BranchKind { kRefRecon = 0, kRandomViewRefPose = 1, kRandomViewFramePose = 2 };
std::string branch_name(BranchKind kind);

struct TrainingBranch {
    BranchKind kind = BranchKind::kRefRecon;
    double probability = 0.0;
};
// Validates that probabilities over the three branches sum to 1.
std::vector<TrainingBranch> make_branches(const std::vector<double>& probabilities);

// Cameras on a sphere around `target`; azimuth 0 looks along -z (front).
struct CameraSphere {
    Vec3 target = Vec3::Zero();
    double radius = 1.0;
    double elevation_min = -10.0;
    double elevation_max = 45.0;
    double fov = 50.0;
    int width = 128;
    int height = 128;
};
// Radius chosen so the whole box fits the vertical field of view.
CameraSphere camera_sphere(const RunConfig& config, const Aabb& canonical_box);
Camera sphere_camera(const CameraSphere& sphere, double azimuth_deg, double elevation_deg,
                     double distance_scale = 1.0, const Vec3* target = nullptr);
Camera random_camera(const CameraSphere& sphere, std::mt19937_64& rng, double* azimuth_deg = nullptr);

struct BranchDraw {
    BranchKind kind = BranchKind::kRefRecon;
    Camera camera;
    SkeletonPose pose;
    int frame = -1;  // source frame for RANDOM_VIEW_FRAME_POSE
    double azimuth = 0.0;
};

BranchKind draw_branch_kind(const std::vector<TrainingBranch>& branches, std::mt19937_64& rng);
BranchDraw sample_branch(const std::vector<TrainingBranch>& branches, const CameraSphere& sphere,
                         const Camera& reference_camera, const SkeletonPose& reference_pose,
                         const std::vector<SkeletonPose>& frame_poses, std::mt19937_64& branch_rng,
                         std::mt19937_64& camera_rng);

// ---- zoom-in regions ----------------------------------------------------------------

struct ZoomRegion {
    std::string name;
    // Anchor as fractions of the canonical box extent (0 = lo, 1 = hi).
    Vec3 anchor_fraction = Vec3::Constant(0.5);
    double distance_scale = 1.0;  // relative to the full-body radius
    bool arm = false;
};
const std::vector<ZoomRegion>& zoom_regions();
const ZoomRegion& zoom_region(const std::string& name);

// Anchor in posed space: canonical anchor carried by the nearest joint.
Vec3 zoom_anchor(const ZoomRegion& region, const Aabb& canonical_box, const SkeletonPose& rest,
                 const SkeletonPose& pose);

struct ZoomDraw {
    Camera camera;
    std::string prompt;
    Vec3 anchor = Vec3::Zero();
    double azimuth = 0.0;
};

std::string compose_prompt(const std::string& base, const std::string& region, ViewBucket view);
// Throws ConstraintError for arm regions unless `pose` is the T-pose.
ZoomDraw sample_zoom_camera(const ZoomRegion& region, ViewBucket view, const SkeletonPose& pose,
                            const SkeletonPose& rest, const Aabb& canonical_box, const CameraSphere& sphere,
                            const std::string& base_prompt, std::mt19937_64& rng);

// Rotation and translation of `camera` relative to `reference`, in world axes.
void relative_camera(const Camera& reference, const Camera& camera, Mat3& rotation, Vec3& translation);

// ---- metrics ----------------------------------------------------------------------------

struct StepRecord {
    int step = 0;
    std::string branch;
    double loss = 0.0;
    std::map<std::string, double> terms;
    std::string region;
    double wall_seconds = 0.0;
};

// Append-only CSV with a fixed column set. The first line names the schema version.
class MetricsWriter {
public:
    static constexpr const char* kSchema = "# dvne-metrics v1";
    explicit MetricsWriter(const std::filesystem::path& path);
    void write(const StepRecord& record);
    static const std::vector<std::string>& term_columns();

private:
    std::ofstream out_;
};

struct StageHooks {
    MetricsWriter* metrics = nullptr;
    // Called after every optimizer step.
    std::function<void(int step, const SceneModel& model)> on_step;
    int log_every = 0;
};

// ---- stages ------------------------------------------------------------------------------

RenderOptions render_options(const RunConfig& config);
SceneModel initial_model(const RunConfig& config, const SkeletonPose& rest);

// Pixels excluded from stage-1 supervision.
bool is_held_out(int frame, std::int64_t pixel, int every);

struct Stage1Report {
    std::vector<double> losses;
    std::vector<double> photometric;
    double initial_heldin = 0.0;
    double final_heldin = 0.0;
    double final_heldout = 0.0;
};

// Full-image photometric error over the given frames, restricted to held-in
// (or held-out) pixels.
double evaluate_photometric(const SceneModel& model, const Dataset& data, const RenderOptions& options,
                            const std::vector<int>& frames, int holdout_every, bool held_out);
std::vector<int> evaluation_frames(const Dataset& data, int count = 6);

// `init` replaces the seeded initialization when given. With a report the
// held-in and held-out errors are evaluated before and after training.
SceneModel stage1_reconstruct(const Dataset& data, const RunConfig& config, Stage1Report* report = nullptr,
                              const StageHooks& hooks = {}, const SceneModel* init = nullptr);

struct Stage2Inputs {
    const ReferenceBundle* reference = nullptr;
    std::vector<SkeletonPose> frame_poses;
    const GuidancePrior* prior_2d = nullptr;  // text conditioned
    const GuidancePrior* prior_3d = nullptr;  // view conditioned
    const LatentCodec* codec = nullptr;
};

struct Stage2Report {
    std::vector<double> losses;
    std::vector<BranchKind> branches;
    std::vector<std::string> regions;
};

SceneModel stage2_edit_foreground(SceneModel model, const Stage2Inputs& inputs, const RunConfig& config,
                                  Stage2Report* report = nullptr, const StageHooks& hooks = {});

// Masked colour error of a full render against the reference image.
double reference_view_error(const SceneModel& model, const ReferenceBundle& reference, const RenderOptions& options);

struct Stage3Inputs {
    const Image* style = nullptr;
    const FeatureProvider* provider = nullptr;
    std::vector<Camera> cameras;
    std::vector<SkeletonPose> poses;
};

struct Stage3Report {
    std::vector<double> losses;
    std::vector<double> nnfm;
    std::vector<double> feature_l2;
    // Distance between per-channel feature statistics of the step's render and the style.
    std::vector<double> statistics_distance;
};

SceneModel stage3_edit_background(SceneModel model, const Stage3Inputs& inputs, const RunConfig& config,
                                  Stage3Report* report = nullptr, const StageHooks& hooks = {});

// Renders one PNG per camera into `dir` (frames/NNNNNN.png) and returns the images.
std::vector<Image> render_video(const SceneModel& model, const std::vector<Camera>& cameras,
                                const std::vector<SkeletonPose>& poses, const RenderOptions& options,
                                int width, int height, const std::filesystem::path& dir);

// Reference bundle directory: image.png, mask.pfm, depth.pfm, camera.json, pose.json.
ReferenceBundle read_reference_bundle(const std::filesystem::path& dir, const SkeletonPose& rest);
void write_reference_bundle(const std::filesystem::path& dir, const ReferenceBundle& bundle);

// Mock priors named by the config ("mock-gaussian" or "mock-view").
std::unique_ptr<GuidancePrior> make_mock_prior(const RunConfig& config, ConditioningKind kind);

}  // namespace dvne
