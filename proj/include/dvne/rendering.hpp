#pragma once

#include "dvne/autodiff.hpp"
#include "dvne/camera.hpp"
#include "dvne/image_io.hpp"
#include "dvne/model.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

namespace dvne {

enum class SampleOrigin : std::uint8_t { kHuman, kScene };

struct SamplePoint {
    double t = 0.0;
    Vec3 color = Vec3::Zero();
    double density = 0.0;
    SampleOrigin origin = SampleOrigin::kScene;
};

struct RenderOutput {
    Vec3 color = Vec3::Zero();
    double mask = 0.0;
    double depth = 0.0;
    double accumulation = 0.0;
    std::vector<double> transmittance;  // T_i per sample
    std::vector<double> weights;        // T_i (1 - exp(-sigma_i delta_i))
};

struct Interval {
    double t0 = 0.0;
    double t1 = 0.0;
    double t = 0.0;  // sample location inside [t0, t1)

    double width() const { return t1 - t0; }
};

enum class Spacing { kLinear, kDisparity };

// n contiguous intervals covering [near, far]. Unstratified samples sit at
// interval midpoints; stratified samples are uniform within each interval.
std::vector<Interval> sample_ray(double near, double far, int n_samples, bool stratified, std::mt19937_64* rng,
                                 Spacing spacing = Spacing::kLinear);

// Stable merge by t; equal depths put human samples first.
std::vector<SamplePoint> composite(std::span<const SamplePoint> human, std::span<const SamplePoint> scene);

// Depth normalization floor for rays that hit nothing.
inline constexpr double kDepthEpsilon = 1e-6;

RenderOutput volume_render(std::span<const SamplePoint> samples, std::span<const double> deltas,
                           const Vec3& background = Vec3::Zero());

// ---- batched, differentiable rendering ------------------------------------------------

struct RenderOptions {
    int n_scene_samples = 64;
    int n_human_samples = 48;
    double near = 0.1;
    double far = 100.0;
    bool stratified = false;
    std::uint64_t stratified_seed = 0;
    bool render_human = true;
    bool render_scene = true;
    // Colour added behind everything in proportion to leftover transmittance.
    Vec3 background = Vec3::Zero();
    bool train_human = true;
    bool train_nonrigid = true;
    bool train_scene = true;
    // Records per-ray scene weights for the distortion regularizer.
    bool scene_weights = false;
};

// Columns of the per-ray render tensor.
enum RenderColumn : Eigen::Index { kColR = 0, kColG = 1, kColB = 2, kColMask = 3, kColDepth = 4, kColAcc = 5 };
inline constexpr Eigen::Index kRenderColumns = 6;

struct RayBatch {
    ad::Var out;            // R x 6: rgb, mask, depth, accumulation
    ad::Var scene_weights;  // (R * n_scene) x 1 when requested
    ad::Tensor scene_s_mid;    // R x n_scene normalized distances
    ad::Tensor scene_s_width;  // R x n_scene normalized interval widths
    std::size_t human_samples = 0;
    std::size_t scene_samples = 0;
};

// Renders rays under one pose. `ray_ids` seed per-ray stratification so the
// same pixel draws the same samples regardless of batching.
RayBatch render_rays(ad::Tape& tape, const SceneModel& model, std::span<const Ray> rays,
                     std::span<const std::int64_t> ray_ids, const SkeletonPose& pose, const RenderOptions& options);

RenderOutput render_pixel(const SceneModel& model, const Camera& camera, int x, int y, const SkeletonPose& pose,
                          const RenderOptions& options);

struct RenderedImage {
    Image color;  // 3 channels
    Image mask;   // 1 channel
    Image depth;  // 1 channel
    Image accumulation;
    // Raw H*W x 6 render tensor.
    ad::Tensor raw;
};

std::vector<Ray> camera_rays(const Camera& camera);
RenderedImage render_image(const SceneModel& model, const Camera& camera, const SkeletonPose& pose,
                           const RenderOptions& options, int chunk = 4096);
RenderedImage to_rendered_image(const ad::Tensor& raw, int width, int height);

struct DeferredStats {
    std::size_t peak_tape_bytes = 0;
    std::size_t chunks = 0;
};

// Second pass of deferred back-propagation: re-renders pixels in chunks of
// `chunk` rays with taping and seeds each chunk with its rows of
// `loss_grad` (H*W x 6, or H*W x 3 for colour only). Returns the parameter
// gradient summed over chunks in pixel order.
std::vector<double> render_image_deferred(const SceneModel& model, const Camera& camera, const SkeletonPose& pose,
                                          const RenderOptions& options, int chunk, const ad::Tensor& loss_grad,
                                          DeferredStats* stats = nullptr);

// Monolithic reference: one tape over the whole image.
std::vector<double> render_image_monolithic(const SceneModel& model, const Camera& camera, const SkeletonPose& pose,
                                            const RenderOptions& options, const ad::Tensor& loss_grad,
                                            DeferredStats* stats = nullptr);

// Worker count: DVNE_THREADS when set, otherwise the hardware concurrency.
int worker_threads();

// Keeps large tensor buffers on the heap between steps instead of returning
// them to the OS (glibc only; a no-op elsewhere).
void retain_freed_memory();

}  // namespace dvne
