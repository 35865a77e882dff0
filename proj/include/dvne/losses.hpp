#pragma once

#include "dvne/autodiff.hpp"
#include "dvne/camera.hpp"
#include "dvne/deformation.hpp"
#include "dvne/image_io.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace dvne {

// Reference view used for reconstruction during foreground editing.
struct ReferenceBundle {
    Image image;  // 3 channels in [0, 1]
    Image mask;   // 1 channel, binary
    Image depth;  // 1 channel, relative units
    SkeletonPose pose;
    Camera camera;

    void validate() const;
};

struct LossWeights {
    double rgb = 5.0;
    double mask = 0.5;
    double depth = 0.01;
    double nnfm = 1.0;
    double feature_l2 = 0.5;
};

// Differentiable per-pixel render channels (H*W rows).
struct RenderVars {
    ad::Var color;  // N x 3
    ad::Var mask;   // N x 1
    ad::Var depth;  // N x 1
};

// Splits a render tensor (N x 6) into its channels.
RenderVars split_render(ad::Var raw);

struct RecLoss {
    ad::Var total;
    double rgb = 0.0;
    double mask = 0.0;
    double depth = 0.0;
    // Set when the masked depth has fewer than two pixels or no variance.
    bool depth_skipped = false;
};

// Masked colour MSE + mask MSE + scaled negative Pearson correlation of
// depth over the reference mask.
RecLoss rec_loss(ad::Tape& tape, const RenderVars& render, const ReferenceBundle& ref, const LossWeights& weights);

// Mean squared error over pixels and channels; with a mask, only pixels
// whose mask value is nonzero count (weighted by the mask).
ad::Var photometric_loss(ad::Var render, const ad::Tensor& target, const ad::Tensor* mask = nullptr);
double photometric_loss(const ad::Tensor& render, const ad::Tensor& target, const ad::Tensor* mask = nullptr);

// h x w x C feature map, one row per position (row-major positions).
struct FeatureMap {
    ad::Var data;
    int height = 0;
    int width = 0;
};

class FeatureProvider {
public:
    virtual ~FeatureProvider() = default;
    virtual FeatureMap extract(ad::Tape& tape, ad::Var image, int width, int height) const = 0;
    virtual int channels() const = 0;
    virtual int receptive_field() const = 0;
    virtual std::string layer_set() const = 0;

    ad::Tensor extract(const Image& image) const;
};

struct ConvLayer {
    int out_channels = 8;
    int kernel = 3;
    int stride = 1;
};

// Fixed random convolution stack with tanh activations and zero padding.
class MockConvProvider final : public FeatureProvider {
public:
    explicit MockConvProvider(std::uint64_t seed = 7, std::vector<ConvLayer> layers = {{8, 3, 1}, {16, 3, 2}});

    FeatureMap extract(ad::Tape& tape, ad::Var image, int width, int height) const override;
    using FeatureProvider::extract;
    int channels() const override { return layers_.back().out_channels; }
    int receptive_field() const override;
    std::string layer_set() const override;

private:
    std::vector<ConvLayer> layers_;
    std::vector<ad::Tensor> weights_;  // out x (k*k*in)
    std::vector<ad::Tensor> biases_;   // 1 x out
};

// Mean over rendered positions of the cosine distance to the nearest style
// feature, scaled by `lambda`. Zero-norm vectors are treated as orthogonal.
ad::Var nnfm_loss(ad::Var rendered, const ad::Tensor& style, double lambda);
double nnfm_loss(const ad::Tensor& rendered, const ad::Tensor& style, double lambda);

// Mean squared difference of two equally shaped feature maps.
ad::Var feature_l2_loss(ad::Var rendered, const ad::Tensor& source);
double feature_l2_loss(const ad::Tensor& rendered, const ad::Tensor& source);

// Sum over i, j of w_i w_j |s_i - s_j| plus (1/3) sum w_i^2 delta_i for one ray.
double distortion_regularizer(std::span<const double> weights, std::span<const double> mids,
                              std::span<const double> widths);
// Batched form averaged over rays: `weights` is (R * n) x 1, `mids` and
// `widths` are R x n.
ad::Var distortion_loss(ad::Var weights, const ad::Tensor& mids, const ad::Tensor& widths);

// Per-channel mean and standard deviation, concatenated (2C).
Eigen::VectorXd feature_statistics(const ad::Tensor& features);

}  // namespace dvne
