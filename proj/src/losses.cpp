#include "dvne/losses.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>

namespace dvne {

void ReferenceBundle::validate() const {
    const int w = image.width;
    const int h = image.height;
    if (image.channels() != 3) throw ShapeMismatch("reference image must have 3 channels");
    auto same = [&](const Image& other, const char* name) {
        if (other.width != w || other.height != h || other.channels() != 1) {
            throw ShapeMismatch(std::string("reference ") + name + " must be a single-channel " + std::to_string(w) +
                                "x" + std::to_string(h) + " map");
        }
    };
    same(mask, "mask");
    same(depth, "depth");
    if (camera.width != w || camera.height != h) throw ShapeMismatch("reference camera size differs from the image");
    for (Eigen::Index i = 0; i < mask.pixels.rows(); ++i) {
        const double m = mask.pixels(i, 0);
        if (m != 0.0 && m != 1.0) throw InvalidArgument("reference mask must be binary");
    }
}

RenderVars split_render(ad::Var raw) {
    return {ad::slice_cols(raw, 0, 3), ad::slice_cols(raw, 3, 1), ad::slice_cols(raw, 4, 1)};
}

namespace {

double variance(const Eigen::VectorXd& v) {
    if (v.size() < 2) return 0.0;
    return (v.array() - v.mean()).square().mean();
}

}  // namespace

RecLoss rec_loss(ad::Tape& tape, const RenderVars& render, const ReferenceBundle& ref, const LossWeights& weights) {
    ref.validate();
    const Eigen::Index n = ref.image.pixels.rows();
    if (render.color.rows() != n || render.mask.rows() != n || render.depth.rows() != n) {
        throw ShapeMismatch("render and reference sizes differ");
    }
    const ad::Var m = tape.constant(ref.mask.pixels);
    const ad::Var rgb = ad::mean(ad::square((render.color - tape.constant(ref.image.pixels)) * m));
    const ad::Var mask = ad::mean(ad::square(render.mask - m));
    RecLoss out;
    out.rgb = rgb.scalar();
    out.mask = mask.scalar();
    ad::Var total = weights.rgb * rgb + weights.mask * mask;

    std::vector<std::int64_t> idx;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (ref.mask.pixels(i, 0) != 0.0) idx.push_back(i);
    }
    Eigen::VectorXd ref_d(static_cast<Eigen::Index>(idx.size()));
    Eigen::VectorXd ren_d(ref_d.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
        ref_d[static_cast<Eigen::Index>(k)] = ref.depth.pixels(idx[k], 0);
        ren_d[static_cast<Eigen::Index>(k)] = render.depth.value()(idx[k], 0);
    }
    if (idx.size() < 2 || variance(ref_d) <= 0.0 || variance(ren_d) <= 0.0) {
        out.depth_skipped = true;
    } else {
        const Eigen::VectorXd xc = ref_d.array() - ref_d.mean();
        const ad::Var y = ad::gather_rows(render.depth, idx);
        const ad::Var yc = y - ad::mean(y);
        const ad::Var num = ad::sum(tape.constant(xc) * yc);
        const ad::Var corr = num / ad::sqrt(ad::sum(ad::square(yc)) * xc.squaredNorm());
        const ad::Var depth = 0.5 * (1.0 - corr);
        out.depth = depth.scalar();
        total = total + weights.depth * depth;
    }
    out.total = total;
    return out;
}

ad::Var photometric_loss(ad::Var render, const ad::Tensor& target, const ad::Tensor* mask) {
    if (render.rows() != target.rows() || render.cols() != target.cols()) {
        throw ShapeMismatch("photometric loss needs equally shaped images");
    }
    ad::Tape& tape = *render.tape();
    const ad::Var sq = ad::square(render - tape.constant(target));
    if (mask == nullptr) return ad::mean(sq);
    if (mask->rows() != target.rows() || mask->cols() != 1) throw ShapeMismatch("mask must be N x 1");
    const double denom = mask->sum() * static_cast<double>(target.cols());
    if (denom <= 0.0) return tape.scalar_constant(0.0);
    return ad::sum(sq * tape.constant(*mask)) * (1.0 / denom);
}

double photometric_loss(const ad::Tensor& render, const ad::Tensor& target, const ad::Tensor* mask) {
    ad::Tape tape(ad::GradMode::kNoGrad);
    return photometric_loss(tape.constant(render), target, mask).scalar();
}

// ---- features --------------------------------------------------------------------

ad::Tensor FeatureProvider::extract(const Image& image) const {
    ad::Tape tape(ad::GradMode::kNoGrad);
    return extract(tape, tape.constant(image.pixels), image.width, image.height).data.value();
}

MockConvProvider::MockConvProvider(std::uint64_t seed, std::vector<ConvLayer> layers) : layers_(std::move(layers)) {
    if (layers_.empty()) throw InvalidArgument("feature provider needs at least one layer");
    std::mt19937_64 rng(seed);
    int in = 3;
    for (const ConvLayer& l : layers_) {
        if (l.out_channels < 1 || l.kernel < 1 || l.kernel % 2 == 0 || l.stride < 1) {
            throw InvalidArgument("conv layers need positive channels, odd kernels and positive strides");
        }
        const int fan_in = l.kernel * l.kernel * in;
        std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
        ad::Tensor w(l.out_channels, fan_in);
        for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = n(rng);
        ad::Tensor b(1, l.out_channels);
        for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = 0.1 * n(rng);
        weights_.push_back(std::move(w));
        biases_.push_back(std::move(b));
        in = l.out_channels;
    }
}

FeatureMap MockConvProvider::extract(ad::Tape& tape, ad::Var image, int width, int height) const {
    if (image.rows() != static_cast<Eigen::Index>(width) * height || image.cols() != 3) {
        throw ShapeMismatch("feature provider expects an H*W x 3 image");
    }
    ad::Var x = image - 0.5;
    int h = height;
    int w = width;
    for (std::size_t li = 0; li < layers_.size(); ++li) {
        const ConvLayer& l = layers_[li];
        const int pad = l.kernel / 2;
        const int oh = (h - 1) / l.stride + 1;
        const int ow = (w - 1) / l.stride + 1;
        std::vector<std::int64_t> idx;
        idx.reserve(static_cast<std::size_t>(oh) * ow * l.kernel * l.kernel);
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                for (int ky = 0; ky < l.kernel; ++ky) {
                    for (int kx = 0; kx < l.kernel; ++kx) {
                        const int iy = oy * l.stride + ky - pad;
                        const int ix = ox * l.stride + kx - pad;
                        idx.push_back(iy < 0 || ix < 0 || iy >= h || ix >= w ? -1
                                                                             : static_cast<std::int64_t>(iy) * w + ix);
                    }
                }
            }
        }
        const Eigen::Index in = x.cols();
        const ad::Var cols = ad::reshape(ad::gather_rows(x, std::move(idx)), static_cast<Eigen::Index>(oh) * ow,
                                         l.kernel * l.kernel * in);
        x = ad::tanh(ad::linear(cols, tape.constant(weights_[li]), tape.constant(biases_[li])));
        h = oh;
        w = ow;
    }
    return {x, h, w};
}

int MockConvProvider::receptive_field() const {
    int r = 1;
    int jump = 1;
    for (const ConvLayer& l : layers_) {
        r += (l.kernel - 1) * jump;
        jump *= l.stride;
    }
    return r;
}

std::string MockConvProvider::layer_set() const {
    std::string s = "mock-conv";
    for (const ConvLayer& l : layers_) {
        s += ":" + std::to_string(l.out_channels) + "k" + std::to_string(l.kernel) + "s" + std::to_string(l.stride);
    }
    return s;
}

// ---- NNFM and feature L2 --------------------------------------------------------------

namespace {

ad::Tensor normalize_rows(const ad::Tensor& f) {
    ad::Tensor out = f;
    for (Eigen::Index i = 0; i < f.rows(); ++i) {
        const double n = f.row(i).norm();
        if (n > 0.0) {
            out.row(i) /= n;
        } else {
            out.row(i).setZero();
        }
    }
    return out;
}

}  // namespace

ad::Var nnfm_loss(ad::Var rendered, const ad::Tensor& style, double lambda) {
    if (rendered.cols() != style.cols() || rendered.cols() < 1) throw ShapeMismatch("feature channel counts differ");
    if (rendered.rows() < 1 || style.rows() < 1) throw ShapeMismatch("empty feature map");
    const ad::Tensor& x = rendered.value();
    const ad::Tensor fn = normalize_rows(x);
    const ad::Tensor sn = normalize_rows(style);
    const ad::Tensor sim = fn * sn.transpose();
    const Eigen::Index n = x.rows();
    std::vector<Eigen::Index> nearest(static_cast<std::size_t>(n));
    // A row identical to some style row sits exactly at distance zero, with a
    // zero gradient. Round-off in the normalised dot product would otherwise
    // leave ~1e-16 there, which Adam rescales into full-size steps.
    std::vector<char> exact(static_cast<std::size_t>(n), 0);
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index j = 1; j < sim.cols(); ++j) {
            if (sim(i, j) > sim(i, best)) best = j;
        }
        for (Eigen::Index j = 0; j < sim.cols() && sim(i, best) > 1.0 - 1e-9; ++j) {
            if (sim(i, j) >= sim(i, best) - 1e-12 && x.row(i) == style.row(j)) {
                best = j;
                exact[static_cast<std::size_t>(i)] = 1;
                break;
            }
        }
        nearest[static_cast<std::size_t>(i)] = best;
        if (!exact[static_cast<std::size_t>(i)]) total += 1.0 - sim(i, best);
    }
    ad::Tensor value = ad::Tensor::Constant(1, 1, lambda * total / static_cast<double>(n));
    auto s = std::make_shared<const ad::Tensor>(sn);
    const int in = rendered.id();
    return rendered.tape()->record("nnfm", std::move(value), {in},
                                   [in, s, lambda, nearest = std::move(nearest), exact = std::move(exact)](ad::Tape& t,
                                                                                                           int self) {
        const ad::Tensor& xv = t.value(in);
        const double g = lambda * t.grad(self)(0, 0) / static_cast<double>(xv.rows());
        ad::Tensor dx = ad::Tensor::Zero(xv.rows(), xv.cols());
        for (Eigen::Index i = 0; i < xv.rows(); ++i) {
            const double norm = xv.row(i).norm();
            if (exact[static_cast<std::size_t>(i)] || norm == 0.0) continue;
            const auto sj = s->row(nearest[static_cast<std::size_t>(i)]);
            const auto xhat = xv.row(i) / norm;
            // d(1 - cos)/dx = -(s_hat - cos x_hat) / |x|
            dx.row(i) = -g * (sj - sj.dot(xhat) * xhat) / norm;
        }
        t.accumulate_grad(in, dx);
    });
}

double nnfm_loss(const ad::Tensor& rendered, const ad::Tensor& style, double lambda) {
    ad::Tape tape(ad::GradMode::kNoGrad);
    return nnfm_loss(tape.constant(rendered), style, lambda).scalar();
}

ad::Var feature_l2_loss(ad::Var rendered, const ad::Tensor& source) {
    if (rendered.rows() != source.rows() || rendered.cols() != source.cols()) {
        throw ShapeMismatch("feature maps differ in shape");
    }
    return ad::mean(ad::square(rendered - rendered.tape()->constant(source)));
}

double feature_l2_loss(const ad::Tensor& rendered, const ad::Tensor& source) {
    ad::Tape tape(ad::GradMode::kNoGrad);
    return feature_l2_loss(tape.constant(rendered), source).scalar();
}

Eigen::VectorXd feature_statistics(const ad::Tensor& features) {
    const Eigen::Index c = features.cols();
    Eigen::VectorXd s(2 * c);
    for (Eigen::Index j = 0; j < c; ++j) {
        const double mu = features.col(j).mean();
        s[j] = mu;
        s[c + j] = std::sqrt((features.col(j).array() - mu).square().mean());
    }
    return s;
}

// ---- distortion -----------------------------------------------------------------------

double distortion_regularizer(std::span<const double> weights, std::span<const double> mids,
                              std::span<const double> widths) {
    if (weights.size() != mids.size() || weights.size() != widths.size()) {
        throw ShapeMismatch("distortion inputs differ in length");
    }
    double pair = 0.0;
    double self = 0.0;
    double w_before = 0.0;
    double ws_before = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (i > 0 && mids[i] < mids[i - 1]) throw UnsortedSamples("distortion midpoints must be sorted");
        pair += 2.0 * weights[i] * (mids[i] * w_before - ws_before);
        self += weights[i] * weights[i] * widths[i];
        w_before += weights[i];
        ws_before += weights[i] * mids[i];
    }
    return pair + self / 3.0;
}

ad::Var distortion_loss(ad::Var weights, const ad::Tensor& mids, const ad::Tensor& widths) {
    const Eigen::Index rays = mids.rows();
    const Eigen::Index n = mids.cols();
    if (widths.rows() != rays || widths.cols() != n || weights.rows() != rays * n || weights.cols() != 1) {
        throw ShapeMismatch("distortion weights must be (R * n) x 1 with R x n midpoints");
    }
    const ad::Tensor& w = weights.value();
    double total = 0.0;
    for (Eigen::Index r = 0; r < rays; ++r) {
        total += distortion_regularizer({w.data() + r * n, static_cast<std::size_t>(n)},
                                        {mids.row(r).data(), static_cast<std::size_t>(n)},
                                        {widths.row(r).data(), static_cast<std::size_t>(n)});
    }
    ad::Tensor value = ad::Tensor::Constant(1, 1, rays > 0 ? total / static_cast<double>(rays) : 0.0);
    auto m = std::make_shared<const ad::Tensor>(mids);
    auto d = std::make_shared<const ad::Tensor>(widths);
    const int in = weights.id();
    return weights.tape()->record("distortion", std::move(value), {in}, [in, m, d, rays, n](ad::Tape& t, int self) {
        const double g = t.grad(self)(0, 0) / static_cast<double>(std::max<Eigen::Index>(rays, 1));
        const ad::Tensor& wv = t.value(in);
        ad::Tensor gw(wv.rows(), 1);
        for (Eigen::Index r = 0; r < rays; ++r) {
            const double* wr = wv.data() + r * n;
            double w_total = 0.0;
            double ws_total = 0.0;
            for (Eigen::Index k = 0; k < n; ++k) {
                w_total += wr[k];
                ws_total += wr[k] * (*m)(r, k);
            }
            // sum_j w_j |s_k - s_j| split into the parts before and after k.
            double w_before = 0.0;
            double ws_before = 0.0;
            for (Eigen::Index k = 0; k < n; ++k) {
                const double s = (*m)(r, k);
                const double w_after = w_total - w_before - wr[k];
                const double ws_after = ws_total - ws_before - wr[k] * s;
                const double spread = s * w_before - ws_before + ws_after - s * w_after;
                gw(r * n + k, 0) = g * (2.0 * spread + (2.0 / 3.0) * wr[k] * (*d)(r, k));
                w_before += wr[k];
                ws_before += wr[k] * s;
            }
        }
        t.accumulate_grad(in, gw);
    });
}

}  // namespace dvne
