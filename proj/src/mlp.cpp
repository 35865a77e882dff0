#include "dvne/mlp.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace dvne {

Mlp::Mlp(std::string prefix, MlpShape shape) : prefix_(std::move(prefix)), shape_(std::move(shape)) {
    if (shape_.input_dim < 1 || shape_.hidden_width < 1 || shape_.num_hidden_layers < 1 || shape_.output_dim < 1) {
        throw InvalidArgument("MLP '" + prefix_ + "' has a non-positive dimension");
    }
    for (int s : shape_.skip_layers) {
        if (s < 1 || s >= shape_.num_hidden_layers) {
            throw InvalidArgument("MLP '" + prefix_ + "' skip layer out of range");
        }
    }
}

std::vector<std::pair<int, int>> Mlp::layer_dims() const {
    std::vector<std::pair<int, int>> dims;
    int in = shape_.input_dim;
    for (int l = 0; l < shape_.num_hidden_layers; ++l) {
        const bool skip = std::find(shape_.skip_layers.begin(), shape_.skip_layers.end(), l) != shape_.skip_layers.end();
        const int fan_in = skip ? in + shape_.input_dim : in;
        dims.emplace_back(fan_in, shape_.hidden_width);
        in = shape_.hidden_width;
    }
    dims.emplace_back(in, shape_.output_dim);
    return dims;
}

void Mlp::register_parameters(ad::ParameterSet& params) {
    if (registered_) throw InvalidArgument("MLP '" + prefix_ + "' registered twice");
    first_block_ = params.num_blocks();
    const auto dims = layer_dims();
    for (std::size_t l = 0; l < dims.size(); ++l) {
        params.add_block(prefix_ + ".l" + std::to_string(l) + ".w", dims[l].second, dims[l].first);
        params.add_block(prefix_ + ".l" + std::to_string(l) + ".b", 1, dims[l].second);
    }
    registered_ = true;
}

void Mlp::initialize(ad::ParameterSet& params, std::uint64_t seed, const std::vector<int>& zero_output_rows) const {
    if (!registered_) throw InvalidArgument("MLP '" + prefix_ + "' initialized before registration");
    std::mt19937_64 rng(seed);
    const auto dims = layer_dims();
    for (std::size_t l = 0; l < dims.size(); ++l) {
        auto w = params.block_values(first_block_ + 2 * l);
        auto b = params.block_values(first_block_ + 2 * l + 1);
        const double limit = std::sqrt(6.0 / static_cast<double>(dims[l].first + dims[l].second));
        std::uniform_real_distribution<double> dist(-limit, limit);
        for (Eigen::Index r = 0; r < w.rows(); ++r) {
            for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = dist(rng);
        }
        b.setZero();
    }
    auto w_out = params.block_values(first_block_ + 2 * (dims.size() - 1));
    auto b_out = params.block_values(first_block_ + 2 * (dims.size() - 1) + 1);
    for (int row : zero_output_rows) {
        if (row < 0 || row >= w_out.rows()) throw InvalidArgument("zero_output_rows index out of range");
        w_out.row(row).setZero();
        b_out(0, row) = 0.0;
    }
}

ad::Var Mlp::forward(ad::Tape& tape, const ad::ParameterSet& params, ad::Var input, bool trainable) const {
    if (!registered_) throw InvalidArgument("MLP '" + prefix_ + "' used before registration");
    if (input.cols() != shape_.input_dim) {
        throw ShapeMismatch("MLP '" + prefix_ + "' expects " + std::to_string(shape_.input_dim) + " inputs, got " +
                            std::to_string(input.cols()));
    }
    ad::Var h = input;
    const int n_layers = shape_.num_hidden_layers + 1;
    for (int l = 0; l < n_layers; ++l) {
        const bool skip = std::find(shape_.skip_layers.begin(), shape_.skip_layers.end(), l) != shape_.skip_layers.end();
        if (skip) {
            const ad::Var parts[] = {h, input};
            h = ad::concat_cols(parts);
        }
        const auto w = tape.parameter(params, first_block_ + 2 * static_cast<std::size_t>(l), trainable);
        const auto b = tape.parameter(params, first_block_ + 2 * static_cast<std::size_t>(l) + 1, trainable);
        h = ad::linear(h, w, b);
        if (l + 1 < n_layers) {
            if (shape_.activation == Activation::kSoftplus) {
                h = ad::softplus(h);
            } else {
                h = ad::maximum(h, tape.scalar_constant(0.0));
            }
        }
    }
    return h;
}

}  // namespace dvne
