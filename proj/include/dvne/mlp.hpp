#pragma once

#include "dvne/autodiff.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace dvne {

enum class Activation { kSoftplus, kRelu };

struct MlpShape {
    int input_dim = 0;
    int hidden_width = 64;
    int num_hidden_layers = 4;
    int output_dim = 4;
    // Hidden layer indices whose input is concat(previous hidden, network input).
    std::vector<int> skip_layers;
    Activation activation = Activation::kSoftplus;
};

// Fully connected network whose weights live in blocks of a ParameterSet.
class Mlp {
public:
    Mlp() = default;
    Mlp(std::string prefix, MlpShape shape);

    const MlpShape& shape() const { return shape_; }
    const std::string& prefix() const { return prefix_; }

    // Adds this network's blocks ("<prefix>.l<i>.w" / ".b") to `params`.
    void register_parameters(ad::ParameterSet& params);
    // Glorot-uniform weights, zero biases. Rows listed in `zero_output_rows`
    // of the final layer are zeroed (weights and bias).
    void initialize(ad::ParameterSet& params, std::uint64_t seed, const std::vector<int>& zero_output_rows) const;

    ad::Var forward(ad::Tape& tape, const ad::ParameterSet& params, ad::Var input, bool trainable) const;

    std::size_t first_block() const { return first_block_; }
    std::size_t num_blocks() const { return 2 * (static_cast<std::size_t>(shape_.num_hidden_layers) + 1); }
    // Layer widths as (fan_in, fan_out) pairs.
    std::vector<std::pair<int, int>> layer_dims() const;

private:
    std::string prefix_;
    MlpShape shape_;
    std::size_t first_block_ = 0;
    bool registered_ = false;
};

}  // namespace dvne
