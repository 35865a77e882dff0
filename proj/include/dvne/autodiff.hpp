#pragma once

// Reverse-mode differentiation over a recorded tape of tensor operations.
//
// Every value on the tape is a dense row-major matrix of doubles; a scalar
// is a 1x1 matrix. Elementwise binary operations broadcast a 1x1 operand,
// a 1xC row or an Nx1 column against an NxC operand. Larger kernels
// (linear layers, encodings, volume compositing) are fused primitives with
// hand-written adjoints.
//
// A tape is owned by one thread. Parameter values are read from a
// ParameterSet at record time; gradients are returned as a flat array with
// the same layout, to be merged by the caller.

#include "dvne/errors.hpp"

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dvne::ad {

using Tensor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstTensorMap = Eigen::Map<const Tensor>;

struct ParamBlock {
    std::string name;
    std::size_t offset = 0;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;

    std::size_t size() const { return static_cast<std::size_t>(rows * cols); }
};

// Flat differentiable parameter storage partitioned into named blocks.
class ParameterSet {
public:
    std::size_t add_block(std::string name, Eigen::Index rows, Eigen::Index cols);

    std::size_t size() const { return values_.size(); }
    std::size_t num_blocks() const { return blocks_.size(); }
    const ParamBlock& block(std::size_t i) const { return blocks_.at(i); }
    const std::vector<ParamBlock>& blocks() const { return blocks_; }
    std::size_t find_block(std::string_view name) const;

    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }
    std::span<double> gradient() { return gradient_; }
    std::span<const double> gradient() const { return gradient_; }

    Eigen::Map<Tensor> block_values(std::size_t i);
    ConstTensorMap block_values(std::size_t i) const;

    void zero_grad();
    // Adds a full-length gradient array into the stored gradient.
    void accumulate(std::span<const double> grad);

private:
    std::vector<double> values_;
    std::vector<double> gradient_;
    std::vector<ParamBlock> blocks_;
};

enum class GradMode { kRecord, kNoGrad };

class Tape;

// Handle to a value recorded on a tape.
class Var {
public:
    Var() = default;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    bool valid() const { return tape_ != nullptr && id_ >= 0; }
    Tape* tape() const { return tape_; }
    int id() const { return id_; }

    const Tensor& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    double scalar() const;

private:
    Tape* tape_ = nullptr;
    int id_ = -1;
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, int node)>;

    explicit Tape(GradMode mode = GradMode::kRecord) : mode_(mode) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    GradMode mode() const { return mode_; }
    bool recording() const { return mode_ == GradMode::kRecord; }
    bool consumed() const { return consumed_; }

    // Leaf that never receives gradient.
    Var constant(Tensor value);
    Var scalar_constant(double v);
    // Leaf that receives gradient (readable with grad() after backward).
    Var variable(Tensor value);
    // Leaf bound to a parameter block. A frozen block is recorded as a
    // constant. All parameter leaves on one tape must come from one set.
    Var parameter(const ParameterSet& params, std::size_t block, bool trainable = true);

    // Generic dispatch by registered primitive name.
    Var apply(std::string_view op, std::initializer_list<Var> args);
    static bool is_registered(std::string_view op);
    static std::vector<std::string> registered_ops();

    // Records a node computed by a fused kernel. `backward` reads grad(node)
    // and calls accumulate_grad on inputs. Nodes whose inputs need no
    // gradient are stored without a backward function.
    Var record(std::string_view op, Tensor value, std::vector<int> inputs, BackwardFn backward);

    // Runs reverse accumulation from `out` seeded with `seed` (same shape)
    // and returns the gradient for the bound parameter set (empty if no
    // parameters were recorded). The tape may be back-propagated only once.
    std::vector<double> backward(Var out, const Tensor& seed);
    std::vector<double> backward(Var out, double seed = 1.0);

    const Tensor& value(int node) const { return nodes_[static_cast<std::size_t>(node)].value; }
    const Tensor& grad(int node) const;
    Tensor grad(Var v) const;
    bool requires_grad(int node) const { return nodes_[static_cast<std::size_t>(node)].requires_grad; }
    const std::vector<int>& inputs(int node) const { return nodes_[static_cast<std::size_t>(node)].inputs; }
    void accumulate_grad(int node, const Tensor& g);
    template <typename Derived>
    void accumulate_grad(int node, const Eigen::MatrixBase<Derived>& g) {
        accumulate_grad(node, Tensor(g));
    }

    std::size_t num_nodes() const { return nodes_.size(); }
    // Bytes held by node values and gradients; peak is the high-water mark.
    std::size_t bytes() const { return bytes_; }
    std::size_t peak_bytes() const { return peak_bytes_; }
    const ParameterSet* bound_parameters() const { return params_; }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::vector<int> inputs;
        BackwardFn backward;
        std::string_view op;
        std::int64_t param_offset = -1;
        bool requires_grad = false;
    };

    int push(Node node);
    void track(std::ptrdiff_t delta);

    GradMode mode_;
    bool consumed_ = false;
    std::deque<Node> nodes_;
    const ParameterSet* params_ = nullptr;
    std::size_t bytes_ = 0;
    std::size_t peak_bytes_ = 0;
};

// ---- registered primitives ------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var maximum(Var a, Var b);  // ties resolve to the first argument
Var neg(Var a);
Var exp(Var a);
Var log(Var a);
Var sin(Var a);
Var cos(Var a);
Var sqrt(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
Var square(Var a);
// Row-wise 1/|row|, Nx1. Zero rows map to 0 with zero gradient.
Var reciprocal_norm(Var a);
// x W^T + b with W (out x in) and b (1 x out).
Var linear(Var x, Var w, Var b);
Var matmul(Var a, Var b);
Var sum(Var a);       // 1x1
Var mean(Var a);      // 1x1
Var row_sum(Var a);   // Nx1
Var concat_cols(std::span<const Var> parts);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
// Row gather; index -1 yields a zero row.
Var gather_rows(Var a, std::vector<std::int64_t> index);
// Reinterprets row-major storage with a new shape.
Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);
// Per level l: [sin(2^l x), cos(2^l x)] for each row of an Nx3 input.
Var positional_encoding(Var x, int num_levels);

Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator-(Var a);
Var operator*(Var a, double s);
Var operator*(double s, Var a);
Var operator+(Var a, double s);
Var operator+(double s, Var a);
Var operator-(Var a, double s);
Var operator-(double s, Var a);

// ---- finite-difference oracle ----------------------------------------------

using ScalarFunction = std::function<double(std::span<const double>)>;

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
std::vector<double> finite_difference_gradient(const ScalarFunction& f, std::span<const double> x,
                                               double step);

}  // namespace dvne::ad
