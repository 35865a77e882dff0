#include "dvne/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace dvne::ad {

// ---- ParameterSet -------------------------------------------------------

std::size_t ParameterSet::add_block(std::string name, Eigen::Index rows, Eigen::Index cols) {
    if (rows < 0 || cols < 0) throw InvalidArgument("parameter block shape must be non-negative");
    for (const auto& b : blocks_) {
        if (b.name == name) throw InvalidArgument("duplicate parameter block '" + name + "'");
    }
    ParamBlock b{std::move(name), values_.size(), rows, cols};
    values_.resize(values_.size() + b.size(), 0.0);
    gradient_.resize(values_.size(), 0.0);
    blocks_.push_back(std::move(b));
    return blocks_.size() - 1;
}

std::size_t ParameterSet::find_block(std::string_view name) const {
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        if (blocks_[i].name == name) return i;
    }
    throw InvalidArgument("no parameter block named '" + std::string(name) + "'");
}

Eigen::Map<Tensor> ParameterSet::block_values(std::size_t i) {
    const auto& b = blocks_.at(i);
    return {values_.data() + b.offset, b.rows, b.cols};
}

ConstTensorMap ParameterSet::block_values(std::size_t i) const {
    const auto& b = blocks_.at(i);
    return {values_.data() + b.offset, b.rows, b.cols};
}

void ParameterSet::zero_grad() { std::fill(gradient_.begin(), gradient_.end(), 0.0); }

void ParameterSet::accumulate(std::span<const double> grad) {
    if (grad.empty()) return;
    if (grad.size() != gradient_.size()) throw ShapeMismatch("gradient length does not match parameter set");
    for (std::size_t i = 0; i < grad.size(); ++i) gradient_[i] += grad[i];
}

// ---- Var ------------------------------------------------------------------

const Tensor& Var::value() const {
    if (!valid()) throw InvalidArgument("use of an empty Var");
    return tape_->value(id_);
}

double Var::scalar() const {
    const Tensor& v = value();
    if (v.size() != 1) throw ShapeMismatch("Var::scalar on a non-scalar value");
    return v(0, 0);
}

// ---- Tape -----------------------------------------------------------------

namespace {

std::size_t tensor_bytes(const Tensor& t) { return static_cast<std::size_t>(t.size()) * sizeof(double); }

}  // namespace

void Tape::track(std::ptrdiff_t delta) {
    bytes_ = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(bytes_) + delta);
    peak_bytes_ = std::max(peak_bytes_, bytes_);
}

int Tape::push(Node node) {
    track(static_cast<std::ptrdiff_t>(tensor_bytes(node.value)));
    nodes_.push_back(std::move(node));
    return static_cast<int>(nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    n.op = "constant";
    return {this, push(std::move(n))};
}

Var Tape::scalar_constant(double v) {
    Tensor t(1, 1);
    t(0, 0) = v;
    return constant(std::move(t));
}

Var Tape::variable(Tensor value) {
    Node n;
    n.value = std::move(value);
    n.op = "variable";
    n.requires_grad = recording();
    return {this, push(std::move(n))};
}

Var Tape::parameter(const ParameterSet& params, std::size_t block, bool trainable) {
    if (params_ != nullptr && params_ != &params) {
        throw InvalidArgument("a tape may bind parameters from a single ParameterSet");
    }
    params_ = &params;
    Node n;
    n.value = params.block_values(block);
    n.op = "parameter";
    if (trainable && recording()) {
        n.requires_grad = true;
        n.param_offset = static_cast<std::int64_t>(params.block(block).offset);
    }
    return {this, push(std::move(n))};
}

Var Tape::record(std::string_view op, Tensor value, std::vector<int> inputs, BackwardFn backward) {
    Node n;
    n.value = std::move(value);
    n.op = op;
    if (recording()) {
        for (int i : inputs) {
            if (nodes_[static_cast<std::size_t>(i)].requires_grad) n.requires_grad = true;
        }
        if (n.requires_grad) {
            n.inputs = std::move(inputs);
            n.backward = std::move(backward);
        }
    }
    return {this, push(std::move(n))};
}

const Tensor& Tape::grad(int node) const { return nodes_[static_cast<std::size_t>(node)].grad; }

Tensor Tape::grad(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id())];
    if (n.grad.size() == 0) return Tensor::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

void Tape::accumulate_grad(int node, const Tensor& g) {
    Node& n = nodes_[static_cast<std::size_t>(node)];
    if (!n.requires_grad) return;
    if (g.rows() != n.value.rows() || g.cols() != n.value.cols()) {
        throw ShapeMismatch("gradient shape does not match node value (op '" + std::string(n.op) + "')");
    }
    if (n.grad.size() == 0) {
        n.grad = g;
        track(static_cast<std::ptrdiff_t>(tensor_bytes(n.grad)));
    } else {
        n.grad += g;
    }
}

std::vector<double> Tape::backward(Var out, double seed) {
    const Tensor& v = out.value();
    return backward(out, Tensor::Constant(v.rows(), v.cols(), seed));
}

std::vector<double> Tape::backward(Var out, const Tensor& seed) {
    if (consumed_) throw StaleTape("backward called on a tape that was already back-propagated");
    if (!recording()) throw StaleTape("backward called on a tape recorded without gradients");
    if (out.tape() != this) throw InvalidArgument("backward output belongs to another tape");
    consumed_ = true;

    std::vector<double> result;
    if (params_ != nullptr) result.assign(params_->size(), 0.0);

    accumulate_grad(out.id(), seed);
    for (int id = out.id(); id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.requires_grad || n.grad.size() == 0) continue;
        if (n.backward) {
            n.backward(*this, id);
        } else if (n.param_offset >= 0) {
            const auto off = static_cast<std::size_t>(n.param_offset);
            const double* g = n.grad.data();
            for (Eigen::Index i = 0; i < n.grad.size(); ++i) result[off + static_cast<std::size_t>(i)] += g[i];
        }
    }
    return result;
}

// ---- broadcasting helpers -------------------------------------------------

namespace {

struct Shape {
    Eigen::Index rows;
    Eigen::Index cols;
};

Shape broadcast_shape(const Tensor& a, const Tensor& b, std::string_view op) {
    auto compat = [](Eigen::Index x, Eigen::Index y) { return x == y || x == 1 || y == 1; };
    if (!compat(a.rows(), b.rows()) || !compat(a.cols(), b.cols())) {
        throw ShapeMismatch("cannot broadcast " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                            " with " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) + " in '" +
                            std::string(op) + "'");
    }
    return {std::max(a.rows(), b.rows()), std::max(a.cols(), b.cols())};
}

Tensor expand(const Tensor& t, Shape s) {
    if (t.rows() == s.rows && t.cols() == s.cols) return t;
    if (t.rows() == 1 && t.cols() == 1) return Tensor::Constant(s.rows, s.cols, t(0, 0));
    if (t.rows() == 1) return t.replicate(s.rows, 1);
    return t.replicate(1, s.cols);
}

Tensor reduce_to(const Tensor& g, Eigen::Index rows, Eigen::Index cols) {
    if (g.rows() == rows && g.cols() == cols) return g;
    if (rows == 1 && cols == 1) {
        Tensor r(1, 1);
        r(0, 0) = g.sum();
        return r;
    }
    if (rows == 1) return g.colwise().sum();
    return g.rowwise().sum();
}

template <typename Forward, typename GradA, typename GradB>
Var binary(std::string_view op, Var a, Var b, Forward fwd, GradA ga, GradB gb) {
    Tape* tape = a.tape();
    if (tape != b.tape()) throw InvalidArgument("operands of '" + std::string(op) + "' live on different tapes");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const Shape s = broadcast_shape(av, bv, op);
    Tensor ae = expand(av, s);
    Tensor be = expand(bv, s);
    Tensor out = fwd(ae.array(), be.array()).matrix();
    const int ia = a.id();
    const int ib = b.id();
    return tape->record(op, std::move(out), {ia, ib}, [ia, ib, ga, gb](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        const Shape sh{g.rows(), g.cols()};
        const Tensor& avv = t.value(ia);
        const Tensor& bvv = t.value(ib);
        const Tensor ae2 = expand(avv, sh);
        const Tensor be2 = expand(bvv, sh);
        if (t.requires_grad(ia)) {
            Tensor da = ga(g.array(), ae2.array(), be2.array(), t.value(self).array()).matrix();
            t.accumulate_grad(ia, reduce_to(da, avv.rows(), avv.cols()));
        }
        if (t.requires_grad(ib)) {
            Tensor db = gb(g.array(), ae2.array(), be2.array(), t.value(self).array()).matrix();
            t.accumulate_grad(ib, reduce_to(db, bvv.rows(), bvv.cols()));
        }
    });
}

template <typename Forward, typename Grad>
Var unary(std::string_view op, Var a, Forward fwd, Grad grad) {
    Tape* tape = a.tape();
    Tensor out = fwd(a.value().array()).matrix();
    const int ia = a.id();
    return tape->record(op, std::move(out), {ia}, [ia, grad](Tape& t, int self) {
        Tensor da = grad(t.grad(self).array(), t.value(ia).array(), t.value(self).array()).matrix();
        t.accumulate_grad(ia, da);
    });
}

double softplus_scalar(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid_scalar(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

// ---- primitives -------------------------------------------------------------

Var add(Var a, Var b) {
    return binary(
        "add", a, b, [](const auto& x, const auto& y) { return x + y; },
        [](const auto& g, const auto&, const auto&, const auto&) { return g; },
        [](const auto& g, const auto&, const auto&, const auto&) { return g; });
}

Var sub(Var a, Var b) {
    return binary(
        "sub", a, b, [](const auto& x, const auto& y) { return x - y; },
        [](const auto& g, const auto&, const auto&, const auto&) { return g; },
        [](const auto& g, const auto&, const auto&, const auto&) { return -g; });
}

Var mul(Var a, Var b) {
    return binary(
        "mul", a, b, [](const auto& x, const auto& y) { return x * y; },
        [](const auto& g, const auto&, const auto& y, const auto&) { return g * y; },
        [](const auto& g, const auto& x, const auto&, const auto&) { return g * x; });
}

Var div(Var a, Var b) {
    return binary(
        "div", a, b, [](const auto& x, const auto& y) { return x / y; },
        [](const auto& g, const auto&, const auto& y, const auto&) { return g / y; },
        [](const auto& g, const auto&, const auto& y, const auto& out) { return -g * out / y; });
}

Var maximum(Var a, Var b) {
    return binary(
        "max", a, b, [](const auto& x, const auto& y) { return (x >= y).select(x, y); },
        [](const auto& g, const auto& x, const auto& y, const auto&) { return (x >= y).select(g, 0.0 * g); },
        [](const auto& g, const auto& x, const auto& y, const auto&) { return (x >= y).select(0.0 * g, g); });
}

Var neg(Var a) {
    return unary(
        "neg", a, [](const auto& x) { return -x; }, [](const auto& g, const auto&, const auto&) { return -g; });
}

Var exp(Var a) {
    return unary(
        "exp", a, [](const auto& x) { return x.exp(); },
        [](const auto& g, const auto&, const auto& y) { return g * y; });
}

Var log(Var a) {
    return unary(
        "log", a, [](const auto& x) { return x.log(); },
        [](const auto& g, const auto& x, const auto&) { return g / x; });
}

Var sin(Var a) {
    return unary(
        "sin", a, [](const auto& x) { return x.sin(); },
        [](const auto& g, const auto& x, const auto&) { return g * x.cos(); });
}

Var cos(Var a) {
    return unary(
        "cos", a, [](const auto& x) { return x.cos(); },
        [](const auto& g, const auto& x, const auto&) { return -g * x.sin(); });
}

Var sqrt(Var a) {
    return unary(
        "sqrt", a, [](const auto& x) { return x.sqrt(); },
        [](const auto& g, const auto&, const auto& y) { return g * 0.5 / y; });
}

Var tanh(Var a) {
    return unary(
        "tanh", a, [](const auto& x) { return x.tanh(); },
        [](const auto& g, const auto&, const auto& y) { return g * (1.0 - y * y); });
}

Var sigmoid(Var a) {
    return unary(
        "sigmoid", a, [](const auto& x) { return x.unaryExpr(&sigmoid_scalar); },
        [](const auto& g, const auto&, const auto& y) { return g * y * (1.0 - y); });
}

Var softplus(Var a) {
    return unary(
        "softplus", a, [](const auto& x) { return x.unaryExpr(&softplus_scalar); },
        [](const auto& g, const auto& x, const auto&) { return g * x.unaryExpr(&sigmoid_scalar); });
}

Var square(Var a) {
    return unary(
        "square", a, [](const auto& x) { return x.square(); },
        [](const auto& g, const auto& x, const auto&) { return 2.0 * g * x; });
}

Var reciprocal_norm(Var a) {
    const Tensor& av = a.value();
    Tensor out(av.rows(), 1);
    for (Eigen::Index i = 0; i < av.rows(); ++i) {
        const double n = av.row(i).norm();
        out(i, 0) = n > 0.0 ? 1.0 / n : 0.0;
    }
    const int ia = a.id();
    return a.tape()->record("reciprocal_norm", std::move(out), {ia}, [ia](Tape& t, int self) {
        const Tensor& x = t.value(ia);
        const Tensor& r = t.value(self);
        const Tensor& g = t.grad(self);
        Tensor dx(x.rows(), x.cols());
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            const double ri = r(i, 0);
            dx.row(i) = -g(i, 0) * ri * ri * ri * x.row(i);
        }
        t.accumulate_grad(ia, dx);
    });
}

Var linear(Var x, Var w, Var b) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    const Tensor& bv = b.value();
    if (xv.cols() != wv.cols() || bv.rows() != 1 || bv.cols() != wv.rows()) {
        throw ShapeMismatch("linear: x is " + std::to_string(xv.rows()) + "x" + std::to_string(xv.cols()) +
                            ", W is " + std::to_string(wv.rows()) + "x" + std::to_string(wv.cols()));
    }
    Tensor out = xv * wv.transpose();
    out.rowwise() += bv.row(0);
    const int ix = x.id();
    const int iw = w.id();
    const int ib = b.id();
    return x.tape()->record("linear", std::move(out), {ix, iw, ib}, [ix, iw, ib](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(ix)) t.accumulate_grad(ix, Tensor(g * t.value(iw)));
        if (t.requires_grad(iw)) t.accumulate_grad(iw, Tensor(g.transpose() * t.value(ix)));
        if (t.requires_grad(ib)) t.accumulate_grad(ib, Tensor(g.colwise().sum()));
    });
}

Var matmul(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.cols() != bv.rows()) throw ShapeMismatch("matmul inner dimensions differ");
    Tensor out = av * bv;
    const int ia = a.id();
    const int ib = b.id();
    return a.tape()->record("matmul", std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(ia)) t.accumulate_grad(ia, Tensor(g * t.value(ib).transpose()));
        if (t.requires_grad(ib)) t.accumulate_grad(ib, Tensor(t.value(ia).transpose() * g));
    });
}

Var sum(Var a) {
    Tensor out(1, 1);
    out(0, 0) = a.value().sum();
    const int ia = a.id();
    return a.tape()->record("sum", std::move(out), {ia}, [ia](Tape& t, int self) {
        const Tensor& x = t.value(ia);
        t.accumulate_grad(ia, Tensor(Tensor::Constant(x.rows(), x.cols(), t.grad(self)(0, 0))));
    });
}

Var mean(Var a) {
    const Tensor& av = a.value();
    if (av.size() == 0) throw ShapeMismatch("mean of an empty tensor");
    Tensor out(1, 1);
    out(0, 0) = av.mean();
    const int ia = a.id();
    return a.tape()->record("mean", std::move(out), {ia}, [ia](Tape& t, int self) {
        const Tensor& x = t.value(ia);
        const double g = t.grad(self)(0, 0) / static_cast<double>(x.size());
        t.accumulate_grad(ia, Tensor(Tensor::Constant(x.rows(), x.cols(), g)));
    });
}

Var row_sum(Var a) {
    Tensor out = a.value().rowwise().sum();
    const int ia = a.id();
    return a.tape()->record("row_sum", std::move(out), {ia}, [ia](Tape& t, int self) {
        const Tensor& x = t.value(ia);
        t.accumulate_grad(ia, Tensor(t.grad(self).replicate(1, x.cols())));
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw InvalidArgument("concat_cols needs at least one input");
    Tape* tape = parts.front().tape();
    const Eigen::Index rows = parts.front().rows();
    Eigen::Index cols = 0;
    std::vector<int> ids;
    std::vector<Eigen::Index> widths;
    for (const Var& p : parts) {
        if (p.tape() != tape) throw InvalidArgument("concat_cols inputs live on different tapes");
        if (p.rows() != rows) throw ShapeMismatch("concat_cols row counts differ");
        ids.push_back(p.id());
        widths.push_back(p.cols());
        cols += p.cols();
    }
    Tensor out(rows, cols);
    Eigen::Index c = 0;
    for (const Var& p : parts) {
        out.middleCols(c, p.cols()) = p.value();
        c += p.cols();
    }
    return tape->record("concat_cols", std::move(out), ids, [ids, widths](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Eigen::Index start = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (t.requires_grad(ids[k])) t.accumulate_grad(ids[k], Tensor(g.middleCols(start, widths[k])));
            start += widths[k];
        }
    });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
    const Tensor& av = a.value();
    if (start < 0 || count < 0 || start + count > av.cols()) throw ShapeMismatch("slice_cols out of range");
    Tensor out = av.middleCols(start, count);
    const int ia = a.id();
    return a.tape()->record("slice_cols", std::move(out), {ia}, [ia, start, count](Tape& t, int self) {
        const Tensor& x = t.value(ia);
        Tensor dx = Tensor::Zero(x.rows(), x.cols());
        dx.middleCols(start, count) = t.grad(self);
        t.accumulate_grad(ia, dx);
    });
}

Var gather_rows(Var a, std::vector<std::int64_t> index) {
    const Tensor& av = a.value();
    Tensor out = Tensor::Zero(static_cast<Eigen::Index>(index.size()), av.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
        const auto src = index[i];
        if (src < -1 || src >= av.rows()) throw ShapeMismatch("gather_rows index out of range");
        if (src >= 0) out.row(static_cast<Eigen::Index>(i)) = av.row(src);
    }
    const int ia = a.id();
    return a.tape()->record("gather_rows", std::move(out), {ia}, [ia, idx = std::move(index)](Tape& t, int self) {
        const Tensor& x = t.value(ia);
        const Tensor& g = t.grad(self);
        Tensor dx = Tensor::Zero(x.rows(), x.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] >= 0) dx.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
        }
        t.accumulate_grad(ia, dx);
    });
}

Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
    const Tensor& av = a.value();
    if (rows * cols != av.size()) throw ShapeMismatch("reshape changes the element count");
    Tensor out = Eigen::Map<const Tensor>(av.data(), rows, cols);
    const int ia = a.id();
    return a.tape()->record("reshape", std::move(out), {ia}, [ia](Tape& t, int self) {
        const Tensor& x = t.value(ia);
        const Tensor& g = t.grad(self);
        t.accumulate_grad(ia, Tensor(Eigen::Map<const Tensor>(g.data(), x.rows(), x.cols())));
    });
}

Var positional_encoding(Var x, int num_levels) {
    const Tensor& xv = x.value();
    if (xv.cols() != 3) throw ShapeMismatch("positional_encoding expects Nx3 input");
    if (num_levels < 1) throw InvalidArgument("encoding needs at least one level");
    Tensor out(xv.rows(), 6 * num_levels);
    for (Eigen::Index i = 0; i < xv.rows(); ++i) {
        double scale = 1.0;
        for (int l = 0; l < num_levels; ++l, scale *= 2.0) {
            for (int k = 0; k < 3; ++k) {
                out(i, 6 * l + k) = std::sin(scale * xv(i, k));
                out(i, 6 * l + 3 + k) = std::cos(scale * xv(i, k));
            }
        }
    }
    const int ix = x.id();
    return x.tape()->record("positional_encoding", std::move(out), {ix}, [ix, num_levels](Tape& t, int self) {
        const Tensor& xv2 = t.value(ix);
        const Tensor& y = t.value(self);
        const Tensor& g = t.grad(self);
        Tensor dx = Tensor::Zero(xv2.rows(), 3);
        for (Eigen::Index i = 0; i < xv2.rows(); ++i) {
            double scale = 1.0;
            for (int l = 0; l < num_levels; ++l, scale *= 2.0) {
                for (int k = 0; k < 3; ++k) {
                    // d sin(s x) = s cos(s x), d cos(s x) = -s sin(s x)
                    dx(i, k) += scale * (g(i, 6 * l + k) * y(i, 6 * l + 3 + k) - g(i, 6 * l + 3 + k) * y(i, 6 * l + k));
                }
            }
        }
        t.accumulate_grad(ix, dx);
    });
}

Var operator+(Var a, Var b) { return add(a, b); }
Var operator-(Var a, Var b) { return sub(a, b); }
Var operator*(Var a, Var b) { return mul(a, b); }
Var operator/(Var a, Var b) { return div(a, b); }
Var operator-(Var a) { return neg(a); }
Var operator*(Var a, double s) { return mul(a, a.tape()->scalar_constant(s)); }
Var operator*(double s, Var a) { return mul(a.tape()->scalar_constant(s), a); }
Var operator+(Var a, double s) { return add(a, a.tape()->scalar_constant(s)); }
Var operator+(double s, Var a) { return add(a.tape()->scalar_constant(s), a); }
Var operator-(Var a, double s) { return sub(a, a.tape()->scalar_constant(s)); }
Var operator-(double s, Var a) { return sub(a.tape()->scalar_constant(s), a); }

// ---- registry ---------------------------------------------------------------

namespace {

struct Registered {
    std::size_t arity;
    std::function<Var(std::span<const Var>)> fn;
};

const std::map<std::string, Registered, std::less<>>& registry() {
    static const std::map<std::string, Registered, std::less<>> table = {
        {"add", {2, [](std::span<const Var> v) { return add(v[0], v[1]); }}},
        {"sub", {2, [](std::span<const Var> v) { return sub(v[0], v[1]); }}},
        {"mul", {2, [](std::span<const Var> v) { return mul(v[0], v[1]); }}},
        {"div", {2, [](std::span<const Var> v) { return div(v[0], v[1]); }}},
        {"max", {2, [](std::span<const Var> v) { return maximum(v[0], v[1]); }}},
        {"neg", {1, [](std::span<const Var> v) { return neg(v[0]); }}},
        {"exp", {1, [](std::span<const Var> v) { return exp(v[0]); }}},
        {"log", {1, [](std::span<const Var> v) { return log(v[0]); }}},
        {"sin", {1, [](std::span<const Var> v) { return sin(v[0]); }}},
        {"cos", {1, [](std::span<const Var> v) { return cos(v[0]); }}},
        {"sqrt", {1, [](std::span<const Var> v) { return sqrt(v[0]); }}},
        {"tanh", {1, [](std::span<const Var> v) { return tanh(v[0]); }}},
        {"sigmoid", {1, [](std::span<const Var> v) { return sigmoid(v[0]); }}},
        {"softplus", {1, [](std::span<const Var> v) { return softplus(v[0]); }}},
        {"square", {1, [](std::span<const Var> v) { return square(v[0]); }}},
        {"reciprocal_norm", {1, [](std::span<const Var> v) { return reciprocal_norm(v[0]); }}},
        {"linear", {3, [](std::span<const Var> v) { return linear(v[0], v[1], v[2]); }}},
        {"matmul", {2, [](std::span<const Var> v) { return matmul(v[0], v[1]); }}},
        {"sum", {1, [](std::span<const Var> v) { return sum(v[0]); }}},
        {"mean", {1, [](std::span<const Var> v) { return mean(v[0]); }}},
        {"row_sum", {1, [](std::span<const Var> v) { return row_sum(v[0]); }}},
    };
    return table;
}

}  // namespace

Var Tape::apply(std::string_view op, std::initializer_list<Var> args) {
    const auto& table = registry();
    const auto it = table.find(op);
    if (it == table.end()) throw UnsupportedOperation("unregistered primitive '" + std::string(op) + "'");
    if (args.size() != it->second.arity) {
        throw InvalidArgument("primitive '" + std::string(op) + "' expects " + std::to_string(it->second.arity) +
                              " arguments");
    }
    for (const Var& v : args) {
        if (v.tape() != this) throw InvalidArgument("argument of '" + std::string(op) + "' belongs to another tape");
    }
    return it->second.fn(std::span<const Var>(args.begin(), args.size()));
}

bool Tape::is_registered(std::string_view op) { return registry().contains(op); }

std::vector<std::string> Tape::registered_ops() {
    std::vector<std::string> names;
    for (const auto& [name, _] : registry()) names.push_back(name);
    return names;
}

// ---- finite differences -----------------------------------------------------

std::vector<double> finite_difference_gradient(const ScalarFunction& f, std::span<const double> x, double step) {
    if (!(step > 0.0)) throw InvalidArgument("finite-difference step must be positive");
    std::vector<double> probe(x.begin(), x.end());
    std::vector<double> grad(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + step;
        const double fp = f(probe);
        probe[i] = orig - step;
        const double fm = f(probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    return grad;
}

}  // namespace dvne::ad
