#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major matrices.
//
// Every value is a 2-D matrix. Spatial maps use token layout ((h*w) x channels),
// so convolutions, attention and per-pixel heads all reduce to matrix products.
// A Var is a shared handle to a graph node; ops record a backward closure only
// when at least one input requires a gradient and grad mode is enabled.

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ovcos/errors.hpp"
#include "ovcos/image.hpp"

namespace ovcos::ag {

struct Node {
    Matrix value;
    Matrix grad; // empty until something is accumulated
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    void accumulate(const Matrix& g)
    {
        if (grad.size() == 0)
            grad = g;
        else
            grad += g;
    }
};

using NodePtr = std::shared_ptr<Node>;

inline bool& grad_mode_flag()
{
    thread_local bool enabled = true;
    return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

/// Disables graph recording for its lifetime (inference, frozen backbone).
class NoGradGuard {
public:
    NoGradGuard() : previous_(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

class Var {
public:
    Var() = default;
    explicit Var(Matrix value, bool requires_grad = false) : node_(std::make_shared<Node>())
    {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }
    explicit Var(NodePtr node) : node_(std::move(node)) {}

    bool defined() const { return static_cast<bool>(node_); }
    const Matrix& value() const { return node_->value; }
    /// Direct write access for optimizers and finite-difference probes.
    Matrix& mutable_value() { return node_->value; }
    const Matrix& grad() const { return node_->grad; }
    bool has_grad() const { return node_->grad.size() != 0; }
    bool requires_grad() const { return node_->requires_grad; }
    Eigen::Index rows() const { return node_->value.rows(); }
    Eigen::Index cols() const { return node_->value.cols(); }
    double item() const
    {
        require(rows() == 1 && cols() == 1, "Var::item on a non-scalar");
        return node_->value(0, 0);
    }
    void zero_grad() { node_->grad.resize(0, 0); }
    Var detach() const { return Var(node_->value, false); }
    const NodePtr& node() const { return node_; }

private:
    NodePtr node_;
};

inline Var constant(Matrix value) { return Var(std::move(value), false); }
inline Var parameter(Matrix value) { return Var(std::move(value), true); }

inline Var scalar(double v)
{
    Matrix m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
}

namespace detail {

template <class Backward>
Var record(Matrix value, std::initializer_list<Var> inputs, Backward&& backward)
{
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any && grad_enabled()) {
        node->requires_grad = true;
        for (const auto& in : inputs) node->inputs.push_back(in.node());
        node->backward = std::forward<Backward>(backward);
    }
    return Var(std::move(node));
}

template <class Backward>
Var record_many(Matrix value, const std::vector<Var>& inputs, Backward&& backward)
{
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any && grad_enabled()) {
        node->requires_grad = true;
        for (const auto& in : inputs) node->inputs.push_back(in.node());
        node->backward = std::forward<Backward>(backward);
    }
    return Var(std::move(node));
}

inline void push(const NodePtr& input, const Matrix& g)
{
    if (input->requires_grad) input->accumulate(g);
}

inline void check_same_shape(const Var& a, const Var& b, const char* op)
{
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw InvalidInput(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                           std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                           std::to_string(b.cols()) + ")");
}

} // namespace detail

/// Runs reverse accumulation from a scalar root. Leaf gradients accumulate
/// across calls; callers reset them with Var::zero_grad.
inline void backward(const Var& root)
{
    require(root.rows() == 1 && root.cols() == 1, "backward: root must be a scalar");
    if (!root.requires_grad()) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && !seen.count(child)) {
                seen.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->accumulate(Matrix::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward && node->grad.size() != 0) node->backward(*node);
    }
    // Release interior gradients and closures; leaves keep theirs.
    for (Node* node : order) {
        if (node->backward) {
            node->grad.resize(0, 0);
        }
    }
}

// ---------------------------------------------------------------- elementwise

inline Var add(const Var& a, const Var& b)
{
    detail::check_same_shape(a, b, "add");
    return detail::record(a.value() + b.value(), {a, b}, [](Node& self) {
        detail::push(self.inputs[0], self.grad);
        detail::push(self.inputs[1], self.grad);
    });
}

inline Var sub(const Var& a, const Var& b)
{
    detail::check_same_shape(a, b, "sub");
    return detail::record(a.value() - b.value(), {a, b}, [](Node& self) {
        detail::push(self.inputs[0], self.grad);
        detail::push(self.inputs[1], -self.grad);
    });
}

inline Var mul(const Var& a, const Var& b)
{
    detail::check_same_shape(a, b, "mul");
    return detail::record(a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
        const Matrix& av = self.inputs[0]->value;
        const Matrix& bv = self.inputs[1]->value;
        detail::push(self.inputs[0], self.grad.cwiseProduct(bv));
        detail::push(self.inputs[1], self.grad.cwiseProduct(av));
    });
}

inline Var div(const Var& a, const Var& b)
{
    detail::check_same_shape(a, b, "div");
    return detail::record(a.value().cwiseQuotient(b.value()), {a, b}, [](Node& self) {
        const Matrix& bv = self.inputs[1]->value;
        detail::push(self.inputs[0], self.grad.cwiseQuotient(bv));
        detail::push(self.inputs[1], -self.grad.cwiseProduct(self.value).cwiseQuotient(bv));
    });
}

inline Var scale(const Var& a, double s)
{
    return detail::record(a.value() * s, {a}, [s](Node& self) { detail::push(self.inputs[0], self.grad * s); });
}

inline Var add_scalar(const Var& a, double s)
{
    Matrix v = a.value().array() + s;
    return detail::record(std::move(v), {a}, [](Node& self) { detail::push(self.inputs[0], self.grad); });
}

/// 1 - a, the complement used for convex blends and background maps.
inline Var one_minus(const Var& a) { return add_scalar(scale(a, -1.0), 1.0); }

/// a (n x c) + row (1 x c), broadcast over rows.
inline Var add_row(const Var& a, const Var& row)
{
    require(row.rows() == 1 && row.cols() == a.cols(), "add_row: row vector width mismatch");
    Matrix v = a.value().rowwise() + row.value().row(0);
    return detail::record(std::move(v), {a, row}, [](Node& self) {
        detail::push(self.inputs[0], self.grad);
        detail::push(self.inputs[1], self.grad.colwise().sum());
    });
}

/// a (n x c) * col (n x 1), broadcast over columns.
inline Var mul_col(const Var& a, const Var& col)
{
    require(col.cols() == 1 && col.rows() == a.rows(), "mul_col: column vector height mismatch");
    Matrix v = a.value().array().colwise() * col.value().col(0).array();
    return detail::record(std::move(v), {a, col}, [](Node& self) {
        const Matrix& av = self.inputs[0]->value;
        const Matrix& cv = self.inputs[1]->value;
        detail::push(self.inputs[0], Matrix(self.grad.array().colwise() * cv.col(0).array()));
        detail::push(self.inputs[1], self.grad.cwiseProduct(av).rowwise().sum());
    });
}

/// a (n x c) * row (1 x c), broadcast over rows.
inline Var mul_row(const Var& a, const Var& row)
{
    require(row.rows() == 1 && row.cols() == a.cols(), "mul_row: row vector width mismatch");
    Matrix v = a.value().array().rowwise() * row.value().row(0).array();
    return detail::record(std::move(v), {a, row}, [](Node& self) {
        const Matrix& av = self.inputs[0]->value;
        const Matrix& rv = self.inputs[1]->value;
        detail::push(self.inputs[0], Matrix(self.grad.array().rowwise() * rv.row(0).array()));
        detail::push(self.inputs[1], self.grad.cwiseProduct(av).colwise().sum());
    });
}

inline Var reciprocal(const Var& a)
{
    Matrix v = a.value().cwiseInverse();
    return detail::record(std::move(v), {a}, [](Node& self) {
        detail::push(self.inputs[0], Matrix(-self.grad.array() * self.value.array().square()));
    });
}

/// a (n x c) * s (1 x 1) with a differentiable scalar.
inline Var mul_scalar(const Var& a, const Var& s)
{
    require(s.rows() == 1 && s.cols() == 1, "mul_scalar: expected 1x1 scalar");
    return detail::record(a.value() * s.value()(0, 0), {a, s}, [](Node& self) {
        const double sv = self.inputs[1]->value(0, 0);
        detail::push(self.inputs[0], self.grad * sv);
        Matrix gs(1, 1);
        gs(0, 0) = self.grad.cwiseProduct(self.inputs[0]->value).sum();
        detail::push(self.inputs[1], gs);
    });
}

inline double sigmoid_value(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Var sigmoid(const Var& a)
{
    Matrix v = a.value().unaryExpr([](double x) { return sigmoid_value(x); });
    return detail::record(std::move(v), {a}, [](Node& self) {
        const Matrix& y = self.value;
        detail::push(self.inputs[0], Matrix(self.grad.array() * y.array() * (1.0 - y.array())));
    });
}

inline Var relu(const Var& a)
{
    Matrix v = a.value().cwiseMax(0.0);
    return detail::record(std::move(v), {a}, [](Node& self) {
        const Matrix& x = self.inputs[0]->value;
        detail::push(self.inputs[0], Matrix((x.array() > 0.0).select(self.grad.array(), 0.0)));
    });
}

inline Var exp(const Var& a)
{
    Matrix v = a.value().array().exp();
    return detail::record(std::move(v), {a}, [](Node& self) {
        detail::push(self.inputs[0], self.grad.cwiseProduct(self.value));
    });
}

inline Var log(const Var& a)
{
    Matrix v = a.value().array().log();
    return detail::record(std::move(v), {a}, [](Node& self) {
        detail::push(self.inputs[0], self.grad.cwiseQuotient(self.inputs[0]->value));
    });
}

inline Var abs(const Var& a)
{
    Matrix v = a.value().cwiseAbs();
    return detail::record(std::move(v), {a}, [](Node& self) {
        const Matrix& x = self.inputs[0]->value;
        Matrix sign = x.unaryExpr([](double t) { return t > 0.0 ? 1.0 : (t < 0.0 ? -1.0 : 0.0); });
        detail::push(self.inputs[0], self.grad.cwiseProduct(sign));
    });
}

inline Var square(const Var& a)
{
    Matrix v = a.value().cwiseAbs2();
    return detail::record(std::move(v), {a}, [](Node& self) {
        detail::push(self.inputs[0], 2.0 * self.grad.cwiseProduct(self.inputs[0]->value));
    });
}

/// Clamp with zero gradient outside [lo, hi].
inline Var clamp(const Var& a, double lo, double hi)
{
    Matrix v = a.value().cwiseMax(lo).cwiseMin(hi);
    return detail::record(std::move(v), {a}, [lo, hi](Node& self) {
        const Matrix& x = self.inputs[0]->value;
        detail::push(self.inputs[0],
                     Matrix((x.array() >= lo && x.array() <= hi).select(self.grad.array(), 0.0)));
    });
}

// ---------------------------------------------------------------- reductions

inline Var sum_all(const Var& a)
{
    Matrix v(1, 1);
    v(0, 0) = a.value().sum();
    return detail::record(std::move(v), {a}, [](Node& self) {
        const auto& in = self.inputs[0]->value;
        detail::push(self.inputs[0], Matrix::Constant(in.rows(), in.cols(), self.grad(0, 0)));
    });
}

inline Var mean_all(const Var& a)
{
    const double n = static_cast<double>(a.value().size());
    return scale(sum_all(a), 1.0 / n);
}

/// Column sums: (n x c) -> (1 x c).
inline Var sum_rows(const Var& a)
{
    Matrix v = a.value().colwise().sum();
    return detail::record(std::move(v), {a}, [](Node& self) {
        const auto& in = self.inputs[0]->value;
        Matrix g = self.grad.replicate(in.rows(), 1);
        detail::push(self.inputs[0], g);
    });
}

/// Row-wise maximum: (n x k) -> (n x 1); ties resolve to the lowest column.
inline Var max_rows(const Var& a)
{
    const Matrix& x = a.value();
    Matrix v(x.rows(), 1);
    std::vector<Eigen::Index> arg(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        Eigen::Index best = 0;
        for (Eigen::Index c = 1; c < x.cols(); ++c)
            if (x(r, c) > x(r, best)) best = c;
        arg[static_cast<std::size_t>(r)] = best;
        v(r, 0) = x(r, best);
    }
    return detail::record(std::move(v), {a}, [arg = std::move(arg)](Node& self) {
        const auto& in = self.inputs[0]->value;
        Matrix g = Matrix::Zero(in.rows(), in.cols());
        for (Eigen::Index r = 0; r < in.rows(); ++r) g(r, arg[static_cast<std::size_t>(r)]) = self.grad(r, 0);
        detail::push(self.inputs[0], g);
    });
}

/// Row-wise mean: (n x k) -> (n x 1).
inline Var mean_rows(const Var& a)
{
    const double k = static_cast<double>(a.cols());
    Matrix v = a.value().rowwise().sum() / k;
    return detail::record(std::move(v), {a}, [k](Node& self) {
        const auto& in = self.inputs[0]->value;
        detail::push(self.inputs[0], Matrix(self.grad.replicate(1, in.cols()) / k));
    });
}

// ---------------------------------------------------------------- linear algebra

inline Var matmul(const Var& a, const Var& b)
{
    if (a.cols() != b.rows())
        throw InvalidInput("matmul: inner dimension mismatch (" + std::to_string(a.cols()) + " vs " +
                           std::to_string(b.rows()) + ")");
    Matrix v = a.value() * b.value();
    return detail::record(std::move(v), {a, b}, [](Node& self) {
        const Matrix& av = self.inputs[0]->value;
        const Matrix& bv = self.inputs[1]->value;
        if (self.inputs[0]->requires_grad) self.inputs[0]->accumulate(self.grad * bv.transpose());
        if (self.inputs[1]->requires_grad) self.inputs[1]->accumulate(av.transpose() * self.grad);
    });
}

inline Var transpose(const Var& a)
{
    Matrix v = a.value().transpose();
    return detail::record(std::move(v), {a}, [](Node& self) {
        detail::push(self.inputs[0], Matrix(self.grad.transpose()));
    });
}

/// Numerically stable softmax over each row.
inline Var softmax_rows(const Var& a)
{
    const Matrix& x = a.value();
    Matrix v(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double m = x.row(r).maxCoeff();
        auto e = (x.row(r).array() - m).exp();
        v.row(r) = e / e.sum();
    }
    return detail::record(std::move(v), {a}, [](Node& self) {
        const Matrix& y = self.value;
        Matrix dot = self.grad.cwiseProduct(y).rowwise().sum();
        Matrix g = y.array() * (self.grad.array().colwise() - dot.col(0).array());
        detail::push(self.inputs[0], g);
    });
}

/// Scales each row to unit L2 norm; zero rows stay zero (gradient zero).
inline Var l2_normalize_rows(const Var& a)
{
    const Matrix& x = a.value();
    Matrix norms = x.rowwise().norm();
    Matrix v = x;
    for (Eigen::Index r = 0; r < x.rows(); ++r)
        v.row(r) = norms(r, 0) > 0.0 ? Matrix(x.row(r) / norms(r, 0)) : Matrix::Zero(1, x.cols());
    return detail::record(std::move(v), {a}, [norms](Node& self) {
        const Matrix& y = self.value;
        Matrix g = Matrix::Zero(y.rows(), y.cols());
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
            if (norms(r, 0) <= 0.0) continue;
            const double d = self.grad.row(r).dot(y.row(r));
            g.row(r) = (self.grad.row(r) - d * y.row(r)) / norms(r, 0);
        }
        detail::push(self.inputs[0], g);
    });
}

inline Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count)
{
    require(start >= 0 && start + count <= a.cols(), "slice_cols: range out of bounds");
    Matrix v = a.value().middleCols(start, count);
    return detail::record(std::move(v), {a}, [start, count](Node& self) {
        const auto& in = self.inputs[0]->value;
        Matrix g = Matrix::Zero(in.rows(), in.cols());
        g.middleCols(start, count) = self.grad;
        detail::push(self.inputs[0], g);
    });
}

inline Var concat_cols(const std::vector<Var>& parts)
{
    require(!parts.empty(), "concat_cols: no inputs");
    Eigen::Index total = 0;
    for (const auto& p : parts) {
        require(p.rows() == parts.front().rows(), "concat_cols: row count mismatch");
        total += p.cols();
    }
    Matrix v(parts.front().rows(), total);
    Eigen::Index off = 0;
    for (const auto& p : parts) {
        v.middleCols(off, p.cols()) = p.value();
        off += p.cols();
    }
    return detail::record_many(std::move(v), parts, [](Node& self) {
        Eigen::Index o = 0;
        for (auto& in : self.inputs) {
            const Eigen::Index c = in->value.cols();
            detail::push(in, Matrix(self.grad.middleCols(o, c)));
            o += c;
        }
    });
}

// ---------------------------------------------------------------- normalization

/// Per-token normalization over channels with a per-channel affine.
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5)
{
    require(gamma.rows() == 1 && gamma.cols() == x.cols() && beta.rows() == 1 && beta.cols() == x.cols(),
            "layer_norm: affine width mismatch");
    const Matrix& xv = x.value();
    const Eigen::Index n = xv.rows();
    const Eigen::Index c = xv.cols();
    Matrix xhat(n, c);
    Matrix inv_std(n, 1);
    for (Eigen::Index r = 0; r < n; ++r) {
        const double mu = xv.row(r).mean();
        const double var = (xv.row(r).array() - mu).square().mean();
        inv_std(r, 0) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r, 0);
    }
    Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
    return detail::record(std::move(out), {x, gamma, beta}, [xhat, inv_std](Node& self) {
        const Matrix& g = self.grad;
        const Matrix& gm = self.inputs[1]->value;
        if (self.inputs[0]->requires_grad) {
            Matrix gx_hat = g.array().rowwise() * gm.row(0).array();
            const double cn = static_cast<double>(gx_hat.cols());
            Matrix gx(gx_hat.rows(), gx_hat.cols());
            for (Eigen::Index r = 0; r < gx_hat.rows(); ++r) {
                const double m1 = gx_hat.row(r).sum() / cn;
                const double m2 = gx_hat.row(r).dot(xhat.row(r)) / cn;
                gx.row(r) = (gx_hat.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std(r, 0);
            }
            self.inputs[0]->accumulate(gx);
        }
        detail::push(self.inputs[1], g.cwiseProduct(xhat).colwise().sum());
        detail::push(self.inputs[2], g.colwise().sum());
    });
}

// ---------------------------------------------------------------- spatial ops

/// 3x3 patch extraction with zero padding: (h*w x c) -> (h*w x 9c),
/// column order (ky, kx, channel).
inline Var im2col3x3(const Var& x, int h, int w)
{
    require(x.rows() == static_cast<Eigen::Index>(h) * w, "im2col3x3: row count does not match h*w");
    const Eigen::Index c = x.cols();
    const Matrix& xv = x.value();
    Matrix v = Matrix::Zero(xv.rows(), 9 * c);
    for (int r = 0; r < h; ++r)
        for (int q = 0; q < w; ++q) {
            const Eigen::Index row = static_cast<Eigen::Index>(r) * w + q;
            for (int ky = 0; ky < 3; ++ky) {
                const int sr = r + ky - 1;
                if (sr < 0 || sr >= h) continue;
                for (int kx = 0; kx < 3; ++kx) {
                    const int sc = q + kx - 1;
                    if (sc < 0 || sc >= w) continue;
                    v.block(row, (ky * 3 + kx) * c, 1, c) = xv.row(static_cast<Eigen::Index>(sr) * w + sc);
                }
            }
        }
    return detail::record(std::move(v), {x}, [h, w, c](Node& self) {
        Matrix g = Matrix::Zero(static_cast<Eigen::Index>(h) * w, c);
        for (int r = 0; r < h; ++r)
            for (int q = 0; q < w; ++q) {
                const Eigen::Index row = static_cast<Eigen::Index>(r) * w + q;
                for (int ky = 0; ky < 3; ++ky) {
                    const int sr = r + ky - 1;
                    if (sr < 0 || sr >= h) continue;
                    for (int kx = 0; kx < 3; ++kx) {
                        const int sc = q + kx - 1;
                        if (sc < 0 || sc >= w) continue;
                        g.row(static_cast<Eigen::Index>(sr) * w + sc) += self.grad.block(row, (ky * 3 + kx) * c, 1, c);
                    }
                }
            }
        detail::push(self.inputs[0], g);
    });
}

/// Differentiable bilinear resize in token layout (half-pixel centers).
inline Var resize(const Var& x, int h, int w, int oh, int ow)
{
    if (h == oh && w == ow) return x;
    Matrix v = resize_bilinear(x.value(), h, w, oh, ow);
    return detail::record(std::move(v), {x}, [h, w, oh, ow](Node& self) {
        const auto ty = linear_taps(h, oh);
        const auto tx = linear_taps(w, ow);
        Matrix g = Matrix::Zero(static_cast<Eigen::Index>(h) * w, self.grad.cols());
        for (int r = 0; r < oh; ++r) {
            const auto& a = ty[static_cast<std::size_t>(r)];
            for (int c = 0; c < ow; ++c) {
                const auto& b = tx[static_cast<std::size_t>(c)];
                const auto go = self.grad.row(static_cast<Eigen::Index>(r) * ow + c);
                g.row(static_cast<Eigen::Index>(a.lo) * w + b.lo) += (1 - a.frac) * (1 - b.frac) * go;
                g.row(static_cast<Eigen::Index>(a.lo) * w + b.hi) += (1 - a.frac) * b.frac * go;
                g.row(static_cast<Eigen::Index>(a.hi) * w + b.lo) += a.frac * (1 - b.frac) * go;
                g.row(static_cast<Eigen::Index>(a.hi) * w + b.hi) += a.frac * b.frac * go;
            }
        }
        detail::push(self.inputs[0], g);
    });
}

/// Differentiable box-filter downsampling by integer factors, token layout.
inline Var resize_area(const Var& x, int h, int w, int oh, int ow)
{
    require(oh > 0 && ow > 0 && h % oh == 0 && w % ow == 0, "resize_area: target must divide the source size");
    require(x.rows() == static_cast<Eigen::Index>(h) * w, "resize_area: token count mismatch");
    if (h == oh && w == ow) return x;
    const int fy = h / oh;
    const int fx = w / ow;
    const double inv = 1.0 / (fy * fx);
    Matrix v = Matrix::Zero(static_cast<Eigen::Index>(oh) * ow, x.cols());
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            v.row(static_cast<Eigen::Index>(r / fy) * ow + c / fx) += x.value().row(static_cast<Eigen::Index>(r) * w + c);
    v *= inv;
    return detail::record(std::move(v), {x}, [h, w, ow, fy, fx, inv](Node& self) {
        Matrix g(static_cast<Eigen::Index>(h) * w, self.grad.cols());
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c)
                g.row(static_cast<Eigen::Index>(r) * w + c) =
                    inv * self.grad.row(static_cast<Eigen::Index>(r / fy) * ow + c / fx);
        detail::push(self.inputs[0], g);
    });
}

/// Mask downsampling for pooling: area averaging when the factors are
/// integral, bilinear otherwise.
inline Var downsample_mask(const Var& x, int h, int w, int oh, int ow)
{
    if (h % oh == 0 && w % ow == 0) return resize_area(x, h, w, oh, ow);
    return resize(x, h, w, oh, ow);
}

/// Zero-padded 'same' correlation of each channel with a fixed odd-sized kernel.
inline Matrix filter_same(const Matrix& x, int h, int w, const Matrix& kernel)
{
    const int kh = static_cast<int>(kernel.rows());
    const int kw = static_cast<int>(kernel.cols());
    const int py = kh / 2;
    const int px = kw / 2;
    Matrix out = Matrix::Zero(x.rows(), x.cols());
    if (x.cols() == 1) {
        const double* src = x.data();
        double* dst = out.data();
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) {
                double acc = 0.0;
                for (int ky = std::max(0, py - r); ky < std::min(kh, h + py - r); ++ky) {
                    const double* srow = src + static_cast<std::ptrdiff_t>(r + ky - py) * w;
                    for (int kx = std::max(0, px - c); kx < std::min(kw, w + px - c); ++kx)
                        acc += kernel(ky, kx) * srow[c + kx - px];
                }
                dst[static_cast<std::ptrdiff_t>(r) * w + c] = acc;
            }
        return out;
    }
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            auto dst = out.row(static_cast<Eigen::Index>(r) * w + c);
            for (int ky = 0; ky < kh; ++ky) {
                const int sr = r + ky - py;
                if (sr < 0 || sr >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                    const int sc = c + kx - px;
                    if (sc < 0 || sc >= w) continue;
                    dst += kernel(ky, kx) * x.row(static_cast<Eigen::Index>(sr) * w + sc);
                }
            }
        }
    return out;
}

inline Var filter(const Var& x, int h, int w, const Matrix& kernel)
{
    require(x.rows() == static_cast<Eigen::Index>(h) * w, "filter: row count does not match h*w");
    require(kernel.rows() % 2 == 1 && kernel.cols() % 2 == 1, "filter: kernel must have odd size");
    Matrix v = filter_same(x.value(), h, w, kernel);
    return detail::record(std::move(v), {x}, [h, w, kernel](Node& self) {
        Matrix flipped = kernel.reverse();
        detail::push(self.inputs[0], filter_same(self.grad, h, w, flipped));
    });
}

// ---------------------------------------------------------------- attention

namespace detail {

inline constexpr Eigen::Index kAttentionBlock = 64;

/// Row-wise softmax of (q_block k^T) * scale, in place into `p`.
inline void attention_probs(const Matrix& q_block, const Matrix& k, double scale, Matrix& p)
{
    p.resize(q_block.rows(), k.rows());
    p.noalias() = q_block * k.transpose();
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
        auto row = p.row(r).array();
        const double m = row.maxCoeff();
        row = ((row - m) * scale).exp();
        row *= 1.0 / row.sum();
    }
}

} // namespace detail

/// Multi-head scaled dot-product attention.
/// q: (n x c), k, v: (m x c); heads split the channel axis evenly.
/// Output (n x c) is the concatenation of per-head results. Queries are
/// processed in row blocks and probabilities are recomputed in backward.
inline Var attention(const Var& q, const Var& k, const Var& v, int heads)
{
    const Eigen::Index c = q.cols();
    require(heads > 0 && c % heads == 0, "attention: channels not divisible by heads");
    require(k.cols() == c && v.cols() == c, "attention: channel mismatch");
    require(k.rows() == v.rows(), "attention: key/value length mismatch");
    const Eigen::Index d = c / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d));
    const Matrix& qv = q.value();
    const Matrix& kv = k.value();
    const Matrix& vv = v.value();
    const Eigen::Index n = qv.rows();

    Matrix out(n, c);
    Matrix p;
    for (int hd = 0; hd < heads; ++hd) {
        const Matrix kh = kv.middleCols(hd * d, d);
        const Matrix vh = vv.middleCols(hd * d, d);
        for (Eigen::Index r0 = 0; r0 < n; r0 += detail::kAttentionBlock) {
            const Eigen::Index b = std::min(detail::kAttentionBlock, n - r0);
            const Matrix qb = qv.block(r0, hd * d, b, d);
            detail::attention_probs(qb, kh, inv_sqrt, p);
            out.block(r0, hd * d, b, d).noalias() = p * vh;
        }
    }
    return detail::record(std::move(out), {q, k, v}, [heads, d, inv_sqrt](Node& self) {
        const Matrix& qv = self.inputs[0]->value;
        const Matrix& kv = self.inputs[1]->value;
        const Matrix& vv = self.inputs[2]->value;
        const Eigen::Index n = qv.rows();
        Matrix gq = Matrix::Zero(qv.rows(), qv.cols());
        Matrix gk = Matrix::Zero(kv.rows(), kv.cols());
        Matrix gv = Matrix::Zero(vv.rows(), vv.cols());
        Matrix p, dp;
        for (int hd = 0; hd < heads; ++hd) {
            const Matrix kh = kv.middleCols(hd * d, d);
            const Matrix vh = vv.middleCols(hd * d, d);
            Matrix gkh = Matrix::Zero(kh.rows(), d);
            Matrix gvh = Matrix::Zero(vh.rows(), d);
            for (Eigen::Index r0 = 0; r0 < n; r0 += detail::kAttentionBlock) {
                const Eigen::Index b = std::min(detail::kAttentionBlock, n - r0);
                const Matrix qb = qv.block(r0, hd * d, b, d);
                const Matrix go = self.grad.block(r0, hd * d, b, d);
                detail::attention_probs(qb, kh, inv_sqrt, p);
                gvh.noalias() += p.transpose() * go;
                dp.noalias() = go * vh.transpose();
                for (Eigen::Index r = 0; r < b; ++r) {
                    const double dot = dp.row(r).dot(p.row(r));
                    dp.row(r) = (p.row(r).array() * (dp.row(r).array() - dot) * inv_sqrt).matrix();
                }
                gq.block(r0, hd * d, b, d).noalias() = dp * kh;
                gkh.noalias() += dp.transpose() * qb;
            }
            gk.middleCols(hd * d, d) = gkh;
            gv.middleCols(hd * d, d) = gvh;
        }
        detail::push(self.inputs[0], gq);
        detail::push(self.inputs[1], gk);
        detail::push(self.inputs[2], gv);
    });
}

// ---------------------------------------------------------------- checks

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

} // namespace ovcos::ag
