#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "langneck/common.hpp"
#include "langneck/rng.hpp"

namespace langneck {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// Test hook: when set, the gelu backward rule is deliberately wrong.
// Exists so gradient checking has a negative control.
inline bool& sabotage_backward() {
    static bool flag = false;
    return flag;
}

inline bool& tape_enabled() {
    thread_local bool flag = true;
    return flag;
}

// Disables tape recording in a scope (evaluation passes).
struct NoGradGuard {
    NoGradGuard() : prev_(tape_enabled()) { tape_enabled() = false; }
    ~NoGradGuard() { tape_enabled() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Dense row-major 64-bit tensor participating in a dynamically recorded
// reverse-mode tape. The tape is the implicit DAG of nodes reachable
// through `parents`; recording happens whenever an input needs gradients.
class Tensor {
public:
    struct Node {
        Shape shape;
        std::vector<double> value;
        std::vector<double> grad;  // allocated lazily, same length as value
        bool requires_grad = false;
        bool backward_ran = false;
        std::vector<std::shared_ptr<Node>> parents;      // grad-needing inputs, in tape order
        std::function<void(Node&)> backward_fn;          // scatters node.grad into parents

        bool needs_grad() const { return requires_grad || !parents.empty(); }
        std::vector<double>& ensure_grad() {
            if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
            return grad;
        }
    };

    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
        : node_(std::make_shared<Node>()) {
        node_->shape = std::move(shape);
        node_->value.assign(numel(node_->shape), fill);
        node_->requires_grad = requires_grad;
    }

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (numel(shape) != data.size()) throw DimError("tensor data length does not match shape");
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, double sigma = 1.0, bool requires_grad = false) {
        Tensor t(std::move(shape), 0.0, requires_grad);
        for (double& v : t.data()) v = rng.normal(0.0, sigma);
        return t;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }
    std::size_t rows() const { return node_->shape.at(0); }
    std::size_t cols() const { return node_->shape.at(1); }

    std::vector<double>& data() { return node_->value; }
    const std::vector<double>& data() const { return node_->value; }
    double item() const {
        if (size() != 1) throw DimError("item() on non-scalar tensor");
        return node_->value[0];
    }
    double at(std::size_t i) const { return node_->value.at(i); }
    double at(std::size_t i, std::size_t j) const { return node_->value.at(i * cols() + j); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }
    bool needs_grad() const { return node_ && node_->needs_grad(); }

    // Shallow const: gradient storage lives in the shared node and the
    // backward closures capture tensors by value.
    std::vector<double>& grad() const { return node_->ensure_grad(); }
    void zero_grad() {
        std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
        node_->backward_ran = false;
    }

    std::shared_ptr<Node>& node() { return node_; }
    const std::shared_ptr<Node>& node() const { return node_; }

    // Reverse-mode sweep from a scalar root. Gradients accumulate
    // additively into every requires_grad leaf; caller resets between
    // steps. A second sweep from the same root is an error.
    void backward() const {
        if (!node_) throw DimError("backward on undefined tensor");
        if (size() != 1) throw DimError("backward root must be scalar");
        if (node_->backward_ran) throw ArgumentError("backward already ran on this tape; reset first");
        node_->backward_ran = true;

        // iterative post-order topological sort over the parent DAG
        std::vector<Node*> topo;
        std::unordered_set<Node*> visited;
        std::vector<std::pair<Node*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        visited.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                Node* p = n->parents[next++].get();
                if (visited.insert(p).second) stack.emplace_back(p, 0);
            } else {
                topo.push_back(n);
                stack.pop_back();
            }
        }

        node_->ensure_grad()[0] = 1.0;
        for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
            Node* n = *it;
            if (n->backward_fn) {
                n->ensure_grad();
                n->backward_fn(*n);
            }
        }
    }

private:
    std::shared_ptr<Node> node_;
};

namespace detail {

inline void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v) {
        if (!std::isfinite(x)) throw NumericError(std::string(op) + " produced a non-finite value");
    }
}

// Assembles an op result: finiteness check, then tape recording if any
// input needs gradients.
inline Tensor make_op(Shape shape, std::vector<double> value,
                      std::initializer_list<Tensor> inputs,
                      std::function<void(Tensor::Node&)> backward_fn,
                      const char* op) {
    check_finite(value, op);
    Tensor out = Tensor::from(std::move(shape), std::move(value));
    if (tape_enabled()) {
        for (const Tensor& in : inputs) {
            if (in.needs_grad()) out.node()->parents.push_back(in.node());
        }
    }
    if (!out.node()->parents.empty()) out.node()->backward_fn = std::move(backward_fn);
    return out;
}

// C[m x p] += or = A[m x k] * B[k x p], ikj order for contiguous access.
inline void matmul_nn(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t p, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * p, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * p;
        for (std::size_t l = 0; l < k; ++l) {
            const double av = arow[l];
            const double* brow = b + l * p;
            for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x k] += A[m x p] * B^T where B is [k x p].
inline void matmul_nt_acc(const double* a, const double* b, double* c,
                          std::size_t m, std::size_t p, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * p;
        double* crow = c + i * k;
        for (std::size_t j = 0; j < k; ++j) {
            const double* brow = b + j * p;
            double acc = 0.0;
            for (std::size_t l = 0; l < p; ++l) acc += arow[l] * brow[l];
            crow[j] += acc;
        }
    }
}

// C[k x p] += A^T * B where A is [m x k], B is [m x p].
inline void matmul_tn_acc(const double* a, const double* b, double* c,
                          std::size_t m, std::size_t k, std::size_t p) {
    for (std::size_t l = 0; l < m; ++l) {
        const double* arow = a + l * k;
        const double* brow = b + l * p;
        for (std::size_t i = 0; i < k; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + i * p;
            for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// ---- elementwise and structural primitives ----

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw DimError("add: shape mismatch");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return detail::make_op(a.shape(), std::move(out), {a, b},
        [a, b](Tensor::Node& n) {
            for (Tensor t : {a, b}) {
                if (!t.needs_grad()) continue;
                auto& g = t.grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
            }
        }, "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw DimError("sub: shape mismatch");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return detail::make_op(a.shape(), std::move(out), {a, b},
        [a, b](Tensor::Node& n) {
            if (a.needs_grad()) {
                auto& g = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
            }
            if (b.needs_grad()) {
                auto& g = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
            }
        }, "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw DimError("mul: shape mismatch");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return detail::make_op(a.shape(), std::move(out), {a, b},
        [a, b](Tensor::Node& n) {
            if (a.needs_grad()) {
                auto& g = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * b.data()[i];
            }
            if (b.needs_grad()) {
                auto& g = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * a.data()[i];
            }
        }, "mul");
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    return detail::make_op(a.shape(), std::move(out), {a},
        [a, c](Tensor::Node& n) {
            auto& g = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * c;
        }, "scale");
}

// Adds a length-N row vector to every row of an M x N matrix (bias add).
inline Tensor add_rowwise(const Tensor& x, const Tensor& b) {
    if (x.ndim() != 2 || b.ndim() != 1 || x.cols() != b.shape()[0])
        throw DimError("add_rowwise: expected MxN and N");
    const std::size_t m = x.rows(), nc = x.cols();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < nc; ++j) out[i * nc + j] = x.at(i, j) + b.at(j);
    return detail::make_op(x.shape(), std::move(out), {x, b},
        [x, b, m, nc](Tensor::Node& n) {
            if (x.needs_grad()) {
                auto& g = x.grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
            }
            if (b.needs_grad()) {
                auto& g = b.grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < nc; ++j) g[j] += n.grad[i * nc + j];
            }
        }, "add_rowwise");
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size()) throw DimError("reshape: element count mismatch");
    return detail::make_op(std::move(shape), x.data(), {x},
        [x](Tensor::Node& n) {
            auto& g = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }, "reshape");
}

inline Tensor transpose(const Tensor& x) {
    if (x.ndim() != 2) throw DimError("transpose: expected rank-2 tensor");
    const std::size_t m = x.rows(), nc = x.cols();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < nc; ++j) out[j * m + i] = x.at(i, j);
    return detail::make_op({nc, m}, std::move(out), {x},
        [x, m, nc](Tensor::Node& n) {
            auto& g = x.grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < nc; ++j) g[i * nc + j] += n.grad[j * m + i];
        }, "transpose");
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols())
        throw DimError("concat_rows: column counts differ");
    std::vector<double> out;
    out.reserve(a.size() + b.size());
    out.insert(out.end(), a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    return detail::make_op({a.rows() + b.rows(), a.cols()}, std::move(out), {a, b},
        [a, b](Tensor::Node& n) {
            if (a.needs_grad()) {
                auto& g = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
            }
            if (b.needs_grad()) {
                auto& g = b.grad();
                const std::size_t off = a.size();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[off + i];
            }
        }, "concat_rows");
}

// Rows [r0, r1) of a rank-2 tensor.
inline Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1) {
    if (x.ndim() != 2) throw DimError("slice_rows: expected rank-2 tensor");
    if (r0 >= r1 || r1 > x.rows()) throw DimError("slice_rows: bad row range");
    const std::size_t nc = x.cols();
    std::vector<double> out(x.data().begin() + r0 * nc, x.data().begin() + r1 * nc);
    return detail::make_op({r1 - r0, nc}, std::move(out), {x},
        [x, r0, nc](Tensor::Node& n) {
            auto& g = x.grad();
            const std::size_t off = r0 * nc;
            for (std::size_t i = 0; i < n.grad.size(); ++i) g[off + i] += n.grad[i];
        }, "slice_rows");
}

// Columns [c0, c1) of a rank-2 tensor.
inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
    if (x.ndim() != 2) throw DimError("slice_cols: expected rank-2 tensor");
    if (c0 >= c1 || c1 > x.cols()) throw DimError("slice_cols: bad column range");
    const std::size_t m = x.rows(), nc = x.cols(), w = c1 - c0;
    std::vector<double> out(m * w);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x.at(i, c0 + j);
    return detail::make_op({m, w}, std::move(out), {x},
        [x, c0, m, nc, w](Tensor::Node& n) {
            auto& g = x.grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < w; ++j) g[i * nc + c0 + j] += n.grad[i * w + j];
        }, "slice_cols");
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.rows() != b.rows())
        throw DimError("concat_cols: row counts differ");
    const std::size_t m = a.rows(), ca = a.cols(), cb = b.cols();
    std::vector<double> out(m * (ca + cb));
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < ca; ++j) out[i * (ca + cb) + j] = a.at(i, j);
        for (std::size_t j = 0; j < cb; ++j) out[i * (ca + cb) + ca + j] = b.at(i, j);
    }
    return detail::make_op({m, ca + cb}, std::move(out), {a, b},
        [a, b, m, ca, cb](Tensor::Node& n) {
            if (a.needs_grad()) {
                auto& g = a.grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < ca; ++j) g[i * ca + j] += n.grad[i * (ca + cb) + j];
            }
            if (b.needs_grad()) {
                auto& g = b.grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < cb; ++j) g[i * cb + j] += n.grad[i * (ca + cb) + ca + j];
            }
        }, "concat_cols");
}

// ---- reductions ----

inline Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return detail::make_op({1}, {s}, {x},
        [x](Tensor::Node& n) {
            auto& g = x.grad();
            for (double& gi : g) gi += n.grad[0];
        }, "sum_all");
}

inline Tensor mean_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    const double inv = 1.0 / static_cast<double>(x.size());
    return detail::make_op({1}, {s * inv}, {x},
        [x, inv](Tensor::Node& n) {
            auto& g = x.grad();
            for (double& gi : g) gi += n.grad[0] * inv;
        }, "mean_all");
}

// Mean over rows: M x N -> N.
inline Tensor mean_axis0(const Tensor& x) {
    if (x.ndim() != 2) throw DimError("mean_axis0: expected rank-2 tensor");
    const std::size_t m = x.rows(), nc = x.cols();
    std::vector<double> out(nc, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < nc; ++j) out[j] += x.at(i, j);
    const double inv = 1.0 / static_cast<double>(m);
    for (double& v : out) v *= inv;
    return detail::make_op({nc}, std::move(out), {x},
        [x, m, nc, inv](Tensor::Node& n) {
            auto& g = x.grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < nc; ++j) g[i * nc + j] += n.grad[j] * inv;
        }, "mean_axis0");
}

// ---- matmul ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2) throw DimError("matmul: expected rank-2 tensors");
    if (a.cols() != b.rows()) throw DimError("matmul: inner extents differ");
    const std::size_t m = a.rows(), k = a.cols(), p = b.cols();
    std::vector<double> out(m * p);
    detail::matmul_nn(a.data().data(), b.data().data(), out.data(), m, k, p, false);
    return detail::make_op({m, p}, std::move(out), {a, b},
        [a, b, m, k, p](Tensor::Node& n) {
            if (a.needs_grad())
                detail::matmul_nt_acc(n.grad.data(), b.data().data(), a.grad().data(), m, p, k);
            if (b.needs_grad())
                detail::matmul_tn_acc(a.data().data(), n.grad.data(), b.grad().data(), m, k, p);
        }, "matmul");
}

// ---- nonlinearities ----

// tanh approximation: 0.5 x (1 + tanh(c (x + a x^3))),
// c = sqrt(2/pi) = 0.7978845608028654, a = 0.044715.
inline constexpr double kGeluC = 0.7978845608028654;
inline constexpr double kGeluA = 0.044715;

inline Tensor gelu(const Tensor& x) {
    constexpr double kC = kGeluC;
    constexpr double kA = kGeluA;
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x.data()[i];
        out[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
    }
    return detail::make_op(x.shape(), std::move(out), {x},
        [x](Tensor::Node& n) {
            auto& g = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double v = x.data()[i];
                const double u = kGeluC * (v + kGeluA * v * v * v);
                const double t = std::tanh(u);
                double d = 0.5 * (1.0 + t) +
                           0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
                if (sabotage_backward()) d *= 1.05;
                g[i] += n.grad[i] * d;
            }
        }, "gelu");
}

// Softmax over the last axis with max subtraction.
inline Tensor softmax(const Tensor& x) {
    if (x.ndim() == 0 || x.shape().back() == 0) throw DimError("softmax: empty axis");
    const std::size_t width = x.shape().back();
    const std::size_t rows = x.size() / width;
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data().data() + r * width;
        double* o = out.data() + r * width;
        double mx = in[0];
        for (std::size_t j = 1; j < width; ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < width; ++j) {
            o[j] = std::exp(in[j] - mx);
            sum += o[j];
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < width; ++j) o[j] *= inv;
    }
    // reads its own output back out of n.value; capturing the output node
    // would create a shared_ptr cycle and leak the whole upstream graph
    return detail::make_op(x.shape(), std::move(out), {x},
        [x, width, rows](Tensor::Node& n) {
            auto& g = x.grad();
            const auto& s = n.value;
            for (std::size_t r = 0; r < rows; ++r) {
                const double* srow = s.data() + r * width;
                const double* grow = n.grad.data() + r * width;
                double dot = 0.0;
                for (std::size_t j = 0; j < width; ++j) dot += grow[j] * srow[j];
                for (std::size_t j = 0; j < width; ++j)
                    g[r * width + j] += srow[j] * (grow[j] - dot);
            }
        }, "softmax");
}

// Layer norm over the last axis. Zero-variance rows map to zeros
// (eps = 1e-5 inside the square root).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    if (x.ndim() == 0) throw DimError("layer_norm: scalar input");
    const std::size_t width = x.shape().back();
    if (gain.size() != width || bias.size() != width)
        throw DimError("layer_norm: gain/bias length must match last axis");
    constexpr double kEps = 1e-5;
    const std::size_t rows = x.size() / width;
    std::vector<double> out(x.size());
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto istds = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data().data() + r * width;
        double mu = 0.0;
        for (std::size_t j = 0; j < width; ++j) mu += in[j];
        mu /= static_cast<double>(width);
        double var = 0.0;
        for (std::size_t j = 0; j < width; ++j) var += (in[j] - mu) * (in[j] - mu);
        var /= static_cast<double>(width);
        const double istd = 1.0 / std::sqrt(var + kEps);
        (*istds)[r] = istd;
        for (std::size_t j = 0; j < width; ++j) {
            const double xh = (in[j] - mu) * istd;
            (*xhat)[r * width + j] = xh;
            out[r * width + j] = gain.at(j) * xh + bias.at(j);
        }
    }
    return detail::make_op(x.shape(), std::move(out), {x, gain, bias},
        [x, gain, bias, width, rows, xhat, istds](Tensor::Node& n) {
            const double invw = 1.0 / static_cast<double>(width);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* grow = n.grad.data() + r * width;
                const double* xh = xhat->data() + r * width;
                if (gain.needs_grad()) {
                    auto& gg = gain.grad();
                    for (std::size_t j = 0; j < width; ++j) gg[j] += grow[j] * xh[j];
                }
                if (bias.needs_grad()) {
                    auto& gb = bias.grad();
                    for (std::size_t j = 0; j < width; ++j) gb[j] += grow[j];
                }
                if (x.needs_grad()) {
                    auto& gx = x.grad();
                    const double istd = (*istds)[r];
                    double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                    for (std::size_t j = 0; j < width; ++j) {
                        const double dxh = grow[j] * gain.at(j);
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[j];
                    }
                    for (std::size_t j = 0; j < width; ++j) {
                        const double dxh = grow[j] * gain.at(j);
                        gx[r * width + j] +=
                            istd * (dxh - invw * sum_dxh - xh[j] * invw * sum_dxh_xh);
                    }
                }
            }
        }, "layer_norm");
}

// ---- embedding and losses ----

// Gathers rows of E[V x d] by token id; gradient scatter-adds into E.
inline Tensor embedding_lookup(const Tensor& table, const std::vector<std::size_t>& ids) {
    if (table.ndim() != 2) throw DimError("embedding_lookup: table must be rank-2");
    const std::size_t v = table.rows(), d = table.cols();
    std::vector<double> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= v) throw IndexError("embedding_lookup: id out of range");
        std::copy_n(table.data().begin() + ids[i] * d, d, out.begin() + i * d);
    }
    return detail::make_op({ids.size(), d}, std::move(out), {table},
        [table, ids, d](Tensor::Node& n) {
            auto& g = table.grad();
            for (std::size_t i = 0; i < ids.size(); ++i)
                for (std::size_t j = 0; j < d; ++j) g[ids[i] * d + j] += n.grad[i * d + j];
        }, "embedding_lookup");
}

// Mean over the batch of -log softmax(logits)[label]; fused stable form.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
    if (logits.ndim() != 2) throw DimError("cross_entropy: logits must be B x C");
    const std::size_t b = logits.rows(), c = logits.cols();
    if (labels.size() != b) throw DimError("cross_entropy: label count must match batch");
    auto probs = std::make_shared<std::vector<double>>(logits.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        if (labels[i] >= c) throw IndexError("cross_entropy: label out of range");
        const double* row = logits.data().data() + i * c;
        double mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            (*probs)[i * c + j] = std::exp(row[j] - mx);
            sum += (*probs)[i * c + j];
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] *= inv;
        loss -= std::log((*probs)[i * c + labels[i]]);
    }
    loss /= static_cast<double>(b);
    return detail::make_op({1}, {loss}, {logits},
        [logits, labels, probs, b, c](Tensor::Node& n) {
            auto& g = logits.grad();
            const double w = n.grad[0] / static_cast<double>(b);
            for (std::size_t i = 0; i < b; ++i) {
                for (std::size_t j = 0; j < c; ++j) g[i * c + j] += w * (*probs)[i * c + j];
                g[i * c + labels[i]] -= w;
            }
        }, "cross_entropy");
}

// u.v / (||u|| ||v|| + 1e-8); epsilon-regularized against zero norms.
inline Tensor cosine_similarity(const Tensor& u, const Tensor& v) {
    if (u.size() != v.size()) throw DimError("cosine_similarity: length mismatch");
    constexpr double kEps = 1e-8;
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += u.data()[i] * v.data()[i];
        nu += u.data()[i] * u.data()[i];
        nv += v.data()[i] * v.data()[i];
    }
    nu = std::sqrt(nu);
    nv = std::sqrt(nv);
    const double denom = nu * nv + kEps;
    const double c = dot / denom;
    return detail::make_op({1}, {c}, {u, v},
        [u, v, nu, nv, denom, c](Tensor::Node& n) {
            const double g0 = n.grad[0];
            if (u.needs_grad()) {
                auto& g = u.grad();
                const double k = (nu > 1e-12) ? c * nv / (nu * denom) : 0.0;
                for (std::size_t i = 0; i < g.size(); ++i)
                    g[i] += g0 * (v.data()[i] / denom - k * u.data()[i]);
            }
            if (v.needs_grad()) {
                auto& g = v.grad();
                const double k = (nv > 1e-12) ? c * nu / (nv * denom) : 0.0;
                for (std::size_t i = 0; i < g.size(); ++i)
                    g[i] += g0 * (u.data()[i] / denom - k * v.data()[i]);
            }
        }, "cosine_similarity");
}

// ---- attention ----

// softmax(q k^T / sqrt(dk) [+ causal mask]) v, composed from primitives
// so the backward rule follows from the tape. The causal mask requires a
// square score matrix (decoder self-attention).
inline Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                   bool causal = false) {
    if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2)
        throw DimError("scaled_dot_attention: expected rank-2 tensors");
    if (q.cols() != k.cols()) throw DimError("scaled_dot_attention: q/k width mismatch");
    if (k.rows() != v.rows()) throw DimError("scaled_dot_attention: k/v length mismatch");
    Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(q.cols())));
    if (causal) {
        if (q.rows() != k.rows()) throw DimError("scaled_dot_attention: causal mask needs square scores");
        const std::size_t n = q.rows();
        Tensor mask({n, n}, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) mask.data()[i * n + j] = -1e30;
        scores = add(scores, mask);
    }
    return matmul(softmax(scores), v);
}

// ---- gradient checking ----

// Max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-12),
// numeric by central differences with step h.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double h = 1e-5) {
    Tensor probe = Tensor::from(x.shape(), x.data(), true);
    Tensor y = f(probe);
    if (y.size() != 1) throw DimError("grad_check: f must be scalar-valued");
    y.backward();
    const std::vector<double> analytic = probe.grad();

    double max_err = 0.0;
    std::vector<double> vals = x.data();
    for (std::size_t i = 0; i < vals.size(); ++i) {
        const double orig = vals[i];
        vals[i] = orig + h;
        const double fp = f(Tensor::from(x.shape(), vals)).item();
        vals[i] = orig - h;
        const double fm = f(Tensor::from(x.shape(), vals)).item();
        vals[i] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-12});
        max_err = std::max(max_err, std::fabs(analytic[i] - numeric) / denom);
    }
    return max_err;
}

}  // namespace langneck
