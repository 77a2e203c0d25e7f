#pragma once

// Dense f64 tensors with reverse-mode automatic differentiation.
//
// Every differentiable operation appends a node to an implicit tape (a DAG of
// shared nodes recorded in execution order); Tensor::backward() walks it in
// reverse topological order. Tensors that never touch the tape are plain
// immutable buffers and safe to share across threads.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <vector>

#include "satd/common.hpp"
#include "satd/rng.hpp"

namespace satd {

namespace detail {

struct Node {
    std::vector<std::size_t> dims;
    std::vector<double> data;
    std::vector<double> grad;  // allocated iff requires_grad
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::size_t size() const { return data.size(); }
    void ensure_grad() {
        if (requires_grad && grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

inline std::size_t product(const std::vector<std::size_t>& dims) {
    std::size_t n = 1;
    for (std::size_t d : dims) n *= d;
    return n;
}

}  // namespace detail

class Tensor {
  public:
    Tensor() : node_(std::make_shared<detail::Node>()) {}

    Tensor(std::vector<std::size_t> dims, std::vector<double> data, bool requires_grad = false) {
        if (detail::product(dims) != data.size())
            throw ShapeError(cat("tensor: ", data.size(), " values do not fill shape ",
                                 shape_str(dims)));
        node_ = std::make_shared<detail::Node>();
        node_->dims = std::move(dims);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
        node_->ensure_grad();
    }

    static Tensor zeros(std::vector<std::size_t> dims, bool requires_grad = false) {
        std::size_t n = detail::product(dims);
        return Tensor(std::move(dims), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(std::vector<std::size_t> dims, double v, bool requires_grad = false) {
        std::size_t n = detail::product(dims);
        return Tensor(std::move(dims), std::vector<double>(n, v), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor({}, {v}, requires_grad);
    }

    static Tensor vec(std::vector<double> v, bool requires_grad = false) {
        std::size_t n = v.size();
        return Tensor({n}, std::move(v), requires_grad);
    }

    static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> v,
                         bool requires_grad = false) {
        return Tensor({r, c}, std::move(v), requires_grad);
    }

    static Tensor randn(std::vector<std::size_t> dims, Rng& rng, double stddev = 1.0,
                        bool requires_grad = false) {
        std::size_t n = detail::product(dims);
        std::vector<double> v(n);
        for (double& x : v) x = stddev * rng.normal();
        return Tensor(std::move(dims), std::move(v), requires_grad);
    }

    const std::vector<std::size_t>& dims() const { return node_->dims; }
    std::size_t ndim() const { return node_->dims.size(); }
    std::size_t size() const { return node_->data.size(); }
    bool defined() const { return !node_->dims.empty() || node_->data.size() == 1; }

    // Row-major 2-D view: trailing extent is the column count, everything
    // before it collapses into rows. Scalars are 1x1.
    std::size_t cols() const { return node_->dims.empty() ? 1 : node_->dims.back(); }
    std::size_t rows() const { return cols() == 0 ? 0 : size() / cols(); }

    const std::vector<double>& data() const { return node_->data; }
    std::vector<double>& mutable_data() { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<double>& grad() const {
        if (!node_->requires_grad)
            throw ValueError("tensor: gradient requested from a non-differentiable tensor");
        return node_->grad;
    }

    void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

    double value() const {
        if (size() != 1) throw ShapeError(cat("tensor: value() on shape ", shape_str(dims())));
        return node_->data[0];
    }

    double at(std::size_t i) const { return node_->data.at(i); }

    double at2(std::size_t r, std::size_t c) const { return node_->data.at(r * cols() + c); }

    // Reverse pass from this scalar. Seeds d(self)/d(self) = 1 and accumulates
    // into the grad buffer of every reachable tensor with requires_grad.
    void backward() const {
        if (size() != 1)
            throw ShapeError(cat("backward: output must be scalar, got ", shape_str(dims())));
        if (!node_->requires_grad) return;

        // Iterative post-order DFS over grad-requiring nodes.
        std::vector<detail::Node*> order;
        std::unordered_set<detail::Node*> visited;
        std::vector<std::pair<detail::Node*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        visited.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, idx] = stack.back();
            if (idx < n->parents.size()) {
                detail::Node* p = n->parents[idx++].get();
                if (p->requires_grad && !visited.count(p)) {
                    visited.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        node_->grad.assign(1, 1.0);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            if ((*it)->backward_fn) (*it)->backward_fn(**it);
        }
    }

    // Stop-gradient: same values, no tape history.
    Tensor detach() const { return Tensor(dims(), data(), false); }

    std::shared_ptr<detail::Node> node() const { return node_; }

  private:
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
    std::shared_ptr<detail::Node> node_;

    friend Tensor make_op(std::vector<std::size_t> dims, std::vector<double> data,
                          std::vector<Tensor> parents, std::function<void(detail::Node&)> bw,
                          const char* op_name);
};

namespace detail {
inline void check_finite(const char* op, const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x)) throw EvalError(cat(op, ": produced a non-finite value"));
    }
}
}  // namespace detail

// Shared constructor for op results. Finiteness is part of the public
// contract, checked on every output.
inline Tensor make_op(std::vector<std::size_t> dims, std::vector<double> data,
                      std::vector<Tensor> parents, std::function<void(detail::Node&)> bw,
                      const char* op_name) {
    detail::check_finite(op_name, data);
    auto n = std::make_shared<detail::Node>();
    n->dims = std::move(dims);
    n->data = std::move(data);
    for (const Tensor& p : parents) {
        if (p.requires_grad()) n->requires_grad = true;
        n->parents.push_back(p.node());
    }
    if (n->requires_grad) {
        n->ensure_grad();
        n->backward_fn = std::move(bw);
    }
    return Tensor(std::move(n));
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.dims() != b.dims())
        throw ShapeError(cat(op, ": shapes ", shape_str(a.dims()), " and ", shape_str(b.dims()),
                             " differ"));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return make_op(a.dims(), std::move(out), {a, b},
                   [](detail::Node& n) {
                       for (int k = 0; k < 2; ++k) {
                           auto& p = *n.parents[k];
                           if (!p.requires_grad) continue;
                           p.ensure_grad();
                           for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
                       }
                   },
                   "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return make_op(a.dims(), std::move(out), {a, b},
                   [](detail::Node& n) {
                       auto& pa = *n.parents[0];
                       if (pa.requires_grad) {
                           pa.ensure_grad();
                           for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
                       }
                       auto& pb = *n.parents[1];
                       if (pb.requires_grad) {
                           pb.ensure_grad();
                           for (std::size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] -= n.grad[i];
                       }
                   },
                   "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return make_op(a.dims(), std::move(out), {a, b},
                   [](detail::Node& n) {
                       auto& pa = *n.parents[0];
                       auto& pb = *n.parents[1];
                       if (pa.requires_grad) {
                           pa.ensure_grad();
                           for (std::size_t i = 0; i < n.grad.size(); ++i)
                               pa.grad[i] += n.grad[i] * pb.data[i];
                       }
                       if (pb.requires_grad) {
                           pb.ensure_grad();
                           for (std::size_t i = 0; i < n.grad.size(); ++i)
                               pb.grad[i] += n.grad[i] * pa.data[i];
                       }
                   },
                   "mul");
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
    return make_op(a.dims(), std::move(out), {a},
                   [s](detail::Node& n) {
                       auto& p = *n.parents[0];
                       if (!p.requires_grad) return;
                       p.ensure_grad();
                       for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += s * n.grad[i];
                   },
                   "scale");
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + s;
    return make_op(a.dims(), std::move(out), {a},
                   [](detail::Node& n) {
                       auto& p = *n.parents[0];
                       if (!p.requires_grad) return;
                       p.ensure_grad();
                       for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
                   },
                   "add_scalar");
}

inline Tensor tanh_t(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.data()[i]);
    return make_op(a.dims(), std::move(out), {a},
                   [](detail::Node& n) {
                       auto& p = *n.parents[0];
                       if (!p.requires_grad) return;
                       p.ensure_grad();
                       for (std::size_t i = 0; i < n.grad.size(); ++i)
                           p.grad[i] += n.grad[i] * (1.0 - n.data[i] * n.data[i]);
                   },
                   "tanh");
}

inline Tensor log_t(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (a.data()[i] <= 0.0) throw EvalError("log: input must be positive");
        out[i] = std::log(a.data()[i]);
    }
    return make_op(a.dims(), std::move(out), {a},
                   [](detail::Node& n) {
                       auto& p = *n.parents[0];
                       if (!p.requires_grad) return;
                       p.ensure_grad();
                       for (std::size_t i = 0; i < n.grad.size(); ++i)
                           p.grad[i] += n.grad[i] / p.data[i];
                   },
                   "log");
}

inline void require_matrix(const char* op, const Tensor& t) {
    if (t.ndim() != 2) throw ShapeError(cat(op, ": expected a matrix, got ", shape_str(t.dims())));
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix("matmul", a);
    require_matrix("matmul", b);
    const std::size_t m = a.dims()[0], k = a.dims()[1];
    const std::size_t k2 = b.dims()[0], n = b.dims()[1];
    if (k != k2)
        throw ShapeError(cat("matmul: inner dimensions disagree, ", shape_str(a.dims()), " vs ",
                             shape_str(b.dims())));
    std::vector<double> out(m * n, 0.0);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* po = out.data() + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double aik = pa[i * k + kk];
            const double* pbk = pb + kk * n;
            for (std::size_t j = 0; j < n; ++j) po[j] += aik * pbk[j];
        }
    }
    return make_op({m, n}, std::move(out), {a, b},
                   [m, k, n](detail::Node& nd) {
                       auto& pa = *nd.parents[0];
                       auto& pb = *nd.parents[1];
                       const double* g = nd.grad.data();
                       if (pa.requires_grad) {
                           pa.ensure_grad();
                           // dA = dOut * B^T
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t kk = 0; kk < k; ++kk) {
                                   double acc = 0.0;
                                   const double* gi = g + i * n;
                                   const double* bk = pb.data.data() + kk * n;
                                   for (std::size_t j = 0; j < n; ++j) acc += gi[j] * bk[j];
                                   pa.grad[i * k + kk] += acc;
                               }
                       }
                       if (pb.requires_grad) {
                           pb.ensure_grad();
                           // dB = A^T * dOut
                           for (std::size_t kk = 0; kk < k; ++kk)
                               for (std::size_t i = 0; i < m; ++i) {
                                   const double aik = pa.data[i * k + kk];
                                   const double* gi = g + i * n;
                                   double* bg = pb.grad.data() + kk * n;
                                   for (std::size_t j = 0; j < n; ++j) bg[j] += aik * gi[j];
                               }
                       }
                   },
                   "matmul");
}

inline Tensor transpose(const Tensor& a) {
    require_matrix("transpose", a);
    const std::size_t r = a.dims()[0], c = a.dims()[1];
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.data()[i * c + j];
    return make_op({c, r}, std::move(out), {a},
                   [r, c](detail::Node& n) {
                       auto& p = *n.parents[0];
                       if (!p.requires_grad) return;
                       p.ensure_grad();
                       for (std::size_t i = 0; i < r; ++i)
                           for (std::size_t j = 0; j < c; ++j)
                               p.grad[i * c + j] += n.grad[j * r + i];
                   },
                   "transpose");
}

inline Tensor reshape(const Tensor& a, std::vector<std::size_t> dims) {
    if (detail::product(dims) != a.size())
        throw ShapeError(cat("reshape: cannot view ", shape_str(a.dims()), " as ",
                             shape_str(dims)));
    return make_op(std::move(dims), a.data(), {a},
                   [](detail::Node& n) {
                       auto& p = *n.parents[0];
                       if (!p.requires_grad) return;
                       p.ensure_grad();
                       for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
                   },
                   "reshape");
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    require_matrix("concat_rows", a);
    require_matrix("concat_rows", b);
    if (a.dims()[1] != b.dims()[1])
        throw ShapeError(cat("concat_rows: column counts differ, ", shape_str(a.dims()), " vs ",
                             shape_str(b.dims())));
    std::vector<double> out;
    out.reserve(a.size() + b.size());
    out.insert(out.end(), a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    const std::size_t na = a.size();
    return make_op({a.dims()[0] + b.dims()[0], a.dims()[1]}, std::move(out), {a, b},
                   [na](detail::Node& n) {
                       auto& pa = *n.parents[0];
                       auto& pb = *n.parents[1];
                       if (pa.requires_grad) {
                           pa.ensure_grad();
                           for (std::size_t i = 0; i < na; ++i) pa.grad[i] += n.grad[i];
                       }
                       if (pb.requires_grad) {
                           pb.ensure_grad();
                           for (std::size_t i = na; i < n.grad.size(); ++i)
                               pb.grad[i - na] += n.grad[i];
                       }
                   },
                   "concat_rows");
}

inline Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
    require_matrix("slice_rows", a);
    const std::size_t r = a.dims()[0], c = a.dims()[1];
    if (r0 > r1 || r1 > r) throw ShapeError(cat("slice_rows: range [", r0, ",", r1,
                                                ") out of bounds for ", shape_str(a.dims())));
    std::vector<double> out(a.data().begin() + r0 * c, a.data().begin() + r1 * c);
    return make_op({r1 - r0, c}, std::move(out), {a},
                   [r0, c](detail::Node& n) {
                       auto& p = *n.parents[0];
                       if (!p.requires_grad) return;
                       p.ensure_grad();
                       for (std::size_t i = 0; i < n.grad.size(); ++i)
                           p.grad[r0 * c + i] += n.grad[i];
                   },
                   "slice_rows");
}

// Mean over rows of an n x d matrix, yielding a length-d vector.
inline Tensor mean_rows(const Tensor& a) {
    require_matrix("mean_rows", a);
    const std::size_t r = a.dims()[0], c = a.dims()[1];
    if (r == 0) throw ShapeError("mean_rows: matrix has no rows");
    std::vector<double> out(c, 0.0);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j] += a.data()[i * c + j];
    for (double& x : out) x /= static_cast<double>(r);
    return make_op({c}, std::move(out), {a},
                   [r, c](detail::Node& n) {
                       auto& p = *n.parents[0];
                       if (!p.requires_grad) return;
                       p.ensure_grad();
                       const double inv = 1.0 / static_cast<double>(r);
                       for (std::size_t i = 0; i < r; ++i)
                           for (std::size_t j = 0; j < c; ++j)
                               p.grad[i * c + j] += n.grad[j] * inv;
                   },
                   "mean_rows");
}

inline Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x;
    return make_op({}, {s}, {a},
                   [](detail::Node& n) {
                       auto& p = *n.parents[0];
                       if (!p.requires_grad) return;
                       p.ensure_grad();
                       for (double& g : p.grad) g += n.grad[0];
                   },
                   "sum_all");
}

inline Tensor mean_all(const Tensor& a) {
    if (a.size() == 0) throw ShapeError("mean_all: empty tensor");
    return scale(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

// Broadcast-add a length-d vector to every row of an n x d matrix.
inline Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    require_matrix("add_rowvec", a);
    if (v.ndim() != 1 || v.size() != a.dims()[1])
        throw ShapeError(cat("add_rowvec: vector ", shape_str(v.dims()),
                             " does not match columns of ", shape_str(a.dims())));
    const std::size_t r = a.dims()[0], c = a.dims()[1];
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a.data()[i * c + j] + v.data()[j];
    return make_op(a.dims(), std::move(out), {a, v},
                   [r, c](detail::Node& n) {
                       auto& pa = *n.parents[0];
                       auto& pv = *n.parents[1];
                       if (pa.requires_grad) {
                           pa.ensure_grad();
                           for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
                       }
                       if (pv.requires_grad) {
                           pv.ensure_grad();
                           for (std::size_t i = 0; i < r; ++i)
                               for (std::size_t j = 0; j < c; ++j) pv.grad[j] += n.grad[i * c + j];
                       }
                   },
                   "add_rowvec");
}

// Temperature softmax along the trailing axis, stabilized by row-max
// subtraction. Rows sum to 1 within 1e-12.
inline Tensor softmax_temp(const Tensor& z, double tau) {
    if (!(tau > 0.0)) throw ValueError(cat("softmax_temp: tau must be positive, got ", tau));
    const std::size_t c = z.cols(), r = z.rows();
    if (c == 0) throw ShapeError("softmax_temp: empty trailing dimension");
    std::vector<double> out(z.size());
    for (std::size_t i = 0; i < r; ++i) {
        const double* zi = z.data().data() + i * c;
        double* oi = out.data() + i * c;
        double m = zi[0];
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, zi[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            oi[j] = std::exp((zi[j] - m) / tau);
            s += oi[j];
        }
        for (std::size_t j = 0; j < c; ++j) oi[j] /= s;
    }
    return make_op(z.dims(), std::move(out), {z},
                   [r, c, tau](detail::Node& n) {
                       auto& p = *n.parents[0];
                       if (!p.requires_grad) return;
                       p.ensure_grad();
                       for (std::size_t i = 0; i < r; ++i) {
                           const double* y = n.data.data() + i * c;
                           const double* g = n.grad.data() + i * c;
                           double dot = 0.0;
                           for (std::size_t j = 0; j < c; ++j) dot += g[j] * y[j];
                           for (std::size_t j = 0; j < c; ++j)
                               p.grad[i * c + j] += y[j] * (g[j] - dot) / tau;
                       }
                   },
                   "softmax_temp");
}

// log(softmax_temp(z, tau)) computed directly; safe for very peaked rows.
inline Tensor log_softmax_temp(const Tensor& z, double tau) {
    if (!(tau > 0.0)) throw ValueError(cat("log_softmax_temp: tau must be positive, got ", tau));
    const std::size_t c = z.cols(), r = z.rows();
    if (c == 0) throw ShapeError("log_softmax_temp: empty trailing dimension");
    std::vector<double> out(z.size());
    for (std::size_t i = 0; i < r; ++i) {
        const double* zi = z.data().data() + i * c;
        double* oi = out.data() + i * c;
        double m = zi[0];
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, zi[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += std::exp((zi[j] - m) / tau);
        const double lse = std::log(s);
        for (std::size_t j = 0; j < c; ++j) oi[j] = (zi[j] - m) / tau - lse;
    }
    return make_op(z.dims(), std::move(out), {z},
                   [r, c, tau](detail::Node& n) {
                       auto& p = *n.parents[0];
                       if (!p.requires_grad) return;
                       p.ensure_grad();
                       for (std::size_t i = 0; i < r; ++i) {
                           const double* l = n.data.data() + i * c;
                           const double* g = n.grad.data() + i * c;
                           double gsum = 0.0;
                           for (std::size_t j = 0; j < c; ++j) gsum += g[j];
                           for (std::size_t j = 0; j < c; ++j)
                               p.grad[i * c + j] += (g[j] - std::exp(l[j]) * gsum) / tau;
                       }
                   },
                   "log_softmax_temp");
}

inline constexpr double kNormEps = 1e-12;

// Row-wise L2 normalization along the trailing axis.
inline Tensor l2_normalize(const Tensor& v) {
    const std::size_t c = v.cols(), r = v.rows();
    if (c == 0) throw ShapeError("l2_normalize: empty trailing dimension");
    std::vector<double> out(v.size());
    std::vector<double> norms(r);
    for (std::size_t i = 0; i < r; ++i) {
        const double* x = v.data().data() + i * c;
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += x[j] * x[j];
        const double nrm = std::sqrt(s);
        if (!(nrm > kNormEps))
            throw ValueError(cat("l2_normalize: degenerate vector at row ", i, " (norm ", nrm,
                                 ")"));
        norms[i] = nrm;
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[j] / nrm;
    }
    return make_op(v.dims(), std::move(out), {v},
                   [r, c, norms](detail::Node& n) {
                       auto& p = *n.parents[0];
                       if (!p.requires_grad) return;
                       p.ensure_grad();
                       for (std::size_t i = 0; i < r; ++i) {
                           const double* y = n.data.data() + i * c;
                           const double* g = n.grad.data() + i * c;
                           double dot = 0.0;
                           for (std::size_t j = 0; j < c; ++j) dot += g[j] * y[j];
                           for (std::size_t j = 0; j < c; ++j)
                               p.grad[i * c + j] += (g[j] - y[j] * dot) / norms[i];
                       }
                   },
                   "l2_normalize");
}

// Pairwise cosine similarities: (B x d, B' x d) -> B x B'.
inline Tensor cosine_sim_matrix(const Tensor& a, const Tensor& b) {
    require_matrix("cosine_sim_matrix", a);
    require_matrix("cosine_sim_matrix", b);
    if (a.dims()[1] != b.dims()[1])
        throw ShapeError(cat("cosine_sim_matrix: feature widths differ, ", shape_str(a.dims()),
                             " vs ", shape_str(b.dims())));
    return matmul(l2_normalize(a), transpose(l2_normalize(b)));
}

inline Tensor take_diag(const Tensor& m) {
    require_matrix("take_diag", m);
    const std::size_t r = m.dims()[0], c = m.dims()[1];
    const std::size_t k = std::min(r, c);
    std::vector<double> out(k);
    for (std::size_t i = 0; i < k; ++i) out[i] = m.data()[i * c + i];
    return make_op({k}, std::move(out), {m},
                   [c](detail::Node& n) {
                       auto& p = *n.parents[0];
                       if (!p.requires_grad) return;
                       p.ensure_grad();
                       for (std::size_t i = 0; i < n.grad.size(); ++i)
                           p.grad[i * c + i] += n.grad[i];
                   },
                   "take_diag");
}

inline Tensor stop_gradient(const Tensor& x) { return x.detach(); }

// Max relative error between analytic gradients and central finite
// differences, over every entry of every input.
inline double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                         std::vector<Tensor> inputs, double h) {
    for (auto& t : inputs) {
        if (!t.requires_grad())
            throw ValueError("grad_check: every input must have requires_grad");
        t.zero_grad();
    }
    Tensor y = f(inputs);
    if (y.size() != 1) throw ShapeError("grad_check: expression must be scalar-valued");
    if (!std::isfinite(y.value())) throw EvalError("grad_check: non-finite value at base point");
    y.backward();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (auto& t : inputs)
        analytic.push_back(t.requires_grad() && !t.grad().empty()
                               ? t.grad()
                               : std::vector<double>(t.size(), 0.0));

    double worst = 0.0;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        auto& buf = inputs[ti].mutable_data();
        for (std::size_t i = 0; i < buf.size(); ++i) {
            const double orig = buf[i];
            buf[i] = orig + h;
            const double up = f(inputs).value();
            buf[i] = orig - h;
            const double dn = f(inputs).value();
            buf[i] = orig;
            if (!std::isfinite(up) || !std::isfinite(dn))
                throw EvalError("grad_check: non-finite value at perturbed point");
            const double fd = (up - dn) / (2.0 * h);
            const double err = std::abs(analytic[ti][i] - fd) / std::max(1.0, std::abs(fd));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace satd
