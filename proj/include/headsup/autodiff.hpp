#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "headsup/tensor.hpp"

// Reverse-mode automatic differentiation over Tensor. Define-by-run tape:
// every op returns a Var holding a graph node; backward() walks the graph in
// reverse topological order. All accumulation loops run in a fixed order so
// results are bitwise reproducible.
namespace headsup::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;  // lazily allocated, same shape as value
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backprop;  // pushes this->grad into parents

    Tensor& ensure_grad() {
        if (!grad.defined()) grad = Tensor::zeros(value.shape());
        return grad;
    }
};

class Var {
public:
    Var() = default;
    explicit Var(NodePtr n) : n_(std::move(n)) {}

    static Var constant(Tensor v) {
        auto n = std::make_shared<Node>();
        n->value = std::move(v);
        return Var(std::move(n));
    }
    static Var scalar_const(double v) { return constant(Tensor::scalar(v)); }
    static Var leaf(Tensor v, bool requires_grad = true) {
        auto n = std::make_shared<Node>();
        n->value = std::move(v);
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Tensor& value() const { return n_->value; }
    bool requires_grad() const { return n_ && n_->requires_grad; }
    const Tensor& grad() const { return n_->grad; }
    Tensor grad_or_zero() const {
        return n_->grad.defined() ? n_->grad : Tensor::zeros(n_->value.shape());
    }
    double item() const {
        if (n_->value.numel() != 1) throw ShapeError("Var::item: not a scalar");
        return n_->value[0];
    }
    NodePtr node() const { return n_; }

private:
    NodePtr n_;
};

inline Var make_op(Tensor value, std::vector<NodePtr> parents,
                   std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) {
            n->requires_grad = true;
            break;
        }
    if (n->requires_grad) n->backprop = std::move(backprop);
    return Var(std::move(n));
}

inline void backward(const Var& root) {
    if (!root.defined()) throw ContractViolation("backward: undefined root");
    Node* r = root.node().get();
    if (r->value.numel() != 1) throw ShapeError("backward: root must be a scalar");
    if (!r->requires_grad) return;

    // Reverse post-order DFS over the requires_grad subgraph.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(r, 0);
    visited.insert(r);
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node* p = n->parents[i++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    r->ensure_grad()[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop && n->grad.defined()) n->backprop(*n);
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops. Binary ops accept equal shapes or a scalar (numel==1) on
// either side.
// ---------------------------------------------------------------------------

namespace detail {

inline int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

inline bool is_scalar(const Tensor& t) { return t.numel() == 1; }

inline void check_binary(const Tensor& a, const Tensor& b, const char* who) {
    if (!a.same_shape(b) && !is_scalar(a) && !is_scalar(b))
        throw ShapeError(std::string(who) + ": incompatible shapes " + a.shape_str() + " vs " +
                         b.shape_str());
}

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using MapC = Eigen::Map<const EMat>;

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
    detail::check_binary(a.value(), b.value(), "add");
    const Tensor &av = a.value(), &bv = b.value();
    const bool sa = detail::is_scalar(av), sb = detail::is_scalar(bv);
    Tensor out(sa ? bv.shape() : av.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = av[sa ? 0 : i] + bv[sb ? 0 : i];
    return make_op(std::move(out), {a.node(), b.node()}, [sa, sb](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        if (pa.requires_grad) {
            Tensor& ga = pa.ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) ga[sa ? 0 : i] += n.grad[i];
        }
        if (pb.requires_grad) {
            Tensor& gb = pb.ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) gb[sb ? 0 : i] += n.grad[i];
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    detail::check_binary(a.value(), b.value(), "sub");
    const Tensor &av = a.value(), &bv = b.value();
    const bool sa = detail::is_scalar(av), sb = detail::is_scalar(bv);
    Tensor out(sa ? bv.shape() : av.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = av[sa ? 0 : i] - bv[sb ? 0 : i];
    return make_op(std::move(out), {a.node(), b.node()}, [sa, sb](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        if (pa.requires_grad) {
            Tensor& ga = pa.ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) ga[sa ? 0 : i] += n.grad[i];
        }
        if (pb.requires_grad) {
            Tensor& gb = pb.ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) gb[sb ? 0 : i] -= n.grad[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    detail::check_binary(a.value(), b.value(), "mul");
    const Tensor &av = a.value(), &bv = b.value();
    const bool sa = detail::is_scalar(av), sb = detail::is_scalar(bv);
    Tensor out(sa ? bv.shape() : av.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = av[sa ? 0 : i] * bv[sb ? 0 : i];
    return make_op(std::move(out), {a.node(), b.node()}, [sa, sb](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        const Tensor &av = pa.value, &bv = pb.value;
        if (pa.requires_grad) {
            Tensor& ga = pa.ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) ga[sa ? 0 : i] += n.grad[i] * bv[sb ? 0 : i];
        }
        if (pb.requires_grad) {
            Tensor& gb = pb.ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) gb[sb ? 0 : i] += n.grad[i] * av[sa ? 0 : i];
        }
    });
}

inline Var div(const Var& a, const Var& b) {
    detail::check_binary(a.value(), b.value(), "div");
    const Tensor &av = a.value(), &bv = b.value();
    const bool sa = detail::is_scalar(av), sb = detail::is_scalar(bv);
    Tensor out(sa ? bv.shape() : av.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = av[sa ? 0 : i] / bv[sb ? 0 : i];
    return make_op(std::move(out), {a.node(), b.node()}, [sa, sb](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        const Tensor &av = pa.value, &bv = pb.value;
        if (pa.requires_grad) {
            Tensor& ga = pa.ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) ga[sa ? 0 : i] += n.grad[i] / bv[sb ? 0 : i];
        }
        if (pb.requires_grad) {
            Tensor& gb = pb.ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) {
                double bb = bv[sb ? 0 : i];
                gb[sb ? 0 : i] -= n.grad[i] * av[sa ? 0 : i] / (bb * bb);
            }
        }
    });
}

inline Var add(const Var& a, double c) { return add(a, Var::scalar_const(c)); }
inline Var sub(const Var& a, double c) { return sub(a, Var::scalar_const(c)); }
inline Var sub(double c, const Var& a) { return sub(Var::scalar_const(c), a); }
inline Var mul(const Var& a, double c) { return mul(a, Var::scalar_const(c)); }
inline Var div(const Var& a, double c) { return div(a, Var::scalar_const(c)); }
inline Var neg(const Var& a) { return mul(a, -1.0); }

// Generic unary op: f computes the output, dfdx(x, y) the local derivative.
inline Var unary(const Var& a, double (*f)(double), double (*dfdx)(double, double)) {
    const Tensor& av = a.value();
    Tensor out(av.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = f(av[i]);
    Tensor saved = out;
    return make_op(std::move(out), {a.node()}, [dfdx, saved](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i)
            g[i] += n.grad[i] * dfdx(p.value[i], saved[i]);
    });
}

inline Var log(const Var& a) {
    return unary(
        a, +[](double x) { return std::log(x); }, +[](double x, double) { return 1.0 / x; });
}

inline Var sqrt(const Var& a) {
    return unary(
        a, +[](double x) { return std::sqrt(x); },
        +[](double, double y) { return 0.5 / y; });
}

inline Var abs(const Var& a) {
    return unary(
        a, +[](double x) { return std::abs(x); },
        +[](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Var square(const Var& a) { return mul(a, a); }

inline double sigmoid_scalar(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline Var sigmoid(const Var& a) {
    return unary(
        a, +[](double x) { return sigmoid_scalar(x); },
        +[](double, double y) { return y * (1.0 - y); });
}

inline double softplus_scalar(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

inline Var softplus(const Var& a) {
    return unary(
        a, +[](double x) { return softplus_scalar(x); },
        +[](double x, double) { return sigmoid_scalar(x); });
}

inline Var silu(const Var& a) {
    return unary(
        a, +[](double x) { return x * sigmoid_scalar(x); },
        +[](double x, double) {
            double s = sigmoid_scalar(x);
            return s * (1.0 + x * (1.0 - s));
        });
}

inline Var leaky_relu(const Var& a, double slope = 0.2) {
    const Tensor& av = a.value();
    Tensor out(av.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] >= 0.0 ? av[i] : slope * av[i];
    return make_op(std::move(out), {a.node()}, [slope](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i)
            g[i] += n.grad[i] * (p.value[i] >= 0.0 ? 1.0 : slope);
    });
}

// Gradient passes where lo <= x <= hi (boundary inclusive).
inline Var clamp(const Var& a, double lo, double hi) {
    const Tensor& av = a.value();
    Tensor out(av.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::clamp(av[i], lo, hi);
    return make_op(std::move(out), {a.node()}, [lo, hi](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i)
            if (p.value[i] >= lo && p.value[i] <= hi) g[i] += n.grad[i];
    });
}

inline Var detach(const Var& a) { return Var::constant(a.value()); }

// ---------------------------------------------------------------------------
// Reductions and shape ops.
// ---------------------------------------------------------------------------

inline Var sum(const Var& a) {
    Tensor out = Tensor::scalar(a.value().sum());
    return make_op(std::move(out), {a.node()}, [](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        double gg = n.grad[0];
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += gg;
    });
}

inline Var mean(const Var& a) {
    const double inv = 1.0 / static_cast<double>(a.value().numel());
    Tensor out = Tensor::scalar(a.value().sum() * inv);
    return make_op(std::move(out), {a.node()}, [inv](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        double gg = n.grad[0] * inv;
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += gg;
    });
}

inline Var dot(const Var& a, const Var& b) { return sum(mul(a, b)); }

inline Var reshape(const Var& a, std::vector<int> shape) {
    if (Tensor::numel_of(shape) != a.value().numel())
        throw ShapeError("reshape: element count mismatch");
    Tensor out(std::move(shape));
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i];
    return make_op(std::move(out), {a.node()}, [](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i];
    });
}

inline Var concat_channels(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("concat_channels: empty input");
    const int h = xs[0].value().dim(1), w = xs[0].value().dim(2);
    int c_total = 0;
    std::vector<NodePtr> parents;
    for (const Var& x : xs) {
        if (x.value().rank() != 3 || x.value().dim(1) != h || x.value().dim(2) != w)
            throw ShapeError("concat_channels: spatial mismatch");
        c_total += x.value().dim(0);
        parents.push_back(x.node());
    }
    Tensor out({c_total, h, w});
    int64_t off = 0;
    for (const Var& x : xs) {
        const Tensor& v = x.value();
        for (int64_t i = 0; i < v.numel(); ++i) out[off + i] = v[i];
        off += v.numel();
    }
    return make_op(std::move(out), std::move(parents), [](Node& n) {
        int64_t off = 0;
        for (auto& pp : n.parents) {
            Node& p = *pp;
            int64_t m = p.value.numel();
            if (p.requires_grad) {
                Tensor& g = p.ensure_grad();
                for (int64_t i = 0; i < m; ++i) g[i] += n.grad[off + i];
            }
            off += m;
        }
    });
}

inline Var slice_channels(const Var& a, int c0, int c1) {
    const Tensor& v = a.value();
    if (v.rank() != 3 || c0 < 0 || c1 > v.dim(0) || c0 >= c1)
        throw ShapeError("slice_channels: bad range");
    const int h = v.dim(1), w = v.dim(2);
    Tensor out({c1 - c0, h, w});
    const int64_t plane = static_cast<int64_t>(h) * w;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = v[c0 * plane + i];
    return make_op(std::move(out), {a.node()}, [c0, plane](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) g[c0 * plane + i] += n.grad[i];
    });
}

inline Var crop2d(const Var& a, int top, int left, int h, int w) {
    const Tensor& v = a.value();
    if (v.rank() != 3 || top < 0 || left < 0 || top + h > v.dim(1) || left + w > v.dim(2))
        throw ShapeError("crop2d: window out of bounds");
    const int c = v.dim(0);
    Tensor out({c, h, w});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out.at(ch, y, x) = v.at(ch, top + y, left + x);
    return make_op(std::move(out), {a.node()}, [top, left](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        const int c = n.grad.dim(0), h = n.grad.dim(1), w = n.grad.dim(2);
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) g.at(ch, top + y, left + x) += n.grad.at(ch, y, x);
    });
}

// ---------------------------------------------------------------------------
// Linear algebra.
// ---------------------------------------------------------------------------

// y = W x + b, W (out,in), x (in), b (out) optional (pass undefined Var).
inline Var matvec(const Var& w, const Var& x, const Var& b = Var()) {
    const Tensor& wv = w.value();
    const Tensor& xv = x.value();
    if (wv.rank() != 2 || xv.numel() != wv.dim(1)) throw ShapeError("matvec: shape mismatch");
    const int out_n = wv.dim(0), in_n = wv.dim(1);
    Tensor out({out_n});
    for (int o = 0; o < out_n; ++o) {
        double acc = 0.0;
        const double* row = wv.data() + static_cast<int64_t>(o) * in_n;
        for (int i = 0; i < in_n; ++i) acc += row[i] * xv[i];
        out[o] = acc;
    }
    std::vector<NodePtr> parents{w.node(), x.node()};
    if (b.defined()) {
        if (b.value().numel() != out_n) throw ShapeError("matvec: bias shape");
        for (int o = 0; o < out_n; ++o) out[o] += b.value()[o];
        parents.push_back(b.node());
    }
    return make_op(std::move(out), std::move(parents), [out_n, in_n](Node& n) {
        Node& pw = *n.parents[0];
        Node& px = *n.parents[1];
        if (pw.requires_grad) {
            Tensor& gw = pw.ensure_grad();
            for (int o = 0; o < out_n; ++o)
                for (int i = 0; i < in_n; ++i)
                    gw[static_cast<int64_t>(o) * in_n + i] += n.grad[o] * px.value[i];
        }
        if (px.requires_grad) {
            Tensor& gx = px.ensure_grad();
            for (int o = 0; o < out_n; ++o)
                for (int i = 0; i < in_n; ++i)
                    gx[i] += n.grad[o] * pw.value[static_cast<int64_t>(o) * in_n + i];
        }
        if (n.parents.size() > 2 && n.parents[2]->requires_grad) {
            Tensor& gb = n.parents[2]->ensure_grad();
            for (int o = 0; o < out_n; ++o) gb[o] += n.grad[o];
        }
    });
}

// ---------------------------------------------------------------------------
// Convolutions (zero padding; im2col + GEMM).
// ---------------------------------------------------------------------------

namespace detail {

struct ConvGeom {
    int c, h, w, kh, kw, stride, pad, oh, ow;
    int64_t k_len, n_len;
};

inline ConvGeom conv_geom(const Tensor& x, int kh, int kw, int stride, int pad) {
    ConvGeom g;
    g.c = x.dim(0);
    g.h = x.dim(1);
    g.w = x.dim(2);
    g.kh = kh;
    g.kw = kw;
    g.stride = stride;
    g.pad = pad;
    g.oh = (g.h + 2 * pad - kh) / stride + 1;
    g.ow = (g.w + 2 * pad - kw) / stride + 1;
    if (g.oh < 1 || g.ow < 1) throw ShapeError("conv: output would be empty");
    g.k_len = static_cast<int64_t>(g.c) * kh * kw;
    g.n_len = static_cast<int64_t>(g.oh) * g.ow;
    return g;
}

inline std::shared_ptr<std::vector<double>> im2col(const double* x, const ConvGeom& g) {
    auto cols = std::make_shared<std::vector<double>>(static_cast<size_t>(g.k_len * g.n_len), 0.0);
    double* cp = cols->data();
    for (int c = 0; c < g.c; ++c)
        for (int ky = 0; ky < g.kh; ++ky)
            for (int kx = 0; kx < g.kw; ++kx) {
                double* row = cp + ((static_cast<int64_t>(c) * g.kh + ky) * g.kw + kx) * g.n_len;
                for (int oy = 0; oy < g.oh; ++oy) {
                    int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.h) continue;
                    const double* src = x + (static_cast<int64_t>(c) * g.h + iy) * g.w;
                    double* dst = row + static_cast<int64_t>(oy) * g.ow;
                    for (int ox = 0; ox < g.ow; ++ox) {
                        int ix = ox * g.stride - g.pad + kx;
                        if (ix >= 0 && ix < g.w) dst[ox] = src[ix];
                    }
                }
            }
    return cols;
}

inline void col2im_add(const double* cols, const ConvGeom& g, double* x) {
    for (int c = 0; c < g.c; ++c)
        for (int ky = 0; ky < g.kh; ++ky)
            for (int kx = 0; kx < g.kw; ++kx) {
                const double* row =
                    cols + ((static_cast<int64_t>(c) * g.kh + ky) * g.kw + kx) * g.n_len;
                for (int oy = 0; oy < g.oh; ++oy) {
                    int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.h) continue;
                    double* dst = x + (static_cast<int64_t>(c) * g.h + iy) * g.w;
                    const double* src = row + static_cast<int64_t>(oy) * g.ow;
                    for (int ox = 0; ox < g.ow; ++ox) {
                        int ix = ox * g.stride - g.pad + kx;
                        if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
                    }
                }
            }
}

}  // namespace detail

// x (C,H,W), w (O,C,kh,kw), optional b (O). Zero padding `pad`, stride `stride`.
inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    if (xv.rank() != 3 || wv.rank() != 4) throw ShapeError("conv2d: bad ranks");
    if (wv.dim(1) != xv.dim(0)) throw ShapeError("conv2d: channel mismatch");
    const int out_c = wv.dim(0);
    auto g = detail::conv_geom(xv, wv.dim(2), wv.dim(3), stride, pad);
    auto cols = detail::im2col(xv.data(), g);

    Tensor out({out_c, g.oh, g.ow});
    {
        detail::MapC W(wv.data(), out_c, g.k_len);
        detail::MapC C(cols->data(), g.k_len, g.n_len);
        detail::MapM O(out.data(), out_c, g.n_len);
        O.noalias() = W * C;
    }
    std::vector<NodePtr> parents{x.node(), w.node()};
    if (b.defined()) {
        if (b.value().numel() != out_c) throw ShapeError("conv2d: bias shape");
        for (int o = 0; o < out_c; ++o) {
            double bb = b.value()[o];
            double* dst = out.data() + static_cast<int64_t>(o) * g.n_len;
            for (int64_t i = 0; i < g.n_len; ++i) dst[i] += bb;
        }
        parents.push_back(b.node());
    }
    return make_op(std::move(out), std::move(parents), [g, out_c, cols](Node& n) {
        Node& px = *n.parents[0];
        Node& pw = *n.parents[1];
        detail::MapC G(n.grad.data(), out_c, g.n_len);
        if (pw.requires_grad) {
            detail::MapM GW(pw.ensure_grad().data(), out_c, g.k_len);
            detail::MapC C(cols->data(), g.k_len, g.n_len);
            GW.noalias() += G * C.transpose();
        }
        if (px.requires_grad) {
            std::vector<double> gcols(static_cast<size_t>(g.k_len * g.n_len));
            detail::MapM GC(gcols.data(), g.k_len, g.n_len);
            detail::MapC W(pw.value.data(), out_c, g.k_len);
            GC.noalias() = W.transpose() * G;
            detail::col2im_add(gcols.data(), g, px.ensure_grad().data());
        }
        if (n.parents.size() > 2 && n.parents[2]->requires_grad) {
            Tensor& gb = n.parents[2]->ensure_grad();
            for (int o = 0; o < out_c; ++o) {
                const double* src = n.grad.data() + static_cast<int64_t>(o) * g.n_len;
                double acc = 0.0;
                for (int64_t i = 0; i < g.n_len; ++i) acc += src[i];
                gb[o] += acc;
            }
        }
    });
}

// Transposed convolution. x (Cin,H,W), w (Cin,O,kh,kw), optional b (O).
// Output (O, (H-1)*stride - 2*pad + kh, ...).
inline Var conv_transpose2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    if (xv.rank() != 3 || wv.rank() != 4) throw ShapeError("conv_transpose2d: bad ranks");
    if (wv.dim(0) != xv.dim(0)) throw ShapeError("conv_transpose2d: channel mismatch");
    const int in_c = xv.dim(0), out_c = wv.dim(1), kh = wv.dim(2), kw = wv.dim(3);
    const int h = xv.dim(1), w_in = xv.dim(2);
    const int oh = (h - 1) * stride - 2 * pad + kh;
    const int ow = (w_in - 1) * stride - 2 * pad + kw;
    if (oh < 1 || ow < 1) throw ShapeError("conv_transpose2d: output would be empty");

    // Geometry of the *adjoint* conv: output grid (oh,ow) gathered into patches
    // at input positions.
    detail::ConvGeom g;
    g.c = out_c;
    g.h = oh;
    g.w = ow;
    g.kh = kh;
    g.kw = kw;
    g.stride = stride;
    g.pad = pad;
    g.oh = h;
    g.ow = w_in;
    g.k_len = static_cast<int64_t>(out_c) * kh * kw;
    g.n_len = static_cast<int64_t>(h) * w_in;
    if ((g.h + 2 * pad - kh) / stride + 1 != h || (g.w + 2 * pad - kw) / stride + 1 != w_in)
        throw ShapeError("conv_transpose2d: inconsistent geometry");

    const int64_t k_len = static_cast<int64_t>(out_c) * kh * kw;
    const int64_t n_len = static_cast<int64_t>(h) * w_in;
    std::vector<double> cols(static_cast<size_t>(k_len * n_len));
    {
        detail::MapC W(wv.data(), in_c, k_len);
        detail::MapC X(xv.data(), in_c, n_len);
        detail::MapM C(cols.data(), k_len, n_len);
        C.noalias() = W.transpose() * X;
    }
    Tensor out({out_c, oh, ow});
    detail::col2im_add(cols.data(), g, out.data());

    std::vector<NodePtr> parents{x.node(), w.node()};
    if (b.defined()) {
        if (b.value().numel() != out_c) throw ShapeError("conv_transpose2d: bias shape");
        const int64_t plane = static_cast<int64_t>(oh) * ow;
        for (int o = 0; o < out_c; ++o) {
            double bb = b.value()[o];
            double* dst = out.data() + o * plane;
            for (int64_t i = 0; i < plane; ++i) dst[i] += bb;
        }
        parents.push_back(b.node());
    }
    return make_op(std::move(out), std::move(parents), [g, in_c, out_c, k_len, n_len](Node& n) {
        Node& px = *n.parents[0];
        Node& pw = *n.parents[1];
        auto gcols = detail::im2col(n.grad.data(), g);
        detail::MapC GC(gcols->data(), k_len, n_len);
        if (px.requires_grad) {
            detail::MapM GX(px.ensure_grad().data(), in_c, n_len);
            detail::MapC W(pw.value.data(), in_c, k_len);
            GX.noalias() += W * GC;
        }
        if (pw.requires_grad) {
            detail::MapM GW(pw.ensure_grad().data(), in_c, k_len);
            detail::MapC X(px.value.data(), in_c, n_len);
            GW.noalias() += X * GC.transpose();
        }
        if (n.parents.size() > 2 && n.parents[2]->requires_grad) {
            Tensor& gb = n.parents[2]->ensure_grad();
            const int64_t plane = static_cast<int64_t>(g.h) * g.w;
            for (int o = 0; o < out_c; ++o) {
                const double* src = n.grad.data() + o * plane;
                double acc = 0.0;
                for (int64_t i = 0; i < plane; ++i) acc += src[i];
                gb[o] += acc;
            }
        }
    });
}

// Per-channel bias broadcast over the spatial grid; x (C,H,W), b (C).
inline Var add_channel_bias(const Var& x, const Var& b) {
    const Tensor& xv = x.value();
    if (xv.rank() != 3 || b.value().numel() != xv.dim(0))
        throw ShapeError("add_channel_bias: shape mismatch");
    const int c = xv.dim(0);
    const int64_t plane = static_cast<int64_t>(xv.dim(1)) * xv.dim(2);
    Tensor out(xv.shape());
    for (int ch = 0; ch < c; ++ch) {
        double bb = b.value()[ch];
        for (int64_t i = 0; i < plane; ++i) out[ch * plane + i] = xv[ch * plane + i] + bb;
    }
    return make_op(std::move(out), {x.node(), b.node()}, [c, plane](Node& n) {
        Node& px = *n.parents[0];
        Node& pb = *n.parents[1];
        if (px.requires_grad) {
            Tensor& g = px.ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i];
        }
        if (pb.requires_grad) {
            Tensor& g = pb.ensure_grad();
            for (int ch = 0; ch < c; ++ch) {
                double acc = 0.0;
                for (int64_t i = 0; i < plane; ++i) acc += n.grad[ch * plane + i];
                g[ch] += acc;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Pooling and resampling.
// ---------------------------------------------------------------------------

inline Var avg_pool2d(const Var& x, int k) {
    const Tensor& v = x.value();
    if (v.rank() != 3) throw ShapeError("avg_pool2d: expected rank-3");
    if (v.dim(1) % k != 0 || v.dim(2) % k != 0)
        throw ShapeError("avg_pool2d: size not divisible by window");
    const int c = v.dim(0), oh = v.dim(1) / k, ow = v.dim(2) / k;
    Tensor out({c, oh, ow});
    const double inv = 1.0 / (k * k);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < oh; ++y)
            for (int x2 = 0; x2 < ow; ++x2) {
                double acc = 0.0;
                for (int dy = 0; dy < k; ++dy)
                    for (int dx = 0; dx < k; ++dx) acc += v.at(ch, y * k + dy, x2 * k + dx);
                out.at(ch, y, x2) = acc * inv;
            }
    return make_op(std::move(out), {x.node()}, [k, inv](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        const int c = n.grad.dim(0), oh = n.grad.dim(1), ow = n.grad.dim(2);
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < oh; ++y)
                for (int x2 = 0; x2 < ow; ++x2) {
                    double gg = n.grad.at(ch, y, x2) * inv;
                    for (int dy = 0; dy < k; ++dy)
                        for (int dx = 0; dx < k; ++dx) g.at(ch, y * k + dy, x2 * k + dx) += gg;
                }
    });
}

// Adaptive average pooling with floor/ceil box boundaries.
inline Var adaptive_avg_pool2d(const Var& x, int oh, int ow) {
    const Tensor& v = x.value();
    if (v.rank() != 3) throw ShapeError("adaptive_avg_pool2d: expected rank-3");
    const int c = v.dim(0), h = v.dim(1), w = v.dim(2);
    if (oh < 1 || ow < 1 || oh > h || ow > w)
        throw ShapeError("adaptive_avg_pool2d: bad output size");
    Tensor out({c, oh, ow});
    auto lo = [](int i, int n, int o) { return (i * n) / o; };
    auto hi = [](int i, int n, int o) { return ((i + 1) * n + o - 1) / o; };
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < oh; ++y) {
            int y0 = lo(y, h, oh), y1 = hi(y, h, oh);
            for (int x2 = 0; x2 < ow; ++x2) {
                int x0 = lo(x2, w, ow), x1 = hi(x2, w, ow);
                double acc = 0.0;
                for (int yy = y0; yy < y1; ++yy)
                    for (int xx = x0; xx < x1; ++xx) acc += v.at(ch, yy, xx);
                out.at(ch, y, x2) = acc / ((y1 - y0) * (x1 - x0));
            }
        }
    return make_op(std::move(out), {x.node()}, [h, w](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        const int c = n.grad.dim(0), oh = n.grad.dim(1), ow = n.grad.dim(2);
        auto lo = [](int i, int nn, int o) { return (i * nn) / o; };
        auto hi = [](int i, int nn, int o) { return ((i + 1) * nn + o - 1) / o; };
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < oh; ++y) {
                int y0 = lo(y, h, oh), y1 = hi(y, h, oh);
                for (int x2 = 0; x2 < ow; ++x2) {
                    int x0 = lo(x2, w, ow), x1 = hi(x2, w, ow);
                    double gg = n.grad.at(ch, y, x2) / ((y1 - y0) * (x1 - x0));
                    for (int yy = y0; yy < y1; ++yy)
                        for (int xx = x0; xx < x1; ++xx) g.at(ch, yy, xx) += gg;
                }
            }
    });
}

inline Var upsample_nearest2d(const Var& x, int oh, int ow) {
    const Tensor& v = x.value();
    if (v.rank() != 3) throw ShapeError("upsample_nearest2d: expected rank-3");
    const int c = v.dim(0), h = v.dim(1), w = v.dim(2);
    const double sy = static_cast<double>(h) / oh, sx = static_cast<double>(w) / ow;
    Tensor out({c, oh, ow});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < oh; ++y) {
            int ys = std::min(h - 1, static_cast<int>(std::floor((y + 0.5) * sy)));
            for (int x2 = 0; x2 < ow; ++x2) {
                int xs = std::min(w - 1, static_cast<int>(std::floor((x2 + 0.5) * sx)));
                out.at(ch, y, x2) = v.at(ch, ys, xs);
            }
        }
    return make_op(std::move(out), {x.node()}, [h, w, sy, sx](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        const int c = n.grad.dim(0), oh = n.grad.dim(1), ow = n.grad.dim(2);
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < oh; ++y) {
                int ys = std::min(h - 1, static_cast<int>(std::floor((y + 0.5) * sy)));
                for (int x2 = 0; x2 < ow; ++x2) {
                    int xs = std::min(w - 1, static_cast<int>(std::floor((x2 + 0.5) * sx)));
                    g.at(ch, ys, xs) += n.grad.at(ch, y, x2);
                }
            }
    });
}

namespace detail {

struct LerpCoord {
    int y0, y1, x0, x1;
    double wy, wx;
};

inline LerpCoord lerp_coord(int y, int x, double sy, double sx, int h, int w) {
    LerpCoord c;
    double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
    c.y0 = static_cast<int>(std::floor(fy));
    c.x0 = static_cast<int>(std::floor(fx));
    c.wy = fy - c.y0;
    c.wx = fx - c.x0;
    c.y1 = std::min(c.y0 + 1, h - 1);
    c.x1 = std::min(c.x0 + 1, w - 1);
    return c;
}

}  // namespace detail

inline Var upsample_bilinear2d(const Var& x, int oh, int ow) {
    const Tensor& v = x.value();
    if (v.rank() != 3) throw ShapeError("upsample_bilinear2d: expected rank-3");
    const int c = v.dim(0), h = v.dim(1), w = v.dim(2);
    const double sy = static_cast<double>(h) / oh, sx = static_cast<double>(w) / ow;
    Tensor out({c, oh, ow});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < oh; ++y)
            for (int x2 = 0; x2 < ow; ++x2) {
                auto q = detail::lerp_coord(y, x2, sy, sx, h, w);
                out.at(ch, y, x2) =
                    (1 - q.wy) * ((1 - q.wx) * v.at(ch, q.y0, q.x0) + q.wx * v.at(ch, q.y0, q.x1)) +
                    q.wy * ((1 - q.wx) * v.at(ch, q.y1, q.x0) + q.wx * v.at(ch, q.y1, q.x1));
            }
    return make_op(std::move(out), {x.node()}, [h, w, sy, sx](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        const int c = n.grad.dim(0), oh = n.grad.dim(1), ow = n.grad.dim(2);
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < oh; ++y)
                for (int x2 = 0; x2 < ow; ++x2) {
                    auto q = detail::lerp_coord(y, x2, sy, sx, h, w);
                    double gg = n.grad.at(ch, y, x2);
                    g.at(ch, q.y0, q.x0) += gg * (1 - q.wy) * (1 - q.wx);
                    g.at(ch, q.y0, q.x1) += gg * (1 - q.wy) * q.wx;
                    g.at(ch, q.y1, q.x0) += gg * q.wy * (1 - q.wx);
                    g.at(ch, q.y1, q.x1) += gg * q.wy * q.wx;
                }
    });
}

// ---------------------------------------------------------------------------
// Bilinear warp. The 2x3 matrix m maps output pixel coordinates to source
// pixel coordinates: (sx, sy) = (m0 x + m1 y + m2, m3 x + m4 y + m5).
// Sample coordinates are clamped to the border (clamp-to-edge). Optionally
// differentiable in the transform parameters via the Var overload.
// ---------------------------------------------------------------------------

namespace detail {

struct WarpSample {
    int y0, y1, x0, x1;
    double wy, wx;
    bool clamped_x, clamped_y;
};

inline WarpSample warp_sample(double sx, double sy, int h, int w) {
    WarpSample s;
    double cx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
    double cy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
    s.clamped_x = (cx != sx);
    s.clamped_y = (cy != sy);
    s.x0 = static_cast<int>(std::floor(cx));
    s.y0 = static_cast<int>(std::floor(cy));
    s.wx = cx - s.x0;
    s.wy = cy - s.y0;
    s.x1 = std::min(s.x0 + 1, w - 1);
    s.y1 = std::min(s.y0 + 1, h - 1);
    return s;
}

}  // namespace detail

inline Var warp_bilinear_m(const Var& img, const std::array<double, 6>& m, int oh, int ow,
                           const Var& params = Var()) {
    const Tensor& v = img.value();
    if (v.rank() != 3) throw ShapeError("warp_bilinear: expected (C,H,W) input");
    if (oh < 2 || ow < 2) throw ShapeError("warp_bilinear: output must be at least 2x2");
    const int c = v.dim(0), h = v.dim(1), w = v.dim(2);
    Tensor out({c, oh, ow});
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double sx = m[0] * x + m[1] * y + m[2];
            double sy = m[3] * x + m[4] * y + m[5];
            auto s = detail::warp_sample(sx, sy, h, w);
            for (int ch = 0; ch < c; ++ch)
                out.at(ch, y, x) =
                    (1 - s.wy) * ((1 - s.wx) * v.at(ch, s.y0, s.x0) + s.wx * v.at(ch, s.y0, s.x1)) +
                    s.wy * ((1 - s.wx) * v.at(ch, s.y1, s.x0) + s.wx * v.at(ch, s.y1, s.x1));
        }
    std::vector<NodePtr> parents{img.node()};
    const bool has_params = params.defined();
    if (has_params) {
        if (params.value().numel() != 6) throw ShapeError("warp_bilinear: params must have 6 values");
        parents.push_back(params.node());
    }
    return make_op(std::move(out), std::move(parents), [m, h, w, c, has_params](Node& n) {
        Node& pimg = *n.parents[0];
        const Tensor& v = pimg.value;
        const int oh = n.grad.dim(1), ow = n.grad.dim(2);
        Tensor* gimg = pimg.requires_grad ? &pimg.ensure_grad() : nullptr;
        Tensor* gpar = nullptr;
        if (has_params && n.parents[1]->requires_grad) gpar = &n.parents[1]->ensure_grad();
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) {
                double sx = m[0] * x + m[1] * y + m[2];
                double sy = m[3] * x + m[4] * y + m[5];
                auto s = detail::warp_sample(sx, sy, h, w);
                double dvdsx = 0.0, dvdsy = 0.0;
                for (int ch = 0; ch < c; ++ch) {
                    double gg = n.grad.at(ch, y, x);
                    if (gimg) {
                        gimg->at(ch, s.y0, s.x0) += gg * (1 - s.wy) * (1 - s.wx);
                        gimg->at(ch, s.y0, s.x1) += gg * (1 - s.wy) * s.wx;
                        gimg->at(ch, s.y1, s.x0) += gg * s.wy * (1 - s.wx);
                        gimg->at(ch, s.y1, s.x1) += gg * s.wy * s.wx;
                    }
                    if (gpar) {
                        double ddx = (1 - s.wy) * (v.at(ch, s.y0, s.x1) - v.at(ch, s.y0, s.x0)) +
                                     s.wy * (v.at(ch, s.y1, s.x1) - v.at(ch, s.y1, s.x0));
                        double ddy = (1 - s.wx) * (v.at(ch, s.y1, s.x0) - v.at(ch, s.y0, s.x0)) +
                                     s.wx * (v.at(ch, s.y1, s.x1) - v.at(ch, s.y0, s.x1));
                        dvdsx += gg * (s.clamped_x ? 0.0 : ddx);
                        dvdsy += gg * (s.clamped_y ? 0.0 : ddy);
                    }
                }
                if (gpar) {
                    (*gpar)[0] += dvdsx * x;
                    (*gpar)[1] += dvdsx * y;
                    (*gpar)[2] += dvdsx;
                    (*gpar)[3] += dvdsy * x;
                    (*gpar)[4] += dvdsy * y;
                    (*gpar)[5] += dvdsy;
                }
            }
    });
}

// ---------------------------------------------------------------------------
// Fixed-kernel separable filtering (clamp-to-edge) and spatial differences.
// Used by the SSIM-style perceptual distance. The kernel itself carries no
// gradient; the backward pass is the exact adjoint of the forward stencil.
// ---------------------------------------------------------------------------

namespace detail {

// axis 0 = horizontal, 1 = vertical.
inline void sep_filter_pass(const double* src, double* dst, int c, int h, int w,
                            const std::vector<double>& k, int axis, bool adjoint) {
    const int r = static_cast<int>(k.size()) / 2;
    const int64_t plane = static_cast<int64_t>(h) * w;
    if (!adjoint) {
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    double acc = 0.0;
                    for (int i = -r; i <= r; ++i) {
                        int yy = axis == 1 ? clampi(y + i, 0, h - 1) : y;
                        int xx = axis == 0 ? clampi(x + i, 0, w - 1) : x;
                        acc += k[static_cast<size_t>(i + r)] * src[ch * plane + yy * w + xx];
                    }
                    dst[ch * plane + y * w + x] = acc;
                }
    } else {
        for (int64_t i = 0; i < static_cast<int64_t>(c) * plane; ++i) dst[i] = 0.0;
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    double g = src[ch * plane + y * w + x];
                    for (int i = -r; i <= r; ++i) {
                        int yy = axis == 1 ? clampi(y + i, 0, h - 1) : y;
                        int xx = axis == 0 ? clampi(x + i, 0, w - 1) : x;
                        dst[ch * plane + yy * w + xx] += k[static_cast<size_t>(i + r)] * g;
                    }
                }
    }
}

}  // namespace detail

inline Var separable_filter(const Var& x, const std::vector<double>& k) {
    const Tensor& v = x.value();
    if (v.rank() != 3) throw ShapeError("separable_filter: expected rank-3");
    if (k.size() % 2 == 0) throw ShapeError("separable_filter: kernel must have odd length");
    const int c = v.dim(0), h = v.dim(1), w = v.dim(2);
    Tensor tmp({c, h, w}), out({c, h, w});
    detail::sep_filter_pass(v.data(), tmp.data(), c, h, w, k, 0, false);
    detail::sep_filter_pass(tmp.data(), out.data(), c, h, w, k, 1, false);
    return make_op(std::move(out), {x.node()}, [k, c, h, w](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        Tensor t1({c, h, w}), t2({c, h, w});
        detail::sep_filter_pass(n.grad.data(), t1.data(), c, h, w, k, 1, true);
        detail::sep_filter_pass(t1.data(), t2.data(), c, h, w, k, 0, true);
        Tensor& g = p.ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += t2[i];
    });
}

// Horizontal forward difference: out (C,H,W-1) = x[:,:,1:] - x[:,:,:-1].
inline Var diff_x(const Var& x) {
    const Tensor& v = x.value();
    if (v.rank() != 3 || v.dim(2) < 2) throw ShapeError("diff_x: too narrow");
    const int c = v.dim(0), h = v.dim(1), w = v.dim(2);
    Tensor out({c, h, w - 1});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x2 = 0; x2 + 1 < w; ++x2)
                out.at(ch, y, x2) = v.at(ch, y, x2 + 1) - v.at(ch, y, x2);
    return make_op(std::move(out), {x.node()}, [](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        const int c = n.grad.dim(0), h = n.grad.dim(1), wm1 = n.grad.dim(2);
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h; ++y)
                for (int x2 = 0; x2 < wm1; ++x2) {
                    double gg = n.grad.at(ch, y, x2);
                    g.at(ch, y, x2 + 1) += gg;
                    g.at(ch, y, x2) -= gg;
                }
    });
}

inline Var diff_y(const Var& x) {
    const Tensor& v = x.value();
    if (v.rank() != 3 || v.dim(1) < 2) throw ShapeError("diff_y: too short");
    const int c = v.dim(0), h = v.dim(1), w = v.dim(2);
    Tensor out({c, h - 1, w});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y + 1 < h; ++y)
            for (int x2 = 0; x2 < w; ++x2)
                out.at(ch, y, x2) = v.at(ch, y + 1, x2) - v.at(ch, y, x2);
    return make_op(std::move(out), {x.node()}, [](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        const int c = n.grad.dim(0), hm1 = n.grad.dim(1), w = n.grad.dim(2);
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < hm1; ++y)
                for (int x2 = 0; x2 < w; ++x2) {
                    double gg = n.grad.at(ch, y, x2);
                    g.at(ch, y + 1, x2) += gg;
                    g.at(ch, y, x2) -= gg;
                }
    });
}

}  // namespace headsup::ad
