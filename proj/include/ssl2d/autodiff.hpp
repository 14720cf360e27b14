#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssl2d/rng.hpp"

// Minimal reverse-mode differentiation: an append-only tape of value nodes
// with backward closures, plus the layers, losses and optimizer the models
// need. 64-bit floats throughout. A tape is confined to one logical thread;
// independent tapes/stores may run in parallel.

namespace ssl2d::ad {

struct Shape {
    std::vector<int> dims;

    Shape() = default;
    Shape(std::initializer_list<int> d) : dims(d) {}
    explicit Shape(std::vector<int> d) : dims(std::move(d)) {}

    int rank() const { return static_cast<int>(dims.size()); }
    int operator[](int i) const { return dims[i]; }
    bool operator==(const Shape& o) const { return dims == o.dims; }
    bool operator!=(const Shape& o) const { return dims != o.dims; }

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (int d : dims) n *= d;
        return n;
    }

    std::string str() const {
        std::string s = "(";
        for (std::size_t i = 0; i < dims.size(); ++i)
            s += (i ? "," : "") + std::to_string(dims[i]);
        return s + ")";
    }
};

inline void require_shape(bool ok, const std::string& op, const Shape& a, const Shape& b) {
    if (!ok) throw std::invalid_argument(op + ": incompatible shapes " + a.str() + " vs " + b.str());
}

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;
using MapA = Eigen::Map<Eigen::ArrayXd>;
using CMapA = Eigen::Map<const Eigen::ArrayXd>;

class Tape;

struct Var {
    Tape* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Shape& shape() const;
    std::vector<double>& value();
    const std::vector<double>& value() const;
    const std::vector<double>& grad() const;
    double scalar() const;
};

class Tape {
  public:
    struct Node {
        Shape shape;
        std::vector<double> value;
        std::vector<double> grad;  // lazily allocated, zero-initialized
        std::function<void(Tape&)> back;
        std::vector<int> parents;
        bool needs = false;  // gradient flows into this node
    };

    std::vector<Node> nodes;

    Var alloc(Shape shape, std::vector<int> parents = {},
              std::function<void(Tape&)> back = nullptr) {
        Node n;
        n.shape = std::move(shape);
        n.value.resize(static_cast<std::size_t>(n.shape.numel()));
        for (int p : parents) n.needs = n.needs || nodes[p].needs;
        n.parents = std::move(parents);
        n.back = std::move(back);
        nodes.push_back(std::move(n));
        return Var{this, static_cast<int>(nodes.size()) - 1};
    }

    bool needs(int id) const { return nodes[id].needs; }

    /// Mark a leaf (constant) as differentiated; call before ops consume it.
    void want_grad(Var v) { nodes[v.id].needs = true; }

    Var constant(Shape shape, const double* data) {
        Var v = alloc(std::move(shape));
        std::memcpy(nodes[v.id].value.data(), data,
                    nodes[v.id].value.size() * sizeof(double));
        return v;
    }

    Var constant(Shape shape, const std::vector<double>& data) {
        if (static_cast<std::int64_t>(data.size()) != shape.numel())
            throw std::invalid_argument("constant: payload size does not match shape " + shape.str());
        return constant(std::move(shape), data.data());
    }

    Var scalar_constant(double v) { return constant(Shape{1}, &v); }

    std::vector<double>& grad(int id) {
        auto& g = nodes[id].grad;
        if (g.empty()) g.assign(nodes[id].value.size(), 0.0);
        return g;
    }

    /// Reverse traversal from loss in creation order; gradients sum at
    /// fan-out. loss must be scalar.
    void backward(Var loss) {
        if (loss.tape != this) throw std::invalid_argument("backward: variable from another tape");
        if (nodes[loss.id].shape.numel() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got " +
                                        nodes[loss.id].shape.str());
        std::vector<char> reach(nodes.size(), 0);
        std::vector<int> stack{loss.id};
        reach[loss.id] = 1;
        while (!stack.empty()) {
            const int u = stack.back();
            stack.pop_back();
            for (int p : nodes[u].parents)
                if (!reach[p]) {
                    reach[p] = 1;
                    stack.push_back(p);
                }
        }
        grad(loss.id)[0] = 1.0;
        for (int id = loss.id; id >= 0; --id)
            if (reach[id] && nodes[id].needs && nodes[id].back) nodes[id].back(*this);
    }

    void clear() { nodes.clear(); }
};

inline const Shape& Var::shape() const { return tape->nodes[id].shape; }
inline std::vector<double>& Var::value() { return tape->nodes[id].value; }
inline const std::vector<double>& Var::value() const { return tape->nodes[id].value; }
inline const std::vector<double>& Var::grad() const { return tape->nodes[id].grad; }
inline double Var::scalar() const { return tape->nodes[id].value[0]; }

// ---- parameters & optimizer ----

struct Param {
    std::string name;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<double> m;  // Adam first moment
    std::vector<double> v;  // Adam second moment
    bool grad_touched = false;
};

struct AdamConfig {
    double lr = 1e-4;      // paper default
    double beta1 = 0.5;    // paper: beta = (0.5, 0.999)
    double beta2 = 0.999;
    double eps = 1e-8;
};

class ParamStore {
  public:
    Param& add(const std::string& name, Shape shape) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
        auto p = std::make_unique<Param>();
        p->name = name;
        p->shape = std::move(shape);
        const auto n = static_cast<std::size_t>(p->shape.numel());
        p->value.assign(n, 0.0);
        p->grad.assign(n, 0.0);
        p->m.assign(n, 0.0);
        p->v.assign(n, 0.0);
        index_[name] = static_cast<int>(params_.size());
        params_.push_back(std::move(p));
        return *params_.back();
    }

    /// Uniform in +-sqrt(6 / (fan_in + fan_out)), biases added separately as zeros.
    Param& add_glorot(const std::string& name, Shape shape, int fan_in, int fan_out,
                      rng::Rng& r) {
        Param& p = add(name, std::move(shape));
        const double limit = std::sqrt(6.0 / (fan_in + fan_out));
        for (auto& v : p.value) v = r.uniform(-limit, limit);
        return p;
    }

    Param& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::invalid_argument("no such parameter: " + name);
        return *params_[it->second];
    }

    const std::vector<std::unique_ptr<Param>>& params() const { return params_; }
    std::size_t size() const { return params_.size(); }
    std::int64_t step_count() const { return step_; }
    void set_step_count(std::int64_t s) { step_ = s; }

    std::int64_t total_scalars() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += p->shape.numel();
        return n;
    }

    void zero_grads() {
        for (auto& p : params_) {
            std::fill(p->grad.begin(), p->grad.end(), 0.0);
            p->grad_touched = false;
        }
    }

    /// Standard Adam with bias correction; one shared step count.
    void adam_step(const AdamConfig& c) {
        for (auto& p : params_)
            if (!p->grad_touched)
                throw std::runtime_error("adam_step: parameter without gradient: " + p->name);
        ++step_;
        const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(step_));
        for (auto& p : params_) {
            const auto n = static_cast<Eigen::Index>(p->value.size());
            MapA value(p->value.data(), n);
            CMapA g(p->grad.data(), n);
            MapA m(p->m.data(), n);
            MapA v(p->v.data(), n);
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g.square();
            value -= c.lr * (m / bc1) / ((v / bc2).sqrt() + c.eps);
        }
    }

    std::uint64_t checksum() const {
        rng::Fnv64 f;
        for (const auto& p : params_) {
            f.update(p->name.data(), p->name.size());
            f.update_vector(p->value);
        }
        return f.h;
    }

    ParamStore clone() const {
        ParamStore out;
        for (const auto& p : params_) {
            Param& q = out.add(p->name, p->shape);
            q.value = p->value;
            q.grad = p->grad;
            q.m = p->m;
            q.v = p->v;
        }
        out.step_ = step_;
        return out;
    }

  private:
    std::vector<std::unique_ptr<Param>> params_;
    std::map<std::string, int> index_;
    std::int64_t step_ = 0;
};

/// Leaf node reading a parameter; backward accumulates into Param::grad.
inline Var use_param(Tape& t, Param& p) {
    Var v = t.constant(p.shape, p.value.data());
    Param* pp = &p;
    const int id = v.id;
    t.nodes[id].needs = true;
    t.nodes[id].back = [id, pp](Tape& tp) {
        const auto& g = tp.grad(id);
        MapA(pp->grad.data(), static_cast<Eigen::Index>(g.size())) +=
            CMapA(g.data(), static_cast<Eigen::Index>(g.size()));
        pp->grad_touched = true;
    };
    return v;
}

// ---- elementwise ops ----

inline Var add(Var a, Var b) {
    require_shape(a.shape() == b.shape(), "add", a.shape(), b.shape());
    Tape& t = *a.tape;
    Var y = t.alloc(a.shape(), {a.id, b.id});
    const auto n = static_cast<Eigen::Index>(y.value().size());
    MapA(y.value().data(), n) = CMapA(a.value().data(), n) + CMapA(b.value().data(), n);
    const int ai = a.id, bi = b.id, yi = y.id;
    t.nodes[yi].back = [ai, bi, yi, n](Tape& tp) {
        CMapA g(tp.grad(yi).data(), n);
        if (tp.needs(ai)) MapA(tp.grad(ai).data(), n) += g;
        if (tp.needs(bi)) MapA(tp.grad(bi).data(), n) += g;
    };
    return y;
}

inline Var mul(Var a, Var b) {
    require_shape(a.shape() == b.shape(), "mul", a.shape(), b.shape());
    Tape& t = *a.tape;
    Var y = t.alloc(a.shape(), {a.id, b.id});
    const auto n = static_cast<Eigen::Index>(y.value().size());
    MapA(y.value().data(), n) = CMapA(a.value().data(), n) * CMapA(b.value().data(), n);
    const int ai = a.id, bi = b.id, yi = y.id;
    t.nodes[yi].back = [ai, bi, yi, n](Tape& tp) {
        CMapA g(tp.grad(yi).data(), n);
        if (tp.needs(ai)) MapA(tp.grad(ai).data(), n) += g * CMapA(tp.nodes[bi].value.data(), n);
        if (tp.needs(bi)) MapA(tp.grad(bi).data(), n) += g * CMapA(tp.nodes[ai].value.data(), n);
    };
    return y;
}

inline Var scale(Var a, double s) {
    Tape& t = *a.tape;
    Var y = t.alloc(a.shape(), {a.id});
    const auto n = static_cast<Eigen::Index>(y.value().size());
    MapA(y.value().data(), n) = CMapA(a.value().data(), n) * s;
    const int ai = a.id, yi = y.id;
    t.nodes[yi].back = [ai, yi, s, n](Tape& tp) {
        MapA(tp.grad(ai).data(), n) += CMapA(tp.grad(yi).data(), n) * s;
    };
    return y;
}

inline Var relu(Var x) {
    Tape& t = *x.tape;
    Var y = t.alloc(x.shape(), {x.id});
    const auto& xv = x.value();
    auto& yv = y.value();
    for (std::size_t i = 0; i < xv.size(); ++i) yv[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    const int xi = x.id, yi = y.id;
    t.nodes[yi].back = [xi, yi](Tape& tp) {
        const auto& xv = tp.nodes[xi].value;
        const auto& g = tp.grad(yi);
        auto& gx = tp.grad(xi);
        for (std::size_t i = 0; i < xv.size(); ++i)
            if (xv[i] > 0.0) gx[i] += g[i];  // subgradient 0 at 0
    };
    return y;
}

inline Var sigmoid(Var x) {
    Tape& t = *x.tape;
    Var y = t.alloc(x.shape(), {x.id});
    const auto& xv = x.value();
    auto& yv = y.value();
    for (std::size_t i = 0; i < xv.size(); ++i) {
        if (xv[i] >= 0.0) {
            yv[i] = 1.0 / (1.0 + std::exp(-xv[i]));
        } else {
            const double e = std::exp(xv[i]);
            yv[i] = e / (1.0 + e);
        }
    }
    const int xi = x.id, yi = y.id;
    t.nodes[yi].back = [xi, yi](Tape& tp) {
        const auto& yv = tp.nodes[yi].value;
        const auto& g = tp.grad(yi);
        auto& gx = tp.grad(xi);
        for (std::size_t i = 0; i < yv.size(); ++i) gx[i] += g[i] * yv[i] * (1.0 - yv[i]);
    };
    return y;
}

/// Identity forward (bit-exact); backward passes -lambda * upstream.
inline Var grad_reverse(Var x, double lambda) {
    if (!std::isfinite(lambda)) throw std::invalid_argument("grad_reverse: non-finite lambda");
    Tape& t = *x.tape;
    Var y = t.alloc(x.shape(), {x.id});
    y.value() = x.value();
    const int xi = x.id, yi = y.id;
    t.nodes[yi].back = [xi, yi, lambda](Tape& tp) {
        const auto n = static_cast<Eigen::Index>(tp.nodes[yi].value.size());
        MapA(tp.grad(xi).data(), n) += CMapA(tp.grad(yi).data(), n) * (-lambda);
    };
    return y;
}

/// Forward copy with no graph connection (blocks gradients).
inline Var detach(Var x) {
    Var y = x.tape->alloc(x.shape());
    y.value() = x.value();
    return y;
}

inline Var reshape(Var x, Shape shape) {
    require_shape(shape.numel() == x.shape().numel(), "reshape", x.shape(), shape);
    Tape& t = *x.tape;
    Var y = t.alloc(std::move(shape), {x.id});
    y.value() = x.value();
    const int xi = x.id, yi = y.id;
    t.nodes[yi].back = [xi, yi](Tape& tp) {
        const auto n = static_cast<Eigen::Index>(tp.nodes[yi].value.size());
        MapA(tp.grad(xi).data(), n) += CMapA(tp.grad(yi).data(), n);
    };
    return y;
}

/// (N,C,H,W) -> (N, C*H*W)
inline Var flatten(Var x) {
    const auto& s = x.shape();
    if (s.rank() != 4) throw std::invalid_argument("flatten: expected rank-4, got " + s.str());
    return reshape(x, Shape{s[0], s[1] * s[2] * s[3]});
}

inline Var sum(Var x) {
    Tape& t = *x.tape;
    Var y = t.alloc(Shape{1}, {x.id});
    const auto n = static_cast<Eigen::Index>(x.value().size());
    y.value()[0] = CMapA(x.value().data(), n).sum();
    const int xi = x.id, yi = y.id;
    t.nodes[yi].back = [xi, yi, n](Tape& tp) {
        MapA(tp.grad(xi).data(), n) += tp.grad(yi)[0];
    };
    return y;
}

// ---- dense / conv ----

/// x:(N,F) W:(F,O) b:(O) -> (N,O). Pass an invalid Var to skip the bias.
inline Var dense(Var x, Var w, Var b) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    require_shape(xs.rank() == 2 && ws.rank() == 2 && xs[1] == ws[0], "dense", xs, ws);
    const int n = xs[0], f = xs[1], o = ws[1];
    if (b.valid())
        require_shape(b.shape().rank() == 1 && b.shape()[0] == o, "dense bias", ws, b.shape());

    Tape& t = *x.tape;
    std::vector<int> parents{x.id, w.id};
    if (b.valid()) parents.push_back(b.id);
    Var y = t.alloc(Shape{n, o}, std::move(parents));
    {
        CMapM xm(x.value().data(), n, f);
        CMapM wm(w.value().data(), f, o);
        MapM ym(y.value().data(), n, o);
        ym.noalias() = xm * wm;
        if (b.valid()) ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.value().data(), o);
    }
    const int xi = x.id, wi = w.id, bi = b.valid() ? b.id : -1, yi = y.id;
    t.nodes[yi].back = [xi, wi, bi, yi, n, f, o](Tape& tp) {
        CMapM g(tp.grad(yi).data(), n, o);
        if (tp.needs(xi)) {
            CMapM wm(tp.nodes[wi].value.data(), f, o);
            MapM(tp.grad(xi).data(), n, f).noalias() += g * wm.transpose();
        }
        if (tp.needs(wi)) {
            CMapM xm(tp.nodes[xi].value.data(), n, f);
            MapM(tp.grad(wi).data(), f, o).noalias() += xm.transpose() * g;
        }
        if (bi >= 0 && tp.needs(bi))
            Eigen::Map<Eigen::RowVectorXd>(tp.grad(bi).data(), o) += g.colwise().sum();
    };
    return y;
}

struct Conv2dSpec {
    int stride_h = 1, stride_w = 1;
    int pad_h = 0, pad_w = 0;
};

namespace detail {

// valid output-column range [lo, hi) for which jj = oj*sw - pw + kj lands in [0, w)
inline void col_bounds(int w, int ow, int sw, int pw, int kj, int& lo, int& hi) {
    const int a = pw - kj;  // need oj*sw >= a
    lo = a <= 0 ? 0 : (a + sw - 1) / sw;
    const int b = w - 1 + pw - kj;  // need oj*sw <= b
    hi = b < 0 ? 0 : std::min(ow, b / sw + 1);
    if (hi < lo) hi = lo;
}

inline void im2col(const double* x, int c_in, int h, int w, int kh, int kw,
                   const Conv2dSpec& sp, int n, int oh, int ow, double* col) {
    // col is (c_in*kh*kw) x (n*oh*ow); columns ordered (sample, oh, ow)
    const std::int64_t cols = static_cast<std::int64_t>(n) * oh * ow;
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    const std::int64_t x_stride_n = static_cast<std::int64_t>(c_in) * plane;
    std::int64_t row = 0;
    for (int c = 0; c < c_in; ++c)
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj, ++row) {
                double* dst = col + row * cols;
                int lo, hi;
                col_bounds(w, ow, sp.stride_w, sp.pad_w, kj, lo, hi);
                for (int s = 0; s < n; ++s) {
                    const double* xp = x + s * x_stride_n + c * plane;
                    for (int oi = 0; oi < oh; ++oi) {
                        const int ii = oi * sp.stride_h - sp.pad_h + ki;
                        double* d = dst + (static_cast<std::int64_t>(s) * oh + oi) * ow;
                        if (ii < 0 || ii >= h) {
                            std::fill(d, d + ow, 0.0);
                            continue;
                        }
                        const double* xrow = xp + static_cast<std::int64_t>(ii) * w;
                        std::fill(d, d + lo, 0.0);
                        std::fill(d + hi, d + ow, 0.0);
                        if (sp.stride_w == 1) {
                            std::memcpy(d + lo, xrow + lo - sp.pad_w + kj,
                                        static_cast<std::size_t>(hi - lo) * sizeof(double));
                        } else {
                            const double* src = xrow - sp.pad_w + kj;
                            for (int oj = lo; oj < hi; ++oj) d[oj] = src[oj * sp.stride_w];
                        }
                    }
                }
            }
}

inline void col2im_add(const double* col, int c_in, int h, int w, int kh, int kw,
                       const Conv2dSpec& sp, int n, int oh, int ow, double* gx) {
    const std::int64_t cols = static_cast<std::int64_t>(n) * oh * ow;
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    const std::int64_t x_stride_n = static_cast<std::int64_t>(c_in) * plane;
    std::int64_t row = 0;
    for (int c = 0; c < c_in; ++c)
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj, ++row) {
                const double* src = col + row * cols;
                int lo, hi;
                col_bounds(w, ow, sp.stride_w, sp.pad_w, kj, lo, hi);
                for (int s = 0; s < n; ++s) {
                    double* gp = gx + s * x_stride_n + c * plane;
                    for (int oi = 0; oi < oh; ++oi) {
                        const int ii = oi * sp.stride_h - sp.pad_h + ki;
                        if (ii < 0 || ii >= h) continue;
                        const double* srow = src + (static_cast<std::int64_t>(s) * oh + oi) * ow;
                        double* grow = gp + static_cast<std::int64_t>(ii) * w - sp.pad_w + kj;
                        for (int oj = lo; oj < hi; ++oj) grow[oj * sp.stride_w] += srow[oj];
                        (void)w;
                    }
                }
            }
}

inline std::vector<double>& conv_scratch() {
    thread_local std::vector<double> buf;
    return buf;
}

}  // namespace detail

/// x:(N,C,H,W) k:(OC,C,KH,KW) b:(OC) or invalid. Output spatial size
/// floor((in + 2*pad - k)/stride) + 1.
inline Var conv2d(Var x, Var k, Var b, const Conv2dSpec& sp) {
    const auto& xs = x.shape();
    const auto& ks = k.shape();
    require_shape(xs.rank() == 4 && ks.rank() == 4 && xs[1] == ks[1], "conv2d", xs, ks);
    const int n = xs[0], c_in = xs[1], h = xs[2], w = xs[3];
    const int oc = ks[0], kh = ks[2], kw = ks[3];
    const int oh = (h + 2 * sp.pad_h - kh) / sp.stride_h + 1;
    const int ow = (w + 2 * sp.pad_w - kw) / sp.stride_w + 1;
    if (oh <= 0 || ow <= 0)
        throw std::invalid_argument("conv2d: empty output for input " + xs.str() + " kernel " +
                                    ks.str());
    if (b.valid())
        require_shape(b.shape().rank() == 1 && b.shape()[0] == oc, "conv2d bias", ks, b.shape());

    Tape& t = *x.tape;
    std::vector<int> parents{x.id, k.id};
    if (b.valid()) parents.push_back(b.id);
    Var y = t.alloc(Shape{n, oc, oh, ow}, std::move(parents));

    const int kdim = c_in * kh * kw;
    const std::int64_t cols = static_cast<std::int64_t>(n) * oh * ow;
    auto& col = detail::conv_scratch();
    col.resize(static_cast<std::size_t>(kdim) * cols);
    detail::im2col(x.value().data(), c_in, h, w, kh, kw, sp, n, oh, ow, col.data());

    {
        CMapM km(k.value().data(), oc, kdim);
        CMapM cm(col.data(), kdim, cols);
        MatRM out(oc, cols);
        out.noalias() = km * cm;
        // (oc, n*oh*ow) -> (n, oc, oh, ow)
        const std::int64_t ohw = static_cast<std::int64_t>(oh) * ow;
        double* yv = y.value().data();
        for (int s = 0; s < n; ++s)
            for (int c = 0; c < oc; ++c) {
                const double* src = out.data() + c * cols + s * ohw;
                double* dst = yv + (static_cast<std::int64_t>(s) * oc + c) * ohw;
                if (b.valid()) {
                    const double bias = b.value()[c];
                    for (std::int64_t i = 0; i < ohw; ++i) dst[i] = src[i] + bias;
                } else {
                    std::memcpy(dst, src, ohw * sizeof(double));
                }
            }
    }

    const int xi = x.id, ki = k.id, bi = b.valid() ? b.id : -1, yi = y.id;
    t.nodes[yi].back = [xi, ki, bi, yi, sp, n, c_in, h, w, oc, kh, kw, oh, ow](Tape& tp) {
        const int kdim = c_in * kh * kw;
        const std::int64_t cols = static_cast<std::int64_t>(n) * oh * ow;
        const std::int64_t ohw = static_cast<std::int64_t>(oh) * ow;

        // permute upstream back to (oc, n*oh*ow)
        MatRM g(oc, cols);
        {
            const double* gy = tp.grad(yi).data();
            for (int s = 0; s < n; ++s)
                for (int c = 0; c < oc; ++c)
                    std::memcpy(g.data() + c * cols + s * ohw,
                                gy + (static_cast<std::int64_t>(s) * oc + c) * ohw,
                                ohw * sizeof(double));
        }
        if (tp.needs(ki)) {
            auto& col = detail::conv_scratch();
            col.resize(static_cast<std::size_t>(kdim) * cols);
            detail::im2col(tp.nodes[xi].value.data(), c_in, h, w, kh, kw, sp, n, oh, ow,
                           col.data());
            CMapM cm(col.data(), kdim, cols);
            MapM(tp.grad(ki).data(), oc, kdim).noalias() += g * cm.transpose();
        }
        if (bi >= 0 && tp.needs(bi)) {
            auto& gb = tp.grad(bi);
            for (int c = 0; c < oc; ++c) gb[c] += g.row(c).sum();
        }
        if (tp.needs(xi)) {
            CMapM km(tp.nodes[ki].value.data(), oc, kdim);
            MatRM dcol(kdim, cols);
            dcol.noalias() = km.transpose() * g;
            detail::col2im_add(dcol.data(), c_in, h, w, kh, kw, sp, n, oh, ow, tp.grad(xi).data());
        }
    };
    return y;
}

/// Nearest-neighbor resize to (out_h, out_w); source index floor(i*in/out).
/// For integer upscale factors this is exact replication.
inline Var upsample_nearest(Var x, int out_h, int out_w) {
    const auto& xs = x.shape();
    if (xs.rank() != 4) throw std::invalid_argument("upsample_nearest: expected rank-4, got " + xs.str());
    const int n = xs[0], c = xs[1], h = xs[2], w = xs[3];
    if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("upsample_nearest: bad target size");

    Tape& t = *x.tape;
    Var y = t.alloc(Shape{n, c, out_h, out_w}, {x.id});
    auto rows = std::make_shared<std::vector<int>>(out_h);
    auto cols = std::make_shared<std::vector<int>>(out_w);
    for (int i = 0; i < out_h; ++i)
        (*rows)[i] = std::min(h - 1, static_cast<int>((static_cast<std::int64_t>(i) * h) / out_h));
    for (int j = 0; j < out_w; ++j)
        (*cols)[j] = std::min(w - 1, static_cast<int>((static_cast<std::int64_t>(j) * w) / out_w));

    {
        const double* xv = x.value().data();
        double* yv = y.value().data();
        for (int s = 0; s < n * c; ++s) {
            const double* xs_ = xv + static_cast<std::int64_t>(s) * h * w;
            double* ys_ = yv + static_cast<std::int64_t>(s) * out_h * out_w;
            for (int i = 0; i < out_h; ++i) {
                const double* xrow = xs_ + static_cast<std::int64_t>((*rows)[i]) * w;
                double* yrow = ys_ + static_cast<std::int64_t>(i) * out_w;
                for (int j = 0; j < out_w; ++j) yrow[j] = xrow[(*cols)[j]];
            }
        }
    }
    const int xi = x.id, yi = y.id;
    t.nodes[yi].back = [xi, yi, rows, cols, n, c, h, w, out_h, out_w](Tape& tp) {
        const double* g = tp.grad(yi).data();
        double* gx = tp.grad(xi).data();
        for (int s = 0; s < n * c; ++s) {
            double* gxs = gx + static_cast<std::int64_t>(s) * h * w;
            const double* gys = g + static_cast<std::int64_t>(s) * out_h * out_w;
            for (int i = 0; i < out_h; ++i) {
                double* gxrow = gxs + static_cast<std::int64_t>((*rows)[i]) * w;
                const double* grow = gys + static_cast<std::int64_t>(i) * out_w;
                for (int j = 0; j < out_w; ++j) gxrow[(*cols)[j]] += grow[j];
            }
        }
    };
    return y;
}

/// Nearest-upsample by an integer factor, then conv (stride 1, same padding
/// for odd kernels).
inline Var upconv2d(Var x, Var k, Var b, int factor) {
    if (factor < 1) throw std::invalid_argument("upconv2d: factor must be >= 1");
    const auto& xs = x.shape();
    Var up = upsample_nearest(x, xs[2] * factor, xs[3] * factor);
    const auto& ks = k.shape();
    Conv2dSpec sp;
    sp.pad_h = (ks[2] - 1) / 2;
    sp.pad_w = (ks[3] - 1) / 2;
    return conv2d(up, k, b, sp);
}

/// Concatenate along the channel axis; rank-2 inputs concatenate features.
inline Var concat_channels(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_channels: no inputs");
    Tape& t = *xs[0].tape;
    const int rank = xs[0].shape().rank();
    int total_c = 0;
    for (const auto& x : xs) {
        require_shape(x.shape().rank() == rank, "concat_channels", xs[0].shape(), x.shape());
        if (rank == 4) {
            require_shape(x.shape()[0] == xs[0].shape()[0] && x.shape()[2] == xs[0].shape()[2] &&
                              x.shape()[3] == xs[0].shape()[3],
                          "concat_channels", xs[0].shape(), x.shape());
            total_c += x.shape()[1];
        } else if (rank == 2) {
            require_shape(x.shape()[0] == xs[0].shape()[0], "concat_channels", xs[0].shape(),
                          x.shape());
            total_c += x.shape()[1];
        } else {
            throw std::invalid_argument("concat_channels: expected rank 2 or 4");
        }
    }
    const int n = xs[0].shape()[0];
    const std::int64_t plane = rank == 4 ? static_cast<std::int64_t>(xs[0].shape()[2]) * xs[0].shape()[3] : 1;

    Shape out_shape = rank == 4
                          ? Shape{n, total_c, xs[0].shape()[2], xs[0].shape()[3]}
                          : Shape{n, total_c};
    std::vector<int> parents;
    for (const auto& x : xs) parents.push_back(x.id);
    Var y = t.alloc(std::move(out_shape), parents);

    auto ids = std::make_shared<std::vector<int>>(parents);
    auto chans = std::make_shared<std::vector<int>>();
    for (const auto& x : xs) chans->push_back(rank == 4 ? x.shape()[1] : x.shape()[1]);

    {
        double* yv = y.value().data();
        for (int s = 0; s < n; ++s) {
            std::int64_t off = static_cast<std::int64_t>(s) * total_c * plane;
            for (std::size_t i = 0; i < xs.size(); ++i) {
                const std::int64_t block = static_cast<std::int64_t>((*chans)[i]) * plane;
                std::memcpy(yv + off, xs[i].value().data() + static_cast<std::int64_t>(s) * block,
                            block * sizeof(double));
                off += block;
            }
        }
    }
    const int yi = y.id;
    t.nodes[yi].back = [yi, ids, chans, n, total_c, plane](Tape& tp) {
        const double* g = tp.grad(yi).data();
        for (int s = 0; s < n; ++s) {
            std::int64_t off = static_cast<std::int64_t>(s) * total_c * plane;
            for (std::size_t i = 0; i < ids->size(); ++i) {
                const std::int64_t block = static_cast<std::int64_t>((*chans)[i]) * plane;
                if (tp.needs((*ids)[i])) {
                    double* gx = tp.grad((*ids)[i]).data() + static_cast<std::int64_t>(s) * block;
                    const double* gs = g + off;
                    for (std::int64_t j = 0; j < block; ++j) gx[j] += gs[j];
                }
                off += block;
            }
        }
    };
    return y;
}

/// Concatenate along the batch axis (dim 0); trailing dims must agree.
inline Var concat_batch(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_batch: no inputs");
    Tape& t = *xs[0].tape;
    int total_n = 0;
    for (const auto& x : xs) {
        require_shape(x.shape().rank() == xs[0].shape().rank(), "concat_batch", xs[0].shape(),
                      x.shape());
        for (int d = 1; d < x.shape().rank(); ++d)
            require_shape(x.shape()[d] == xs[0].shape()[d], "concat_batch", xs[0].shape(),
                          x.shape());
        total_n += x.shape()[0];
    }
    Shape out_shape = xs[0].shape();
    out_shape.dims[0] = total_n;
    std::vector<int> parents;
    for (const auto& x : xs) parents.push_back(x.id);
    Var y = t.alloc(std::move(out_shape), parents);
    auto ids = std::make_shared<std::vector<int>>(parents);
    {
        std::size_t off = 0;
        for (const auto& x : xs) {
            std::memcpy(y.value().data() + off, x.value().data(),
                        x.value().size() * sizeof(double));
            off += x.value().size();
        }
    }
    const int yi = y.id;
    t.nodes[yi].back = [yi, ids](Tape& tp) {
        const double* g = tp.grad(yi).data();
        std::size_t off = 0;
        for (int id : *ids) {
            const auto n = static_cast<Eigen::Index>(tp.nodes[id].value.size());
            if (tp.needs(id)) MapA(tp.grad(id).data(), n) += CMapA(g + off, n);
            off += static_cast<std::size_t>(n);
        }
    };
    return y;
}

/// Rows [start, start+count) along the batch axis.
inline Var slice_batch(Var x, int start, int count) {
    const auto& xs = x.shape();
    if (start < 0 || count <= 0 || start + count > xs[0])
        throw std::invalid_argument("slice_batch: range out of bounds for " + xs.str());
    Shape out_shape = xs;
    out_shape.dims[0] = count;
    Tape& t = *x.tape;
    Var y = t.alloc(out_shape, {x.id});
    const std::size_t per_row = static_cast<std::size_t>(xs.numel() / xs[0]);
    std::memcpy(y.value().data(), x.value().data() + start * per_row,
                y.value().size() * sizeof(double));
    const int xi = x.id, yi = y.id;
    t.nodes[yi].back = [xi, yi, start, per_row](Tape& tp) {
        const auto& g = tp.grad(yi);
        const auto n = static_cast<Eigen::Index>(g.size());
        MapA(tp.grad(xi).data() + start * per_row, n) += CMapA(g.data(), n);
    };
    return y;
}

/// Tile a per-sample feature vector (N,F) over a spatial map -> (N,F,H,W).
inline Var broadcast_spatial(Var x, int h, int w) {
    const auto& xs = x.shape();
    if (xs.rank() != 2) throw std::invalid_argument("broadcast_spatial: expected rank-2, got " + xs.str());
    const int n = xs[0], f = xs[1];
    Tape& t = *x.tape;
    Var y = t.alloc(Shape{n, f, h, w}, {x.id});
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    {
        const double* xv = x.value().data();
        double* yv = y.value().data();
        for (int s = 0; s < n; ++s)
            for (int c = 0; c < f; ++c) {
                const double v = xv[static_cast<std::int64_t>(s) * f + c];
                double* dst = yv + (static_cast<std::int64_t>(s) * f + c) * plane;
                std::fill(dst, dst + plane, v);
            }
    }
    const int xi = x.id, yi = y.id;
    t.nodes[yi].back = [xi, yi, n, f, plane](Tape& tp) {
        const double* g = tp.grad(yi).data();
        double* gx = tp.grad(xi).data();
        for (int s = 0; s < n; ++s)
            for (int c = 0; c < f; ++c) {
                const double* src = g + (static_cast<std::int64_t>(s) * f + c) * plane;
                double acc = 0.0;
                for (std::int64_t j = 0; j < plane; ++j) acc += src[j];
                gx[static_cast<std::int64_t>(s) * f + c] += acc;
            }
    };
    return y;
}

// ---- losses ----

/// Mean over all elements of (pred - target)^2.
inline Var mse_loss(Var pred, Var target) {
    require_shape(pred.shape() == target.shape(), "mse_loss", pred.shape(), target.shape());
    Tape& t = *pred.tape;
    Var y = t.alloc(Shape{1}, {pred.id, target.id});
    const auto n = static_cast<Eigen::Index>(pred.value().size());
    CMapA p(pred.value().data(), n);
    CMapA tv(target.value().data(), n);
    y.value()[0] = (p - tv).square().sum() / static_cast<double>(n);
    const int pi = pred.id, ti = target.id, yi = y.id;
    t.nodes[yi].back = [pi, ti, yi, n](Tape& tp) {
        const double g = tp.grad(yi)[0] * 2.0 / static_cast<double>(n);
        CMapA p(tp.nodes[pi].value.data(), n);
        CMapA tv(tp.nodes[ti].value.data(), n);
        if (tp.needs(pi)) MapA(tp.grad(pi).data(), n) += g * (p - tv);
        if (tp.needs(ti)) MapA(tp.grad(ti).data(), n) -= g * (p - tv);
    };
    return y;
}

/// Mean binary cross-entropy; probabilities clamped to [1e-7, 1-1e-7].
inline Var bce_loss(Var prob, Var label) {
    require_shape(prob.shape() == label.shape(), "bce_loss", prob.shape(), label.shape());
    constexpr double kLo = 1e-7, kHi = 1.0 - 1e-7;
    Tape& t = *prob.tape;
    Var y = t.alloc(Shape{1}, {prob.id, label.id});
    const auto& pv = prob.value();
    const auto& lv = label.value();
    double acc = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const double p = std::min(kHi, std::max(kLo, pv[i]));
        acc -= lv[i] * std::log(p) + (1.0 - lv[i]) * std::log(1.0 - p);
    }
    y.value()[0] = acc / static_cast<double>(pv.size());
    const int pi = prob.id, yi = y.id;
    t.nodes[yi].back = [pi, yi](Tape& tp) {
        if (!tp.needs(pi)) return;
        const auto& pv = tp.nodes[pi].value;
        const auto& lv = tp.nodes[tp.nodes[yi].parents[1]].value;
        const double g = tp.grad(yi)[0] / static_cast<double>(pv.size());
        auto& gp = tp.grad(pi);
        for (std::size_t i = 0; i < pv.size(); ++i) {
            if (pv[i] <= kLo || pv[i] >= kHi) continue;  // hard clamp
            gp[i] += g * (-lv[i] / pv[i] + (1.0 - lv[i]) / (1.0 - pv[i]));
        }
    };
    return y;
}

// ---- checkpoint container (SSLW) ----
//
//   magic "SSLW", version u32, kind string (u32 len + bytes), entry count u32,
//   per entry: name (u32 len + bytes), rank u32, dims u32 x rank, f64 payload.

struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::vector<double> data;
};

inline void write_checkpoint(const std::string& path, const std::string& kind,
                             const std::vector<CheckpointEntry>& entries) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    auto put_u32 = [&os](std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
    auto put_str = [&](const std::string& s) {
        put_u32(static_cast<std::uint32_t>(s.size()));
        os.write(s.data(), static_cast<std::streamsize>(s.size()));
    };
    os.write("SSLW", 4);
    put_u32(1u);
    put_str(kind);
    put_u32(static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        put_str(e.name);
        put_u32(static_cast<std::uint32_t>(e.shape.rank()));
        for (int d : e.shape.dims) put_u32(static_cast<std::uint32_t>(d));
        os.write(reinterpret_cast<const char*>(e.data.data()),
                 static_cast<std::streamsize>(e.data.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("write failed: " + path);
}

inline std::pair<std::string, std::vector<CheckpointEntry>> read_checkpoint(
    const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "SSLW", 4) != 0)
        throw std::runtime_error("not an SSLW checkpoint: " + path);
    auto get_u32 = [&is]() {
        std::uint32_t v;
        is.read(reinterpret_cast<char*>(&v), 4);
        if (!is) throw std::runtime_error("SSLW: truncated");
        return v;
    };
    auto get_str = [&]() {
        const auto len = get_u32();
        std::string s(len, '\0');
        is.read(s.data(), len);
        if (!is) throw std::runtime_error("SSLW: truncated");
        return s;
    };
    if (get_u32() != 1u) throw std::runtime_error("unsupported SSLW version");
    const std::string kind = get_str();
    const auto count = get_u32();
    std::vector<CheckpointEntry> entries(count);
    for (auto& e : entries) {
        e.name = get_str();
        const auto rank = get_u32();
        std::vector<int> dims(rank);
        for (auto& d : dims) d = static_cast<int>(get_u32());
        e.shape = Shape{dims};
        e.data.resize(static_cast<std::size_t>(e.shape.numel()));
        is.read(reinterpret_cast<char*>(e.data.data()),
                static_cast<std::streamsize>(e.data.size() * sizeof(double)));
        if (!is) throw std::runtime_error("SSLW: truncated");
    }
    return {kind, entries};
}

inline void store_to_entries(const ParamStore& store, const std::string& prefix,
                             bool include_optimizer, std::vector<CheckpointEntry>& out) {
    for (const auto& p : store.params())
        out.push_back({prefix + p->name, p->shape, p->value});
    if (include_optimizer) {
        for (const auto& p : store.params()) {
            out.push_back({prefix + "adam.m/" + p->name, p->shape, p->m});
            out.push_back({prefix + "adam.v/" + p->name, p->shape, p->v});
        }
        out.push_back({prefix + "adam.step", Shape{1},
                       {static_cast<double>(store.step_count())}});
    }
}

inline void entries_to_store(const std::vector<CheckpointEntry>& entries,
                             const std::string& prefix, ParamStore& store) {
    std::map<std::string, const CheckpointEntry*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e;
    for (const auto& p : store.params()) {
        auto it = by_name.find(prefix + p->name);
        if (it == by_name.end())
            throw std::runtime_error("checkpoint missing parameter: " + prefix + p->name);
        if (!(it->second->shape == p->shape))
            throw std::runtime_error("checkpoint shape mismatch for " + p->name);
        p->value = it->second->data;
        auto im = by_name.find(prefix + "adam.m/" + p->name);
        auto iv = by_name.find(prefix + "adam.v/" + p->name);
        if (im != by_name.end()) p->m = im->second->data;
        if (iv != by_name.end()) p->v = iv->second->data;
    }
    auto is_ = by_name.find(prefix + "adam.step");
    if (is_ != by_name.end())
        store.set_step_count(static_cast<std::int64_t>(is_->second->data[0]));
}

}  // namespace ssl2d::ad
