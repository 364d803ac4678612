#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace stiv {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
    return r + "]";
}

struct AutogradState {
    bool grad_enabled = true;
    bool finite_checks = true;
};

inline AutogradState& autograd_state() {
    thread_local AutogradState st;
    return st;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(autograd_state().grad_enabled) { autograd_state().grad_enabled = false; }
    ~NoGradGuard() { autograd_state().grad_enabled = prev; }
};

// ---------------------------------------------------------------------------
// Counter-based RNG (Philox4x32-10). Identical (seed, counter) always replays
// the same stream; every draw advances the counter by a fixed amount.
// ---------------------------------------------------------------------------

struct RngState {
    uint64_t seed = 0;
    uint64_t counter = 0;
};

namespace detail {

inline std::array<uint32_t, 4> philox4x32(uint64_t seed, uint64_t ctr) {
    uint32_t k0 = static_cast<uint32_t>(seed);
    uint32_t k1 = static_cast<uint32_t>(seed >> 32);
    uint32_t c0 = static_cast<uint32_t>(ctr);
    uint32_t c1 = static_cast<uint32_t>(ctr >> 32);
    uint32_t c2 = 0xCAFEF00Du;
    uint32_t c3 = 0xDEADBEEFu;
    constexpr uint32_t M0 = 0xD2511F53u, M1 = 0xCD9E8D57u;
    constexpr uint32_t W0 = 0x9E3779B9u, W1 = 0xBB67AE85u;
    for (int round = 0; round < 10; ++round) {
        uint64_t p0 = static_cast<uint64_t>(M0) * c0;
        uint64_t p1 = static_cast<uint64_t>(M1) * c2;
        uint32_t h0 = static_cast<uint32_t>(p0 >> 32), l0 = static_cast<uint32_t>(p0);
        uint32_t h1 = static_cast<uint32_t>(p1 >> 32), l1 = static_cast<uint32_t>(p1);
        uint32_t n0 = h1 ^ c1 ^ k0;
        uint32_t n1 = l1;
        uint32_t n2 = h0 ^ c3 ^ k1;
        uint32_t n3 = l0;
        c0 = n0; c1 = n1; c2 = n2; c3 = n3;
        k0 += W0; k1 += W1;
    }
    return {c0, c1, c2, c3};
}

}  // namespace detail

// Uniform double in [0, 1); consumes one counter tick.
inline double rng_uniform(RngState& rng) {
    auto r = detail::philox4x32(rng.seed, rng.counter++);
    uint64_t bits = (static_cast<uint64_t>(r[0]) << 32) | r[1];
    return static_cast<double>(bits >> 11) * (1.0 / 9007199254740992.0);
}

// Two standard normals per counter tick (Box-Muller).
inline void rng_normal_pair(RngState& rng, double& z0, double& z1) {
    auto r = detail::philox4x32(rng.seed, rng.counter++);
    uint64_t b0 = (static_cast<uint64_t>(r[0]) << 32) | r[1];
    uint64_t b1 = (static_cast<uint64_t>(r[2]) << 32) | r[3];
    double u1 = (static_cast<double>(b0 >> 11) + 1.0) * (1.0 / 9007199254740993.0);
    double u2 = static_cast<double>(b1 >> 11) * (1.0 / 9007199254740992.0);
    double m = std::sqrt(-2.0 * std::log(u1));
    z0 = m * std::cos(2.0 * M_PI * u2);
    z1 = m * std::sin(2.0 * M_PI * u2);
}

inline uint64_t rng_below(RngState& rng, uint64_t n) {
    return static_cast<uint64_t>(rng_uniform(rng) * static_cast<double>(n)) % n;
}

// Fisher-Yates permutation of [0, n).
inline std::vector<int64_t> rng_permutation(RngState& rng, int64_t n) {
    std::vector<int64_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    for (int64_t i = n - 1; i > 0; --i) {
        int64_t j = static_cast<int64_t>(rng_below(rng, static_cast<uint64_t>(i + 1)));
        std::swap(p[i], p[j]);
    }
    return p;
}

// ---------------------------------------------------------------------------
// Tensor with a dynamic reverse-mode tape. S is float in normal builds and
// double in high-precision test mode.
// ---------------------------------------------------------------------------

template <class S>
class TensorBase {
public:
    struct Node {
        Shape shape;
        std::vector<S> data;
        std::vector<S> grad;
        bool requires_grad = false;
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backward_fn;  // reads this node's grad, accumulates into parents
        const char* op = "";

        int64_t numel() const { return static_cast<int64_t>(data.size()); }
        void ensure_grad() {
            if (grad.empty()) grad.assign(data.size(), S(0));
        }
    };

    std::shared_ptr<Node> n;

    TensorBase() = default;
    explicit TensorBase(std::shared_ptr<Node> node) : n(std::move(node)) {}

    bool defined() const { return n != nullptr; }
    const Shape& shape() const { return n->shape; }
    int64_t dim(int i) const { return n->shape[static_cast<size_t>(i >= 0 ? i : int(n->shape.size()) + i)]; }
    int64_t ndim() const { return static_cast<int64_t>(n->shape.size()); }
    int64_t numel() const { return n->numel(); }
    std::vector<S>& data() { return n->data; }
    const std::vector<S>& data() const { return n->data; }
    std::vector<S>& grad() { return n->grad; }
    const std::vector<S>& grad() const { return n->grad; }
    bool requires_grad() const { return n->requires_grad; }

    S item() const {
        if (numel() != 1) throw std::invalid_argument("item(): tensor has " + std::to_string(numel()) + " elements");
        return n->data[0];
    }

    TensorBase& set_requires_grad(bool v = true) {
        n->requires_grad = v;
        return *this;
    }

    void zero_grad() { n->grad.clear(); }

    // Detached copy of values (fresh leaf).
    TensorBase detach() const {
        auto out = std::make_shared<Node>();
        out->shape = n->shape;
        out->data = n->data;
        return TensorBase(out);
    }

    static TensorBase from_data(Shape shape, std::vector<S> data) {
        if (numel_of(shape) != static_cast<int64_t>(data.size()))
            throw std::invalid_argument("from_data: shape " + shape_str(shape) + " does not match data length " +
                                        std::to_string(data.size()));
        auto node = std::make_shared<Node>();
        node->shape = std::move(shape);
        node->data = std::move(data);
        return TensorBase(node);
    }

    static TensorBase zeros(Shape shape) {
        auto node = std::make_shared<Node>();
        node->data.assign(static_cast<size_t>(numel_of(shape)), S(0));
        node->shape = std::move(shape);
        return TensorBase(node);
    }

    static TensorBase full(Shape shape, S value) {
        auto node = std::make_shared<Node>();
        node->data.assign(static_cast<size_t>(numel_of(shape)), value);
        node->shape = std::move(shape);
        return TensorBase(node);
    }

    static TensorBase ones(Shape shape) { return full(std::move(shape), S(1)); }

    static TensorBase scalar(S value) { return from_data({}, {value}); }

    static TensorBase gaussian(RngState& rng, Shape shape) {
        auto node = std::make_shared<Node>();
        int64_t count = numel_of(shape);
        node->shape = std::move(shape);
        node->data.resize(static_cast<size_t>(count));
        for (int64_t i = 0; i < count; i += 2) {
            double z0, z1;
            rng_normal_pair(rng, z0, z1);
            node->data[static_cast<size_t>(i)] = static_cast<S>(z0);
            if (i + 1 < count) node->data[static_cast<size_t>(i + 1)] = static_cast<S>(z1);
        }
        return TensorBase(node);
    }

    // Reverse pass from a scalar output. Unreachable leaves keep empty grads.
    void backward() const {
        if (numel() != 1) throw std::invalid_argument("backward() requires a scalar output");
        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        std::vector<std::pair<Node*, size_t>> stack;
        stack.push_back({n.get(), 0});
        seen.insert(n.get());
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                Node* p = node->parents[idx++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.push_back({p, 0});
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        n->ensure_grad();
        n->grad[0] += S(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* node = *it;
            if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
        }
    }
};

namespace detail {

template <class S>
inline std::shared_ptr<typename TensorBase<S>::Node> alloc_node(Shape shape, const char* op) {
    auto node = std::make_shared<typename TensorBase<S>::Node>();
    node->data.resize(static_cast<size_t>(numel_of(shape)));
    node->shape = std::move(shape);
    node->op = op;
    return node;
}

template <class S>
inline void check_finite(const typename TensorBase<S>::Node& node) {
    if (!autograd_state().finite_checks) return;
    for (S v : node.data) {
        if (!std::isfinite(static_cast<double>(v)))
            throw std::runtime_error(std::string("non-finite value produced by op '") + node.op + "' shape " +
                                     shape_str(node.shape));
    }
}

template <class S>
inline void wire(TensorBase<S>& out, std::initializer_list<TensorBase<S>> inputs,
                 std::function<void(typename TensorBase<S>::Node&)> backward_fn) {
    check_finite<S>(*out.n);
    if (!autograd_state().grad_enabled) return;
    bool needs = false;
    for (const auto& t : inputs) needs = needs || t.n->requires_grad;
    if (!needs) return;
    out.n->requires_grad = true;
    for (const auto& t : inputs)
        if (t.n->requires_grad) out.n->parents.push_back(t.n);
    out.n->backward_fn = std::move(backward_fn);
}

template <class S>
inline void acc_grad(const std::shared_ptr<typename TensorBase<S>::Node>& node, const std::vector<S>& g) {
    node->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) node->grad[i] += g[i];
}

// Right-aligned broadcast of two shapes.
inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
    Shape out(std::max(a.size(), b.size()));
    for (size_t i = 0; i < out.size(); ++i) {
        int64_t da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
        int64_t db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
        if (da != db && da != 1 && db != 1)
            throw std::invalid_argument("broadcast mismatch " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Element strides of `shape` right-aligned into a broadcast result of rank
// `out_rank`; 0 where the dim is broadcast.
inline std::vector<int64_t> broadcast_strides(const Shape& shape, const Shape& out) {
    std::vector<int64_t> st(out.size(), 0);
    int64_t run = 1;
    for (size_t i = 0; i < shape.size(); ++i) {
        size_t j = shape.size() - 1 - i;
        size_t oj = out.size() - 1 - i;
        st[oj] = (shape[j] == 1 && out[oj] != 1) ? 0 : run;
        run *= shape[j];
    }
    return st;
}

// Sum-reduce a gradient of shape `from` down to `to` (inverse of broadcast).
template <class S>
inline std::vector<S> reduce_to(const std::vector<S>& g, const Shape& from, const Shape& to) {
    int64_t nto = numel_of(to);
    if (numel_of(from) == nto) return g;
    std::vector<S> out(static_cast<size_t>(nto), S(0));
    auto st = broadcast_strides(to, from);
    size_t rank = from.size();
    std::vector<int64_t> idx(rank, 0);
    int64_t src = 0, dst = 0;
    int64_t total = numel_of(from);
    for (int64_t i = 0; i < total; ++i) {
        out[static_cast<size_t>(dst)] += g[static_cast<size_t>(src)];
        ++src;
        for (size_t d = rank; d-- > 0;) {
            ++idx[d];
            dst += st[d];
            if (idx[d] < from[d]) break;
            idx[d] = 0;
            dst -= st[d] * from[d];
        }
    }
    return out;
}

template <class S, class FwdFn>
inline TensorBase<S> broadcast_binary(const TensorBase<S>& a, const TensorBase<S>& b, const char* opname, FwdFn f,
                                      std::function<void(typename TensorBase<S>::Node&)> backward_fn) {
    Shape os = broadcast_shapes(a.shape(), b.shape());
    auto out = TensorBase<S>(alloc_node<S>(os, opname));
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    int64_t total = out.numel();
    auto is_suffix_of = [&os](const Shape& s) {
        if (s.size() > os.size()) return false;
        size_t off = os.size() - s.size();
        for (size_t i = 0; i < s.size(); ++i)
            if (s[i] != os[off + i]) return false;
        return true;
    };
    if (a.shape() == b.shape()) {
        for (int64_t i = 0; i < total; ++i) od[i] = f(ad[i], bd[i]);
    } else if (a.shape() == os && is_suffix_of(b.shape())) {
        int64_t bn = std::max<int64_t>(b.numel(), 1);
        for (int64_t i = 0; i < total; ++i) od[i] = f(ad[i], bd[i % bn]);
    } else if (b.shape() == os && is_suffix_of(a.shape())) {
        int64_t an = std::max<int64_t>(a.numel(), 1);
        for (int64_t i = 0; i < total; ++i) od[i] = f(ad[i % an], bd[i]);
    } else {
        auto sa = broadcast_strides(a.shape(), os);
        auto sb = broadcast_strides(b.shape(), os);
        size_t rank = os.size();
        std::vector<int64_t> idx(rank, 0);
        int64_t ia = 0, ib = 0;
        for (int64_t i = 0; i < total; ++i) {
            od[i] = f(ad[static_cast<size_t>(ia)], bd[static_cast<size_t>(ib)]);
            for (size_t d = rank; d-- > 0;) {
                ++idx[d];
                ia += sa[d];
                ib += sb[d];
                if (idx[d] < os[d]) break;
                idx[d] = 0;
                ia -= sa[d] * os[d];
                ib -= sb[d] * os[d];
            }
        }
    }
    wire<S>(out, {a, b}, std::move(backward_fn));
    return out;
}

}  // namespace detail

// ------------------------------- elementwise -------------------------------

template <class S>
TensorBase<S> add(const TensorBase<S>& a, const TensorBase<S>& b) {
    auto an = a.n, bn = b.n;
    Shape os = detail::broadcast_shapes(a.shape(), b.shape());
    return detail::broadcast_binary<S>(a, b, "add", [](S x, S y) { return x + y; },
        [an, bn, os](typename TensorBase<S>::Node& self) {
            if (an->requires_grad) detail::acc_grad<S>(an, detail::reduce_to<S>(self.grad, os, an->shape));
            if (bn->requires_grad) detail::acc_grad<S>(bn, detail::reduce_to<S>(self.grad, os, bn->shape));
        });
}

template <class S>
TensorBase<S> sub(const TensorBase<S>& a, const TensorBase<S>& b) {
    auto an = a.n, bn = b.n;
    Shape os = detail::broadcast_shapes(a.shape(), b.shape());
    return detail::broadcast_binary<S>(a, b, "sub", [](S x, S y) { return x - y; },
        [an, bn, os](typename TensorBase<S>::Node& self) {
            if (an->requires_grad) detail::acc_grad<S>(an, detail::reduce_to<S>(self.grad, os, an->shape));
            if (bn->requires_grad) {
                auto g = detail::reduce_to<S>(self.grad, os, bn->shape);
                for (auto& v : g) v = -v;
                detail::acc_grad<S>(bn, g);
            }
        });
}

template <class S>
TensorBase<S> mul(const TensorBase<S>& a, const TensorBase<S>& b) {
    auto an = a.n, bn = b.n;
    Shape os = detail::broadcast_shapes(a.shape(), b.shape());
    return detail::broadcast_binary<S>(a, b, "mul", [](S x, S y) { return x * y; },
        [an, bn, os](typename TensorBase<S>::Node& self) {
            if (an->requires_grad || bn->requires_grad) {
                auto sa = detail::broadcast_strides(an->shape, os);
                auto sb = detail::broadcast_strides(bn->shape, os);
                size_t rank = os.size();
                std::vector<S> ga(an->requires_grad ? an->data.size() : 0, S(0));
                std::vector<S> gb(bn->requires_grad ? bn->data.size() : 0, S(0));
                std::vector<int64_t> idx(rank, 0);
                int64_t ia = 0, ib = 0;
                int64_t total = numel_of(os);
                for (int64_t i = 0; i < total; ++i) {
                    S g = self.grad[static_cast<size_t>(i)];
                    if (!ga.empty()) ga[static_cast<size_t>(ia)] += g * bn->data[static_cast<size_t>(ib)];
                    if (!gb.empty()) gb[static_cast<size_t>(ib)] += g * an->data[static_cast<size_t>(ia)];
                    for (size_t d = rank; d-- > 0;) {
                        ++idx[d];
                        ia += sa[d];
                        ib += sb[d];
                        if (idx[d] < os[d]) break;
                        idx[d] = 0;
                        ia -= sa[d] * os[d];
                        ib -= sb[d] * os[d];
                    }
                }
                if (!ga.empty()) detail::acc_grad<S>(an, ga);
                if (!gb.empty()) detail::acc_grad<S>(bn, gb);
            }
        });
}

template <class S>
TensorBase<S> div(const TensorBase<S>& a, const TensorBase<S>& b) {
    auto an = a.n, bn = b.n;
    Shape os = detail::broadcast_shapes(a.shape(), b.shape());
    return detail::broadcast_binary<S>(a, b, "div", [](S x, S y) { return x / y; },
        [an, bn, os](typename TensorBase<S>::Node& self) {
            auto sa = detail::broadcast_strides(an->shape, os);
            auto sb = detail::broadcast_strides(bn->shape, os);
            size_t rank = os.size();
            std::vector<S> ga(an->requires_grad ? an->data.size() : 0, S(0));
            std::vector<S> gb(bn->requires_grad ? bn->data.size() : 0, S(0));
            std::vector<int64_t> idx(rank, 0);
            int64_t ia = 0, ib = 0;
            int64_t total = numel_of(os);
            for (int64_t i = 0; i < total; ++i) {
                S g = self.grad[static_cast<size_t>(i)];
                S bv = bn->data[static_cast<size_t>(ib)];
                if (!ga.empty()) ga[static_cast<size_t>(ia)] += g / bv;
                if (!gb.empty()) gb[static_cast<size_t>(ib)] -= g * an->data[static_cast<size_t>(ia)] / (bv * bv);
                for (size_t d = rank; d-- > 0;) {
                    ++idx[d];
                    ia += sa[d];
                    ib += sb[d];
                    if (idx[d] < os[d]) break;
                    idx[d] = 0;
                    ia -= sa[d] * os[d];
                    ib -= sb[d] * os[d];
                }
            }
            if (!ga.empty()) detail::acc_grad<S>(an, ga);
            if (!gb.empty()) detail::acc_grad<S>(bn, gb);
        });
}

template <class S, class FwdFn, class DerivFn>
TensorBase<S> unary_op(const TensorBase<S>& a, const char* opname, FwdFn f, DerivFn dfdx_from_xy) {
    auto out = TensorBase<S>(detail::alloc_node<S>(a.shape(), opname));
    const auto& ad = a.data();
    auto& od = out.data();
    for (size_t i = 0; i < ad.size(); ++i) od[i] = f(ad[i]);
    auto an = a.n;
    detail::wire<S>(out, {a}, [an, dfdx_from_xy](typename TensorBase<S>::Node& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            an->grad[i] += self.grad[i] * dfdx_from_xy(an->data[i], self.data[i]);
    });
    return out;
}

template <class S>
TensorBase<S> neg(const TensorBase<S>& a) {
    return unary_op(a, "neg", [](S x) { return -x; }, [](S, S) { return S(-1); });
}

template <class S>
TensorBase<S> scale(const TensorBase<S>& a, S c) {
    return unary_op(a, "scale", [c](S x) { return c * x; }, [c](S, S) { return c; });
}

template <class S>
TensorBase<S> add_scalar(const TensorBase<S>& a, S c) {
    return unary_op(a, "add_scalar", [c](S x) { return x + c; }, [](S, S) { return S(1); });
}

template <class S>
TensorBase<S> exp_t(const TensorBase<S>& a) {
    return unary_op(a, "exp", [](S x) { return std::exp(x); }, [](S, S y) { return y; });
}

template <class S>
TensorBase<S> sqrt_t(const TensorBase<S>& a) {
    return unary_op(a, "sqrt", [](S x) { return std::sqrt(x); }, [](S, S y) { return S(0.5) / y; });
}

template <class S>
TensorBase<S> rsqrt_t(const TensorBase<S>& a) {
    return unary_op(a, "rsqrt", [](S x) { return S(1) / std::sqrt(x); },
                    [](S x, S y) { return S(-0.5) * y / x; });
}

template <class S>
TensorBase<S> square(const TensorBase<S>& a) {
    return unary_op(a, "square", [](S x) { return x * x; }, [](S x, S) { return S(2) * x; });
}

template <class S>
TensorBase<S> silu(const TensorBase<S>& a) {
    return unary_op(a, "silu", [](S x) { return x / (S(1) + std::exp(-x)); },
                    [](S x, S) {
                        S sig = S(1) / (S(1) + std::exp(-x));
                        return sig * (S(1) + x * (S(1) - sig));
                    });
}

// tanh-approximate GELU.
template <class S>
TensorBase<S> gelu(const TensorBase<S>& a) {
    static constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    return unary_op(a, "gelu",
                    [](S x) {
                        double xd = static_cast<double>(x);
                        return static_cast<S>(0.5 * xd * (1.0 + std::tanh(k * (xd + 0.044715 * xd * xd * xd))));
                    },
                    [](S x, S) {
                        double xd = static_cast<double>(x);
                        double u = k * (xd + 0.044715 * xd * xd * xd);
                        double th = std::tanh(u);
                        double du = k * (1.0 + 3.0 * 0.044715 * xd * xd);
                        return static_cast<S>(0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * du);
                    });
}

// ------------------------------- reductions --------------------------------

template <class S>
TensorBase<S> sum_all(const TensorBase<S>& a) {
    auto out = TensorBase<S>(detail::alloc_node<S>({}, "sum"));
    S acc = 0;
    for (S v : a.data()) acc += v;
    out.data()[0] = acc;
    auto an = a.n;
    detail::wire<S>(out, {a}, [an](typename TensorBase<S>::Node& self) {
        an->ensure_grad();
        S g = self.grad[0];
        for (auto& v : an->grad) v += g;
    });
    return out;
}

template <class S>
TensorBase<S> mean_all(const TensorBase<S>& a) {
    return scale(sum_all(a), S(1) / static_cast<S>(a.numel()));
}

// Mean over the last axis, keeping it as size 1.
template <class S>
TensorBase<S> mean_last(const TensorBase<S>& a) {
    if (a.ndim() < 1) throw std::invalid_argument("mean_last: rank 0");
    int64_t d = a.dim(-1);
    Shape os = a.shape();
    os.back() = 1;
    auto out = TensorBase<S>(detail::alloc_node<S>(os, "mean_last"));
    int64_t rows = a.numel() / d;
    const auto& ad = a.data();
    for (int64_t r = 0; r < rows; ++r) {
        S acc = 0;
        for (int64_t j = 0; j < d; ++j) acc += ad[static_cast<size_t>(r * d + j)];
        out.data()[static_cast<size_t>(r)] = acc / static_cast<S>(d);
    }
    auto an = a.n;
    detail::wire<S>(out, {a}, [an, d, rows](typename TensorBase<S>::Node& self) {
        an->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            S g = self.grad[static_cast<size_t>(r)] / static_cast<S>(d);
            for (int64_t j = 0; j < d; ++j) an->grad[static_cast<size_t>(r * d + j)] += g;
        }
    });
    return out;
}

// --------------------------- shape manipulation ----------------------------

template <class S>
TensorBase<S> reshape(const TensorBase<S>& a, Shape shape) {
    // one -1 wildcard allowed
    int64_t known = 1, wild = -1;
    for (size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) wild = static_cast<int64_t>(i);
        else known *= shape[i];
    }
    if (wild >= 0) shape[static_cast<size_t>(wild)] = a.numel() / known;
    if (numel_of(shape) != a.numel())
        throw std::invalid_argument("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
    auto out = TensorBase<S>(detail::alloc_node<S>(shape, "reshape"));
    out.data() = a.data();
    auto an = a.n;
    detail::wire<S>(out, {a}, [an](typename TensorBase<S>::Node& self) {
        detail::acc_grad<S>(an, self.grad);
    });
    return out;
}

template <class S>
TensorBase<S> permute(const TensorBase<S>& a, const std::vector<int>& dims) {
    size_t rank = a.shape().size();
    if (dims.size() != rank) throw std::invalid_argument("permute: rank mismatch");
    Shape os(rank);
    for (size_t i = 0; i < rank; ++i) os[i] = a.shape()[static_cast<size_t>(dims[i])];
    auto out = TensorBase<S>(detail::alloc_node<S>(os, "permute"));

    std::vector<int64_t> in_strides(rank, 1);
    for (size_t i = rank - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * a.shape()[i];
    std::vector<int64_t> src_stride(rank);
    for (size_t i = 0; i < rank; ++i) src_stride[i] = in_strides[static_cast<size_t>(dims[i])];

    const auto& ad = a.data();
    auto& od = out.data();
    std::vector<int64_t> idx(rank, 0);
    int64_t src = 0;
    int64_t total = a.numel();
    for (int64_t i = 0; i < total; ++i) {
        od[static_cast<size_t>(i)] = ad[static_cast<size_t>(src)];
        for (size_t d = rank; d-- > 0;) {
            ++idx[d];
            src += src_stride[d];
            if (idx[d] < os[d]) break;
            idx[d] = 0;
            src -= src_stride[d] * os[d];
        }
    }
    auto an = a.n;
    detail::wire<S>(out, {a}, [an, os, src_stride, rank](typename TensorBase<S>::Node& self) {
        an->ensure_grad();
        std::vector<int64_t> idx(rank, 0);
        int64_t src = 0;
        int64_t total = static_cast<int64_t>(self.grad.size());
        for (int64_t i = 0; i < total; ++i) {
            an->grad[static_cast<size_t>(src)] += self.grad[static_cast<size_t>(i)];
            for (size_t d = rank; d-- > 0;) {
                ++idx[d];
                src += src_stride[d];
                if (idx[d] < os[d]) break;
                idx[d] = 0;
                src -= src_stride[d] * os[d];
            }
        }
    });
    return out;
}

// Gather slices along `axis`. Backward scatter-adds.
template <class S>
TensorBase<S> index_select(const TensorBase<S>& a, int axis, const std::vector<int64_t>& indices) {
    size_t rank = a.shape().size();
    if (axis < 0) axis += static_cast<int>(rank);
    int64_t axis_size = a.shape()[static_cast<size_t>(axis)];
    for (int64_t ix : indices)
        if (ix < 0 || ix >= axis_size) throw std::out_of_range("index_select: index " + std::to_string(ix));
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.shape()[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < rank; ++i) inner *= a.shape()[i];
    Shape os = a.shape();
    os[static_cast<size_t>(axis)] = static_cast<int64_t>(indices.size());
    auto out = TensorBase<S>(detail::alloc_node<S>(os, "index_select"));
    const auto& ad = a.data();
    auto& od = out.data();
    int64_t k = static_cast<int64_t>(indices.size());
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < k; ++j)
            std::memcpy(&od[static_cast<size_t>((o * k + j) * inner)],
                        &ad[static_cast<size_t>((o * axis_size + indices[static_cast<size_t>(j)]) * inner)],
                        static_cast<size_t>(inner) * sizeof(S));
    auto an = a.n;
    detail::wire<S>(out, {a}, [an, indices, outer, inner, axis_size, k](typename TensorBase<S>::Node& self) {
        an->ensure_grad();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t j = 0; j < k; ++j) {
                const S* g = &self.grad[static_cast<size_t>((o * k + j) * inner)];
                S* dst = &an->grad[static_cast<size_t>((o * axis_size + indices[static_cast<size_t>(j)]) * inner)];
                for (int64_t i = 0; i < inner; ++i) dst[i] += g[i];
            }
    });
    return out;
}

// Inverse of index_select: out has axis_size along axis, row j of a lands at
// indices[j], all other rows are zero. Indices must be distinct.
template <class S>
TensorBase<S> index_scatter(const TensorBase<S>& a, int axis, const std::vector<int64_t>& indices,
                            int64_t axis_size) {
    size_t rank = a.shape().size();
    if (axis < 0) axis += static_cast<int>(rank);
    int64_t k = a.shape()[static_cast<size_t>(axis)];
    if (k != static_cast<int64_t>(indices.size()))
        throw std::invalid_argument("index_scatter: index count must match axis extent");
    std::vector<bool> seen(static_cast<size_t>(axis_size), false);
    for (int64_t ix : indices) {
        if (ix < 0 || ix >= axis_size) throw std::out_of_range("index_scatter: index " + std::to_string(ix));
        if (seen[static_cast<size_t>(ix)]) throw std::invalid_argument("index_scatter: duplicate index");
        seen[static_cast<size_t>(ix)] = true;
    }
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.shape()[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < rank; ++i) inner *= a.shape()[i];
    Shape os = a.shape();
    os[static_cast<size_t>(axis)] = axis_size;
    auto out = TensorBase<S>(detail::alloc_node<S>(os, "index_scatter"));
    const auto& ad = a.data();
    auto& od = out.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < k; ++j)
            std::memcpy(&od[static_cast<size_t>((o * axis_size + indices[static_cast<size_t>(j)]) * inner)],
                        &ad[static_cast<size_t>((o * k + j) * inner)], static_cast<size_t>(inner) * sizeof(S));
    auto an = a.n;
    detail::wire<S>(out, {a}, [an, indices, outer, inner, axis_size, k](typename TensorBase<S>::Node& self) {
        an->ensure_grad();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t j = 0; j < k; ++j) {
                const S* g = &self.grad[static_cast<size_t>((o * axis_size + indices[static_cast<size_t>(j)]) * inner)];
                S* dst = &an->grad[static_cast<size_t>((o * k + j) * inner)];
                for (int64_t i = 0; i < inner; ++i) dst[i] += g[i];
            }
    });
    return out;
}

// --------------------------------- matmul ----------------------------------

namespace detail {

template <class S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// out(m,n) (+)= a(m,k) * op(b), op(b) = b(k,n) or b(n,k)^T
template <class S>
inline void gemm(S* out, const S* a, const S* b, int64_t m, int64_t n, int64_t k, bool transpose_b, bool accumulate) {
    Eigen::Map<MatRM<S>> O(out, m, n);
    Eigen::Map<const MatRM<S>> A(a, m, k);
    if (transpose_b) {
        Eigen::Map<const MatRM<S>> B(b, n, k);
        if (accumulate) O.noalias() += A * B.transpose();
        else O.noalias() = A * B.transpose();
    } else {
        Eigen::Map<const MatRM<S>> B(b, k, n);
        if (accumulate) O.noalias() += A * B;
        else O.noalias() = A * B;
    }
}

// out(m,n) (+)= a(k,m)^T * b(k,n)
template <class S>
inline void gemm_ta(S* out, const S* a, const S* b, int64_t m, int64_t n, int64_t k, bool accumulate) {
    Eigen::Map<MatRM<S>> O(out, m, n);
    Eigen::Map<const MatRM<S>> A(a, k, m);
    Eigen::Map<const MatRM<S>> B(b, k, n);
    if (accumulate) O.noalias() += A.transpose() * B;
    else O.noalias() = A.transpose() * B;
}

}  // namespace detail

// a: [..., m, k]; b: [k, n] (shared across batch) or [..., k, n] with matching
// leading dims. transpose_b reads b's trailing dims as [n, k].
template <class S>
TensorBase<S> matmul(const TensorBase<S>& a, const TensorBase<S>& b, bool transpose_b = false) {
    if (a.ndim() < 2 || b.ndim() < 2) throw std::invalid_argument("matmul: rank must be >= 2");
    int64_t m = a.dim(-2), ka = a.dim(-1);
    int64_t kb = transpose_b ? b.dim(-1) : b.dim(-2);
    int64_t nd = transpose_b ? b.dim(-2) : b.dim(-1);
    if (ka != kb)
        throw std::invalid_argument("matmul: inner dims disagree " + shape_str(a.shape()) + (transpose_b ? " x T" : " x ") +
                                    shape_str(b.shape()));
    bool b_shared = b.ndim() == 2 && a.ndim() > 2;
    if (!b_shared && a.ndim() != b.ndim())
        throw std::invalid_argument("matmul: batch rank mismatch");
    Shape os(a.shape().begin(), a.shape().end() - 2);
    if (!b_shared)
        for (size_t i = 0; i + 2 < a.shape().size(); ++i)
            if (a.shape()[i] != b.shape()[i]) throw std::invalid_argument("matmul: batch dims disagree");
    int64_t batch = numel_of(os);
    os.push_back(m);
    os.push_back(nd);
    auto out = TensorBase<S>(detail::alloc_node<S>(os, "matmul"));
    const S* ap = a.data().data();
    const S* bp = b.data().data();
    S* op = out.data().data();
    int64_t astep = m * ka, bstep = b_shared ? 0 : ka * nd, ostep = m * nd;
    for (int64_t bi = 0; bi < batch; ++bi)
        detail::gemm<S>(op + bi * ostep, ap + bi * astep, bp + bi * bstep, m, nd, ka, transpose_b, false);

    auto an = a.n, bn = b.n;
    detail::wire<S>(out, {a, b},
        [an, bn, m, nd, ka, batch, astep, bstep, ostep, transpose_b, b_shared](typename TensorBase<S>::Node& self) {
            const S* gp = self.grad.data();
            const S* ap = an->data.data();
            const S* bp = bn->data.data();
            if (an->requires_grad) {
                an->ensure_grad();
                for (int64_t bi = 0; bi < batch; ++bi) {
                    // dA = dC * op(B)^T'  -> with tb: dC(m,n)*B(n,k); without: dC(m,n)*B(k,n)^T
                    detail::gemm<S>(an->grad.data() + bi * astep, gp + bi * ostep, bp + bi * bstep, m, ka, nd,
                                    !transpose_b, true);
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t bi = 0; bi < batch; ++bi) {
                    if (transpose_b) {
                        // B stored (n,k): dB = dC^T * A -> (n,m)x(m,k)
                        detail::gemm_ta<S>(bn->grad.data() + bi * bstep, gp + bi * ostep, ap + bi * astep, nd, ka, m,
                                           true);
                    } else {
                        // B stored (k,n): dB = A^T * dC
                        detail::gemm_ta<S>(bn->grad.data() + bi * bstep, ap + bi * astep, gp + bi * ostep, ka, nd, m,
                                           true);
                    }
                }
            }
        });
    return out;
}

// --------------------------------- softmax ---------------------------------

// Numerically stable softmax over the last axis.
template <class S>
TensorBase<S> softmax_last(const TensorBase<S>& a) {
    if (a.ndim() < 1) throw std::invalid_argument("softmax: rank 0");
    int64_t d = a.dim(-1);
    int64_t rows = a.numel() / d;
    auto out = TensorBase<S>(detail::alloc_node<S>(a.shape(), "softmax"));
    const auto& ad = a.data();
    auto& od = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const S* x = &ad[static_cast<size_t>(r * d)];
        S* y = &od[static_cast<size_t>(r * d)];
        S mx = x[0];
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, x[j]);
        S sum = 0;
        for (int64_t j = 0; j < d; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        for (int64_t j = 0; j < d; ++j) y[j] /= sum;
    }
    auto an = a.n;
    detail::wire<S>(out, {a}, [an, d, rows](typename TensorBase<S>::Node& self) {
        an->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const S* y = &self.data[static_cast<size_t>(r * d)];
            const S* g = &self.grad[static_cast<size_t>(r * d)];
            S dot = 0;
            for (int64_t j = 0; j < d; ++j) dot += y[j] * g[j];
            S* dst = &an->grad[static_cast<size_t>(r * d)];
            for (int64_t j = 0; j < d; ++j) dst[j] += (g[j] - dot) * y[j];
        }
    });
    return out;
}

// ----------------------------------- misc ----------------------------------

// dL/dtheta for each param; unreachable params get zeros. Output must be scalar.
template <class S>
std::vector<TensorBase<S>> grad(const TensorBase<S>& scalar_output, const std::vector<TensorBase<S>>& params) {
    for (const auto& p : params) p.n->grad.clear();
    scalar_output.backward();
    std::vector<TensorBase<S>> out;
    out.reserve(params.size());
    for (const auto& p : params) {
        if (p.grad().empty())
            out.push_back(TensorBase<S>::zeros(p.shape()));
        else
            out.push_back(TensorBase<S>::from_data(p.shape(), p.grad()));
    }
    return out;
}

using Tensor = TensorBase<float>;
using Tensor64 = TensorBase<double>;

}  // namespace stiv
