#ifndef MINIWEAVE_TENSOR_HPP
#define MINIWEAVE_TENSOR_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "miniweave/error.hpp"
#include "miniweave/rng.hpp"

namespace miniweave {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << s[i] << (i + 1 < s.size() ? "," : "");
    os << ")";
    return os.str();
}

// Optional post-op finiteness guard; off by default, enabled by trainers/tests.
inline std::atomic<bool>& finite_checks() {
    static std::atomic<bool> enabled{false};
    return enabled;
}

/*=============================================== TensorT ===============================================*/

// Dense row-major n-d tensor with define-by-run reverse-mode autodiff.
// Value-semantic handle; copies share storage. Data is never mutated in place
// once an op has consumed it, so saved inputs stay valid for backward.
template <typename S>
struct TensorT {
    struct Storage;

    struct Node {
        std::vector<std::shared_ptr<Storage>> inputs;
        // reads out.grad, accumulates into inputs' grads
        std::function<void(Storage& out, const std::vector<std::shared_ptr<Storage>>& ins)> backprop;
    };

    struct Storage {
        Shape shape;
        std::vector<S> data;
        std::vector<S> grad;  // empty until backward touches it
        bool requires_grad = false;
        std::shared_ptr<Node> node;  // producing op; null for leaves and constants
    };

    std::shared_ptr<Storage> st;

    TensorT() = default;
    explicit TensorT(std::shared_ptr<Storage> s) : st(std::move(s)) {}

    static TensorT zeros(Shape shape) {
        auto s = std::make_shared<Storage>();
        s->data.assign(static_cast<size_t>(shape_numel(shape)), S(0));
        s->shape = std::move(shape);
        return TensorT(std::move(s));
    }

    static TensorT full(Shape shape, S v) {
        TensorT t = zeros(std::move(shape));
        std::fill(t.st->data.begin(), t.st->data.end(), v);
        return t;
    }

    static TensorT scalar(S v) { return full({1}, v); }

    static TensorT from_data(Shape shape, std::vector<S> d) {
        if (static_cast<int64_t>(d.size()) != shape_numel(shape))
            throw DimensionError("from_data: " + std::to_string(d.size()) + " values for shape " + shape_str(shape));
        auto s = std::make_shared<Storage>();
        s->shape = std::move(shape);
        s->data = std::move(d);
        return TensorT(std::move(s));
    }

    static TensorT randn(Shape shape, Rng& rng, S stddev = S(1)) {
        TensorT t = zeros(std::move(shape));
        for (auto& v : t.st->data) v = static_cast<S>(rng.gaussian()) * stddev;
        return t;
    }

    bool valid() const { return static_cast<bool>(st); }
    const Shape& shape() const { return st->shape; }
    int dim() const { return static_cast<int>(st->shape.size()); }
    int64_t size(int i) const { return st->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(st->data.size()); }
    S* data() { return st->data.data(); }
    const S* data() const { return st->data.data(); }
    const std::vector<S>& vec() const { return st->data; }

    S item() const {
        if (numel() != 1) throw ContractError("item: tensor has " + std::to_string(numel()) + " elements");
        return st->data[0];
    }

    S at(std::initializer_list<int64_t> idx) const {
        int64_t off = 0;
        size_t d = 0;
        for (int64_t i : idx) {
            off = off * st->shape[d] + i;
            ++d;
        }
        return st->data[static_cast<size_t>(off)];
    }

    bool requires_grad() const { return st->requires_grad; }
    TensorT& set_requires_grad(bool v) {
        st->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return !st->grad.empty(); }
    const std::vector<S>& grad() const {
        if (st->grad.empty()) throw ContractError("grad: no gradient accumulated");
        return st->grad;
    }
    void zero_grad() { st->grad.clear(); }

    // data copy detached from the graph
    TensorT detach() const {
        auto s = std::make_shared<Storage>();
        s->shape = st->shape;
        s->data = st->data;
        return TensorT(std::move(s));
    }

    bool all_finite() const {
        for (S v : st->data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

using Tensor = TensorT<float>;

/*=============================================== op plumbing ===============================================*/

namespace detail {

template <typename S>
void ensure_grad(typename TensorT<S>::Storage& s) {
    if (s.grad.empty()) s.grad.assign(s.data.size(), S(0));
}

template <typename S>
TensorT<S> make_op(Shape shape, std::vector<S> data, std::vector<TensorT<S>> inputs,
                   std::function<void(typename TensorT<S>::Storage&,
                                      const std::vector<std::shared_ptr<typename TensorT<S>::Storage>>&)>
                       backprop) {
    auto s = std::make_shared<typename TensorT<S>::Storage>();
    s->shape = std::move(shape);
    s->data = std::move(data);
    if (finite_checks().load(std::memory_order_relaxed)) {
        for (S v : s->data)
            if (!std::isfinite(static_cast<double>(v))) throw NumericError("op produced a non-finite value");
    }
    bool rg = false;
    for (const auto& in : inputs) rg = rg || in.st->requires_grad;
    if (rg) {
        s->requires_grad = true;
        auto node = std::make_shared<typename TensorT<S>::Node>();
        node->inputs.reserve(inputs.size());
        for (auto& in : inputs) node->inputs.push_back(in.st);
        node->backprop = std::move(backprop);
        s->node = std::move(node);
    }
    return TensorT<S>(std::move(s));
}

template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using EMap = Eigen::Map<EMat<S>>;
template <typename S>
using ECMap = Eigen::Map<const EMat<S>>;

inline void check_axis(int axis, int dims, const char* op) {
    if (axis < 0 || axis >= dims) throw DimensionError(std::string(op) + ": axis out of range");
}

}  // namespace detail

/*=============================================== backward ===============================================*/

// Fills grad for every requires_grad leaf reachable from `loss`. Each node is
// visited exactly once; accumulation is additive, so grads from earlier
// backward calls are kept unless zero_grad() intervened. The graph's closures
// are dropped afterwards unless retain_graph is set.
template <typename S>
void backward(const TensorT<S>& loss, bool retain_graph = false) {
    if (!loss.valid()) throw ContractError("backward: null tensor");
    if (loss.numel() != 1) throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));

    using Storage = typename TensorT<S>::Storage;
    std::vector<Storage*> topo;
    std::unordered_set<Storage*> seen;
    // iterative post-order DFS over producing nodes
    std::vector<std::pair<Storage*, size_t>> stack;
    if (loss.st->node) {
        stack.emplace_back(loss.st.get(), 0);
        seen.insert(loss.st.get());
    }
    while (!stack.empty()) {
        Storage* s = stack.back().first;
        size_t idx = stack.back().second;
        if (idx < s->node->inputs.size()) {
            ++stack.back().second;
            Storage* in = s->node->inputs[idx].get();
            if (in->node && !seen.count(in)) {
                seen.insert(in);
                stack.emplace_back(in, 0);
            }
        } else {
            topo.push_back(s);
            stack.pop_back();
        }
    }

    // Intermediate (op-output) grads are scratch for this pass; only leaves
    // accumulate across backward calls.
    for (Storage* s : topo) s->grad.assign(s->data.size(), S(0));
    detail::ensure_grad<S>(*loss.st);
    loss.st->grad[0] += S(1);

    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Storage* s = *it;
        s->node->backprop(*s, s->node->inputs);
    }
    if (!retain_graph)
        for (Storage* s : topo) s->node.reset();
}

/*=============================================== elementwise ===============================================*/

template <typename S>
void check_same_shape(const char* op, const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    check_same_shape("add", a, b);
    std::vector<S> y(a.st->data);
    const S* pb = b.data();
    for (size_t i = 0; i < y.size(); ++i) y[i] += pb[i];
    return detail::make_op<S>(a.shape(), std::move(y), {a, b}, [](auto& out, const auto& ins) {
        for (int k = 0; k < 2; ++k)
            if (ins[k]->requires_grad) {
                detail::ensure_grad<S>(*ins[k]);
                for (size_t i = 0; i < out.grad.size(); ++i) ins[k]->grad[i] += out.grad[i];
            }
    });
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    check_same_shape("sub", a, b);
    std::vector<S> y(a.st->data);
    const S* pb = b.data();
    for (size_t i = 0; i < y.size(); ++i) y[i] -= pb[i];
    return detail::make_op<S>(a.shape(), std::move(y), {a, b}, [](auto& out, const auto& ins) {
        if (ins[0]->requires_grad) {
            detail::ensure_grad<S>(*ins[0]);
            for (size_t i = 0; i < out.grad.size(); ++i) ins[0]->grad[i] += out.grad[i];
        }
        if (ins[1]->requires_grad) {
            detail::ensure_grad<S>(*ins[1]);
            for (size_t i = 0; i < out.grad.size(); ++i) ins[1]->grad[i] -= out.grad[i];
        }
    });
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    check_same_shape("mul", a, b);
    std::vector<S> y(a.st->data);
    const S* pb = b.data();
    for (size_t i = 0; i < y.size(); ++i) y[i] *= pb[i];
    return detail::make_op<S>(a.shape(), std::move(y), {a, b}, [](auto& out, const auto& ins) {
        if (ins[0]->requires_grad) {
            detail::ensure_grad<S>(*ins[0]);
            for (size_t i = 0; i < out.grad.size(); ++i) ins[0]->grad[i] += out.grad[i] * ins[1]->data[i];
        }
        if (ins[1]->requires_grad) {
            detail::ensure_grad<S>(*ins[1]);
            for (size_t i = 0; i < out.grad.size(); ++i) ins[1]->grad[i] += out.grad[i] * ins[0]->data[i];
        }
    });
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, S c) {
    std::vector<S> y(a.st->data);
    for (auto& v : y) v *= c;
    return detail::make_op<S>(a.shape(), std::move(y), {a}, [c](auto& out, const auto& ins) {
        if (!ins[0]->requires_grad) return;
        detail::ensure_grad<S>(*ins[0]);
        for (size_t i = 0; i < out.grad.size(); ++i) ins[0]->grad[i] += out.grad[i] * c;
    });
}

template <typename S>
TensorT<S> add_scalar(const TensorT<S>& a, S c) {
    std::vector<S> y(a.st->data);
    for (auto& v : y) v += c;
    return detail::make_op<S>(a.shape(), std::move(y), {a}, [](auto& out, const auto& ins) {
        if (!ins[0]->requires_grad) return;
        detail::ensure_grad<S>(*ins[0]);
        for (size_t i = 0; i < out.grad.size(); ++i) ins[0]->grad[i] += out.grad[i];
    });
}

template <typename S>
TensorT<S> abs_t(const TensorT<S>& a) {
    std::vector<S> y(a.st->data);
    for (auto& v : y) v = std::abs(v);
    return detail::make_op<S>(a.shape(), std::move(y), {a}, [](auto& out, const auto& ins) {
        if (!ins[0]->requires_grad) return;
        detail::ensure_grad<S>(*ins[0]);
        for (size_t i = 0; i < out.grad.size(); ++i) {
            S x = ins[0]->data[i];
            S sgn = x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0));
            ins[0]->grad[i] += out.grad[i] * sgn;
        }
    });
}

template <typename S>
TensorT<S> silu(const TensorT<S>& a) {
    std::vector<S> y(a.numel());
    const S* px = a.data();
    for (size_t i = 0; i < y.size(); ++i) {
        S s = S(1) / (S(1) + std::exp(-px[i]));
        y[i] = px[i] * s;
    }
    return detail::make_op<S>(a.shape(), std::move(y), {a}, [](auto& out, const auto& ins) {
        if (!ins[0]->requires_grad) return;
        detail::ensure_grad<S>(*ins[0]);
        for (size_t i = 0; i < out.grad.size(); ++i) {
            S x = ins[0]->data[i];
            S s = S(1) / (S(1) + std::exp(-x));
            ins[0]->grad[i] += out.grad[i] * s * (S(1) + x * (S(1) - s));
        }
    });
}

// broadcast v over the last dimension of x
template <typename S>
TensorT<S> add_rowvec(const TensorT<S>& x, const TensorT<S>& v) {
    if (v.dim() != 1 || x.size(x.dim() - 1) != v.size(0))
        throw DimensionError("add_rowvec: last dim " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
    int64_t d = v.size(0);
    int64_t rows = x.numel() / d;
    std::vector<S> y(x.st->data);
    const S* pv = v.data();
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j) y[static_cast<size_t>(r * d + j)] += pv[j];
    return detail::make_op<S>(x.shape(), std::move(y), {x, v}, [d, rows](auto& out, const auto& ins) {
        if (ins[0]->requires_grad) {
            detail::ensure_grad<S>(*ins[0]);
            for (size_t i = 0; i < out.grad.size(); ++i) ins[0]->grad[i] += out.grad[i];
        }
        if (ins[1]->requires_grad) {
            detail::ensure_grad<S>(*ins[1]);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < d; ++j) ins[1]->grad[static_cast<size_t>(j)] += out.grad[static_cast<size_t>(r * d + j)];
        }
    });
}

// x (N,C,...) + v (C) broadcast over batch and spatial dims
template <typename S>
TensorT<S> add_channel_bias(const TensorT<S>& x, const TensorT<S>& v) {
    if (x.dim() < 2 || v.dim() != 1 || x.size(1) != v.size(0))
        throw DimensionError("add_channel_bias: " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
    int64_t N = x.size(0), C = x.size(1);
    int64_t inner = x.numel() / (N * C);
    std::vector<S> y(x.st->data);
    const S* pv = v.data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            S b = pv[c];
            S* row = y.data() + (n * C + c) * inner;
            for (int64_t i = 0; i < inner; ++i) row[i] += b;
        }
    return detail::make_op<S>(x.shape(), std::move(y), {x, v}, [N, C, inner](auto& out, const auto& ins) {
        if (ins[0]->requires_grad) {
            detail::ensure_grad<S>(*ins[0]);
            for (size_t i = 0; i < out.grad.size(); ++i) ins[0]->grad[i] += out.grad[i];
        }
        if (ins[1]->requires_grad) {
            detail::ensure_grad<S>(*ins[1]);
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c) {
                    S acc = S(0);
                    const S* row = out.grad.data() + (n * C + c) * inner;
                    for (int64_t i = 0; i < inner; ++i) acc += row[i];
                    ins[1]->grad[static_cast<size_t>(c)] += acc;
                }
        }
    });
}

template <typename S>
TensorT<S> operator+(const TensorT<S>& a, const TensorT<S>& b) { return add(a, b); }
template <typename S>
TensorT<S> operator-(const TensorT<S>& a, const TensorT<S>& b) { return sub(a, b); }
template <typename S>
TensorT<S> operator*(const TensorT<S>& a, const TensorT<S>& b) { return mul(a, b); }

/*=============================================== reductions ===============================================*/

template <typename S>
TensorT<S> sum_all(const TensorT<S>& a) {
    S acc = S(0);
    for (S v : a.st->data) acc += v;
    return detail::make_op<S>({1}, {acc}, {a}, [](auto& out, const auto& ins) {
        if (!ins[0]->requires_grad) return;
        detail::ensure_grad<S>(*ins[0]);
        S g = out.grad[0];
        for (auto& v : ins[0]->grad) v += g;
    });
}

template <typename S>
TensorT<S> mean_all(const TensorT<S>& a) {
    S n = static_cast<S>(a.numel());
    S acc = S(0);
    for (S v : a.st->data) acc += v;
    acc /= n;
    return detail::make_op<S>({1}, {acc}, {a}, [n](auto& out, const auto& ins) {
        if (!ins[0]->requires_grad) return;
        detail::ensure_grad<S>(*ins[0]);
        S g = out.grad[0] / n;
        for (auto& v : ins[0]->grad) v += g;
    });
}

// sum over one axis (axis removed from the shape)
template <typename S>
TensorT<S> sum_axis(const TensorT<S>& a, int axis) {
    detail::check_axis(axis, a.dim(), "sum_axis");
    const Shape& sh = a.shape();
    int64_t n_axis = sh[static_cast<size_t>(axis)];
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= sh[static_cast<size_t>(i)];
    for (int i = axis + 1; i < a.dim(); ++i) inner *= sh[static_cast<size_t>(i)];
    Shape osh;
    for (int i = 0; i < a.dim(); ++i)
        if (i != axis) osh.push_back(sh[static_cast<size_t>(i)]);
    if (osh.empty()) osh.push_back(1);

    std::vector<S> y(static_cast<size_t>(outer * inner), S(0));
    const S* px = a.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t k = 0; k < n_axis; ++k)
            for (int64_t i = 0; i < inner; ++i) y[static_cast<size_t>(o * inner + i)] += px[(o * n_axis + k) * inner + i];
    return detail::make_op<S>(std::move(osh), std::move(y), {a}, [outer, n_axis, inner](auto& out, const auto& ins) {
        if (!ins[0]->requires_grad) return;
        detail::ensure_grad<S>(*ins[0]);
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t k = 0; k < n_axis; ++k)
                for (int64_t i = 0; i < inner; ++i)
                    ins[0]->grad[static_cast<size_t>((o * n_axis + k) * inner + i)] += out.grad[static_cast<size_t>(o * inner + i)];
    });
}

template <typename S>
TensorT<S> mean_axis(const TensorT<S>& a, int axis) {
    return scale(sum_axis(a, axis), S(1) / static_cast<S>(a.size(axis)));
}

// mean squared error between same-shape tensors; scalar output
template <typename S>
TensorT<S> mse(const TensorT<S>& a, const TensorT<S>& b) {
    check_same_shape("mse", a, b);
    S n = static_cast<S>(a.numel());
    S acc = S(0);
    const S* pa = a.data();
    const S* pb = b.data();
    for (int64_t i = 0; i < a.numel(); ++i) {
        S d = pa[i] - pb[i];
        acc += d * d;
    }
    acc /= n;
    return detail::make_op<S>({1}, {acc}, {a, b}, [n](auto& out, const auto& ins) {
        S g = out.grad[0] * S(2) / n;
        for (int k = 0; k < 2; ++k) {
            if (!ins[k]->requires_grad) continue;
            detail::ensure_grad<S>(*ins[k]);
            S sgn = k == 0 ? S(1) : S(-1);
            for (size_t i = 0; i < ins[k]->grad.size(); ++i)
                ins[k]->grad[i] += sgn * g * (ins[0]->data[i] - ins[1]->data[i]);
        }
    });
}

/*=============================================== shape ops ===============================================*/

template <typename S>
TensorT<S> reshape(const TensorT<S>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    std::vector<S> y(a.st->data);
    return detail::make_op<S>(std::move(shape), std::move(y), {a}, [](auto& out, const auto& ins) {
        if (!ins[0]->requires_grad) return;
        detail::ensure_grad<S>(*ins[0]);
        for (size_t i = 0; i < out.grad.size(); ++i) ins[0]->grad[i] += out.grad[i];
    });
}

namespace detail {
inline std::vector<int64_t> strides_of(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[static_cast<size_t>(i)] = acc;
        acc *= s[static_cast<size_t>(i)];
    }
    return st;
}
}  // namespace detail

template <typename S>
TensorT<S> permute(const TensorT<S>& a, const std::vector<int>& perm) {
    if (static_cast<int>(perm.size()) != a.dim()) throw DimensionError("permute: rank mismatch");
    const Shape& sh = a.shape();
    Shape osh(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) osh[i] = sh[static_cast<size_t>(perm[i])];
    auto istr = detail::strides_of(sh);
    auto ostr = detail::strides_of(osh);
    int64_t n = a.numel();
    int nd = a.dim();
    std::vector<S> y(static_cast<size_t>(n));
    const S* px = a.data();
    std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
    for (int64_t o = 0; o < n; ++o) {
        int64_t rem = o, src = 0;
        for (int d = 0; d < nd; ++d) {
            int64_t c = rem / ostr[static_cast<size_t>(d)];
            rem -= c * ostr[static_cast<size_t>(d)];
            src += c * istr[static_cast<size_t>(perm[static_cast<size_t>(d)])];
        }
        y[static_cast<size_t>(o)] = px[src];
    }
    return detail::make_op<S>(std::move(osh), std::move(y), {a},
                              [perm, istr, ostr, nd, n](auto& out, const auto& ins) {
                                  if (!ins[0]->requires_grad) return;
                                  detail::ensure_grad<S>(*ins[0]);
                                  for (int64_t o = 0; o < n; ++o) {
                                      int64_t rem = o, src = 0;
                                      for (int d = 0; d < nd; ++d) {
                                          int64_t c = rem / ostr[static_cast<size_t>(d)];
                                          rem -= c * ostr[static_cast<size_t>(d)];
                                          src += c * istr[static_cast<size_t>(perm[static_cast<size_t>(d)])];
                                      }
                                      ins[0]->grad[static_cast<size_t>(src)] += out.grad[static_cast<size_t>(o)];
                                  }
                              });
}

template <typename S>
TensorT<S> slice(const TensorT<S>& a, int axis, int64_t start, int64_t len) {
    detail::check_axis(axis, a.dim(), "slice");
    const Shape& sh = a.shape();
    if (start < 0 || len <= 0 || start + len > sh[static_cast<size_t>(axis)])
        throw DimensionError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                             ") out of extent " + std::to_string(sh[static_cast<size_t>(axis)]));
    int64_t outer = 1, inner = 1, n_axis = sh[static_cast<size_t>(axis)];
    for (int i = 0; i < axis; ++i) outer *= sh[static_cast<size_t>(i)];
    for (int i = axis + 1; i < a.dim(); ++i) inner *= sh[static_cast<size_t>(i)];
    Shape osh = sh;
    osh[static_cast<size_t>(axis)] = len;
    std::vector<S> y(static_cast<size_t>(outer * len * inner));
    const S* px = a.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t k = 0; k < len; ++k)
            std::copy(px + (o * n_axis + start + k) * inner, px + (o * n_axis + start + k + 1) * inner,
                      y.begin() + (o * len + k) * inner);
    return detail::make_op<S>(std::move(osh), std::move(y), {a},
                              [outer, inner, n_axis, start, len](auto& out, const auto& ins) {
                                  if (!ins[0]->requires_grad) return;
                                  detail::ensure_grad<S>(*ins[0]);
                                  for (int64_t o = 0; o < outer; ++o)
                                      for (int64_t k = 0; k < len; ++k)
                                          for (int64_t i = 0; i < inner; ++i)
                                              ins[0]->grad[static_cast<size_t>((o * n_axis + start + k) * inner + i)] +=
                                                  out.grad[static_cast<size_t>((o * len + k) * inner + i)];
                              });
}

template <typename S>
TensorT<S> concat(const std::vector<TensorT<S>>& parts, int axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    detail::check_axis(axis, parts[0].dim(), "concat");
    const Shape& sh0 = parts[0].shape();
    int64_t total_axis = 0;
    for (const auto& p : parts) {
        if (p.dim() != parts[0].dim()) throw DimensionError("concat: rank mismatch");
        for (int i = 0; i < p.dim(); ++i)
            if (i != axis && p.size(i) != sh0[static_cast<size_t>(i)])
                throw DimensionError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(sh0));
        total_axis += p.size(axis);
    }
    Shape osh = sh0;
    osh[static_cast<size_t>(axis)] = total_axis;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= sh0[static_cast<size_t>(i)];
    for (int i = axis + 1; i < parts[0].dim(); ++i) inner *= sh0[static_cast<size_t>(i)];

    std::vector<S> y(static_cast<size_t>(outer * total_axis * inner));
    std::vector<int64_t> lens;
    int64_t off = 0;
    for (const auto& p : parts) {
        int64_t la = p.size(axis);
        lens.push_back(la);
        const S* px = p.data();
        for (int64_t o = 0; o < outer; ++o)
            std::copy(px + o * la * inner, px + (o + 1) * la * inner,
                      y.begin() + (o * total_axis + off) * inner);
        off += la;
    }
    return detail::make_op<S>(std::move(osh), std::move(y), parts,
                              [outer, inner, total_axis, lens](auto& out, const auto& ins) {
                                  int64_t off = 0;
                                  for (size_t k = 0; k < ins.size(); ++k) {
                                      int64_t la = lens[k];
                                      if (ins[k]->requires_grad) {
                                          detail::ensure_grad<S>(*ins[k]);
                                          for (int64_t o = 0; o < outer; ++o)
                                              for (int64_t j = 0; j < la * inner; ++j)
                                                  ins[k]->grad[static_cast<size_t>(o * la * inner + j)] +=
                                                      out.grad[static_cast<size_t>((o * total_axis + off) * inner + j)];
                                      }
                                      off += la;
                                  }
                              });
}

/*=============================================== matmul ===============================================*/

// Batched matmul: a (..., m, k) x b (..., k, n). Leading dims must match
// exactly, or be absent on one side (that operand is shared across the batch).
// No other broadcasting.
template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.dim() < 2 || b.dim() < 2) throw DimensionError("matmul: operands must have rank >= 2");
    int64_t m = a.size(a.dim() - 2), ka = a.size(a.dim() - 1);
    int64_t kb = b.size(b.dim() - 2), n = b.size(b.dim() - 1);
    if (ka != kb)
        throw DimensionError("matmul: inner extents disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Shape abatch(a.shape().begin(), a.shape().end() - 2);
    Shape bbatch(b.shape().begin(), b.shape().end() - 2);
    Shape obatch;
    if (abatch == bbatch)
        obatch = abatch;
    else if (bbatch.empty())
        obatch = abatch;
    else if (abatch.empty())
        obatch = bbatch;
    else
        throw DimensionError("matmul: batch dims not broadcastable " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int64_t batch = shape_numel(obatch);
    bool a_shared = abatch.empty() && !obatch.empty();
    bool b_shared = bbatch.empty() && !obatch.empty();

    Shape osh = obatch;
    osh.push_back(m);
    osh.push_back(n);
    std::vector<S> y(static_cast<size_t>(batch * m * n));
    const S* pa = a.data();
    const S* pb = b.data();
    for (int64_t t = 0; t < batch; ++t) {
        detail::ECMap<S> A(pa + (a_shared ? 0 : t * m * ka), m, ka);
        detail::ECMap<S> B(pb + (b_shared ? 0 : t * ka * n), ka, n);
        detail::EMap<S> C(y.data() + t * m * n, m, n);
        C.noalias() = A * B;
    }
    return detail::make_op<S>(std::move(osh), std::move(y), {a, b},
                              [m, n, ka, batch, a_shared, b_shared](auto& out, const auto& ins) {
                                  const S* pa = ins[0]->data.data();
                                  const S* pb = ins[1]->data.data();
                                  if (ins[0]->requires_grad) detail::ensure_grad<S>(*ins[0]);
                                  if (ins[1]->requires_grad) detail::ensure_grad<S>(*ins[1]);
                                  for (int64_t t = 0; t < batch; ++t) {
                                      detail::ECMap<S> G(out.grad.data() + t * m * n, m, n);
                                      if (ins[0]->requires_grad) {
                                          detail::ECMap<S> B(pb + (b_shared ? 0 : t * ka * n), ka, n);
                                          detail::EMap<S> dA(ins[0]->grad.data() + (a_shared ? 0 : t * m * ka), m, ka);
                                          dA.noalias() += G * B.transpose();
                                      }
                                      if (ins[1]->requires_grad) {
                                          detail::ECMap<S> A(pa + (a_shared ? 0 : t * m * ka), m, ka);
                                          detail::EMap<S> dB(ins[1]->grad.data() + (b_shared ? 0 : t * ka * n), ka, n);
                                          dB.noalias() += A.transpose() * G;
                                      }
                                  }
                              });
}

// a (..., m, k) x b (..., n, k) transposed on the right -> (..., m, n).
// Same batch rules as matmul.
template <typename S>
TensorT<S> matmul_nt(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.dim() < 2 || b.dim() < 2) throw DimensionError("matmul_nt: operands must have rank >= 2");
    int64_t m = a.size(a.dim() - 2), ka = a.size(a.dim() - 1);
    int64_t n = b.size(b.dim() - 2), kb = b.size(b.dim() - 1);
    if (ka != kb)
        throw DimensionError("matmul_nt: inner extents disagree " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    Shape abatch(a.shape().begin(), a.shape().end() - 2);
    Shape bbatch(b.shape().begin(), b.shape().end() - 2);
    Shape obatch;
    if (abatch == bbatch)
        obatch = abatch;
    else if (bbatch.empty())
        obatch = abatch;
    else if (abatch.empty())
        obatch = bbatch;
    else
        throw DimensionError("matmul_nt: batch dims not broadcastable");
    int64_t batch = shape_numel(obatch);
    bool a_shared = abatch.empty() && !obatch.empty();
    bool b_shared = bbatch.empty() && !obatch.empty();

    Shape osh = obatch;
    osh.push_back(m);
    osh.push_back(n);
    std::vector<S> y(static_cast<size_t>(batch * m * n));
    const S* pa = a.data();
    const S* pb = b.data();
    for (int64_t t = 0; t < batch; ++t) {
        detail::ECMap<S> A(pa + (a_shared ? 0 : t * m * ka), m, ka);
        detail::ECMap<S> B(pb + (b_shared ? 0 : t * n * ka), n, ka);
        detail::EMap<S> C(y.data() + t * m * n, m, n);
        C.noalias() = A * B.transpose();
    }
    return detail::make_op<S>(std::move(osh), std::move(y), {a, b},
                              [m, n, ka, batch, a_shared, b_shared](auto& out, const auto& ins) {
                                  const S* pa = ins[0]->data.data();
                                  const S* pb = ins[1]->data.data();
                                  if (ins[0]->requires_grad) detail::ensure_grad<S>(*ins[0]);
                                  if (ins[1]->requires_grad) detail::ensure_grad<S>(*ins[1]);
                                  for (int64_t t = 0; t < batch; ++t) {
                                      detail::ECMap<S> G(out.grad.data() + t * m * n, m, n);
                                      if (ins[0]->requires_grad) {
                                          detail::ECMap<S> B(pb + (b_shared ? 0 : t * n * ka), n, ka);
                                          detail::EMap<S> dA(ins[0]->grad.data() + (a_shared ? 0 : t * m * ka), m, ka);
                                          dA.noalias() += G * B;
                                      }
                                      if (ins[1]->requires_grad) {
                                          detail::ECMap<S> A(pa + (a_shared ? 0 : t * m * ka), m, ka);
                                          detail::EMap<S> dB(ins[1]->grad.data() + (b_shared ? 0 : t * n * ka), n, ka);
                                          dB.noalias() += G.transpose() * A;
                                      }
                                  }
                              });
}

/*=============================================== softmax ===============================================*/

// max-subtracted softmax along `axis`; rows sum to 1
template <typename S>
TensorT<S> softmax(const TensorT<S>& x, int axis) {
    detail::check_axis(axis, x.dim(), "softmax");
    const Shape& sh = x.shape();
    int64_t n_axis = sh[static_cast<size_t>(axis)];
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= sh[static_cast<size_t>(i)];
    for (int i = axis + 1; i < x.dim(); ++i) inner *= sh[static_cast<size_t>(i)];
    std::vector<S> y(static_cast<size_t>(x.numel()));
    const S* px = x.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            const S* row = px + o * n_axis * inner + i;
            S* orow = y.data() + o * n_axis * inner + i;
            S mx = row[0];
            for (int64_t k = 1; k < n_axis; ++k) mx = std::max(mx, row[k * inner]);
            S z = S(0);
            for (int64_t k = 0; k < n_axis; ++k) {
                S e = std::exp(row[k * inner] - mx);
                orow[k * inner] = e;
                z += e;
            }
            S iz = S(1) / z;
            for (int64_t k = 0; k < n_axis; ++k) orow[k * inner] *= iz;
        }
    Shape osh = sh;
    return detail::make_op<S>(std::move(osh), std::move(y), {x},
                              [outer, inner, n_axis](auto& out, const auto& ins) {
                                  if (!ins[0]->requires_grad) return;
                                  detail::ensure_grad<S>(*ins[0]);
                                  // dx = (dy - sum(dy*y)) * y per row
                                  for (int64_t o = 0; o < outer; ++o)
                                      for (int64_t i = 0; i < inner; ++i) {
                                          const S* yr = out.data.data() + o * n_axis * inner + i;
                                          const S* gr = out.grad.data() + o * n_axis * inner + i;
                                          S dot = S(0);
                                          for (int64_t k = 0; k < n_axis; ++k) dot += gr[k * inner] * yr[k * inner];
                                          S* dx = ins[0]->grad.data() + o * n_axis * inner + i;
                                          for (int64_t k = 0; k < n_axis; ++k)
                                              dx[k * inner] += (gr[k * inner] - dot) * yr[k * inner];
                                      }
                              });
}

/*=============================================== conv ===============================================*/

namespace detail {

// X_colT layout: (C*kh*kw) x (H_out*W_out) for one sample
template <typename S>
void im2col_t(const S* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride, int64_t pad,
              int64_t Ho, int64_t Wo, S* col) {
    for (int64_t c = 0; c < C; ++c)
        for (int64_t ky = 0; ky < kh; ++ky)
            for (int64_t kx = 0; kx < kw; ++kx) {
                S* dst = col + ((c * kh + ky) * kw + kx) * Ho * Wo;
                for (int64_t oy = 0; oy < Ho; ++oy) {
                    int64_t iy = oy * stride + ky - pad;
                    for (int64_t ox = 0; ox < Wo; ++ox) {
                        int64_t ix = ox * stride + kx - pad;
                        dst[oy * Wo + ox] = (iy >= 0 && iy < H && ix >= 0 && ix < W) ? x[(c * H + iy) * W + ix] : S(0);
                    }
                }
            }
}

template <typename S>
void col2im_t_acc(const S* col, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride, int64_t pad,
                  int64_t Ho, int64_t Wo, S* gx) {
    for (int64_t c = 0; c < C; ++c)
        for (int64_t ky = 0; ky < kh; ++ky)
            for (int64_t kx = 0; kx < kw; ++kx) {
                const S* src = col + ((c * kh + ky) * kw + kx) * Ho * Wo;
                for (int64_t oy = 0; oy < Ho; ++oy) {
                    int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) continue;
                    for (int64_t ox = 0; ox < Wo; ++ox) {
                        int64_t ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= W) continue;
                        gx[(c * H + iy) * W + ix] += src[oy * Wo + ox];
                    }
                }
            }
}

}  // namespace detail

// x (N,C,H,W), w (O,C,kh,kw), optional bias (O); zero padding
template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& bias, int64_t stride = 1,
                  int64_t pad = 0) {
    if (x.dim() != 4 || w.dim() != 4) throw DimensionError("conv2d: expected 4-d input and weight");
    int64_t N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    int64_t O = w.size(0), kh = w.size(2), kw = w.size(3);
    if (w.size(1) != C)
        throw DimensionError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    if (bias.valid() && (bias.dim() != 1 || bias.size(0) != O)) throw DimensionError("conv2d: bad bias shape");
    int64_t Ho = (H + 2 * pad - kh) / stride + 1;
    int64_t Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw DimensionError("conv2d: kernel larger than padded input");

    int64_t ckk = C * kh * kw;
    std::vector<S> col(static_cast<size_t>(ckk * Ho * Wo));
    std::vector<S> y(static_cast<size_t>(N * O * Ho * Wo));
    const S* px = x.data();
    for (int64_t nidx = 0; nidx < N; ++nidx) {
        detail::im2col_t<S>(px + nidx * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
        detail::ECMap<S> Wm(w.data(), O, ckk);
        detail::ECMap<S> Xc(col.data(), ckk, Ho * Wo);
        detail::EMap<S> Y(y.data() + nidx * O * Ho * Wo, O, Ho * Wo);
        Y.noalias() = Wm * Xc;
        if (bias.valid()) {
            const S* pb = bias.data();
            for (int64_t o = 0; o < O; ++o) Y.row(o).array() += pb[o];
        }
    }
    std::vector<TensorT<S>> ins = {x, w};
    bool has_bias = bias.valid();
    if (has_bias) ins.push_back(bias);
    return detail::make_op<S>({N, O, Ho, Wo}, std::move(y), std::move(ins),
                              [N, C, H, W, O, kh, kw, stride, pad, Ho, Wo, ckk, has_bias](auto& out, const auto& ins) {
                                  bool need_x = ins[0]->requires_grad;
                                  bool need_w = ins[1]->requires_grad;
                                  bool need_b = has_bias && ins[2]->requires_grad;
                                  if (need_x) detail::ensure_grad<S>(*ins[0]);
                                  if (need_w) detail::ensure_grad<S>(*ins[1]);
                                  if (need_b) detail::ensure_grad<S>(*ins[2]);
                                  std::vector<S> col(static_cast<size_t>(ckk * Ho * Wo));
                                  std::vector<S> dcol(static_cast<size_t>(ckk * Ho * Wo));
                                  for (int64_t nidx = 0; nidx < N; ++nidx) {
                                      detail::ECMap<S> G(out.grad.data() + nidx * O * Ho * Wo, O, Ho * Wo);
                                      if (need_w || need_x)
                                          detail::im2col_t<S>(ins[0]->data.data() + nidx * C * H * W, C, H, W, kh, kw,
                                                              stride, pad, Ho, Wo, col.data());
                                      if (need_w) {
                                          detail::ECMap<S> Xc(col.data(), ckk, Ho * Wo);
                                          detail::EMap<S> dW(ins[1]->grad.data(), O, ckk);
                                          dW.noalias() += G * Xc.transpose();
                                      }
                                      if (need_x) {
                                          detail::ECMap<S> Wm(ins[1]->data.data(), O, ckk);
                                          detail::EMap<S> dXc(dcol.data(), ckk, Ho * Wo);
                                          dXc.noalias() = Wm.transpose() * G;
                                          detail::col2im_t_acc<S>(dcol.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                                                                  ins[0]->grad.data() + nidx * C * H * W);
                                      }
                                      if (need_b)
                                          for (int64_t o = 0; o < O; ++o)
                                              ins[2]->grad[static_cast<size_t>(o)] += G.row(o).sum();
                                  }
                              });
}

// temporal conv along the frame axis: x (F,C,H,W), w (O,C,k), optional bias (O); zero pad (k-1)/2
template <typename S>
TensorT<S> conv1d_temporal(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& bias) {
    if (x.dim() != 4 || w.dim() != 3) throw DimensionError("conv1d_temporal: expected (F,C,H,W) input, (O,C,k) weight");
    int64_t F = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    int64_t O = w.size(0), k = w.size(2);
    if (w.size(1) != C) throw DimensionError("conv1d_temporal: channel mismatch");
    if (bias.valid() && (bias.dim() != 1 || bias.size(0) != O)) throw DimensionError("conv1d_temporal: bad bias shape");
    int64_t pad = (k - 1) / 2;
    int64_t hw = H * W;
    int64_t ck = C * k;

    std::vector<S> y(static_cast<size_t>(F * O * hw));
    std::vector<S> col(static_cast<size_t>(ck * hw));
    const S* px = x.data();
    for (int64_t f = 0; f < F; ++f) {
        for (int64_t c = 0; c < C; ++c)
            for (int64_t j = 0; j < k; ++j) {
                int64_t fi = f + j - pad;
                S* dst = col.data() + (c * k + j) * hw;
                if (fi >= 0 && fi < F)
                    std::copy(px + (fi * C + c) * hw, px + (fi * C + c + 1) * hw, dst);
                else
                    std::fill(dst, dst + hw, S(0));
            }
        detail::ECMap<S> Wm(w.data(), O, ck);
        detail::ECMap<S> Xc(col.data(), ck, hw);
        detail::EMap<S> Y(y.data() + f * O * hw, O, hw);
        Y.noalias() = Wm * Xc;
        if (bias.valid()) {
            const S* pb = bias.data();
            for (int64_t o = 0; o < O; ++o) Y.row(o).array() += pb[o];
        }
    }
    std::vector<TensorT<S>> ins = {x, w};
    bool has_bias = bias.valid();
    if (has_bias) ins.push_back(bias);
    return detail::make_op<S>({F, O, H, W}, std::move(y), std::move(ins),
                              [F, C, O, k, pad, hw, ck, has_bias](auto& out, const auto& ins) {
                                  bool need_x = ins[0]->requires_grad;
                                  bool need_w = ins[1]->requires_grad;
                                  bool need_b = has_bias && ins[2]->requires_grad;
                                  if (need_x) detail::ensure_grad<S>(*ins[0]);
                                  if (need_w) detail::ensure_grad<S>(*ins[1]);
                                  if (need_b) detail::ensure_grad<S>(*ins[2]);
                                  std::vector<S> col(static_cast<size_t>(ck * hw));
                                  std::vector<S> dcol(static_cast<size_t>(ck * hw));
                                  for (int64_t f = 0; f < F; ++f) {
                                      detail::ECMap<S> G(out.grad.data() + f * O * hw, O, hw);
                                      if (need_w || need_x)
                                          for (int64_t c = 0; c < C; ++c)
                                              for (int64_t j = 0; j < k; ++j) {
                                                  int64_t fi = f + j - pad;
                                                  S* dst = col.data() + (c * k + j) * hw;
                                                  if (fi >= 0 && fi < F)
                                                      std::copy(ins[0]->data.data() + (fi * C + c) * hw,
                                                                ins[0]->data.data() + (fi * C + c + 1) * hw, dst);
                                                  else
                                                      std::fill(dst, dst + hw, S(0));
                                              }
                                      if (need_w) {
                                          detail::ECMap<S> Xc(col.data(), ck, hw);
                                          detail::EMap<S> dW(ins[1]->grad.data(), O, ck);
                                          dW.noalias() += G * Xc.transpose();
                                      }
                                      if (need_x) {
                                          detail::ECMap<S> Wm(ins[1]->data.data(), O, ck);
                                          detail::EMap<S> dXc(dcol.data(), ck, hw);
                                          dXc.noalias() = Wm.transpose() * G;
                                          for (int64_t c = 0; c < C; ++c)
                                              for (int64_t j = 0; j < k; ++j) {
                                                  int64_t fi = f + j - pad;
                                                  if (fi < 0 || fi >= F) continue;
                                                  S* gx = ins[0]->grad.data() + (fi * C + c) * hw;
                                                  const S* src = dcol.data() + (c * k + j) * hw;
                                                  for (int64_t i = 0; i < hw; ++i) gx[i] += src[i];
                                              }
                                      }
                                      if (need_b)
                                          for (int64_t o = 0; o < O; ++o)
                                              ins[2]->grad[static_cast<size_t>(o)] += G.row(o).sum();
                                  }
                              });
}

/*=============================================== group norm ===============================================*/

// x (N,C,H,W); per (sample, group) normalization with per-channel affine
template <typename S>
TensorT<S> group_norm(const TensorT<S>& x, int64_t groups, const TensorT<S>& gamma, const TensorT<S>& beta,
                      S eps = S(1e-5)) {
    if (x.dim() != 4) throw DimensionError("group_norm: expected 4-d input");
    int64_t N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    if (C % groups != 0) throw DimensionError("group_norm: channels not divisible by groups");
    if (gamma.numel() != C || beta.numel() != C) throw DimensionError("group_norm: affine params must have C elements");
    int64_t cpg = C / groups;
    int64_t m = cpg * H * W;
    std::vector<S> y(static_cast<size_t>(x.numel()));
    std::vector<S> means(static_cast<size_t>(N * groups)), invstd(static_cast<size_t>(N * groups));
    const S* px = x.data();
    const S* pg = gamma.data();
    const S* pb = beta.data();
    for (int64_t nidx = 0; nidx < N; ++nidx)
        for (int64_t g = 0; g < groups; ++g) {
            const S* base = px + (nidx * C + g * cpg) * H * W;
            S mu = S(0);
            for (int64_t i = 0; i < m; ++i) mu += base[i];
            mu /= static_cast<S>(m);
            S var = S(0);
            for (int64_t i = 0; i < m; ++i) {
                S d = base[i] - mu;
                var += d * d;
            }
            var /= static_cast<S>(m);
            S inv = S(1) / std::sqrt(var + eps);
            means[static_cast<size_t>(nidx * groups + g)] = mu;
            invstd[static_cast<size_t>(nidx * groups + g)] = inv;
            S* yb = y.data() + (nidx * C + g * cpg) * H * W;
            for (int64_t c = 0; c < cpg; ++c) {
                S ga = pg[g * cpg + c], be = pb[g * cpg + c];
                for (int64_t i = 0; i < H * W; ++i) yb[c * H * W + i] = (base[c * H * W + i] - mu) * inv * ga + be;
            }
        }
    return detail::make_op<S>(x.shape(), std::move(y), {x, gamma, beta},
                              [N, C, H, W, groups, cpg, m, means, invstd](auto& out, const auto& ins) {
                                  bool need_x = ins[0]->requires_grad;
                                  bool need_g = ins[1]->requires_grad;
                                  bool need_b = ins[2]->requires_grad;
                                  if (need_x) detail::ensure_grad<S>(*ins[0]);
                                  if (need_g) detail::ensure_grad<S>(*ins[1]);
                                  if (need_b) detail::ensure_grad<S>(*ins[2]);
                                  int64_t hw = H * W;
                                  std::vector<S> xhat(static_cast<size_t>(m)), dxh(static_cast<size_t>(m));
                                  for (int64_t nidx = 0; nidx < N; ++nidx)
                                      for (int64_t g = 0; g < groups; ++g) {
                                          S mu = means[static_cast<size_t>(nidx * groups + g)];
                                          S inv = invstd[static_cast<size_t>(nidx * groups + g)];
                                          const S* xb = ins[0]->data.data() + (nidx * C + g * cpg) * hw;
                                          const S* gy = out.grad.data() + (nidx * C + g * cpg) * hw;
                                          for (int64_t c = 0; c < cpg; ++c) {
                                              S ga = ins[1]->data[static_cast<size_t>(g * cpg + c)];
                                              for (int64_t i = 0; i < hw; ++i) {
                                                  int64_t j = c * hw + i;
                                                  xhat[static_cast<size_t>(j)] = (xb[j] - mu) * inv;
                                                  dxh[static_cast<size_t>(j)] = gy[j] * ga;
                                              }
                                          }
                                          if (need_g || need_b)
                                              for (int64_t c = 0; c < cpg; ++c) {
                                                  S sg = S(0), sb = S(0);
                                                  for (int64_t i = 0; i < hw; ++i) {
                                                      sg += gy[c * hw + i] * xhat[static_cast<size_t>(c * hw + i)];
                                                      sb += gy[c * hw + i];
                                                  }
                                                  if (need_g) ins[1]->grad[static_cast<size_t>(g * cpg + c)] += sg;
                                                  if (need_b) ins[2]->grad[static_cast<size_t>(g * cpg + c)] += sb;
                                              }
                                          if (need_x) {
                                              S mean_dxh = S(0), mean_dxh_xh = S(0);
                                              for (int64_t j = 0; j < m; ++j) {
                                                  mean_dxh += dxh[static_cast<size_t>(j)];
                                                  mean_dxh_xh += dxh[static_cast<size_t>(j)] * xhat[static_cast<size_t>(j)];
                                              }
                                              mean_dxh /= static_cast<S>(m);
                                              mean_dxh_xh /= static_cast<S>(m);
                                              S* gx = ins[0]->grad.data() + (nidx * C + g * cpg) * hw;
                                              for (int64_t j = 0; j < m; ++j)
                                                  gx[j] += inv * (dxh[static_cast<size_t>(j)] - mean_dxh -
                                                                  xhat[static_cast<size_t>(j)] * mean_dxh_xh);
                                          }
                                      }
                              });
}

/*=============================================== misc nn ops ===============================================*/

// nearest-neighbor 2x upsampling on (N,C,H,W)
template <typename S>
TensorT<S> upsample_nearest2x(const TensorT<S>& x) {
    if (x.dim() != 4) throw DimensionError("upsample_nearest2x: expected 4-d input");
    int64_t N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    std::vector<S> y(static_cast<size_t>(N * C * 4 * H * W));
    const S* px = x.data();
    for (int64_t nc = 0; nc < N * C; ++nc)
        for (int64_t iy = 0; iy < H; ++iy)
            for (int64_t ix = 0; ix < W; ++ix) {
                S v = px[(nc * H + iy) * W + ix];
                S* base = y.data() + nc * 4 * H * W;
                base[(2 * iy) * 2 * W + 2 * ix] = v;
                base[(2 * iy) * 2 * W + 2 * ix + 1] = v;
                base[(2 * iy + 1) * 2 * W + 2 * ix] = v;
                base[(2 * iy + 1) * 2 * W + 2 * ix + 1] = v;
            }
    return detail::make_op<S>({N, C, 2 * H, 2 * W}, std::move(y), {x}, [N, C, H, W](auto& out, const auto& ins) {
        if (!ins[0]->requires_grad) return;
        detail::ensure_grad<S>(*ins[0]);
        for (int64_t nc = 0; nc < N * C; ++nc)
            for (int64_t iy = 0; iy < H; ++iy)
                for (int64_t ix = 0; ix < W; ++ix) {
                    const S* base = out.grad.data() + nc * 4 * H * W;
                    ins[0]->grad[static_cast<size_t>((nc * H + iy) * W + ix)] +=
                        base[(2 * iy) * 2 * W + 2 * ix] + base[(2 * iy) * 2 * W + 2 * ix + 1] +
                        base[(2 * iy + 1) * 2 * W + 2 * ix] + base[(2 * iy + 1) * 2 * W + 2 * ix + 1];
                }
    });
}

// gather rows of a (V,D) table; grads scatter-add into the table
template <typename S>
TensorT<S> embedding_rows(const TensorT<S>& table, const std::vector<int64_t>& ids) {
    if (table.dim() != 2) throw DimensionError("embedding_rows: table must be 2-d");
    int64_t V = table.size(0), D = table.size(1);
    for (int64_t id : ids)
        if (id < 0 || id >= V) throw DimensionError("embedding_rows: id out of range");
    std::vector<S> y(ids.size() * static_cast<size_t>(D));
    const S* pt = table.data();
    for (size_t l = 0; l < ids.size(); ++l)
        std::copy(pt + ids[l] * D, pt + (ids[l] + 1) * D, y.begin() + static_cast<int64_t>(l) * D);
    return detail::make_op<S>({static_cast<int64_t>(ids.size()), D}, std::move(y), {table},
                              [ids, D](auto& out, const auto& ins) {
                                  if (!ins[0]->requires_grad) return;
                                  detail::ensure_grad<S>(*ins[0]);
                                  for (size_t l = 0; l < ids.size(); ++l)
                                      for (int64_t j = 0; j < D; ++j)
                                          ins[0]->grad[static_cast<size_t>(ids[l] * D + j)] +=
                                              out.grad[static_cast<size_t>(static_cast<int64_t>(l) * D + j)];
                              });
}

// inverted dropout on the whole tensor; the mask is drawn once and reused in backward
template <typename S>
TensorT<S> dropout(const TensorT<S>& x, double p, Rng& rng, bool training) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must be in [0,1)");
    if (!training || p == 0.0) {
        std::vector<S> y(x.st->data);
        return detail::make_op<S>(x.shape(), std::move(y), {x}, [](auto& out, const auto& ins) {
            if (!ins[0]->requires_grad) return;
            detail::ensure_grad<S>(*ins[0]);
            for (size_t i = 0; i < out.grad.size(); ++i) ins[0]->grad[i] += out.grad[i];
        });
    }
    S keep_scale = static_cast<S>(1.0 / (1.0 - p));
    std::vector<S> mask(static_cast<size_t>(x.numel()));
    for (auto& v : mask) v = rng.uniform() >= p ? keep_scale : S(0);
    std::vector<S> y(static_cast<size_t>(x.numel()));
    const S* px = x.data();
    for (size_t i = 0; i < y.size(); ++i) y[i] = px[i] * mask[i];
    return detail::make_op<S>(x.shape(), std::move(y), {x}, [mask](auto& out, const auto& ins) {
        if (!ins[0]->requires_grad) return;
        detail::ensure_grad<S>(*ins[0]);
        for (size_t i = 0; i < out.grad.size(); ++i) ins[0]->grad[i] += out.grad[i] * mask[i];
    });
}

}  // namespace miniweave

#endif
