#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <vector>

#include "cfdiff/error.hpp"
#include "cfdiff/tensor.hpp"

// Reverse-mode automatic differentiation on whole-tensor nodes. A TapeT owns
// the graph for one forward pass; ops append nodes in creation order and
// backward() walks that order in reverse. Templated on the scalar so the
// float training path and the double gradient-check path share one
// implementation. Dense matrix products are delegated to Eigen; everything
// else is plain loops.
namespace cfdiff::ad {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const Mat<T>>;

template <typename T>
struct NodeT {
    std::vector<int> shape;
    const T* val = nullptr;    // leaf: external storage; interior: owned
    std::vector<T> storage;    // owned value for interior nodes
    std::vector<T> grad;       // allocated lazily during backward
    bool needs_grad = false;
    std::function<void()> backward_fn;  // accumulates into parents' grads
    int64_t n = 0;

    T* ensure_grad() {
        if (grad.empty()) grad.assign(static_cast<size_t>(n), T(0));
        return grad.data();
    }
};

template <typename T>
class TapeT {
  public:
    using Node = NodeT<T>;

    explicit TapeT(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }

    // Leaf referencing external storage; the storage must outlive the tape.
    Node* leaf(const T* data, std::vector<int> shape, bool needs_grad) {
        Node* nd = fresh(std::move(shape));
        nd->val = data;
        nd->needs_grad = needs_grad && grad_enabled_;
        return nd;
    }

    // Leaf owning a copy of the given values; never differentiated.
    Node* constant(std::vector<T> data, std::vector<int> shape) {
        Node* nd = fresh(std::move(shape));
        if (static_cast<int64_t>(data.size()) != nd->n)
            throw ContractError("constant data size does not match shape");
        nd->storage = std::move(data);
        nd->val = nd->storage.data();
        return nd;
    }

    Node* alloc(std::vector<int> shape) {
        Node* nd = fresh(std::move(shape));
        nd->storage.assign(static_cast<size_t>(nd->n), T(0));
        nd->val = nd->storage.data();
        return nd;
    }

    // Reverse sweep from a scalar loss node. One shot per tape.
    void backward(Node* loss) {
        if (consumed_) throw ContractError("stale tape: backward already ran");
        if (!grad_enabled_) throw ContractError("stale tape: gradients were not recorded");
        if (loss->n != 1) throw ContractError("backward requires a scalar loss");
        consumed_ = true;
        loss->ensure_grad()[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node& nd = *it;
            if (!nd.grad.empty() && nd.backward_fn) nd.backward_fn();
        }
    }

    size_t size() const { return nodes_.size(); }

  private:
    Node* fresh(std::vector<int> shape) {
        nodes_.emplace_back();
        Node& nd = nodes_.back();
        nd.n = TensorT<T>::count(shape);
        nd.shape = std::move(shape);
        return &nd;
    }

    std::deque<Node> nodes_;  // stable addresses, creation order
    bool grad_enabled_ = true;
    bool consumed_ = false;

    template <typename U>
    friend NodeT<U>* make_op(TapeT<U>&, std::vector<int>, std::initializer_list<NodeT<U>*>,
                             std::function<void()>);
};

// Creates the output node and attaches the backward closure when any input
// participates in differentiation.
template <typename T>
NodeT<T>* make_op(TapeT<T>& tape, std::vector<int> shape, std::initializer_list<NodeT<T>*> parents,
                  std::function<void()> backward_fn) {
    NodeT<T>* out = tape.alloc(std::move(shape));
    bool ng = false;
    for (NodeT<T>* p : parents) ng = ng || p->needs_grad;
    out->needs_grad = ng && tape.grad_enabled();
    if (out->needs_grad) out->backward_fn = std::move(backward_fn);
    return out;
}

template <typename T>
T* mut(NodeT<T>* nd) {
    return nd->storage.data();
}

// ---------------------------------------------------------------------------
// Elementwise ops

template <typename T>
NodeT<T>* add(TapeT<T>& tape, NodeT<T>* a, NodeT<T>* b) {
    if (a->shape != b->shape) throw ContractError("add: shape mismatch");
    NodeT<T>* out = make_op(tape, a->shape, {a, b}, std::function<void()>());
    T* o = mut(out);
    for (int64_t i = 0; i < out->n; ++i) o[i] = a->val[i] + b->val[i];
    if (out->needs_grad)
        out->backward_fn = [out, a, b]() {
            const T* g = out->grad.data();
            if (a->needs_grad) {
                T* ga = a->ensure_grad();
                for (int64_t i = 0; i < out->n; ++i) ga[i] += g[i];
            }
            if (b->needs_grad) {
                T* gb = b->ensure_grad();
                for (int64_t i = 0; i < out->n; ++i) gb[i] += g[i];
            }
        };
    return out;
}

template <typename T>
NodeT<T>* mul(TapeT<T>& tape, NodeT<T>* a, NodeT<T>* b) {
    if (a->shape != b->shape) throw ContractError("mul: shape mismatch");
    NodeT<T>* out = make_op(tape, a->shape, {a, b}, std::function<void()>());
    T* o = mut(out);
    for (int64_t i = 0; i < out->n; ++i) o[i] = a->val[i] * b->val[i];
    if (out->needs_grad)
        out->backward_fn = [out, a, b]() {
            const T* g = out->grad.data();
            if (a->needs_grad) {
                T* ga = a->ensure_grad();
                for (int64_t i = 0; i < out->n; ++i) ga[i] += g[i] * b->val[i];
            }
            if (b->needs_grad) {
                T* gb = b->ensure_grad();
                for (int64_t i = 0; i < out->n; ++i) gb[i] += g[i] * a->val[i];
            }
        };
    return out;
}

template <typename T>
NodeT<T>* scale(TapeT<T>& tape, NodeT<T>* a, T s) {
    NodeT<T>* out = make_op(tape, a->shape, {a}, std::function<void()>());
    T* o = mut(out);
    for (int64_t i = 0; i < out->n; ++i) o[i] = a->val[i] * s;
    if (out->needs_grad)
        out->backward_fn = [out, a, s]() {
            const T* g = out->grad.data();
            T* ga = a->ensure_grad();
            for (int64_t i = 0; i < out->n; ++i) ga[i] += g[i] * s;
        };
    return out;
}

template <typename T>
NodeT<T>* silu(TapeT<T>& tape, NodeT<T>* a) {
    NodeT<T>* out = make_op(tape, a->shape, {a}, std::function<void()>());
    T* o = mut(out);
    for (int64_t i = 0; i < out->n; ++i) {
        T s = T(1) / (T(1) + std::exp(-a->val[i]));
        o[i] = a->val[i] * s;
    }
    if (out->needs_grad)
        out->backward_fn = [out, a]() {
            const T* g = out->grad.data();
            T* ga = a->ensure_grad();
            for (int64_t i = 0; i < out->n; ++i) {
                T x = a->val[i];
                T s = T(1) / (T(1) + std::exp(-x));
                ga[i] += g[i] * (s * (T(1) + x * (T(1) - s)));
            }
        };
    return out;
}

template <typename T>
NodeT<T>* gelu(TapeT<T>& tape, NodeT<T>* a) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    NodeT<T>* out = make_op(tape, a->shape, {a}, std::function<void()>());
    T* o = mut(out);
    for (int64_t i = 0; i < out->n; ++i) {
        T x = a->val[i];
        T u = T(kC) * (x + T(kA) * x * x * x);
        o[i] = T(0.5) * x * (T(1) + std::tanh(u));
    }
    if (out->needs_grad)
        out->backward_fn = [out, a]() {
            const T* g = out->grad.data();
            T* ga = a->ensure_grad();
            for (int64_t i = 0; i < out->n; ++i) {
                T x = a->val[i];
                T u = T(kC) * (x + T(kA) * x * x * x);
                T th = std::tanh(u);
                T du = T(kC) * (T(1) + T(3) * T(kA) * x * x);
                ga[i] += g[i] * (T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du);
            }
        };
    return out;
}

// ---------------------------------------------------------------------------
// Matrix ops ([rows, cols] 2-D nodes)

template <typename T>
void check_matrix(const NodeT<T>* x, const char* what) {
    if (x->shape.size() != 2) throw ContractError(std::string(what) + ": expected a 2-D node");
}

// C = A * B
template <typename T>
NodeT<T>* matmul(TapeT<T>& tape, NodeT<T>* a, NodeT<T>* b) {
    check_matrix(a, "matmul");
    check_matrix(b, "matmul");
    int M = a->shape[0], K = a->shape[1], N = b->shape[1];
    if (b->shape[0] != K) throw ContractError("matmul: inner dimension mismatch");
    NodeT<T>* out = make_op(tape, {M, N}, {a, b}, std::function<void()>());
    CMatMap<T> A(a->val, M, K), B(b->val, K, N);
    MatMap<T>(mut(out), M, N).noalias() = A * B;
    if (out->needs_grad)
        out->backward_fn = [out, a, b, M, K, N]() {
            CMatMap<T> G(out->grad.data(), M, N);
            if (a->needs_grad) {
                CMatMap<T> B(b->val, K, N);
                MatMap<T>(a->ensure_grad(), M, K).noalias() += G * B.transpose();
            }
            if (b->needs_grad) {
                CMatMap<T> A(a->val, M, K);
                MatMap<T>(b->ensure_grad(), K, N).noalias() += A.transpose() * G;
            }
        };
    return out;
}

// C = A * B^T
template <typename T>
NodeT<T>* matmul_nt(TapeT<T>& tape, NodeT<T>* a, NodeT<T>* b) {
    check_matrix(a, "matmul_nt");
    check_matrix(b, "matmul_nt");
    int M = a->shape[0], K = a->shape[1], N = b->shape[0];
    if (b->shape[1] != K) throw ContractError("matmul_nt: inner dimension mismatch");
    NodeT<T>* out = make_op(tape, {M, N}, {a, b}, std::function<void()>());
    CMatMap<T> A(a->val, M, K), B(b->val, N, K);
    MatMap<T>(mut(out), M, N).noalias() = A * B.transpose();
    if (out->needs_grad)
        out->backward_fn = [out, a, b, M, K, N]() {
            CMatMap<T> G(out->grad.data(), M, N);
            if (a->needs_grad) {
                CMatMap<T> B(b->val, N, K);
                MatMap<T>(a->ensure_grad(), M, K).noalias() += G * B;
            }
            if (b->needs_grad) {
                CMatMap<T> A(a->val, M, K);
                MatMap<T>(b->ensure_grad(), N, K).noalias() += G.transpose() * A;
            }
        };
    return out;
}

// y = x * W^T + bias, with x [N, Din], W [Dout, Din], bias [Dout].
template <typename T>
NodeT<T>* linear(TapeT<T>& tape, NodeT<T>* x, NodeT<T>* w, NodeT<T>* bias) {
    check_matrix(x, "linear");
    check_matrix(w, "linear");
    int N = x->shape[0], Din = x->shape[1], Dout = w->shape[0];
    if (w->shape[1] != Din) throw ContractError("linear: weight shape mismatch");
    if (bias->n != Dout) throw ContractError("linear: bias shape mismatch");
    NodeT<T>* out = make_op(tape, {N, Dout}, {x, w, bias}, std::function<void()>());
    CMatMap<T> X(x->val, N, Din), W(w->val, Dout, Din);
    MatMap<T> O(mut(out), N, Dout);
    O.noalias() = X * W.transpose();
    for (int r = 0; r < N; ++r)
        for (int c = 0; c < Dout; ++c) mut(out)[static_cast<int64_t>(r) * Dout + c] += bias->val[c];
    if (out->needs_grad)
        out->backward_fn = [out, x, w, bias, N, Din, Dout]() {
            CMatMap<T> G(out->grad.data(), N, Dout);
            if (x->needs_grad) {
                CMatMap<T> W(w->val, Dout, Din);
                MatMap<T>(x->ensure_grad(), N, Din).noalias() += G * W;
            }
            if (w->needs_grad) {
                CMatMap<T> X(x->val, N, Din);
                MatMap<T>(w->ensure_grad(), Dout, Din).noalias() += G.transpose() * X;
            }
            if (bias->needs_grad) {
                T* gb = bias->ensure_grad();
                for (int r = 0; r < N; ++r)
                    for (int c = 0; c < Dout; ++c) gb[c] += out->grad[static_cast<int64_t>(r) * Dout + c];
            }
        };
    return out;
}

template <typename T>
NodeT<T>* softmax_rows(TapeT<T>& tape, NodeT<T>* x) {
    check_matrix(x, "softmax_rows");
    int N = x->shape[0], D = x->shape[1];
    NodeT<T>* out = make_op(tape, x->shape, {x}, std::function<void()>());
    T* o = mut(out);
    for (int r = 0; r < N; ++r) {
        const T* xr = x->val + static_cast<int64_t>(r) * D;
        T* orow = o + static_cast<int64_t>(r) * D;
        T mx = xr[0];
        for (int c = 1; c < D; ++c) mx = std::max(mx, xr[c]);
        T sum = T(0);
        for (int c = 0; c < D; ++c) {
            orow[c] = std::exp(xr[c] - mx);
            sum += orow[c];
        }
        T inv = T(1) / sum;
        for (int c = 0; c < D; ++c) orow[c] *= inv;
    }
    if (out->needs_grad)
        out->backward_fn = [out, x, N, D]() {
            T* gx = x->ensure_grad();
            for (int r = 0; r < N; ++r) {
                const T* y = out->val + static_cast<int64_t>(r) * D;
                const T* gy = out->grad.data() + static_cast<int64_t>(r) * D;
                T dot = T(0);
                for (int c = 0; c < D; ++c) dot += gy[c] * y[c];
                T* gxr = gx + static_cast<int64_t>(r) * D;
                for (int c = 0; c < D; ++c) gxr[c] += y[c] * (gy[c] - dot);
            }
        };
    return out;
}

// Row-wise layer normalization without learnable affine.
template <typename T>
NodeT<T>* layer_norm_rows(TapeT<T>& tape, NodeT<T>* x, T eps) {
    check_matrix(x, "layer_norm_rows");
    int N = x->shape[0], D = x->shape[1];
    NodeT<T>* out = make_op(tape, x->shape, {x}, std::function<void()>());
    auto inv_std = std::make_shared<std::vector<T>>(N);
    auto means = std::make_shared<std::vector<T>>(N);
    T* o = mut(out);
    for (int r = 0; r < N; ++r) {
        const T* xr = x->val + static_cast<int64_t>(r) * D;
        T mu = T(0);
        for (int c = 0; c < D; ++c) mu += xr[c];
        mu /= T(D);
        T var = T(0);
        for (int c = 0; c < D; ++c) var += (xr[c] - mu) * (xr[c] - mu);
        var /= T(D);
        T is = T(1) / std::sqrt(var + eps);
        (*means)[r] = mu;
        (*inv_std)[r] = is;
        T* orow = o + static_cast<int64_t>(r) * D;
        for (int c = 0; c < D; ++c) orow[c] = (xr[c] - mu) * is;
    }
    if (out->needs_grad)
        out->backward_fn = [out, x, N, D, inv_std]() {
            T* gx = x->ensure_grad();
            for (int r = 0; r < N; ++r) {
                const T* y = out->val + static_cast<int64_t>(r) * D;
                const T* gy = out->grad.data() + static_cast<int64_t>(r) * D;
                T gmean = T(0), gdot = T(0);
                for (int c = 0; c < D; ++c) {
                    gmean += gy[c];
                    gdot += gy[c] * y[c];
                }
                gmean /= T(D);
                gdot /= T(D);
                T is = (*inv_std)[r];
                T* gxr = gx + static_cast<int64_t>(r) * D;
                for (int c = 0; c < D; ++c) gxr[c] += is * (gy[c] - gmean - y[c] * gdot);
            }
        };
    return out;
}

// ---------------------------------------------------------------------------
// Row-broadcast conditioning ops (vectors are [1, D] nodes)

// y = x * (1 + scale) + shift
template <typename T>
NodeT<T>* modulate(TapeT<T>& tape, NodeT<T>* x, NodeT<T>* shift, NodeT<T>* scalev) {
    check_matrix(x, "modulate");
    int N = x->shape[0], D = x->shape[1];
    if (shift->n != D || scalev->n != D) throw ContractError("modulate: vector size mismatch");
    NodeT<T>* out = make_op(tape, x->shape, {x, shift, scalev}, std::function<void()>());
    T* o = mut(out);
    for (int r = 0; r < N; ++r)
        for (int c = 0; c < D; ++c) {
            int64_t i = static_cast<int64_t>(r) * D + c;
            o[i] = x->val[i] * (T(1) + scalev->val[c]) + shift->val[c];
        }
    if (out->needs_grad)
        out->backward_fn = [out, x, shift, scalev, N, D]() {
            const T* g = out->grad.data();
            if (x->needs_grad) {
                T* gx = x->ensure_grad();
                for (int r = 0; r < N; ++r)
                    for (int c = 0; c < D; ++c) {
                        int64_t i = static_cast<int64_t>(r) * D + c;
                        gx[i] += g[i] * (T(1) + scalev->val[c]);
                    }
            }
            if (scalev->needs_grad) {
                T* gs = scalev->ensure_grad();
                for (int r = 0; r < N; ++r)
                    for (int c = 0; c < D; ++c) {
                        int64_t i = static_cast<int64_t>(r) * D + c;
                        gs[c] += g[i] * x->val[i];
                    }
            }
            if (shift->needs_grad) {
                T* gb = shift->ensure_grad();
                for (int r = 0; r < N; ++r)
                    for (int c = 0; c < D; ++c) gb[c] += g[static_cast<int64_t>(r) * D + c];
            }
        };
    return out;
}

// y = x * gate, gate broadcast over rows
template <typename T>
NodeT<T>* gate_rows(TapeT<T>& tape, NodeT<T>* x, NodeT<T>* gate) {
    check_matrix(x, "gate_rows");
    int N = x->shape[0], D = x->shape[1];
    if (gate->n != D) throw ContractError("gate_rows: vector size mismatch");
    NodeT<T>* out = make_op(tape, x->shape, {x, gate}, std::function<void()>());
    T* o = mut(out);
    for (int r = 0; r < N; ++r)
        for (int c = 0; c < D; ++c) {
            int64_t i = static_cast<int64_t>(r) * D + c;
            o[i] = x->val[i] * gate->val[c];
        }
    if (out->needs_grad)
        out->backward_fn = [out, x, gate, N, D]() {
            const T* g = out->grad.data();
            if (x->needs_grad) {
                T* gx = x->ensure_grad();
                for (int r = 0; r < N; ++r)
                    for (int c = 0; c < D; ++c) {
                        int64_t i = static_cast<int64_t>(r) * D + c;
                        gx[i] += g[i] * gate->val[c];
                    }
            }
            if (gate->needs_grad) {
                T* gg = gate->ensure_grad();
                for (int r = 0; r < N; ++r)
                    for (int c = 0; c < D; ++c) {
                        int64_t i = static_cast<int64_t>(r) * D + c;
                        gg[c] += g[i] * x->val[i];
                    }
            }
        };
    return out;
}

template <typename T>
NodeT<T>* slice_cols(TapeT<T>& tape, NodeT<T>* x, int start, int len) {
    check_matrix(x, "slice_cols");
    int N = x->shape[0], D = x->shape[1];
    if (start < 0 || start + len > D) throw ContractError("slice_cols: range out of bounds");
    NodeT<T>* out = make_op(tape, {N, len}, {x}, std::function<void()>());
    T* o = mut(out);
    for (int r = 0; r < N; ++r)
        for (int c = 0; c < len; ++c)
            o[static_cast<int64_t>(r) * len + c] = x->val[static_cast<int64_t>(r) * D + start + c];
    if (out->needs_grad)
        out->backward_fn = [out, x, N, D, start, len]() {
            T* gx = x->ensure_grad();
            for (int r = 0; r < N; ++r)
                for (int c = 0; c < len; ++c)
                    gx[static_cast<int64_t>(r) * D + start + c] += out->grad[static_cast<int64_t>(r) * len + c];
        };
    return out;
}

template <typename T>
NodeT<T>* concat_cols(TapeT<T>& tape, const std::vector<NodeT<T>*>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    int N = parts[0]->shape[0];
    int D = 0;
    for (NodeT<T>* p : parts) {
        check_matrix(p, "concat_cols");
        if (p->shape[0] != N) throw ContractError("concat_cols: row mismatch");
        D += p->shape[1];
    }
    NodeT<T>* out = tape.alloc({N, D});
    bool ng = false;
    for (NodeT<T>* p : parts) ng = ng || p->needs_grad;
    out->needs_grad = ng && tape.grad_enabled();
    T* o = mut(out);
    int off = 0;
    for (NodeT<T>* p : parts) {
        int pd = p->shape[1];
        for (int r = 0; r < N; ++r)
            for (int c = 0; c < pd; ++c)
                o[static_cast<int64_t>(r) * D + off + c] = p->val[static_cast<int64_t>(r) * pd + c];
        off += pd;
    }
    if (out->needs_grad) {
        std::vector<NodeT<T>*> ps = parts;
        out->backward_fn = [out, ps, N, D]() {
            int off = 0;
            for (NodeT<T>* p : ps) {
                int pd = p->shape[1];
                if (p->needs_grad) {
                    T* gp = p->ensure_grad();
                    for (int r = 0; r < N; ++r)
                        for (int c = 0; c < pd; ++c)
                            gp[static_cast<int64_t>(r) * pd + c] += out->grad[static_cast<int64_t>(r) * D + off + c];
                }
                off += pd;
            }
        };
    }
    return out;
}

// Row r of an embedding table [R, D] -> [1, D].
template <typename T>
NodeT<T>* embed_row(TapeT<T>& tape, NodeT<T>* table, int row) {
    check_matrix(table, "embed_row");
    int R = table->shape[0], D = table->shape[1];
    if (row < 0 || row >= R) throw ContractError("embed_row: row out of range");
    NodeT<T>* out = make_op(tape, {1, D}, {table}, std::function<void()>());
    T* o = mut(out);
    for (int c = 0; c < D; ++c) o[c] = table->val[static_cast<int64_t>(row) * D + c];
    if (out->needs_grad)
        out->backward_fn = [out, table, row, D]() {
            T* gt = table->ensure_grad();
            for (int c = 0; c < D; ++c) gt[static_cast<int64_t>(row) * D + c] += out->grad[c];
        };
    return out;
}

// ---------------------------------------------------------------------------
// Image ops ([C, H, W] 3-D nodes)

template <typename T>
void check_image(const NodeT<T>* x, const char* what) {
    if (x->shape.size() != 3) throw ContractError(std::string(what) + ": expected a 3-D node");
}

namespace detail {

// col is [Cin*kh*kw, Ho*Wo]
template <typename T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho, int Wo, T* col) {
    for (int ci = 0; ci < C; ++ci)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                T* dst = col + ((static_cast<int64_t>(ci) * kh + ky) * kw + kx) * (static_cast<int64_t>(Ho) * Wo);
                for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride - pad + ky;
                    for (int ox = 0; ox < Wo; ++ox) {
                        int ix = ox * stride - pad + kx;
                        dst[static_cast<int64_t>(oy) * Wo + ox] =
                            (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                ? x[(static_cast<int64_t>(ci) * H + iy) * W + ix]
                                : T(0);
                    }
                }
            }
}

template <typename T>
void col2im_add(const T* col, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho, int Wo, T* gx) {
    for (int ci = 0; ci < C; ++ci)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                const T* src = col + ((static_cast<int64_t>(ci) * kh + ky) * kw + kx) * (static_cast<int64_t>(Ho) * Wo);
                for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (int ox = 0; ox < Wo; ++ox) {
                        int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= W) continue;
                        gx[(static_cast<int64_t>(ci) * H + iy) * W + ix] += src[static_cast<int64_t>(oy) * Wo + ox];
                    }
                }
            }
}

}  // namespace detail

// 2-D convolution: x [Cin, H, W], w [Cout, Cin, kh, kw], bias [Cout].
template <typename T>
NodeT<T>* conv2d(TapeT<T>& tape, NodeT<T>* x, NodeT<T>* w, NodeT<T>* bias, int stride, int pad) {
    check_image(x, "conv2d");
    if (w->shape.size() != 4) throw ContractError("conv2d: weight must be 4-D");
    int Cin = x->shape[0], H = x->shape[1], W = x->shape[2];
    int Cout = w->shape[0], kh = w->shape[2], kw = w->shape[3];
    if (w->shape[1] != Cin) throw ContractError("conv2d: channel mismatch");
    if (bias->n != Cout) throw ContractError("conv2d: bias mismatch");
    int Ho = (H + 2 * pad - kh) / stride + 1;
    int Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw ContractError("conv2d: empty output");
    NodeT<T>* out = make_op(tape, {Cout, Ho, Wo}, {x, w, bias}, std::function<void()>());

    int K = Cin * kh * kw;
    int64_t P = static_cast<int64_t>(Ho) * Wo;
    std::vector<T> col(static_cast<size_t>(K) * P);
    detail::im2col(x->val, Cin, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
    CMatMap<T> Wm(w->val, Cout, K), Cm(col.data(), K, P);
    MatMap<T> Om(mut(out), Cout, P);
    Om.noalias() = Wm * Cm;
    for (int co = 0; co < Cout; ++co) {
        T b = bias->val[co];
        T* orow = mut(out) + co * P;
        for (int64_t i = 0; i < P; ++i) orow[i] += b;
    }
    if (out->needs_grad)
        out->backward_fn = [out, x, w, bias, Cin, H, W, Cout, kh, kw, stride, pad, Ho, Wo, K, P]() {
            // im2col is recomputed here instead of cached; trades a little
            // time for not holding every conv's col buffer alive.
            CMatMap<T> G(out->grad.data(), Cout, P);
            std::vector<T> col(static_cast<size_t>(K) * P);
            detail::im2col(x->val, Cin, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
            if (w->needs_grad) {
                CMatMap<T> Cm(col.data(), K, P);
                MatMap<T>(w->ensure_grad(), Cout, K).noalias() += G * Cm.transpose();
            }
            if (bias->needs_grad) {
                T* gb = bias->ensure_grad();
                for (int co = 0; co < Cout; ++co) {
                    T s = T(0);
                    const T* grow = out->grad.data() + co * P;
                    for (int64_t i = 0; i < P; ++i) s += grow[i];
                    gb[co] += s;
                }
            }
            if (x->needs_grad) {
                std::vector<T> gcol(static_cast<size_t>(K) * P);
                CMatMap<T> Wm(w->val, Cout, K);
                MatMap<T>(gcol.data(), K, P).noalias() = Wm.transpose() * G;
                detail::col2im_add(gcol.data(), Cin, H, W, kh, kw, stride, pad, Ho, Wo, x->ensure_grad());
            }
        };
    return out;
}

// Group normalization over [C, H, W] with per-channel affine.
template <typename T>
NodeT<T>* group_norm(TapeT<T>& tape, NodeT<T>* x, NodeT<T>* gamma, NodeT<T>* beta, int groups, T eps) {
    check_image(x, "group_norm");
    int C = x->shape[0], H = x->shape[1], W = x->shape[2];
    if (C % groups != 0) throw ContractError("group_norm: channels not divisible by groups");
    if (gamma->n != C || beta->n != C) throw ContractError("group_norm: affine size mismatch");
    int cpg = C / groups;
    int64_t HW = static_cast<int64_t>(H) * W;
    int64_t m = cpg * HW;
    NodeT<T>* out = make_op(tape, x->shape, {x, gamma, beta}, std::function<void()>());
    auto mean = std::make_shared<std::vector<T>>(groups);
    auto istd = std::make_shared<std::vector<T>>(groups);
    T* o = mut(out);
    for (int g = 0; g < groups; ++g) {
        const T* xg = x->val + static_cast<int64_t>(g) * m;
        T mu = T(0);
        for (int64_t i = 0; i < m; ++i) mu += xg[i];
        mu /= T(m);
        T var = T(0);
        for (int64_t i = 0; i < m; ++i) var += (xg[i] - mu) * (xg[i] - mu);
        var /= T(m);
        T is = T(1) / std::sqrt(var + eps);
        (*mean)[g] = mu;
        (*istd)[g] = is;
        for (int cc = 0; cc < cpg; ++cc) {
            int c = g * cpg + cc;
            T ga = gamma->val[c], be = beta->val[c];
            const T* xc = x->val + c * HW;
            T* oc = o + c * HW;
            for (int64_t i = 0; i < HW; ++i) oc[i] = (xc[i] - mu) * is * ga + be;
        }
    }
    if (out->needs_grad)
        out->backward_fn = [out, x, gamma, beta, groups, cpg, HW, m, mean, istd]() {
            for (int g = 0; g < groups; ++g) {
                T mu = (*mean)[g], is = (*istd)[g];
                // xhat = (x - mu) * istd; dxhat = dy * gamma
                T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
                for (int cc = 0; cc < cpg; ++cc) {
                    int c = g * cpg + cc;
                    T ga = gamma->val[c];
                    const T* xc = x->val + c * HW;
                    const T* gy = out->grad.data() + c * HW;
                    for (int64_t i = 0; i < HW; ++i) {
                        T xh = (xc[i] - mu) * is;
                        sum_dxhat += gy[i] * ga;
                        sum_dxhat_xhat += gy[i] * ga * xh;
                    }
                }
                if (gamma->needs_grad || beta->needs_grad) {
                    for (int cc = 0; cc < cpg; ++cc) {
                        int c = g * cpg + cc;
                        const T* xc = x->val + c * HW;
                        const T* gy = out->grad.data() + c * HW;
                        T dg = T(0), db = T(0);
                        for (int64_t i = 0; i < HW; ++i) {
                            dg += gy[i] * (xc[i] - mu) * is;
                            db += gy[i];
                        }
                        if (gamma->needs_grad) gamma->ensure_grad()[c] += dg;
                        if (beta->needs_grad) beta->ensure_grad()[c] += db;
                    }
                }
                if (x->needs_grad) {
                    T* gx = x->ensure_grad();
                    T inv_m = T(1) / T(m);
                    for (int cc = 0; cc < cpg; ++cc) {
                        int c = g * cpg + cc;
                        T ga = gamma->val[c];
                        const T* xc = x->val + c * HW;
                        const T* gy = out->grad.data() + c * HW;
                        T* gxc = gx + c * HW;
                        for (int64_t i = 0; i < HW; ++i) {
                            T xh = (xc[i] - mu) * is;
                            T dxhat = gy[i] * ga;
                            gxc[i] += is * (dxhat - inv_m * sum_dxhat - xh * inv_m * sum_dxhat_xhat);
                        }
                    }
                }
            }
        };
    return out;
}

// Adds a per-channel bias vector [1, C] (or length C) over the spatial dims.
template <typename T>
NodeT<T>* add_channel_bias(TapeT<T>& tape, NodeT<T>* x, NodeT<T>* v) {
    check_image(x, "add_channel_bias");
    int C = x->shape[0];
    int64_t HW = static_cast<int64_t>(x->shape[1]) * x->shape[2];
    if (v->n != C) throw ContractError("add_channel_bias: vector size mismatch");
    NodeT<T>* out = make_op(tape, x->shape, {x, v}, std::function<void()>());
    T* o = mut(out);
    for (int c = 0; c < C; ++c) {
        T b = v->val[c];
        const T* xc = x->val + c * HW;
        T* oc = o + c * HW;
        for (int64_t i = 0; i < HW; ++i) oc[i] = xc[i] + b;
    }
    if (out->needs_grad)
        out->backward_fn = [out, x, v, C, HW]() {
            if (x->needs_grad) {
                T* gx = x->ensure_grad();
                for (int64_t i = 0; i < out->n; ++i) gx[i] += out->grad[i];
            }
            if (v->needs_grad) {
                T* gv = v->ensure_grad();
                for (int c = 0; c < C; ++c) {
                    T s = T(0);
                    const T* gc = out->grad.data() + c * HW;
                    for (int64_t i = 0; i < HW; ++i) s += gc[i];
                    gv[c] += s;
                }
            }
        };
    return out;
}

template <typename T>
NodeT<T>* concat_channels(TapeT<T>& tape, NodeT<T>* a, NodeT<T>* b) {
    check_image(a, "concat_channels");
    check_image(b, "concat_channels");
    if (a->shape[1] != b->shape[1] || a->shape[2] != b->shape[2])
        throw ContractError("concat_channels: spatial mismatch");
    int Ca = a->shape[0], Cb = b->shape[0];
    NodeT<T>* out = make_op(tape, {Ca + Cb, a->shape[1], a->shape[2]}, {a, b}, std::function<void()>());
    std::copy(a->val, a->val + a->n, mut(out));
    std::copy(b->val, b->val + b->n, mut(out) + a->n);
    if (out->needs_grad)
        out->backward_fn = [out, a, b]() {
            if (a->needs_grad) {
                T* ga = a->ensure_grad();
                for (int64_t i = 0; i < a->n; ++i) ga[i] += out->grad[i];
            }
            if (b->needs_grad) {
                T* gb = b->ensure_grad();
                for (int64_t i = 0; i < b->n; ++i) gb[i] += out->grad[a->n + i];
            }
        };
    return out;
}

template <typename T>
NodeT<T>* upsample_nearest2(TapeT<T>& tape, NodeT<T>* x) {
    check_image(x, "upsample_nearest2");
    int C = x->shape[0], H = x->shape[1], W = x->shape[2];
    NodeT<T>* out = make_op(tape, {C, 2 * H, 2 * W}, {x}, std::function<void()>());
    T* o = mut(out);
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < 2 * H; ++y)
            for (int xx = 0; xx < 2 * W; ++xx)
                o[(static_cast<int64_t>(c) * 2 * H + y) * 2 * W + xx] =
                    x->val[(static_cast<int64_t>(c) * H + y / 2) * W + xx / 2];
    if (out->needs_grad)
        out->backward_fn = [out, x, C, H, W]() {
            T* gx = x->ensure_grad();
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < 2 * H; ++y)
                    for (int xx = 0; xx < 2 * W; ++xx)
                        gx[(static_cast<int64_t>(c) * H + y / 2) * W + xx / 2] +=
                            out->grad[(static_cast<int64_t>(c) * 2 * H + y) * 2 * W + xx];
        };
    return out;
}

// ---------------------------------------------------------------------------
// Patch <-> token layout. Token row t = gy * (W/p) + gx holds the patch at
// grid cell (gy, gx) flattened as (c, py, px), channel-major. The two ops are
// exact inverses of each other.

template <typename T>
NodeT<T>* patchify(TapeT<T>& tape, NodeT<T>* x, int p) {
    check_image(x, "patchify");
    int C = x->shape[0], H = x->shape[1], W = x->shape[2];
    if (H % p != 0 || W % p != 0) throw ContractError("patchify: image side not divisible by patch size");
    int gh = H / p, gw = W / p;
    int D = p * p * C;
    NodeT<T>* out = make_op(tape, {gh * gw, D}, {x}, std::function<void()>());
    T* o = mut(out);
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx) {
            T* tok = o + (static_cast<int64_t>(gy) * gw + gx) * D;
            for (int c = 0; c < C; ++c)
                for (int py = 0; py < p; ++py)
                    for (int px = 0; px < p; ++px)
                        tok[(static_cast<int64_t>(c) * p + py) * p + px] =
                            x->val[(static_cast<int64_t>(c) * H + gy * p + py) * W + gx * p + px];
        }
    if (out->needs_grad)
        out->backward_fn = [out, x, C, H, W, p, gh, gw, D]() {
            T* gx_ = x->ensure_grad();
            for (int gy = 0; gy < gh; ++gy)
                for (int gx2 = 0; gx2 < gw; ++gx2) {
                    const T* tok = out->grad.data() + (static_cast<int64_t>(gy) * gw + gx2) * D;
                    for (int c = 0; c < C; ++c)
                        for (int py = 0; py < p; ++py)
                            for (int px = 0; px < p; ++px)
                                gx_[(static_cast<int64_t>(c) * H + gy * p + py) * W + gx2 * p + px] +=
                                    tok[(static_cast<int64_t>(c) * p + py) * p + px];
                }
        };
    return out;
}

template <typename T>
NodeT<T>* unpatchify(TapeT<T>& tape, NodeT<T>* tokens, int C, int H, int W, int p) {
    check_matrix(tokens, "unpatchify");
    int gh = H / p, gw = W / p;
    int D = p * p * C;
    if (tokens->shape[0] != gh * gw || tokens->shape[1] != D)
        throw ContractError("unpatchify: token shape mismatch");
    NodeT<T>* out = make_op(tape, {C, H, W}, {tokens}, std::function<void()>());
    T* o = mut(out);
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx) {
            const T* tok = tokens->val + (static_cast<int64_t>(gy) * gw + gx) * D;
            for (int c = 0; c < C; ++c)
                for (int py = 0; py < p; ++py)
                    for (int px = 0; px < p; ++px)
                        o[(static_cast<int64_t>(c) * H + gy * p + py) * W + gx * p + px] =
                            tok[(static_cast<int64_t>(c) * p + py) * p + px];
        }
    if (out->needs_grad)
        out->backward_fn = [out, tokens, C, H, W, p, gh, gw, D]() {
            T* gt = tokens->ensure_grad();
            for (int gy = 0; gy < gh; ++gy)
                for (int gx = 0; gx < gw; ++gx) {
                    T* tok = gt + (static_cast<int64_t>(gy) * gw + gx) * D;
                    for (int c = 0; c < C; ++c)
                        for (int py = 0; py < p; ++py)
                            for (int px = 0; px < p; ++px)
                                tok[(static_cast<int64_t>(c) * p + py) * p + px] +=
                                    out->grad[(static_cast<int64_t>(c) * H + gy * p + py) * W + gx * p + px];
                }
        };
    return out;
}

// Mean squared error against a constant target; returns a [1] node.
template <typename T>
NodeT<T>* mse_loss(TapeT<T>& tape, NodeT<T>* pred, NodeT<T>* target) {
    if (pred->shape != target->shape) throw ContractError("mse_loss: shape mismatch");
    NodeT<T>* out = make_op(tape, {1}, {pred, target}, std::function<void()>());
    T acc = T(0);
    for (int64_t i = 0; i < pred->n; ++i) {
        T d = pred->val[i] - target->val[i];
        acc += d * d;
    }
    mut(out)[0] = acc / T(pred->n);
    if (out->needs_grad)
        out->backward_fn = [out, pred, target]() {
            T g = out->grad[0] * T(2) / T(pred->n);
            if (pred->needs_grad) {
                T* gp = pred->ensure_grad();
                for (int64_t i = 0; i < pred->n; ++i) gp[i] += g * (pred->val[i] - target->val[i]);
            }
            if (target->needs_grad) {
                T* gt = target->ensure_grad();
                for (int64_t i = 0; i < pred->n; ++i) gt[i] -= g * (pred->val[i] - target->val[i]);
            }
        };
    return out;
}

}  // namespace cfdiff::ad
