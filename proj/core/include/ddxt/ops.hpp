#pragma once

// Differentiable primitives over ddxt::Tensor. Every op is a free function
// that optionally records its backward rule on a Tape. Recording happens iff
// a tape is supplied and at least one input requires grad; outputs of
// recorded ops require grad so downstream ops keep recording.

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ddxt/tensor.hpp"

namespace ddxt {

namespace detail {

template <typename T>
inline bool want_tape(Tape<T>* tape, bool any_requires) {
    return tape != nullptr && any_requires;
}

inline std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
        st[static_cast<size_t>(i)] = st[static_cast<size_t>(i) + 1] * s[static_cast<size_t>(i) + 1];
    return st;
}

// Element strides of `small` when broadcast against `big` (equal rank,
// each dim equal or 1). Broadcast dims get stride 0.
inline std::vector<int64_t> broadcast_strides(const Shape& big, const Shape& small, const char* what) {
    if (big.size() != small.size())
        throw DimensionError(std::string(what) + ": rank mismatch " + shape_str(small) + " vs " + shape_str(big));
    auto st = row_major_strides(small);
    for (size_t i = 0; i < big.size(); ++i) {
        if (small[i] == big[i]) continue;
        if (small[i] == 1) {
            st[i] = 0;
        } else {
            throw DimensionError(std::string(what) + ": shape " + shape_str(small) + " not broadcastable to " +
                                 shape_str(big));
        }
    }
    return st;
}

// C[m,n] += A[m,k] * B[k,n], contiguous row-major.
template <typename T>
inline void gemm_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// dA[m,k] += dC[m,n] * B[k,n]^T
template <typename T>
inline void gemm_acc_da(const T* dc, const T* b, T* da, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* dcrow = dc + i * n;
        T* darow = da + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const T* brow = b + p * n;
            T acc = 0;
            for (int64_t j = 0; j < n; ++j) acc += dcrow[j] * brow[j];
            darow[p] += acc;
        }
    }
}

// dB[k,n] += A[m,k]^T * dC[m,n]
template <typename T>
inline void gemm_acc_db(const T* a, const T* dc, T* db, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* dcrow = dc + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const T av = arow[p];
            T* dbrow = db + p * n;
            for (int64_t j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
        }
    }
}

// Copies src into dst with axes ax1/ax2 of src swapped.
template <typename T>
inline void swap_axes_copy(const T* src, const Shape& sshape, int ax1, int ax2, T* dst) {
    const int r = static_cast<int>(sshape.size());
    Shape dshape = sshape;
    std::swap(dshape[static_cast<size_t>(ax1)], dshape[static_cast<size_t>(ax2)]);
    const auto dstrides = row_major_strides(dshape);

    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    const int64_t total = shape_numel(sshape);
    for (int64_t lin = 0; lin < total; ++lin) {
        int64_t doff = 0;
        for (int d = 0; d < r; ++d) {
            int sd = d;
            if (d == ax1) sd = ax2;
            else if (d == ax2) sd = ax1;
            doff += idx[static_cast<size_t>(sd)] * dstrides[static_cast<size_t>(d)];
        }
        dst[doff] = src[lin];
        for (int d = r - 1; d >= 0; --d) {
            if (++idx[static_cast<size_t>(d)] < sshape[static_cast<size_t>(d)]) break;
            idx[static_cast<size_t>(d)] = 0;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
    if (a.shape() != b.shape())
        throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = Tensor<T>::zeros(a.shape());
    auto od = out.data();
    auto ad = a.data();
    auto bd = b.data();
    for (int64_t i = 0; i < a.numel(); ++i) od[i] = ad[i] + bd[i];
    if (detail::want_tape(tape, a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([a, b, out]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad_view();
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
    if (a.shape() != b.shape())
        throw DimensionError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = Tensor<T>::zeros(a.shape());
    auto od = out.data();
    auto ad = a.data();
    auto bd = b.data();
    for (int64_t i = 0; i < a.numel(); ++i) od[i] = ad[i] - bd[i];
    if (detail::want_tape(tape, a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([a, b, out]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad_view();
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
    if (a.shape() != b.shape())
        throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = Tensor<T>::zeros(a.shape());
    auto od = out.data();
    auto ad = a.data();
    auto bd = b.data();
    for (int64_t i = 0; i < a.numel(); ++i) od[i] = ad[i] * bd[i];
    if (detail::want_tape(tape, a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([a, b, out]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad_view();
            auto ad2 = a.data();
            auto bd2 = b.data();
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bd2[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ad2[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c, Tape<T>* tape = nullptr) {
    auto out = Tensor<T>::zeros(x.shape());
    auto od = out.data();
    auto xd = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) od[i] = xd[i] * c;
    if (detail::want_tape(tape, x.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([x, out, c]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad_view();
            auto gx = x.grad();
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
        });
    }
    return out;
}

// x[..., d] + b[d]
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b, Tape<T>* tape = nullptr) {
    if (b.rank() != 1 || x.rank() < 1 || x.dim(x.rank() - 1) != b.dim(0))
        throw DimensionError("add_bias: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(b.shape()));
    const int64_t d = b.dim(0);
    const int64_t rows = x.numel() / d;
    auto out = Tensor<T>::zeros(x.shape());
    auto od = out.data();
    auto xd = x.data();
    auto bd = b.data();
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j) od[r * d + j] = xd[r * d + j] + bd[j];
    if (detail::want_tape(tape, x.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([x, b, out, rows, d]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad_view();
            if (x.requires_grad()) {
                auto gx = x.grad();
                for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
            }
        });
    }
    return out;
}

// x[outer..., inner...] + p[inner...]; p's shape must equal x's trailing dims.
// Used for position embeddings broadcast over the batch.
template <typename T>
Tensor<T> add_rows(const Tensor<T>& x, const Tensor<T>& p, Tape<T>* tape = nullptr) {
    const int xr = x.rank();
    const int pr = p.rank();
    if (pr >= xr) throw DimensionError("add_rows: rank of " + shape_str(p.shape()) + " must be below " +
                                       shape_str(x.shape()));
    for (int i = 0; i < pr; ++i) {
        if (x.dim(xr - pr + i) != p.dim(i))
            throw DimensionError("add_rows: trailing dims of " + shape_str(x.shape()) + " do not match " +
                                 shape_str(p.shape()));
    }
    const int64_t inner = p.numel();
    const int64_t outer = x.numel() / inner;
    auto out = Tensor<T>::zeros(x.shape());
    auto od = out.data();
    auto xd = x.data();
    auto pd = p.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) od[o * inner + i] = xd[o * inner + i] + pd[i];
    if (detail::want_tape(tape, x.requires_grad() || p.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([x, p, out, outer, inner]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad_view();
            if (x.requires_grad()) {
                auto gx = x.grad();
                for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (p.requires_grad()) {
                auto gp = p.grad();
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t i = 0; i < inner; ++i) gp[i] += g[o * inner + i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape, Tape<T>* tape = nullptr) {
    if (shape_numel(new_shape) != x.numel())
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
    auto out = Tensor<T>(std::move(new_shape), std::vector<T>(x.data().begin(), x.data().end()));
    if (detail::want_tape(tape, x.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([x, out]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad_view();
            auto gx = x.grad();
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int ax1, int ax2, Tape<T>* tape = nullptr) {
    const int r = x.rank();
    if (ax1 < 0) ax1 += r;
    if (ax2 < 0) ax2 += r;
    if (ax1 < 0 || ax1 >= r || ax2 < 0 || ax2 >= r)
        throw DimensionError("transpose: axis out of range for " + shape_str(x.shape()));
    Shape oshape = x.shape();
    std::swap(oshape[static_cast<size_t>(ax1)], oshape[static_cast<size_t>(ax2)]);
    auto out = Tensor<T>::zeros(oshape);
    detail::swap_axes_copy(x.data().data(), x.shape(), ax1, ax2, out.data().data());
    if (detail::want_tape(tape, x.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([x, out, ax1, ax2]() mutable {
            if (!out.has_grad()) return;
            std::vector<T> gback(static_cast<size_t>(x.numel()));
            detail::swap_axes_copy(out.grad_view().data(), out.shape(), ax1, ax2, gback.data());
            auto gx = x.grad();
            for (size_t i = 0; i < gback.size(); ++i) gx[i] += gback[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
    if (a.rank() != b.rank() || a.rank() < 1)
        throw DimensionError("concat_last: rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    for (int i = 0; i < a.rank() - 1; ++i)
        if (a.dim(i) != b.dim(i))
            throw DimensionError("concat_last: leading dims differ " + shape_str(a.shape()) + " vs " +
                                 shape_str(b.shape()));
    const int64_t p = a.dim(a.rank() - 1);
    const int64_t q = b.dim(b.rank() - 1);
    const int64_t rows = a.numel() / p;
    Shape oshape = a.shape();
    oshape.back() = p + q;
    auto out = Tensor<T>::zeros(oshape);
    auto od = out.data();
    auto ad = a.data();
    auto bd = b.data();
    for (int64_t r = 0; r < rows; ++r) {
        for (int64_t j = 0; j < p; ++j) od[r * (p + q) + j] = ad[r * p + j];
        for (int64_t j = 0; j < q; ++j) od[r * (p + q) + p + j] = bd[r * q + j];
    }
    if (detail::want_tape(tape, a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([a, b, out, rows, p, q]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad_view();
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < p; ++j) ga[r * p + j] += g[r * (p + q) + j];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < q; ++j) gb[r * q + j] += g[r * (p + q) + p + j];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x, Tape<T>* tape = nullptr) {
    T acc = 0;
    for (T v : x.data()) acc += v;
    auto out = Tensor<T>::scalar(acc);
    if (detail::want_tape(tape, x.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([x, out]() mutable {
            if (!out.has_grad()) return;
            const T g = out.grad_view()[0];
            auto gx = x.grad();
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matrix multiply: rank-2, or equal-rank batched with identical leading dims.

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
    const int r = a.rank();
    if (r < 2 || b.rank() != r)
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    for (int i = 0; i < r - 2; ++i)
        if (a.dim(i) != b.dim(i))
            throw DimensionError("matmul: batch dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int64_t m = a.dim(r - 2);
    const int64_t k = a.dim(r - 1);
    const int64_t k2 = b.dim(r - 2);
    const int64_t n = b.dim(r - 1);
    if (k != k2)
        throw DimensionError("matmul: inner dims disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int64_t batch = 1;
    for (int i = 0; i < r - 2; ++i) batch *= a.dim(i);

    Shape oshape(a.shape().begin(), a.shape().end() - 2);
    oshape.push_back(m);
    oshape.push_back(n);
    auto out = Tensor<T>::zeros(oshape);
    {
        const T* ad = a.data().data();
        const T* bd = b.data().data();
        T* od = out.data().data();
        for (int64_t bi = 0; bi < batch; ++bi)
            detail::gemm_acc(ad + bi * m * k, bd + bi * k * n, od + bi * m * n, m, k, n);
    }
    debug_check_finite(out, "matmul");
    if (detail::want_tape(tape, a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([a, b, out, batch, m, k, n]() mutable {
            if (!out.has_grad()) return;
            const T* g = out.grad_view().data();
            if (a.requires_grad()) {
                T* ga = a.grad().data();
                const T* bd = b.data().data();
                for (int64_t bi = 0; bi < batch; ++bi)
                    detail::gemm_acc_da(g + bi * m * n, bd + bi * k * n, ga + bi * m * k, m, k, n);
            }
            if (b.requires_grad()) {
                T* gb = b.grad().data();
                const T* ad = a.data().data();
                for (int64_t bi = 0; bi < batch; ++bi)
                    detail::gemm_acc_db(ad + bi * m * k, g + bi * m * n, gb + bi * k * n, m, k, n);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax over the last axis with an optional {0,1} mask broadcastable over
// leading dims. Masked entries come out exactly zero and never contribute to
// the max-subtraction or the normalizer.

template <typename T>
Tensor<T> softmax_last_dim(const Tensor<T>& x, const Tensor<T>* mask = nullptr, Tape<T>* tape = nullptr) {
    if (x.rank() < 1) throw DimensionError("softmax_last_dim: scalar input");
    const int64_t n = x.dim(x.rank() - 1);
    const int64_t rows = x.numel() / n;

    std::vector<int64_t> mstrides;
    const T* md = nullptr;
    if (mask) {
        if (mask->dim(mask->rank() - 1) != n)
            throw DimensionError("softmax mask last dim must be " + std::to_string(n) + ", got " +
                                 shape_str(mask->shape()));
        mstrides = detail::broadcast_strides(x.shape(), mask->shape(), "softmax mask");
        md = mask->data().data();
    }

    auto out = Tensor<T>::zeros(x.shape());
    const T* xd = x.data().data();
    T* od = out.data().data();

    // Per-row offset of the mask under broadcasting.
    std::vector<int64_t> mask_row_off;
    if (mask) {
        mask_row_off.resize(static_cast<size_t>(rows));
        const int r = x.rank();
        std::vector<int64_t> idx(static_cast<size_t>(r - 1), 0);
        for (int64_t row = 0; row < rows; ++row) {
            int64_t off = 0;
            for (int d = 0; d < r - 1; ++d) off += idx[static_cast<size_t>(d)] * mstrides[static_cast<size_t>(d)];
            mask_row_off[static_cast<size_t>(row)] = off;
            for (int d = r - 2; d >= 0; --d) {
                if (++idx[static_cast<size_t>(d)] < x.dim(d)) break;
                idx[static_cast<size_t>(d)] = 0;
            }
        }
    }
    const int64_t mlast = (mask && mstrides.back() != 0) ? 1 : 0;

    for (int64_t row = 0; row < rows; ++row) {
        const T* xr = xd + row * n;
        T* orow = od + row * n;
        const T* mr = mask ? md + mask_row_off[static_cast<size_t>(row)] : nullptr;
        T maxv = -std::numeric_limits<T>::infinity();
        int64_t allowed = 0;
        for (int64_t j = 0; j < n; ++j) {
            if (mr && mr[j * mlast] <= T(0.5)) continue;
            ++allowed;
            maxv = std::max(maxv, xr[j]);
        }
        if (mask && allowed == 0)
            throw NumericError("softmax_last_dim: fully masked row " + std::to_string(row));
        T denom = 0;
        for (int64_t j = 0; j < n; ++j) {
            if (mr && mr[j * mlast] <= T(0.5)) {
                orow[j] = T(0);
                continue;
            }
            const T e = std::exp(xr[j] - maxv);
            orow[j] = e;
            denom += e;
        }
        for (int64_t j = 0; j < n; ++j) orow[j] /= denom;
        if (mr) {
            for (int64_t j = 0; j < n; ++j)
                if (mr[j * mlast] <= T(0.5)) orow[j] = T(0);
        }
    }
    debug_check_finite(out, "softmax_last_dim");

    if (detail::want_tape(tape, x.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([x, out, rows, n]() mutable {
            if (!out.has_grad()) return;
            const T* g = out.grad_view().data();
            const T* y = out.data().data();
            auto gx = x.grad();
            for (int64_t row = 0; row < rows; ++row) {
                const T* gr = g + row * n;
                const T* yr = y + row * n;
                T dot = 0;
                for (int64_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
                for (int64_t j = 0; j < n; ++j) gx[row * n + j] += yr[j] * (gr[j] - dot);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Layer normalization over the last axis.

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                     Tape<T>* tape = nullptr) {
    if (x.rank() < 1) throw DimensionError("layer_norm: scalar input");
    const int64_t d = x.dim(x.rank() - 1);
    if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d)
        throw DimensionError("layer_norm: gamma/beta must be [" + std::to_string(d) + "], got " +
                             shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
    if (eps <= T(0)) throw ParamError("layer_norm: eps must be positive");
    const int64_t rows = x.numel() / d;

    auto out = Tensor<T>::zeros(x.shape());
    auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(x.numel()));
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));

    const T* xd = x.data().data();
    const T* gd = gamma.data().data();
    const T* bd = beta.data().data();
    T* od = out.data().data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = xd + r * d;
        T mean = 0;
        for (int64_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<T>(d);
        T var = 0;
        for (int64_t j = 0; j < d; ++j) {
            const T c = xr[j] - mean;
            var += c * c;
        }
        var /= static_cast<T>(d);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(r)] = is;
        for (int64_t j = 0; j < d; ++j) {
            const T xh = (xr[j] - mean) * is;
            (*xhat)[static_cast<size_t>(r * d + j)] = xh;
            od[r * d + j] = gd[j] * xh + bd[j];
        }
    }
    debug_check_finite(out, "layer_norm");

    if (detail::want_tape(tape, x.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([x, gamma, beta, out, xhat, inv_std, rows, d]() mutable {
            if (!out.has_grad()) return;
            const T* g = out.grad_view().data();
            const T* gd2 = gamma.data().data();
            for (int64_t r = 0; r < rows; ++r) {
                const T* gr = g + r * d;
                const T* xh = xhat->data() + r * d;
                if (x.requires_grad()) {
                    auto gx = x.grad();
                    T mean_dxhat = 0, mean_dxhat_xhat = 0;
                    for (int64_t j = 0; j < d; ++j) {
                        const T dxh = gr[j] * gd2[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                    }
                    mean_dxhat /= static_cast<T>(d);
                    mean_dxhat_xhat /= static_cast<T>(d);
                    const T is = (*inv_std)[static_cast<size_t>(r)];
                    for (int64_t j = 0; j < d; ++j) {
                        const T dxh = gr[j] * gd2[j];
                        gx[r * d + j] += is * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
                if (gamma.requires_grad()) {
                    auto gg = gamma.grad();
                    for (int64_t j = 0; j < d; ++j) gg[j] += gr[j] * xh[j];
                }
                if (beta.requires_grad()) {
                    auto gb = beta.grad();
                    for (int64_t j = 0; j < d; ++j) gb[j] += gr[j];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// GELU, tanh approximation.

template <typename T>
inline T gelu_scalar(T v) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    const double xv = static_cast<double>(v);
    return static_cast<T>(0.5 * xv * (1.0 + std::tanh(kC * (xv + kA * xv * xv * xv))));
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x, Tape<T>* tape = nullptr) {
    auto out = Tensor<T>::zeros(x.shape());
    auto od = out.data();
    auto xd = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) od[i] = gelu_scalar(xd[i]);
    if (detail::want_tape(tape, x.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([x, out]() mutable {
            if (!out.has_grad()) return;
            constexpr double kC = 0.7978845608028654;
            constexpr double kA = 0.044715;
            auto g = out.grad_view();
            auto xd2 = x.data();
            auto gx = x.grad();
            for (size_t i = 0; i < g.size(); ++i) {
                const double xv = static_cast<double>(xd2[i]);
                const double th = std::tanh(kC * (xv + kA * xv * xv * xv));
                const double du = kC * (1.0 + 3.0 * kA * xv * xv);
                const double dy = 0.5 * (1.0 + th) + 0.5 * xv * (1.0 - th * th) * du;
                gx[i] += g[i] * static_cast<T>(dy);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Embedding lookup: out[..., :] = table[ids[...]].

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const IntTensor& ids, Tape<T>* tape = nullptr) {
    if (table.rank() != 2)
        throw DimensionError("embedding_lookup: table must be rank 2, got " + shape_str(table.shape()));
    const int64_t vocab = table.dim(0);
    const int64_t d = table.dim(1);
    Shape oshape = ids.shape;
    oshape.push_back(d);
    auto out = Tensor<T>::zeros(oshape);
    const T* td = table.data().data();
    T* od = out.data().data();
    for (int64_t i = 0; i < ids.numel(); ++i) {
        const int32_t id = ids.data[static_cast<size_t>(i)];
        if (id < 0 || id >= vocab)
            throw IndexError("embedding_lookup: id " + std::to_string(id) + " out of range [0," +
                             std::to_string(vocab) + ")");
        std::copy(td + id * d, td + (id + 1) * d, od + i * d);
    }
    if (detail::want_tape(tape, table.requires_grad())) {
        out.set_requires_grad(true);
        IntTensor ids_copy = ids;
        tape->record([table, out, ids_copy, d]() mutable {
            if (!out.has_grad()) return;
            const T* g = out.grad_view().data();
            T* gt = table.grad().data();
            for (int64_t i = 0; i < ids_copy.numel(); ++i) {
                const int64_t id = ids_copy.data[static_cast<size_t>(i)];
                for (int64_t j = 0; j < d; ++j) gt[id * d + j] += g[i * d + j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Inverted dropout. Identity in eval mode or at rate zero; otherwise each
// element drops independently with probability `rate` and survivors scale by
// 1/(1-rate). The rng is an explicit parameter, never global state.

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool training, std::mt19937_64& rng, Tape<T>* tape = nullptr) {
    if (rate < 0.0 || rate >= 1.0)
        throw ParamError("dropout: rate must be in [0,1), got " + std::to_string(rate));
    if (!training || rate == 0.0) return x;

    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    auto keep = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(x.numel()));
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    auto out = Tensor<T>::zeros(x.shape());
    auto od = out.data();
    auto xd = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) {
        const bool k = unif(rng) >= rate;
        (*keep)[static_cast<size_t>(i)] = k ? 1 : 0;
        od[i] = k ? xd[i] * keep_scale : T(0);
    }
    if (detail::want_tape(tape, x.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([x, out, keep, keep_scale]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad_view();
            auto gx = x.grad();
            for (size_t i = 0; i < g.size(); ++i)
                if ((*keep)[i]) gx[i] += g[i] * keep_scale;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Mean negative log-softmax over rows whose target is not `ignore_id`.
// Log-sum-exp is computed with max subtraction.

template <typename T>
Tensor<T> masked_cross_entropy(const Tensor<T>& logits, const IntTensor& targets, int32_t ignore_id,
                               Tape<T>* tape = nullptr) {
    if (logits.rank() != 2)
        throw DimensionError("masked_cross_entropy: logits must be [N,C], got " + shape_str(logits.shape()));
    const int64_t n = logits.dim(0);
    const int64_t c = logits.dim(1);
    if (targets.numel() != n)
        throw DimensionError("masked_cross_entropy: expected " + std::to_string(n) + " targets, got " +
                             std::to_string(targets.numel()));

    const T* ld = logits.data().data();
    auto valid = std::make_shared<std::vector<int64_t>>();
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const int32_t t = targets.data[static_cast<size_t>(i)];
        if (t == ignore_id) continue;
        if (t < 0 || t >= c)
            throw IndexError("masked_cross_entropy: target " + std::to_string(t) + " out of range [0," +
                             std::to_string(c) + ")");
        valid->push_back(i);
        const T* row = ld + i * c;
        T maxv = row[0];
        for (int64_t j = 1; j < c; ++j) maxv = std::max(maxv, row[j]);
        double sum = 0.0;
        for (int64_t j = 0; j < c; ++j) sum += std::exp(static_cast<double>(row[j] - maxv));
        total += std::log(sum) + static_cast<double>(maxv) - static_cast<double>(row[t]);
    }
    if (valid->empty()) throw NumericError("masked_cross_entropy: every position is ignored");
    const int64_t n_valid = static_cast<int64_t>(valid->size());
    auto out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(n_valid)));

    if (detail::want_tape(tape, logits.requires_grad())) {
        out.set_requires_grad(true);
        IntTensor tgt_copy = targets;
        tape->record([logits, out, tgt_copy, valid, n_valid, c]() mutable {
            if (!out.has_grad()) return;
            const T gscale = out.grad_view()[0] / static_cast<T>(n_valid);
            const T* ld2 = logits.data().data();
            T* gl = logits.grad().data();
            for (int64_t i : *valid) {
                const T* row = ld2 + i * c;
                T* grow = gl + i * c;
                T maxv = row[0];
                for (int64_t j = 1; j < c; ++j) maxv = std::max(maxv, row[j]);
                double sum = 0.0;
                for (int64_t j = 0; j < c; ++j) sum += std::exp(static_cast<double>(row[j] - maxv));
                const int32_t t = tgt_copy.data[static_cast<size_t>(i)];
                for (int64_t j = 0; j < c; ++j) {
                    const T p = static_cast<T>(std::exp(static_cast<double>(row[j] - maxv)) / sum);
                    grow[j] += gscale * (p - (j == t ? T(1) : T(0)));
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Masked mean over axis 1 of [B,L,D] with mask [B,L]: the pooling primitive.

template <typename T>
Tensor<T> masked_mean_rows(const Tensor<T>& x, const Tensor<T>& mask, Tape<T>* tape = nullptr) {
    if (x.rank() != 3)
        throw DimensionError("masked_mean_rows: input must be [B,L,D], got " + shape_str(x.shape()));
    const int64_t b = x.dim(0);
    const int64_t l = x.dim(1);
    const int64_t d = x.dim(2);
    if (mask.rank() != 2 || mask.dim(0) != b || mask.dim(1) != l)
        throw DimensionError("masked_mean_rows: mask must be [" + std::to_string(b) + "," + std::to_string(l) +
                             "], got " + shape_str(mask.shape()));
    auto out = Tensor<T>::zeros(Shape{b, d});
    auto counts = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(b), 0);
    const T* xd = x.data().data();
    const T* md = mask.data().data();
    T* od = out.data().data();
    for (int64_t bi = 0; bi < b; ++bi) {
        int64_t cnt = 0;
        for (int64_t li = 0; li < l; ++li) {
            if (md[bi * l + li] <= T(0.5)) continue;
            ++cnt;
            const T* row = xd + (bi * l + li) * d;
            T* orow = od + bi * d;
            for (int64_t j = 0; j < d; ++j) orow[j] += row[j];
        }
        if (cnt == 0)
            throw NumericError("masked_mean_rows: batch row " + std::to_string(bi) + " has no unmasked position");
        (*counts)[static_cast<size_t>(bi)] = cnt;
        T* orow = od + bi * d;
        for (int64_t j = 0; j < d; ++j) orow[j] /= static_cast<T>(cnt);
    }
    if (detail::want_tape(tape, x.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> mask_copy = mask;
        tape->record([x, mask_copy, out, counts, b, l, d]() mutable {
            if (!out.has_grad()) return;
            const T* g = out.grad_view().data();
            const T* md2 = mask_copy.data().data();
            T* gx = x.grad().data();
            for (int64_t bi = 0; bi < b; ++bi) {
                const T inv = T(1) / static_cast<T>((*counts)[static_cast<size_t>(bi)]);
                for (int64_t li = 0; li < l; ++li) {
                    if (md2[bi * l + li] <= T(0.5)) continue;
                    T* grow = gx + (bi * l + li) * d;
                    const T* orow = g + bi * d;
                    for (int64_t j = 0; j < d; ++j) grow[j] += orow[j] * inv;
                }
            }
        });
    }
    return out;
}

}  // namespace ddxt
