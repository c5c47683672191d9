#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "nats/mask.hpp"
#include "nats/roles.hpp"

namespace nats {

// Q, K, V packed as [len][heads][head_dim]; scale is the 1/sqrt(head_dim)
// factor applied to Q.K^T scores.
template <typename T>
struct AttnInputs {
    int len = 0;
    int heads = 0;
    int head_dim = 0;
    T scale = 1;
    std::vector<T> q, k, v;  // [len][heads][head_dim]

    AttnInputs() = default;
    AttnInputs(int len_, int heads_, int dim_)
        : len(len_),
          heads(heads_),
          head_dim(dim_),
          scale(T(1) / std::sqrt(static_cast<T>(dim_))),
          q(static_cast<size_t>(len_) * heads_ * dim_, 0),
          k(q.size(), 0),
          v(q.size(), 0) {}

    size_t off(int t, int h) const { return (static_cast<size_t>(t) * heads + h) * head_dim; }
};

// Attention output plus the per-row logsumexp of the masked exponentials,
// which the backward pass reuses instead of recomputing the denominator.
template <typename T>
struct AttnOutput {
    int len = 0;
    int heads = 0;
    int head_dim = 0;
    std::vector<T> o;    // [len][heads][head_dim]
    std::vector<T> lse;  // [len][heads]

    size_t off(int t, int h) const { return (static_cast<size_t>(t) * heads + h) * head_dim; }
};

// Backward payload: input gradients plus the per-(token, head, role) gradients
// collected column-wise from the mask gradient. d_role is ordered
// (Global, Local, SlidingWindow); row_dot is D = rowsum(dO ⊙ O).
template <typename T>
struct GradBundle {
    std::vector<T> dq, dk, dv;  // [len][heads][head_dim]
    std::vector<T> d_role;      // [len][heads][3]
    std::vector<T> row_dot;     // [len][heads]
};

template <typename T>
struct BackwardOptions {
    T lambda = 0;             // sparsity pressure added to Global/Local gradients
    bool regret_term = true;  // subtract the demotion regret from Global gradients
    int block_rows = 16;
    int block_cols = 16;
};

// Per-tile counters filled by forward_tiled when a stats pointer is passed.
struct BlockStats {
    int64_t total = 0;
    int64_t skipped = 0;
    int64_t mixed = 0;
};

namespace detail {

template <typename T>
void check_finite(const std::vector<T> &x, const char *what) {
    for (T v : x)
        if (!std::isfinite(v)) throw std::invalid_argument(std::string(what) + ": non-finite entry");
}

// Last query row able to see key k in head h, from the key's role.
inline std::vector<int> column_tops(const RoleSequence &roles, const NextGlobalIndex &ng,
                                    int window, int head) {
    const int L = roles.len;
    std::vector<int> top(L);
    for (int k = 0; k < L; ++k) {
        switch (roles.at(k, head)) {
            case TokenRole::Global: top[k] = L - 1; break;
            case TokenRole::Local: top[k] = std::min<int>(L - 1, ng.at(k, head)); break;
            case TokenRole::SlidingWindow: top[k] = std::min(L - 1, k + window); break;
        }
    }
    return top;
}

}  // namespace detail

template <typename T>
std::vector<T> rowwise_dot(const AttnOutput<T> &out, const std::vector<T> &d_o) {
    require(d_o.size() == out.o.size(), "rowwise_dot: shape mismatch");
    std::vector<T> d(static_cast<size_t>(out.len) * out.heads, 0);
    for (int t = 0; t < out.len; ++t) {
        for (int h = 0; h < out.heads; ++h) {
            const size_t base = out.off(t, h);
            T acc = 0;
            for (int c = 0; c < out.head_dim; ++c) acc += d_o[base + c] * out.o[base + c];
            d[static_cast<size_t>(t) * out.heads + h] = acc;
        }
    }
    return d;
}

// Dense reference: per-row masked softmax over exp(scale Q.K^T) ⊙ M.
template <typename T>
AttnOutput<T> forward_reference(const AttnInputs<T> &in, const DenseMask &mask) {
    require(mask.len_q == in.len && mask.len_k == in.len && mask.heads == in.heads,
            "forward_reference: mask shape mismatch");
    detail::check_finite(in.q, "q");
    detail::check_finite(in.k, "k");
    detail::check_finite(in.v, "v");

    AttnOutput<T> out;
    out.len = in.len;
    out.heads = in.heads;
    out.head_dim = in.head_dim;
    out.o.assign(in.q.size(), 0);
    out.lse.assign(static_cast<size_t>(in.len) * in.heads, 0);

    std::vector<T> scores(in.len);
    for (int h = 0; h < in.heads; ++h) {
        for (int q = 0; q < in.len; ++q) {
            T row_max = -std::numeric_limits<T>::infinity();
            for (int k = 0; k <= q; ++k) {
                if (!mask.at(q, k, h)) continue;
                const T *qp = in.q.data() + in.off(q, h);
                const T *kp = in.k.data() + in.off(k, h);
                T s = 0;
                for (int c = 0; c < in.head_dim; ++c) s += qp[c] * kp[c];
                s *= in.scale;
                scores[k] = s;
                row_max = std::max(row_max, s);
            }
            if (row_max == -std::numeric_limits<T>::infinity())
                throw std::invalid_argument("forward_reference: fully masked row");

            T denom = 0;
            T *op = out.o.data() + out.off(q, h);
            for (int k = 0; k <= q; ++k) {
                if (!mask.at(q, k, h)) continue;
                const T p = std::exp(scores[k] - row_max);
                denom += p;
                const T *vp = in.v.data() + in.off(k, h);
                for (int c = 0; c < in.head_dim; ++c) op[c] += p * vp[c];
            }
            for (int c = 0; c < in.head_dim; ++c) op[c] /= denom;
            out.lse[static_cast<size_t>(q) * in.heads + h] = row_max + std::log(denom);
        }
    }
    return out;
}

// Tiled forward with online softmax statistics and block skipping: column
// tiles whose mask region is all zero are never multiplied. Masks are built
// on the fly from the roles, so the dense mask never materializes. With one
// tile covering the sequence this degenerates to a single online-softmax pass.
template <typename T>
AttnOutput<T> forward_tiled(const AttnInputs<T> &in, const RoleSequence &roles,
                            const NextGlobalIndex &ng, int window, int block_rows,
                            int block_cols, BlockStats *stats = nullptr,
                            bool skip_blocks = true) {
    require(roles.len == in.len && roles.heads == in.heads, "forward_tiled: roles shape mismatch");
    require(window >= 1, "forward_tiled: window must be >= 1");
    require(block_rows >= 1 && block_cols >= 1, "forward_tiled: block sizes must be >= 1");
    detail::check_finite(in.q, "q");
    detail::check_finite(in.k, "k");
    detail::check_finite(in.v, "v");

    const int L = in.len;
    const int D = in.head_dim;
    const int row_blocks = ceil_div(L, block_rows);
    const int col_blocks = ceil_div(L, block_cols);
    const T neg_inf = -std::numeric_limits<T>::infinity();

    AttnOutput<T> out;
    out.len = L;
    out.heads = in.heads;
    out.head_dim = D;
    out.o.assign(in.q.size(), 0);
    out.lse.assign(static_cast<size_t>(L) * in.heads, 0);

    std::vector<T> acc(static_cast<size_t>(block_rows) * D);
    std::vector<T> row_sum(block_rows), row_max(block_rows);
    std::vector<T> s_tile(block_cols);
    std::vector<uint8_t> a_tile(block_cols);

    for (int h = 0; h < in.heads; ++h) {
        const std::vector<int> top = detail::column_tops(roles, ng, window, h);
        for (int rb = 0; rb < row_blocks; ++rb) {
            const int q0 = rb * block_rows;
            const int q1 = std::min(L, q0 + block_rows);
            std::fill(acc.begin(), acc.end(), T(0));
            std::fill(row_sum.begin(), row_sum.end(), T(0));
            std::fill(row_max.begin(), row_max.end(), neg_inf);

            for (int cb = 0; cb < col_blocks; ++cb) {
                const int k0 = cb * block_cols;
                if (k0 > q1 - 1) break;  // entirely above the diagonal
                const int k1 = std::min(L, k0 + block_cols);
                if (stats) ++stats->total;

                // Activity check from the column patterns alone, no Q.K^T yet.
                bool any = false;
                bool full = true;  // every causal cell of the tile unmasked
                for (int k = k0; k < k1; ++k) {
                    const int lo = std::max(k, q0);
                    const int causal_hi = q1 - 1;
                    if (lo > causal_hi) continue;  // column has no causal cells here
                    const int hi = std::min(top[k], causal_hi);
                    if (hi >= lo) any = true;
                    if (hi < causal_hi) full = false;
                }
                if (!any) {
                    if (stats) ++stats->skipped;
                    if (skip_blocks) continue;
                }
                if (stats && any && !full) ++stats->mixed;

                for (int q = q0; q < q1; ++q) {
                    const int kmax = std::min(q, k1 - 1);
                    T tile_max = neg_inf;
                    bool row_any = false;
                    const T *qp = in.q.data() + in.off(q, h);
                    for (int k = k0; k <= kmax; ++k) {
                        if (q > top[k]) {
                            a_tile[k - k0] = 0;
                            continue;
                        }
                        const T *kp = in.k.data() + in.off(k, h);
                        T s = 0;
                        for (int c = 0; c < D; ++c) s += qp[c] * kp[c];
                        s *= in.scale;
                        s_tile[k - k0] = s;
                        a_tile[k - k0] = 1;
                        tile_max = std::max(tile_max, s);
                        row_any = true;
                    }
                    if (!row_any) continue;  // zero-mask row of this tile: exact no-op

                    const int r = q - q0;
                    T *accp = acc.data() + static_cast<size_t>(r) * D;
                    if (tile_max > row_max[r]) {
                        const T f = row_max[r] == neg_inf ? T(0) : std::exp(row_max[r] - tile_max);
                        row_sum[r] *= f;
                        for (int c = 0; c < D; ++c) accp[c] *= f;
                        row_max[r] = tile_max;
                    }
                    for (int k = k0; k <= kmax; ++k) {
                        if (!a_tile[k - k0]) continue;
                        const T p = std::exp(s_tile[k - k0] - row_max[r]);
                        row_sum[r] += p;
                        const T *vp = in.v.data() + in.off(k, h);
                        for (int c = 0; c < D; ++c) accp[c] += p * vp[c];
                    }
                }
            }

            for (int q = q0; q < q1; ++q) {
                const int r = q - q0;
                if (row_sum[r] == T(0))
                    throw std::invalid_argument("forward_tiled: fully masked row");
                T *op = out.o.data() + out.off(q, h);
                const T *accp = acc.data() + static_cast<size_t>(r) * D;
                for (int c = 0; c < D; ++c) op[c] = accp[c] / row_sum[r];
                out.lse[static_cast<size_t>(q) * in.heads + h] = row_max[r] + std::log(row_sum[r]);
            }
        }
    }
    return out;
}

// Tiled backward. dQ/dK/dV use the true masked probabilities; the mask
// gradient dM = clip(exp(S - lse), 1) * (dP - D) is accumulated column-wise
// into the three role patterns, including over cells the current mask hides
// (those tiles contribute to d_role only). The Global entry additionally
// receives the lambda sparsity term and, for tokens currently Global, loses
// the regret rectangle sum that measures the cost of demoting them.
template <typename T>
GradBundle<T> backward_tiled(const AttnInputs<T> &in, const RoleSequence &roles,
                             const NextGlobalIndex &ng, int window, const AttnOutput<T> &out,
                             const std::vector<T> &d_o, const BackwardOptions<T> &opt = {}) {
    require(roles.len == in.len && roles.heads == in.heads, "backward_tiled: roles shape mismatch");
    require(d_o.size() == in.q.size(), "backward_tiled: d_o shape mismatch");
    require(out.o.size() == in.q.size(), "backward_tiled: output shape mismatch");
    require(opt.lambda >= 0, "backward_tiled: lambda must be >= 0");
    detail::check_finite(d_o, "d_o");

    const int L = in.len;
    const int H = in.heads;
    const int D = in.head_dim;
    const int row_blocks = ceil_div(L, opt.block_rows);
    const int col_blocks = ceil_div(L, opt.block_cols);

    GradBundle<T> g;
    g.dq.assign(in.q.size(), 0);
    g.dk.assign(in.q.size(), 0);
    g.dv.assign(in.q.size(), 0);
    g.d_role.assign(static_cast<size_t>(L) * H * kNumRoles, 0);
    g.row_dot = rowwise_dot(out, d_o);

    // First global strictly after position k, or L.
    std::vector<int> ng_strict(L);
    std::vector<T> regret(L);

    for (int h = 0; h < H; ++h) {
        const std::vector<int> top = detail::column_tops(roles, ng, window, h);
        for (int k = 0; k < L; ++k)
            ng_strict[k] = k + 1 < L ? ng.at(k + 1, h) : L;
        std::fill(regret.begin(), regret.end(), T(0));

        for (int cb = 0; cb < col_blocks; ++cb) {
            const int k0 = cb * opt.block_cols;
            const int k1 = std::min(L, k0 + opt.block_cols);
            for (int rb = k0 / opt.block_rows; rb < row_blocks; ++rb) {
                const int q0 = rb * opt.block_rows;
                const int q1 = std::min(L, q0 + opt.block_rows);
                for (int q = std::max(q0, k0); q < q1; ++q) {
                    const T lse = out.lse[static_cast<size_t>(q) * H + h];
                    const T dot = g.row_dot[static_cast<size_t>(q) * H + h];
                    const T *qp = in.q.data() + in.off(q, h);
                    const T *dop = d_o.data() + in.off(q, h);
                    const int kmax = std::min(q, k1 - 1);
                    for (int k = k0; k <= kmax; ++k) {
                        const T *kp = in.k.data() + in.off(k, h);
                        const T *vp = in.v.data() + in.off(k, h);
                        T s = 0, dp = 0;
                        for (int c = 0; c < D; ++c) {
                            s += qp[c] * kp[c];
                            dp += dop[c] * vp[c];
                        }
                        s *= in.scale;
                        const T p_raw = std::exp(s - lse);

                        if (q <= top[k]) {
                            // Unmasked cell: usual softmax-attention gradients.
                            const T ds = p_raw * (dp - dot);
                            T *dqp = g.dq.data() + in.off(q, h);
                            T *dkp = g.dk.data() + in.off(k, h);
                            T *dvp = g.dv.data() + in.off(k, h);
                            for (int c = 0; c < D; ++c) {
                                dqp[c] += ds * in.scale * kp[c];
                                dkp[c] += ds * in.scale * qp[c];
                                dvp[c] += p_raw * dop[c];
                            }
                        }

                        const T dm = std::min(p_raw, T(1)) * (dp - dot);
                        T *dr = g.d_role.data() + (static_cast<size_t>(k) * H + h) * kNumRoles;
                        dr[0] += dm;
                        if (q <= ng.at(k, h)) dr[1] += dm;
                        if (q <= k + window) dr[2] += dm;

                        // Demotion regret: cell (q, k) lies in the rectangle of
                        // the first global after k when q is between that
                        // global and the one following it.
                        const int gi = ng_strict[k];
                        if (gi < L && roles.at(k, h) != TokenRole::Global && q >= gi &&
                            q <= ng_strict[gi])
                            regret[gi] += dm;
                    }
                }
            }
        }

        for (int t = 0; t < L; ++t) {
            T *dr = g.d_role.data() + (static_cast<size_t>(t) * H + h) * kNumRoles;
            dr[0] += opt.lambda * (static_cast<T>(L - t) / static_cast<T>(L));
            dr[1] += opt.lambda * (static_cast<T>(ng.at(t, h) - t) / static_cast<T>(L));
            if (opt.regret_term && roles.at(t, h) == TokenRole::Global) dr[0] -= regret[t];
        }
    }
    return g;
}

}  // namespace nats
