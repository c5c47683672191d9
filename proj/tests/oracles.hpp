// Test-only oracles, kept independent of the library implementations they
// check: masks are evaluated entry-wise from the role definitions, attention
// by unstabilized scalar loops, gradients by central finite differences.
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "nats/attention.hpp"
#include "nats/common.hpp"
#include "nats/mask.hpp"

namespace oracles {

using nats::AttnInputs;
using nats::RoleSequence;
using nats::TokenRole;

// Entry-wise mask: causal, and per the key's role either always visible
// (Global), visible while no Global token sits strictly between key and query
// (Local), or visible for the next `window` queries (SlidingWindow).
inline int mask_entry(const RoleSequence &roles, int window, int q, int k, int h) {
    if (k > q) return 0;
    switch (roles.at(k, h)) {
        case TokenRole::Global: return 1;
        case TokenRole::SlidingWindow: return q <= k + window ? 1 : 0;
        case TokenRole::Local: {
            for (int n = k + 1; n <= q - 1; ++n)
                if (roles.at(n, h) == TokenRole::Global) return 0;
            return 1;
        }
    }
    return 0;
}

// Scalar attention with a real-valued mask (entries need not be 0/1); no max
// subtraction, suitable for the small well-scaled test inputs. Returns the
// output laid out like AttnInputs ([L][H][d]).
inline std::vector<double> attention_real_mask(const AttnInputs<double> &in,
                                               const std::vector<double> &mask /*[H][L][L]*/) {
    const int L = in.len, H = in.heads, D = in.head_dim;
    std::vector<double> out(in.q.size(), 0.0);
    for (int h = 0; h < H; ++h) {
        for (int q = 0; q < L; ++q) {
            double denom = 0;
            std::vector<double> w(L, 0.0);
            for (int k = 0; k < L; ++k) {
                const double m = mask[(static_cast<size_t>(h) * L + q) * L + k];
                if (m == 0.0) continue;
                double s = 0;
                for (int c = 0; c < D; ++c) s += in.q[in.off(q, h) + c] * in.k[in.off(k, h) + c];
                w[k] = std::exp(s * in.scale) * m;
                denom += w[k];
            }
            for (int k = 0; k < L; ++k) {
                if (w[k] == 0.0) continue;
                for (int c = 0; c < D; ++c)
                    out[in.off(q, h) + c] += w[k] / denom * in.v[in.off(k, h) + c];
            }
        }
    }
    return out;
}

inline std::vector<double> mask_to_real(const nats::DenseMask &m) {
    std::vector<double> r(m.m.size());
    for (size_t i = 0; i < r.size(); ++i) {
        // DenseMask is [H][Lq][Lk] internally, same as this oracle's layout.
        r[i] = m.m[i] ? 1.0 : 0.0;
    }
    return r;
}

inline double loss_dot(const std::vector<double> &o, const std::vector<double> &d_o) {
    double acc = 0;
    for (size_t i = 0; i < o.size(); ++i) acc += o[i] * d_o[i];
    return acc;
}

// Central finite difference of f around *x.
inline double central_diff(double *x, double h, const std::function<double()> &f) {
    const double saved = *x;
    *x = saved + h;
    const double up = f();
    *x = saved - h;
    const double down = f();
    *x = saved;
    return (up - down) / (2 * h);
}

inline double rel_err(double a, double b) {
    const double scale = std::max({std::abs(a), std::abs(b), 1e-12});
    return std::abs(a - b) / scale;
}

inline double max_rel_err(const std::vector<double> &a, const std::vector<double> &b) {
    double m = 0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, rel_err(a[i], b[i]));
    return m;
}

// Norm-based relative error, steadier than entrywise for gradient checks.
inline double norm_rel_err(const std::vector<double> &a, const std::vector<double> &b) {
    double diff = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
}

inline RoleSequence random_roles(int len, int heads, nats::Rng &rng) {
    RoleSequence roles(len, heads);
    for (int t = 0; t < len; ++t)
        for (int h = 0; h < heads; ++h)
            roles.at(t, h) = static_cast<TokenRole>(rng.next_below(3));
    return roles;
}

inline AttnInputs<double> random_inputs(int len, int heads, int dim, nats::Rng &rng,
                                        double scale = 1.0) {
    AttnInputs<double> in(len, heads, dim);
    for (double &x : in.q) x = scale * rng.next_normal();
    for (double &x : in.k) x = scale * rng.next_normal();
    for (double &x : in.v) x = scale * rng.next_normal();
    return in;
}

}  // namespace oracles
