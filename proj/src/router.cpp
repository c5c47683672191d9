#include "nats/router.hpp"

#include <cmath>

namespace nats {

std::vector<double> router_score(const std::vector<double> &x, int len,
                                 const RouterParams &params) {
    require(x.size() == static_cast<size_t>(len) * params.d_model,
            "router_score: x shape mismatch");
    const size_t n_out = params.out_dim();
    std::vector<double> logits(static_cast<size_t>(len) * n_out);
    for (int t = 0; t < len; ++t) {
        const double *xp = x.data() + static_cast<size_t>(t) * params.d_model;
        double *lp = logits.data() + static_cast<size_t>(t) * n_out;
        for (size_t o = 0; o < n_out; ++o) lp[o] = params.bias[o];
        for (int d = 0; d < params.d_model; ++d) {
            const double xv = xp[d];
            const double *wp = params.weight.data() + static_cast<size_t>(d) * n_out;
            for (size_t o = 0; o < n_out; ++o) lp[o] += xv * wp[o];
        }
    }
    return logits;
}

static int argmax3(const double *v) {
    int best = 0;
    if (v[1] > v[best]) best = 1;
    if (v[2] > v[best]) best = 2;
    return best;
}

RoleSample sample_roles(const std::vector<double> &logits, int len, int heads, double temperature,
                        uint64_t seed) {
    require(temperature > 0, "sample_roles: temperature must be > 0");
    require(logits.size() == static_cast<size_t>(len) * heads * kNumRoles,
            "sample_roles: logits shape mismatch");

    RoleSample s;
    s.temperature = temperature;
    s.hard_roles = RoleSequence(len, heads);
    s.soft_probs.resize(logits.size());
    s.gumbel_noise.resize(logits.size());

    Rng rng(seed);
    for (int t = 0; t < len; ++t) {
        for (int h = 0; h < heads; ++h) {
            const size_t base = (static_cast<size_t>(t) * heads + h) * kNumRoles;
            double y[kNumRoles];
            double ymax = -1e300;
            for (int r = 0; r < kNumRoles; ++r) {
                const double noise = -std::log(-std::log(rng.next_open01()));
                s.gumbel_noise[base + r] = noise;
                y[r] = (logits[base + r] + noise) / temperature;
                ymax = std::max(ymax, y[r]);
            }
            double denom = 0;
            for (int r = 0; r < kNumRoles; ++r) {
                y[r] = std::exp(y[r] - ymax);
                denom += y[r];
            }
            for (int r = 0; r < kNumRoles; ++r) s.soft_probs[base + r] = y[r] / denom;
            s.hard_roles.at(t, h) = static_cast<TokenRole>(argmax3(s.soft_probs.data() + base));
        }
    }
    return s;
}

RoleSequence discretize(const std::vector<double> &logits, int len, int heads) {
    require(logits.size() == static_cast<size_t>(len) * heads * kNumRoles,
            "discretize: logits shape mismatch");
    RoleSequence roles(len, heads);
    for (int t = 0; t < len; ++t)
        for (int h = 0; h < heads; ++h) {
            const size_t base = (static_cast<size_t>(t) * heads + h) * kNumRoles;
            roles.at(t, h) = static_cast<TokenRole>(argmax3(logits.data() + base));
        }
    return roles;
}

RouterGrads backward_router(const std::vector<double> &d_role, const RoleSample &sample,
                            const std::vector<double> &x, const RouterParams &params,
                            bool want_dx) {
    const int len = sample.hard_roles.len;
    const int heads = sample.hard_roles.heads;
    require(!sample.soft_probs.empty(), "backward_router: sample was not retained");
    require(d_role.size() == sample.soft_probs.size(), "backward_router: d_role shape mismatch");
    require(x.size() == static_cast<size_t>(len) * params.d_model,
            "backward_router: x shape mismatch");

    const size_t n_out = params.out_dim();
    RouterGrads g;
    g.d_weight.assign(params.weight.size(), 0.0);
    g.d_bias.assign(params.bias.size(), 0.0);
    if (want_dx) g.d_x.assign(x.size(), 0.0);

    std::vector<double> d_logits(n_out);
    for (int t = 0; t < len; ++t) {
        for (int h = 0; h < heads; ++h) {
            const size_t base = (static_cast<size_t>(t) * heads + h) * kNumRoles;
            const double *p = sample.soft_probs.data() + base;
            const double *da = d_role.data() + base;
            double inner = 0;
            for (int r = 0; r < kNumRoles; ++r) inner += p[r] * da[r];
            for (int r = 0; r < kNumRoles; ++r)
                d_logits[static_cast<size_t>(h) * kNumRoles + r] =
                    p[r] * (da[r] - inner) / sample.temperature;
        }
        const double *xp = x.data() + static_cast<size_t>(t) * params.d_model;
        for (size_t o = 0; o < n_out; ++o) g.d_bias[o] += d_logits[o];
        for (int d = 0; d < params.d_model; ++d) {
            double *wgp = g.d_weight.data() + static_cast<size_t>(d) * n_out;
            const double xv = xp[d];
            for (size_t o = 0; o < n_out; ++o) wgp[o] += xv * d_logits[o];
        }
        if (want_dx) {
            double *dxp = g.d_x.data() + static_cast<size_t>(t) * params.d_model;
            for (int d = 0; d < params.d_model; ++d) {
                const double *wp = params.weight.data() + static_cast<size_t>(d) * n_out;
                double acc = 0;
                for (size_t o = 0; o < n_out; ++o) acc += wp[o] * d_logits[o];
                dxp[d] = acc;
            }
        }
    }
    return g;
}

}  // namespace nats
