#include "nats/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>

namespace nats {

namespace {

constexpr double kNormEps = 1e-6;
constexpr double kGeluC = 0.7978845608028653559;  // sqrt(2/pi)
constexpr double kRopeBase = 10000.0;

// y[L][N] = x[L][M] . w[M][N] + b
void affine(const double *x, int rows, int m, const double *w, int n, const double *b,
            double *y) {
    for (int t = 0; t < rows; ++t) {
        double *yp = y + static_cast<size_t>(t) * n;
        if (b) std::memcpy(yp, b, sizeof(double) * n);
        else std::memset(yp, 0, sizeof(double) * n);
        const double *xp = x + static_cast<size_t>(t) * m;
        for (int i = 0; i < m; ++i) {
            const double xv = xp[i];
            const double *wp = w + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) yp[j] += xv * wp[j];
        }
    }
}

// dx[L][M] += dy[L][N] . w^T
void affine_dx(const double *dy, int rows, int m, const double *w, int n, double *dx) {
    for (int t = 0; t < rows; ++t) {
        const double *dyp = dy + static_cast<size_t>(t) * n;
        double *dxp = dx + static_cast<size_t>(t) * m;
        for (int i = 0; i < m; ++i) {
            const double *wp = w + static_cast<size_t>(i) * n;
            double acc = 0;
            for (int j = 0; j < n; ++j) acc += dyp[j] * wp[j];
            dxp[i] += acc;
        }
    }
}

// dw[M][N] += x^T . dy ; db[N] += colsum(dy)
void affine_dw(const double *x, const double *dy, int rows, int m, int n, double *dw,
               double *db) {
    for (int t = 0; t < rows; ++t) {
        const double *xp = x + static_cast<size_t>(t) * m;
        const double *dyp = dy + static_cast<size_t>(t) * n;
        for (int i = 0; i < m; ++i) {
            const double xv = xp[i];
            if (xv == 0.0) continue;
            double *dwp = dw + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) dwp[j] += xv * dyp[j];
        }
        if (db)
            for (int j = 0; j < n; ++j) db[j] += dyp[j];
    }
}

void rmsnorm(const double *x, int rows, int d, const double *gain, double *y, double *rms_out) {
    for (int t = 0; t < rows; ++t) {
        const double *xp = x + static_cast<size_t>(t) * d;
        double *yp = y + static_cast<size_t>(t) * d;
        double ss = 0;
        for (int i = 0; i < d; ++i) ss += xp[i] * xp[i];
        const double r = std::sqrt(ss / d + kNormEps);
        for (int i = 0; i < d; ++i) yp[i] = gain[i] * xp[i] / r;
        if (rms_out) rms_out[t] = r;
    }
}

// dx += rmsnorm backward; dgain += dy * x / r
void rmsnorm_backward(const double *x, const double *rms, const double *gain, const double *dy,
                      int rows, int d, double *dx, double *dgain) {
    for (int t = 0; t < rows; ++t) {
        const double *xp = x + static_cast<size_t>(t) * d;
        const double *dyp = dy + static_cast<size_t>(t) * d;
        double *dxp = dx + static_cast<size_t>(t) * d;
        const double r = rms[t];
        double inner = 0;
        for (int i = 0; i < d; ++i) inner += gain[i] * dyp[i] * xp[i];
        const double c = inner / (d * r * r * r);
        for (int i = 0; i < d; ++i) {
            dxp[i] += gain[i] * dyp[i] / r - xp[i] * c;
            dgain[i] += dyp[i] * xp[i] / r;
        }
    }
}

double gelu(double x) {
    const double u = kGeluC * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
    const double u = kGeluC * (x + 0.044715 * x * x * x);
    const double th = std::tanh(u);
    const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

// In-place rotary rotation of one [heads][head_dim] row at absolute position
// pos; sign = -1 applies the inverse rotation (used by the backward pass).
void rotate_row(double *row, int heads, int head_dim, int pos, double sign) {
    for (int h = 0; h < heads; ++h) {
        double *p = row + static_cast<size_t>(h) * head_dim;
        for (int i = 0; i * 2 + 1 < head_dim; ++i) {
            const double theta =
                pos * std::pow(kRopeBase, -2.0 * i / static_cast<double>(head_dim));
            const double c = std::cos(theta);
            const double s = sign * std::sin(theta);
            const double a = p[2 * i], b = p[2 * i + 1];
            p[2 * i] = a * c - b * s;
            p[2 * i + 1] = a * s + b * c;
        }
    }
}

void add_sinusoidal(double *x, int rows, int d, int pos0) {
    for (int t = 0; t < rows; ++t) {
        double *xp = x + static_cast<size_t>(t) * d;
        const int pos = pos0 + t;
        for (int i = 0; i * 2 < d; ++i) {
            const double theta = pos * std::pow(kRopeBase, -2.0 * i / static_cast<double>(d));
            xp[2 * i] += std::sin(theta);
            if (2 * i + 1 < d) xp[2 * i + 1] += std::cos(theta);
        }
    }
}

int argmax_row(const double *v, int n) {
    int best = 0;
    for (int i = 1; i < n; ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

// Independent dense causal attention (no mask machinery); probs retained for
// the backward pass when requested.
void plain_attention(const AttnInputs<double> &in, AttnOutput<double> &out,
                     std::vector<double> *probs) {
    const int L = in.len, H = in.heads, D = in.head_dim;
    out.len = L;
    out.heads = H;
    out.head_dim = D;
    out.o.assign(in.q.size(), 0.0);
    out.lse.assign(static_cast<size_t>(L) * H, 0.0);
    if (probs) probs->assign(static_cast<size_t>(H) * L * L, 0.0);
    std::vector<double> row(L);
    for (int h = 0; h < H; ++h) {
        for (int q = 0; q < L; ++q) {
            double mx = -1e300;
            for (int k = 0; k <= q; ++k) {
                const double *qp = in.q.data() + in.off(q, h);
                const double *kp = in.k.data() + in.off(k, h);
                double s = 0;
                for (int c = 0; c < D; ++c) s += qp[c] * kp[c];
                row[k] = s * in.scale;
                mx = std::max(mx, row[k]);
            }
            double denom = 0;
            for (int k = 0; k <= q; ++k) {
                row[k] = std::exp(row[k] - mx);
                denom += row[k];
            }
            double *op = out.o.data() + out.off(q, h);
            for (int k = 0; k <= q; ++k) {
                const double p = row[k] / denom;
                if (probs) (*probs)[(static_cast<size_t>(h) * L + q) * L + k] = p;
                const double *vp = in.v.data() + in.off(k, h);
                for (int c = 0; c < D; ++c) op[c] += p * vp[c];
            }
            out.lse[static_cast<size_t>(q) * H + h] = mx + std::log(denom);
        }
    }
}

void plain_attention_backward(const AttnInputs<double> &in, const std::vector<double> &probs,
                              const std::vector<double> &d_o, GradBundle<double> &g) {
    const int L = in.len, H = in.heads, D = in.head_dim;
    g.dq.assign(in.q.size(), 0.0);
    g.dk.assign(in.q.size(), 0.0);
    g.dv.assign(in.q.size(), 0.0);
    std::vector<double> datt(L), ds(L);
    for (int h = 0; h < H; ++h) {
        for (int q = 0; q < L; ++q) {
            const double *dop = d_o.data() + in.off(q, h);
            const double *pr = probs.data() + (static_cast<size_t>(h) * L + q) * L;
            double inner = 0;
            for (int k = 0; k <= q; ++k) {
                const double *vp = in.v.data() + in.off(k, h);
                double acc = 0;
                for (int c = 0; c < D; ++c) acc += dop[c] * vp[c];
                datt[k] = acc;
                inner += acc * pr[k];
                double *dvp = g.dv.data() + in.off(k, h);
                for (int c = 0; c < D; ++c) dvp[c] += pr[k] * dop[c];
            }
            double *dqp = g.dq.data() + in.off(q, h);
            const double *qp = in.q.data() + in.off(q, h);
            for (int k = 0; k <= q; ++k) {
                ds[k] = pr[k] * (datt[k] - inner);
                const double *kp = in.k.data() + in.off(k, h);
                double *dkp = g.dk.data() + in.off(k, h);
                for (int c = 0; c < D; ++c) {
                    dqp[c] += ds[k] * in.scale * kp[c];
                    dkp[c] += ds[k] * in.scale * qp[c];
                }
            }
        }
    }
}

// Canonical per-layer tensor order inside param_views.
enum LayerTensor {
    kRouterW = 0, kRouterB, kWq, kBq, kWk, kBk, kWv, kBv, kWo, kBo,
    kW1, kB1, kW2, kB2, kNorm1, kNorm2, kLayerTensorCount
};

}  // namespace

void ModelConfig::validate() const {
    require(n_layers >= 1 && n_heads >= 1, "config: layers/heads must be >= 1");
    require(d_model == n_heads * d_head, "config: d_model must equal n_heads * d_head");
    require(d_head % 2 == 0, "config: d_head must be even for rotary encoding");
    require(vocab_size >= 2, "config: vocab_size must be >= 2");
    require(max_seq_len >= 1 && window >= 1, "config: max_seq_len/window must be >= 1");
    require(lambda >= 0.0, "config: lambda must be >= 0");
    require(temperature > 0.0, "config: temperature must be > 0");
    require(tile >= 1, "config: tile must be >= 1");
}

ModelState init_model(const ModelConfig &config, uint64_t seed) {
    config.validate();
    ModelState s;
    s.config = config;
    Rng rng(Rng::mix(seed, 7, 17));
    const double std0 = 0.02;
    auto fill_normal = [&](std::vector<double> &v, double std) {
        for (double &x : v) x = std * rng.next_normal();
    };

    const int D = config.d_model;
    s.embedding.assign(static_cast<size_t>(config.vocab_size) * D, 0.0);
    fill_normal(s.embedding, std0);
    s.norm_f_g.assign(D, 1.0);

    const double resid_std = std0 / std::sqrt(2.0 * config.n_layers);
    s.layers.resize(config.n_layers);
    for (auto &l : s.layers) {
        l.router = RouterParams(D, config.n_heads);
        fill_normal(l.router.weight, std0);
        l.wq.assign(static_cast<size_t>(D) * D, 0.0);
        l.wk.assign(static_cast<size_t>(D) * D, 0.0);
        l.wv.assign(static_cast<size_t>(D) * D, 0.0);
        l.wo.assign(static_cast<size_t>(D) * D, 0.0);
        fill_normal(l.wq, std0);
        fill_normal(l.wk, std0);
        fill_normal(l.wv, std0);
        fill_normal(l.wo, resid_std);
        l.bq.assign(D, 0.0);
        l.bk.assign(D, 0.0);
        l.bv.assign(D, 0.0);
        l.bo.assign(D, 0.0);
        l.w1.assign(static_cast<size_t>(D) * config.d_mlp(), 0.0);
        fill_normal(l.w1, std0);
        l.b1.assign(config.d_mlp(), 0.0);
        l.w2.assign(static_cast<size_t>(config.d_mlp()) * D, 0.0);
        fill_normal(l.w2, resid_std);
        l.b2.assign(D, 0.0);
        l.norm1_g.assign(D, 1.0);
        l.norm2_g.assign(D, 1.0);
    }
    return s;
}

std::vector<ParamView> param_views(ModelState &state) {
    std::vector<ParamView> v;
    v.push_back({"embedding", &state.embedding, true});
    v.push_back({"norm_f.gain", &state.norm_f_g, false});
    for (size_t i = 0; i < state.layers.size(); ++i) {
        LayerParams &l = state.layers[i];
        const std::string p = "layer" + std::to_string(i) + ".";
        v.push_back({p + "router.weight", &l.router.weight, true});
        v.push_back({p + "router.bias", &l.router.bias, false});
        v.push_back({p + "wq", &l.wq, true});
        v.push_back({p + "bq", &l.bq, false});
        v.push_back({p + "wk", &l.wk, true});
        v.push_back({p + "bk", &l.bk, false});
        v.push_back({p + "wv", &l.wv, true});
        v.push_back({p + "bv", &l.bv, false});
        v.push_back({p + "wo", &l.wo, true});
        v.push_back({p + "bo", &l.bo, false});
        v.push_back({p + "w1", &l.w1, true});
        v.push_back({p + "b1", &l.b1, false});
        v.push_back({p + "w2", &l.w2, true});
        v.push_back({p + "b2", &l.b2, false});
        v.push_back({p + "norm1.gain", &l.norm1_g, false});
        v.push_back({p + "norm2.gain", &l.norm2_g, false});
    }
    return v;
}

void ModelGrads::init_like(ModelState &state) {
    tensors.clear();
    for (const ParamView &p : param_views(state)) tensors.emplace_back(p.data->size(), 0.0);
}

SparsityReport sparsity_report(const std::vector<std::vector<RoleSequence>> &roles_per_layer,
                               int window) {
    SparsityReport rep;
    for (const auto &layer_roles : roles_per_layer) {
        std::array<double, 3> frac{0, 0, 0};
        double kv = 0;
        int64_t cells = 0;
        int64_t head_seqs = 0;
        for (const RoleSequence &roles : layer_roles) {
            const int L = roles.len, H = roles.heads;
            const NextGlobalIndex ng = compute_next_global_index(roles);
            for (int h = 0; h < H; ++h) {
                int stored = 0;
                for (int t = 0; t < L; ++t) {
                    const TokenRole r = roles.at(t, h);
                    frac[static_cast<int>(r)] += 1.0;
                    ++cells;
                    if (r == TokenRole::Global) ++stored;
                    else if (r == TokenRole::Local && ng.at(t, h) == L) ++stored;
                    else if (r == TokenRole::SlidingWindow && t >= L - window) ++stored;
                }
                kv += static_cast<double>(stored) / L;
                ++head_seqs;
            }
        }
        for (double &f : frac) f /= std::max<int64_t>(cells, 1);
        rep.role_fractions.push_back(frac);
        rep.kv_fraction.push_back(kv / std::max<int64_t>(head_seqs, 1));
    }
    return rep;
}

ForwardResult forward(const ModelState &state, const std::vector<int32_t> &tokens, int batch,
                      int len, const RolePlan &plan, AttnPath path, bool keep_trace) {
    const ModelConfig &cfg = state.config;
    require(tokens.size() == static_cast<size_t>(batch) * len, "forward: token shape mismatch");
    require(len >= 1 && len <= cfg.max_seq_len, "forward: sequence too long");
    for (int32_t t : tokens)
        require(t >= 0 && t < cfg.vocab_size, "forward: token out of vocabulary");
    if (plan.mode == RolePlan::Mode::ForcedExplicit)
        require(plan.explicit_roles && plan.explicit_roles->size() ==
                                           static_cast<size_t>(cfg.n_layers),
                "forward: explicit roles must cover every layer");

    const int D = cfg.d_model, H = cfg.n_heads, V = cfg.vocab_size;
    ForwardResult res;
    res.batch = batch;
    res.len = len;
    res.tokens = tokens;
    res.logits.assign(static_cast<size_t>(batch) * len * V, 0.0);
    res.traces.resize(batch);
    res.x_final.resize(batch);
    res.x_final_norm.resize(batch);
    res.rms_f.assign(static_cast<size_t>(batch) * len, 0.0);
    res.roles_per_layer.assign(cfg.n_layers, {});

    std::vector<double> x(static_cast<size_t>(len) * D);

    for (int b = 0; b < batch; ++b) {
        const int32_t *toks = tokens.data() + static_cast<size_t>(b) * len;
        for (int t = 0; t < len; ++t)
            std::memcpy(x.data() + static_cast<size_t>(t) * D,
                        state.embedding.data() + static_cast<size_t>(toks[t]) * D,
                        sizeof(double) * D);
        if (cfg.pos_encoding == PosEncoding::Sinusoidal) add_sinusoidal(x.data(), len, D, 0);

        res.traces[b].resize(cfg.n_layers);
        for (int li = 0; li < cfg.n_layers; ++li) {
            const LayerParams &l = state.layers[li];
            LayerTrace &tr = res.traces[b][li];

            if (keep_trace) tr.x_in = x;
            tr.x_norm.assign(static_cast<size_t>(len) * D, 0.0);
            tr.rms1.assign(len, 0.0);
            rmsnorm(x.data(), len, D, l.norm1_g.data(), tr.x_norm.data(), tr.rms1.data());

            if (path == AttnPath::Kernel) {
                switch (plan.mode) {
                    case RolePlan::Mode::Sampled: {
                        std::vector<double> logits = router_score(tr.x_norm, len, l.router);
                        tr.sample = sample_roles(logits, len, H, cfg.temperature,
                                                 Rng::mix(plan.seed, li, b));
                        tr.roles = tr.sample.hard_roles;
                        break;
                    }
                    case RolePlan::Mode::Discretized: {
                        std::vector<double> logits = router_score(tr.x_norm, len, l.router);
                        tr.roles = discretize(logits, len, H);
                        break;
                    }
                    case RolePlan::Mode::ForcedUniform:
                        tr.roles = RoleSequence(len, H, plan.uniform);
                        break;
                    case RolePlan::Mode::ForcedExplicit:
                        tr.roles = (*plan.explicit_roles)[li];
                        require(tr.roles.len == len && tr.roles.heads == H,
                                "forward: explicit roles shape mismatch");
                        break;
                }
                tr.next_global = compute_next_global_index(tr.roles);
                res.roles_per_layer[li].push_back(tr.roles);
            }

            tr.attn_in = AttnInputs<double>(len, H, cfg.d_head);
            affine(tr.x_norm.data(), len, D, l.wq.data(), D, l.bq.data(), tr.attn_in.q.data());
            affine(tr.x_norm.data(), len, D, l.wk.data(), D, l.bk.data(), tr.attn_in.k.data());
            affine(tr.x_norm.data(), len, D, l.wv.data(), D, l.bv.data(), tr.attn_in.v.data());
            if (cfg.pos_encoding == PosEncoding::Rotary) {
                for (int t = 0; t < len; ++t) {
                    rotate_row(tr.attn_in.q.data() + static_cast<size_t>(t) * D, H, cfg.d_head,
                               t, 1.0);
                    rotate_row(tr.attn_in.k.data() + static_cast<size_t>(t) * D, H, cfg.d_head,
                               t, 1.0);
                }
            }

            if (path == AttnPath::Kernel) {
                tr.attn_out = forward_tiled(tr.attn_in, tr.roles, tr.next_global, cfg.window,
                                            cfg.tile, cfg.tile);
            } else {
                plain_attention(tr.attn_in, tr.attn_out, keep_trace ? &tr.plain_probs : nullptr);
            }

            tr.attn_sub_out.assign(static_cast<size_t>(len) * D, 0.0);
            affine(tr.attn_out.o.data(), len, D, l.wo.data(), D, l.bo.data(),
                   tr.attn_sub_out.data());
            for (size_t i = 0; i < x.size(); ++i) x[i] += tr.attn_sub_out[i];
            tr.x_mid = x;

            tr.x_norm2.assign(static_cast<size_t>(len) * D, 0.0);
            tr.rms2.assign(len, 0.0);
            rmsnorm(x.data(), len, D, l.norm2_g.data(), tr.x_norm2.data(), tr.rms2.data());
            tr.mlp_pre.assign(static_cast<size_t>(len) * cfg.d_mlp(), 0.0);
            affine(tr.x_norm2.data(), len, D, l.w1.data(), cfg.d_mlp(), l.b1.data(),
                   tr.mlp_pre.data());
            std::vector<double> act(tr.mlp_pre.size());
            for (size_t i = 0; i < act.size(); ++i) act[i] = gelu(tr.mlp_pre[i]);
            std::vector<double> mlp_out(static_cast<size_t>(len) * D, 0.0);
            affine(act.data(), len, cfg.d_mlp(), l.w2.data(), D, l.b2.data(), mlp_out.data());
            for (size_t i = 0; i < x.size(); ++i) x[i] += mlp_out[i];

            if (!keep_trace) tr = LayerTrace{};
        }

        res.x_final[b] = x;
        std::vector<double> xfn(static_cast<size_t>(len) * D);
        rmsnorm(x.data(), len, D, state.norm_f_g.data(), xfn.data(),
                res.rms_f.data() + static_cast<size_t>(b) * len);
        res.x_final_norm[b] = xfn;

        // Tied head: logits = x_final_norm . embedding^T
        double *lp = res.logits.data() + static_cast<size_t>(b) * len * V;
        for (int t = 0; t < len; ++t) {
            const double *xp = xfn.data() + static_cast<size_t>(t) * D;
            double *row = lp + static_cast<size_t>(t) * V;
            for (int w = 0; w < V; ++w) {
                const double *ep = state.embedding.data() + static_cast<size_t>(w) * D;
                double acc = 0;
                for (int c = 0; c < D; ++c) acc += xp[c] * ep[c];
                row[w] = acc;
            }
        }
    }

    if (path == AttnPath::Kernel) res.sparsity = sparsity_report(res.roles_per_layer, cfg.window);
    return res;
}

void backward(const ModelState &state, const ForwardResult &fwd,
              const std::vector<double> &d_logits, AttnPath path, double lambda, bool router_dx,
              ModelGrads &g) {
    const ModelConfig &cfg = state.config;
    const int D = cfg.d_model, H = cfg.n_heads, V = cfg.vocab_size;
    const int len = fwd.len;
    require(d_logits.size() == static_cast<size_t>(fwd.batch) * len * V,
            "backward: d_logits shape mismatch");
    require(!fwd.traces.empty() && !fwd.traces[0].empty() &&
                !fwd.traces[0][0].x_norm.empty(),
            "backward: forward() must be run with keep_trace");

    auto grad = [&](int layer, int which) -> std::vector<double> & {
        return g.tensors[2 + static_cast<size_t>(layer) * kLayerTensorCount + which];
    };
    std::vector<double> &d_emb = g.tensors[0];
    std::vector<double> &d_norm_f = g.tensors[1];

    // lambda is specified per token of mean-reduced loss; dividing by the
    // token count keeps its pressure invariant to batch size and length.
    const double lambda_item = lambda / (static_cast<double>(fwd.batch) * len);

    std::vector<double> dx(static_cast<size_t>(len) * D);
    std::vector<double> dxn(static_cast<size_t>(len) * D);

    for (int b = 0; b < fwd.batch; ++b) {
        const double *dl = d_logits.data() + static_cast<size_t>(b) * len * V;
        const std::vector<double> &xfn = fwd.x_final_norm[b];

        // Head (tied embedding): d_xfn = d_logits . E ; d_E += d_logits^T . xfn
        std::fill(dxn.begin(), dxn.end(), 0.0);
        for (int t = 0; t < len; ++t) {
            const double *row = dl + static_cast<size_t>(t) * V;
            double *dxp = dxn.data() + static_cast<size_t>(t) * D;
            const double *xp = xfn.data() + static_cast<size_t>(t) * D;
            for (int w = 0; w < V; ++w) {
                const double lv = row[w];
                if (lv == 0.0) continue;
                const double *ep = state.embedding.data() + static_cast<size_t>(w) * D;
                double *dep = d_emb.data() + static_cast<size_t>(w) * D;
                for (int c = 0; c < D; ++c) {
                    dxp[c] += lv * ep[c];
                    dep[c] += lv * xp[c];
                }
            }
        }

        std::fill(dx.begin(), dx.end(), 0.0);
        rmsnorm_backward(fwd.x_final[b].data(), fwd.rms_f.data() + static_cast<size_t>(b) * len,
                         state.norm_f_g.data(), dxn.data(), len, D, dx.data(), d_norm_f.data());

        for (int li = cfg.n_layers - 1; li >= 0; --li) {
            const LayerParams &l = state.layers[li];
            const LayerTrace &tr = fwd.traces[b][li];

            // MLP sublayer: x = x_mid + w2 . gelu(w1 . x_norm2)
            std::vector<double> act(tr.mlp_pre.size());
            for (size_t i = 0; i < act.size(); ++i) act[i] = gelu(tr.mlp_pre[i]);
            affine_dw(act.data(), dx.data(), len, cfg.d_mlp(), D, grad(li, kW2).data(),
                      grad(li, kB2).data());
            std::vector<double> dact(act.size(), 0.0);
            affine_dx(dx.data(), len, cfg.d_mlp(), l.w2.data(), D, dact.data());
            for (size_t i = 0; i < dact.size(); ++i) dact[i] *= gelu_grad(tr.mlp_pre[i]);
            affine_dw(tr.x_norm2.data(), dact.data(), len, D, cfg.d_mlp(), grad(li, kW1).data(),
                      grad(li, kB1).data());
            std::fill(dxn.begin(), dxn.end(), 0.0);
            affine_dx(dact.data(), len, D, l.w1.data(), cfg.d_mlp(), dxn.data());
            rmsnorm_backward(tr.x_mid.data(), tr.rms2.data(), l.norm2_g.data(), dxn.data(), len,
                             D, dx.data(), grad(li, kNorm2).data());

            // Attention sublayer: x_mid = x_in + wo . attn(q, k, v)
            affine_dw(tr.attn_out.o.data(), dx.data(), len, D, D, grad(li, kWo).data(),
                      grad(li, kBo).data());
            std::vector<double> d_attn(static_cast<size_t>(len) * D, 0.0);
            affine_dx(dx.data(), len, D, l.wo.data(), D, d_attn.data());

            GradBundle<double> ab;
            if (path == AttnPath::Kernel) {
                BackwardOptions<double> opt;
                opt.lambda = lambda_item;
                opt.block_rows = cfg.tile;
                opt.block_cols = cfg.tile;
                ab = backward_tiled(tr.attn_in, tr.roles, tr.next_global, cfg.window, tr.attn_out,
                                    d_attn, opt);
            } else {
                plain_attention_backward(tr.attn_in, tr.plain_probs, d_attn, ab);
            }

            if (cfg.pos_encoding == PosEncoding::Rotary) {
                for (int t = 0; t < len; ++t) {
                    rotate_row(ab.dq.data() + static_cast<size_t>(t) * D, H, cfg.d_head, t, -1.0);
                    rotate_row(ab.dk.data() + static_cast<size_t>(t) * D, H, cfg.d_head, t, -1.0);
                }
            }

            std::fill(dxn.begin(), dxn.end(), 0.0);
            affine_dw(tr.x_norm.data(), ab.dq.data(), len, D, D, grad(li, kWq).data(),
                      grad(li, kBq).data());
            affine_dx(ab.dq.data(), len, D, l.wq.data(), D, dxn.data());
            affine_dw(tr.x_norm.data(), ab.dk.data(), len, D, D, grad(li, kWk).data(),
                      grad(li, kBk).data());
            affine_dx(ab.dk.data(), len, D, l.wk.data(), D, dxn.data());
            affine_dw(tr.x_norm.data(), ab.dv.data(), len, D, D, grad(li, kWv).data(),
                      grad(li, kBv).data());
            affine_dx(ab.dv.data(), len, D, l.wv.data(), D, dxn.data());

            if (path == AttnPath::Kernel && !tr.sample.soft_probs.empty()) {
                RouterGrads rg =
                    backward_router(ab.d_role, tr.sample, tr.x_norm, l.router, router_dx);
                auto &dw = grad(li, kRouterW);
                auto &db = grad(li, kRouterB);
                for (size_t i = 0; i < dw.size(); ++i) dw[i] += rg.d_weight[i];
                for (size_t i = 0; i < db.size(); ++i) db[i] += rg.d_bias[i];
                if (router_dx)
                    for (size_t i = 0; i < dxn.size(); ++i) dxn[i] += rg.d_x[i];
            }

            // The block input feeds both the residual skip (already in dx)
            // and the first norm.
            rmsnorm_backward(tr.x_in.data(), tr.rms1.data(), l.norm1_g.data(), dxn.data(), len,
                             D, dx.data(), grad(li, kNorm1).data());
        }

        // Embedding gather gradient.
        for (int t = 0; t < len; ++t) {
            const int32_t tok = fwd.tokens[static_cast<size_t>(b) * len + t];
            double *dep = d_emb.data() + static_cast<size_t>(tok) * D;
            const double *dxp = dx.data() + static_cast<size_t>(t) * D;
            for (int c = 0; c < D; ++c) dep[c] += dxp[c];
        }
    }
}

double cross_entropy(const std::vector<double> &logits, const std::vector<int32_t> &targets,
                     const std::vector<uint8_t> &mask, int batch, int len, int vocab,
                     std::vector<double> *d_logits) {
    require(logits.size() == static_cast<size_t>(batch) * len * vocab,
            "cross_entropy: logits shape mismatch");
    require(targets.size() == static_cast<size_t>(batch) * len, "cross_entropy: target mismatch");
    require(mask.size() == targets.size(), "cross_entropy: mask mismatch");

    int64_t count = 0;
    for (uint8_t m : mask) count += m ? 1 : 0;
    require(count > 0, "cross_entropy: empty loss mask");
    if (d_logits) d_logits->assign(logits.size(), 0.0);

    double loss = 0;
    std::vector<double> p(vocab);
    for (int b = 0; b < batch; ++b) {
        for (int t = 0; t < len; ++t) {
            const size_t pos = static_cast<size_t>(b) * len + t;
            if (!mask[pos]) continue;
            const double *row = logits.data() + pos * vocab;
            double mx = row[0];
            for (int w = 1; w < vocab; ++w) mx = std::max(mx, row[w]);
            double denom = 0;
            for (int w = 0; w < vocab; ++w) {
                p[w] = std::exp(row[w] - mx);
                denom += p[w];
            }
            const int32_t y = targets[pos];
            loss += -(row[y] - mx - std::log(denom));
            if (d_logits) {
                double *dp = d_logits->data() + pos * vocab;
                for (int w = 0; w < vocab; ++w) dp[w] = p[w] / denom / count;
                dp[y] -= 1.0 / count;
            }
        }
    }
    return loss / count;
}

AdamW::AdamW(ModelState &state) {
    for (const ParamView &p : param_views(state)) {
        m.emplace_back(p.data->size(), 0.0);
        v.emplace_back(p.data->size(), 0.0);
    }
}

void AdamW::step(ModelState &state, ModelGrads &grads, const TrainConfig &cfg,
                 const std::vector<bool> *active) {
    std::vector<ParamView> views = param_views(state);
    require(views.size() == grads.tensors.size(), "adamw: grad layout mismatch");

    double sq = 0;
    for (size_t i = 0; i < views.size(); ++i) {
        if (active && !(*active)[i]) continue;
        for (double g : grads.tensors[i]) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    const double scale = (cfg.grad_clip > 0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;

    ++t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (size_t i = 0; i < views.size(); ++i) {
        if (active && !(*active)[i]) continue;
        std::vector<double> &p = *views[i].data;
        std::vector<double> &mi = m[i];
        std::vector<double> &vi = v[i];
        const double wd = views[i].decay ? cfg.weight_decay : 0.0;
        for (size_t j = 0; j < p.size(); ++j) {
            const double g = grads.tensors[i][j] * scale;
            mi[j] = cfg.beta1 * mi[j] + (1.0 - cfg.beta1) * g;
            vi[j] = cfg.beta2 * vi[j] + (1.0 - cfg.beta2) * g * g;
            const double mhat = mi[j] / bc1;
            const double vhat = vi[j] / bc2;
            p[j] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + wd * p[j]);
        }
    }
}

StepStats train_step(ModelState &state, AdamW &opt, const Batch &batch, const TrainConfig &cfg,
                     int64_t step_index, AttnPath path, const RolePlan *plan_override) {
    RolePlan plan;
    plan.mode = RolePlan::Mode::Sampled;
    plan.seed = Rng::mix(cfg.seed, static_cast<uint64_t>(step_index), 0xA11CE);
    if (plan_override) plan = *plan_override;

    ForwardResult fwd =
        forward(state, batch.tokens, batch.batch, batch.len, plan, path, /*keep_trace=*/true);
    std::vector<double> d_logits;
    const double loss = cross_entropy(fwd.logits, batch.targets, batch.loss_mask, batch.batch,
                                      batch.len, state.config.vocab_size, &d_logits);
    if (!std::isfinite(loss)) throw NumericError("train_step: non-finite loss");

    ModelGrads grads;
    grads.init_like(state);
    backward(state, fwd, d_logits, path, state.config.lambda, /*router_dx=*/true, grads);
    opt.step(state, grads, cfg);

    StepStats stats;
    stats.loss = loss;
    stats.sparsity = fwd.sparsity;
    return stats;
}

StepStats distill_step(ModelState &state, AdamW &opt, const Batch &batch, const TrainConfig &cfg,
                       int64_t step_index, const RolePlan *plan_override) {
    const ModelConfig &mcfg = state.config;
    RolePlan student_plan;
    student_plan.mode = RolePlan::Mode::Sampled;
    student_plan.seed = Rng::mix(cfg.seed, static_cast<uint64_t>(step_index), 0xD157);
    if (plan_override) student_plan = *plan_override;
    RolePlan teacher_plan;
    teacher_plan.mode = RolePlan::Mode::ForcedUniform;
    teacher_plan.uniform = TokenRole::Global;

    ForwardResult student = forward(state, batch.tokens, batch.batch, batch.len, student_plan,
                                    AttnPath::Kernel, /*keep_trace=*/true);
    ForwardResult teacher = forward(state, batch.tokens, batch.batch, batch.len, teacher_plan,
                                    AttnPath::Kernel, /*keep_trace=*/true);

    ModelGrads grads;
    grads.init_like(state);
    auto grad = [&](int layer, int which) -> std::vector<double> & {
        return grads.tensors[2 + static_cast<size_t>(layer) * kLayerTensorCount + which];
    };

    double loss = 0;
    const double lambda_item = mcfg.lambda / (static_cast<double>(batch.batch) * batch.len);
    std::vector<double> d_sub(static_cast<size_t>(batch.len) * mcfg.d_model);
    for (int b = 0; b < batch.batch; ++b) {
        for (int li = 0; li < mcfg.n_layers; ++li) {
            const LayerTrace &st = student.traces[b][li];
            const LayerTrace &tt = teacher.traces[b][li];
            for (size_t i = 0; i < d_sub.size(); ++i) {
                const double diff = st.attn_sub_out[i] - tt.attn_sub_out[i];
                loss += diff * diff;
                d_sub[i] = 2.0 * diff / batch.batch;
            }

            std::vector<double> d_attn(d_sub.size(), 0.0);
            affine_dx(d_sub.data(), batch.len, mcfg.d_model, state.layers[li].wo.data(),
                      mcfg.d_model, d_attn.data());
            BackwardOptions<double> bopt;
            bopt.lambda = lambda_item;
            bopt.block_rows = mcfg.tile;
            bopt.block_cols = mcfg.tile;
            GradBundle<double> ab = backward_tiled(st.attn_in, st.roles, st.next_global,
                                                   mcfg.window, st.attn_out, d_attn, bopt);
            if (!st.sample.soft_probs.empty()) {
                RouterGrads rg = backward_router(ab.d_role, st.sample, st.x_norm,
                                                 state.layers[li].router, /*want_dx=*/false);
                auto &dw = grad(li, kRouterW);
                auto &db = grad(li, kRouterB);
                for (size_t i = 0; i < dw.size(); ++i) dw[i] += rg.d_weight[i];
                for (size_t i = 0; i < db.size(); ++i) db[i] += rg.d_bias[i];
            }
        }
    }
    loss /= batch.batch;
    if (!std::isfinite(loss)) throw NumericError("distill_step: non-finite loss");

    // Only router tensors move; the trunk stays frozen.
    std::vector<ParamView> views = param_views(state);
    std::vector<bool> active(views.size(), false);
    for (size_t i = 0; i < views.size(); ++i)
        if (views[i].name.find("router.") != std::string::npos) active[i] = true;
    opt.step(state, grads, cfg, &active);

    StepStats stats;
    stats.loss = loss;
    stats.sparsity = student.sparsity;
    return stats;
}

namespace {

struct DecodeContext {
    const ModelState *model;
    CachePolicy policy;
    std::optional<TokenRole> force_role;
    std::vector<PolicyCache> caches;
    int pos = 0;

    DecodeContext(const ModelState &m, const CachePolicy &p, std::optional<TokenRole> fr)
        : model(&m), policy(p), force_role(fr) {
        for (int i = 0; i < m.config.n_layers; ++i)
            caches.emplace_back(p, m.config.n_heads, m.config.d_head, m.config.window);
    }

    std::vector<double> step(int32_t token, double &fraction,
                             std::vector<RoleSequence> *roles_acc) {
        const ModelConfig &cfg = model->config;
        const int D = cfg.d_model, H = cfg.n_heads, V = cfg.vocab_size;
        require(token >= 0 && token < V, "decode: token out of vocabulary");

        std::vector<double> x(state_row(model->embedding, token, D));
        if (cfg.pos_encoding == PosEncoding::Sinusoidal) add_sinusoidal(x.data(), 1, D, pos);

        std::vector<double> xn(D), q(D), k(D), v(D);
        std::vector<TokenRole> roles(H, TokenRole::Global);
        for (int li = 0; li < cfg.n_layers; ++li) {
            const LayerParams &l = model->layers[li];
            rmsnorm(x.data(), 1, D, l.norm1_g.data(), xn.data(), nullptr);

            if (policy.kind == CachePolicy::Kind::NAtS) {
                if (force_role) {
                    std::fill(roles.begin(), roles.end(), *force_role);
                } else {
                    const std::vector<double> logits = router_score(xn, 1, l.router);
                    const RoleSequence r = discretize(logits, 1, H);
                    for (int h = 0; h < H; ++h) roles[h] = r.at(0, h);
                }
                if (roles_acc)
                    for (int h = 0; h < H; ++h) (*roles_acc)[li].at(pos, h) = roles[h];
            }

            affine(xn.data(), 1, D, l.wq.data(), D, l.bq.data(), q.data());
            affine(xn.data(), 1, D, l.wk.data(), D, l.bk.data(), k.data());
            affine(xn.data(), 1, D, l.wv.data(), D, l.bv.data(), v.data());
            if (cfg.pos_encoding == PosEncoding::Rotary) {
                rotate_row(q.data(), H, cfg.d_head, pos, 1.0);
                rotate_row(k.data(), H, cfg.d_head, pos, 1.0);
            }

            std::vector<double> attn = caches[li].step(q, k, v, roles);
            std::vector<double> sub(D, 0.0);
            affine(attn.data(), 1, D, l.wo.data(), D, l.bo.data(), sub.data());
            for (int i = 0; i < D; ++i) x[i] += sub[i];

            std::vector<double> xn2(D), pre(cfg.d_mlp()), mlp(D, 0.0);
            rmsnorm(x.data(), 1, D, l.norm2_g.data(), xn2.data(), nullptr);
            affine(xn2.data(), 1, D, l.w1.data(), cfg.d_mlp(), l.b1.data(), pre.data());
            for (double &a : pre) a = gelu(a);
            affine(pre.data(), 1, cfg.d_mlp(), l.w2.data(), D, l.b2.data(), mlp.data());
            for (int i = 0; i < D; ++i) x[i] += mlp[i];
        }

        double frac = 0;
        for (const PolicyCache &c : caches) frac += c.last_fraction();
        fraction = frac / caches.size();

        std::vector<double> xfn(D);
        rmsnorm(x.data(), 1, D, model->norm_f_g.data(), xfn.data(), nullptr);
        std::vector<double> logits(V, 0.0);
        for (int w = 0; w < V; ++w) {
            const double *ep = model->embedding.data() + static_cast<size_t>(w) * D;
            double acc = 0;
            for (int c = 0; c < D; ++c) acc += xfn[c] * ep[c];
            logits[w] = acc;
        }
        ++pos;
        return logits;
    }

  private:
    static std::vector<double> state_row(const std::vector<double> &m, int row, int d) {
        return std::vector<double>(m.begin() + static_cast<size_t>(row) * d,
                                   m.begin() + static_cast<size_t>(row + 1) * d);
    }
};

}  // namespace

GenerateResult generate(const ModelState &state, const std::vector<int32_t> &prompt, int n_new,
                        const CachePolicy &policy, std::optional<TokenRole> force_role,
                        bool want_snapshots) {
    require(!prompt.empty(), "generate: prompt must be non-empty");
    const ModelConfig &cfg = state.config;
    const int total = static_cast<int>(prompt.size()) + n_new;

    GenerateResult res;
    res.tokens = prompt;
    res.roles_per_layer.assign(cfg.n_layers, RoleSequence(total, cfg.n_heads));

    DecodeContext ctx(state, policy, force_role);
    const auto t0 = std::chrono::steady_clock::now();

    std::vector<double> logits;
    double frac = 0;
    auto snapshot = [&]() {
        if (want_snapshots)
            res.snapshots.push_back(ctx.caches[0].snapshot_json(ctx.pos - 1));
    };
    for (int32_t tok : prompt) {
        logits = ctx.step(tok, frac, &res.roles_per_layer);
        res.fraction_trace.push_back(frac);
        snapshot();
    }
    for (int i = 0; i < n_new; ++i) {
        const int32_t next = static_cast<int32_t>(argmax_row(logits.data(), cfg.vocab_size));
        res.tokens.push_back(next);
        logits = ctx.step(next, frac, &res.roles_per_layer);
        res.fraction_trace.push_back(frac);
        snapshot();
    }

    const auto t1 = std::chrono::steady_clock::now();
    const double secs = std::chrono::duration<double>(t1 - t0).count();
    res.steps_per_sec = secs > 0 ? total / secs : 0.0;
    for (const PolicyCache &c : ctx.caches) {
        res.peak_entries = std::max(res.peak_entries, c.peak_entries());
        res.peak_ring_entries = std::max(res.peak_ring_entries, c.peak_ring_entries());
    }
    return res;
}

DecodeEvalResult decode_eval(const ModelState &state, const std::vector<int32_t> &tokens,
                             const CachePolicy &policy, std::optional<TokenRole> force_role) {
    require(!tokens.empty(), "decode_eval: empty sequence");
    const ModelConfig &cfg = state.config;
    DecodeEvalResult res;
    res.roles_per_layer.assign(cfg.n_layers,
                               RoleSequence(static_cast<int>(tokens.size()), cfg.n_heads));
    res.logits.reserve(tokens.size() * cfg.vocab_size);

    DecodeContext ctx(state, policy, force_role);
    double frac = 0;
    for (int32_t tok : tokens) {
        std::vector<double> row = ctx.step(tok, frac, &res.roles_per_layer);
        res.logits.insert(res.logits.end(), row.begin(), row.end());
        res.fraction_trace.push_back(frac);
    }
    return res;
}

}  // namespace nats
