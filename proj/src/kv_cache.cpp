#include "nats/kv_cache.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "json.hpp"

namespace nats {

int CacheState::ring_valid_count(int h) const {
    int n = 0;
    for (int s = 0; s < window; ++s)
        if (sw_valid[static_cast<size_t>(s) * heads + h]) ++n;
    return n;
}

CacheState make_cache(int heads, int head_dim, int window, size_t max_entries) {
    require(heads >= 1 && head_dim >= 1, "make_cache: bad shape");
    require(window >= 1, "make_cache: window must be >= 1");
    CacheState s;
    s.heads = heads;
    s.head_dim = head_dim;
    s.window = window;
    s.capacity = window + 8;
    s.max_entries = max_entries;
    const size_t n = static_cast<size_t>(s.capacity) * heads * head_dim;
    s.k_buf.assign(n, 0.0);
    s.v_buf.assign(n, 0.0);
    s.slot_pos.assign(static_cast<size_t>(s.capacity) * heads, -1);
    s.sw_valid.assign(static_cast<size_t>(window) * heads, 0);
    s.n_global.assign(heads, 0);
    s.n_local.assign(heads, 0);
    return s;
}

static void grow(CacheState &s, int needed_slots) {
    if (needed_slots <= s.capacity) return;
    if (s.max_entries != 0 &&
        static_cast<size_t>(needed_slots) > s.max_entries + static_cast<size_t>(s.window))
        throw std::runtime_error("kv cache: compacted region capacity exhausted");
    int cap = s.capacity;
    while (cap < needed_slots) cap *= 2;
    const size_t n = static_cast<size_t>(cap) * s.heads * s.head_dim;
    s.k_buf.resize(n, 0.0);
    s.v_buf.resize(n, 0.0);
    s.slot_pos.resize(static_cast<size_t>(cap) * s.heads, -1);
    s.capacity = cap;
}

static void kill_slot(CacheState &s, int slot, int h) {
    s.slot_pos[static_cast<size_t>(slot) * s.heads + h] = -1;
    if (s.debug_zero_dead) {
        const size_t base = s.off(slot, h);
        std::fill_n(s.k_buf.begin() + base, s.head_dim, 0.0);
        std::fill_n(s.v_buf.begin() + base, s.head_dim, 0.0);
    }
}

void append_token(CacheState &state, const std::vector<double> &k, const std::vector<double> &v,
                  const std::vector<TokenRole> &roles) {
    const size_t per_tok = static_cast<size_t>(state.heads) * state.head_dim;
    require(k.size() == per_tok && v.size() == per_tok, "append_token: kv shape mismatch");
    require(roles.size() == static_cast<size_t>(state.heads), "append_token: roles size mismatch");

    const int32_t pos = state.next_position++;

    int max_compacted = 0;
    for (int h = 0; h < state.heads; ++h)
        max_compacted = std::max(max_compacted, state.compacted_count(h) + 1);
    grow(state, state.window + max_compacted);

    for (int h = 0; h < state.heads; ++h) {
        // The ring tail's previous occupant is now older than `window` steps.
        state.sw_valid[static_cast<size_t>(state.ring_tail) * state.heads + h] = 0;
        kill_slot(state, state.ring_tail, h);

        int slot;
        switch (roles[h]) {
            case TokenRole::Global: {
                slot = state.window + state.n_global[h];
                // Locals of this head die with the new global; the first one's
                // slot is overwritten by it below.
                for (int j = slot + 1; j < state.window + state.compacted_count(h); ++j)
                    kill_slot(state, j, h);
                state.n_global[h] += 1;
                state.n_local[h] = 0;
                break;
            }
            case TokenRole::Local: {
                slot = state.window + state.compacted_count(h);
                state.n_local[h] += 1;
                break;
            }
            case TokenRole::SlidingWindow:
            default: {
                slot = state.ring_tail;
                state.sw_valid[static_cast<size_t>(slot) * state.heads + h] = 1;
                break;
            }
        }
        const size_t dst = state.off(slot, h);
        const size_t src = static_cast<size_t>(h) * state.head_dim;
        std::copy_n(k.begin() + src, state.head_dim, state.k_buf.begin() + dst);
        std::copy_n(v.begin() + src, state.head_dim, state.v_buf.begin() + dst);
        state.slot_pos[static_cast<size_t>(slot) * state.heads + h] = pos;
    }
    state.ring_tail = (state.ring_tail + 1) % state.window;
}

DecodeStepResult decode_step(CacheState &state, const std::vector<double> &q,
                             const std::vector<double> &k, const std::vector<double> &v,
                             const std::vector<TokenRole> &roles) {
    const size_t per_tok = static_cast<size_t>(state.heads) * state.head_dim;
    require(q.size() == per_tok, "decode_step: q shape mismatch");

    DecodeStepResult res;
    res.out.assign(per_tok, 0.0);
    res.attended_entries.assign(state.heads, 0);

    const double scale = 1.0 / std::sqrt(static_cast<double>(state.head_dim));
    std::vector<double> scores;
    std::vector<size_t> offs;

    for (int h = 0; h < state.heads; ++h) {
        scores.clear();
        offs.clear();
        const double *qp = q.data() + static_cast<size_t>(h) * state.head_dim;

        auto push = [&](const double *kp, size_t voff) {
            double s = 0;
            for (int c = 0; c < state.head_dim; ++c) s += qp[c] * kp[c];
            scores.push_back(s * scale);
            offs.push_back(voff);
        };

        for (int s = 0; s < state.window; ++s)
            if (state.sw_valid[static_cast<size_t>(s) * state.heads + h])
                push(state.k_buf.data() + state.off(s, h), state.off(s, h));
        for (int j = state.window; j < state.window + state.compacted_count(h); ++j)
            push(state.k_buf.data() + state.off(j, h), state.off(j, h));

        // Incoming token: always attends to itself.
        const size_t inc = static_cast<size_t>(h) * state.head_dim;
        push(k.data() + inc, std::numeric_limits<size_t>::max());

        double mx = -std::numeric_limits<double>::infinity();
        for (double s : scores) mx = std::max(mx, s);
        double denom = 0;
        for (double &s : scores) {
            s = std::exp(s - mx);
            denom += s;
        }
        double *op = res.out.data() + inc;
        for (size_t i = 0; i < scores.size(); ++i) {
            const double w = scores[i] / denom;
            const double *vp = offs[i] == std::numeric_limits<size_t>::max()
                                   ? v.data() + inc
                                   : state.v_buf.data() + offs[i];
            for (int c = 0; c < state.head_dim; ++c) op[c] += w * vp[c];
        }
        res.attended_entries[h] = static_cast<int>(scores.size());
    }

    append_token(state, k, v, roles);
    return res;
}

double cache_fraction(const CacheState &state, int64_t total_emitted) {
    require(total_emitted >= 1, "cache_fraction: total_emitted must be >= 1");
    double acc = 0;
    for (int h = 0; h < state.heads; ++h)
        acc += static_cast<double>(state.ring_valid_count(h) + state.compacted_count(h) + 1) /
               static_cast<double>(total_emitted);
    return acc / state.heads;
}

std::string cache_snapshot_json(const CacheState &state, int64_t step, int64_t total_emitted) {
    nlohmann::json j;
    j["step"] = step;
    j["heads"] = nlohmann::json::array();
    for (int h = 0; h < state.heads; ++h)
        j["heads"].push_back({{"n_global", state.n_global[h]},
                              {"n_local", state.n_local[h]},
                              {"ring_valid_count", state.ring_valid_count(h)}});
    j["fraction"] = cache_fraction(state, total_emitted);
    return j.dump();
}

}  // namespace nats
