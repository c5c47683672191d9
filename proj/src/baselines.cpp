#include "nats/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace nats {

CachePolicy CachePolicy::parse(const std::string &text) {
    CachePolicy p;
    auto split2 = [&](const std::string &args, int &a, int &b) {
        const auto comma = args.find(',');
        require(comma != std::string::npos, "policy: expected two comma-separated integers");
        a = std::stoi(args.substr(0, comma));
        b = std::stoi(args.substr(comma + 1));
    };
    if (text == "full") {
        p.kind = Kind::Full;
    } else if (text == "nats") {
        p.kind = Kind::NAtS;
    } else if (text.rfind("streaming:", 0) == 0) {
        p.kind = Kind::Streaming;
        split2(text.substr(10), p.sink_count, p.recent_count);
        require(p.sink_count >= 0 && p.recent_count >= 1, "policy: bad streaming parameters");
    } else if (text.rfind("h2o:", 0) == 0) {
        p.kind = Kind::H2OLite;
        split2(text.substr(4), p.budget, p.recent_count);
        require(p.budget >= 1, "policy: h2o budget must be >= 1");
        require(p.recent_count >= 1, "policy: h2o recent count must be >= 1");
    } else {
        throw std::invalid_argument("policy: unknown policy '" + text + "'");
    }
    return p;
}

std::string CachePolicy::to_string() const {
    switch (kind) {
        case Kind::Full: return "full";
        case Kind::NAtS: return "nats";
        case Kind::Streaming:
            return "streaming:" + std::to_string(sink_count) + "," + std::to_string(recent_count);
        case Kind::H2OLite:
            return "h2o:" + std::to_string(budget) + "," + std::to_string(recent_count);
    }
    return "?";
}

PolicyCache::PolicyCache(const CachePolicy &policy, int heads, int head_dim, int window)
    : policy_(policy), heads_(heads), head_dim_(head_dim) {
    if (policy.kind == CachePolicy::Kind::NAtS) {
        nats_ = make_cache(heads, head_dim, window);
    } else {
        entries_.resize(heads);
    }
}

void PolicyCache::evict(int h) {
    auto &list = entries_[h];
    const int64_t n = steps_ - 1;  // position of the token just inserted
    switch (policy_.kind) {
        case CachePolicy::Kind::Full:
            break;
        case CachePolicy::Kind::Streaming: {
            // Survivors at step n: {0 .. sink-1} and {n-recent .. n}.
            std::erase_if(list, [&](const Entry &e) {
                return e.pos >= policy_.sink_count &&
                       static_cast<int64_t>(e.pos) < n - policy_.recent_count;
            });
            break;
        }
        case CachePolicy::Kind::H2OLite: {
            // Tokens outside the recent window compete by accumulated score;
            // at most one enters the scored pool per step, so evicting the
            // minimum keeps the pool at the budget.
            while (true) {
                int victim = -1;
                int scored = 0;
                double lowest = std::numeric_limits<double>::infinity();
                for (size_t i = 0; i < list.size(); ++i) {
                    if (static_cast<int64_t>(list[i].pos) > n - policy_.recent_count) continue;
                    ++scored;
                    if (list[i].score < lowest) {
                        lowest = list[i].score;
                        victim = static_cast<int>(i);
                    }
                }
                if (scored <= policy_.budget) break;
                list.erase(list.begin() + victim);
            }
            break;
        }
        case CachePolicy::Kind::NAtS:
            break;
    }
}

std::vector<double> PolicyCache::step(const std::vector<double> &q, const std::vector<double> &k,
                                      const std::vector<double> &v,
                                      const std::vector<TokenRole> &roles,
                                      const std::vector<double> *injected_scores) {
    const size_t per_tok = static_cast<size_t>(heads_) * head_dim_;
    require(q.size() == per_tok && k.size() == per_tok && v.size() == per_tok,
            "PolicyCache::step: shape mismatch");
    ++steps_;

    if (nats_) {
        last_fraction_ = cache_fraction(*nats_, steps_);
        DecodeStepResult r = decode_step(*nats_, q, k, v, roles);
        for (int h = 0; h < heads_; ++h) {
            peak_entries_ = std::max<int64_t>(
                peak_entries_, nats_->ring_valid_count(h) + nats_->compacted_count(h));
            peak_ring_entries_ = std::max<int64_t>(peak_ring_entries_, nats_->ring_valid_count(h));
        }
        return std::move(r.out);
    }

    std::vector<double> out(per_tok, 0.0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim_));
    double applied = 0;

    for (int h = 0; h < heads_; ++h) {
        auto &list = entries_[h];
        const double *qp = q.data() + static_cast<size_t>(h) * head_dim_;
        const size_t inc = static_cast<size_t>(h) * head_dim_;

        std::vector<double> scores(list.size() + 1);
        for (size_t i = 0; i < list.size(); ++i) {
            double s = 0;
            for (int c = 0; c < head_dim_; ++c) s += qp[c] * list[i].k[c];
            scores[i] = s * scale;
        }
        {
            double s = 0;
            for (int c = 0; c < head_dim_; ++c) s += qp[c] * k[inc + c];
            scores.back() = s * scale;
        }

        double mx = -std::numeric_limits<double>::infinity();
        for (double s : scores) mx = std::max(mx, s);
        double denom = 0;
        for (double &s : scores) {
            s = std::exp(s - mx);
            denom += s;
        }
        for (double &s : scores) s /= denom;

        double *op = out.data() + inc;
        for (size_t i = 0; i < list.size(); ++i)
            for (int c = 0; c < head_dim_; ++c) op[c] += scores[i] * list[i].v[c];
        for (int c = 0; c < head_dim_; ++c) op[c] += scores.back() * v[inc + c];

        if (policy_.kind == CachePolicy::Kind::H2OLite) {
            const double *w = scores.data();
            if (injected_scores) {
                require(injected_scores->size() >= (static_cast<size_t>(h) + 1) * scores.size(),
                        "PolicyCache::step: injected score row too short");
                w = injected_scores->data() + static_cast<size_t>(h) * scores.size();
            }
            for (size_t i = 0; i < list.size(); ++i) list[i].score += w[i];
        }

        applied += static_cast<double>(scores.size()) / static_cast<double>(steps_);

        Entry e;
        e.pos = static_cast<int32_t>(steps_ - 1);
        if (policy_.kind == CachePolicy::Kind::H2OLite && injected_scores)
            e.score = (*injected_scores)[static_cast<size_t>(h) * scores.size() + list.size()];
        else if (policy_.kind == CachePolicy::Kind::H2OLite)
            e.score = scores.back();
        e.k.assign(k.begin() + inc, k.begin() + inc + head_dim_);
        e.v.assign(v.begin() + inc, v.begin() + inc + head_dim_);
        list.push_back(std::move(e));

        evict(h);
        peak_entries_ = std::max<int64_t>(peak_entries_, static_cast<int64_t>(list.size()));
    }
    last_fraction_ = applied / heads_;
    return out;
}

std::string PolicyCache::snapshot_json(int64_t step) const {
    if (!nats_) return "";
    return cache_snapshot_json(*nats_, step, std::max<int64_t>(steps_, 1));
}

std::vector<int32_t> PolicyCache::survivors(int h) const {
    std::vector<int32_t> pos;
    if (nats_) {
        for (int s = 0; s < nats_->window; ++s)
            if (nats_->sw_valid[static_cast<size_t>(s) * heads_ + h])
                pos.push_back(nats_->slot_pos[static_cast<size_t>(s) * heads_ + h]);
        for (int j = nats_->window; j < nats_->window + nats_->compacted_count(h); ++j)
            pos.push_back(nats_->slot_pos[static_cast<size_t>(j) * heads_ + h]);
    } else {
        for (const Entry &e : entries_[h]) pos.push_back(e.pos);
    }
    std::sort(pos.begin(), pos.end());
    return pos;
}

BaselineRunResult apply_baseline_policy(
    const CachePolicy &policy, int heads, int head_dim, int window,
    const std::vector<std::vector<double>> &qs, const std::vector<std::vector<double>> &ks,
    const std::vector<std::vector<double>> &vs, const RoleSequence *roles,
    const std::vector<std::vector<double>> *injected_scores) {
    require(qs.size() == ks.size() && ks.size() == vs.size(),
            "apply_baseline_policy: stream length mismatch");
    PolicyCache cache(policy, heads, head_dim, window);
    BaselineRunResult res;
    std::vector<TokenRole> step_roles(heads, TokenRole::Global);
    for (size_t t = 0; t < qs.size(); ++t) {
        if (roles)
            for (int h = 0; h < heads; ++h) step_roles[h] = roles->at(static_cast<int>(t), h);
        const std::vector<double> *inj =
            injected_scores ? &(*injected_scores)[t] : nullptr;
        res.outputs.push_back(cache.step(qs[t], ks[t], vs[t], step_roles, inj));
        res.fractions.push_back(cache.last_fraction());
    }
    for (int h = 0; h < heads; ++h) res.survivors.push_back(cache.survivors(h));
    return res;
}

}  // namespace nats
