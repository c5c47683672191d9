#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "nats/kv_cache.hpp"
#include "nats/roles.hpp"

namespace nats {

// Inference-time cache policy. NAtS routes by token role; the baselines are
// role-free comparison policies.
struct CachePolicy {
    enum class Kind { NAtS, Full, Streaming, H2OLite };
    Kind kind = Kind::NAtS;
    int sink_count = 0;     // Streaming: earliest tokens kept forever
    int recent_count = 0;   // Streaming / H2OLite: latest tokens kept
    int budget = 0;         // H2OLite: scored tokens kept outside the recent set

    // "full" | "nats" | "streaming:<sink>,<recent>" | "h2o:<budget>,<recent>"
    static CachePolicy parse(const std::string &text);
    std::string to_string() const;
};

// One decode-time cache for one attention layer under a fixed policy. The
// NAtS kind wraps CacheState; the baselines keep explicit survivor lists per
// head. Every step attends over the survivors plus the incoming token.
class PolicyCache {
  public:
    PolicyCache(const CachePolicy &policy, int heads, int head_dim, int window);

    // Per-head attention output of the incoming token, then cache update.
    // injected_scores, when given, replace the computed softmax weights for
    // H2OLite score accumulation; laid out per head as one weight per
    // attended entry in survivor order followed by the incoming token.
    std::vector<double> step(const std::vector<double> &q, const std::vector<double> &k,
                             const std::vector<double> &v, const std::vector<TokenRole> &roles,
                             const std::vector<double> *injected_scores = nullptr);

    // Applied-entry fraction of the most recent step.
    double last_fraction() const { return last_fraction_; }
    // Peak stored entries over the run, max over heads.
    int64_t peak_entries() const { return peak_entries_; }
    // Peak valid ring entries (NAtS only; 0 otherwise).
    int64_t peak_ring_entries() const { return peak_ring_entries_; }
    // Stored token positions of head h, ascending (survivor set).
    std::vector<int32_t> survivors(int h) const;

    // Cache snapshot line for the NAtS kind; empty for baselines.
    std::string snapshot_json(int64_t step) const;

    const CachePolicy &policy() const { return policy_; }

  private:
    struct Entry {
        int32_t pos;
        double score = 0.0;  // accumulated attention mass (H2OLite)
        std::vector<double> k, v;
    };

    void evict(int h);

    CachePolicy policy_;
    int heads_;
    int head_dim_;
    int64_t steps_ = 0;
    double last_fraction_ = 0.0;
    int64_t peak_entries_ = 0;
    int64_t peak_ring_entries_ = 0;
    std::vector<std::vector<Entry>> entries_;  // [heads][...], baseline kinds
    std::optional<CacheState> nats_;           // NAtS kind
};

struct BaselineRunResult {
    std::vector<std::vector<double>> outputs;  // per step, [heads][head_dim]
    std::vector<double> fractions;             // per step
    std::vector<std::vector<int32_t>> survivors;  // per head, final positions
};

// Runs a whole (q, k, v) stream through a fresh PolicyCache. qkv are
// [steps][heads][head_dim]; roles may be empty for baseline policies.
// injected_scores, if present, holds one score row per step (see step()).
BaselineRunResult apply_baseline_policy(
    const CachePolicy &policy, int heads, int head_dim, int window,
    const std::vector<std::vector<double>> &qs, const std::vector<std::vector<double>> &ks,
    const std::vector<std::vector<double>> &vs, const RoleSequence *roles = nullptr,
    const std::vector<std::vector<double>> *injected_scores = nullptr);

}  // namespace nats
