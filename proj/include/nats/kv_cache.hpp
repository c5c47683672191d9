#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nats/roles.hpp"

namespace nats {

// Per-(layer, sequence) KV store. Slots [0, window) form a ring buffer that
// always holds the last `window` tokens, masked per head to the sliding-window
// ones; slots [window, window + n_global[h] + n_local[h]) are the compacted
// region of head h, globals first, then the locals of the current
// sub-sequence. The ring tail advances once per appended token regardless of
// role. Compacted storage grows by doubling.
struct CacheState {
    int heads = 0;
    int head_dim = 0;
    int window = 0;
    int ring_tail = 0;
    int capacity = 0;            // total slots, >= window
    int32_t next_position = 0;   // tokens appended so far
    size_t max_entries = 0;      // 0 = unbounded; otherwise growth limit per head
    bool debug_zero_dead = false;

    std::vector<double> k_buf, v_buf;  // [capacity][heads][head_dim]
    std::vector<int32_t> slot_pos;     // [capacity][heads], token position or -1
    std::vector<uint8_t> sw_valid;     // [window][heads]
    std::vector<int32_t> n_global;     // [heads]
    std::vector<int32_t> n_local;      // [heads]

    size_t off(int slot, int h) const {
        return (static_cast<size_t>(slot) * heads + h) * head_dim;
    }
    int compacted_count(int h) const { return n_global[h] + n_local[h]; }
    int ring_valid_count(int h) const;
};

CacheState make_cache(int heads, int head_dim, int window, size_t max_entries = 0);

// Appends one token's KV per head: sliding-window tokens take the ring tail
// slot, globals land after the existing globals of their head and evict that
// head's locals, locals append to the local run. The old tail occupant is
// invalidated first.
void append_token(CacheState &state, const std::vector<double> &k, const std::vector<double> &v,
                  const std::vector<TokenRole> &roles);

struct DecodeStepResult {
    std::vector<double> out;            // [heads][head_dim]
    std::vector<int> attended_entries;  // per head, including the incoming token
};

// Masked softmax attention of the incoming token against the live cache plus
// itself, then append_token as the post-update.
DecodeStepResult decode_step(CacheState &state, const std::vector<double> &q,
                             const std::vector<double> &k, const std::vector<double> &v,
                             const std::vector<TokenRole> &roles);

// Fraction of emitted tokens whose KV entries are applied to the token being
// processed: mean over heads of (valid ring slots + n_global + n_local + 1)
// / total_emitted, evaluated on the pre-append state; the +1 is the in-flight
// token itself, which always attends to itself.
double cache_fraction(const CacheState &state, int64_t total_emitted);

// JSON snapshot {step, heads:[{n_global, n_local, ring_valid_count}], fraction}.
std::string cache_snapshot_json(const CacheState &state, int64_t step, int64_t total_emitted);

}  // namespace nats
