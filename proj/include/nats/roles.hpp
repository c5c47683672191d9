#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nats/common.hpp"

namespace nats {

// The three token roles. A Global key stays visible to every later query, a
// Local key dies at the next Global token of the same head, a SlidingWindow
// key is visible to itself and the next `window` queries.
enum class TokenRole : uint8_t { Global = 0, Local = 1, SlidingWindow = 2 };

inline constexpr int kNumRoles = 3;

inline char role_letter(TokenRole r) {
    switch (r) {
        case TokenRole::Global: return 'G';
        case TokenRole::Local: return 'L';
        case TokenRole::SlidingWindow: return 'S';
    }
    return '?';
}

TokenRole role_from_letter(char c);

// Per-(token, head) role assignment for one sequence.
struct RoleSequence {
    int len = 0;
    int heads = 0;
    std::vector<TokenRole> roles;  // [len][heads]

    RoleSequence() = default;
    RoleSequence(int len_, int heads_, TokenRole fill = TokenRole::Global)
        : len(len_), heads(heads_), roles(static_cast<size_t>(len_) * heads_, fill) {}

    TokenRole &at(int t, int h) { return roles[static_cast<size_t>(t) * heads + h]; }
    TokenRole at(int t, int h) const { return roles[static_cast<size_t>(t) * heads + h]; }
};

// idx[t][h] = position of the first Global token at or after t in head h,
// or `len` when none exists (a trailing Local then survives to the end).
struct NextGlobalIndex {
    int len = 0;
    int heads = 0;
    std::vector<int32_t> idx;  // [len][heads]

    int32_t &at(int t, int h) { return idx[static_cast<size_t>(t) * heads + h]; }
    int32_t at(int t, int h) const { return idx[static_cast<size_t>(t) * heads + h]; }
};

NextGlobalIndex compute_next_global_index(const RoleSequence &roles);

}  // namespace nats
