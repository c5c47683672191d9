#include "nats/roles.hpp"

namespace nats {

TokenRole role_from_letter(char c) {
    switch (c) {
        case 'G': return TokenRole::Global;
        case 'L': return TokenRole::Local;
        case 'S': return TokenRole::SlidingWindow;
        default: throw std::invalid_argument(std::string("unknown role letter: ") + c);
    }
}

NextGlobalIndex compute_next_global_index(const RoleSequence &roles) {
    NextGlobalIndex out;
    out.len = roles.len;
    out.heads = roles.heads;
    out.idx.assign(static_cast<size_t>(roles.len) * roles.heads, roles.len);
    // Backward scan: idx[t] = t if t is Global, else idx[t + 1].
    for (int h = 0; h < roles.heads; ++h) {
        int32_t next = roles.len;
        for (int t = roles.len - 1; t >= 0; --t) {
            if (roles.at(t, h) == TokenRole::Global) next = t;
            out.at(t, h) = next;
        }
    }
    return out;
}

}  // namespace nats
