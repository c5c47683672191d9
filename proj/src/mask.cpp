#include "nats/mask.hpp"

#include "json.hpp"

namespace nats {

DenseMask build_mask(const RoleSequence &roles, int window) {
    require(window >= 1, "build_mask: window must be >= 1");
    require(roles.len >= 1, "build_mask: empty sequence");
    const int L = roles.len;
    const int H = roles.heads;
    const NextGlobalIndex ng = compute_next_global_index(roles);

    DenseMask mask(L, L, H);
    for (int h = 0; h < H; ++h) {
        for (int k = 0; k < L; ++k) {
            // Last query row that can see key k.
            int top = 0;
            switch (roles.at(k, h)) {
                case TokenRole::Global: top = L - 1; break;
                case TokenRole::Local: top = std::min<int>(L - 1, ng.at(k, h)); break;
                case TokenRole::SlidingWindow: top = std::min(L - 1, k + window); break;
            }
            if (top < k) top = k;  // diagonal always unmasked
            for (int q = k; q <= top; ++q) mask.at(q, k, h) = 1;
        }
    }
    return mask;
}

double BlockActivity::skip_ratio() const {
    if (state.empty()) return 0.0;
    size_t zeros = 0;
    for (BlockState s : state)
        if (s == BlockState::AllZeros) ++zeros;
    return static_cast<double>(zeros) / static_cast<double>(state.size());
}

BlockActivity build_block_activity(const DenseMask &mask, int block_rows, int block_cols) {
    require(block_rows >= 1 && block_cols >= 1, "build_block_activity: block sizes must be >= 1");
    BlockActivity act;
    act.block_rows = block_rows;
    act.block_cols = block_cols;
    act.row_blocks = ceil_div(mask.len_q, block_rows);
    act.col_blocks = ceil_div(mask.len_k, block_cols);
    act.heads = mask.heads;
    act.state.assign(static_cast<size_t>(act.heads) * act.row_blocks * act.col_blocks,
                     BlockState::AllZeros);

    for (int h = 0; h < mask.heads; ++h) {
        for (int rb = 0; rb < act.row_blocks; ++rb) {
            const int q0 = rb * block_rows;
            const int q1 = std::min(mask.len_q, q0 + block_rows);
            for (int cb = 0; cb < act.col_blocks; ++cb) {
                const int k0 = cb * block_cols;
                const int k1 = std::min(mask.len_k, k0 + block_cols);
                bool any_one = false;
                bool any_zero = false;
                for (int q = q0; q < q1; ++q) {
                    for (int k = k0; k < k1; ++k) {
                        if (mask.at(q, k, h)) any_one = true;
                        else any_zero = true;
                    }
                }
                act.at(rb, cb, h) = !any_one    ? BlockState::AllZeros
                                    : any_zero  ? BlockState::Mixed
                                                : BlockState::AllOnes;
            }
        }
    }
    return act;
}

std::string mask_to_text(const DenseMask &mask, int head) {
    std::string out;
    out.reserve(static_cast<size_t>(mask.len_q) * (mask.len_k + 1));
    for (int q = 0; q < mask.len_q; ++q) {
        for (int k = 0; k < mask.len_k; ++k) out += mask.at(q, k, head) ? '1' : '0';
        out += '\n';
    }
    return out;
}

std::string mask_sidecar_json(const RoleSequence &roles, int window) {
    const NextGlobalIndex ng = compute_next_global_index(roles);
    nlohmann::json j;
    j["seq_len"] = roles.len;
    j["window"] = window;
    j["roles"] = nlohmann::json::array();
    j["next_global"] = nlohmann::json::array();
    for (int h = 0; h < roles.heads; ++h) {
        nlohmann::json r = nlohmann::json::array();
        nlohmann::json n = nlohmann::json::array();
        for (int t = 0; t < roles.len; ++t) {
            r.push_back(std::string(1, role_letter(roles.at(t, h))));
            n.push_back(ng.at(t, h));
        }
        j["roles"].push_back(std::move(r));
        j["next_global"].push_back(std::move(n));
    }
    return j.dump(2);
}

}  // namespace nats
