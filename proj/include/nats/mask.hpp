#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nats/roles.hpp"

namespace nats {

// Multiplicative 0/1 attention mask, indexed (query row, key column).
// Each key column is fully determined by the key's role, the window size and
// the next-global index; the upper triangle (k > q) is always zero.
struct DenseMask {
    int len_q = 0;
    int len_k = 0;
    int heads = 0;
    std::vector<uint8_t> m;  // [heads][len_q][len_k]

    DenseMask() = default;
    DenseMask(int lq, int lk, int h)
        : len_q(lq), len_k(lk), heads(h), m(static_cast<size_t>(h) * lq * lk, 0) {}

    uint8_t &at(int q, int k, int h) {
        return m[(static_cast<size_t>(h) * len_q + q) * len_k + k];
    }
    uint8_t at(int q, int k, int h) const {
        return m[(static_cast<size_t>(h) * len_q + q) * len_k + k];
    }
};

// Builds the causal mask implied by a role assignment. Key column k of head h
// is, over rows q >= k: all ones for Global, ones while q <= next_global(k)
// for Local, ones while q <= k + window for SlidingWindow. The diagonal is
// always one. window must be >= 1.
DenseMask build_mask(const RoleSequence &roles, int window);

enum class BlockState : uint8_t { AllZeros = 0, Mixed = 1, AllOnes = 2 };

// Per-tile occupancy summary of a DenseMask. A block with no 1-entry is
// AllZeros (and can be skipped by the kernel); a block that is entirely ones
// is AllOnes (no masking work at all); everything else is Mixed. Blocks
// straddling the diagonal are therefore Mixed even when their causal region
// is fully active.
struct BlockActivity {
    int row_blocks = 0;
    int col_blocks = 0;
    int heads = 0;
    int block_rows = 0;
    int block_cols = 0;
    std::vector<BlockState> state;  // [heads][row_blocks][col_blocks]

    BlockState &at(int rb, int cb, int h) {
        return state[(static_cast<size_t>(h) * row_blocks + rb) * col_blocks + cb];
    }
    BlockState at(int rb, int cb, int h) const {
        return state[(static_cast<size_t>(h) * row_blocks + rb) * col_blocks + cb];
    }

    // Fraction of AllZeros blocks: the kernel's skip ratio.
    double skip_ratio() const;
};

BlockActivity build_block_activity(const DenseMask &mask, int block_rows, int block_cols);

// Text grid of 0/1 characters for one head, rows = queries.
std::string mask_to_text(const DenseMask &mask, int head);

// JSON sidecar {seq_len, window, roles[], next_global[]} for the inspect CLI;
// roles and next_global hold one array per head.
std::string mask_sidecar_json(const RoleSequence &roles, int window);

}  // namespace nats
