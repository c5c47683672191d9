#include "doctest.h"

#include "json.hpp"
#include "nats/mask.hpp"
#include "oracles.hpp"

using namespace nats;

namespace {

RoleSequence roles_from_letters(const std::string &letters, int heads = 1) {
    RoleSequence roles(static_cast<int>(letters.size()), heads);
    for (size_t t = 0; t < letters.size(); ++t)
        for (int h = 0; h < heads; ++h) roles.at(static_cast<int>(t), h) =
            role_from_letter(letters[t]);
    return roles;
}

// Figure-like 12-token layout: globals at 0,3,9; locals 1,5,6,7; the rest
// sliding-window.
RoleSequence figure_roles() { return roles_from_letters("GLSGSLLLSGSS"); }

}  // namespace

TEST_CASE("next global index follows the forward-scan definition") {
    const RoleSequence roles = roles_from_letters("GLSG");
    const NextGlobalIndex ng = compute_next_global_index(roles);
    CHECK(ng.at(0, 0) == 0);
    CHECK(ng.at(1, 0) == 3);
    CHECK(ng.at(2, 0) == 3);
    CHECK(ng.at(3, 0) == 3);
}

TEST_CASE("next global index of an all-global sequence is the identity") {
    const RoleSequence roles(7, 2, TokenRole::Global);
    const NextGlobalIndex ng = compute_next_global_index(roles);
    for (int t = 0; t < 7; ++t)
        for (int h = 0; h < 2; ++h) CHECK(ng.at(t, h) == t);
}

TEST_CASE("next global index: trailing locals hit the sentinel") {
    const RoleSequence roles = roles_from_letters("GLLL");
    const NextGlobalIndex ng = compute_next_global_index(roles);
    CHECK(ng.at(1, 0) == 4);
    CHECK(ng.at(3, 0) == 4);
}

TEST_CASE("figure layout: next global after token 5 is token 9") {
    const NextGlobalIndex ng = compute_next_global_index(figure_roles());
    CHECK(ng.at(5, 0) == 9);
}

TEST_CASE("brute-force scan agrees with compute_next_global_index") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const int L = 1 + static_cast<int>(rng.next_below(40));
        const int H = 1 + static_cast<int>(rng.next_below(4));
        const RoleSequence roles = oracles::random_roles(L, H, rng);
        const NextGlobalIndex ng = compute_next_global_index(roles);
        for (int t = 0; t < L; ++t) {
            for (int h = 0; h < H; ++h) {
                int expected = L;
                for (int k = t; k < L; ++k) {
                    if (roles.at(k, h) == TokenRole::Global) {
                        expected = k;
                        break;
                    }
                }
                CHECK(ng.at(t, h) == expected);
            }
        }
    }
}

TEST_CASE("all-global roles give the full causal mask") {
    const RoleSequence roles(9, 1, TokenRole::Global);
    const DenseMask mask = build_mask(roles, 3);
    for (int q = 0; q < 9; ++q)
        for (int k = 0; k < 9; ++k) CHECK(mask.at(q, k, 0) == (k <= q ? 1 : 0));
}

TEST_CASE("all sliding-window roles with a window covering the sequence") {
    const RoleSequence roles(8, 1, TokenRole::SlidingWindow);
    const DenseMask mask = build_mask(roles, 8);
    for (int q = 0; q < 8; ++q)
        for (int k = 0; k < 8; ++k) CHECK(mask.at(q, k, 0) == (k <= q ? 1 : 0));
}

TEST_CASE("figure layout with window 3: six active keys at the last row") {
    const DenseMask mask = build_mask(figure_roles(), 3);
    std::vector<int> active;
    for (int k = 0; k < 12; ++k)
        if (mask.at(11, k, 0)) active.push_back(k);
    CHECK(active == std::vector<int>{0, 3, 8, 9, 10, 11});
}

TEST_CASE("window zero is rejected") {
    const RoleSequence roles(4, 1, TokenRole::SlidingWindow);
    CHECK_THROWS_AS(build_mask(roles, 0), std::invalid_argument);
}

TEST_CASE("mask equals the entry-wise oracle on random configurations") {
    Rng rng(11);
    for (int trial = 0; trial < 60; ++trial) {
        const int L = 1 + static_cast<int>(rng.next_below(64));
        const int H = 1 + static_cast<int>(rng.next_below(4));
        const int W = 1 + static_cast<int>(rng.next_below(12));
        const RoleSequence roles = oracles::random_roles(L, H, rng);
        const DenseMask mask = build_mask(roles, W);
        for (int h = 0; h < H; ++h)
            for (int q = 0; q < L; ++q)
                for (int k = 0; k < L; ++k)
                    REQUIRE(mask.at(q, k, h) == oracles::mask_entry(roles, W, q, k, h));
    }
}

TEST_CASE("promoting a local token to global never clears mask entries") {
    Rng rng(13);
    for (int trial = 0; trial < 40; ++trial) {
        const int L = 2 + static_cast<int>(rng.next_below(24));
        const int W = 1 + static_cast<int>(rng.next_below(6));
        RoleSequence roles = oracles::random_roles(L, 1, rng);
        const int t = static_cast<int>(rng.next_below(L));
        if (roles.at(t, 0) != TokenRole::Local) continue;
        const DenseMask lo = build_mask(roles, W);
        roles.at(t, 0) = TokenRole::Global;
        const DenseMask hi = build_mask(roles, W);
        for (int q = 0; q < L; ++q) REQUIRE(hi.at(q, t, 0) >= lo.at(q, t, 0));
    }
}

TEST_CASE("promoting sliding-window to local grows the column while the sub-sequence covers it") {
    // The unconditional claim is false: a Local token dies at the next global,
    // which can be closer than the window. Promotion grows the column exactly
    // when the next global is at least window steps away.
    Rng rng(14);
    int checked = 0;
    for (int trial = 0; trial < 400; ++trial) {
        const int L = 2 + static_cast<int>(rng.next_below(24));
        const int W = 1 + static_cast<int>(rng.next_below(6));
        RoleSequence roles = oracles::random_roles(L, 1, rng);
        const int t = static_cast<int>(rng.next_below(L));
        if (roles.at(t, 0) != TokenRole::SlidingWindow) continue;
        const NextGlobalIndex ng = compute_next_global_index(roles);
        if (ng.at(t, 0) < t + W) continue;
        const DenseMask lo = build_mask(roles, W);
        roles.at(t, 0) = TokenRole::Local;
        const DenseMask hi = build_mask(roles, W);
        for (int q = 0; q < L; ++q) REQUIRE(hi.at(q, t, 0) >= lo.at(q, t, 0));
        ++checked;
    }
    CHECK(checked > 10);
}

TEST_CASE("mask grows pointwise with the window") {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        const int L = 2 + static_cast<int>(rng.next_below(24));
        const int W = 1 + static_cast<int>(rng.next_below(6));
        const RoleSequence roles = oracles::random_roles(L, 1, rng);
        const DenseMask lo = build_mask(roles, W);
        const DenseMask hi = build_mask(roles, W + 1);
        for (size_t i = 0; i < lo.m.size(); ++i) REQUIRE(hi.m[i] >= lo.m[i]);
    }
}

TEST_CASE("sink globals plus sliding-window tail reproduce the streaming mask") {
    const int L = 20, W = 4, sinks = 3;
    RoleSequence roles(L, 1, TokenRole::SlidingWindow);
    for (int t = 0; t < sinks; ++t) roles.at(t, 0) = TokenRole::Global;
    const DenseMask mask = build_mask(roles, W);
    for (int q = 0; q < L; ++q)
        for (int k = 0; k < L; ++k) {
            const int streaming = (k <= q && (k < sinks || q <= k + W)) ? 1 : 0;
            REQUIRE(mask.at(q, k, 0) == streaming);
        }
}

TEST_CASE("a full causal mask in one block is Mixed") {
    const RoleSequence roles(6, 1, TokenRole::Global);
    const DenseMask mask = build_mask(roles, 2);
    const BlockActivity act = build_block_activity(mask, 6, 6);
    CHECK(act.row_blocks == 1);
    CHECK(act.col_blocks == 1);
    CHECK(act.at(0, 0, 0) == BlockState::Mixed);
}

TEST_CASE("narrow window leaves the lower-left blocks empty") {
    const RoleSequence roles(8, 1, TokenRole::SlidingWindow);
    const DenseMask mask = build_mask(roles, 1);
    const BlockActivity act = build_block_activity(mask, 2, 2);
    for (int rb = 0; rb < act.row_blocks; ++rb)
        for (int cb = 0; cb < act.col_blocks; ++cb) {
            if (rb > cb + 1) CHECK(act.at(rb, cb, 0) == BlockState::AllZeros);
        }
    CHECK(act.skip_ratio() > 0.0);
}

TEST_CASE("block classification matches a per-entry scan on the figure mask") {
    const DenseMask mask = build_mask(figure_roles(), 3);
    const BlockActivity act = build_block_activity(mask, 4, 4);
    for (int rb = 0; rb < act.row_blocks; ++rb) {
        for (int cb = 0; cb < act.col_blocks; ++cb) {
            bool any_one = false, any_zero = false;
            for (int q = rb * 4; q < std::min(12, rb * 4 + 4); ++q)
                for (int k = cb * 4; k < std::min(12, cb * 4 + 4); ++k) {
                    if (mask.at(q, k, 0)) any_one = true;
                    else any_zero = true;
                }
            const BlockState expected = !any_one   ? BlockState::AllZeros
                                        : any_zero ? BlockState::Mixed
                                                   : BlockState::AllOnes;
            CHECK(act.at(rb, cb, 0) == expected);
        }
    }
}

TEST_CASE("fully active below-diagonal blocks classify as AllOnes") {
    const RoleSequence roles(6, 1, TokenRole::Global);
    const BlockActivity act = build_block_activity(build_mask(roles, 1), 2, 2);
    CHECK(act.at(1, 0, 0) == BlockState::AllOnes);
    CHECK(act.at(2, 0, 0) == BlockState::AllOnes);
    CHECK(act.at(0, 0, 0) == BlockState::Mixed);  // straddles the diagonal
    CHECK(act.at(0, 2, 0) == BlockState::AllZeros);
}

TEST_CASE("mask dump grid and sidecar are well-formed") {
    const RoleSequence roles = figure_roles();
    const DenseMask mask = build_mask(roles, 3);
    const std::string grid = mask_to_text(mask, 0);
    CHECK(grid.size() == 12 * 13);  // 12 rows of 12 chars + newlines
    CHECK(grid.substr(0, 13) == "100000000000\n");

    const auto j = nlohmann::json::parse(mask_sidecar_json(roles, 3));
    CHECK(j["seq_len"] == 12);
    CHECK(j["window"] == 3);
    CHECK(j["roles"][0].size() == 12);
    CHECK(j["roles"][0][0] == "G");
    CHECK(j["next_global"][0][5] == 9);
}
