#pragma once

#include <optional>
#include <vector>

#include "nats/common.hpp"
#include "nats/roles.hpp"

namespace nats {

// Per-attention-layer linear map from token features to role logits
// ("attention score layer"): logits[t][h][r] = x[t].weight[:, h*3+r] + bias.
struct RouterParams {
    int d_model = 0;
    int heads = 0;
    std::vector<double> weight;  // [d_model][heads * 3]
    std::vector<double> bias;    // [heads * 3]

    RouterParams() = default;
    RouterParams(int d_model_, int heads_)
        : d_model(d_model_),
          heads(heads_),
          weight(static_cast<size_t>(d_model_) * heads_ * kNumRoles, 0.0),
          bias(static_cast<size_t>(heads_) * kNumRoles, 0.0) {}

    size_t out_dim() const { return static_cast<size_t>(heads) * kNumRoles; }
};

// One Gumbel-Softmax draw: the hard argmax roles used by the forward pass and
// the soft probabilities (plus the noise that produced them) retained for the
// straight-through backward.
struct RoleSample {
    RoleSequence hard_roles;
    std::vector<double> soft_probs;    // [len][heads][3], rows sum to 1
    std::vector<double> gumbel_noise;  // [len][heads][3]
    double temperature = 1.0;
};

struct RouterGrads {
    std::vector<double> d_weight;  // [d_model][heads * 3]
    std::vector<double> d_bias;    // [heads * 3]
    std::vector<double> d_x;       // [len][d_model], filled only when requested
};

// logits[t][h][r], flattened [len][heads][3].
std::vector<double> router_score(const std::vector<double> &x, int len,
                                 const RouterParams &params);

// Gumbel-Softmax sample at the given temperature from a seeded stream.
// hard_roles are the per-(token, head) argmax of (logits + noise) / tau with
// ties broken toward the lowest role index.
RoleSample sample_roles(const std::vector<double> &logits, int len, int heads, double temperature,
                        uint64_t seed);

// Inference-time role assignment: plain argmax, same tie-break as sampling.
RoleSequence discretize(const std::vector<double> &logits, int len, int heads);

// Straight-through backward: the hard sample is bypassed and d_role flows
// through the softmax Jacobian of the retained soft probabilities,
// d_logits = J_softmax(p) . d_role / tau, then through the affine map.
RouterGrads backward_router(const std::vector<double> &d_role, const RoleSample &sample,
                            const std::vector<double> &x, const RouterParams &params,
                            bool want_dx = false);

}  // namespace nats
