#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "nats/attention.hpp"
#include "nats/baselines.hpp"
#include "nats/router.hpp"

namespace nats {

// Thrown when training hits a non-finite loss (CLI exit code 3).
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class PosEncoding { Rotary, Sinusoidal };

struct ModelConfig {
    int n_layers = 2;
    int n_heads = 2;
    int d_model = 64;
    int d_head = 32;
    int vocab_size = 256;
    int max_seq_len = 128;
    int window = 16;
    double lambda = 0.0;
    double temperature = 1.0;
    PosEncoding pos_encoding = PosEncoding::Rotary;
    int tile = 16;  // kernel block size, forward and backward

    int d_mlp() const { return 4 * d_model; }
    void validate() const;
};

struct LayerParams {
    RouterParams router;
    std::vector<double> wq, wk, wv, wo;  // [d_model][d_model]
    std::vector<double> bq, bk, bv, bo;  // [d_model]
    std::vector<double> w1;              // [d_model][4 d_model]
    std::vector<double> b1;              // [4 d_model]
    std::vector<double> w2;              // [4 d_model][d_model]
    std::vector<double> b2;              // [d_model]
    std::vector<double> norm1_g, norm2_g;  // [d_model]
};

// Decoder-only trunk: token embedding (tied output head), pre-norm blocks of
// role-routed attention + GELU MLP, final norm.
struct ModelState {
    ModelConfig config;
    std::vector<double> embedding;  // [vocab][d_model]
    std::vector<LayerParams> layers;
    std::vector<double> norm_f_g;  // [d_model]
};

ModelState init_model(const ModelConfig &config, uint64_t seed);

// Named view over every parameter tensor, in a stable order shared by the
// optimizer, the checkpoint format, and the finite-difference tests.
struct ParamView {
    std::string name;
    std::vector<double> *data;
    bool decay;  // weight decay applies (matrices only)
};
std::vector<ParamView> param_views(ModelState &state);

// How the per-layer roles are produced during a forward pass.
struct RolePlan {
    enum class Mode { Sampled, Discretized, ForcedUniform, ForcedExplicit };
    Mode mode = Mode::Sampled;
    TokenRole uniform = TokenRole::Global;
    const std::vector<RoleSequence> *explicit_roles = nullptr;  // [n_layers]
    uint64_t seed = 0;  // Sampled: base seed, split per (layer, item)
};

// Attention implementation selector. Kernel is the tiled role-masked path;
// PlainDense is an independent straight softmax trunk used as the dense
// baseline (no router, no masking machinery).
enum class AttnPath { Kernel, PlainDense };

struct LayerTrace {
    std::vector<double> x_in;    // [L][d_model], residual stream entering the block
    std::vector<double> x_norm;  // [L][d_model], router/QKV input
    std::vector<double> rms1, rms2;  // [L]
    RoleSample sample;           // retained when sampled
    RoleSequence roles;
    NextGlobalIndex next_global;
    AttnInputs<double> attn_in;      // post-rotary q/k and v
    AttnOutput<double> attn_out;
    std::vector<double> attn_sub_out;  // [L][d_model], after output projection
    std::vector<double> x_mid;         // [L][d_model], after attention residual
    std::vector<double> x_norm2;       // [L][d_model]
    std::vector<double> mlp_pre;       // [L][4 d_model]
    std::vector<double> plain_probs;   // [H][L][L], PlainDense path only
};

struct SparsityReport {
    // Per layer: mean fraction of each role over (batch, token, head), and the
    // projected fraction of KV entries still stored after the full sequence.
    std::vector<std::array<double, 3>> role_fractions;
    std::vector<double> kv_fraction;
};

SparsityReport sparsity_report(const std::vector<std::vector<RoleSequence>> &roles_per_layer,
                               int window);

struct ForwardResult {
    int batch = 0;
    int len = 0;
    std::vector<int32_t> tokens;  // copy of the input, for the embedding grad
    std::vector<double> logits;   // [batch][len][vocab]
    // Retained activations, [batch][n_layers]; empty unless keep_trace.
    std::vector<std::vector<LayerTrace>> traces;
    std::vector<std::vector<double>> x_final, x_final_norm;  // per item [L][d_model]
    std::vector<double> rms_f;                               // [batch][len]
    // roles_per_layer[layer][batch_item]
    std::vector<std::vector<RoleSequence>> roles_per_layer;
    SparsityReport sparsity;
};

ForwardResult forward(const ModelState &state, const std::vector<int32_t> &tokens, int batch,
                      int len, const RolePlan &plan, AttnPath path = AttnPath::Kernel,
                      bool keep_trace = false);

// Gradient accumulator mirroring param_views order.
struct ModelGrads {
    std::vector<std::vector<double>> tensors;
    void init_like(ModelState &state);
};

// Backward of forward() + cross-entropy given d_logits. lambda is injected
// into the role gradients inside the attention backward; router gradients are
// produced only where roles were sampled. Returns nothing; accumulates in g.
void backward(const ModelState &state, const ForwardResult &fwd,
              const std::vector<double> &d_logits, AttnPath path, double lambda,
              bool router_dx, ModelGrads &g);

struct TrainConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
    double grad_clip = 1.0;
    int batch_size = 8;
    int64_t steps = 1000;
    uint64_t seed = 1;
    enum class Mode { Scratch, Distill } mode = Mode::Scratch;
};

struct AdamW {
    explicit AdamW(ModelState &state);
    // Clips the global gradient norm, then applies decoupled-decay Adam.
    // `active`, when given, restricts the update to the flagged tensors.
    void step(ModelState &state, ModelGrads &grads, const TrainConfig &cfg,
              const std::vector<bool> *active = nullptr);
    int64_t t = 0;
    std::vector<std::vector<double>> m, v;
};

struct Batch {
    int batch = 0;
    int len = 0;
    std::vector<int32_t> tokens;   // [batch][len]
    std::vector<int32_t> targets;  // [batch][len]
    std::vector<uint8_t> loss_mask;  // [batch][len]
};

struct StepStats {
    double loss = 0.0;
    SparsityReport sparsity;
};

// One cross-entropy training step: sampled roles, lambda-augmented role
// gradients, global-norm clip, AdamW. lambda never enters the reported loss.
// plan_override replaces the default per-step sampling plan (tests force
// roles through it).
StepStats train_step(ModelState &state, AdamW &opt, const Batch &batch, const TrainConfig &cfg,
                     int64_t step_index, AttnPath path = AttnPath::Kernel,
                     const RolePlan *plan_override = nullptr);

// Router-only distillation against the model's own trunk run with full
// attention: per-layer MSE on the attention sublayer outputs. Only router
// parameters receive gradients.
StepStats distill_step(ModelState &state, AdamW &opt, const Batch &batch, const TrainConfig &cfg,
                       int64_t step_index, const RolePlan *plan_override = nullptr);

struct GenerateResult {
    std::vector<int32_t> tokens;            // prompt + generated
    std::vector<double> fraction_trace;     // per processed token, mean over layers
    std::vector<RoleSequence> roles_per_layer;  // accumulated decode-time roles
    int64_t peak_entries = 0;               // max stored entries per (layer, head)
    int64_t peak_ring_entries = 0;
    double steps_per_sec = 0.0;
    std::vector<std::string> snapshots;     // per-step cache JSON when requested
};

// Greedy decoding through per-layer policy caches. The NAtS policy routes
// every token with the argmax of its router logits and uses the role-aware
// cache; baselines use their own survivor rules. want_snapshots collects one
// layer-0 cache snapshot line per decode step (NAtS only).
GenerateResult generate(const ModelState &state, const std::vector<int32_t> &prompt, int n_new,
                        const CachePolicy &policy,
                        std::optional<TokenRole> force_role = std::nullopt,
                        bool want_snapshots = false);

// Teacher-forced decode of a full sequence under a policy cache: returns the
// logits at every position, for policy-restricted perplexity.
struct DecodeEvalResult {
    std::vector<double> logits;  // [len][vocab]
    std::vector<double> fraction_trace;
    std::vector<RoleSequence> roles_per_layer;
};
DecodeEvalResult decode_eval(const ModelState &state, const std::vector<int32_t> &tokens,
                             const CachePolicy &policy,
                             std::optional<TokenRole> force_role = std::nullopt);

// Mean cross-entropy of next-token prediction over masked positions.
double cross_entropy(const std::vector<double> &logits, const std::vector<int32_t> &targets,
                     const std::vector<uint8_t> &mask, int batch, int len, int vocab,
                     std::vector<double> *d_logits = nullptr);

}  // namespace nats
