#pragma once

#include <optional>
#include <string>
#include <vector>

#include "nats/config.hpp"
#include "nats/metrics.hpp"

namespace nats {

// Step-by-step trainer shared by the train, distill and sweep commands.
// Deterministic given the config (data, init and role sampling all derive
// from train.seed).
class Trainer {
  public:
    Trainer(const ExperimentConfig &cfg, const ModelState *base = nullptr);

    StepStats step();
    int64_t steps_done() const { return step_index_; }
    MetricRecord record(const StepStats &stats, double wall_ms) const;
    // Mean projected KV fraction over layers of the most recent step.
    double last_kv_fraction() const { return last_kv_fraction_; }

    ModelState state;

  private:
    ExperimentConfig cfg_;
    TaskSampler sampler_;
    AdamW opt_;
    int64_t step_index_ = 0;
    double last_kv_fraction_ = 1.0;
    StepStats last_stats_;
};

struct TrainResult {
    ModelState state;
    double final_loss = 0.0;
    SparsityReport final_sparsity;
    std::string checkpoint_path, metrics_path, router_path;
};

// Full training run; writes metrics.jsonl, checkpoint.bin and routers.json
// under out_dir (pass "" to keep everything in memory).
TrainResult run_train(const ExperimentConfig &cfg, const std::string &out_dir);

// Router-only distillation starting from an existing trunk.
TrainResult run_distill(const ExperimentConfig &cfg, const ModelState &base,
                        const std::string &out_dir);

struct EvalResult {
    double perplexity = 0.0;
    double kv_fraction = 0.0;  // applied-entry fraction at the last token
    double recall = -1.0;      // passkey exact-match rate; -1 when not applicable
};

EvalResult run_eval(const ModelState &state, const ExperimentConfig &cfg,
                    const CachePolicy &policy,
                    std::optional<TokenRole> force_role = std::nullopt);

struct SweepRow {
    double lambda = 0.0;
    uint64_t seed = 0;
    double perplexity = 0.0;
    double kv_fraction = 0.0;
    double warmup_kv_fraction = -1.0;
    bool early_stopped = false;
};

// Trains one cell per (lambda, seed); the optional warm-up screen early-stops
// cells whose estimated KV fraction falls outside [sweep_band_lo, hi].
// Writes sweep.csv under out_dir when given. Requires >= 2 lambda values.
std::vector<SweepRow> run_sweep(const ExperimentConfig &cfg, const std::vector<double> &lambdas,
                                const std::string &out_dir);

struct InspectResult {
    std::vector<RoleSequence> roles_per_layer;
    SparsityReport sparsity;
    std::string summary_json;
};

// Routes a byte-tokenized text through the model and dumps per-(layer, head)
// mask grids plus JSON sidecars under out_dir.
InspectResult run_inspect(const ModelState &state, const std::string &text,
                          const std::string &out_dir,
                          std::optional<TokenRole> force_role = std::nullopt);

struct BenchRow {
    int length = 0;
    std::string policy;
    double steps_per_sec = 0.0;
    int64_t peak_cache_entries = 0;
    int64_t peak_ring_entries = 0;
};

// Decodes seeded random streams of each length under each policy. Lengths
// must be ascending. Timings are informational; entry counts are exact.
std::vector<BenchRow> run_bench(const ModelState &state, const ExperimentConfig &cfg,
                                const std::vector<int> &lengths,
                                const std::vector<CachePolicy> &policies,
                                const std::string &csv_path,
                                std::optional<TokenRole> force_role = std::nullopt);

}  // namespace nats
