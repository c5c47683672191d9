#pragma once

#include <string>
#include <vector>

#include "nats/model.hpp"
#include "nats/tasks.hpp"

namespace nats {

// Whole-experiment configuration: one flat key = value text file, every key
// printable with its default via the print-config command.
struct ExperimentConfig {
    ModelConfig model;
    TrainConfig train;
    TaskSpec task;

    int64_t log_every = 50;
    int eval_batches = 8;
    int eval_batch_size = 8;

    // sweep
    std::vector<uint64_t> sweep_seeds = {1, 2, 3, 4, 5};
    int64_t sweep_warmup_steps = 0;       // 0 disables the early sparsity screen
    double sweep_band_lo = 0.0;           // accept warm-up KV fraction in [lo, hi]
    double sweep_band_hi = 1.0;

    // baseline policy defaults
    int streaming_sink = 4;
    int streaming_recent = 16;
    int h2o_budget = 16;
    int h2o_recent = 8;

    void set(const std::string &key, const std::string &value);
    void validate() const;
    std::string print() const;

    static ExperimentConfig from_file(const std::string &path);
};

std::vector<double> parse_double_list(const std::string &csv);
std::vector<int> parse_int_list(const std::string &csv);
std::vector<uint64_t> parse_u64_list(const std::string &csv);

}  // namespace nats
