#include "nats/harness.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>

#include "json.hpp"
#include "nats/checkpoint.hpp"
#include "nats/mask.hpp"

namespace nats {

namespace {

double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

void ensure_dir(const std::string &dir) {
    if (!dir.empty()) std::filesystem::create_directories(dir);
}

double mean_kv(const SparsityReport &rep) {
    if (rep.kv_fraction.empty()) return 1.0;
    return std::accumulate(rep.kv_fraction.begin(), rep.kv_fraction.end(), 0.0) /
           rep.kv_fraction.size();
}

}  // namespace

Trainer::Trainer(const ExperimentConfig &cfg, const ModelState *base)
    : state(base ? *base : init_model(cfg.model, cfg.train.seed)),
      cfg_(cfg),
      sampler_(cfg.task, cfg.model.vocab_size),
      opt_(state) {
    cfg_.validate();
    if (base) {
        // Distillation keeps the trunk; lambda/temperature follow the config.
        state.config.lambda = cfg.model.lambda;
        state.config.temperature = cfg.model.temperature;
        state.config.window = cfg.model.window;
    }
}

StepStats Trainer::step() {
    const Batch batch = sampler_.make_batch(
        cfg_.train.batch_size, Rng::mix(cfg_.train.seed, static_cast<uint64_t>(step_index_), 0xDA));
    StepStats stats;
    if (cfg_.train.mode == TrainConfig::Mode::Distill)
        stats = distill_step(state, opt_, batch, cfg_.train, step_index_);
    else
        stats = train_step(state, opt_, batch, cfg_.train, step_index_);
    ++step_index_;
    last_kv_fraction_ = mean_kv(stats.sparsity);
    last_stats_ = stats;
    return stats;
}

MetricRecord Trainer::record(const StepStats &stats, double wall_ms) const {
    MetricRecord r;
    r.step = step_index_ - 1;
    r.loss = stats.loss;
    r.perplexity = std::exp(stats.loss);
    r.kv_fraction = stats.sparsity.kv_fraction;
    r.role_fractions = stats.sparsity.role_fractions;
    r.wall_ms = wall_ms;
    return r;
}

static TrainResult run_training_loop(const ExperimentConfig &cfg, const std::string &out_dir,
                                     const ModelState *base) {
    ensure_dir(out_dir);
    Trainer trainer(cfg, base);
    std::unique_ptr<JsonlWriter> metrics;
    TrainResult res;
    if (!out_dir.empty()) {
        res.metrics_path = out_dir + "/metrics.jsonl";
        metrics = std::make_unique<JsonlWriter>(res.metrics_path);
    }

    const double t0 = now_ms();
    StepStats stats;
    for (int64_t i = 0; i < cfg.train.steps; ++i) {
        stats = trainer.step();
        if (metrics && (i % cfg.log_every == 0 || i == cfg.train.steps - 1))
            metrics->write(trainer.record(stats, now_ms() - t0));
    }

    res.final_loss = stats.loss;
    res.final_sparsity = stats.sparsity;
    if (!out_dir.empty()) {
        res.checkpoint_path = out_dir + "/checkpoint.bin";
        save_checkpoint(trainer.state, res.checkpoint_path, cfg.train.steps, cfg.train.seed);
        res.router_path = out_dir + "/routers.json";
        export_routers(trainer.state, res.router_path);
    }
    res.state = std::move(trainer.state);
    return res;
}

TrainResult run_train(const ExperimentConfig &cfg, const std::string &out_dir) {
    require(cfg.train.mode == TrainConfig::Mode::Scratch,
            "train: config mode is distill; use the distill command");
    return run_training_loop(cfg, out_dir, nullptr);
}

TrainResult run_distill(const ExperimentConfig &cfg, const ModelState &base,
                        const std::string &out_dir) {
    ExperimentConfig c = cfg;
    c.train.mode = TrainConfig::Mode::Distill;
    // The base trunk fixes the architecture.
    c.model = base.config;
    c.model.lambda = cfg.model.lambda;
    c.model.temperature = cfg.model.temperature;
    c.model.window = cfg.model.window;
    return run_training_loop(c, out_dir, &base);
}

EvalResult run_eval(const ModelState &state, const ExperimentConfig &cfg,
                    const CachePolicy &policy, std::optional<TokenRole> force_role) {
    TaskSampler sampler(cfg.task, state.config.vocab_size);
    const int n_seq = cfg.eval_batches * cfg.eval_batch_size;

    double loss_sum = 0;
    int64_t loss_count = 0;
    double frac_sum = 0;
    int64_t recall_hits = 0, recall_total = 0;

    for (int i = 0; i < n_seq; ++i) {
        const TaskInstance inst = sampler.sample(Rng::mix(cfg.train.seed, 0xE7A1, i));
        const DecodeEvalResult dec = decode_eval(state, inst.tokens, policy, force_role);
        const int L = static_cast<int>(inst.tokens.size());
        for (int t = 0; t < L; ++t) {
            if (!inst.loss_mask[t]) continue;
            const double *row = dec.logits.data() + static_cast<size_t>(t) * state.config.vocab_size;
            double mx = row[0];
            for (int w = 1; w < state.config.vocab_size; ++w) mx = std::max(mx, row[w]);
            double denom = 0;
            for (int w = 0; w < state.config.vocab_size; ++w) denom += std::exp(row[w] - mx);
            loss_sum += -(row[inst.targets[t]] - mx - std::log(denom));
            ++loss_count;
        }
        frac_sum += dec.fraction_trace.back();

        if (cfg.task.kind == TaskKind::Passkey) {
            const int K = cfg.task.passkey_key_len;
            const std::vector<int32_t> prompt(inst.tokens.begin(),
                                              inst.tokens.begin() + inst.query_pos + 1);
            const GenerateResult gen = generate(state, prompt, K, policy, force_role);
            bool hit = true;
            for (int j = 0; j < K; ++j)
                if (gen.tokens[prompt.size() + j] != inst.answer[j]) hit = false;
            recall_hits += hit ? 1 : 0;
            ++recall_total;
        }
    }

    EvalResult res;
    res.perplexity = std::exp(loss_sum / std::max<int64_t>(loss_count, 1));
    res.kv_fraction = frac_sum / n_seq;
    if (recall_total > 0) res.recall = static_cast<double>(recall_hits) / recall_total;
    return res;
}

std::vector<SweepRow> run_sweep(const ExperimentConfig &cfg, const std::vector<double> &lambdas,
                                const std::string &out_dir) {
    require(lambdas.size() >= 2, "sweep: need at least two lambda values");
    ensure_dir(out_dir);

    std::vector<SweepRow> rows;
    for (const double lambda : lambdas) {
        for (const uint64_t seed : cfg.sweep_seeds) {
            ExperimentConfig c = cfg;
            c.model.lambda = lambda;
            c.train.seed = seed;

            SweepRow row;
            row.lambda = lambda;
            row.seed = seed;

            Trainer trainer(c);
            int64_t done = 0;
            if (cfg.sweep_warmup_steps > 0 && cfg.sweep_warmup_steps < c.train.steps) {
                double kv_acc = 0;
                int64_t kv_n = 0;
                for (; done < cfg.sweep_warmup_steps; ++done) {
                    trainer.step();
                    if (done >= cfg.sweep_warmup_steps - 5) {
                        kv_acc += trainer.last_kv_fraction();
                        ++kv_n;
                    }
                }
                row.warmup_kv_fraction = kv_acc / std::max<int64_t>(kv_n, 1);
                if (row.warmup_kv_fraction < cfg.sweep_band_lo ||
                    row.warmup_kv_fraction > cfg.sweep_band_hi)
                    row.early_stopped = true;
            }
            if (!row.early_stopped)
                for (; done < c.train.steps; ++done) trainer.step();

            const EvalResult ev =
                run_eval(trainer.state, c, CachePolicy{CachePolicy::Kind::NAtS});
            row.perplexity = ev.perplexity;
            row.kv_fraction = ev.kv_fraction;
            rows.push_back(row);
        }
    }

    if (!out_dir.empty()) {
        std::vector<std::vector<std::string>> csv;
        for (const SweepRow &r : rows)
            csv.push_back({std::to_string(r.lambda), std::to_string(r.seed),
                           std::to_string(r.perplexity), std::to_string(r.kv_fraction),
                           r.early_stopped ? "1" : "0", std::to_string(r.warmup_kv_fraction)});
        write_csv(out_dir + "/sweep.csv",
                  {"lambda", "seed", "perplexity", "kv_fraction", "early_stopped",
                   "warmup_kv_fraction"},
                  csv);
    }
    return rows;
}

InspectResult run_inspect(const ModelState &state, const std::string &text,
                          const std::string &out_dir, std::optional<TokenRole> force_role) {
    require(!text.empty(), "inspect: empty input text");
    ensure_dir(out_dir);
    const ModelConfig &cfg = state.config;

    std::vector<int32_t> tokens;
    for (unsigned char c : text) tokens.push_back(static_cast<int32_t>(c) % cfg.vocab_size);
    const int L = std::min<int>(static_cast<int>(tokens.size()), cfg.max_seq_len);
    tokens.resize(L);

    RolePlan plan;
    if (force_role) {
        plan.mode = RolePlan::Mode::ForcedUniform;
        plan.uniform = *force_role;
    } else {
        plan.mode = RolePlan::Mode::Discretized;
    }
    const ForwardResult fwd = forward(state, tokens, 1, L, plan);

    InspectResult res;
    res.sparsity = fwd.sparsity;
    nlohmann::json summary;
    summary["seq_len"] = L;
    summary["window"] = cfg.window;
    summary["layers"] = nlohmann::json::array();

    for (int li = 0; li < cfg.n_layers; ++li) {
        const RoleSequence &roles = fwd.roles_per_layer[li][0];
        res.roles_per_layer.push_back(roles);
        const DenseMask mask = build_mask(roles, cfg.window);
        if (!out_dir.empty()) {
            for (int h = 0; h < cfg.n_heads; ++h) {
                std::ofstream mf(out_dir + "/mask_l" + std::to_string(li) + "_h" +
                                 std::to_string(h) + ".txt");
                mf << mask_to_text(mask, h);
            }
            std::ofstream sf(out_dir + "/mask_l" + std::to_string(li) + ".json");
            sf << mask_sidecar_json(roles, cfg.window) << "\n";
        }
        // Tile occupancy at the kernel tile size: how much the kernel skips.
        const BlockActivity act = build_block_activity(mask, cfg.tile, cfg.tile);
        int64_t skipped = 0, mixed = 0;
        for (BlockState s : act.state) {
            if (s == BlockState::AllZeros) ++skipped;
            if (s == BlockState::Mixed) ++mixed;
        }
        const auto &rf = fwd.sparsity.role_fractions[li];
        summary["layers"].push_back(
            {{"layer", li},
             {"role_fractions", {rf[0], rf[1], rf[2]}},
             {"kv_fraction", fwd.sparsity.kv_fraction[li]},
             {"block_stats",
              {{"total", static_cast<int64_t>(act.state.size())},
               {"skipped", skipped},
               {"mixed", mixed}}}});
    }
    res.summary_json = summary.dump(2);
    if (!out_dir.empty()) {
        std::ofstream sf(out_dir + "/summary.json");
        sf << res.summary_json << "\n";
    }
    return res;
}

std::vector<BenchRow> run_bench(const ModelState &state, const ExperimentConfig &cfg,
                                const std::vector<int> &lengths,
                                const std::vector<CachePolicy> &policies,
                                const std::string &csv_path,
                                std::optional<TokenRole> force_role) {
    require(!lengths.empty(), "bench: no lengths given");
    for (size_t i = 1; i < lengths.size(); ++i)
        require(lengths[i] > lengths[i - 1], "bench: lengths must be ascending");

    std::vector<BenchRow> rows;
    for (const int len : lengths) {
        // One seeded stream per length, shared across policies.
        Rng rng(Rng::mix(cfg.train.seed, 0xBE7C, len));
        std::vector<int32_t> stream(len);
        for (int32_t &t : stream)
            t = static_cast<int32_t>(rng.next_below(state.config.vocab_size));

        for (const CachePolicy &policy : policies) {
            const bool snapshots =
                policy.kind == CachePolicy::Kind::NAtS && !csv_path.empty();
            const GenerateResult gen =
                generate(state, stream, 0, policy, force_role, snapshots);
            if (snapshots) {
                const std::string dir =
                    std::filesystem::path(csv_path).parent_path().string();
                JsonlWriter snap((dir.empty() ? "." : dir) + "/snapshots_len" +
                                 std::to_string(len) + ".jsonl");
                for (const std::string &line : gen.snapshots) snap.write_line(line);
            }
            BenchRow row;
            row.length = len;
            row.policy = policy.to_string();
            row.steps_per_sec = gen.steps_per_sec;
            row.peak_cache_entries = gen.peak_entries;
            row.peak_ring_entries = gen.peak_ring_entries;
            rows.push_back(row);
        }
    }

    if (!csv_path.empty()) {
        std::vector<std::vector<std::string>> csv;
        for (const BenchRow &r : rows)
            csv.push_back({std::to_string(r.length), r.policy, std::to_string(r.steps_per_sec),
                           std::to_string(r.peak_cache_entries),
                           std::to_string(r.peak_ring_entries)});
        write_csv(csv_path,
                  {"length", "policy", "steps_per_sec", "peak_cache_entries",
                   "peak_ring_entries"},
                  csv);
    }
    return rows;
}

}  // namespace nats
