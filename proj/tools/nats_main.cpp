// Command-line front end: train / eval / sweep / distill / inspect / bench /
// print-config. Exit codes: 0 success, 2 config error, 3 numeric failure.

#include <filesystem>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "nats/checkpoint.hpp"
#include "nats/harness.hpp"

namespace {

using namespace nats;

struct CommonArgs {
    std::string config_path;
    std::string out_dir = "out";
    std::string checkpoint_path;
    std::string policy = "nats";
    std::string force_role;
    std::string lambda_csv;
    std::string lengths_csv = "32,64,128";
    std::string text;
    uint64_t seed = 0;
    bool seed_set = false;
    double lambda_override = 0.0;
    bool lambda_set = false;
};

ExperimentConfig load_config(const CommonArgs &args) {
    ExperimentConfig cfg;
    if (!args.config_path.empty()) cfg = ExperimentConfig::from_file(args.config_path);
    if (args.seed_set) cfg.train.seed = args.seed;
    if (args.lambda_set) cfg.model.lambda = args.lambda_override;
    cfg.validate();
    return cfg;
}

std::optional<TokenRole> parse_force_role(const std::string &s) {
    if (s.empty()) return std::nullopt;
    if (s == "global") return TokenRole::Global;
    if (s == "local") return TokenRole::Local;
    if (s == "sw") return TokenRole::SlidingWindow;
    throw std::invalid_argument("--force-role must be global, local or sw");
}

CachePolicy resolve_policy(const std::string &text, const ExperimentConfig &cfg) {
    if (text == "streaming") {
        CachePolicy p;
        p.kind = CachePolicy::Kind::Streaming;
        p.sink_count = cfg.streaming_sink;
        p.recent_count = cfg.streaming_recent;
        return p;
    }
    if (text == "h2o") {
        CachePolicy p;
        p.kind = CachePolicy::Kind::H2OLite;
        p.budget = cfg.h2o_budget;
        p.recent_count = cfg.h2o_recent;
        return p;
    }
    return CachePolicy::parse(text);
}

int run(int argc, char **argv) {
    CLI::App app{"learned token-role sparse attention workbench"};
    app.require_subcommand(1);

    CommonArgs args;
    auto add_common = [&](CLI::App *cmd, bool with_ckpt) {
        cmd->add_option("--config", args.config_path, "config file (key = value lines)");
        cmd->add_option("--out", args.out_dir, "output directory");
        cmd->add_option_function<uint64_t>(
            "--seed", [&](uint64_t v) { args.seed = v; args.seed_set = true; }, "seed override");
        if (with_ckpt)
            cmd->add_option("--checkpoint", args.checkpoint_path, "model checkpoint")->required();
    };

    CLI::App *train = app.add_subcommand("train", "train a model from scratch");
    add_common(train, false);
    train->add_option_function<double>(
        "--lambda", [&](double v) { args.lambda_override = v; args.lambda_set = true; },
        "sparsity regularizer override");

    CLI::App *evalc = app.add_subcommand("eval", "evaluate a checkpoint under a cache policy");
    add_common(evalc, true);
    evalc->add_option("--policy", args.policy, "full|nats|streaming:s,r|h2o:b,r");
    evalc->add_option("--force-role", args.force_role, "route every token as global|local|sw");

    CLI::App *sweep = app.add_subcommand("sweep", "train over a lambda list and tabulate");
    add_common(sweep, false);
    sweep->add_option("--lambda", args.lambda_csv, "comma-separated lambda list")->required();

    CLI::App *distill = app.add_subcommand("distill", "router-only distillation of a trunk");
    add_common(distill, true);
    distill->add_option_function<double>(
        "--lambda", [&](double v) { args.lambda_override = v; args.lambda_set = true; },
        "sparsity regularizer override");

    CLI::App *inspect = app.add_subcommand("inspect", "dump masks and roles for a text");
    add_common(inspect, true);
    inspect->add_option("--text", args.text, "input text (byte-tokenized)")->required();
    inspect->add_option("--force-role", args.force_role, "route every token as global|local|sw");

    CLI::App *bench = app.add_subcommand("bench", "decode throughput and cache occupancy");
    add_common(bench, true);
    bench->add_option("--lengths", args.lengths_csv, "comma-separated ascending lengths");
    bench->add_option("--policy", args.policy,
                      "restrict to one policy (default: all four)");
    bench->add_option("--force-role", args.force_role, "route every token as global|local|sw");

    CLI::App *printc = app.add_subcommand("print-config", "print the effective configuration");
    printc->add_option("--config", args.config_path, "config file (key = value lines)");

    CLI11_PARSE(app, argc, argv);

    if (printc->parsed()) {
        std::cout << load_config(args).print();
        return 0;
    }

    const ExperimentConfig cfg = load_config(args);

    if (train->parsed()) {
        const TrainResult res = run_train(cfg, args.out_dir);
        std::cout << "final_loss " << res.final_loss << "\ncheckpoint " << res.checkpoint_path
                  << "\nmetrics " << res.metrics_path << "\n";
        return 0;
    }

    if (sweep->parsed()) {
        const std::vector<double> lambdas = parse_double_list(args.lambda_csv);
        const std::vector<SweepRow> rows = run_sweep(cfg, lambdas, args.out_dir);
        std::cout << "lambda,seed,perplexity,kv_fraction\n";
        for (const SweepRow &r : rows)
            std::cout << r.lambda << "," << r.seed << "," << r.perplexity << ","
                      << r.kv_fraction << (r.early_stopped ? " (early-stopped)" : "") << "\n";
        std::cout << "table " << args.out_dir << "/sweep.csv\n";
        return 0;
    }

    LoadedCheckpoint ckpt = load_checkpoint(args.checkpoint_path);

    if (evalc->parsed()) {
        const EvalResult res = run_eval(ckpt.state, cfg, resolve_policy(args.policy, cfg),
                                        parse_force_role(args.force_role));
        std::cout << "perplexity " << res.perplexity << "\nkv_fraction " << res.kv_fraction
                  << "\n";
        if (res.recall >= 0) std::cout << "recall " << res.recall << "\n";
        return 0;
    }

    if (distill->parsed()) {
        const TrainResult res = run_distill(cfg, ckpt.state, args.out_dir);
        std::cout << "final_distill_loss " << res.final_loss << "\ncheckpoint "
                  << res.checkpoint_path << "\nrouters " << res.router_path << "\n";
        return 0;
    }

    if (inspect->parsed()) {
        const InspectResult res = run_inspect(ckpt.state, args.text, args.out_dir,
                                              parse_force_role(args.force_role));
        std::cout << res.summary_json << "\n";
        return 0;
    }

    if (bench->parsed()) {
        std::vector<CachePolicy> policies;
        if (bench->count("--policy")) {
            policies.push_back(resolve_policy(args.policy, cfg));
        } else {
            policies.push_back(CachePolicy{CachePolicy::Kind::Full});
            policies.push_back(CachePolicy{CachePolicy::Kind::NAtS});
            policies.push_back(resolve_policy("streaming", cfg));
            policies.push_back(resolve_policy("h2o", cfg));
        }
        const std::string csv = args.out_dir + "/bench.csv";
        std::filesystem::create_directories(args.out_dir);
        const auto rows = run_bench(ckpt.state, cfg, parse_int_list(args.lengths_csv), policies,
                                    csv, parse_force_role(args.force_role));
        for (const BenchRow &r : rows)
            std::cout << r.length << "," << r.policy << "," << r.steps_per_sec << ","
                      << r.peak_cache_entries << "," << r.peak_ring_entries << "\n";
        std::cout << "table " << csv << "\n";
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char **argv) {
    try {
        return run(argc, argv);
    } catch (const nats::NumericError &e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument &e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
