// End-to-end checks of the command-line binary: verbs, flags, exit codes.

#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#ifndef NATS_CLI_PATH
#define NATS_CLI_PATH "../tools/nats"
#endif

namespace {

int run_cli(const std::string &args) {
    const std::string cmd = std::string(NATS_CLI_PATH) + " " + args + " > cli_out.txt 2>&1";
    const int ret = std::system(cmd.c_str());
    return WEXITSTATUS(ret);
}

std::string cli_output() {
    std::ifstream f("cli_out.txt");
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_tiny_config(const std::string &path) {
    std::ofstream f(path);
    f << "n_layers = 1\nn_heads = 2\nd_model = 16\nd_head = 8\nvocab_size = 32\n"
      << "max_seq_len = 32\nwindow = 4\ntile = 8\n"
      << "task = copy\ncopy_prefix_len = 6\n"
      << "batch_size = 2\nsteps = 6\nlr = 1e-3\nseed = 5\nlog_every = 2\n"
      << "eval_batches = 1\neval_batch_size = 2\nsweep_seeds = 1,2\n";
}

}  // namespace

TEST_CASE("print-config lists every key with defaults") {
    REQUIRE(run_cli("print-config") == 0);
    const std::string out = cli_output();
    for (const char *key : {"n_layers", "lambda", "task", "steps", "h2o_budget"})
        CHECK(out.find(key) != std::string::npos);
}

TEST_CASE("train, eval, inspect and bench round-trip through the binary") {
    write_tiny_config("cli_test.cfg");
    REQUIRE(run_cli("train --config cli_test.cfg --out cli_run") == 0);
    CHECK(std::filesystem::exists("cli_run/checkpoint.bin"));
    CHECK(std::filesystem::exists("cli_run/metrics.jsonl"));
    CHECK(std::filesystem::exists("cli_run/routers.json"));

    REQUIRE(run_cli("eval --config cli_test.cfg --checkpoint cli_run/checkpoint.bin "
                    "--policy nats") == 0);
    CHECK(cli_output().find("perplexity") != std::string::npos);
    REQUIRE(run_cli("eval --config cli_test.cfg --checkpoint cli_run/checkpoint.bin "
                    "--policy streaming:2,8") == 0);

    REQUIRE(run_cli("inspect --config cli_test.cfg --checkpoint cli_run/checkpoint.bin "
                    "--text hello_mask_dump --out cli_inspect --force-role global") == 0);
    CHECK(std::filesystem::exists("cli_inspect/mask_l0_h0.txt"));
    CHECK(std::filesystem::exists("cli_inspect/summary.json"));

    REQUIRE(run_cli("bench --config cli_test.cfg --checkpoint cli_run/checkpoint.bin "
                    "--lengths 8,16 --out cli_bench") == 0);
    CHECK(std::filesystem::exists("cli_bench/bench.csv"));
    std::ifstream csv("cli_bench/bench.csv");
    int lines = 0;
    std::string line;
    while (std::getline(csv, line)) ++lines;
    CHECK(lines == 1 + 2 * 4);  // header + lengths x policies

    REQUIRE(run_cli("distill --config cli_test.cfg --checkpoint cli_run/checkpoint.bin "
                    "--out cli_distill --lambda 1e-3") == 0);
    CHECK(std::filesystem::exists("cli_distill/routers.json"));

    std::filesystem::remove_all("cli_run");
    std::filesystem::remove_all("cli_inspect");
    std::filesystem::remove_all("cli_bench");
    std::filesystem::remove_all("cli_distill");
    std::filesystem::remove("cli_test.cfg");
}

TEST_CASE("sweep rejects a single lambda and runs a 2x2 grid") {
    write_tiny_config("cli_sweep.cfg");
    CHECK(run_cli("sweep --config cli_sweep.cfg --lambda 1e-3 --out cli_sweep_out") == 2);
    REQUIRE(run_cli("sweep --config cli_sweep.cfg --lambda 0,1e-2 --out cli_sweep_out") == 0);
    std::ifstream csv("cli_sweep_out/sweep.csv");
    REQUIRE(csv.good());
    int lines = 0;
    std::string line;
    while (std::getline(csv, line)) ++lines;
    CHECK(lines == 1 + 2 * 2);  // header + lambdas x seeds
    std::filesystem::remove_all("cli_sweep_out");
    std::filesystem::remove("cli_sweep.cfg");
}

TEST_CASE("config errors exit with code 2, io errors with 1") {
    {
        std::ofstream f("cli_bad.cfg");
        f << "frobnicate = 1\n";
    }
    CHECK(run_cli("train --config cli_bad.cfg --out cli_bad_out") == 2);
    CHECK(run_cli("print-config --config cli_missing.cfg") == 2);
    CHECK(run_cli("eval --config cli_bad.cfg --checkpoint nowhere.bin") == 2);
    {
        std::ofstream f("cli_bad.cfg");
        f << "window = 4\n";
    }
    CHECK(run_cli("eval --config cli_bad.cfg --checkpoint nowhere.bin") == 1);
    std::filesystem::remove("cli_bad.cfg");
    std::filesystem::remove_all("cli_bad_out");
}
