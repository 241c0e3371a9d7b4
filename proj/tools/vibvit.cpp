// SPDX-License-Identifier: Apache-2.0
//
// vibvit: train, evaluate and analyze bottlenecked vision transformers.
//
// Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.

#include <malloc.h>

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vibvit/app.hpp"

namespace {

using namespace vibvit;

int run(int argc, char** argv) {
    CLI::App app{"Vision transformer with per-head information bottlenecks"};
    app.require_subcommand(0, 1);
    app.fallthrough();

    std::vector<std::string> config_files;
    std::size_t threads = 0;
    bool print_config = false;
    std::vector<std::string> overrides;
    std::string analysis_name;
    app.add_option("-c,--config", config_files, "key = value config file; repeatable, later files win");
    app.add_option("--threads", threads, "worker threads; results do not depend on the count")->check(CLI::PositiveNumber);
    app.add_flag("--print-config", print_config, "print the resolved configuration and exit");
    app.add_option("overrides", overrides, "key=value settings");

    auto* train = app.add_subcommand("train", "train one model");
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    auto* analyze = app.add_subcommand("analyze", "run a named analysis on a checkpoint");
    auto* sweep = app.add_subcommand("sweep", "train one model per beta in `betas`");
    for (auto* sub : {train, eval, sweep}) sub->add_option("overrides", overrides, "key=value settings");
    std::string names;
    for (const auto& n : app::analysis_names()) names += (names.empty() ? "" : ", ") + n;
    analyze->add_option("name", analysis_name, "one of: " + names)->required();
    analyze->add_option("overrides", overrides, "key=value settings");

    auto* synth = app.add_subcommand("make-synthetic", "write synthetic train.bin and val.bin record files");
    std::string synth_dir = "data";
    std::size_t synth_train = 5000, synth_val = 1000;
    std::uint64_t synth_seed = 0;
    synth->add_option("--out", synth_dir, "output directory");
    synth->add_option("--train", synth_train, "training records");
    synth->add_option("--val", synth_val, "validation records");
    synth->add_option("--seed", synth_seed, "generator seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    if (synth->parsed()) {
        app::make_synthetic(synth_dir, synth_train, synth_val, synth_seed);
        std::cerr << "wrote " << synth_train << " + " << synth_val << " records to " << synth_dir << "\n";
        return 0;
    }

    RunConfig cfg;
    for (const auto& f : config_files) apply_config_file(cfg, f);
    for (const auto& kv : overrides) apply_override(cfg, kv);
    if (threads) set_config_value(cfg, "threads", std::to_string(threads));
    if (analyze->parsed()) set_config_value(cfg, "analysis", analysis_name);

    if (print_config) {
        std::cout << format_config(cfg);
        return 0;
    }
    if (app.get_subcommands().empty()) {
        std::cerr << app.help();
        return 2;
    }
    cfg.command = app.get_subcommands().front()->get_name();
    validate(cfg);

    if (train->parsed()) {
        const auto res = app::run_train(cfg, &std::cerr);
        std::cerr << "checkpoint " << res.checkpoint.string() << "\n";
    } else if (eval->parsed()) {
        app::run_eval(cfg, &std::cerr);
    } else if (analyze->parsed()) {
        app::run_analyze(cfg, &std::cerr);
    } else if (sweep->parsed()) {
        app::run_sweep(cfg, &std::cerr);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    // keep freed tape buffers in the heap instead of returning them to the OS every step
    mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
    try {
        return run(argc, argv);
    } catch (const vibvit::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const vibvit::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const vibvit::UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const vibvit::FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const vibvit::DimensionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
}
