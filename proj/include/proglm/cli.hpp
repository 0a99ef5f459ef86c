// Copyright (c) 2026 the proglm authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "proglm/bench.hpp"
#include "proglm/http_source.hpp"

namespace proglm {
namespace cli {

struct CommonArgs {
    std::string config_path;
    std::optional<uint64_t> seed;
    std::string out;
};

inline nlohmann::json load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.good()) throw ConfigError("cannot read config file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return nlohmann::json::parse(buf.str());
}

/// Builds a data source from one task entry. On top of the experiment
/// kinds, the CLI accepts "http", which stays inert unless
/// AGENT_HTTP_ENABLED=1 is exported.
inline std::unique_ptr<DataSource> make_cli_source(const nlohmann::json& t, uint64_t seed) {
    if (t.at("kind").get<std::string>() == "http") {
        const MetricKind metric = t.contains("metric")
                                      ? metric_from_name(t.at("metric").get<std::string>())
                                      : MetricKind::bleu;
        return std::make_unique<HttpArticleSource>(t.at("host").get<std::string>(),
                                                   t.at("paths").get<std::vector<std::string>>(),
                                                   t.value("tag", std::string("http")), metric);
    }
    TaskSpec spec = task_spec_from_json(t);
    spec.validate();
    return detail::make_source(spec, seed);
}

inline RecordStore open_store(const std::filesystem::path& path, long cap) {
    if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
    return RecordStore(path, cap);
}

inline int cmd_pretrain_base(const CommonArgs& args) {
    const nlohmann::json j = load_config(args.config_path);
    const uint64_t seed = args.seed.value_or(j.value("seed", 0ULL));
    const long seq_len = j.value("seq_len", 32L);
    const std::filesystem::path out_dir = args.out;

    ModelConfig model_cfg;
    if (j.contains("model")) model_cfg = model_config_from_json(j.at("model"));
    model_cfg.validate();

    std::filesystem::path store_path;
    if (j.contains("store"))
        store_path = j.at("store").get<std::string>();
    else if (!out_dir.empty())
        store_path = out_dir / "store.jsonl";
    else
        store_path = std::filesystem::temp_directory_path() / "proglm_pretrain_store.jsonl";
    RecordStore store = open_store(store_path, j.value("cap", 100000L));

    const nlohmann::json tasks =
        j.contains("tasks") ? j.at("tasks")
                            : nlohmann::json::array({{{"kind", "dialog"}, {"source_seed", 1}},
                                                     {{"kind", "code"}, {"source_seed", 2}}});
    const long limit = j.value("collect_limit", 200L);
    for (const auto& t : tasks) {
        auto src = make_cli_source(t, seed);
        const CollectResult r = collect(store, *src, limit);
        if (!r.errors.empty())
            throw std::runtime_error("collection failed for '" + src->task_tag() + "': " + r.errors.front());
    }

    std::vector<std::vector<int>> chunks = build_general_corpus(store, seq_len);
    if (chunks.empty()) throw ConfigError("pretrain-base: the store produced no training chunks");
    TokenCorpus corpus;
    const size_t held = std::max<size_t>(1, chunks.size() / 10);
    corpus.train.assign(chunks.begin(), chunks.end() - static_cast<long>(held));
    corpus.heldout.assign(chunks.end() - static_cast<long>(held), chunks.end());
    if (corpus.train.empty()) corpus.train = corpus.heldout; // store too small to split

    BaseModel model(model_cfg, seed);
    const double initial = corpus_perplexity(model, corpus.heldout);
    PretrainOptions opt;
    if (j.contains("pretrain")) {
        const auto& p = j.at("pretrain");
        opt.epochs = p.value("epochs", opt.epochs);
        opt.micro_batch = p.value("micro_batch", opt.micro_batch);
        opt.accumulation = p.value("accumulation", opt.accumulation);
        opt.base_lr = p.value("base_lr", opt.base_lr);
    }
    opt.seed = seed;
    const PretrainReport rep = pretrain(model, corpus, opt);

    nlohmann::ordered_json doc;
    doc["seed"] = seed;
    doc["store_count"] = store.count();
    doc["train_chunks"] = corpus.train.size();
    doc["heldout_chunks"] = corpus.heldout.size();
    doc["optimizer_steps"] = rep.optimizer_steps;
    doc["final_loss"] = rep.final_loss;
    doc["initial_perplexity"] = initial;
    doc["heldout_perplexity"] = rep.heldout_perplexity;
    doc["improved"] = rep.heldout_perplexity < initial;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        save_checkpoint(out_dir / "base.json", to_state_dict(model.params()));
        write_file_atomic(out_dir / "pretrain_report.json", doc.dump(2) + "\n");
    }
    std::cout << doc.dump(2) << "\n";
    return 0;
}

inline int cmd_collect(const CommonArgs& args) {
    const nlohmann::json j = load_config(args.config_path);
    if (!j.contains("store")) throw ConfigError("collect: config needs a 'store' path");
    const uint64_t seed = args.seed.value_or(j.value("seed", 0ULL));
    const long limit = j.value("limit", 200L);
    RecordStore store = open_store(j.at("store").get<std::string>(), j.value("cap", 100000L));

    bool any_errors = false;
    bool warned_http = false;
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& t : j.at("tasks")) {
        if (t.at("kind") == "http" && !HttpArticleSource::enabled() && !warned_http) {
            std::cerr << "note: http sources are disabled; export AGENT_HTTP_ENABLED=1 to fetch\n";
            warned_http = true;
        }
        auto src = make_cli_source(t, seed);
        const CollectResult r = collect(store, *src, limit);
        nlohmann::ordered_json row;
        row["tag"] = src->task_tag();
        row["collected"] = r.collected;
        row["duplicates"] = r.duplicates;
        row["rejected"] = r.rejected;
        row["at_cap"] = r.at_cap;
        row["errors"] = r.errors;
        rows.push_back(std::move(row));
        any_errors = any_errors || !r.errors.empty();
    }

    nlohmann::ordered_json doc;
    doc["store"] = store.path().string();
    doc["count"] = store.count();
    doc["cap"] = store.cap();
    doc["tasks"] = std::move(rows);
    if (!args.out.empty()) {
        std::filesystem::create_directories(args.out);
        write_file_atomic(std::filesystem::path(args.out) / "collect_report.json", doc.dump(2) + "\n");
    }
    std::cout << doc.dump(2) << "\n";
    return any_errors ? 1 : 0;
}

inline ExperimentConfig experiment_config_for(const CommonArgs& args) {
    ExperimentConfig cfg = experiment_config_from_json(load_config(args.config_path));
    if (args.seed) cfg.seeds = {*args.seed};
    if (!args.out.empty()) cfg.output_dir = args.out;
    return cfg;
}

inline int cmd_run(const CommonArgs& args) {
    const ExperimentConfig cfg = experiment_config_for(args);
    const ExperimentResult result = run_experiment(cfg);

    nlohmann::ordered_json doc;
    doc["variant"] = result.variant;
    doc["seeds"] = cfg.seeds;
    doc["checkpoints"] = result.aggregate.checkpoints;
    nlohmann::ordered_json deltas;
    for (const auto& task : result.aggregate.tasks) deltas[task] = result.aggregate.final_delta(task);
    doc["final_deltas"] = std::move(deltas);
    std::cout << doc.dump(2) << "\n";
    return 0;
}

inline int cmd_ablate(const CommonArgs& args) {
    const ExperimentConfig cfg = experiment_config_for(args);
    const AblationOutcome outcome = run_ablation(cfg);
    std::cout << outcome.summary(cfg.tasks.front().tag).dump(2) << "\n";
    return 0;
}

inline int cmd_report(const CommonArgs& args, const std::string& variant) {
    const RunReport run = run_report_from_json(load_config(args.config_path));
    const ForgettingReport rep = forgetting_from_run(run, variant);
    if (!args.out.empty()) {
        std::filesystem::create_directories(args.out);
        write_file_atomic(std::filesystem::path(args.out) / "table.csv", emit_csv(rep));
        write_file_atomic(std::filesystem::path(args.out) / "table.md", emit_markdown(rep));
    }
    std::cout << emit_markdown(rep);
    return 0;
}

/// Entry point shared by the binary and its tests. Exit codes: 0 on
/// success, 2 when the command line or config is rejected, 1 when a valid
/// configuration fails at runtime.
inline int cli_main(int argc, char** argv) {
    CLI::App app{"proglm: progressive-column continual learning on a frozen base LM"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string variant = "run";
    app.add_option("--config", args.config_path, "JSON configuration file")->required();
    app.add_option("--seed", args.seed, "override the run seed(s)");
    app.add_option("--out", args.out, "output directory");

    CLI::App* pretrain = app.add_subcommand("pretrain-base", "train the base LM on the general corpus");
    CLI::App* collect_cmd = app.add_subcommand("collect", "pull records from sources into the JSONL store");
    CLI::App* run_cmd = app.add_subcommand("run", "run the continual-learning pipeline for each seed");
    CLI::App* ablate_cmd = app.add_subcommand("ablate", "run the ablation arms and compare forgetting");
    CLI::App* report_cmd = app.add_subcommand("report", "re-render tables from a persisted run report");
    report_cmd->add_option("--variant", variant, "variant label for the table rows");
    for (CLI::App* sub : {pretrain, collect_cmd, run_cmd, ablate_cmd, report_cmd}) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (pretrain->parsed()) return cmd_pretrain_base(args);
        if (collect_cmd->parsed()) return cmd_collect(args);
        if (run_cmd->parsed()) return cmd_run(args);
        if (ablate_cmd->parsed()) return cmd_ablate(args);
        return cmd_report(args, variant);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace cli
} // namespace proglm
