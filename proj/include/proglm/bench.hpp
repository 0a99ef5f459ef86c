// Copyright (c) 2026 the proglm authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "proglm/agent.hpp"
#include "proglm/model.hpp"

namespace proglm {

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct ExperimentToggles {
    bool pnn = true;
    bool ewc = true;
    bool lora = true;
    bool meta = true;
    bool replay = true;
};

/// One task in the experiment's ordered schedule. Synthetic kinds carry a
/// generator seed; "dir" reads a local directory.
struct TaskSpec {
    std::string kind; // "dialog", "code" or "dir"
    std::string tag;
    uint64_t source_seed = 0;
    long total = 200;
    std::string path;                          // "dir" only
    MetricKind metric = MetricKind::bleu;      // "dir" only; synthetic kinds fix their own

    void validate() const {
        if (kind != "dialog" && kind != "code" && kind != "dir")
            throw ConfigError("TaskSpec: unknown kind '" + kind + "'");
        if (tag.empty()) throw ConfigError("TaskSpec: empty tag");
        if (kind != "dir" && total < 0) throw ConfigError("TaskSpec: total must be >= 0");
        if (kind == "dir" && path.empty()) throw ConfigError("TaskSpec: 'dir' needs a path");
    }
};

struct ExperimentConfig {
    std::vector<uint64_t> seeds;
    std::vector<TaskSpec> tasks;
    ExperimentToggles toggles;
    bool baseline_mode = false;
    std::filesystem::path output_dir;
    std::filesystem::path base_checkpoint; // optional pretrained base weights

    ModelConfig model;
    OrchestrateConfig run; // training and collection knobs; toggles override its enables

    void validate() const {
        if (seeds.empty()) throw ConfigError("ExperimentConfig: need at least one seed");
        if (tasks.empty()) throw ConfigError("ExperimentConfig: need at least one task");
        for (const auto& t : tasks) t.validate();
        model.validate();
        run.validate();
        if (baseline_mode && toggles.pnn)
            throw ConfigError("ExperimentConfig: baseline_mode requires the pnn toggle off");
        if (!baseline_mode && !toggles.pnn)
            throw ConfigError("ExperimentConfig: pnn off is only meaningful in baseline_mode");
        if (baseline_mode && (toggles.ewc || toggles.lora || toggles.meta || toggles.replay))
            throw ConfigError("ExperimentConfig: baseline_mode conflicts with adaptation toggles");
    }

    std::string variant_name() const {
        if (baseline_mode) return "baseline";
        std::string name = "pnn";
        if (toggles.ewc) name += "+ewc";
        if (toggles.lora) name += "+lora";
        if (toggles.meta) name += "+meta";
        if (toggles.replay) name += "+replay";
        return name;
    }
};

inline ModelConfig model_config_from_json(const nlohmann::json& m, ModelConfig cfg = ModelConfig{}) {
    cfg.d_model = m.value("d_model", cfg.d_model);
    cfg.n_layers = m.value("n_layers", cfg.n_layers);
    cfg.n_heads = m.value("n_heads", cfg.n_heads);
    cfg.ffn_mult = m.value("ffn_mult", cfg.ffn_mult);
    cfg.max_seq_len = m.value("max_seq_len", cfg.max_seq_len);
    return cfg;
}

inline TaskSpec task_spec_from_json(const nlohmann::json& t) {
    TaskSpec spec;
    spec.kind = t.at("kind").get<std::string>();
    spec.tag = t.value("tag", spec.kind);
    spec.source_seed = t.value("source_seed", 0ULL);
    spec.total = t.value("total", 200L);
    spec.path = t.value("path", std::string());
    if (t.contains("metric")) spec.metric = metric_from_name(t.at("metric").get<std::string>());
    return spec;
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
    ExperimentConfig cfg;
    if (j.contains("seeds"))
        for (const auto& s : j.at("seeds")) cfg.seeds.push_back(s.get<uint64_t>());
    for (const auto& t : j.at("tasks")) cfg.tasks.push_back(task_spec_from_json(t));
    if (j.contains("toggles")) {
        const auto& tg = j.at("toggles");
        cfg.toggles.pnn = tg.value("pnn", true);
        cfg.toggles.ewc = tg.value("ewc", true);
        cfg.toggles.lora = tg.value("lora", true);
        cfg.toggles.meta = tg.value("meta", true);
        cfg.toggles.replay = tg.value("replay", true);
    }
    cfg.baseline_mode = j.value("baseline_mode", false);
    if (j.contains("output_dir")) cfg.output_dir = j.at("output_dir").get<std::string>();
    if (j.contains("base_checkpoint")) cfg.base_checkpoint = j.at("base_checkpoint").get<std::string>();
    if (j.contains("model")) cfg.model = model_config_from_json(j.at("model"), cfg.model);
    if (j.contains("run")) {
        const auto& r = j.at("run");
        cfg.run.collect_limit = r.value("collect_limit", cfg.run.collect_limit);
        cfg.run.seq_len = r.value("seq_len", cfg.run.seq_len);
        cfg.run.replay_capacity = r.value("replay_capacity", cfg.run.replay_capacity);
        TrainConfig& t = cfg.run.train;
        t.micro_batch = r.value("micro_batch", t.micro_batch);
        t.accumulation_steps = r.value("accumulation_steps", t.accumulation_steps);
        t.epochs = r.value("epochs", t.epochs);
        t.base_lr = r.value("base_lr", t.base_lr);
        t.ewc_lambda = r.value("ewc_lambda", t.ewc_lambda);
        t.replay_fraction = r.value("replay_fraction", t.replay_fraction);
        t.lora_rank = r.value("lora_rank", t.lora_rank);
        t.lora_scale = r.value("lora_scale", t.lora_scale);
        t.meta_inner_steps = r.value("meta_inner_steps", t.meta_inner_steps);
        t.meta_inner_lr = r.value("meta_inner_lr", t.meta_inner_lr);
        t.meta_outer_lr = r.value("meta_outer_lr", t.meta_outer_lr);
        t.meta_episodes = r.value("meta_episodes", t.meta_episodes);
        t.meta_support = r.value("meta_support", t.meta_support);
        t.replay_push = r.value("replay_push", t.replay_push);
        t.fisher_samples = r.value("fisher_samples", t.fisher_samples);
    }
    return cfg;
}

// ---------------------------------------------------------------------------
// Forgetting report
// ---------------------------------------------------------------------------

struct ForgettingCell {
    double perplexity = 0.0;
    std::string metric_kind;
    double metric_value = 0.0;
    double delta = 0.0;
};

/// Full forgetting matrix for one run: every task evaluated at every
/// checkpoint it existed for. The delta of a cell is its perplexity minus
/// the task's perplexity at the checkpoint right after that task trained.
struct ForgettingReport {
    std::string variant;
    uint64_t seed = 0;
    std::vector<std::string> checkpoints; // in evaluation order
    std::vector<std::string> tasks;       // in first-seen order
    std::map<std::string, std::map<std::string, ForgettingCell>> matrix; // checkpoint -> task -> cell

    const ForgettingCell& cell(const std::string& checkpoint, const std::string& task) const {
        return matrix.at(checkpoint).at(task);
    }

    /// Delta of `task` at its final checkpoint, the headline forgetting number.
    double final_delta(const std::string& task) const {
        for (auto it = checkpoints.rbegin(); it != checkpoints.rend(); ++it) {
            auto row = matrix.find(*it);
            if (row == matrix.end()) continue;
            auto c = row->second.find(task);
            if (c != row->second.end()) return c->second.delta;
        }
        throw ConfigError("ForgettingReport: task '" + task + "' never evaluated");
    }
};

inline ForgettingReport forgetting_from_run(const RunReport& run, const std::string& variant) {
    ForgettingReport report;
    report.variant = variant;
    report.seed = run.seed;
    // anchor: perplexity at the checkpoint right after the task's training,
    // i.e. the first row where the task runs through its own column
    std::map<std::string, double> anchor_ppl;
    for (const auto& row : run.rows)
        if (!row.pre_training && !anchor_ppl.count(row.task_tag)) anchor_ppl[row.task_tag] = row.perplexity;
    for (const auto& row : run.rows) {
        if (std::find(report.checkpoints.begin(), report.checkpoints.end(), row.checkpoint) ==
            report.checkpoints.end())
            report.checkpoints.push_back(row.checkpoint);
        if (std::find(report.tasks.begin(), report.tasks.end(), row.task_tag) == report.tasks.end())
            report.tasks.push_back(row.task_tag);
        ForgettingCell cell;
        cell.perplexity = row.perplexity;
        cell.metric_kind = row.metric_kind;
        cell.metric_value = row.metric_value;
        cell.delta = row.perplexity - anchor_ppl.at(row.task_tag);
        report.matrix[row.checkpoint][row.task_tag] = std::move(cell);
    }
    // checkpoint labels sort by pipeline index textually only up to t9; keep
    // emission order but move backfilled labels where they belong
    std::sort(report.checkpoints.begin(), report.checkpoints.end(),
              [](const std::string& a, const std::string& b) {
                  const auto num = [](const std::string& s) {
                      return std::stol(s.substr(1, s.find(':') - 1));
                  };
                  return num(a) < num(b);
              });
    return report;
}

// ---------------------------------------------------------------------------
// Baseline regime
// ---------------------------------------------------------------------------

/// The comparison regime: one shared column, never frozen, fine-tuned
/// sequentially on every task with no consolidation, adapters or replay.
/// Evaluation mirrors orchestrate: after each task, every tag seen so far is
/// scored on its frozen held-out set through the single shared head.
inline RunReport run_baseline(ProgressiveNetwork& net, RecordStore& store,
                              const std::vector<DataSource*>& sources, const OrchestrateConfig& cfg) {
    cfg.validate();
    if (net.column_count() != 0) throw ConfigError("run_baseline: expected a column-free network");
    net.add_column(0);

    RunReport report;
    report.seed = cfg.train.seed;
    std::map<std::string, detail::HeldoutSnapshot> heldout; // by tag, frozen at first exposure
    std::map<std::string, MetricKind> metrics;
    std::vector<std::string> seen;
    std::vector<std::string> finished_labels;
    const long max_seq_len = net.base().config().max_seq_len;
    LogitsFn base_fn = [&net](std::span<const int> ids) { return net.base().forward(ids).logits; };

    for (size_t i = 0; i < sources.size(); ++i) {
        DataSource& source = *sources[i];
        const std::string tag = source.task_tag();
        const std::string label = "t" + std::to_string(i) + ":" + tag;
        std::string stage = "collect";
        try {
            CollectResult collected = collect(store, source, cfg.collect_limit);
            for (const auto& err : collected.errors) report.failures.push_back(label + ":collect: " + err);
            if (!collected.errors.empty()) throw std::runtime_error("collection failed for '" + tag + "'");
            const long fence = store.max_id();
            report.stages.push_back(label + ":collect");

            stage = "preprocess";
            TaskCorpus corpus = build_task_corpus(store, tag, cfg.seq_len, fence);
            if (!heldout.count(tag)) {
                detail::HeldoutSnapshot snap;
                snap.tokens = corpus.tokens.heldout;
                snap.texts = corpus.heldout_texts;
                const auto& stored = heldout.emplace(tag, std::move(snap)).first->second;
                metrics.emplace(tag, source.metric());
                seen.push_back(tag);
                // pre-exposure cells, scored through the frozen base as in
                // the column regime so both matrices share one definition
                if (!finished_labels.empty()) {
                    EvalRow pre;
                    pre.task_tag = tag;
                    pre.task_id = 0;
                    pre.pre_training = true;
                    detail::score_snapshot(pre, base_fn, max_seq_len, stored, source.metric());
                    for (const auto& past : finished_labels) {
                        pre.checkpoint = past;
                        report.rows.push_back(pre);
                    }
                }
            }
            report.stages.push_back(label + ":preprocess");

            stage = "train";
            TaskReport tr = train_task(net, 0, corpus.tokens, cfg.train, nullptr, nullptr);
            TaskSummary summary;
            summary.checkpoint = label;
            summary.phase = "train";
            summary.task_tag = tag;
            summary.task_id = 0;
            summary.final_loss = tr.final_loss;
            summary.heldout_perplexity = tr.heldout_perplexity;
            summary.optimizer_steps = tr.optimizer_steps;
            summary.updated_params = tr.updated_params;
            report.summaries.push_back(std::move(summary));
            report.stages.push_back(label + ":train");

            stage = "evaluate";
            LogitsFn fn = [&net](std::span<const int> ids) { return forward_task(net, ids, 0); };
            for (const auto& t : seen) {
                EvalRow row;
                row.checkpoint = label;
                row.task_tag = t;
                row.task_id = 0;
                detail::score_snapshot(row, fn, max_seq_len, heldout.at(t), metrics.at(t));
                report.rows.push_back(std::move(row));
            }
            report.stages.push_back(label + ":evaluate");
            finished_labels.push_back(label);
        } catch (const std::exception& e) {
            report.failures.push_back(label + ":" + stage + ": " + e.what());
            report.completed = false;
            break;
        }
    }

    report.columns = static_cast<long>(net.column_count());
    report.store_count = store.count();
    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        save_network(cfg.out_dir / "checkpoint.json", net);
        write_file_atomic(cfg.out_dir / "report.json", report_to_json(report, cfg).dump(2) + "\n");
    }
    return report;
}

// ---------------------------------------------------------------------------
// Table rendering
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

inline constexpr const char* kCsvHeader = "variant,task,checkpoint,perplexity,metric_kind,metric_value,delta\n";

inline void append_csv_rows(std::string& out, const ForgettingReport& report) {
    for (const auto& checkpoint : report.checkpoints) {
        auto row = report.matrix.find(checkpoint);
        if (row == report.matrix.end()) continue;
        for (const auto& task : report.tasks) {
            auto c = row->second.find(task);
            if (c == row->second.end()) continue;
            out += report.variant + "," + task + "," + checkpoint + "," +
                   format_double(c->second.perplexity) + "," + c->second.metric_kind + "," +
                   format_double(c->second.metric_value) + "," + format_double(c->second.delta) + "\n";
        }
    }
}

/// Byte-stable CSV: one row per matrix cell in checkpoint-then-task order.
inline std::string emit_csv(const ForgettingReport& report) {
    std::string out = kCsvHeader;
    append_csv_rows(out, report);
    return out;
}

/// The reference numbers come from the original large-model experiments and
/// are printed for orientation only; they are not reproducible at this scale.
inline std::string reference_lines() {
    return "Full-scale reference values (orientation only, not reproducible at desk scale):\n"
           "- column-based model: task-1 perplexity stable near 22.3, delta 0.2\n"
           "- sequential fine-tuning baseline: task-1 perplexity 22.1 to 35.6, delta 13.5\n"
           "- coding-task accuracy 0.85 on the full-scale synthetic benchmark\n\n";
}

inline constexpr const char* kMarkdownHeader =
    "| variant | task | checkpoint | perplexity | metric | value | delta |\n"
    "|---|---|---|---|---|---|---|\n";

inline void append_markdown_rows(std::string& out, const ForgettingReport& report) {
    for (const auto& checkpoint : report.checkpoints) {
        auto row = report.matrix.find(checkpoint);
        if (row == report.matrix.end()) continue;
        for (const auto& task : report.tasks) {
            auto c = row->second.find(task);
            if (c == row->second.end()) continue;
            out += "| " + report.variant + " | " + task + " | " + checkpoint + " | " +
                   format_double(c->second.perplexity) + " | " + c->second.metric_kind + " | " +
                   format_double(c->second.metric_value) + " | " + format_double(c->second.delta) + " |\n";
        }
    }
}

/// Markdown table with the full-scale reference header.
inline std::string emit_markdown(const ForgettingReport& report) {
    std::string out;
    out += "# Forgetting report: " + report.variant + "\n\n";
    out += reference_lines();
    out += kMarkdownHeader;
    append_markdown_rows(out, report);
    return out;
}

// ---------------------------------------------------------------------------
// Experiment driver
// ---------------------------------------------------------------------------

struct ExperimentResult {
    std::string variant;
    std::vector<ForgettingReport> per_seed;
    ForgettingReport aggregate; // cellwise median over seeds
};

namespace detail {

inline double median(std::vector<double> v) {
    if (v.empty()) throw ConfigError("median: empty sample");
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::unique_ptr<DataSource> make_source(const TaskSpec& spec, uint64_t seed) {
    const uint64_t mixed = Rng::derive(spec.source_seed, seed);
    if (spec.kind == "dialog") return std::make_unique<SyntheticDialogSource>(mixed, spec.total, spec.tag);
    if (spec.kind == "code") return std::make_unique<SyntheticCodeSource>(mixed, spec.total, spec.tag);
    return std::make_unique<LocalDirectorySource>(spec.path, spec.tag, spec.metric);
}

} // namespace detail

/// Runs the configured variant once per seed and aggregates the forgetting
/// matrices cell by cell with the median. Every run writes its own report
/// and checkpoint under output_dir/seed_<s>/ when an output dir is set.
inline ExperimentResult run_experiment(const ExperimentConfig& config) {
    config.validate();
    ExperimentResult result;
    result.variant = config.variant_name();

    for (const uint64_t seed : config.seeds) {
        OrchestrateConfig run_cfg = config.run;
        run_cfg.train.seed = seed;
        run_cfg.enable_ewc = config.toggles.ewc;
        run_cfg.enable_meta = config.toggles.meta;
        run_cfg.enable_replay = config.toggles.replay;
        run_cfg.refine_prior_with_lora = config.toggles.lora;
        if (!config.output_dir.empty())
            run_cfg.out_dir = config.output_dir / ("seed_" + std::to_string(seed));

        if (!run_cfg.out_dir.empty()) std::filesystem::create_directories(run_cfg.out_dir);
        const std::filesystem::path store_path =
            run_cfg.out_dir.empty()
                ? std::filesystem::temp_directory_path() / ("proglm_exp_" + std::to_string(seed) + ".jsonl")
                : run_cfg.out_dir / "store.jsonl";
        std::filesystem::remove(store_path);
        RecordStore store(store_path);

        auto base = std::make_shared<BaseModel>(config.model, seed);
        if (!config.base_checkpoint.empty())
            load_into(load_checkpoint(config.base_checkpoint), base->params());
        base->freeze();
        ProgressiveNetwork net(base, seed);

        std::vector<std::unique_ptr<DataSource>> owned;
        std::vector<DataSource*> sources;
        for (const auto& spec : config.tasks) {
            owned.push_back(detail::make_source(spec, seed));
            sources.push_back(owned.back().get());
        }

        RunReport run;
        if (config.baseline_mode) {
            run = run_baseline(net, store, sources, run_cfg);
        } else {
            TaskRegistry registry;
            run = orchestrate(net, store, registry, sources, run_cfg);
        }
        if (!run.completed)
            throw std::runtime_error("run_experiment: seed " + std::to_string(seed) + " failed: " +
                                     (run.failures.empty() ? "unknown" : run.failures.back()));
        result.per_seed.push_back(forgetting_from_run(run, result.variant));
    }

    // cellwise median; all seeds share checkpoint labels and task order
    result.aggregate.variant = result.variant;
    result.aggregate.seed = 0;
    const ForgettingReport& first = result.per_seed.front();
    result.aggregate.checkpoints = first.checkpoints;
    result.aggregate.tasks = first.tasks;
    for (const auto& checkpoint : first.checkpoints) {
        for (const auto& [task, cell] : first.matrix.at(checkpoint)) {
            std::vector<double> ppl, metric, delta;
            for (const auto& rep : result.per_seed) {
                const ForgettingCell& c = rep.cell(checkpoint, task);
                ppl.push_back(c.perplexity);
                metric.push_back(c.metric_value);
                delta.push_back(c.delta);
            }
            ForgettingCell agg;
            agg.perplexity = detail::median(ppl);
            agg.metric_kind = cell.metric_kind;
            agg.metric_value = detail::median(metric);
            agg.delta = detail::median(delta);
            result.aggregate.matrix[checkpoint][task] = std::move(agg);
        }
    }

    if (!config.output_dir.empty()) {
        write_file_atomic(config.output_dir / "table.csv", emit_csv(result.aggregate));
        write_file_atomic(config.output_dir / "table.md", emit_markdown(result.aggregate));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Ablation suite
// ---------------------------------------------------------------------------

/// Three fixed arms: the full column regime with LoRA refinement, the same
/// without consolidation, and the sequential fine-tuning baseline.
struct AblationOutcome {
    ExperimentResult full;
    ExperimentResult no_ewc;
    ExperimentResult baseline;

    std::vector<const ExperimentResult*> arms() const { return {&full, &no_ewc, &baseline}; }

    std::string merged_csv() const {
        std::string out = kCsvHeader;
        for (const ExperimentResult* arm : arms()) append_csv_rows(out, arm->aggregate);
        return out;
    }

    std::string merged_markdown() const {
        std::string out = "# Ablation report\n\n";
        out += reference_lines();
        out += kMarkdownHeader;
        for (const ExperimentResult* arm : arms()) append_markdown_rows(out, arm->aggregate);
        return out;
    }

    /// Per-task final deltas per arm plus the two ordering checks on the
    /// first task: consolidation never hurts and columns beat fine-tuning.
    nlohmann::ordered_json summary(const std::string& first_task) const {
        nlohmann::ordered_json doc;
        doc["task"] = first_task;
        nlohmann::ordered_json deltas;
        for (const ExperimentResult* arm : arms()) {
            nlohmann::ordered_json per_task;
            for (const auto& task : arm->aggregate.tasks)
                per_task[task] = arm->aggregate.final_delta(task);
            deltas[arm->variant] = std::move(per_task);
        }
        doc["final_deltas"] = std::move(deltas);
        nlohmann::ordered_json ord;
        ord["baseline_ge_2x_pnn"] =
            baseline.aggregate.final_delta(first_task) >= 2.0 * full.aggregate.final_delta(first_task);
        ord["no_ewc_ge_ewc"] =
            no_ewc.aggregate.final_delta(first_task) >= full.aggregate.final_delta(first_task);
        doc["orderings"] = std::move(ord);
        return doc;
    }
};

/// Runs the ablation arms on one schedule. The incoming toggles are ignored;
/// each arm fixes its own. Writes ablation.{csv,md,json} under output_dir
/// next to the per-arm experiment directories.
inline AblationOutcome run_ablation(const ExperimentConfig& base_config) {
    if (base_config.tasks.empty()) throw ConfigError("run_ablation: need at least one task");
    AblationOutcome outcome;

    const auto arm_config = [&](bool baseline_mode, bool ewc) {
        ExperimentConfig cfg = base_config;
        cfg.baseline_mode = baseline_mode;
        cfg.toggles.pnn = !baseline_mode;
        cfg.toggles.ewc = !baseline_mode && ewc;
        cfg.toggles.lora = !baseline_mode;
        cfg.toggles.meta = !baseline_mode;
        cfg.toggles.replay = !baseline_mode;
        if (!base_config.output_dir.empty()) cfg.output_dir = base_config.output_dir / cfg.variant_name();
        return cfg;
    };

    outcome.full = run_experiment(arm_config(false, true));
    outcome.no_ewc = run_experiment(arm_config(false, false));
    outcome.baseline = run_experiment(arm_config(true, false));

    if (!base_config.output_dir.empty()) {
        write_file_atomic(base_config.output_dir / "ablation.csv", outcome.merged_csv());
        write_file_atomic(base_config.output_dir / "ablation.md", outcome.merged_markdown());
        write_file_atomic(base_config.output_dir / "ablation.json",
                          outcome.summary(base_config.tasks.front().tag).dump(2) + "\n");
    }
    return outcome;
}

} // namespace proglm
