// Copyright (c) 2026 the proglm authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "proglm/adapt.hpp"
#include "proglm/corpus.hpp"
#include "proglm/metrics.hpp"
#include "proglm/pnn.hpp"
#include "proglm/sources.hpp"

namespace proglm {

// ---------------------------------------------------------------------------
// Task registry
// ---------------------------------------------------------------------------

struct TaskInfo {
    int task_id = -1;
    long column = -1;
    MetricKind metric = MetricKind::bleu;
    std::string tag;
};

/// Maps task tags to ids, columns and metrics. Ids are dense from zero in
/// registration order; each task owns exactly one column.
class TaskRegistry {
public:
    bool has(const std::string& tag) const {
        for (const auto& t : tasks_)
            if (t.tag == tag) return true;
        return false;
    }

    const TaskInfo& by_tag(const std::string& tag) const {
        for (const auto& t : tasks_)
            if (t.tag == tag) return t;
        throw ConfigError("TaskRegistry: unknown tag '" + tag + "'");
    }

    const TaskInfo& by_id(int task_id) const {
        if (task_id < 0 || static_cast<size_t>(task_id) >= tasks_.size())
            throw ConfigError("TaskRegistry: unknown task id " + std::to_string(task_id));
        return tasks_[static_cast<size_t>(task_id)];
    }

    const TaskInfo& by_column(long column) const {
        for (const auto& t : tasks_)
            if (t.column == column) return t;
        throw ConfigError("TaskRegistry: no task owns column " + std::to_string(column));
    }

    TaskInfo register_task(const std::string& tag, long column, MetricKind metric) {
        if (has(tag)) throw ConfigError("TaskRegistry: tag '" + tag + "' already registered");
        for (const auto& t : tasks_)
            if (t.column == column)
                throw ConfigError("TaskRegistry: column " + std::to_string(column) + " already owned");
        TaskInfo info;
        info.task_id = static_cast<int>(tasks_.size());
        info.column = column;
        info.metric = metric;
        info.tag = tag;
        tasks_.push_back(info);
        return info;
    }

    size_t size() const { return tasks_.size(); }
    const std::vector<TaskInfo>& tasks() const { return tasks_; }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json arr = nlohmann::ordered_json::array();
        for (const auto& t : tasks_) {
            nlohmann::ordered_json j;
            j["task_id"] = t.task_id;
            j["column"] = t.column;
            j["metric"] = metric_name(t.metric);
            j["tag"] = t.tag;
            arr.push_back(std::move(j));
        }
        return arr;
    }

    static TaskRegistry from_json(const nlohmann::json& arr) {
        TaskRegistry reg;
        for (const auto& j : arr) {
            TaskInfo info;
            info.task_id = j.at("task_id").get<int>();
            info.column = j.at("column").get<long>();
            info.metric = metric_from_name(j.at("metric").get<std::string>());
            info.tag = j.at("tag").get<std::string>();
            if (info.task_id != static_cast<int>(reg.tasks_.size()))
                throw ConfigError("TaskRegistry: ids must be dense from 0");
            reg.tasks_.push_back(std::move(info));
        }
        return reg;
    }

private:
    std::vector<TaskInfo> tasks_;
};

// ---------------------------------------------------------------------------
// Orchestration config and report
// ---------------------------------------------------------------------------

struct OrchestrateConfig {
    TrainConfig train;
    long collect_limit = 200;
    long seq_len = 32;
    long replay_capacity = 256;
    bool enable_meta = true;
    bool enable_replay = true;
    bool enable_ewc = true;
    /// After each new task trains, additionally refine the immediately
    /// previous column on the new task's data through LoRA adapters.
    bool refine_prior_with_lora = false;
    std::filesystem::path out_dir; // empty: keep everything in memory
    /// Called after each stage completes and persists; tests throw from here
    /// to simulate a crash between stages.
    std::function<void(size_t task_index, const std::string& stage)> stage_hook;

    void validate() const {
        train.validate();
        if (collect_limit < 0) throw ConfigError("OrchestrateConfig: collect_limit must be >= 0");
        if (seq_len < 3) throw ConfigError("OrchestrateConfig: seq_len must be >= 3");
        if (replay_capacity < 1) throw ConfigError("OrchestrateConfig: replay_capacity must be >= 1");
    }
};

/// One cell of the forgetting matrix: a task evaluated at a checkpoint.
/// Rows for checkpoints that predate the task's column are scored through
/// the frozen base model alone (the model that served such queries then)
/// and carry the pre_training flag.
struct EvalRow {
    std::string checkpoint;
    std::string task_tag;
    int task_id = -1;
    double perplexity = 0.0;
    std::string metric_kind;
    double metric_value = 0.0;
    bool pre_training = false;
};

/// Training summary for one parameter-update phase of the run.
struct TaskSummary {
    std::string checkpoint;
    std::string phase; // "train", "adapt" or "refine"
    std::string task_tag;
    int task_id = -1;
    double final_loss = 0.0;
    double heldout_perplexity = 0.0;
    long optimizer_steps = 0;
    bool ewc_applied = false;
    bool replay_warning = false;
    std::vector<std::string> updated_params;
};

struct RunReport {
    uint64_t seed = 0;
    bool completed = true;
    long columns = 0;
    long store_count = 0;
    std::vector<std::string> stages;
    std::vector<std::string> failures;
    std::vector<TaskSummary> summaries;
    std::vector<EvalRow> rows;
};

/// Deterministic JSON rendering of a run: config echo plus the evaluation
/// matrix. Wall-clock durations are deliberately excluded so identical runs
/// produce identical bytes.
inline nlohmann::ordered_json report_to_json(const RunReport& report, const OrchestrateConfig& cfg) {
    nlohmann::ordered_json doc;
    doc["seed"] = report.seed;
    doc["completed"] = report.completed;
    doc["columns"] = report.columns;
    doc["store_count"] = report.store_count;

    nlohmann::ordered_json echo;
    echo["collect_limit"] = cfg.collect_limit;
    echo["seq_len"] = cfg.seq_len;
    echo["replay_capacity"] = cfg.replay_capacity;
    echo["enable_meta"] = cfg.enable_meta;
    echo["enable_replay"] = cfg.enable_replay;
    echo["enable_ewc"] = cfg.enable_ewc;
    echo["refine_prior_with_lora"] = cfg.refine_prior_with_lora;
    echo["micro_batch"] = cfg.train.micro_batch;
    echo["accumulation_steps"] = cfg.train.accumulation_steps;
    echo["epochs"] = cfg.train.epochs;
    echo["base_lr"] = cfg.train.base_lr;
    echo["ewc_lambda"] = cfg.train.ewc_lambda;
    echo["replay_fraction"] = cfg.train.replay_fraction;
    echo["lora_rank"] = cfg.train.lora_rank;
    echo["lora_scale"] = cfg.train.lora_scale;
    echo["meta_inner_steps"] = cfg.train.meta_inner_steps;
    echo["meta_inner_lr"] = cfg.train.meta_inner_lr;
    echo["meta_outer_lr"] = cfg.train.meta_outer_lr;
    echo["meta_episodes"] = cfg.train.meta_episodes;
    echo["meta_support"] = cfg.train.meta_support;
    echo["replay_push"] = cfg.train.replay_push;
    echo["fisher_samples"] = cfg.train.fisher_samples;
    doc["config"] = std::move(echo);

    doc["stages"] = report.stages;
    doc["failures"] = report.failures;

    nlohmann::ordered_json summaries = nlohmann::ordered_json::array();
    for (const auto& s : report.summaries) {
        nlohmann::ordered_json j;
        j["checkpoint"] = s.checkpoint;
        j["phase"] = s.phase;
        j["task_tag"] = s.task_tag;
        j["task_id"] = s.task_id;
        j["final_loss"] = s.final_loss;
        j["heldout_perplexity"] = s.heldout_perplexity;
        j["optimizer_steps"] = s.optimizer_steps;
        j["ewc_applied"] = s.ewc_applied;
        j["replay_warning"] = s.replay_warning;
        j["updated_params"] = s.updated_params;
        summaries.push_back(std::move(j));
    }
    doc["summaries"] = std::move(summaries);

    nlohmann::ordered_json matrix = nlohmann::ordered_json::array();
    for (const auto& r : report.rows) {
        nlohmann::ordered_json j;
        j["checkpoint"] = r.checkpoint;
        j["task_tag"] = r.task_tag;
        j["task_id"] = r.task_id;
        j["perplexity"] = r.perplexity;
        j["metric_kind"] = r.metric_kind;
        j["metric_value"] = r.metric_value;
        j["pre_training"] = r.pre_training;
        matrix.push_back(std::move(j));
    }
    doc["matrix"] = std::move(matrix);
    return doc;
}

/// Reads back a persisted run report. The config echo is ignored; only the
/// fields needed to recompute tables are restored.
inline RunReport run_report_from_json(const nlohmann::json& doc) {
    RunReport report;
    report.seed = doc.at("seed").get<uint64_t>();
    report.completed = doc.at("completed").get<bool>();
    report.columns = doc.at("columns").get<long>();
    report.store_count = doc.at("store_count").get<long>();
    report.stages = doc.at("stages").get<std::vector<std::string>>();
    report.failures = doc.at("failures").get<std::vector<std::string>>();
    for (const auto& j : doc.at("summaries")) {
        TaskSummary s;
        s.checkpoint = j.at("checkpoint").get<std::string>();
        s.phase = j.at("phase").get<std::string>();
        s.task_tag = j.at("task_tag").get<std::string>();
        s.task_id = j.at("task_id").get<int>();
        s.final_loss = j.at("final_loss").get<double>();
        s.heldout_perplexity = j.at("heldout_perplexity").get<double>();
        s.optimizer_steps = j.at("optimizer_steps").get<long>();
        s.ewc_applied = j.at("ewc_applied").get<bool>();
        s.replay_warning = j.at("replay_warning").get<bool>();
        s.updated_params = j.at("updated_params").get<std::vector<std::string>>();
        report.summaries.push_back(std::move(s));
    }
    for (const auto& j : doc.at("matrix")) {
        EvalRow r;
        r.checkpoint = j.at("checkpoint").get<std::string>();
        r.task_tag = j.at("task_tag").get<std::string>();
        r.task_id = j.at("task_id").get<int>();
        r.perplexity = j.at("perplexity").get<double>();
        r.metric_kind = j.at("metric_kind").get<std::string>();
        r.metric_value = j.at("metric_value").get<double>();
        r.pre_training = j.value("pre_training", false);
        report.rows.push_back(std::move(r));
    }
    return report;
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

namespace detail {

/// Per-task evaluation data, frozen when the task is first registered so
/// every later checkpoint measures forgetting on the same held-out set.
struct HeldoutSnapshot {
    std::vector<std::vector<int>> tokens;
    std::vector<std::string> texts;
};

struct OrchestrateState {
    std::map<int, HeldoutSnapshot> heldout;
    std::map<long, FisherInfo> fisher_by_column;
    std::unique_ptr<ReplayBuffer> buffer;
};

inline void persist_orchestrate(const std::filesystem::path& out_dir, ProgressiveNetwork& net,
                                const TaskRegistry& registry, const OrchestrateState& state,
                                const RunReport& report) {
    if (out_dir.empty()) return;
    std::filesystem::create_directories(out_dir);
    save_network(out_dir / "checkpoint.json", net);
    for (const auto& [col, fisher] : state.fisher_by_column)
        save_checkpoint(out_dir / ("fisher_col" + std::to_string(col) + ".json"), fisher_state_dict(fisher));
    nlohmann::ordered_json run_state;
    run_state["registry"] = registry.to_json();
    run_state["stages"] = report.stages;
    run_state["failures"] = report.failures;
    nlohmann::ordered_json heldout = nlohmann::ordered_json::object();
    for (const auto& [task_id, snap] : state.heldout) heldout[std::to_string(task_id)] = snap.texts;
    run_state["heldout"] = std::move(heldout);
    write_file_atomic(out_dir / "run_state.json", run_state.dump(2) + "\n");
}

/// Average BLEU-4 of greedy completions against held-out exchanges. Each
/// text is split at its last "A:"; the model continues from there and is
/// scored on the remainder. Texts without that shape are skipped; if none
/// qualify the score is zero.
inline double dialog_bleu(const LogitsFn& fn, long max_seq_len, const std::vector<std::string>& texts) {
    const ByteTokenizer tok(max_seq_len);
    double total = 0.0;
    long used = 0;
    for (const auto& text : texts) {
        const size_t pos = text.rfind("A:");
        if (pos == std::string::npos) continue;
        const std::string prompt = text.substr(0, pos + 2);
        std::string reference = text.substr(pos + 2);
        while (!reference.empty() && reference.front() == ' ') reference.erase(reference.begin());
        if (reference.empty()) continue;
        const std::string generated = generate_greedy(fn, tok, prompt, static_cast<long>(reference.size()) + 8);
        std::vector<int> hyp;
        hyp.reserve(generated.size());
        for (char c : generated) hyp.push_back(static_cast<unsigned char>(c));
        std::vector<int> ref;
        ref.reserve(reference.size());
        for (char c : reference) ref.push_back(static_cast<unsigned char>(c));
        total += bleu4(hyp, {ref});
        ++used;
    }
    return used == 0 ? 0.0 : total / static_cast<double>(used);
}

/// Scores one held-out snapshot with an arbitrary logits function, filling
/// the measurement fields of an EvalRow.
inline void score_snapshot(EvalRow& row, const LogitsFn& fn, long max_seq_len, const HeldoutSnapshot& snap,
                           MetricKind metric) {
    row.perplexity = perplexity(fn, snap.tokens);
    row.metric_kind = metric_name(metric);
    row.metric_value = metric == MetricKind::bleu ? dialog_bleu(fn, max_seq_len, snap.texts)
                                                  : code_accuracy(fn, snap.tokens);
}

} // namespace detail

/// Runs the full agent pipeline over `sources` in order: collect,
/// preprocess, adapt the network (new column for a new tag, LoRA refinement
/// for a known one), estimate Fisher information on the trained parameters,
/// then evaluate every registered task. Any stage failure aborts the
/// current task, keeps the last persisted checkpoint, records the failure
/// and skips the remaining sources.
inline RunReport orchestrate(ProgressiveNetwork& net, RecordStore& store, TaskRegistry& registry,
                             const std::vector<DataSource*>& sources, const OrchestrateConfig& cfg) {
    cfg.validate();
    if (registry.size() != net.column_count())
        throw ConfigError("orchestrate: registry tracks " + std::to_string(registry.size()) +
                          " tasks but the network has " + std::to_string(net.column_count()) + " columns");

    RunReport report;
    report.seed = cfg.train.seed;
    detail::OrchestrateState state;
    if (cfg.enable_replay) state.buffer = std::make_unique<ReplayBuffer>(cfg.replay_capacity);

    // Tasks inherited from a previous run: rebuild their held-out sets from
    // the store as it stands now, fenced at the current high-water id.
    const long entry_fence = store.max_id();
    for (const auto& t : registry.tasks()) {
        if (net.index_of(t.task_id) != t.column)
            throw ConfigError("orchestrate: registry and network disagree on task " +
                              std::to_string(t.task_id));
        TaskCorpus corpus = build_task_corpus(store, t.tag, cfg.seq_len, entry_fence);
        detail::HeldoutSnapshot snap;
        snap.tokens = std::move(corpus.tokens.heldout);
        snap.texts = std::move(corpus.heldout_texts);
        state.heldout.emplace(t.task_id, std::move(snap));
    }

    auto stage_done = [&](size_t i, const std::string& tag, const std::string& stage) {
        report.stages.push_back("t" + std::to_string(i) + ":" + tag + ":" + stage);
        detail::persist_orchestrate(cfg.out_dir, net, registry, state, report);
        if (cfg.stage_hook) cfg.stage_hook(i, stage);
    };

    auto push_summary = [&report](const std::string& label, const std::string& phase, const TaskInfo& info,
                                  const TaskReport& tr) {
        TaskSummary s;
        s.checkpoint = label;
        s.phase = phase;
        s.task_tag = info.tag;
        s.task_id = info.task_id;
        s.final_loss = tr.final_loss;
        s.heldout_perplexity = tr.heldout_perplexity;
        s.optimizer_steps = tr.optimizer_steps;
        s.ewc_applied = tr.ewc_applied;
        s.replay_warning = tr.replay_warning;
        s.updated_params = tr.updated_params;
        report.summaries.push_back(std::move(s));
    };

    auto ensure_lora = [&net, &cfg](long column) {
        for (const char* mat : {"w1", "w2"}) {
            const std::string target = "pnn/col" + std::to_string(column) + "/" + mat;
            if (!net.lora_for(target)) attach_lora(net, target, cfg.train.lora_rank, cfg.train.lora_scale);
        }
    };

    auto fisher_or_null = [&state, &cfg](long column) -> const FisherInfo* {
        if (!cfg.enable_ewc) return nullptr;
        auto it = state.fisher_by_column.find(column);
        return it == state.fisher_by_column.end() ? nullptr : &it->second;
    };

    const long max_seq_len = net.base().config().max_seq_len;
    LogitsFn base_fn = [&net](std::span<const int> ids) { return net.base().forward(ids).logits; };
    std::vector<std::string> finished_labels;

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
            stage_done(i, tag, "collect");

            stage = "preprocess";
            TaskCorpus corpus = build_task_corpus(store, tag, cfg.seq_len, fence);
            stage_done(i, tag, "preprocess");

            bool added_column = false;
            int task_id = -1;
            if (!registry.has(tag)) {
                stage = "add_column";
                added_column = true;
                const long column = static_cast<long>(net.column_count());
                task_id = registry.register_task(tag, column, source.metric()).task_id;
                net.add_column(task_id);
                detail::HeldoutSnapshot snap;
                snap.tokens = corpus.tokens.heldout;
                snap.texts = corpus.heldout_texts;
                const auto& stored = state.heldout.emplace(task_id, std::move(snap)).first->second;
                // backfill the matrix: before this column existed, queries
                // for the task were served by the frozen base alone, so the
                // earlier checkpoints' cells are computable right now
                if (!finished_labels.empty()) {
                    EvalRow pre;
                    pre.task_tag = tag;
                    pre.task_id = task_id;
                    pre.pre_training = true;
                    detail::score_snapshot(pre, base_fn, max_seq_len, stored, source.metric());
                    for (const auto& past : finished_labels) {
                        pre.checkpoint = past;
                        report.rows.push_back(pre);
                    }
                }
                stage_done(i, tag, "add_column");

                if (cfg.enable_meta && cfg.train.meta_inner_steps > 0) {
                    stage = "meta";
                    std::vector<StateDict> snapshots;
                    for (long e = 0; e < cfg.train.meta_episodes; ++e) {
                        const long want = std::min<long>(cfg.train.meta_support,
                                                         static_cast<long>(corpus.tokens.train.size()));
                        std::vector<size_t> order(corpus.tokens.train.size());
                        for (size_t k = 0; k < order.size(); ++k) order[k] = k;
                        Rng pick(Rng::derive(cfg.train.seed,
                                             0x400 + 16 * static_cast<uint64_t>(i) + static_cast<uint64_t>(e)));
                        std::vector<std::vector<int>> support;
                        support.reserve(static_cast<size_t>(want));
                        for (long k = 0; k < want; ++k) {
                            const size_t j = static_cast<size_t>(k) +
                                             static_cast<size_t>(pick.below(static_cast<long>(order.size()) - k));
                            std::swap(order[static_cast<size_t>(k)], order[j]);
                            support.push_back(corpus.tokens.train[order[static_cast<size_t>(k)]]);
                        }
                        snapshots.push_back(
                            meta_adapt(net, support, cfg.train.meta_inner_steps, cfg.train.meta_inner_lr)
                                .adapted);
                    }
                    meta_outer_step(net, snapshots, cfg.train.meta_outer_lr);
                    stage_done(i, tag, "meta");
                }

                stage = "train";
                TaskReport tr = train_task(net, task_id, corpus.tokens, cfg.train, nullptr,
                                           state.buffer.get());
                push_summary(label, "train", registry.by_id(task_id), tr);
                stage_done(i, tag, "train");
            } else {
                stage = "adapt";
                const TaskInfo info = registry.by_tag(tag);
                task_id = info.task_id;
                net.freeze_column(static_cast<size_t>(info.column));
                ensure_lora(info.column);
                TaskReport tr = train_task(net, task_id, corpus.tokens, cfg.train,
                                           fisher_or_null(info.column), state.buffer.get());
                push_summary(label, "adapt", info, tr);
                stage_done(i, tag, "adapt");
            }

            stage = "fisher";
            {
                const TaskInfo info = registry.by_tag(tag);
                ParamSet trained;
                if (!net.column(static_cast<size_t>(info.column)).frozen) {
                    for (auto& p : net.column_params(static_cast<size_t>(info.column)))
                        if (p.tensor.requires_grad()) trained.push_back(p);
                } else {
                    trained = lora_params_for_column(net, static_cast<size_t>(info.column));
                }
                const auto& snap = state.heldout.at(task_id);
                const auto& fisher_data = snap.tokens.empty() ? corpus.tokens.train : snap.tokens;
                state.fisher_by_column[info.column] =
                    estimate_fisher(net, trained, fisher_data, task_id, cfg.train.fisher_samples);
            }
            stage_done(i, tag, "fisher");

            if (added_column && cfg.refine_prior_with_lora && net.column_count() >= 2) {
                stage = "refine";
                const long prev_col = static_cast<long>(net.column_count()) - 2;
                const TaskInfo prev = registry.by_column(prev_col);
                ensure_lora(prev_col);
                TaskReport tr = train_task(net, prev.task_id, corpus.tokens, cfg.train,
                                           fisher_or_null(prev_col), state.buffer.get());
                push_summary(label, "refine", prev, tr);
                stage_done(i, tag, "refine");
            }

            stage = "evaluate";
            for (const auto& t : registry.tasks()) {
                const auto& snap = state.heldout.at(t.task_id);
                EvalRow row;
                row.checkpoint = label;
                row.task_tag = t.tag;
                row.task_id = t.task_id;
                LogitsFn fn = [&net, id = t.task_id](std::span<const int> ids) {
                    return forward_task(net, ids, id);
                };
                detail::score_snapshot(row, fn, max_seq_len, snap, t.metric);
                report.rows.push_back(std::move(row));
            }
            stage_done(i, tag, "evaluate");
            finished_labels.push_back(label);
        } catch (const std::exception& e) {
            report.failures.push_back(label + ":" + stage + ": " + e.what());
            report.completed = false;
            break;
        }
    }

    report.columns = static_cast<long>(net.column_count());
    report.store_count = store.count();
    detail::persist_orchestrate(cfg.out_dir, net, registry, state, report);
    if (!cfg.out_dir.empty())
        write_file_atomic(cfg.out_dir / "report.json", report_to_json(report, cfg).dump(2) + "\n");
    return report;
}

} // namespace proglm
