#include "mote/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

#include <json.hpp>

namespace mote {

namespace {

// Stream labels for per-stage randomness derived from the protocol seed.
constexpr std::uint64_t kInitSalt = 301;
constexpr std::uint64_t kTrainSalt = 302;

}  // namespace

void advance_stage(TrainedState& state, TaskData& task, const TrainConfig& train_cfg,
                   const HarnessOptions& opts, std::uint64_t protocol_seed) {
    if (task.index != state.stages_done)
        throw ValidationError("advance_stage: expected stage " +
                              std::to_string(state.stages_done) + ", got task " +
                              std::to_string(task.index));
    if (opts.adapter_limit == 0) throw ValidationError("advance_stage: adapter limit must be >= 1");
    std::size_t t = state.stages_done;
    std::int32_t task_id = static_cast<std::int32_t>(t);

    if (t < opts.adapter_limit) {
        AdapterExpert expert =
            make_expert(task_id, task.train.dim, opts.bottleneck, opts.mode,
                        SeededRng::mix(protocol_seed, kInitSalt, t), task.class_ids);
        TrainConfig cfg = train_cfg;
        cfg.seed = SeededRng::mix(protocol_seed, kTrainSalt, t);
        train_task(expert, task.train, cfg);
        std::vector<Prototype> protos = compute_prototypes(expert, task.train);
        state.pool.set_scope(task_id, {task.class_ids.begin(), task.class_ids.end()});
        for (Prototype& p : protos) state.pool.insert(std::move(p));
        state.experts.push_back(std::move(expert));
    } else {
        std::vector<Prototype> protos = synthesize_overflow_prototypes(
            state.experts, state.pool, task.train, task_id, opts.merge_weighting);
        for (Prototype& p : protos) state.pool.insert(std::move(p));
    }

    // The incremental contract: stage data is gone once the stage ends.
    task.train = EmbeddingDataset{};
    ++state.stages_done;
}

std::size_t worker_count() {
    std::size_t hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    const char* env = std::getenv("MOTE_THREADS");
    if (env != nullptr) {
        char* end = nullptr;
        long v = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || v < 0)
            throw ValidationError(std::string("MOTE_THREADS must be a nonnegative integer, got '") +
                                  env + "'");
        if (v == 0) return 1;
        hw = std::min<std::size_t>(hw, static_cast<std::size_t>(v));
    }
    return std::max<std::size_t>(hw, 1);
}

namespace {

std::string diagnostic_line(std::size_t index, const Sample& s, const PredictionResult& r,
                            std::int32_t true_task) {
    nlohmann::json j;
    j["sample"] = index;
    j["label"] = s.label;
    j["true_task"] = true_task;
    j["predicted_class"] = r.predicted_class;
    j["predicted_task"] = r.predicted_task;
    j["reliable"] = r.reliable_ids;
    j["kept"] = r.kept_ids;
    j["weights"] = r.weights_used;
    j["fused"] = r.fused;
    nlohmann::json verdicts = nlohmann::json::array();
    for (const ExpertVerdict& v : r.verdicts) {
        nlohmann::json jv;
        jv["expert"] = v.expert_id;
        jv["predicted_class"] = v.predicted_class;
        jv["z1"] = v.z1;
        jv["z2"] = v.z2;
        jv["scs"] = v.scs;
        jv["reliable"] = v.reliable;
        verdicts.push_back(std::move(jv));
    }
    j["verdicts"] = std::move(verdicts);
    return j.dump();
}

}  // namespace

EvalOutcome evaluate_dataset(const TrainedState& state, const EmbeddingDataset& test,
                             const InferenceConfig& cfg, std::vector<double>* durations,
                             std::vector<std::string>* diagnostics) {
    if (test.samples.empty()) throw ValidationError("evaluate_dataset: empty test set");
    std::size_t n = test.samples.size();
    EvalOutcome out;
    out.predictions.resize(n);
    std::vector<double> local_durations(durations != nullptr ? n : 0);
    std::vector<std::string> local_diag(diagnostics != nullptr ? n : 0);

    std::size_t workers = std::min(worker_count(), n);
    std::exception_ptr first_error;
    std::mutex error_mutex;

    auto run_range = [&](std::size_t lo, std::size_t hi) {
        try {
            for (std::size_t i = lo; i < hi; ++i) {
                const Sample& s = test.samples[i];
                std::int32_t true_task = state.pool.task_of(s.label);
                std::chrono::steady_clock::time_point t0;
                if (durations != nullptr) t0 = std::chrono::steady_clock::now();
                PredictionResult r =
                    predict(s.features, test.msa_of(s), state.experts, state.pool, cfg);
                if (durations != nullptr) {
                    auto t1 = std::chrono::steady_clock::now();
                    local_durations[i] = std::chrono::duration<double>(t1 - t0).count();
                }
                out.predictions[i] = {s.label, true_task, r.predicted_class, r.predicted_task};
                if (diagnostics != nullptr) local_diag[i] = diagnostic_line(i, s, r, true_task);
            }
        } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!first_error) first_error = std::current_exception();
        }
    };

    if (workers <= 1) {
        run_range(0, n);
    } else {
        std::vector<std::thread> pool;
        pool.reserve(workers);
        std::size_t chunk = (n + workers - 1) / workers;
        for (std::size_t w = 0; w < workers; ++w) {
            std::size_t lo = w * chunk;
            std::size_t hi = std::min(n, lo + chunk);
            if (lo >= hi) break;
            pool.emplace_back(run_range, lo, hi);
        }
        for (std::thread& th : pool) th.join();
    }
    if (first_error) std::rethrow_exception(first_error);

    std::size_t class_correct = 0;
    std::size_t task_correct = 0;
    for (const SamplePrediction& p : out.predictions) {
        if (p.predicted_class == p.label) ++class_correct;
        if (p.predicted_task == p.true_task) ++task_correct;
    }
    out.class_accuracy = static_cast<double>(class_correct) / static_cast<double>(n);
    out.task_accuracy = static_cast<double>(task_correct) / static_cast<double>(n);

    if (durations != nullptr)
        durations->insert(durations->end(), local_durations.begin(), local_durations.end());
    if (diagnostics != nullptr)
        diagnostics->insert(diagnostics->end(), local_diag.begin(), local_diag.end());
    return out;
}

TimingReport timing_report(const std::vector<double>& durations, std::size_t warmup) {
    if (durations.size() < warmup + 100)
        throw ValidationError("timing_report: need at least " + std::to_string(warmup + 100) +
                              " samples, got " + std::to_string(durations.size()));
    std::vector<double> timed(durations.begin() + static_cast<std::ptrdiff_t>(warmup),
                              durations.end());
    TimingReport rep;
    rep.warmup = warmup;
    rep.timed_samples = timed.size();
    double sum = 0.0;
    for (double d : timed) sum += d;
    rep.mean_s = sum / static_cast<double>(timed.size());
    std::sort(timed.begin(), timed.end());
    std::size_t n = timed.size();
    rep.median_s = n % 2 == 1 ? timed[n / 2] : 0.5 * (timed[n / 2 - 1] + timed[n / 2]);
    std::size_t p95_idx = static_cast<std::size_t>(std::min<double>(
        static_cast<double>(n - 1), std::ceil(0.95 * static_cast<double>(n)) - 1.0));
    rep.p95_s = timed[p95_idx];
    return rep;
}

TimingReport time_inference(const TrainedState& state, const EmbeddingDataset& queries,
                            const InferenceConfig& cfg, std::size_t warmup) {
    if (queries.samples.empty()) throw ValidationError("time_inference: no queries");
    std::vector<double> durations;
    durations.reserve(queries.samples.size());
    for (const Sample& s : queries.samples) {
        auto t0 = std::chrono::steady_clock::now();
        PredictionResult r = predict(s.features, queries.msa_of(s), state.experts, state.pool, cfg);
        auto t1 = std::chrono::steady_clock::now();
        // Keep the result alive past the clock read so the call cannot be
        // hoisted or elided.
        if (r.predicted_task < 0) throw InternalError("time_inference: negative task");
        durations.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    return timing_report(durations, warmup);
}

MemoryReport memory_report(const std::vector<AdapterExpert>& experts, const PrototypePool& pool,
                           std::size_t stage_count, std::size_t bytes_per_weight) {
    MemoryReport rep;
    rep.bytes_per_weight = bytes_per_weight;
    rep.expert_count = experts.size();
    rep.prototype_count = pool.size();
    for (const AdapterExpert& e : experts)
        rep.adapter_parameters += e.dim * e.bottleneck * 2;
    rep.adapter_bytes = rep.adapter_parameters * bytes_per_weight;
    std::size_t d = pool.empty() ? 0 : pool.prototypes().begin()->second.vec.size();
    rep.prototype_bytes = pool.size() * d * bytes_per_weight;
    rep.counterfactual_prototype_count = stage_count * pool.size();
    return rep;
}

namespace {

std::string harness_config_json(const TrainConfig& train_cfg, const InferenceConfig& infer_cfg,
                                const HarnessOptions& opts, std::size_t stages) {
    nlohmann::json j;
    j["train"] = {{"lr0", train_cfg.lr0},
                  {"weight_decay", train_cfg.weight_decay},
                  {"epochs", train_cfg.epochs},
                  {"batch_size", train_cfg.batch_size},
                  {"momentum", train_cfg.momentum}};
    j["inference"] = nlohmann::json::parse(inference_config_json(infer_cfg));
    j["adapter_limit"] = opts.adapter_limit == kUnlimitedAdapters
                             ? nlohmann::json("unlimited")
                             : nlohmann::json(opts.adapter_limit);
    j["bottleneck"] = opts.bottleneck;
    j["adapter_mode"] = opts.mode == AdapterMode::Seq ? "seq" : "par";
    switch (opts.merge_weighting) {
        case MergeWeighting::ClampedNormalized: j["merge_weighting"] = "clamped-normalized"; break;
        case MergeWeighting::Softmax: j["merge_weighting"] = "softmax"; break;
        case MergeWeighting::Raw: j["merge_weighting"] = "raw"; break;
    }
    j["stages"] = stages;
    return j.dump();
}

}  // namespace

std::string inference_config_json(const InferenceConfig& cfg) {
    nlohmann::json j;
    j["filtering"] = cfg.filtering;
    j["confidence_reweight"] = cfg.confidence_reweight;
    j["scs_reweight"] = cfg.scs_reweight;
    j["gamma"] = cfg.gamma_mode == GammaMode::Adaptive ? nlohmann::json("adaptive")
                                                       : nlohmann::json(cfg.gamma);
    j["scs_alt_weight"] = cfg.scs_alt_weight;
    j["ablation_tag"] = cfg.ablation_tag();
    return j.dump();
}

RunOutput run_protocol(std::vector<TaskData> tasks, const TrainConfig& train_cfg,
                       const InferenceConfig& infer_cfg, const HarnessOptions& opts,
                       std::uint64_t seed) {
    if (tasks.empty()) throw ValidationError("run_protocol: no tasks");
    std::size_t T = tasks.size();
    RunOutput out;
    out.metrics.seed = seed;
    out.metrics.config_json = harness_config_json(train_cfg, infer_cfg, opts, T);

    std::vector<double> final_durations;
    std::vector<std::string> final_diag;

    for (std::size_t t = 0; t < T; ++t) {
        advance_stage(out.state, tasks[t], train_cfg, opts, seed);

        bool final_stage = t + 1 == T;
        std::vector<double>* durations = final_stage ? &final_durations : nullptr;
        std::vector<std::string>* diag =
            final_stage && !opts.diagnostics_path.empty() ? &final_diag : nullptr;

        std::vector<double> row;
        row.reserve(t + 1);
        std::vector<std::int32_t> pred_tasks;
        std::vector<std::int32_t> true_tasks;
        std::size_t union_correct = 0;
        std::size_t union_total = 0;
        for (std::size_t j = 0; j <= t; ++j) {
            EvalOutcome ev = evaluate_dataset(out.state, tasks[j].test, infer_cfg, durations, diag);
            row.push_back(ev.class_accuracy);
            for (const SamplePrediction& p : ev.predictions) {
                pred_tasks.push_back(p.predicted_task);
                true_tasks.push_back(p.true_task);
                if (p.predicted_class == p.label) ++union_correct;
            }
            union_total += ev.predictions.size();
        }
        out.metrics.matrix.push_row(std::move(row));
        out.metrics.avg_curve.push_back(avg_accuracy(out.metrics.matrix, t + 1));
        out.metrics.weighted_curve.push_back(static_cast<double>(union_correct) /
                                             static_cast<double>(union_total));
        out.metrics.af_curve.push_back(t == 0 ? 0.0 : avg_forgetting(out.metrics.matrix, t + 1));
        out.metrics.tia_curve.push_back(task_identify_accuracy(pred_tasks, true_tasks));
    }

    out.metrics.final_avg = out.metrics.avg_curve.back();
    out.metrics.last_union = out.metrics.weighted_curve.back();
    out.metrics.last_task = out.metrics.matrix.at(T - 1, T - 1);
    out.metrics.af_final = out.metrics.af_curve.back();
    if (final_durations.size() >= opts.timing_warmup + 100)
        out.metrics.timing = timing_report(final_durations, opts.timing_warmup);

    if (!opts.diagnostics_path.empty()) {
        std::ofstream f(opts.diagnostics_path, std::ios::trunc);
        if (!f) throw IoError("cannot open " + opts.diagnostics_path + " for writing");
        for (const std::string& line : final_diag) f << line << '\n';
        if (!f) throw IoError("write failed for " + opts.diagnostics_path);
    }

    out.memory = memory_report(out.state.experts, out.state.pool, T);
    return out;
}

RunOutput run_protocol(const EmbeddingDataset& dataset, const Protocol& protocol,
                       const TrainConfig& train_cfg, const InferenceConfig& infer_cfg,
                       const HarnessOptions& opts) {
    return run_protocol(make_splits(dataset, protocol), train_cfg, infer_cfg, opts, protocol.seed);
}

RunOutput run_protocol(const std::vector<EmbeddingDataset>& datasets, const Protocol& protocol,
                       const TrainConfig& train_cfg, const InferenceConfig& infer_cfg,
                       const HarnessOptions& opts) {
    return run_protocol(concat_protocols(datasets, protocol), train_cfg, infer_cfg, opts,
                        protocol.seed);
}

namespace {

nlohmann::json memory_json(const MemoryReport& m) {
    nlohmann::json j;
    j["expert_count"] = m.expert_count;
    j["prototype_count"] = m.prototype_count;
    j["adapter_parameters"] = m.adapter_parameters;
    j["adapter_bytes"] = m.adapter_bytes;
    j["prototype_bytes"] = m.prototype_bytes;
    j["counterfactual_prototype_count"] = m.counterfactual_prototype_count;
    j["bytes_per_weight"] = m.bytes_per_weight;
    return j;
}

}  // namespace

std::string metrics_json_string(const RunMetrics& metrics, const MemoryReport& memory,
                                bool include_timing) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["seed"] = metrics.seed;
    j["stages"] = metrics.matrix.stages();
    j["matrix"] = metrics.matrix.rows();
    j["avg_curve"] = metrics.avg_curve;
    j["weighted_curve"] = metrics.weighted_curve;
    j["af_curve"] = metrics.af_curve;
    j["tia_curve"] = metrics.tia_curve;
    j["final_avg"] = metrics.final_avg;
    j["last_union"] = metrics.last_union;
    j["last_task"] = metrics.last_task;
    j["af_final"] = metrics.af_final;
    j["memory"] = memory_json(memory);
    j["config"] = metrics.config_json.empty() ? nlohmann::json::object()
                                              : nlohmann::json::parse(metrics.config_json);
    if (include_timing && metrics.timing.has_value()) {
        const TimingReport& t = *metrics.timing;
        j["timing"] = {{"timed_samples", t.timed_samples},
                       {"warmup", t.warmup},
                       {"mean_s", t.mean_s},
                       {"median_s", t.median_s},
                       {"p95_s", t.p95_s}};
    }
    return j.dump(2) + "\n";
}

void write_metrics_json(const std::string& path, const RunMetrics& metrics,
                        const MemoryReport& memory, bool include_timing) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << metrics_json_string(metrics, memory, include_timing);
    if (!f) throw IoError("write failed for " + path);
}

void write_stage_csv(const std::string& path, const RunMetrics& metrics) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << "stage,avg,af,tia,last\n";
    char buf[128];
    for (std::size_t t = 0; t < metrics.matrix.stages(); ++t) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g\n", t + 1,
                      metrics.avg_curve[t], metrics.af_curve[t], metrics.tia_curve[t],
                      metrics.weighted_curve[t]);
        f << buf;
    }
    if (!f) throw IoError("write failed for " + path);
}

}  // namespace mote
