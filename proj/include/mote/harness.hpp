#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mote/dataset.hpp"
#include "mote/expert.hpp"
#include "mote/inference.hpp"
#include "mote/metrics.hpp"
#include "mote/prototypes.hpp"

namespace mote {

// Adapter budget meaning "never synthesize, always train".
inline constexpr std::size_t kUnlimitedAdapters = static_cast<std::size_t>(-1);

struct HarnessOptions {
    std::size_t adapter_limit = kUnlimitedAdapters;  // M: stages beyond it get merged prototypes
    std::size_t bottleneck = 16;
    AdapterMode mode = AdapterMode::Par;
    MergeWeighting merge_weighting = MergeWeighting::ClampedNormalized;
    std::string diagnostics_path;  // per-sample JSONL for the final stage; empty = off
    std::size_t timing_warmup = 10;
};

// Everything the learner carries between stages. Copyable, so tests can
// snapshot the state as of any stage.
struct TrainedState {
    std::vector<AdapterExpert> experts;
    PrototypePool pool;
    std::size_t stages_done = 0;
};

// Consume one task: train a fresh expert and its prototypes, or synthesize
// merged prototypes once the adapter budget is exhausted. The task's training
// data is dropped afterwards; stages later than t must never see it.
void advance_stage(TrainedState& state, TaskData& task, const TrainConfig& train_cfg,
                   const HarnessOptions& opts, std::uint64_t protocol_seed);

struct SamplePrediction {
    std::int32_t label = 0;
    std::int32_t true_task = 0;
    std::int32_t predicted_class = 0;
    std::int32_t predicted_task = 0;
};

struct EvalOutcome {
    double class_accuracy = 0.0;
    double task_accuracy = 0.0;
    std::vector<SamplePrediction> predictions;  // in dataset sample order
};

// Classify every sample of a test set. Fans out across workers when
// MOTE_THREADS allows (results land in per-sample slots, so worker count
// never changes the outcome). Optionally records per-sample wall-clock
// durations and per-sample diagnostic JSON lines.
EvalOutcome evaluate_dataset(const TrainedState& state, const EmbeddingDataset& test,
                             const InferenceConfig& cfg, std::vector<double>* durations = nullptr,
                             std::vector<std::string>* diagnostics = nullptr);

struct TimingReport {
    std::size_t timed_samples = 0;
    std::size_t warmup = 0;
    double mean_s = 0.0;
    double median_s = 0.0;
    double p95_s = 0.0;
};

// Summarize per-sample durations, discarding the first `warmup` entries.
// Needs at least 100 timed samples to say anything.
TimingReport timing_report(const std::vector<double>& durations, std::size_t warmup);

// Serial, per-sample-clocked inference over a query set, for timing studies
// where worker contention would pollute the measurements.
TimingReport time_inference(const TrainedState& state, const EmbeddingDataset& queries,
                            const InferenceConfig& cfg, std::size_t warmup = 10);

struct RunMetrics {
    AccuracyMatrix matrix;
    std::vector<double> avg_curve;       // mean of row t (equal task weight)
    std::vector<double> weighted_curve;  // union accuracy over all seen test sets
    std::vector<double> af_curve;        // 0 at stage 1
    std::vector<double> tia_curve;       // task-identify accuracy, cumulative
    double final_avg = 0.0;
    double last_union = 0.0;  // final-stage accuracy over the union of test sets
    double last_task = 0.0;   // final-stage accuracy on the newest task alone
    double af_final = 0.0;
    std::optional<TimingReport> timing;
    std::uint64_t seed = 0;
    std::string config_json;  // serialized snapshot of every knob that shaped the run
};

struct MemoryReport {
    std::size_t expert_count = 0;
    std::size_t prototype_count = 0;
    std::size_t adapter_parameters = 0;
    std::size_t adapter_bytes = 0;
    std::size_t prototype_bytes = 0;
    // What a scheme keeping one prototype per class per expert would hold.
    std::size_t counterfactual_prototype_count = 0;
    std::size_t bytes_per_weight = 4;
};

// Storage accounting at checkpoint precision (f32 by default, even though
// compute runs in f64).
MemoryReport memory_report(const std::vector<AdapterExpert>& experts, const PrototypePool& pool,
                           std::size_t stage_count, std::size_t bytes_per_weight = 4);

struct RunOutput {
    RunMetrics metrics;
    MemoryReport memory;
    TrainedState state;
};

// Full sequential protocol: consume tasks in order, after each stage fill the
// accuracy-matrix row by evaluating every seen task's test set. All
// randomness derives from `seed`.
RunOutput run_protocol(std::vector<TaskData> tasks, const TrainConfig& train_cfg,
                       const InferenceConfig& infer_cfg, const HarnessOptions& opts,
                       std::uint64_t seed);

RunOutput run_protocol(const EmbeddingDataset& dataset, const Protocol& protocol,
                       const TrainConfig& train_cfg, const InferenceConfig& infer_cfg,
                       const HarnessOptions& opts);

RunOutput run_protocol(const std::vector<EmbeddingDataset>& datasets, const Protocol& protocol,
                       const TrainConfig& train_cfg, const InferenceConfig& infer_cfg,
                       const HarnessOptions& opts);

// Canonical JSON rendering of a run. Timing is the one nondeterministic part
// and can be left out, which is how reproducibility gets checked.
std::string metrics_json_string(const RunMetrics& metrics, const MemoryReport& memory,
                                bool include_timing = true);
void write_metrics_json(const std::string& path, const RunMetrics& metrics,
                        const MemoryReport& memory, bool include_timing = true);

// Flat per-stage table: stage, avg, af, tia, last.
void write_stage_csv(const std::string& path, const RunMetrics& metrics);

// Serialize the inference configuration (for config snapshots).
std::string inference_config_json(const InferenceConfig& cfg);

// Worker count for evaluation fan-out: hardware concurrency capped by the
// MOTE_THREADS environment variable (0 = serial).
std::size_t worker_count();

}  // namespace mote
