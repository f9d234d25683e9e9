#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mote/numerics.hpp"

namespace mote {

struct Sample {
    std::int32_t label = 0;
    std::uint8_t split = 0;  // 0 = train, 1 = test; meaningful only when the dataset has splits
    Vector features;
    Vector msa;  // pre-mixing features for parallel adapters; empty when the dataset has none

    bool operator==(const Sample&) const = default;
};

// Frozen-backbone feature vectors with class labels. Immutable once built;
// safe to share across worker threads.
struct EmbeddingDataset {
    std::string name;
    std::size_t dim = 0;
    bool has_msa = false;
    bool has_split = false;
    std::vector<Sample> samples;
    std::vector<std::int32_t> class_ids;  // ascending, unique

    // Parallel-mode input for a sample; falls back to the main features when
    // the dataset carries no separate pre-mixing vectors.
    const Vector& msa_of(const Sample& s) const { return has_msa ? s.msa : s.features; }

    void rebuild_class_ids();
    void validate() const;
};

// Gaussian-cluster generator: class means drawn uniformly on a sphere of
// radius cluster_radius, isotropic noise of std noise_sigma around each mean.
// Difficulty is controlled by the noise_sigma / cluster_radius ratio.
struct SyntheticSpec {
    std::size_t n_classes = 0;
    std::size_t dim = 0;
    std::size_t samples_per_class = 0;
    double cluster_radius = 0.0;
    double noise_sigma = 0.0;
    double task_drift = 0.0;  // optional per-class mean offset along a shared direction
    std::uint64_t seed = 0;
};

EmbeddingDataset generate_synthetic(const SyntheticSpec& spec);

// The true class means the generator used, for nearest-true-mean oracles.
std::vector<Vector> synthetic_class_means(const SyntheticSpec& spec);

// Class-incremental split description: first stage takes base_classes classes
// (or `increment` when base_classes = 0), every later stage takes `increment`.
struct Protocol {
    std::size_t base_classes = 0;
    std::size_t increment = 0;
    std::vector<std::int32_t> class_order;  // empty = seeded shuffle of the dataset's classes
    std::uint64_t seed = 0;
    std::vector<std::string> stage_manifests;  // dataset names, cross-dataset mode only
};

struct TaskData {
    std::size_t index = 0;  // 0-based stage number
    std::string source;     // originating dataset name
    std::vector<std::int32_t> class_ids;  // sorted
    EmbeddingDataset train;
    EmbeddingDataset test;
};

// Number of stages the protocol yields over n_classes; throws ValidationError
// when n_classes is not expressible as base + k * increment.
std::size_t protocol_stage_count(const Protocol& protocol, std::size_t n_classes);

// Split one dataset into sequential tasks with disjoint class sets. Datasets
// without a stored split flag get a deterministic 80/20 per-class partition
// derived from the protocol seed.
std::vector<TaskData> make_splits(const EmbeddingDataset& dataset, const Protocol& protocol);

// Cross-dataset sequencing: dataset A's stages, then B's, then C's, with class
// ids offset so the combined namespace stays disjoint. base_classes applies to
// the first dataset only; a single dataset reduces exactly to make_splits.
std::vector<TaskData> concat_protocols(const std::vector<EmbeddingDataset>& datasets,
                                       const Protocol& protocol);

EmbeddingDataset read_embeddings(const std::string& path);
void write_embeddings(const EmbeddingDataset& dataset, const std::string& path);

// On-disk run description: {"name", "base", "increment", "seed", "datasets": [paths]}.
struct ProtocolManifest {
    std::string name;
    std::size_t base_classes = 0;
    std::size_t increment = 0;
    std::uint64_t seed = 0;
    std::vector<std::string> dataset_paths;  // resolved relative to the manifest file
};

ProtocolManifest load_manifest(const std::string& path);

}  // namespace mote
