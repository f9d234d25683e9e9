#pragma once

#include <cstdint>
#include <vector>

#include "mote/expert.hpp"
#include "mote/prototypes.hpp"

namespace mote {

// One expert's diagnosis of a sample: its adapted feature, cosine logits
// against every pool class, the top-2 values, the self-confidence score and
// whether the argmax landed inside the expert's filtering scope.
struct ExpertVerdict {
    std::int32_t expert_id = 0;
    Vector feature;
    Vector sims;  // aligned with pool.class_ids()
    std::int32_t predicted_class = 0;
    double z1 = 0.0;
    double z2 = 0.0;
    double scs = 0.0;
    bool reliable = false;
};

enum class GammaMode { Adaptive, Fixed };

struct InferenceConfig {
    bool filtering = true;
    bool confidence_reweight = true;
    bool scs_reweight = true;
    GammaMode gamma_mode = GammaMode::Adaptive;
    double gamma = 1.0;         // used only in Fixed mode
    bool scs_alt_weight = false;  // variant scoring for the scs-only setting: w = s instead of 1 + s

    // Standard ablation rungs: 1 = plain prototype voting over all experts,
    // 2 = + reliability filtering, 3 = + confidence weights, 4 = + scs
    // weights (without confidence), 5 = full method with adaptive gamma.
    static InferenceConfig ablation(int tag);
    // Recovers the rung from the flags; 0 when the combination matches none.
    int ablation_tag() const;
};

// Self-confidence score: relative top-2 margin (z1 - z2) / z1, clamped to be
// total: nonpositive z1 scores 0.
double scs_score(double z1, double z2);

// Fusion weight for one expert. The base term is its top confidence z1 (or 1
// when confidence weighting is off); the margin term adds gamma * s, where
// adaptive mode ties gamma to the base. Clamped at zero so anti-correlated
// experts cannot flip the fused feature.
double expert_weight(double z1, double s, const InferenceConfig& cfg);

// Weighted sum of features in the given order. All-zero weights fall back to
// a uniform combination.
Vector fuse(const std::vector<Vector>& features, const std::vector<double>& weights);

ExpertVerdict evaluate_expert(const AdapterExpert& expert, const PrototypePool& pool,
                              const Vector& h_out, const Vector& h_msa);

struct PredictionResult {
    std::int32_t predicted_class = 0;
    std::int32_t predicted_task = 0;
    std::vector<std::int32_t> reliable_ids;
    std::vector<std::int32_t> kept_ids;  // experts that contributed to the fusion
    std::vector<double> weights_used;    // aligned with kept_ids
    Vector fused;
    std::vector<ExpertVerdict> verdicts;  // ascending expert id
};

// Full decision procedure: evaluate every expert, keep the reliable ones
// (all of them when filtering is off, or when no expert is reliable), fuse
// their features by weight, then classify the fused feature against the
// whole pool. A single kept expert short-circuits to its feature unchanged.
PredictionResult predict(const Vector& h_out, const Vector& h_msa,
                         const std::vector<AdapterExpert>& experts, const PrototypePool& pool,
                         const InferenceConfig& cfg);

}  // namespace mote
