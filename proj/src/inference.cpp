#include "mote/inference.hpp"

#include <algorithm>

namespace mote {

InferenceConfig InferenceConfig::ablation(int tag) {
    InferenceConfig cfg;
    switch (tag) {
        case 1: cfg.filtering = false; cfg.confidence_reweight = false; cfg.scs_reweight = false; break;
        case 2: cfg.filtering = true; cfg.confidence_reweight = false; cfg.scs_reweight = false; break;
        case 3: cfg.filtering = true; cfg.confidence_reweight = true; cfg.scs_reweight = false; break;
        case 4: cfg.filtering = true; cfg.confidence_reweight = false; cfg.scs_reweight = true; break;
        case 5: cfg.filtering = true; cfg.confidence_reweight = true; cfg.scs_reweight = true; break;
        default:
            throw ValidationError("ablation tag must be 1..5, got " + std::to_string(tag));
    }
    cfg.gamma_mode = GammaMode::Adaptive;
    return cfg;
}

int InferenceConfig::ablation_tag() const {
    if (scs_alt_weight) return 0;
    if (!filtering && !confidence_reweight && !scs_reweight) return 1;
    if (filtering && !confidence_reweight && !scs_reweight) return 2;
    if (filtering && confidence_reweight && !scs_reweight) return 3;
    if (filtering && !confidence_reweight && scs_reweight && gamma_mode == GammaMode::Adaptive)
        return 4;
    if (filtering && confidence_reweight && scs_reweight && gamma_mode == GammaMode::Adaptive)
        return 5;
    return 0;
}

double scs_score(double z1, double z2) {
    if (z1 <= 0.0) return 0.0;
    return (z1 - z2) / std::max(z1, 1e-12);
}

double expert_weight(double z1, double s, const InferenceConfig& cfg) {
    double base = cfg.confidence_reweight ? z1 : 1.0;
    double s_eff = cfg.scs_reweight ? s : 0.0;
    double w;
    if (cfg.scs_reweight && !cfg.confidence_reweight && cfg.scs_alt_weight) {
        w = s_eff;  // margin-only variant, no base term
    } else {
        // Adaptive mode ties the margin scale to the base term, which is the
        // same expression as fixed mode with gamma = z1; the two must agree
        // bit for bit when they coincide.
        double gamma = cfg.gamma_mode == GammaMode::Adaptive ? base : cfg.gamma;
        w = base + gamma * s_eff;
    }
    return w > 0.0 ? w : 0.0;
}

Vector fuse(const std::vector<Vector>& features, const std::vector<double>& weights) {
    if (features.empty()) throw ValidationError("fuse: no features");
    if (features.size() != weights.size())
        throw ValidationError("fuse: " + std::to_string(features.size()) + " features vs " +
                              std::to_string(weights.size()) + " weights");
    std::size_t d = features[0].size();
    bool all_zero = true;
    for (double w : weights)
        if (w != 0.0) all_zero = false;

    Vector mix(d, 0.0);
    for (std::size_t i = 0; i < features.size(); ++i) {
        if (features[i].size() != d) throw ValidationError("fuse: feature dim mismatch");
        double w = all_zero ? 1.0 : weights[i];
        for (std::size_t k = 0; k < d; ++k) mix[k] += w * features[i][k];
    }
    return mix;
}

namespace {

struct SimScan {
    Vector sims;
    std::size_t best = 0;
    double z1 = 0.0;
    double z2 = 0.0;
};

// Cosine logits against every pool class, ascending class id, ties toward
// the lowest id. Both the per-expert verdicts and the final fused decision
// go through this one scan so their tie-breaking and rounding agree exactly.
SimScan scan_pool(const Vector& feature, const PrototypePool& pool) {
    const std::vector<std::int32_t>& ids = pool.class_ids();
    SimScan scan;
    scan.sims.resize(ids.size());
    double nf = norm(feature);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        scan.sims[i] = cosine_with_norm(feature, nf, pool.at(ids[i]).vec);
        if (scan.sims[i] > scan.sims[scan.best]) scan.best = i;
    }
    scan.z1 = scan.sims[scan.best];
    // Second-best over the remaining classes; a single-class pool scores 0
    // by convention so the margin degenerates to full confidence.
    if (ids.size() > 1) {
        bool first = true;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i == scan.best) continue;
            if (first || scan.sims[i] > scan.z2) scan.z2 = scan.sims[i];
            first = false;
        }
    }
    return scan;
}

}  // namespace

ExpertVerdict evaluate_expert(const AdapterExpert& expert, const PrototypePool& pool,
                              const Vector& h_out, const Vector& h_msa) {
    if (pool.empty()) throw ValidationError("evaluate_expert: empty pool");
    if (!expert.trained) throw ValidationError("evaluate_expert: expert not trained");
    ExpertVerdict v;
    v.expert_id = expert.task_id;
    v.feature = adapter_forward(expert, h_out, h_msa);
    SimScan scan = scan_pool(v.feature, pool);
    v.sims = std::move(scan.sims);
    v.predicted_class = pool.class_ids()[scan.best];
    v.z1 = scan.z1;
    v.z2 = scan.z2;
    v.scs = scs_score(v.z1, v.z2);
    v.reliable = pool.in_scope(expert.task_id, v.predicted_class);
    return v;
}

PredictionResult predict(const Vector& h_out, const Vector& h_msa,
                         const std::vector<AdapterExpert>& experts, const PrototypePool& pool,
                         const InferenceConfig& cfg) {
    if (experts.empty()) throw ValidationError("predict: no experts");
    for (const AdapterExpert& e : experts)
        if (!e.trained)
            throw ValidationError("predict: expert " + std::to_string(e.task_id) +
                                  " not trained");

    std::vector<std::size_t> order(experts.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return experts[a].task_id < experts[b].task_id;
    });

    PredictionResult res;
    res.verdicts.reserve(experts.size());
    for (std::size_t i : order)
        res.verdicts.push_back(evaluate_expert(experts[i], pool, h_out, h_msa));

    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < res.verdicts.size(); ++i) {
        if (res.verdicts[i].reliable) res.reliable_ids.push_back(res.verdicts[i].expert_id);
        if (!cfg.filtering || res.verdicts[i].reliable) kept.push_back(i);
    }
    if (kept.empty()) {
        // Every expert disowned the sample; dropping it is not an option, so
        // fall back to the full committee.
        kept.resize(res.verdicts.size());
        for (std::size_t i = 0; i < kept.size(); ++i) kept[i] = i;
    }
    for (std::size_t i : kept) res.kept_ids.push_back(res.verdicts[i].expert_id);

    if (kept.size() == 1) {
        res.fused = res.verdicts[kept[0]].feature;
        res.weights_used = {1.0};
    } else {
        std::vector<Vector> features;
        features.reserve(kept.size());
        for (std::size_t i : kept) {
            const ExpertVerdict& v = res.verdicts[i];
            features.push_back(v.feature);
            res.weights_used.push_back(expert_weight(v.z1, v.scs, cfg));
        }
        res.fused = fuse(features, res.weights_used);
    }

    SimScan final_scan = scan_pool(res.fused, pool);
    res.predicted_class = pool.class_ids()[final_scan.best];
    res.predicted_task = pool.task_of(res.predicted_class);
    return res;
}

}  // namespace mote
