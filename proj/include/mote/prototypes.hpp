#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mote/dataset.hpp"
#include "mote/expert.hpp"
#include "mote/numerics.hpp"

namespace mote {

// origin value for prototypes synthesized by merging expert opinions rather
// than computed by a single owning expert.
inline constexpr std::int32_t kMergedOrigin = -1;

struct Prototype {
    std::int32_t class_id = 0;
    std::int32_t task_id = 0;   // stage that introduced the class
    std::int32_t origin = 0;    // computing expert id, or kMergedOrigin
    Vector vec;

    bool operator==(const Prototype&) const = default;
};

// One prototype per class, plus each expert's filtering scope. The filtering
// scope starts as the expert's training scope and grows when later classes
// get merged prototypes instead of their own expert.
class PrototypePool {
public:
    void insert(Prototype p);
    bool contains(std::int32_t class_id) const { return protos_.count(class_id) != 0; }
    std::size_t size() const { return protos_.size(); }
    bool empty() const { return protos_.empty(); }
    const Prototype& at(std::int32_t class_id) const;
    std::int32_t task_of(std::int32_t class_id) const { return at(class_id).task_id; }

    // Ascending class ids; iteration and similarity scans follow this order.
    const std::vector<std::int32_t>& class_ids() const { return class_ids_; }
    const std::map<std::int32_t, Prototype>& prototypes() const { return protos_; }

    void set_scope(std::int32_t expert_id, std::set<std::int32_t> classes);
    void extend_all_scopes(const std::vector<std::int32_t>& classes);
    const std::set<std::int32_t>& scope_of(std::int32_t expert_id) const;
    bool in_scope(std::int32_t expert_id, std::int32_t class_id) const;

    bool operator==(const PrototypePool&) const = default;

private:
    std::map<std::int32_t, Prototype> protos_;
    std::map<std::int32_t, std::set<std::int32_t>> scopes_;
    std::vector<std::int32_t> class_ids_;
};

// Per class, the arithmetic mean of the expert's adapted features over the
// class's training samples. The dataset's class set must equal the expert's
// training scope.
std::vector<Prototype> compute_prototypes(const AdapterExpert& expert,
                                          const EmbeddingDataset& train);

// How per-expert similarity scores turn into merge weights for overflow
// prototypes. ClampedNormalized keeps the merge a convex combination; the
// alternatives exist for sensitivity experiments.
enum class MergeWeighting { ClampedNormalized, Softmax, Raw };

// Adapter-limited path for a task beyond the expert budget: each new class
// gets a merged prototype. Per expert k, the class mean under k's adapter is
// scored by its best cosine against k's own training-scope prototypes; the
// scores become merge weights. Every expert's filtering scope is extended by
// the new classes (otherwise no expert could ever claim them). Inserting the
// returned prototypes stays with the caller, as with compute_prototypes.
std::vector<Prototype> synthesize_overflow_prototypes(
    const std::vector<AdapterExpert>& experts, PrototypePool& pool,
    const EmbeddingDataset& new_train, std::int32_t new_task_id,
    MergeWeighting weighting = MergeWeighting::ClampedNormalized);

// Pool checkpoints persist prototypes only; filtering scopes are runtime
// state reconstructed from the experts plus the merged-class rule.
void save_pool(const PrototypePool& pool, const std::string& path);
PrototypePool load_pool(const std::string& path);

}  // namespace mote
