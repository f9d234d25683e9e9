#include "mote/prototypes.hpp"

#include <algorithm>
#include <limits>

#include "binio.hpp"

namespace mote {

void PrototypePool::insert(Prototype p) {
    if (p.vec.empty()) throw ValidationError("pool: empty prototype vector");
    check_finite(p.vec, "prototype");
    if (norm(p.vec) < kNormEps)
        throw ValidationError("pool: zero-norm prototype for class " +
                              std::to_string(p.class_id));
    if (!protos_.empty() && protos_.begin()->second.vec.size() != p.vec.size())
        throw ValidationError("pool: prototype dim mismatch");
    if (contains(p.class_id))
        throw ValidationError("pool: duplicate prototype for class " +
                              std::to_string(p.class_id));
    std::int32_t id = p.class_id;
    protos_.emplace(id, std::move(p));
    class_ids_.insert(std::lower_bound(class_ids_.begin(), class_ids_.end(), id), id);
}

const Prototype& PrototypePool::at(std::int32_t class_id) const {
    auto it = protos_.find(class_id);
    if (it == protos_.end())
        throw ValidationError("pool: no prototype for class " + std::to_string(class_id));
    return it->second;
}

void PrototypePool::set_scope(std::int32_t expert_id, std::set<std::int32_t> classes) {
    if (classes.empty()) throw ValidationError("pool: empty scope for expert " +
                                               std::to_string(expert_id));
    scopes_[expert_id] = std::move(classes);
}

void PrototypePool::extend_all_scopes(const std::vector<std::int32_t>& classes) {
    for (auto& [expert_id, scope] : scopes_) scope.insert(classes.begin(), classes.end());
}

const std::set<std::int32_t>& PrototypePool::scope_of(std::int32_t expert_id) const {
    auto it = scopes_.find(expert_id);
    if (it == scopes_.end())
        throw ValidationError("pool: no scope registered for expert " +
                              std::to_string(expert_id));
    return it->second;
}

bool PrototypePool::in_scope(std::int32_t expert_id, std::int32_t class_id) const {
    auto it = scopes_.find(expert_id);
    return it != scopes_.end() && it->second.count(class_id) != 0;
}

std::vector<Prototype> compute_prototypes(const AdapterExpert& expert,
                                          const EmbeddingDataset& train) {
    if (!expert.trained) throw ValidationError("compute_prototypes: expert not trained");
    if (train.class_ids != expert.scope)
        throw ValidationError("compute_prototypes: dataset classes differ from expert scope");

    std::vector<Prototype> out;
    out.reserve(train.class_ids.size());
    for (std::int32_t cls : train.class_ids) {
        Vector sum(train.dim, 0.0);
        std::size_t count = 0;
        for (const Sample& s : train.samples) {
            if (s.label != cls) continue;
            Vector f = adapter_forward(expert, s.features, train.msa_of(s));
            for (std::size_t k = 0; k < train.dim; ++k) sum[k] += f[k];
            ++count;
        }
        if (count == 0)
            throw ValidationError("compute_prototypes: class " + std::to_string(cls) +
                                  " has no samples");
        for (double& x : sum) x /= static_cast<double>(count);
        Prototype p;
        p.class_id = cls;
        p.task_id = expert.task_id;
        p.origin = expert.task_id;
        p.vec = std::move(sum);
        out.push_back(std::move(p));
    }
    return out;
}

namespace {

// Per-expert class mean, same summation as compute_prototypes.
Vector class_mean_under(const AdapterExpert& expert, const EmbeddingDataset& data,
                        std::int32_t cls) {
    Vector sum(data.dim, 0.0);
    std::size_t count = 0;
    for (const Sample& s : data.samples) {
        if (s.label != cls) continue;
        Vector f = adapter_forward(expert, s.features, data.msa_of(s));
        for (std::size_t k = 0; k < data.dim; ++k) sum[k] += f[k];
        ++count;
    }
    if (count == 0)
        throw ValidationError("overflow synthesis: class " + std::to_string(cls) +
                              " has no samples");
    for (double& x : sum) x /= static_cast<double>(count);
    return sum;
}

std::vector<double> merge_weights(const std::vector<double>& scores, MergeWeighting weighting) {
    std::size_t m = scores.size();
    std::vector<double> u(m, 0.0);
    switch (weighting) {
        case MergeWeighting::ClampedNormalized: {
            double denom = 0.0;
            for (double s : scores) denom += std::max(s, 0.0);
            if (denom <= 0.0) {
                // Every expert anti-correlates; fall back to a plain average.
                for (double& x : u) x = 1.0 / static_cast<double>(m);
            } else {
                for (std::size_t k = 0; k < m; ++k) u[k] = std::max(scores[k], 0.0) / denom;
            }
            return u;
        }
        case MergeWeighting::Softmax:
            return softmax(scores);
        case MergeWeighting::Raw: {
            double mass = 0.0;
            for (double s : scores) mass += std::abs(s);
            if (mass < kNormEps) {
                for (double& x : u) x = 1.0 / static_cast<double>(m);
                return u;
            }
            return scores;
        }
    }
    throw InternalError("overflow synthesis: unknown merge weighting");
}

}  // namespace

std::vector<Prototype> synthesize_overflow_prototypes(const std::vector<AdapterExpert>& experts,
                                                      PrototypePool& pool,
                                                      const EmbeddingDataset& new_train,
                                                      std::int32_t new_task_id,
                                                      MergeWeighting weighting) {
    if (experts.empty()) throw ValidationError("overflow synthesis: no experts");
    for (const AdapterExpert& e : experts)
        if (!e.trained)
            throw ValidationError("overflow synthesis: expert " + std::to_string(e.task_id) +
                                  " not trained");
    if (new_train.samples.empty()) throw ValidationError("overflow synthesis: empty dataset");
    for (std::int32_t cls : new_train.class_ids)
        if (pool.contains(cls))
            throw ValidationError("overflow synthesis: class " + std::to_string(cls) +
                                  " already has a prototype");

    std::vector<Prototype> out;
    out.reserve(new_train.class_ids.size());
    for (std::int32_t cls : new_train.class_ids) {
        std::vector<Vector> per_expert(experts.size());
        std::vector<double> scores(experts.size());
        for (std::size_t k = 0; k < experts.size(); ++k) {
            per_expert[k] = class_mean_under(experts[k], new_train, cls);
            // Best similarity against the expert's own training-scope
            // prototypes: how much this expert's view of the new class looks
            // like something it genuinely knows.
            double best = -std::numeric_limits<double>::infinity();
            for (std::int32_t own : experts[k].scope) {
                double c = cosine(per_expert[k], pool.at(own).vec);
                if (c > best) best = c;
            }
            scores[k] = best;
        }
        std::vector<double> u = merge_weights(scores, weighting);
        Vector merged(new_train.dim, 0.0);
        for (std::size_t k = 0; k < experts.size(); ++k)
            for (std::size_t i = 0; i < new_train.dim; ++i) merged[i] += u[k] * per_expert[k][i];
        Prototype p;
        p.class_id = cls;
        p.task_id = new_task_id;
        p.origin = kMergedOrigin;
        p.vec = std::move(merged);
        out.push_back(std::move(p));
    }
    pool.extend_all_scopes(new_train.class_ids);
    return out;
}

namespace {
constexpr std::uint32_t kPoolVersion = 1;
}

void save_pool(const PrototypePool& pool, const std::string& path) {
    if (pool.empty()) throw ValidationError("save_pool: empty pool");
    std::size_t d = pool.prototypes().begin()->second.vec.size();
    std::string buf;
    buf += "MOTP";
    binio::put_u32(buf, kPoolVersion);
    binio::put_u32(buf, static_cast<std::uint32_t>(d));
    binio::put_u32(buf, static_cast<std::uint32_t>(pool.size()));
    for (const auto& [cls, p] : pool.prototypes()) {
        binio::put_u32(buf, static_cast<std::uint32_t>(cls));
        binio::put_u32(buf, static_cast<std::uint32_t>(p.task_id));
        binio::put_u32(buf, static_cast<std::uint32_t>(p.origin));
        for (double x : p.vec) binio::put_f64(buf, x);
    }
    binio::write_whole_file(path, buf);
}

PrototypePool load_pool(const std::string& path) {
    std::string buf = binio::read_whole_file(path);
    binio::ByteReader r(buf, path);
    if (r.raw(4) != "MOTP")
        throw FileFormatError(FileFault::BadMagic, path + ": bad magic, not a pool checkpoint");
    std::uint32_t version = r.u32();
    if (version != kPoolVersion)
        throw FileFormatError(FileFault::BadVersion,
                              path + ": unsupported version " + std::to_string(version));
    std::uint32_t d = r.u32();
    std::uint32_t count = r.u32();
    constexpr std::uint32_t kMaxId =
        static_cast<std::uint32_t>(std::numeric_limits<std::int32_t>::max());
    PrototypePool pool;
    for (std::uint32_t i = 0; i < count; ++i) {
        Prototype p;
        std::uint32_t cls = r.u32();
        std::uint32_t task = r.u32();
        if (cls > kMaxId || task > kMaxId)
            throw FileFormatError(FileFault::LabelRange, path + ": id out of range");
        p.class_id = static_cast<std::int32_t>(cls);
        p.task_id = static_cast<std::int32_t>(task);
        p.origin = static_cast<std::int32_t>(r.u32());
        if (p.origin < 0 && p.origin != kMergedOrigin)
            throw FileFormatError(FileFault::LabelRange, path + ": bad origin " +
                                                             std::to_string(p.origin));
        p.vec.resize(d);
        for (std::uint32_t k = 0; k < d; ++k) p.vec[k] = r.f64();
        pool.insert(std::move(p));
    }
    r.expect_end();
    return pool;
}

}  // namespace mote
