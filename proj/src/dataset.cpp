#include "mote/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <limits>
#include <set>
#include <string>

#include <json.hpp>

#include "binio.hpp"

namespace mote {

namespace {

// Stream labels for deriving independent sub-streams from one protocol seed.
constexpr std::uint64_t kOrderSalt = 101;
constexpr std::uint64_t kSplitSalt = 202;

}  // namespace

void EmbeddingDataset::rebuild_class_ids() {
    std::set<std::int32_t> ids;
    for (const Sample& s : samples) ids.insert(s.label);
    class_ids.assign(ids.begin(), ids.end());
}

void EmbeddingDataset::validate() const {
    std::set<std::int32_t> ids(class_ids.begin(), class_ids.end());
    if (ids.size() != class_ids.size())
        throw ValidationError("dataset " + name + ": duplicate class ids");
    for (const Sample& s : samples) {
        if (s.features.size() != dim)
            throw ValidationError("dataset " + name + ": feature dim " +
                                  std::to_string(s.features.size()) + " != " + std::to_string(dim));
        if (has_msa && s.msa.size() != dim)
            throw ValidationError("dataset " + name + ": msa dim mismatch");
        if (!has_msa && !s.msa.empty())
            throw ValidationError("dataset " + name + ": unexpected msa vector");
        if (!ids.count(s.label))
            throw ValidationError("dataset " + name + ": label " + std::to_string(s.label) +
                                  " not in class_ids");
    }
}

namespace {

void check_spec(const SyntheticSpec& spec) {
    if (spec.n_classes == 0) throw ValidationError("synthetic: n_classes must be positive");
    if (spec.dim < 2) throw ValidationError("synthetic: dim must be at least 2");
    if (spec.samples_per_class == 0)
        throw ValidationError("synthetic: samples_per_class must be positive");
    if (!(spec.cluster_radius > 0.0))
        throw ValidationError("synthetic: cluster_radius must be positive");
    if (!(spec.noise_sigma > 0.0)) throw ValidationError("synthetic: noise_sigma must be positive");
    if (spec.task_drift < 0.0) throw ValidationError("synthetic: task_drift must be nonnegative");
}

Vector random_unit(SeededRng& rng, std::size_t dim) {
    for (;;) {
        Vector v(dim);
        for (double& x : v) x = rng.normal();
        double n = norm(v);
        if (n > 1e-9) {
            for (double& x : v) x /= n;
            return v;
        }
    }
}

// Means on the sphere, plus the optional drift offset. Must consume the rng
// exactly the same way for the generator and the true-mean oracle.
std::vector<Vector> draw_class_means(const SyntheticSpec& spec, SeededRng& rng) {
    std::vector<Vector> means(spec.n_classes);
    for (std::size_t c = 0; c < spec.n_classes; ++c) {
        means[c] = random_unit(rng, spec.dim);
        for (double& x : means[c]) x *= spec.cluster_radius;
    }
    if (spec.task_drift > 0.0) {
        Vector u = random_unit(rng, spec.dim);
        for (std::size_t c = 0; c < spec.n_classes; ++c)
            for (std::size_t i = 0; i < spec.dim; ++i)
                means[c][i] += spec.task_drift * static_cast<double>(c) * u[i];
    }
    return means;
}

// Orthonormal basis from a random Gaussian matrix via modified Gram-Schmidt.
Matrix random_rotation(SeededRng& rng, std::size_t dim) {
    for (;;) {
        std::vector<Vector> cols(dim, Vector(dim));
        for (std::size_t j = 0; j < dim; ++j)
            for (std::size_t i = 0; i < dim; ++i) cols[j][i] = rng.normal();
        bool ok = true;
        for (std::size_t j = 0; j < dim && ok; ++j) {
            for (std::size_t i = 0; i < j; ++i) {
                double proj = dot(cols[i], cols[j]);
                for (std::size_t k = 0; k < dim; ++k) cols[j][k] -= proj * cols[i][k];
            }
            double n = norm(cols[j]);
            if (n < 1e-9) {
                ok = false;  // degenerate draw, start over
                break;
            }
            for (double& x : cols[j]) x /= n;
        }
        if (!ok) continue;
        Matrix r(dim, dim);
        for (std::size_t i = 0; i < dim; ++i)
            for (std::size_t j = 0; j < dim; ++j) r.at(i, j) = cols[j][i];
        return r;
    }
}

}  // namespace

std::vector<Vector> synthetic_class_means(const SyntheticSpec& spec) {
    check_spec(spec);
    SeededRng rng(spec.seed);
    return draw_class_means(spec, rng);
}

EmbeddingDataset generate_synthetic(const SyntheticSpec& spec) {
    check_spec(spec);
    SeededRng rng(spec.seed);
    std::vector<Vector> means = draw_class_means(spec, rng);
    Matrix rot = random_rotation(rng, spec.dim);

    EmbeddingDataset ds;
    ds.name = "synthetic";
    ds.dim = spec.dim;
    ds.has_msa = true;
    ds.has_split = false;
    ds.samples.reserve(spec.n_classes * spec.samples_per_class);
    for (std::size_t c = 0; c < spec.n_classes; ++c) {
        for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
            Sample s;
            s.label = static_cast<std::int32_t>(c);
            s.features.resize(spec.dim);
            for (std::size_t k = 0; k < spec.dim; ++k)
                s.features[k] = means[c][k] + spec.noise_sigma * rng.normal();
            s.msa = mat_vec(rot, s.features);
            ds.samples.push_back(std::move(s));
        }
    }
    ds.rebuild_class_ids();
    return ds;
}

std::size_t protocol_stage_count(const Protocol& protocol, std::size_t n_classes) {
    if (protocol.increment == 0) throw ValidationError("protocol: increment must be positive");
    if (n_classes == 0) throw ValidationError("protocol: no classes to split");
    if (protocol.base_classes == 0) {
        if (n_classes % protocol.increment != 0)
            throw ValidationError("protocol: " + std::to_string(n_classes) +
                                  " classes not divisible by increment " +
                                  std::to_string(protocol.increment));
        return n_classes / protocol.increment;
    }
    if (protocol.base_classes > n_classes)
        throw ValidationError("protocol: base stage larger than the class count");
    std::size_t rest = n_classes - protocol.base_classes;
    if (rest % protocol.increment != 0)
        throw ValidationError("protocol: " + std::to_string(n_classes) +
                              " classes not expressible as " +
                              std::to_string(protocol.base_classes) + " + k*" +
                              std::to_string(protocol.increment));
    return 1 + rest / protocol.increment;
}

namespace {

std::vector<std::int32_t> resolve_class_order(const EmbeddingDataset& dataset,
                                              const Protocol& protocol,
                                              std::uint64_t order_stream) {
    if (protocol.class_order.empty()) {
        std::vector<std::int32_t> order = dataset.class_ids;
        SeededRng rng(SeededRng::mix(protocol.seed, kOrderSalt, order_stream));
        rng.shuffle(order);
        return order;
    }
    std::vector<std::int32_t> sorted = protocol.class_order;
    std::sort(sorted.begin(), sorted.end());
    if (sorted != dataset.class_ids)
        throw ValidationError("protocol: class_order is not a permutation of the dataset classes");
    return protocol.class_order;
}

// Route one class's samples into train/test. Sample order within each
// partition follows dataset order regardless of the shuffle.
void split_class(const EmbeddingDataset& dataset, std::int32_t cls, std::uint64_t seed,
                 std::int32_t label_offset, EmbeddingDataset& train, EmbeddingDataset& test) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < dataset.samples.size(); ++i)
        if (dataset.samples[i].label == cls) idx.push_back(i);
    if (idx.empty())
        throw ValidationError("split: class " + std::to_string(cls) + " has no samples");

    std::vector<bool> is_test(dataset.samples.size(), false);
    if (dataset.has_split) {
        for (std::size_t i : idx) is_test[i] = dataset.samples[i].split == 1;
    } else {
        std::vector<std::size_t> shuffled = idx;
        SeededRng rng(SeededRng::mix(seed, kSplitSalt,
                                     static_cast<std::uint64_t>(cls + label_offset)));
        rng.shuffle(shuffled);
        std::size_t n_test = idx.size() / 5;
        for (std::size_t i = 0; i < n_test; ++i) is_test[shuffled[i]] = true;
    }
    for (std::size_t i : idx) {
        Sample s = dataset.samples[i];
        s.label += label_offset;
        s.split = is_test[i] ? 1 : 0;
        if (!dataset.has_msa) s.msa.clear();
        (is_test[i] ? test : train).samples.push_back(std::move(s));
    }
}

EmbeddingDataset empty_like(const EmbeddingDataset& dataset, const std::string& suffix) {
    EmbeddingDataset out;
    out.name = dataset.name + suffix;
    out.dim = dataset.dim;
    out.has_msa = dataset.has_msa;
    out.has_split = true;
    return out;
}

std::vector<TaskData> build_tasks(const EmbeddingDataset& dataset, const Protocol& protocol,
                                  const std::vector<std::int32_t>& order,
                                  std::size_t first_stage_classes, std::int32_t label_offset,
                                  std::size_t task_index_offset) {
    std::vector<TaskData> tasks;
    std::size_t pos = 0;
    std::size_t stage = 0;
    while (pos < order.size()) {
        std::size_t take = stage == 0 ? first_stage_classes : protocol.increment;
        TaskData task;
        task.index = task_index_offset + stage;
        task.source = dataset.name;
        task.train = empty_like(dataset, "/train");
        task.test = empty_like(dataset, "/test");
        for (std::size_t i = 0; i < take; ++i) {
            std::int32_t cls = order[pos + i];
            task.class_ids.push_back(cls + label_offset);
            split_class(dataset, cls, protocol.seed, label_offset, task.train, task.test);
        }
        std::sort(task.class_ids.begin(), task.class_ids.end());
        task.train.rebuild_class_ids();
        task.test.rebuild_class_ids();
        tasks.push_back(std::move(task));
        pos += take;
        ++stage;
    }
    return tasks;
}

}  // namespace

std::vector<TaskData> make_splits(const EmbeddingDataset& dataset, const Protocol& protocol) {
    dataset.validate();
    protocol_stage_count(protocol, dataset.class_ids.size());  // validates the arithmetic
    std::vector<std::int32_t> order = resolve_class_order(dataset, protocol, 0);
    std::size_t first = protocol.base_classes == 0 ? protocol.increment : protocol.base_classes;
    return build_tasks(dataset, protocol, order, first, 0, 0);
}

std::vector<TaskData> concat_protocols(const std::vector<EmbeddingDataset>& datasets,
                                       const Protocol& protocol) {
    if (datasets.empty()) throw ValidationError("concat: no datasets");
    if (!protocol.class_order.empty())
        throw ValidationError("concat: explicit class_order is only supported for one dataset");
    for (const EmbeddingDataset& ds : datasets) {
        ds.validate();
        if (ds.dim != datasets.front().dim)
            throw ValidationError("concat: dataset " + ds.name + " has dim " +
                                  std::to_string(ds.dim) + ", expected " +
                                  std::to_string(datasets.front().dim));
    }
    // Stage arithmetic must hold per dataset; a task never spans two of them.
    // The base stage belongs to the first dataset, later ones split purely by
    // increment.
    std::vector<TaskData> tasks;
    std::int32_t offset = 0;
    std::size_t task_base = 0;
    for (std::size_t k = 0; k < datasets.size(); ++k) {
        const EmbeddingDataset& ds = datasets[k];
        Protocol local = protocol;
        if (k > 0) local.base_classes = 0;
        std::size_t stages = protocol_stage_count(local, ds.class_ids.size());
        std::vector<std::int32_t> order = resolve_class_order(ds, local, k);
        std::size_t first = local.base_classes == 0 ? local.increment : local.base_classes;
        std::vector<TaskData> part = build_tasks(ds, local, order, first, offset, task_base);
        for (TaskData& t : part) tasks.push_back(std::move(t));
        task_base += stages;
        std::int32_t max_id = ds.class_ids.back();
        offset += max_id + 1;
    }
    return tasks;
}

namespace {

constexpr std::uint32_t kEmbeddingVersion = 1;

}  // namespace

EmbeddingDataset read_embeddings(const std::string& path) {
    std::string buf = binio::read_whole_file(path);
    binio::ByteReader r(buf, path);
    if (r.raw(4) != "MOTE")
        throw FileFormatError(FileFault::BadMagic, path + ": bad magic, not an embedding file");
    std::uint32_t version = r.u32();
    if (version != kEmbeddingVersion)
        throw FileFormatError(FileFault::BadVersion,
                              path + ": unsupported version " + std::to_string(version));
    std::uint32_t n_samples = r.u32();
    std::uint32_t dim = r.u32();
    bool has_msa = r.u8() != 0;
    bool has_split = r.u8() != 0;
    if (dim == 0) throw FileFormatError(FileFault::Truncated, path + ": zero dimension");

    std::size_t per_sample = 4 + (has_split ? 1 : 0) + 4ull * dim * (has_msa ? 2 : 1);
    if (r.remaining() < per_sample * n_samples)
        throw FileFormatError(FileFault::Truncated, path + ": truncated payload");
    if (r.remaining() > per_sample * n_samples)
        throw IoError(path + ": trailing bytes after payload");

    EmbeddingDataset ds;
    ds.name = std::filesystem::path(path).stem().string();
    ds.dim = dim;
    ds.has_msa = has_msa;
    ds.has_split = has_split;
    ds.samples.resize(n_samples);
    for (std::uint32_t i = 0; i < n_samples; ++i) {
        Sample& s = ds.samples[i];
        std::uint32_t label = r.u32();
        // Labels are signed class ids internally; anything that cannot
        // round-trip through i32 is out of range.
        if (label > static_cast<std::uint32_t>(std::numeric_limits<std::int32_t>::max()))
            throw FileFormatError(FileFault::LabelRange,
                                  path + ": label " + std::to_string(label) + " out of range");
        s.label = static_cast<std::int32_t>(label);
        if (has_split) {
            s.split = r.u8();
            if (s.split > 1)
                throw FileFormatError(FileFault::LabelRange,
                                      path + ": split flag " + std::to_string(s.split) +
                                          " out of range");
        }
        s.features.resize(dim);
        for (std::uint32_t k = 0; k < dim; ++k) s.features[k] = r.f32();
        if (has_msa) {
            s.msa.resize(dim);
            for (std::uint32_t k = 0; k < dim; ++k) s.msa[k] = r.f32();
        }
    }
    ds.rebuild_class_ids();
    return ds;
}

void write_embeddings(const EmbeddingDataset& dataset, const std::string& path) {
    dataset.validate();
    for (const Sample& s : dataset.samples)
        if (s.label < 0)
            throw ValidationError("write: negative label " + std::to_string(s.label) +
                                  " cannot be stored");
    std::string buf;
    buf.reserve(14 + dataset.samples.size() * (5 + 8 * dataset.dim));
    buf += "MOTE";
    binio::put_u32(buf, kEmbeddingVersion);
    binio::put_u32(buf, static_cast<std::uint32_t>(dataset.samples.size()));
    binio::put_u32(buf, static_cast<std::uint32_t>(dataset.dim));
    buf.push_back(dataset.has_msa ? 1 : 0);
    buf.push_back(dataset.has_split ? 1 : 0);
    for (const Sample& s : dataset.samples) {
        binio::put_u32(buf, static_cast<std::uint32_t>(s.label));
        if (dataset.has_split) buf.push_back(static_cast<char>(s.split));
        for (double x : s.features) binio::put_f32(buf, static_cast<float>(x));
        if (dataset.has_msa)
            for (double x : s.msa) binio::put_f32(buf, static_cast<float>(x));
    }
    binio::write_whole_file(path, buf);
}

ProtocolManifest load_manifest(const std::string& path) {
    std::string buf = binio::read_whole_file(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(buf);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("manifest " + path + ": " + e.what());
    }
    ProtocolManifest m;
    try {
        m.name = j.value("name", std::string("run"));
        m.base_classes = j.value("base", 0u);
        m.increment = j.at("increment").get<std::size_t>();
        m.seed = j.value("seed", 0ull);
        for (const auto& p : j.at("datasets")) {
            std::filesystem::path dp = p.get<std::string>();
            if (dp.is_relative()) dp = std::filesystem::path(path).parent_path() / dp;
            m.dataset_paths.push_back(dp.string());
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("manifest " + path + ": " + e.what());
    }
    if (m.dataset_paths.empty())
        throw ValidationError("manifest " + path + ": datasets list is empty");
    if (m.increment == 0)
        throw ValidationError("manifest " + path + ": increment must be positive");
    return m;
}

}  // namespace mote
