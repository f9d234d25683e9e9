#include "mote/expert.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "binio.hpp"

namespace mote {

namespace {

constexpr std::uint32_t kExpertVersion = 1;

void check_expert_shape(const AdapterExpert& e) {
    if (e.bottleneck < 1 || e.bottleneck >= e.dim)
        throw ValidationError("expert: bottleneck must satisfy 1 <= r < d (got r=" +
                              std::to_string(e.bottleneck) + ", d=" + std::to_string(e.dim) + ")");
    if (e.w_down.rows != e.dim || e.w_down.cols != e.bottleneck)
        throw ValidationError("expert: W_down shape mismatch");
    if (e.w_up.rows != e.bottleneck || e.w_up.cols != e.dim)
        throw ValidationError("expert: W_up shape mismatch");
}

}  // namespace

AdapterExpert make_expert(std::int32_t task_id, std::size_t dim, std::size_t bottleneck,
                          AdapterMode mode, std::uint64_t seed, std::vector<std::int32_t> scope) {
    AdapterExpert e;
    e.task_id = task_id;
    e.dim = dim;
    e.bottleneck = bottleneck;
    e.mode = mode;
    e.scope = std::move(scope);
    std::sort(e.scope.begin(), e.scope.end());
    e.w_down = Matrix(dim, bottleneck);
    e.w_up = Matrix(bottleneck, dim);
    check_expert_shape(e);
    SeededRng rng(seed);
    for (double& x : e.w_down.data) x = 0.02 * rng.normal();
    // w_up stays zero: the untrained adapter must be an exact pass-through.
    return e;
}

Vector adapter_forward(const AdapterExpert& expert, const Vector& h_out, const Vector& h_msa) {
    check_expert_shape(expert);
    if (h_out.size() != expert.dim || h_msa.size() != expert.dim)
        throw ValidationError("adapter_forward: input dim mismatch");
    const Vector& x = expert.mode == AdapterMode::Seq ? h_out : h_msa;
    Vector z = relu(vec_mat(x, expert.w_down));
    Vector f = vec_mat(z, expert.w_up);
    for (std::size_t k = 0; k < expert.dim; ++k) f[k] += h_out[k];
    if (expert.mode == AdapterMode::Par)
        for (std::size_t k = 0; k < expert.dim; ++k) f[k] += h_msa[k];
    return f;
}

ClassifierHead make_head(std::size_t n_classes, std::size_t dim) {
    if (n_classes == 0) throw ValidationError("head: needs at least one class");
    ClassifierHead h;
    h.w = Matrix(n_classes, dim);
    h.bias = Vector(n_classes, 0.0);
    return h;
}

namespace {

struct ForwardTrace {
    Vector a;       // bottleneck pre-activation
    Vector z;       // relu(a)
    Vector f;       // adapted feature
    Vector logits;  // head output
    double lse = 0.0;
};

ForwardTrace forward_sample(const AdapterExpert& expert, const ClassifierHead& head,
                            const Vector& h_out, const Vector& h_msa) {
    ForwardTrace t;
    const Vector& x = expert.mode == AdapterMode::Seq ? h_out : h_msa;
    t.a = vec_mat(x, expert.w_down);
    t.z = relu(t.a);
    t.f = vec_mat(t.z, expert.w_up);
    for (std::size_t k = 0; k < expert.dim; ++k) t.f[k] += h_out[k];
    if (expert.mode == AdapterMode::Par)
        for (std::size_t k = 0; k < expert.dim; ++k) t.f[k] += h_msa[k];
    t.logits = mat_vec(head.w, t.f);
    for (std::size_t j = 0; j < head.bias.size(); ++j) t.logits[j] += head.bias[j];
    double m = t.logits[0];
    for (double v : t.logits)
        if (v > m) m = v;
    double s = 0.0;
    for (double v : t.logits) s += std::exp(v - m);
    t.lse = m + std::log(s);
    return t;
}

}  // namespace

LossAndGrads ce_loss_and_grads(const AdapterExpert& expert, const ClassifierHead& head,
                               const TrainBatch& batch) {
    check_expert_shape(expert);
    std::size_t n = batch.h_out.size();
    if (n == 0) throw ValidationError("ce_loss_and_grads: empty batch");
    if (batch.h_msa.size() != n || batch.targets.size() != n)
        throw ValidationError("ce_loss_and_grads: batch field lengths differ");
    std::size_t c = head.w.rows;
    if (head.w.cols != expert.dim || head.bias.size() != c)
        throw ValidationError("ce_loss_and_grads: head shape mismatch");

    LossAndGrads out;
    out.grads.w_down = Matrix(expert.dim, expert.bottleneck);
    out.grads.w_up = Matrix(expert.bottleneck, expert.dim);
    out.grads.head_w = Matrix(c, expert.dim);
    out.grads.head_b = Vector(c, 0.0);

    for (std::size_t s = 0; s < n; ++s) {
        if (batch.targets[s] >= c)
            throw ValidationError("ce_loss_and_grads: target " + std::to_string(batch.targets[s]) +
                                  " out of range for " + std::to_string(c) + " classes");
        const Vector& h_out = *batch.h_out[s];
        const Vector& h_msa = *batch.h_msa[s];
        ForwardTrace t = forward_sample(expert, head, h_out, h_msa);
        out.loss += t.lse - t.logits[batch.targets[s]];

        // dL/dlogits = softmax(logits) - onehot(target)
        Vector dlogits(c);
        for (std::size_t j = 0; j < c; ++j) dlogits[j] = std::exp(t.logits[j] - t.lse);
        dlogits[batch.targets[s]] -= 1.0;

        for (std::size_t j = 0; j < c; ++j) {
            out.grads.head_b[j] += dlogits[j];
            for (std::size_t k = 0; k < expert.dim; ++k)
                out.grads.head_w.at(j, k) += dlogits[j] * t.f[k];
        }
        Vector df = vec_mat(dlogits, head.w);
        for (std::size_t i = 0; i < expert.bottleneck; ++i)
            for (std::size_t k = 0; k < expert.dim; ++k)
                out.grads.w_up.at(i, k) += t.z[i] * df[k];
        Vector dz = mat_vec(expert.w_up, df);
        const Vector& x = expert.mode == AdapterMode::Seq ? h_out : h_msa;
        for (std::size_t i = 0; i < expert.bottleneck; ++i) {
            if (t.a[i] <= 0.0) continue;  // relu gate
            for (std::size_t k = 0; k < expert.dim; ++k)
                out.grads.w_down.at(k, i) += x[k] * dz[i];
        }
    }

    double inv = 1.0 / static_cast<double>(n);
    out.loss *= inv;
    for (double& g : out.grads.w_down.data) g *= inv;
    for (double& g : out.grads.w_up.data) g *= inv;
    for (double& g : out.grads.head_w.data) g *= inv;
    for (double& g : out.grads.head_b) g *= inv;
    return out;
}

double cosine_anneal_lr(std::size_t step, std::size_t total_steps, double lr0) {
    if (total_steps == 0) throw ValidationError("cosine_anneal_lr: total_steps must be positive");
    if (step > total_steps) throw ValidationError("cosine_anneal_lr: step beyond total_steps");
    // Endpoints pinned so the schedule starts at exactly lr0 and ends at
    // exactly zero, independent of how cos(pi) rounds.
    if (step == 0) return lr0;
    if (step == total_steps) return 0.0;
    double frac = static_cast<double>(step) / static_cast<double>(total_steps);
    return lr0 * (1.0 + std::cos(3.14159265358979323846 * frac)) / 2.0;
}

namespace {

struct DatasetEval {
    double loss = 0.0;
    double accuracy = 0.0;
};

DatasetEval eval_on(const AdapterExpert& expert, const ClassifierHead& head,
                    const EmbeddingDataset& data, const std::vector<std::size_t>& targets) {
    DatasetEval ev;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
        const Sample& s = data.samples[i];
        ForwardTrace t = forward_sample(expert, head, s.features, data.msa_of(s));
        ev.loss += t.lse - t.logits[targets[i]];
        std::size_t best = 0;
        for (std::size_t j = 1; j < t.logits.size(); ++j)
            if (t.logits[j] > t.logits[best]) best = j;
        if (best == targets[i]) ++correct;
    }
    ev.loss /= static_cast<double>(data.samples.size());
    ev.accuracy = static_cast<double>(correct) / static_cast<double>(data.samples.size());
    return ev;
}

}  // namespace

TrainStats train_task(AdapterExpert& expert, const EmbeddingDataset& train,
                      const TrainConfig& cfg) {
    check_expert_shape(expert);
    if (expert.trained) throw ValidationError("train_task: expert already trained");
    if (train.samples.empty()) throw ValidationError("train_task: empty dataset");
    if (expert.scope.empty()) throw ValidationError("train_task: expert has no class scope");
    if (train.dim != expert.dim) throw ValidationError("train_task: dataset dim mismatch");
    if (!(cfg.lr0 > 0.0)) throw ValidationError("train_task: lr0 must be positive");
    if (cfg.epochs < 1 || cfg.batch_size < 1)
        throw ValidationError("train_task: epochs and batch_size must be at least 1");
    if (cfg.momentum < 0.0 || cfg.momentum >= 1.0)
        throw ValidationError("train_task: momentum must lie in [0, 1)");
    if (cfg.weight_decay < 0.0) throw ValidationError("train_task: negative weight decay");

    // Map labels to head rows via the sorted scope.
    std::vector<std::size_t> targets(train.samples.size());
    for (std::size_t i = 0; i < train.samples.size(); ++i) {
        auto it = std::lower_bound(expert.scope.begin(), expert.scope.end(),
                                   train.samples[i].label);
        if (it == expert.scope.end() || *it != train.samples[i].label)
            throw ValidationError("train_task: label " + std::to_string(train.samples[i].label) +
                                  " outside expert scope");
        targets[i] = static_cast<std::size_t>(it - expert.scope.begin());
    }

    std::size_t n = train.samples.size();
    std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    std::size_t total_steps = cfg.epochs * steps_per_epoch;

    ClassifierHead head = make_head(expert.scope.size(), expert.dim);
    Matrix v_down(expert.dim, expert.bottleneck);
    Matrix v_up(expert.bottleneck, expert.dim);
    Matrix v_hw(head.w.rows, head.w.cols);
    Vector v_hb(head.bias.size(), 0.0);

    TrainStats stats;
    stats.initial_loss = eval_on(expert, head, train, targets).loss;
    stats.steps = total_steps;

    SeededRng rng(cfg.seed);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::size_t global_step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t b = 0; b < steps_per_epoch; ++b) {
            std::size_t lo = b * cfg.batch_size;
            std::size_t hi = std::min(n, lo + cfg.batch_size);
            TrainBatch batch;
            batch.h_out.reserve(hi - lo);
            batch.h_msa.reserve(hi - lo);
            batch.targets.reserve(hi - lo);
            for (std::size_t i = lo; i < hi; ++i) {
                const Sample& s = train.samples[order[i]];
                batch.h_out.push_back(&s.features);
                batch.h_msa.push_back(&train.msa_of(s));
                batch.targets.push_back(targets[order[i]]);
            }

            double lr = cosine_anneal_lr(global_step, total_steps, cfg.lr0);
            // Decoupled weight decay on weights only, never biases.
            double decay = 1.0 - lr * cfg.weight_decay;
            for (double& w : expert.w_down.data) w *= decay;
            for (double& w : expert.w_up.data) w *= decay;
            for (double& w : head.w.data) w *= decay;

            LossAndGrads lg = ce_loss_and_grads(expert, head, batch);
            auto sgd = [&](std::vector<double>& w, std::vector<double>& v,
                           const std::vector<double>& g) {
                for (std::size_t i = 0; i < w.size(); ++i) {
                    v[i] = cfg.momentum * v[i] + g[i];
                    w[i] -= lr * v[i];
                }
            };
            sgd(expert.w_down.data, v_down.data, lg.grads.w_down.data);
            sgd(expert.w_up.data, v_up.data, lg.grads.w_up.data);
            sgd(head.w.data, v_hw.data, lg.grads.head_w.data);
            sgd(head.bias, v_hb, lg.grads.head_b);
            ++global_step;
        }
    }

    DatasetEval final_ev = eval_on(expert, head, train, targets);
    stats.final_loss = final_ev.loss;
    stats.final_accuracy = final_ev.accuracy;
    check_finite(expert.w_down, "trained W_down");
    check_finite(expert.w_up, "trained W_up");
    expert.trained = true;
    return stats;
}

void save_expert(const AdapterExpert& expert, const std::string& path) {
    check_expert_shape(expert);
    if (!expert.trained) throw ValidationError("save_expert: refusing to save untrained expert");
    if (expert.task_id < 0) throw ValidationError("save_expert: negative task id");
    std::string buf;
    buf += "MOTX";
    binio::put_u32(buf, kExpertVersion);
    binio::put_u32(buf, static_cast<std::uint32_t>(expert.task_id));
    binio::put_u32(buf, static_cast<std::uint32_t>(expert.dim));
    binio::put_u32(buf, static_cast<std::uint32_t>(expert.bottleneck));
    buf.push_back(static_cast<char>(expert.mode));
    binio::put_u32(buf, static_cast<std::uint32_t>(expert.scope.size()));
    for (std::int32_t c : expert.scope) binio::put_u32(buf, static_cast<std::uint32_t>(c));
    for (double w : expert.w_down.data) binio::put_f64(buf, w);
    for (double w : expert.w_up.data) binio::put_f64(buf, w);
    binio::write_whole_file(path, buf);
}

AdapterExpert load_expert(const std::string& path) {
    std::string buf = binio::read_whole_file(path);
    binio::ByteReader r(buf, path);
    if (r.raw(4) != "MOTX")
        throw FileFormatError(FileFault::BadMagic, path + ": bad magic, not an expert checkpoint");
    std::uint32_t version = r.u32();
    if (version != kExpertVersion)
        throw FileFormatError(FileFault::BadVersion,
                              path + ": unsupported version " + std::to_string(version));
    AdapterExpert e;
    e.task_id = static_cast<std::int32_t>(r.u32());
    e.dim = r.u32();
    e.bottleneck = r.u32();
    std::uint8_t mode = r.u8();
    if (mode > 1)
        throw FileFormatError(FileFault::LabelRange,
                              path + ": unknown adapter mode " + std::to_string(mode));
    e.mode = static_cast<AdapterMode>(mode);
    std::uint32_t scope_len = r.u32();
    e.scope.resize(scope_len);
    for (std::uint32_t i = 0; i < scope_len; ++i) {
        std::uint32_t c = r.u32();
        if (c > static_cast<std::uint32_t>(std::numeric_limits<std::int32_t>::max()))
            throw FileFormatError(FileFault::LabelRange,
                                  path + ": scope class " + std::to_string(c) + " out of range");
        e.scope[i] = static_cast<std::int32_t>(c);
    }
    e.w_down = Matrix(e.dim, e.bottleneck);
    e.w_up = Matrix(e.bottleneck, e.dim);
    for (double& w : e.w_down.data) w = r.f64();
    for (double& w : e.w_up.data) w = r.f64();
    r.expect_end();
    check_expert_shape(e);
    check_finite(e.w_down, "loaded W_down");
    check_finite(e.w_up, "loaded W_up");
    // Checkpoints only ever hold trained experts; see save_expert.
    e.trained = true;
    return e;
}

}  // namespace mote
