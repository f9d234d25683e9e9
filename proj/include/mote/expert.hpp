#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mote/dataset.hpp"
#include "mote/numerics.hpp"

namespace mote {

enum class AdapterMode : std::uint8_t { Seq = 0, Par = 1 };

// One task's bottleneck adapter over the frozen feature space.
// Seq mode:  F = h_out + relu(h_out . W_down) . W_up
// Par mode:  F = h_out + relu(h_msa . W_down) . W_up + h_msa
struct AdapterExpert {
    std::int32_t task_id = 0;
    std::vector<std::int32_t> scope;  // class ids this expert was trained on, sorted
    Matrix w_down;                    // d x r
    Matrix w_up;                      // r x d
    AdapterMode mode = AdapterMode::Par;
    std::size_t dim = 0;
    std::size_t bottleneck = 0;
    bool trained = false;

    bool operator==(const AdapterExpert&) const = default;
};

// Fresh expert with W_down ~ Normal(0, 0.02^2) and W_up = 0, so the adapter
// starts as an exact identity on h_out (plus the h_msa residual in Par mode).
AdapterExpert make_expert(std::int32_t task_id, std::size_t dim, std::size_t bottleneck,
                          AdapterMode mode, std::uint64_t seed,
                          std::vector<std::int32_t> scope = {});

Vector adapter_forward(const AdapterExpert& expert, const Vector& h_out, const Vector& h_msa);

// Linear classifier used only during training; discarded afterwards.
struct ClassifierHead {
    Matrix w;     // c x d
    Vector bias;  // c
};

ClassifierHead make_head(std::size_t n_classes, std::size_t dim);

struct TrainConfig {
    double lr0 = 0.01;
    double weight_decay = 0.005;
    std::size_t epochs = 20;
    std::size_t batch_size = 48;
    double momentum = 0.9;
    std::uint64_t seed = 0;
};

// A mini-batch view into borrowed feature vectors. targets are row indices
// into the head, not raw class ids.
struct TrainBatch {
    std::vector<const Vector*> h_out;
    std::vector<const Vector*> h_msa;
    std::vector<std::size_t> targets;
};

struct Gradients {
    Matrix w_down;
    Matrix w_up;
    Matrix head_w;
    Vector head_b;
};

struct LossAndGrads {
    double loss = 0.0;
    Gradients grads;
};

// Mean cross-entropy of softmax(head(F)) over the batch, with analytic
// gradients for W_down, W_up and the head (backprop through the ReLU mask;
// residual paths reach the head input directly but the backbone is frozen,
// so no gradient flows further back).
LossAndGrads ce_loss_and_grads(const AdapterExpert& expert, const ClassifierHead& head,
                               const TrainBatch& batch);

// lr0 * (1 + cos(pi * step / total_steps)) / 2, with the endpoints pinned to
// exactly lr0 and exactly 0.
double cosine_anneal_lr(std::size_t step, std::size_t total_steps, double lr0);

struct TrainStats {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double final_accuracy = 0.0;  // training accuracy under the (about to be discarded) head
    std::size_t steps = 0;
};

// SGD with momentum, per-step decoupled weight decay, cosine-annealed lr and
// a seeded shuffle per epoch. Mutates only this expert; the dataset and any
// other expert stay untouched.
TrainStats train_task(AdapterExpert& expert, const EmbeddingDataset& train, const TrainConfig& cfg);

void save_expert(const AdapterExpert& expert, const std::string& path);
// Loaded experts are marked trained: checkpoints exist only for experts that
// finished training (save_expert rejects anything else).
AdapterExpert load_expert(const std::string& path);

}  // namespace mote
