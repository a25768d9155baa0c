#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "memaudit/data.hpp"
#include "memaudit/models.hpp"

namespace memaudit {

struct TrainConfig {
    int max_epochs = 500;
    int patience = 10;
    double learning_rate = 1e-4;
    int batch_size = 128;
    bool augment = false;
    double validation_fraction = 0.1;
    std::uint64_t seed = 0;
    // Keep per-epoch weight snapshots in memory (influence needs them; plain
    // audits do not).
    bool record_weights = true;
    // Example ids that must stay in the training split (canary hosts).
    std::vector<std::int64_t> pinned_train_ids;
};

struct Checkpoint {
    int epoch = 0;  // 1-based
    double learning_rate = 0.0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    std::vector<std::vector<double>> weights;  // params then buffers; may be empty
};

struct CheckpointSeries {
    std::vector<Checkpoint> entries;
};

struct TrainResult {
    CheckpointSeries series;
    int best_epoch = 0;
    double best_val_loss = 0.0;
    int epochs_run = 0;
};

// Called after each completed epoch with the fresh checkpoint (weights always
// populated here regardless of record_weights) and the model.
using EpochCallback = std::function<void(const Checkpoint&, const Model&)>;

// Adam with bias correction; beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::int64_t step = 0;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

// One update over a parameter list; state is created lazily on first use.
void adam_step(std::vector<NamedTensor>& params,
               const std::vector<std::vector<double>>& grads, AdamState& state, double lr);

// Random shift up to +/-2 pixels (zero fill) and, for 3-channel images only,
// a horizontal flip with probability 0.5.
Tensor augment_image(const Tensor& image, Rng& rng);
std::vector<Tensor> augment(const std::vector<Tensor>& batch, Rng& rng);

// Adam + cross-entropy training with early stopping (strict validation-loss
// improvement, `patience` epochs) and per-epoch checkpoints. The model is
// left holding the weights of the best-validation epoch.
TrainResult train(Model& model, const LabelledDataset& data, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = nullptr);

}  // namespace memaudit
