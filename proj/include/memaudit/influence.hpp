#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "memaudit/data.hpp"
#include "memaudit/models.hpp"
#include "memaudit/trainer.hpp"

namespace memaudit {

// Per-example self-influence scores over the checkpoints that were used.
struct SelfInfluenceTable {
    std::vector<std::pair<std::int64_t, double>> scores;  // (example id, score)
    std::vector<int> checkpoint_epochs;
    std::string model_id;
    std::string dataset_id;
};

// Epochs of up to k evenly spaced checkpoints across the window from the
// first epoch to the earliest epoch that accounts for 95% of the total
// training-loss drop (duplicates removed, order preserved).
std::vector<int> select_checkpoints(const CheckpointSeries& series, int k = 10);

// TracInCP self-influence of one example: sum over the selected checkpoints
// of eta_i * ||grad of the per-example cross-entropy wrt all trainable
// weights at w_i||^2. Gradients are evaluated in eval mode. The model is
// used as scratch space for checkpoint restoration.
double tracin_self_influence(Model& model, const CheckpointSeries& series,
                             std::span<const int> checkpoint_epochs, const Tensor& image,
                             int label);

// Scores for the given example indices of `data` (parallel over examples).
SelfInfluenceTable self_influence_table(const ModelSpec& spec, const CheckpointSeries& series,
                                        const LabelledDataset& data,
                                        std::span<const std::size_t> example_indices, int k = 10);

struct HostSelection {
    std::vector<std::int64_t> top;
    std::vector<std::int64_t> bottom;
};

// Ids of the top_k largest and bottom_k smallest scores; ties broken by
// ascending example id.
HostSelection select_canary_hosts(const SelfInfluenceTable& table, int top_k = 15,
                                  int bottom_k = 15);

}  // namespace memaudit
