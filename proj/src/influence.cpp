#include "memaudit/influence.hpp"

#include <algorithm>
#include <cmath>

#include "memaudit/errors.hpp"

namespace memaudit {

std::vector<int> select_checkpoints(const CheckpointSeries& series, int k) {
    if (series.entries.empty()) {
        throw UsageError("select_checkpoints on an empty checkpoint series");
    }
    if (k < 1) {
        throw UsageError("select_checkpoints needs k >= 1");
    }
    const auto& e = series.entries;
    const double loss0 = e.front().train_loss;
    double loss_min = loss0;
    for (const auto& c : e) {
        loss_min = std::min(loss_min, c.train_loss);
    }
    const double target = 0.95 * (loss0 - loss_min);
    std::size_t window_end = 0;  // first index whose drop reaches the target
    for (std::size_t i = 0; i < e.size(); ++i) {
        if (loss0 - e[i].train_loss >= target) {
            window_end = i;
            break;
        }
    }
    std::vector<int> epochs;
    int prev = -1;
    for (int j = 0; j < k; ++j) {
        const double pos = k == 1 ? 0.0
                                  : static_cast<double>(j) * static_cast<double>(window_end) /
                                        static_cast<double>(k - 1);
        const auto idx = static_cast<std::size_t>(std::llround(pos));
        const int epoch = e[idx].epoch;
        if (epoch != prev) {
            epochs.push_back(epoch);
            prev = epoch;
        }
    }
    return epochs;
}

namespace {

const Checkpoint& checkpoint_for_epoch(const CheckpointSeries& series, int epoch) {
    for (const auto& c : series.entries) {
        if (c.epoch == epoch) {
            if (c.weights.empty()) {
                throw UsageError("checkpoint for epoch " + std::to_string(epoch) +
                                 " holds no weight snapshot");
            }
            return c;
        }
    }
    throw LookupError("no checkpoint recorded for epoch " + std::to_string(epoch));
}

// ||grad of the per-example loss||^2 at the model's current weights.
double example_grad_sq(const Model& model, const Tensor& image, int label) {
    Shape bshape = model.spec().input_shape;
    bshape.insert(bshape.begin(), 1);
    const Tensor logits = model.forward(image.reshaped(bshape));
    Tensor loss = cross_entropy(logits.reshaped(Shape{model.spec().num_classes}), label);
    backward(loss);
    const auto params = model.param_tensors();
    return grad_sq_norm(*loss.tape(), params);
}

}  // namespace

double tracin_self_influence(Model& model, const CheckpointSeries& series,
                             std::span<const int> checkpoint_epochs, const Tensor& image,
                             int label) {
    model.set_eval();
    double score = 0.0;
    for (const int epoch : checkpoint_epochs) {
        const Checkpoint& ck = checkpoint_for_epoch(series, epoch);
        model.restore_weights(ck.weights);
        score += ck.learning_rate * example_grad_sq(model, image, label);
    }
    return score;
}

SelfInfluenceTable self_influence_table(const ModelSpec& spec, const CheckpointSeries& series,
                                        const LabelledDataset& data,
                                        std::span<const std::size_t> example_indices, int k) {
    SelfInfluenceTable table;
    table.checkpoint_epochs = select_checkpoints(series, k);
    table.model_id = arch_name(spec.arch);

    const std::int64_t n = static_cast<std::int64_t>(example_indices.size());
    std::vector<double> acc(static_cast<std::size_t>(n), 0.0);

    Model model = Model::build(spec);
    model.set_eval();
    for (const int epoch : table.checkpoint_epochs) {
        const Checkpoint& ck = checkpoint_for_epoch(series, epoch);
        model.restore_weights(ck.weights);
        const double eta = ck.learning_rate;
        // Examples are independent against the restored (immutable) weights.
#pragma omp parallel for schedule(static)
        for (std::int64_t i = 0; i < n; ++i) {
            const std::size_t idx = example_indices[static_cast<std::size_t>(i)];
            acc[static_cast<std::size_t>(i)] +=
                eta * example_grad_sq(model, data.images[idx], data.labels[idx]);
        }
    }

    table.scores.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        table.scores.emplace_back(data.ids[example_indices[static_cast<std::size_t>(i)]],
                                  acc[static_cast<std::size_t>(i)]);
    }
    return table;
}

HostSelection select_canary_hosts(const SelfInfluenceTable& table, int top_k, int bottom_k) {
    if (static_cast<int>(table.scores.size()) < top_k + bottom_k) {
        throw UsageError("select_canary_hosts: table has " + std::to_string(table.scores.size()) +
                         " entries, need at least " + std::to_string(top_k + bottom_k));
    }
    auto by_score_desc = table.scores;
    std::sort(by_score_desc.begin(), by_score_desc.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) {
            return a.second > b.second;
        }
        return a.first < b.first;
    });
    auto by_score_asc = table.scores;
    std::sort(by_score_asc.begin(), by_score_asc.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) {
            return a.second < b.second;
        }
        return a.first < b.first;
    });
    HostSelection sel;
    for (int i = 0; i < top_k; ++i) {
        sel.top.push_back(by_score_desc[static_cast<std::size_t>(i)].first);
    }
    for (int i = 0; i < bottom_k; ++i) {
        sel.bottom.push_back(by_score_asc[static_cast<std::size_t>(i)].first);
    }
    return sel;
}

}  // namespace memaudit
