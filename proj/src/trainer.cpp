#include "memaudit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "memaudit/errors.hpp"

namespace memaudit {

void adam_step(std::vector<NamedTensor>& params,
               const std::vector<std::vector<double>>& grads, AdamState& state, double lr) {
    if (grads.size() != params.size()) {
        throw DimensionError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                             std::to_string(params.size()) + " parameters");
    }
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(static_cast<std::size_t>(params[i].value.size()), 0.0);
            state.v[i].assign(static_cast<std::size_t>(params[i].value.size()), 0.0);
        }
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params[i].value.mutable_data();
        const auto& g = grads[i];
        if (g.size() != w.size()) {
            throw DimensionError("adam_step: gradient " + std::to_string(i) + " has " +
                                 std::to_string(g.size()) + " values, parameter has " +
                                 std::to_string(w.size()));
        }
        auto& m = state.m[i];
        auto& v = state.v[i];
        const std::int64_t n = static_cast<std::int64_t>(w.size());
#pragma omp parallel for schedule(static) if (n > 65536)
        for (std::int64_t j = 0; j < n; ++j) {
            m[j] = kAdamBeta1 * m[j] + (1.0 - kAdamBeta1) * g[j];
            v[j] = kAdamBeta2 * v[j] + (1.0 - kAdamBeta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            w[j] -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
        }
    }
}

Tensor augment_image(const Tensor& image, Rng& rng) {
    const int c = image.dim(0);
    const int h = image.dim(1);
    const int w = image.dim(2);
    const int dy = static_cast<int>(rng.uniform_int(5)) - 2;
    const int dx = static_cast<int>(rng.uniform_int(5)) - 2;
    const bool flip = c == 3 && rng.bernoulli(0.5);
    Tensor out(image.shape());
    auto d = out.mutable_data();
    const auto s = image.data();
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < h; ++y) {
            const int sy = y - dy;
            for (int x = 0; x < w; ++x) {
                int sx = x - dx;
                if (flip) {
                    sx = w - 1 - sx;
                }
                double v = 0.0;
                if (sy >= 0 && sy < h && sx >= 0 && sx < w) {
                    v = s[(static_cast<std::size_t>(ch) * h + sy) * w + sx];
                }
                d[(static_cast<std::size_t>(ch) * h + y) * w + x] = v;
            }
        }
    }
    return out;
}

std::vector<Tensor> augment(const std::vector<Tensor>& batch, Rng& rng) {
    std::vector<Tensor> out;
    out.reserve(batch.size());
    for (const Tensor& img : batch) {
        out.push_back(augment_image(img, rng));
    }
    return out;
}

namespace {

Tensor stack_images(const std::vector<Tensor>& images, std::size_t start, std::size_t count) {
    Shape bshape = images[start].shape();
    const std::int64_t per = numel(bshape);
    bshape.insert(bshape.begin(), static_cast<int>(count));
    Tensor batch(bshape);
    auto d = batch.mutable_data();
    for (std::size_t i = 0; i < count; ++i) {
        const auto src = images[start + i].data();
        std::copy(src.begin(), src.end(), d.begin() + static_cast<std::int64_t>(i) * per);
    }
    return batch;
}

// Mean eval-mode cross-entropy over a sequence of examples.
double evaluate_loss(const Model& model, const std::vector<Tensor>& images,
                     const std::vector<int>& labels) {
    NoGradGuard ng;
    constexpr std::size_t kChunk = 256;
    double total = 0.0;
    for (std::size_t start = 0; start < images.size(); start += kChunk) {
        const std::size_t n = std::min(kChunk, images.size() - start);
        const Tensor batch = stack_images(images, start, n);
        const Tensor logits = model.forward(batch);
        const auto l = logits.data();
        const int k = logits.dim(1);
        for (std::size_t i = 0; i < n; ++i) {
            const double* row = l.data() + i * static_cast<std::size_t>(k);
            double mx = row[0];
            for (int j = 1; j < k; ++j) {
                mx = std::max(mx, row[j]);
            }
            double z = 0.0;
            for (int j = 0; j < k; ++j) {
                z += std::exp(row[j] - mx);
            }
            total += mx + std::log(z) - row[labels[start + i]];
        }
    }
    return total / static_cast<double>(images.size());
}

}  // namespace

TrainResult train(Model& model, const LabelledDataset& data, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
    data.check_consistent();
    if (data.size() == 0) {
        throw UsageError("train called with an empty dataset");
    }
    if (cfg.patience >= cfg.max_epochs) {
        throw ConfigError("patience must be smaller than max_epochs");
    }
    if (!(cfg.validation_fraction > 0.0 && cfg.validation_fraction < 1.0)) {
        throw ConfigError("validation_fraction must lie in (0, 1)");
    }

    const SeedTree seeds(cfg.seed);

    // Validation split: last ceil(vf * n) examples after a seeded shuffle,
    // with pinned ids (canary hosts) swapped back into the training portion.
    const std::size_t n = data.size();
    Rng split_rng = seeds.stream("val-split");
    std::vector<std::size_t> order = shuffled_indices(n, split_rng);
    const std::size_t n_val = static_cast<std::size_t>(
        std::ceil(cfg.validation_fraction * static_cast<double>(n)));
    std::size_t n_train = n - n_val;
    if (n_train == 0) {
        throw UsageError("validation split leaves no training examples");
    }
    const auto pinned = [&](std::size_t pos) {
        const std::int64_t id = data.ids[order[pos]];
        return std::find(cfg.pinned_train_ids.begin(), cfg.pinned_train_ids.end(), id) !=
               cfg.pinned_train_ids.end();
    };
    for (std::size_t v = n_train; v < n; ++v) {
        if (!pinned(v)) {
            continue;
        }
        for (std::size_t u = n_train; u-- > 0;) {
            if (!pinned(u)) {
                std::swap(order[v], order[u]);
                break;
            }
        }
    }

    std::vector<Tensor> val_images;
    std::vector<int> val_labels;
    val_images.reserve(n_val);
    for (std::size_t v = n_train; v < n; ++v) {
        val_images.push_back(data.images[order[v]]);
        val_labels.push_back(data.labels[order[v]]);
    }

    TrainResult result;
    AdamState adam;
    std::vector<std::vector<double>> best_weights = model.snapshot_weights();
    double best_val = std::numeric_limits<double>::infinity();
    int best_epoch = 0;
    int stall = 0;

    std::vector<std::size_t> train_idx(order.begin(),
                                       order.begin() + static_cast<std::ptrdiff_t>(n_train));

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        Rng shuffle_rng = seeds.stream("shuffle", static_cast<std::uint64_t>(epoch));
        Rng dropout_rng = seeds.stream("dropout", static_cast<std::uint64_t>(epoch));
        Rng augment_rng = seeds.stream("augment", static_cast<std::uint64_t>(epoch));

        // In-place Fisher-Yates over the training indices.
        for (std::size_t i = n_train; i > 1; --i) {
            const std::size_t j = shuffle_rng.uniform_int(i);
            std::swap(train_idx[i - 1], train_idx[j]);
        }

        model.set_train();
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < n_train;
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t bs =
                std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), n_train - start);
            std::vector<Tensor> batch_images;
            batch_images.reserve(bs);
            std::vector<int> batch_labels(bs);
            for (std::size_t i = 0; i < bs; ++i) {
                batch_images.push_back(data.images[train_idx[start + i]]);
                batch_labels[static_cast<std::size_t>(i)] = data.labels[train_idx[start + i]];
            }
            if (cfg.augment) {
                batch_images = augment(batch_images, augment_rng);
            }
            Tensor batch = stack_images(batch_images, 0, bs);
            Tensor loss = mean_cross_entropy(model.forward(batch, &dropout_rng),
                                             std::span<const int>(batch_labels));
            epoch_loss += loss.item() * static_cast<double>(bs);
            backward(loss);
            const auto& tape = *loss.tape();
            std::vector<std::vector<double>> grads;
            grads.reserve(model.params().size());
            for (const auto& p : model.params()) {
                grads.push_back(tape.gradient(p.value));
            }
            adam_step(model.params(), grads, adam, cfg.learning_rate);
        }
        epoch_loss /= static_cast<double>(n_train);

        model.set_eval();
        const double val_loss = evaluate_loss(model, val_images, val_labels);

        Checkpoint ck;
        ck.epoch = epoch;
        ck.learning_rate = cfg.learning_rate;
        ck.train_loss = epoch_loss;
        ck.val_loss = val_loss;
        ck.weights = model.snapshot_weights();
        if (on_epoch) {
            on_epoch(ck, model);
        }
        if (!cfg.record_weights) {
            ck.weights.clear();
        }
        result.series.entries.push_back(std::move(ck));
        result.epochs_run = epoch;

        if (val_loss < best_val) {
            best_val = val_loss;
            best_epoch = epoch;
            best_weights = result.series.entries.back().weights.empty()
                               ? model.snapshot_weights()
                               : result.series.entries.back().weights;
            stall = 0;
        } else {
            ++stall;
            if (stall >= cfg.patience) {
                break;
            }
        }
    }

    model.restore_weights(best_weights);
    model.set_eval();
    result.best_epoch = best_epoch;
    result.best_val_loss = best_val;
    return result;
}

}  // namespace memaudit
