#include "memaudit/models.hpp"

#include <algorithm>
#include <cmath>

#include "memaudit/errors.hpp"

namespace memaudit {

std::string arch_name(Arch a) {
    switch (a) {
        case Arch::MLP: return "mlp";
        case Arch::CNN1: return "cnn1";
        case Arch::CNN2: return "cnn2";
    }
    throw UsageError("unknown architecture id");
}

Arch arch_from_name(const std::string& name) {
    if (name == "mlp") return Arch::MLP;
    if (name == "cnn1") return Arch::CNN1;
    if (name == "cnn2") return Arch::CNN2;
    throw ConfigError("unknown architecture name: " + name);
}

namespace {

Tensor kaiming_uniform(Shape shape, std::int64_t fan_in, Rng& rng) {
    Tensor t(std::move(shape), 0.0, /*requires_grad=*/true);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (double& v : t.mutable_data()) {
        v = rng.uniform(-bound, bound);
    }
    return t;
}

}  // namespace

Model Model::build(const ModelSpec& spec) {
    Model m;
    m.spec_ = spec;
    const SeedTree seeds(spec.seed);
    Rng init = seeds.stream("init");

    const auto add_dense = [&](const std::string& name, int in, int out) {
        m.params_.push_back({name + ".w", kaiming_uniform(Shape{in, out}, in, init)});
        m.params_.push_back({name + ".b", Tensor(Shape{out}, 0.0, true)});
    };
    const auto add_conv = [&](const std::string& name, int ci, int co) {
        m.params_.push_back({name + ".w", kaiming_uniform(Shape{co, ci, 3, 3},
                                                          static_cast<std::int64_t>(ci) * 9, init)});
        m.params_.push_back({name + ".b", Tensor(Shape{co}, 0.0, true)});
    };
    const auto add_bn = [&](const std::string& name, int c) {
        if (!spec.batch_norm) {
            return;
        }
        m.params_.push_back({name + ".gamma", Tensor(Shape{c}, 1.0, true)});
        m.params_.push_back({name + ".beta", Tensor(Shape{c}, 0.0, true)});
        m.buffers_.push_back({name + ".mean", Tensor(Shape{c}, 0.0)});
        m.buffers_.push_back({name + ".var", Tensor(Shape{c}, 1.0)});
    };

    const std::int64_t flat = numel(spec.input_shape);
    switch (spec.arch) {
        case Arch::MLP: {
            add_dense("fc1", static_cast<int>(flat), 512);
            add_bn("bn1", 512);
            add_dense("fc2", 512, 256);
            add_bn("bn2", 256);
            add_dense("head", 256, spec.num_classes);
            break;
        }
        case Arch::CNN1: {
            const int h = spec.input_shape[1];
            const int w = spec.input_shape[2];
            add_conv("conv1", spec.input_shape[0], 32);
            add_bn("bnc1", 32);
            add_conv("conv2", 32, 64);
            add_bn("bnc2", 64);
            const int fh = (h - 4) / 2;
            const int fw = (w - 4) / 2;
            add_dense("fc1", 64 * fh * fw, 128);
            add_bn("bn1", 128);
            add_dense("fc2", 128, 128);
            add_bn("bn2", 128);
            add_dense("head", 128, spec.num_classes);
            break;
        }
        case Arch::CNN2: {
            const int h = spec.input_shape[1];
            const int w = spec.input_shape[2];
            add_conv("conv1", spec.input_shape[0], 32);
            add_bn("bnc1", 32);
            add_conv("conv2", 32, 32);
            add_bn("bnc2", 32);
            add_conv("conv3", 32, 64);
            add_bn("bnc3", 64);
            add_conv("conv4", 64, 64);
            add_bn("bnc4", 64);
            const int fh = ((h - 4) / 2 - 4) / 2;
            const int fw = ((w - 4) / 2 - 4) / 2;
            add_dense("fc1", 64 * fh * fw, 1024);
            add_bn("bn1", 1024);
            add_dense("head", 1024, spec.num_classes);
            break;
        }
    }
    return m;
}

const Tensor& Model::param(const std::string& name) const {
    for (const auto& p : params_) {
        if (p.name == name) {
            return p.value;
        }
    }
    throw LookupError("no parameter named " + name);
}

Tensor& Model::buffer(const std::string& name) const {
    for (auto& b : buffers_) {
        if (b.name == name) {
            return b.value;
        }
    }
    throw LookupError("no buffer named " + name);
}

Tensor Model::dense_block(const Tensor& x, int layer, bool with_relu, Rng* dropout_rng) const {
    const std::string name = "fc" + std::to_string(layer);
    Tensor h = add_rowvec(matmul(x, param(name + ".w")), param(name + ".b"));
    if (spec_.batch_norm) {
        const std::string bn = "bn" + std::to_string(layer);
        h = batchnorm(h, param(bn + ".gamma"), param(bn + ".beta"), buffer(bn + ".mean"),
                      buffer(bn + ".var"), training_);
    }
    if (with_relu) {
        h = relu(h);
    }
    if (training_ && spec_.dropout_rate > 0.0) {
        if (dropout_rng == nullptr) {
            throw UsageError("train-mode forward with dropout requires an rng");
        }
        h = dropout(h, spec_.dropout_rate, *dropout_rng);
    }
    return h;
}

Tensor Model::conv_block(const Tensor& x, int layer) const {
    const std::string name = "conv" + std::to_string(layer);
    Tensor h = conv2d(x, param(name + ".w"), param(name + ".b"));
    if (spec_.batch_norm) {
        const std::string bn = "bnc" + std::to_string(layer);
        h = batchnorm(h, param(bn + ".gamma"), param(bn + ".beta"), buffer(bn + ".mean"),
                      buffer(bn + ".var"), training_);
    }
    return h;
}

Tensor Model::forward(const Tensor& batch, Rng* dropout_rng) const {
    if (batch.rank() != 4) {
        throw DimensionError("forward expects a [n x c x h x w] batch, got " +
                             shape_str(batch.shape()));
    }
    for (int i = 0; i < 3; ++i) {
        if (batch.dim(i + 1) != spec_.input_shape[static_cast<std::size_t>(i)]) {
            throw DimensionError("batch shape " + shape_str(batch.shape()) +
                                 " does not match model input " + shape_str(spec_.input_shape));
        }
    }
    const int n = batch.dim(0);

    switch (spec_.arch) {
        case Arch::MLP: {
            Tensor x = batch.reshaped(Shape{n, static_cast<int>(numel(spec_.input_shape))});
            x = dense_block(x, 1, true, dropout_rng);
            x = dense_block(x, 2, true, dropout_rng);
            return add_rowvec(matmul(x, param("head.w")), param("head.b"));
        }
        case Arch::CNN1: {
            Tensor x = relu(conv_block(batch, 1));
            x = relu(maxpool2(conv_block(x, 2)));
            x = x.reshaped(Shape{n, x.dim(1) * x.dim(2) * x.dim(3)});
            x = dense_block(x, 1, true, dropout_rng);
            x = dense_block(x, 2, true, dropout_rng);
            return add_rowvec(matmul(x, param("head.w")), param("head.b"));
        }
        case Arch::CNN2: {
            Tensor x = relu(conv_block(batch, 1));
            x = relu(conv_block(x, 2));
            x = maxpool2(x);
            x = relu(conv_block(x, 3));
            x = relu(conv_block(x, 4));
            x = maxpool2(x);
            x = x.reshaped(Shape{n, x.dim(1) * x.dim(2) * x.dim(3)});
            x = dense_block(x, 1, true, dropout_rng);
            return add_rowvec(matmul(x, param("head.w")), param("head.b"));
        }
    }
    throw UsageError("unknown architecture id");
}

void floor_probabilities(std::vector<double>& p) {
    double z = 0.0;
    for (double& v : p) {
        v = std::max(v, kProbabilityFloor);
        z += v;
    }
    for (double& v : p) {
        v /= z;
    }
}

std::vector<double> Model::predict(const Tensor& image) const {
    if (training_) {
        throw UsageError("predict requires eval mode; call set_eval() first");
    }
    NoGradGuard ng;
    Shape batched = spec_.input_shape;
    batched.insert(batched.begin(), 1);
    const Tensor logits = forward(image.reshaped(batched));
    const auto l = logits.data();
    const int k = spec_.num_classes;
    std::vector<double> p(static_cast<std::size_t>(k));
    double mx = l[0];
    for (int i = 1; i < k; ++i) {
        mx = std::max(mx, l[static_cast<std::size_t>(i)]);
    }
    double z = 0.0;
    for (int i = 0; i < k; ++i) {
        p[static_cast<std::size_t>(i)] = std::exp(l[static_cast<std::size_t>(i)] - mx);
        z += p[static_cast<std::size_t>(i)];
    }
    for (double& v : p) {
        v /= z;
    }
    floor_probabilities(p);
    return p;
}

std::vector<std::vector<double>> Model::predict_batch(const std::vector<Tensor>& images) const {
    if (training_) {
        throw UsageError("predict requires eval mode; call set_eval() first");
    }
    NoGradGuard ng;
    constexpr int kChunk = 256;
    const int k = spec_.num_classes;
    std::vector<std::vector<double>> out;
    out.reserve(images.size());
    const std::int64_t img_elems = numel(spec_.input_shape);
    for (std::size_t start = 0; start < images.size(); start += kChunk) {
        const int n = static_cast<int>(std::min<std::size_t>(kChunk, images.size() - start));
        Shape bshape = spec_.input_shape;
        bshape.insert(bshape.begin(), n);
        Tensor batch(bshape);
        auto bd = batch.mutable_data();
        for (int i = 0; i < n; ++i) {
            const auto src = images[start + static_cast<std::size_t>(i)].data();
            std::copy(src.begin(), src.end(), bd.begin() + i * img_elems);
        }
        const Tensor logits = forward(batch);
        const auto l = logits.data();
        for (int i = 0; i < n; ++i) {
            std::vector<double> p(static_cast<std::size_t>(k));
            const double* row = l.data() + static_cast<std::size_t>(i) * k;
            double mx = row[0];
            for (int j = 1; j < k; ++j) {
                mx = std::max(mx, row[j]);
            }
            double z = 0.0;
            for (int j = 0; j < k; ++j) {
                p[static_cast<std::size_t>(j)] = std::exp(row[j] - mx);
                z += p[static_cast<std::size_t>(j)];
            }
            for (double& v : p) {
                v /= z;
            }
            floor_probabilities(p);
            out.push_back(std::move(p));
        }
    }
    return out;
}

std::vector<Tensor> Model::param_tensors() const {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (const auto& p : params_) {
        out.push_back(p.value);
    }
    return out;
}

std::int64_t Model::num_params() const {
    std::int64_t n = 0;
    for (const auto& p : params_) {
        n += p.value.size();
    }
    return n;
}

std::vector<std::vector<double>> Model::snapshot_weights() const {
    std::vector<std::vector<double>> out;
    out.reserve(params_.size() + buffers_.size());
    for (const auto& p : params_) {
        out.emplace_back(p.value.data().begin(), p.value.data().end());
    }
    for (const auto& b : buffers_) {
        out.emplace_back(b.value.data().begin(), b.value.data().end());
    }
    return out;
}

void Model::restore_weights(const std::vector<std::vector<double>>& weights) {
    if (weights.size() != params_.size() + buffers_.size()) {
        throw FormatError("weight snapshot has " + std::to_string(weights.size()) +
                          " entries, model needs " +
                          std::to_string(params_.size() + buffers_.size()));
    }
    std::size_t i = 0;
    const auto restore_one = [&](Tensor& dst) {
        if (static_cast<std::int64_t>(weights[i].size()) != dst.size()) {
            throw FormatError("weight entry " + std::to_string(i) + " has " +
                              std::to_string(weights[i].size()) + " values, expected " +
                              std::to_string(dst.size()));
        }
        std::copy(weights[i].begin(), weights[i].end(), dst.mutable_data().begin());
        ++i;
    };
    for (auto& p : params_) {
        restore_one(p.value);
    }
    for (auto& b : buffers_) {
        restore_one(b.value);
    }
}

}  // namespace memaudit
