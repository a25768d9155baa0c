#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "memaudit/rng.hpp"
#include "memaudit/tensor.hpp"

namespace memaudit {

enum class Arch { MLP, CNN1, CNN2 };

std::string arch_name(Arch a);
Arch arch_from_name(const std::string& name);

// Architecture id plus the knobs that fully determine the layer sequence.
struct ModelSpec {
    Arch arch = Arch::MLP;
    Shape input_shape{1, 28, 28};
    int num_classes = 10;
    double dropout_rate = 0.0;  // 0 disables dropout sites
    bool batch_norm = false;
    std::uint64_t seed = 0;
};

struct NamedTensor {
    std::string name;
    Tensor value;
};

// A buildable/trainable classifier. Weight layout and forward semantics are
// fixed by the spec; trainable parameters and batch-norm running buffers are
// exposed by name for checkpointing.
class Model {
  public:
    static Model build(const ModelSpec& spec);

    // Logits for a batch [n x c x h x w]. In train mode dropout consumes
    // `dropout_rng` and batch-norm updates its running buffers.
    Tensor forward(const Tensor& batch, Rng* dropout_rng = nullptr) const;

    // Probability vector for one [c x h x w] image: softmax with an epsilon
    // floor of 1e-12 then renormalisation, so every entry is positive.
    // Throws UsageError in train mode (dropout would make it stochastic).
    std::vector<double> predict(const Tensor& image) const;

    // Row-wise probabilities for a batch of images (same contract).
    std::vector<std::vector<double>> predict_batch(const std::vector<Tensor>& images) const;

    void set_train() { training_ = true; }
    void set_eval() { training_ = false; }
    bool training() const { return training_; }

    const ModelSpec& spec() const { return spec_; }
    std::vector<NamedTensor>& params() { return params_; }
    const std::vector<NamedTensor>& params() const { return params_; }
    const std::vector<NamedTensor>& buffers() const { return buffers_; }

    std::vector<Tensor> param_tensors() const;
    std::int64_t num_params() const;

    // Deep copy of params followed by buffers, in declaration order.
    std::vector<std::vector<double>> snapshot_weights() const;
    void restore_weights(const std::vector<std::vector<double>>& weights);

  private:
    Tensor dense_block(const Tensor& x, int layer, bool with_relu, Rng* dropout_rng) const;
    Tensor conv_block(const Tensor& x, int layer) const;
    const Tensor& param(const std::string& name) const;
    Tensor& buffer(const std::string& name) const;

    ModelSpec spec_;
    std::vector<NamedTensor> params_;
    mutable std::vector<NamedTensor> buffers_;  // running stats mutate in train mode
    bool training_ = false;
};

inline constexpr double kProbabilityFloor = 1e-12;

// Epsilon-floor then renormalise a probability vector in place.
void floor_probabilities(std::vector<double>& p);

}  // namespace memaudit
