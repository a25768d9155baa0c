#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "memaudit/errors.hpp"
#include "memaudit/rng.hpp"

namespace memaudit {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

// Dense row-major tensor of 64-bit floats. Copies are shallow (the buffer is
// shared); use clone() for a deep copy. Tensors produced by a taped op carry
// a handle to the tape that recorded them.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::int64_t size() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

    std::span<const double> data() const& { return {data_->data(), data_->size()}; }
    std::span<const double> data() const&& = delete;  // would dangle past the temporary
    std::span<double> mutable_data() & { return {data_->data(), data_->size()}; }

    double item() const;
    double at(std::initializer_list<int> idx) const;

    bool requires_grad() const { return requires_grad_; }
    Tensor& set_requires_grad(bool rg) { requires_grad_ = rg; return *this; }

    const std::shared_ptr<Tape>& tape() const { return tape_; }
    bool defined() const { return static_cast<bool>(data_); }

    // Aliases the buffer under a new shape (same element count). The alias
    // shares the gradient slot of the original, which is exactly the
    // backward rule for a reshape.
    Tensor reshaped(Shape new_shape) const;

    // Deep copy; drops any tape association.
    Tensor clone() const;

    const void* buffer_id() const { return data_.get(); }

  private:
    friend class Tape;
    friend struct OpWriter;

    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
    bool requires_grad_ = false;
    std::shared_ptr<Tape> tape_;
};

// Ordered record of executed primitives for one forward pass. backward()
// replays the record in reverse exactly once; the tape is single-use.
// Gradient buffers live on the tape (keyed by tensor buffer identity), so a
// fresh tape always starts from exact zeros.
//
// A thread extends one active tape until backward() consumes it; the next
// gradient-tracking op starts a fresh one. Concurrent evaluations therefore
// get one tape per thread.
class Tape {
  public:
    // Grad slot for t, allocating a zeroed buffer on first request.
    int slot(const Tensor& t);
    int find_slot(const Tensor& t) const;
    std::vector<double>& grad(int slot) { return grads_[static_cast<std::size_t>(slot)]; }
    const std::vector<double>& grad(int slot) const { return grads_[static_cast<std::size_t>(slot)]; }

    void record(std::function<void(Tape&)> step);

    // Seeds d(loss)/d(loss) = 1 and replays every recorded step in reverse
    // execution order. Throws UsageError on a second call.
    void backward(const Tensor& loss);

    // Gradient of the loss wrt t. Exact zeros when t never influenced the
    // loss. Valid only after backward().
    std::vector<double> gradient(const Tensor& t) const;

    bool consumed() const { return consumed_; }
    std::size_t num_ops() const { return ops_.size(); }

  private:
    std::unordered_map<const void*, int> slots_;
    std::vector<std::vector<double>> grads_;
    std::vector<std::int64_t> sizes_;
    std::vector<std::function<void(Tape&)>> ops_;
    bool consumed_ = false;
    bool ran_ = false;
};

// Thread-local autograd switch. Ops record onto a tape only while enabled.
bool grad_enabled();
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

// ---- primitive ops ------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);

// input rank 3 [ci x h x w] or rank 4 [n x ci x h x w]; kernels [co x ci x 3 x 3].
Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias);

// input rank 3 or 4; non-overlapping 2x2 windows.
Tensor maxpool2(const Tensor& input);

Tensor relu(const Tensor& x);

// rank-1 logits -> probability vector (max-subtracted for stability).
Tensor softmax(const Tensor& logits);

// rank-1 logits, class index -> scalar loss (log-sum-exp form).
Tensor cross_entropy(const Tensor& logits, int target);

// [b x k] logits -> scalar mean loss over the batch.
Tensor mean_cross_entropy(const Tensor& logits, std::span<const int> targets);

Tensor add(const Tensor& a, const Tensor& b);          // same shape
Tensor add_rowvec(const Tensor& m, const Tensor& v);   // [b x f] + [f]
Tensor mul(const Tensor& a, const Tensor& b);          // elementwise
Tensor scale(const Tensor& a, double c);
Tensor sum(const Tensor& a);                           // -> scalar

// Train-mode inverted dropout; rate 0 returns x unchanged.
Tensor dropout(const Tensor& x, double rate, Rng& rng);

// Batch normalisation over [b x f] (per feature) or [n x c x h x w] (per
// channel). In training mode normalises with batch statistics and updates
// the running buffers in place; in eval mode uses the running buffers.
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 Tensor& running_mean, Tensor& running_var,
                 bool training, double momentum = 0.1, double eps = 1e-8);

// Replays the tape that produced `loss` (a scalar).
void backward(const Tensor& loss);

// Sum of squared gradient entries over every listed parameter.
double grad_sq_norm(const Tape& tape, std::span<const Tensor> params);
double grad_sq_norm(std::span<const std::vector<double>> grads);

}  // namespace memaudit
