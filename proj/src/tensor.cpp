#include "memaudit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "memaudit/kernels.hpp"

namespace memaudit {

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (const int d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != 0) {
            os << 'x';
        }
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill, bool requires_grad)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<double>>(static_cast<std::size_t>(numel(shape_)), fill)),
      requires_grad_(requires_grad) {
    for (const int d : shape_) {
        if (d <= 0) {
            throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape_));
        }
    }
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw DimensionError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<double>>(std::move(data));
    t.requires_grad_ = requires_grad;
    return t;
}

double Tensor::item() const {
    if (size() != 1) {
        throw UsageError("item() requires a scalar tensor, got " + shape_str(shape_));
    }
    return (*data_)[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
    if (static_cast<int>(idx.size()) != rank()) {
        throw DimensionError("index rank mismatch for " + shape_str(shape_));
    }
    std::int64_t flat = 0;
    int axis = 0;
    for (const int i : idx) {
        flat = flat * shape_[static_cast<std::size_t>(axis)] + i;
        ++axis;
    }
    return (*data_)[static_cast<std::size_t>(flat)];
}

Tensor Tensor::reshaped(Shape new_shape) const {
    if (numel(new_shape) != size()) {
        throw DimensionError("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape) +
                             " changes the element count");
    }
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.data_ = data_;
    t.requires_grad_ = requires_grad_;
    t.tape_ = tape_;
    return t;
}

Tensor Tensor::clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<double>>(*data_);
    t.requires_grad_ = requires_grad_;
    return t;
}

int Tape::slot(const Tensor& t) {
    const auto it = slots_.find(t.buffer_id());
    if (it != slots_.end()) {
        return it->second;
    }
    const int id = static_cast<int>(grads_.size());
    slots_.emplace(t.buffer_id(), id);
    grads_.emplace_back(static_cast<std::size_t>(t.size()), 0.0);
    sizes_.push_back(t.size());
    return id;
}

int Tape::find_slot(const Tensor& t) const {
    const auto it = slots_.find(t.buffer_id());
    return it == slots_.end() ? -1 : it->second;
}

void Tape::record(std::function<void(Tape&)> step) {
    if (consumed_) {
        throw UsageError("tape already consumed by backward(); build a new forward pass");
    }
    ops_.push_back(std::move(step));
}

void Tape::backward(const Tensor& loss) {
    if (consumed_) {
        throw UsageError("backward() called twice on a single-use tape");
    }
    if (loss.size() != 1) {
        throw UsageError("backward() requires a scalar loss, got " + shape_str(loss.shape()));
    }
    const int ls = find_slot(loss);
    if (ls < 0) {
        throw UsageError("backward() on a value this tape did not produce");
    }
    consumed_ = true;
    grads_[static_cast<std::size_t>(ls)][0] = 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
        (*it)(*this);
    }
    ran_ = true;
}

std::vector<double> Tape::gradient(const Tensor& t) const {
    if (!ran_) {
        throw UsageError("gradient() before backward()");
    }
    const int s = find_slot(t);
    if (s < 0) {
        return std::vector<double>(static_cast<std::size_t>(t.size()), 0.0);
    }
    return grads_[static_cast<std::size_t>(s)];
}

namespace {

thread_local bool g_grad_enabled = true;

// The tape the current thread is extending. A forward pass grows one tape
// until backward() consumes it; the next gradient-tracking op then starts a
// fresh one.
thread_local std::weak_ptr<Tape> g_active_tape;

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// Shared op plumbing: resolves the tape for an op's inputs and exposes the
// pieces a backward closure may capture (buffers and slot ids, never whole
// Tensors, which would create tape <-> tensor reference cycles).
struct OpWriter {
    explicit OpWriter(std::initializer_list<const Tensor*> inputs) {
        for (const Tensor* t : inputs) {
            any_grad = any_grad || t->requires_grad_;
            if (!t->tape_) {
                continue;
            }
            if (tape && tape != t->tape_) {
                throw UsageError("op inputs belong to different tapes");
            }
            tape = t->tape_;
        }
        if (!grad_enabled()) {
            tape = nullptr;
            return;
        }
        if (tape) {
            if (tape->consumed()) {
                throw UsageError("op recorded on a consumed tape");
            }
            g_active_tape = tape;
            return;
        }
        if (!any_grad) {
            return;
        }
        tape = g_active_tape.lock();
        if (!tape || tape->consumed()) {
            tape = std::make_shared<Tape>();
        }
        g_active_tape = tape;
    }

    bool taped() const { return static_cast<bool>(tape); }

    // Slot for an input gradient; -1 when no gradient should flow to it.
    int in_slot(const Tensor& t) const { return t.requires_grad_ ? tape->slot(t) : -1; }

    // Shared ownership of an input buffer, for closures that need the
    // forward values during backward.
    std::shared_ptr<const std::vector<double>> hold(const Tensor& t) const { return t.data_; }

    void attach(Tensor& out) const {
        if (taped()) {
            out.tape_ = tape;
            out.requires_grad_ = true;
        }
    }

    std::shared_ptr<Tape> tape;
    bool any_grad = false;
};

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    const int r = a.dim(0);
    const int k = a.dim(1);
    const int n = b.dim(1);
    Tensor out(Shape{r, n});
    kernels::matmul_nn(a.data().data(), b.data().data(), out.mutable_data().data(), r, k, n);

    OpWriter op({&a, &b});
    if (op.taped()) {
        op.attach(out);
        const int sa = op.in_slot(a);
        const int sb = op.in_slot(b);
        const int so = op.tape->slot(out);
        auto adata = op.hold(a);
        auto bdata = op.hold(b);
        op.tape->record([sa, sb, so, adata, bdata, r, k, n](Tape& t) {
            const double* go = t.grad(so).data();
            if (sa >= 0) {
                kernels::matmul_nt(go, bdata->data(), t.grad(sa).data(), r, n, k, true);
            }
            if (sb >= 0) {
                kernels::matmul_tn(adata->data(), go, t.grad(sb).data(), r, k, n, true);
            }
        });
    }
    return out;
}

namespace {

struct ConvDims {
    int n, ci, h, w, co, oh, ow;
    bool batched;
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernels_t, const Tensor& bias) {
    if (input.rank() != 3 && input.rank() != 4) {
        throw DimensionError("conv2d input must be rank 3 or 4, got " + shape_str(input.shape()));
    }
    if (kernels_t.rank() != 4 || kernels_t.dim(2) != 3 || kernels_t.dim(3) != 3) {
        throw DimensionError("conv2d kernels must be [co x ci x 3 x 3], got " +
                             shape_str(kernels_t.shape()));
    }
    ConvDims d{};
    d.batched = input.rank() == 4;
    d.n = d.batched ? input.dim(0) : 1;
    d.ci = input.dim(d.batched ? 1 : 0);
    d.h = input.dim(d.batched ? 2 : 1);
    d.w = input.dim(d.batched ? 3 : 2);
    d.co = kernels_t.dim(0);
    if (kernels_t.dim(1) != d.ci) {
        throw DimensionError("conv2d channel mismatch: input " + shape_str(input.shape()) +
                             " vs kernels " + shape_str(kernels_t.shape()));
    }
    if (bias.rank() != 1 || bias.dim(0) != d.co) {
        throw DimensionError("conv2d bias must be [co], got " + shape_str(bias.shape()));
    }
    if (d.h < 3 || d.w < 3) {
        throw DimensionError("conv2d input spatial dims must be >= 3, got " +
                             shape_str(input.shape()));
    }
    d.oh = d.h - 2;
    d.ow = d.w - 2;
    return d;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernels_t, const Tensor& bias) {
    const ConvDims d = conv_dims(input, kernels_t, bias);
    Tensor out(d.batched ? Shape{d.n, d.co, d.oh, d.ow} : Shape{d.co, d.oh, d.ow});
    kernels::conv2d_forward(input.data().data(), kernels_t.data().data(), bias.data().data(),
                            out.mutable_data().data(), d.n, d.ci, d.h, d.w, d.co, 3, 3);

    OpWriter op({&input, &kernels_t, &bias});
    if (op.taped()) {
        op.attach(out);
        const int si = op.in_slot(input);
        const int sk = op.in_slot(kernels_t);
        const int sb = op.in_slot(bias);
        const int so = op.tape->slot(out);
        auto idata = op.hold(input);
        auto kdata = op.hold(kernels_t);
        op.tape->record([si, sk, sb, so, idata, kdata, d](Tape& t) {
            const double* go = t.grad(so).data();
            if (si >= 0) {
                kernels::conv2d_backward_input(go, kdata->data(), t.grad(si).data(), d.n, d.ci,
                                               d.h, d.w, d.co, 3, 3);
            }
            if (sk >= 0) {
                kernels::conv2d_backward_kernels(go, idata->data(), t.grad(sk).data(), d.n, d.ci,
                                                 d.h, d.w, d.co, 3, 3);
            }
            if (sb >= 0) {
                kernels::conv2d_backward_bias(go, t.grad(sb).data(), d.n, d.co, d.oh, d.ow);
            }
        });
    }
    return out;
}

Tensor maxpool2(const Tensor& input) {
    if (input.rank() != 3 && input.rank() != 4) {
        throw DimensionError("maxpool2 input must be rank 3 or 4, got " +
                             shape_str(input.shape()));
    }
    const bool batched = input.rank() == 4;
    const int n = batched ? input.dim(0) : 1;
    const int c = input.dim(batched ? 1 : 0);
    const int h = input.dim(batched ? 2 : 1);
    const int w = input.dim(batched ? 3 : 2);
    if (h < 2 || w < 2) {
        throw DimensionError("maxpool2 needs spatial dims >= 2, got " + shape_str(input.shape()));
    }
    const int oh = h / 2;
    const int ow = w / 2;
    Tensor out(batched ? Shape{n, c, oh, ow} : Shape{c, oh, ow});
    auto argmax = std::make_shared<std::vector<std::int32_t>>(
        static_cast<std::size_t>(n) * c * oh * ow);
    kernels::maxpool2_forward(input.data().data(), out.mutable_data().data(), argmax->data(), n, c,
                              h, w);

    OpWriter op({&input});
    if (op.taped()) {
        op.attach(out);
        const int si = op.in_slot(input);
        const int so = op.tape->slot(out);
        op.tape->record([si, so, argmax, n, c, h, w](Tape& t) {
            if (si >= 0) {
                kernels::maxpool2_backward(t.grad(so).data(), argmax->data(), t.grad(si).data(), n,
                                           c, h, w);
            }
        });
    }
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out(x.shape());
    const auto in = x.data();
    auto o = out.mutable_data();
    const std::int64_t n = x.size();
#pragma omp parallel for schedule(static) if (n > 65536)
    for (std::int64_t i = 0; i < n; ++i) {
        o[i] = in[i] > 0.0 ? in[i] : 0.0;
    }

    OpWriter op({&x});
    if (op.taped()) {
        op.attach(out);
        const int si = op.in_slot(x);
        const int so = op.tape->slot(out);
        auto xdata = op.hold(x);
        op.tape->record([si, so, xdata, n](Tape& t) {
            if (si < 0) {
                return;
            }
            const double* go = t.grad(so).data();
            const double* xv = xdata->data();
            double* gi = t.grad(si).data();
            for (std::int64_t i = 0; i < n; ++i) {
                if (xv[i] > 0.0) {
                    gi[i] += go[i];
                }
            }
        });
    }
    return out;
}

namespace {

// Max-subtracted softmax of one row; returns the log-sum-exp for reuse.
double softmax_row(const double* x, double* p, int n) {
    double mx = x[0];
    for (int i = 1; i < n; ++i) {
        mx = std::max(mx, x[i]);
    }
    double z = 0.0;
    for (int i = 0; i < n; ++i) {
        p[i] = std::exp(x[i] - mx);
        z += p[i];
    }
    for (int i = 0; i < n; ++i) {
        p[i] /= z;
    }
    return mx + std::log(z);
}

}  // namespace

Tensor softmax(const Tensor& logits) {
    if (logits.rank() != 1) {
        throw DimensionError("softmax expects a rank-1 tensor, got " + shape_str(logits.shape()));
    }
    const int n = logits.dim(0);
    Tensor out(logits.shape());
    softmax_row(logits.data().data(), out.mutable_data().data(), n);

    OpWriter op({&logits});
    if (op.taped()) {
        op.attach(out);
        const int si = op.in_slot(logits);
        const int so = op.tape->slot(out);
        auto pdata = std::make_shared<std::vector<double>>(out.data().begin(), out.data().end());
        op.tape->record([si, so, pdata, n](Tape& t) {
            if (si < 0) {
                return;
            }
            const double* go = t.grad(so).data();
            const double* p = pdata->data();
            double dot = 0.0;
            for (int i = 0; i < n; ++i) {
                dot += go[i] * p[i];
            }
            double* gi = t.grad(si).data();
            for (int i = 0; i < n; ++i) {
                gi[i] += p[i] * (go[i] - dot);
            }
        });
    }
    return out;
}

Tensor cross_entropy(const Tensor& logits, int target) {
    if (logits.rank() != 1) {
        throw DimensionError("cross_entropy expects rank-1 logits, got " +
                             shape_str(logits.shape()));
    }
    const int n = logits.dim(0);
    if (target < 0 || target >= n) {
        throw std::out_of_range("cross_entropy target " + std::to_string(target) +
                                " out of range for " + std::to_string(n) + " classes");
    }
    auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
    const double lse = softmax_row(logits.data().data(), probs->data(), n);
    Tensor out = Tensor::from_data(Shape{1}, {lse - logits.data()[static_cast<std::size_t>(target)]});

    OpWriter op({&logits});
    if (op.taped()) {
        op.attach(out);
        const int si = op.in_slot(logits);
        const int so = op.tape->slot(out);
        op.tape->record([si, so, probs, target, n](Tape& t) {
            if (si < 0) {
                return;
            }
            const double g = t.grad(so)[0];
            double* gi = t.grad(si).data();
            for (int i = 0; i < n; ++i) {
                gi[i] += g * ((*probs)[static_cast<std::size_t>(i)] - (i == target ? 1.0 : 0.0));
            }
        });
    }
    return out;
}

Tensor mean_cross_entropy(const Tensor& logits, std::span<const int> targets) {
    if (logits.rank() != 2) {
        throw DimensionError("mean_cross_entropy expects [b x k] logits, got " +
                             shape_str(logits.shape()));
    }
    const int b = logits.dim(0);
    const int k = logits.dim(1);
    if (static_cast<int>(targets.size()) != b) {
        throw DimensionError("mean_cross_entropy: " + std::to_string(targets.size()) +
                             " targets for batch of " + std::to_string(b));
    }
    auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(b) * k);
    auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
    for (const int t : *tgt) {
        if (t < 0 || t >= k) {
            throw std::out_of_range("mean_cross_entropy target " + std::to_string(t) +
                                    " out of range for " + std::to_string(k) + " classes");
        }
    }
    const double* x = logits.data().data();
    double loss = 0.0;
    for (int i = 0; i < b; ++i) {
        const double lse = softmax_row(x + static_cast<std::size_t>(i) * k,
                                       probs->data() + static_cast<std::size_t>(i) * k, k);
        loss += lse - x[static_cast<std::size_t>(i) * k + (*tgt)[static_cast<std::size_t>(i)]];
    }
    loss /= b;
    Tensor out = Tensor::from_data(Shape{1}, {loss});

    OpWriter op({&logits});
    if (op.taped()) {
        op.attach(out);
        const int si = op.in_slot(logits);
        const int so = op.tape->slot(out);
        op.tape->record([si, so, probs, tgt, b, k](Tape& t) {
            if (si < 0) {
                return;
            }
            const double g = t.grad(so)[0] / b;
            double* gi = t.grad(si).data();
            const double* p = probs->data();
            for (int i = 0; i < b; ++i) {
                const int target = (*tgt)[static_cast<std::size_t>(i)];
                for (int j = 0; j < k; ++j) {
                    const std::size_t idx = static_cast<std::size_t>(i) * k + j;
                    gi[idx] += g * (p[idx] - (j == target ? 1.0 : 0.0));
                }
            }
        });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    Tensor out(a.shape());
    const std::int64_t n = a.size();
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.mutable_data().data();
    for (std::int64_t i = 0; i < n; ++i) {
        po[i] = pa[i] + pb[i];
    }

    OpWriter op({&a, &b});
    if (op.taped()) {
        op.attach(out);
        const int sa = op.in_slot(a);
        const int sb = op.in_slot(b);
        const int so = op.tape->slot(out);
        op.tape->record([sa, sb, so, n](Tape& t) {
            const double* go = t.grad(so).data();
            if (sa >= 0) {
                double* g = t.grad(sa).data();
                for (std::int64_t i = 0; i < n; ++i) {
                    g[i] += go[i];
                }
            }
            if (sb >= 0) {
                double* g = t.grad(sb).data();
                for (std::int64_t i = 0; i < n; ++i) {
                    g[i] += go[i];
                }
            }
        });
    }
    return out;
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
    if (m.rank() != 2 || v.rank() != 1 || m.dim(1) != v.dim(0)) {
        throw DimensionError("add_rowvec shape mismatch: " + shape_str(m.shape()) + " + " +
                             shape_str(v.shape()));
    }
    const int b = m.dim(0);
    const int f = m.dim(1);
    Tensor out(m.shape());
    const double* pm = m.data().data();
    const double* pv = v.data().data();
    double* po = out.mutable_data().data();
    for (int i = 0; i < b; ++i) {
        for (int j = 0; j < f; ++j) {
            po[static_cast<std::size_t>(i) * f + j] = pm[static_cast<std::size_t>(i) * f + j] + pv[j];
        }
    }

    OpWriter op({&m, &v});
    if (op.taped()) {
        op.attach(out);
        const int sm = op.in_slot(m);
        const int sv = op.in_slot(v);
        const int so = op.tape->slot(out);
        op.tape->record([sm, sv, so, b, f](Tape& t) {
            const double* go = t.grad(so).data();
            if (sm >= 0) {
                double* g = t.grad(sm).data();
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(b) * f; ++i) {
                    g[i] += go[i];
                }
            }
            if (sv >= 0) {
                double* g = t.grad(sv).data();
                for (int i = 0; i < b; ++i) {
                    for (int j = 0; j < f; ++j) {
                        g[j] += go[static_cast<std::size_t>(i) * f + j];
                    }
                }
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("mul shape mismatch: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    Tensor out(a.shape());
    const std::int64_t n = a.size();
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.mutable_data().data();
    for (std::int64_t i = 0; i < n; ++i) {
        po[i] = pa[i] * pb[i];
    }

    OpWriter op({&a, &b});
    if (op.taped()) {
        op.attach(out);
        const int sa = op.in_slot(a);
        const int sb = op.in_slot(b);
        const int so = op.tape->slot(out);
        auto adata = op.hold(a);
        auto bdata = op.hold(b);
        op.tape->record([sa, sb, so, adata, bdata, n](Tape& t) {
            const double* go = t.grad(so).data();
            if (sa >= 0) {
                double* g = t.grad(sa).data();
                for (std::int64_t i = 0; i < n; ++i) {
                    g[i] += go[i] * (*bdata)[static_cast<std::size_t>(i)];
                }
            }
            if (sb >= 0) {
                double* g = t.grad(sb).data();
                for (std::int64_t i = 0; i < n; ++i) {
                    g[i] += go[i] * (*adata)[static_cast<std::size_t>(i)];
                }
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double c) {
    Tensor out(a.shape());
    const std::int64_t n = a.size();
    const double* pa = a.data().data();
    double* po = out.mutable_data().data();
    for (std::int64_t i = 0; i < n; ++i) {
        po[i] = pa[i] * c;
    }

    OpWriter op({&a});
    if (op.taped()) {
        op.attach(out);
        const int sa = op.in_slot(a);
        const int so = op.tape->slot(out);
        op.tape->record([sa, so, c, n](Tape& t) {
            if (sa < 0) {
                return;
            }
            const double* go = t.grad(so).data();
            double* g = t.grad(sa).data();
            for (std::int64_t i = 0; i < n; ++i) {
                g[i] += go[i] * c;
            }
        });
    }
    return out;
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (const double v : a.data()) {
        s += v;
    }
    Tensor out = Tensor::from_data(Shape{1}, {s});

    OpWriter op({&a});
    if (op.taped()) {
        op.attach(out);
        const int sa = op.in_slot(a);
        const int so = op.tape->slot(out);
        const std::int64_t n = a.size();
        op.tape->record([sa, so, n](Tape& t) {
            if (sa < 0) {
                return;
            }
            const double g = t.grad(so)[0];
            double* gi = t.grad(sa).data();
            for (std::int64_t i = 0; i < n; ++i) {
                gi[i] += g;
            }
        });
    }
    return out;
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) {
        throw UsageError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
    }
    if (rate == 0.0) {
        return x;
    }
    const std::int64_t n = x.size();
    auto mask = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(n));
    const double inv = 1.0 / (1.0 - rate);
    Tensor out(x.shape());
    const double* px = x.data().data();
    double* po = out.mutable_data().data();
    for (std::int64_t i = 0; i < n; ++i) {
        const bool keep = rng.uniform() >= rate;
        (*mask)[static_cast<std::size_t>(i)] = keep;
        po[i] = keep ? px[i] * inv : 0.0;
    }

    OpWriter op({&x});
    if (op.taped()) {
        op.attach(out);
        const int si = op.in_slot(x);
        const int so = op.tape->slot(out);
        op.tape->record([si, so, mask, inv, n](Tape& t) {
            if (si < 0) {
                return;
            }
            const double* go = t.grad(so).data();
            double* gi = t.grad(si).data();
            for (std::int64_t i = 0; i < n; ++i) {
                if ((*mask)[static_cast<std::size_t>(i)]) {
                    gi[i] += go[i] * inv;
                }
            }
        });
    }
    return out;
}

namespace {

struct BnDims {
    int channels;     // normalised features
    std::int64_t per_channel;  // elements averaged per feature
    std::int64_t outer;        // leading batch extent
    std::int64_t inner;        // trailing spatial extent (1 for dense)
};

BnDims bn_dims(const Tensor& x) {
    BnDims d{};
    if (x.rank() == 2) {
        d.channels = x.dim(1);
        d.outer = x.dim(0);
        d.inner = 1;
    } else if (x.rank() == 4) {
        d.channels = x.dim(1);
        d.outer = x.dim(0);
        d.inner = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
    } else {
        throw DimensionError("batchnorm expects rank 2 or 4 input, got " + shape_str(x.shape()));
    }
    d.per_channel = d.outer * d.inner;
    return d;
}

}  // namespace

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 Tensor& running_mean, Tensor& running_var,
                 bool training, double momentum, double eps) {
    const BnDims d = bn_dims(x);
    if (gamma.size() != d.channels || beta.size() != d.channels ||
        running_mean.size() != d.channels || running_var.size() != d.channels) {
        throw DimensionError("batchnorm parameter length mismatch for " + shape_str(x.shape()));
    }
    const std::int64_t n = x.size();
    const double* px = x.data().data();
    const int c = d.channels;

    const auto channel_of = [&](std::int64_t i) {
        return static_cast<int>((i / d.inner) % c);
    };

    std::vector<double> mean(static_cast<std::size_t>(c));
    std::vector<double> invstd(static_cast<std::size_t>(c));
    if (training) {
        std::vector<double> var(static_cast<std::size_t>(c), 0.0);
        for (std::int64_t i = 0; i < n; ++i) {
            mean[static_cast<std::size_t>(channel_of(i))] += px[i];
        }
        for (int f = 0; f < c; ++f) {
            mean[static_cast<std::size_t>(f)] /= static_cast<double>(d.per_channel);
        }
        for (std::int64_t i = 0; i < n; ++i) {
            const double dv = px[i] - mean[static_cast<std::size_t>(channel_of(i))];
            var[static_cast<std::size_t>(channel_of(i))] += dv * dv;
        }
        auto rm = running_mean.mutable_data();
        auto rv = running_var.mutable_data();
        for (int f = 0; f < c; ++f) {
            var[static_cast<std::size_t>(f)] /= static_cast<double>(d.per_channel);
            invstd[static_cast<std::size_t>(f)] =
                1.0 / std::sqrt(var[static_cast<std::size_t>(f)] + eps);
            // Running variance uses the unbiased estimate; normalisation the
            // biased one.
            const double unbiased = d.per_channel > 1
                ? var[static_cast<std::size_t>(f)] * static_cast<double>(d.per_channel) /
                      static_cast<double>(d.per_channel - 1)
                : var[static_cast<std::size_t>(f)];
            rm[f] = (1.0 - momentum) * rm[f] + momentum * mean[static_cast<std::size_t>(f)];
            rv[f] = (1.0 - momentum) * rv[f] + momentum * unbiased;
        }
    } else {
        const auto rm = running_mean.data();
        const auto rv = running_var.data();
        for (int f = 0; f < c; ++f) {
            mean[static_cast<std::size_t>(f)] = rm[f];
            invstd[static_cast<std::size_t>(f)] = 1.0 / std::sqrt(rv[f] + eps);
        }
    }

    auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
    Tensor out(x.shape());
    double* po = out.mutable_data().data();
    const double* pg = gamma.data().data();
    const double* pb = beta.data().data();
    for (std::int64_t i = 0; i < n; ++i) {
        const int f = channel_of(i);
        const double xh = (px[i] - mean[static_cast<std::size_t>(f)]) *
                          invstd[static_cast<std::size_t>(f)];
        (*xhat)[static_cast<std::size_t>(i)] = xh;
        po[i] = pg[f] * xh + pb[f];
    }

    OpWriter op({&x, &gamma, &beta});
    if (op.taped()) {
        op.attach(out);
        const int sx = op.in_slot(x);
        const int sg = op.in_slot(gamma);
        const int sb = op.in_slot(beta);
        const int so = op.tape->slot(out);
        auto istd = std::make_shared<std::vector<double>>(invstd);
        auto gvals = std::make_shared<std::vector<double>>(gamma.data().begin(),
                                                           gamma.data().end());
        const std::int64_t inner = d.inner;
        const std::int64_t per_channel = d.per_channel;
        op.tape->record([sx, sg, sb, so, istd, gvals, xhat, training, inner, per_channel, c,
                         n](Tape& t) {
            const double* go = t.grad(so).data();
            const auto ch = [&](std::int64_t i) { return static_cast<int>((i / inner) % c); };
            if (sg >= 0) {
                double* g = t.grad(sg).data();
                for (std::int64_t i = 0; i < n; ++i) {
                    g[ch(i)] += go[i] * (*xhat)[static_cast<std::size_t>(i)];
                }
            }
            if (sb >= 0) {
                double* g = t.grad(sb).data();
                for (std::int64_t i = 0; i < n; ++i) {
                    g[ch(i)] += go[i];
                }
            }
            if (sx < 0) {
                return;
            }
            double* gx = t.grad(sx).data();
            if (!training) {
                // Running statistics are constants here.
                for (std::int64_t i = 0; i < n; ++i) {
                    const int f = ch(i);
                    gx[i] += go[i] * (*gvals)[static_cast<std::size_t>(f)] *
                             (*istd)[static_cast<std::size_t>(f)];
                }
                return;
            }
            std::vector<double> sum_dy(static_cast<std::size_t>(c), 0.0);
            std::vector<double> sum_dy_xhat(static_cast<std::size_t>(c), 0.0);
            for (std::int64_t i = 0; i < n; ++i) {
                const int f = ch(i);
                const double dxh = go[i] * (*gvals)[static_cast<std::size_t>(f)];
                sum_dy[static_cast<std::size_t>(f)] += dxh;
                sum_dy_xhat[static_cast<std::size_t>(f)] +=
                    dxh * (*xhat)[static_cast<std::size_t>(i)];
            }
            const double m = static_cast<double>(per_channel);
            for (std::int64_t i = 0; i < n; ++i) {
                const int f = ch(i);
                const double dxh = go[i] * (*gvals)[static_cast<std::size_t>(f)];
                gx[i] += (*istd)[static_cast<std::size_t>(f)] *
                         (dxh - sum_dy[static_cast<std::size_t>(f)] / m -
                          (*xhat)[static_cast<std::size_t>(i)] *
                              sum_dy_xhat[static_cast<std::size_t>(f)] / m);
            }
        });
    }
    return out;
}

void backward(const Tensor& loss) {
    if (!loss.tape()) {
        throw UsageError("backward() on a value produced outside any tape");
    }
    loss.tape()->backward(loss);
}

double grad_sq_norm(const Tape& tape, std::span<const Tensor> params) {
    double s = 0.0;
    for (const Tensor& p : params) {
        const int slot = tape.find_slot(p);
        if (slot < 0) {
            continue;  // unreachable leaf: gradient is exactly zero
        }
        for (const double g : tape.grad(slot)) {
            s += g * g;
        }
    }
    return s;
}

double grad_sq_norm(std::span<const std::vector<double>> grads) {
    double s = 0.0;
    for (const auto& g : grads) {
        for (const double v : g) {
            s += v * v;
        }
    }
    return s;
}

}  // namespace memaudit
