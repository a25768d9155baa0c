#pragma once

#include <cstdint>

// Dense compute kernels behind the tensor ops. The public functions are
// OpenMP-parallel; `kernels::ref` holds plain serial loops with the same
// contracts, kept as the correctness reference for tests and the benchmark.
//
// Every parallel kernel partitions work so that each output element is
// produced by exactly one thread with a fixed accumulation order, so results
// are bit-identical for any thread count or schedule.

namespace memaudit::kernels {

// c[r x n] = a[r x k] * b[k x n]; accumulates into c when `accumulate`.
void matmul_nn(const double* a, const double* b, double* c, int r, int k, int n,
               bool accumulate = false);

// out[c x r] = transpose of a[r x c].
void transpose(const double* a, double* out, int r, int c);

// c[r x m] = a[r x k] * b[m x k]^T (materialises b^T internally).
void matmul_nt(const double* a, const double* b, double* c, int r, int k, int m,
               bool accumulate = false);

// c[k x n] = a[r x k]^T * b[r x n] (materialises a^T internally).
void matmul_tn(const double* a, const double* b, double* c, int r, int k, int n,
               bool accumulate = false);

// Valid cross-correlation, stride 1.
// in[n x ci x h x w], weights[co x ci x kh x kw], bias[co] -> out[n x co x (h-kh+1) x (w-kw+1)]
void conv2d_forward(const double* in, const double* weights, const double* bias, double* out,
                    int n, int ci, int h, int w, int co, int kh, int kw);

// gin[n x ci x h x w] += gradient wrt the input (gather form).
void conv2d_backward_input(const double* gout, const double* weights, double* gin,
                           int n, int ci, int h, int w, int co, int kh, int kw);

// gweights[co x ci x kh x kw] += gradient wrt the kernels.
void conv2d_backward_kernels(const double* gout, const double* in, double* gweights,
                             int n, int ci, int h, int w, int co, int kh, int kw);

// gbias[co] += gradient wrt the bias.
void conv2d_backward_bias(const double* gout, double* gbias, int n, int co, int oh, int ow);

// Non-overlapping 2x2 max pooling. argmax records the flat input index of
// the window maximum (first occurrence in row-major window scan on ties).
// in[n x c x h x w] -> out[n x c x h/2 x w/2]
void maxpool2_forward(const double* in, double* out, std::int32_t* argmax,
                      int n, int c, int h, int w);

// gin += scatter of gout onto the recorded argmax positions.
void maxpool2_backward(const double* gout, const std::int32_t* argmax, double* gin,
                       int n, int c, int h, int w);

namespace ref {

void matmul_nn(const double* a, const double* b, double* c, int r, int k, int n,
               bool accumulate = false);
void matmul_nt(const double* a, const double* b, double* c, int r, int k, int m,
               bool accumulate = false);
void matmul_tn(const double* a, const double* b, double* c, int r, int k, int n,
               bool accumulate = false);
void conv2d_forward(const double* in, const double* weights, const double* bias, double* out,
                    int n, int ci, int h, int w, int co, int kh, int kw);
void conv2d_backward_input(const double* gout, const double* weights, double* gin,
                           int n, int ci, int h, int w, int co, int kh, int kw);
void conv2d_backward_kernels(const double* gout, const double* in, double* gweights,
                             int n, int ci, int h, int w, int co, int kh, int kw);
void maxpool2_forward(const double* in, double* out, std::int32_t* argmax,
                      int n, int c, int h, int w);

}  // namespace ref

}  // namespace memaudit::kernels
