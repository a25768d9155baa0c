#include "memaudit/kernels.hpp"

#include <algorithm>
#include <cstddef>
#include <vector>

namespace memaudit::kernels {

namespace {
constexpr int kRowTile = 32;
constexpr int kInnerTile = 240;
}  // namespace

void matmul_nn(const double* a, const double* b, double* c, int r, int k, int n,
               bool accumulate) {
    if (!accumulate) {
        std::fill(c, c + static_cast<std::size_t>(r) * n, 0.0);
    }
    const int row_tiles = (r + kRowTile - 1) / kRowTile;
    // Each thread owns whole rows of c; per element the k-accumulation order
    // is ascending regardless of tiling, so the result is schedule-invariant.
#pragma omp parallel for schedule(static) if (row_tiles > 1)
    for (int t = 0; t < row_tiles; ++t) {
        const int i0 = t * kRowTile;
        const int i1 = std::min(r, i0 + kRowTile);
        for (int k0 = 0; k0 < k; k0 += kInnerTile) {
            const int k1 = std::min(k, k0 + kInnerTile);
            for (int i = i0; i < i1; ++i) {
                double* crow = c + static_cast<std::size_t>(i) * n;
                const double* arow = a + static_cast<std::size_t>(i) * k;
                for (int kk = k0; kk < k1; ++kk) {
                    const double av = arow[kk];
                    const double* brow = b + static_cast<std::size_t>(kk) * n;
                    for (int j = 0; j < n; ++j) {
                        crow[j] += av * brow[j];
                    }
                }
            }
        }
    }
}

void transpose(const double* a, double* out, int r, int c) {
    constexpr int kBlock = 32;
    const int row_blocks = (r + kBlock - 1) / kBlock;
#pragma omp parallel for schedule(static) if (row_blocks > 1)
    for (int bi = 0; bi < row_blocks; ++bi) {
        const int i0 = bi * kBlock;
        const int i1 = std::min(r, i0 + kBlock);
        for (int j0 = 0; j0 < c; j0 += kBlock) {
            const int j1 = std::min(c, j0 + kBlock);
            for (int i = i0; i < i1; ++i) {
                for (int j = j0; j < j1; ++j) {
                    out[static_cast<std::size_t>(j) * r + i] =
                        a[static_cast<std::size_t>(i) * c + j];
                }
            }
        }
    }
}

void matmul_nt(const double* a, const double* b, double* c, int r, int k, int m,
               bool accumulate) {
    std::vector<double> bt(static_cast<std::size_t>(k) * m);
    transpose(b, bt.data(), m, k);
    matmul_nn(a, bt.data(), c, r, k, m, accumulate);
}

void matmul_tn(const double* a, const double* b, double* c, int r, int k, int n,
               bool accumulate) {
    std::vector<double> at(static_cast<std::size_t>(k) * r);
    transpose(a, at.data(), r, k);
    matmul_nn(at.data(), b, c, k, r, n, accumulate);
}

void conv2d_forward(const double* in, const double* weights, const double* bias, double* out,
                    int n, int ci, int h, int w, int co, int kh, int kw) {
    const int oh = h - kh + 1;
    const int ow = w - kw + 1;
    const std::size_t in_img = static_cast<std::size_t>(ci) * h * w;
    const std::size_t out_img = static_cast<std::size_t>(co) * oh * ow;
    const std::size_t w_per_out = static_cast<std::size_t>(ci) * kh * kw;
    // Row-accumulator form: the innermost loop is an axpy over the output
    // row, which vectorises. Per output element the accumulation order is
    // bias, then (ic, dy, dx) ascending, for every thread count.
#pragma omp parallel for collapse(2) schedule(static) if (n * co > 1)
    for (int img = 0; img < n; ++img) {
        for (int oc = 0; oc < co; ++oc) {
            const double* ibase = in + img * in_img;
            const double* wbase = weights + oc * w_per_out;
            double* obase = out + img * out_img + static_cast<std::size_t>(oc) * oh * ow;
            for (int y = 0; y < oh; ++y) {
                double* orow = obase + static_cast<std::size_t>(y) * ow;
                const double b = bias != nullptr ? bias[oc] : 0.0;
                for (int x = 0; x < ow; ++x) {
                    orow[x] = b;
                }
                for (int ic = 0; ic < ci; ++ic) {
                    const double* iplane = ibase + static_cast<std::size_t>(ic) * h * w;
                    const double* wplane = wbase + static_cast<std::size_t>(ic) * kh * kw;
                    for (int dy = 0; dy < kh; ++dy) {
                        const double* irow = iplane + static_cast<std::size_t>(y + dy) * w;
                        const double* wrow = wplane + static_cast<std::size_t>(dy) * kw;
                        for (int dx = 0; dx < kw; ++dx) {
                            const double wv = wrow[dx];
                            for (int x = 0; x < ow; ++x) {
                                orow[x] += wv * irow[x + dx];
                            }
                        }
                    }
                }
            }
        }
    }
}

void conv2d_backward_input(const double* gout, const double* weights, double* gin,
                           int n, int ci, int h, int w, int co, int kh, int kw) {
    const int oh = h - kh + 1;
    const int ow = w - kw + 1;
    const std::size_t in_img = static_cast<std::size_t>(ci) * h * w;
    const std::size_t out_img = static_cast<std::size_t>(co) * oh * ow;
    // Gather form: every input position sums the contributions that used it,
    // so threads never write the same slot.
#pragma omp parallel for collapse(2) schedule(static) if (n * ci > 1)
    for (int img = 0; img < n; ++img) {
        for (int ic = 0; ic < ci; ++ic) {
            const double* gobase = gout + img * out_img;
            double* giplane = gin + img * in_img + static_cast<std::size_t>(ic) * h * w;
            for (int iy = 0; iy < h; ++iy) {
                const int dy0 = std::max(0, iy - oh + 1);
                const int dy1 = std::min(kh - 1, iy);
                for (int ix = 0; ix < w; ++ix) {
                    const int dx0 = std::max(0, ix - ow + 1);
                    const int dx1 = std::min(kw - 1, ix);
                    double s = 0.0;
                    for (int oc = 0; oc < co; ++oc) {
                        const double* goplane = gobase + static_cast<std::size_t>(oc) * oh * ow;
                        const double* wplane = weights +
                            (static_cast<std::size_t>(oc) * ci + ic) * kh * kw;
                        for (int dy = dy0; dy <= dy1; ++dy) {
                            const std::size_t gorow = static_cast<std::size_t>(iy - dy) * ow;
                            for (int dx = dx0; dx <= dx1; ++dx) {
                                s += goplane[gorow + (ix - dx)] *
                                     wplane[static_cast<std::size_t>(dy) * kw + dx];
                            }
                        }
                    }
                    giplane[static_cast<std::size_t>(iy) * w + ix] += s;
                }
            }
        }
    }
}

void conv2d_backward_kernels(const double* gout, const double* in, double* gweights,
                             int n, int ci, int h, int w, int co, int kh, int kw) {
    const int oh = h - kh + 1;
    const int ow = w - kw + 1;
    const std::size_t in_img = static_cast<std::size_t>(ci) * h * w;
    const std::size_t out_img = static_cast<std::size_t>(co) * oh * ow;
#pragma omp parallel for collapse(2) schedule(static) if (co * ci > 1)
    for (int oc = 0; oc < co; ++oc) {
        for (int ic = 0; ic < ci; ++ic) {
            double* wplane = gweights + (static_cast<std::size_t>(oc) * ci + ic) * kh * kw;
            for (int dy = 0; dy < kh; ++dy) {
                for (int dx = 0; dx < kw; ++dx) {
                    double s = 0.0;
                    for (int img = 0; img < n; ++img) {
                        const double* goplane =
                            gout + img * out_img + static_cast<std::size_t>(oc) * oh * ow;
                        const double* iplane =
                            in + img * in_img + static_cast<std::size_t>(ic) * h * w;
                        for (int y = 0; y < oh; ++y) {
                            const double* gorow = goplane + static_cast<std::size_t>(y) * ow;
                            const double* irow =
                                iplane + static_cast<std::size_t>(y + dy) * w + dx;
                            for (int x = 0; x < ow; ++x) {
                                s += gorow[x] * irow[x];
                            }
                        }
                    }
                    wplane[static_cast<std::size_t>(dy) * kw + dx] += s;
                }
            }
        }
    }
}

void conv2d_backward_bias(const double* gout, double* gbias, int n, int co, int oh, int ow) {
    const std::size_t out_img = static_cast<std::size_t>(co) * oh * ow;
#pragma omp parallel for schedule(static) if (co > 1)
    for (int oc = 0; oc < co; ++oc) {
        double s = 0.0;
        for (int img = 0; img < n; ++img) {
            const double* plane = gout + img * out_img + static_cast<std::size_t>(oc) * oh * ow;
            for (int i = 0; i < oh * ow; ++i) {
                s += plane[i];
            }
        }
        gbias[oc] += s;
    }
}

void maxpool2_forward(const double* in, double* out, std::int32_t* argmax,
                      int n, int c, int h, int w) {
    const int oh = h / 2;
    const int ow = w / 2;
    const std::size_t in_plane = static_cast<std::size_t>(h) * w;
    const std::size_t out_plane = static_cast<std::size_t>(oh) * ow;
#pragma omp parallel for schedule(static) if (n * c > 1)
    for (int plane = 0; plane < n * c; ++plane) {
        const double* ibase = in + plane * in_plane;
        double* obase = out + plane * out_plane;
        std::int32_t* abase = argmax + plane * out_plane;
        for (int y = 0; y < oh; ++y) {
            for (int x = 0; x < ow; ++x) {
                // Strict > keeps the first (row-major) maximum on ties.
                std::int32_t best = static_cast<std::int32_t>(2 * y * w + 2 * x);
                double bestv = ibase[best];
                const int cand1 = 2 * y * w + 2 * x + 1;
                const int cand2 = (2 * y + 1) * w + 2 * x;
                const int cand3 = (2 * y + 1) * w + 2 * x + 1;
                if (ibase[cand1] > bestv) { best = cand1; bestv = ibase[cand1]; }
                if (ibase[cand2] > bestv) { best = cand2; bestv = ibase[cand2]; }
                if (ibase[cand3] > bestv) { best = cand3; bestv = ibase[cand3]; }
                obase[static_cast<std::size_t>(y) * ow + x] = bestv;
                abase[static_cast<std::size_t>(y) * ow + x] =
                    static_cast<std::int32_t>(plane * in_plane) + best;
            }
        }
    }
}

void maxpool2_backward(const double* gout, const std::int32_t* argmax, double* gin,
                       int n, int c, int h, int w) {
    const int oh = h / 2;
    const int ow = w / 2;
    const std::size_t out_plane = static_cast<std::size_t>(oh) * ow;
    // Windows are disjoint, so the scatter writes disjoint slots per plane.
#pragma omp parallel for schedule(static) if (n * c > 1)
    for (int plane = 0; plane < n * c; ++plane) {
        const double* gbase = gout + plane * out_plane;
        const std::int32_t* abase = argmax + plane * out_plane;
        for (std::size_t i = 0; i < out_plane; ++i) {
            gin[abase[i]] += gbase[i];
        }
    }
}

namespace ref {

void matmul_nn(const double* a, const double* b, double* c, int r, int k, int n,
               bool accumulate) {
    for (int i = 0; i < r; ++i) {
        for (int j = 0; j < n; ++j) {
            double s = accumulate ? c[static_cast<std::size_t>(i) * n + j] : 0.0;
            for (int kk = 0; kk < k; ++kk) {
                s += a[static_cast<std::size_t>(i) * k + kk] *
                     b[static_cast<std::size_t>(kk) * n + j];
            }
            c[static_cast<std::size_t>(i) * n + j] = s;
        }
    }
}

void matmul_nt(const double* a, const double* b, double* c, int r, int k, int m,
               bool accumulate) {
    for (int i = 0; i < r; ++i) {
        for (int j = 0; j < m; ++j) {
            double s = accumulate ? c[static_cast<std::size_t>(i) * m + j] : 0.0;
            for (int kk = 0; kk < k; ++kk) {
                s += a[static_cast<std::size_t>(i) * k + kk] *
                     b[static_cast<std::size_t>(j) * k + kk];
            }
            c[static_cast<std::size_t>(i) * m + j] = s;
        }
    }
}

void matmul_tn(const double* a, const double* b, double* c, int r, int k, int n,
               bool accumulate) {
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < n; ++j) {
            double s = accumulate ? c[static_cast<std::size_t>(i) * n + j] : 0.0;
            for (int rr = 0; rr < r; ++rr) {
                s += a[static_cast<std::size_t>(rr) * k + i] *
                     b[static_cast<std::size_t>(rr) * n + j];
            }
            c[static_cast<std::size_t>(i) * n + j] = s;
        }
    }
}

void conv2d_forward(const double* in, const double* weights, const double* bias, double* out,
                    int n, int ci, int h, int w, int co, int kh, int kw) {
    const int oh = h - kh + 1;
    const int ow = w - kw + 1;
    for (int img = 0; img < n; ++img) {
        for (int oc = 0; oc < co; ++oc) {
            for (int y = 0; y < oh; ++y) {
                for (int x = 0; x < ow; ++x) {
                    double s = bias != nullptr ? bias[oc] : 0.0;
                    for (int ic = 0; ic < ci; ++ic) {
                        for (int dy = 0; dy < kh; ++dy) {
                            for (int dx = 0; dx < kw; ++dx) {
                                const std::size_t ii =
                                    ((static_cast<std::size_t>(img) * ci + ic) * h + y + dy) * w +
                                    x + dx;
                                const std::size_t wi =
                                    ((static_cast<std::size_t>(oc) * ci + ic) * kh + dy) * kw + dx;
                                s += in[ii] * weights[wi];
                            }
                        }
                    }
                    out[((static_cast<std::size_t>(img) * co + oc) * oh + y) * ow + x] = s;
                }
            }
        }
    }
}

void conv2d_backward_input(const double* gout, const double* weights, double* gin,
                           int n, int ci, int h, int w, int co, int kh, int kw) {
    const int oh = h - kh + 1;
    const int ow = w - kw + 1;
    // Scatter form, the textbook transposition of the forward loop.
    for (int img = 0; img < n; ++img) {
        for (int oc = 0; oc < co; ++oc) {
            for (int y = 0; y < oh; ++y) {
                for (int x = 0; x < ow; ++x) {
                    const double g =
                        gout[((static_cast<std::size_t>(img) * co + oc) * oh + y) * ow + x];
                    for (int ic = 0; ic < ci; ++ic) {
                        for (int dy = 0; dy < kh; ++dy) {
                            for (int dx = 0; dx < kw; ++dx) {
                                const std::size_t ii =
                                    ((static_cast<std::size_t>(img) * ci + ic) * h + y + dy) * w +
                                    x + dx;
                                const std::size_t wi =
                                    ((static_cast<std::size_t>(oc) * ci + ic) * kh + dy) * kw + dx;
                                gin[ii] += g * weights[wi];
                            }
                        }
                    }
                }
            }
        }
    }
}

void conv2d_backward_kernels(const double* gout, const double* in, double* gweights,
                             int n, int ci, int h, int w, int co, int kh, int kw) {
    const int oh = h - kh + 1;
    const int ow = w - kw + 1;
    for (int img = 0; img < n; ++img) {
        for (int oc = 0; oc < co; ++oc) {
            for (int y = 0; y < oh; ++y) {
                for (int x = 0; x < ow; ++x) {
                    const double g =
                        gout[((static_cast<std::size_t>(img) * co + oc) * oh + y) * ow + x];
                    for (int ic = 0; ic < ci; ++ic) {
                        for (int dy = 0; dy < kh; ++dy) {
                            for (int dx = 0; dx < kw; ++dx) {
                                const std::size_t ii =
                                    ((static_cast<std::size_t>(img) * ci + ic) * h + y + dy) * w +
                                    x + dx;
                                const std::size_t wi =
                                    ((static_cast<std::size_t>(oc) * ci + ic) * kh + dy) * kw + dx;
                                gweights[wi] += g * in[ii];
                            }
                        }
                    }
                }
            }
        }
    }
}

void maxpool2_forward(const double* in, double* out, std::int32_t* argmax,
                      int n, int c, int h, int w) {
    const int oh = h / 2;
    const int ow = w / 2;
    for (int plane = 0; plane < n * c; ++plane) {
        for (int y = 0; y < oh; ++y) {
            for (int x = 0; x < ow; ++x) {
                double bestv = -1.0;
                std::int32_t best = -1;
                bool first = true;
                for (int dy = 0; dy < 2; ++dy) {
                    for (int dx = 0; dx < 2; ++dx) {
                        const std::size_t ii =
                            (static_cast<std::size_t>(plane) * h + 2 * y + dy) * w + 2 * x + dx;
                        if (first || in[ii] > bestv) {
                            bestv = in[ii];
                            best = static_cast<std::int32_t>(ii);
                            first = false;
                        }
                    }
                }
                const std::size_t oi = (static_cast<std::size_t>(plane) * oh + y) * ow + x;
                out[oi] = bestv;
                argmax[oi] = best;
            }
        }
    }
}

}  // namespace ref

}  // namespace memaudit::kernels
