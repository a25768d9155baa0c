#include <chrono>
#include <cstdio>
#include <functional>
#include <vector>

#include <omp.h>

#include "memaudit/kernels.hpp"
#include "memaudit/rng.hpp"

// Times the OpenMP kernels against the serial references on the shapes the
// MLP/CNN training loops actually hit.

using namespace memaudit;

namespace {

using Clock = std::chrono::steady_clock;

double time_ms(int reps, const std::function<void()>& fn) {
    fn();  // warm-up
    const auto t0 = Clock::now();
    for (int i = 0; i < reps; ++i) {
        fn();
    }
    const auto t1 = Clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

std::vector<double> random_vec(std::size_t n, Rng& rng) {
    std::vector<double> v(n);
    for (double& x : v) {
        x = rng.uniform(-1.0, 1.0);
    }
    return v;
}

void bench_matmul(int r, int k, int n, int reps) {
    Rng rng(42);
    const auto a = random_vec(static_cast<std::size_t>(r) * k, rng);
    const auto b = random_vec(static_cast<std::size_t>(k) * n, rng);
    std::vector<double> c(static_cast<std::size_t>(r) * n);

    const double serial_ms =
        time_ms(reps, [&] { kernels::ref::matmul_nn(a.data(), b.data(), c.data(), r, k, n); });
    const double omp_ms =
        time_ms(reps, [&] { kernels::matmul_nn(a.data(), b.data(), c.data(), r, k, n); });
    const double gflop = 2.0 * r * k * n / 1e9;
    std::printf("matmul %4dx%4dx%4d  serial %8.2f ms (%5.2f GF/s)  omp %8.2f ms (%5.2f GF/s)  "
                "speedup %.2fx\n",
                r, k, n, serial_ms, gflop / serial_ms * 1e3, omp_ms, gflop / omp_ms * 1e3,
                serial_ms / omp_ms);
}

void bench_conv(int n, int ci, int h, int w, int co, int reps) {
    Rng rng(42);
    const auto in = random_vec(static_cast<std::size_t>(n) * ci * h * w, rng);
    const auto weights = random_vec(static_cast<std::size_t>(co) * ci * 9, rng);
    const auto bias = random_vec(static_cast<std::size_t>(co), rng);
    const int oh = h - 2;
    const int ow = w - 2;
    std::vector<double> out(static_cast<std::size_t>(n) * co * oh * ow);

    const double serial_ms = time_ms(reps, [&] {
        kernels::ref::conv2d_forward(in.data(), weights.data(), bias.data(), out.data(), n, ci, h,
                                     w, co, 3, 3);
    });
    const double omp_ms = time_ms(reps, [&] {
        kernels::conv2d_forward(in.data(), weights.data(), bias.data(), out.data(), n, ci, h, w,
                                co, 3, 3);
    });
    const double gflop = 2.0 * n * co * oh * ow * ci * 9 / 1e9;
    std::printf("conv   %3dx%2dx%2dx%2d->%2d serial %8.2f ms (%5.2f GF/s)  omp %8.2f ms "
                "(%5.2f GF/s)  speedup %.2fx\n",
                n, ci, h, w, co, serial_ms, gflop / serial_ms * 1e3, omp_ms,
                gflop / omp_ms * 1e3, serial_ms / omp_ms);
}

}  // namespace

int main() {
    std::printf("threads: %d\n", omp_get_max_threads());
    // MLP training shapes (batch 128).
    bench_matmul(128, 784, 512, 20);
    bench_matmul(128, 512, 256, 40);
    bench_matmul(784, 128, 512, 20);  // weight-gradient shape
    // CNN-1 shapes (batch 32).
    bench_conv(32, 1, 28, 28, 32, 10);
    bench_conv(32, 32, 26, 26, 64, 3);
    return 0;
}
