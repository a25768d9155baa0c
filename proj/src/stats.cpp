#include "memaudit/stats.hpp"

#include <cmath>
#include <limits>

namespace memaudit::stats {

double log_beta(double a, double b) {
    return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
}

namespace {

// Modified Lentz evaluation of the textbook continued fraction for the
// incomplete beta function.
double incbeta_cf(double x, double a, double b) {
    constexpr double kTiny = 1e-300;
    constexpr double kEps = 1e-15;
    constexpr int kMaxTerms = 300;

    double c = 1.0;
    double d = 1.0 - (a + b) * x / (a + 1.0);
    if (std::fabs(d) < kTiny) {
        d = kTiny;
    }
    d = 1.0 / d;
    double f = d;

    for (int m = 1; m <= kMaxTerms; ++m) {
        const double dm = static_cast<double>(m);
        // even term
        double num = dm * (b - dm) * x / ((a + 2.0 * dm - 1.0) * (a + 2.0 * dm));
        d = 1.0 + num * d;
        if (std::fabs(d) < kTiny) {
            d = kTiny;
        }
        c = 1.0 + num / c;
        if (std::fabs(c) < kTiny) {
            c = kTiny;
        }
        d = 1.0 / d;
        f *= c * d;
        // odd term
        num = -(a + dm) * (a + b + dm) * x / ((a + 2.0 * dm) * (a + 2.0 * dm + 1.0));
        d = 1.0 + num * d;
        if (std::fabs(d) < kTiny) {
            d = kTiny;
        }
        c = 1.0 + num / c;
        if (std::fabs(c) < kTiny) {
            c = kTiny;
        }
        d = 1.0 / d;
        const double mult = c * d;
        f *= mult;
        if (std::fabs(mult - 1.0) < kEps) {
            break;
        }
    }
    return f;
}

}  // namespace

double regularized_incomplete_beta(double x, double a, double b) {
    if (!(x >= 0.0 && x <= 1.0) || !(a > 0.0) || !(b > 0.0)) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    if (x <= 0.0) {
        return 0.0;
    }
    if (x >= 1.0) {
        return 1.0;
    }
    const double front = std::exp(a * std::log(x) + b * std::log1p(-x) - log_beta(a, b));
    // Use the symmetry relation where the continued fraction converges fast.
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return front * incbeta_cf(x, a, b) / a;
    }
    return 1.0 - std::exp(b * std::log1p(-x) + a * std::log(x) - log_beta(b, a)) *
                     incbeta_cf(1.0 - x, b, a) / b;
}

double student_t_cdf(double x, double v) {
    if (!(v > 0.0)) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    const double ib = regularized_incomplete_beta(v / (x * x + v), v / 2.0, 0.5);
    return x >= 0.0 ? 1.0 - ib / 2.0 : ib / 2.0;
}

}  // namespace memaudit::stats
