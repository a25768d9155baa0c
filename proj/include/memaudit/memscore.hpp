#pragma once

#include <span>
#include <vector>

#include "memaudit/data.hpp"
#include "memaudit/models.hpp"

namespace memaudit {

// KL(p || q) in nats. Inputs must be equal-length probability vectors with
// positive entries summing to 1 within 1e-9.
double kl_divergence(std::span<const double> p, std::span<const double> q);

// Paired divergences d_u[i] = KL(f(clean_i) || f(unique_i)) and
// d_r[i] = KL(f(clean_i) || f(random_i)).
struct DivergenceSamples {
    std::vector<double> d_u;
    std::vector<double> d_r;
};

DivergenceSamples divergence_samples(const Model& model, const InferenceTriplet& triplet);

enum class TTest { paired, welch };

struct MemorisationReport {
    double x_u = 0.0;
    double x_r = 0.0;
    double m = 0.0;
    double t_stat = 0.0;
    double p_value = 1.0;
    bool significant = false;   // p < 0.05 one-tailed for X_u > X_r
    bool zero_variance = false; // significance undefined; M still reported
    int n_pairs = 0;
    TTest test = TTest::paired;
};

// Means, M = X_u - X_r, and the one-tailed t-test (alternative X_u > X_r).
MemorisationReport score(const DivergenceSamples& samples, TTest test = TTest::paired);

// Sample Pearson correlation; throws UsageError on constant input.
double pearson_r(std::span<const double> x, std::span<const double> y);

inline constexpr double kSignificanceLevel = 0.05;

}  // namespace memaudit
