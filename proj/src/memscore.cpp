#include "memaudit/memscore.hpp"

#include <cmath>
#include <limits>

#include "memaudit/errors.hpp"
#include "memaudit/stats.hpp"

namespace memaudit {

double kl_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) {
        throw UsageError("kl_divergence length mismatch: " + std::to_string(p.size()) + " vs " +
                         std::to_string(q.size()));
    }
    if (p.empty()) {
        throw UsageError("kl_divergence on empty vectors");
    }
    double sp = 0.0;
    double sq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (!(p[i] > 0.0) || !(q[i] > 0.0)) {
            throw UsageError("kl_divergence requires strictly positive entries");
        }
        sp += p[i];
        sq += q[i];
    }
    if (std::fabs(sp - 1.0) > 1e-9 || std::fabs(sq - 1.0) > 1e-9) {
        throw UsageError("kl_divergence inputs must sum to 1 within 1e-9");
    }
    double d = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        d += p[i] * std::log(p[i] / q[i]);
    }
    return d;
}

DivergenceSamples divergence_samples(const Model& model, const InferenceTriplet& triplet) {
    if (triplet.unique.size() != triplet.size() || triplet.random.size() != triplet.size()) {
        throw DimensionError("triplet set lengths differ");
    }
    const auto pc = model.predict_batch(triplet.clean);
    const auto pu = model.predict_batch(triplet.unique);
    const auto pr = model.predict_batch(triplet.random);

    DivergenceSamples s;
    s.d_u.resize(triplet.size());
    s.d_r.resize(triplet.size());
    const std::int64_t n = static_cast<std::int64_t>(triplet.size());
#pragma omp parallel for schedule(static) if (n > 64)
    for (std::int64_t i = 0; i < n; ++i) {
        s.d_u[static_cast<std::size_t>(i)] = kl_divergence(pc[static_cast<std::size_t>(i)],
                                                           pu[static_cast<std::size_t>(i)]);
        s.d_r[static_cast<std::size_t>(i)] = kl_divergence(pc[static_cast<std::size_t>(i)],
                                                           pr[static_cast<std::size_t>(i)]);
    }
    return s;
}

MemorisationReport score(const DivergenceSamples& samples, TTest test) {
    const std::size_t n = samples.d_u.size();
    if (samples.d_r.size() != n) {
        throw UsageError("score: d_u and d_r lengths differ");
    }
    if (n < 2) {
        throw UsageError("score needs at least 2 paired samples, got " + std::to_string(n));
    }
    MemorisationReport rep;
    rep.n_pairs = static_cast<int>(n);
    rep.test = test;

    const double dn = static_cast<double>(n);
    double mu = 0.0;
    double mr = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mu += samples.d_u[i];
        mr += samples.d_r[i];
    }
    mu /= dn;
    mr /= dn;
    rep.x_u = mu;
    rep.x_r = mr;
    rep.m = mu - mr;

    if (test == TTest::paired) {
        // t on the paired differences; d_u[i] and d_r[i] share the same
        // clean image, so pairing removes the per-image variation.
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = samples.d_u[i] - samples.d_r[i] - rep.m;
            var += d * d;
        }
        var /= dn - 1.0;
        if (var <= 0.0) {
            rep.zero_variance = true;
            rep.t_stat = std::numeric_limits<double>::quiet_NaN();
            rep.p_value = std::numeric_limits<double>::quiet_NaN();
            return rep;
        }
        rep.t_stat = rep.m / std::sqrt(var / dn);
        rep.p_value = stats::student_t_cdf(-rep.t_stat, dn - 1.0);
    } else {
        double vu = 0.0;
        double vr = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            vu += (samples.d_u[i] - mu) * (samples.d_u[i] - mu);
            vr += (samples.d_r[i] - mr) * (samples.d_r[i] - mr);
        }
        vu /= dn - 1.0;
        vr /= dn - 1.0;
        const double se2 = vu / dn + vr / dn;
        if (se2 <= 0.0) {
            rep.zero_variance = true;
            rep.t_stat = std::numeric_limits<double>::quiet_NaN();
            rep.p_value = std::numeric_limits<double>::quiet_NaN();
            return rep;
        }
        rep.t_stat = rep.m / std::sqrt(se2);
        // Welch-Satterthwaite degrees of freedom.
        const double df = se2 * se2 /
                          ((vu / dn) * (vu / dn) / (dn - 1.0) + (vr / dn) * (vr / dn) / (dn - 1.0));
        rep.p_value = stats::student_t_cdf(-rep.t_stat, df);
    }
    rep.significant = rep.p_value < kSignificanceLevel && rep.m > 0.0;
    return rep;
}

double pearson_r(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) {
        throw UsageError("pearson_r length mismatch");
    }
    if (x.size() < 3) {
        throw UsageError("pearson_r needs at least 3 points, got " + std::to_string(x.size()));
    }
    const double n = static_cast<double>(x.size());
    double mx = 0.0;
    double my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0;
    double sxx = 0.0;
    double syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) {
        throw UsageError("pearson_r undefined for constant input");
    }
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace memaudit
