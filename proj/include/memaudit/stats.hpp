#pragma once

namespace memaudit::stats {

// log of the Beta function.
double log_beta(double a, double b);

// Regularised incomplete beta I_x(a, b), evaluated with the Lentz continued
// fraction. Accurate to ~1e-14 for the t-test arguments used here.
double regularized_incomplete_beta(double x, double a, double b);

// CDF of Student's t distribution with v degrees of freedom.
double student_t_cdf(double x, double v);

}  // namespace memaudit::stats
