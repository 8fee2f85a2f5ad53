#ifndef DECOG_LOGMATH_HPP
#define DECOG_LOGMATH_HPP

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

namespace decog {

constexpr double kLogZero = -std::numeric_limits<double>::infinity();

// log(exp(a) + exp(b)) with the max shift; -inf is the exact-zero sentinel.
inline double log_add(double a, double b) {
    if (a == kLogZero) return b;
    if (b == kLogZero) return a;
    const double hi = a > b ? a : b;
    const double lo = a > b ? b : a;
    return hi + std::log1p(std::exp(lo - hi));
}

inline double log_sum_exp(std::span<const double> vals) {
    double hi = kLogZero;
    for (double v : vals)
        if (v > hi) hi = v;
    if (hi == kLogZero) return kLogZero;
    double sum = 0.0;
    for (double v : vals) sum += std::exp(v - hi);
    return hi + std::log(sum);
}

// Kahan compensated accumulator for convex-combination style sums in [0,1].
class KahanSum {
public:
    void add(double x) {
        const double y = x - comp_;
        const double t = sum_ + y;
        comp_ = (t - sum_) - y;
        sum_ = t;
    }
    double value() const { return sum_; }

private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

// exp-sum of a log-space vector, shifted so it never underflows to zero
// unless every entry is -inf. Returns the plain probability-space sum.
inline double exp_sum(std::span<const double> vals) {
    return std::exp(log_sum_exp(vals));
}

}  // namespace decog

#endif
