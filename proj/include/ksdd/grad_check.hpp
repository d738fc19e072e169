#ifndef KSDD_GRAD_CHECK_HPP
#define KSDD_GRAD_CHECK_HPP

#include <cmath>
#include <functional>
#include <vector>

namespace ksdd {

// Central finite-difference check of an analytic gradient. `f` maps the
// flat variable vector to a scalar; `analytic` is d f / d x at `x`.
// Returns the maximum relative error max |fd - an| / max(|fd|, |an|, floor).
inline double grad_check(const std::function<double(const std::vector<double>&)>& f,
                         std::vector<double> x, const std::vector<double>& analytic,
                         double eps = 1e-5, double floor = 1e-8) {
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + eps;
        const double fp = f(x);
        x[i] = orig - eps;
        const double fm = f(x);
        x[i] = orig;
        const double fd = (fp - fm) / (2.0 * eps);
        const double an = analytic[i];
        const double denom = std::max({std::fabs(fd), std::fabs(an), floor});
        worst = std::max(worst, std::fabs(fd - an) / denom);
    }
    return worst;
}

}  // namespace ksdd

#endif
