#pragma once

#include <vector>

#include "satd/rng.hpp"
#include "satd/tensor.hpp"

namespace satd::testing {

inline Tensor random_tensor(std::vector<std::size_t> dims, Rng& rng, double lo = -2.0,
                            double hi = 2.0, bool requires_grad = false) {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(dims), std::move(v), requires_grad);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

}  // namespace satd::testing
