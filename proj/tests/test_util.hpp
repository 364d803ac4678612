#pragma once

#include <stiv/tensor.hpp>

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

namespace stiv_test {

// Central finite differences against the analytic gradient, on a bounded
// random subset of coordinates per parameter. make_loss must re-run the whole
// forward pass from the params' current data.
template <class S>
double gradcheck_max_rel_err(const std::function<stiv::TensorBase<S>()>& make_loss,
                             std::vector<stiv::TensorBase<S>> params, stiv::RngState& rng,
                             int coords_per_param = 12) {
    for (auto& p : params) p.set_requires_grad(true);
    auto loss = make_loss();
    auto analytic = stiv::grad(loss, params);

    double worst = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        int64_t count = p.numel();
        int checks = static_cast<int>(std::min<int64_t>(coords_per_param, count));
        for (int c = 0; c < checks; ++c) {
            int64_t i = static_cast<int64_t>(stiv::rng_below(rng, static_cast<uint64_t>(count)));
            S orig = p.data()[static_cast<size_t>(i)];
            double hbase = sizeof(S) == 4 ? 1e-3 : 1e-5;
            S h = static_cast<S>(hbase * (1.0 + std::abs(static_cast<double>(orig))));
            p.data()[static_cast<size_t>(i)] = orig + h;
            double lp = static_cast<double>(make_loss().item());
            p.data()[static_cast<size_t>(i)] = orig - h;
            double lm = static_cast<double>(make_loss().item());
            p.data()[static_cast<size_t>(i)] = orig;
            double fd = (lp - lm) / (2.0 * static_cast<double>(h));
            double an = static_cast<double>(analytic[pi].data()[static_cast<size_t>(i)]);
            double denom = std::max(std::abs(fd), std::abs(an));
            // below the FD noise floor of the working precision both estimates
            // are indistinguishable from zero
            double floor = sizeof(S) == 4 ? 3e-3 : 1e-6;
            if (denom < floor) continue;
            worst = std::max(worst, std::abs(fd - an) / denom);
        }
    }
    return worst;
}

}  // namespace stiv_test
