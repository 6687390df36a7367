#include "emorl/objective.hpp"

#include <algorithm>

#include "emorl/errors.hpp"

namespace emorl {

torch::Tensor diag_gaussian_kl(const Gaussian& q, const Gaussian& p) {
    const auto var_q = q.sigma.square();
    const auto var_p = p.sigma.square();
    const auto per_dim =
        torch::log(p.sigma / q.sigma) + (var_q + (q.mu - p.mu).square()) / (2.0 * var_p) - 0.5;
    return per_dim.flatten(1).sum(1);
}

torch::Tensor ElboTerms::kl_total() const {
    auto total = torch::zeros_like(nll);
    for (const auto& k : kl) total = total + k;
    return total;
}

ElboTerms elbo_terms(const torch::Tensor& nll, const Trajectory& trajectory, const PriorTargets& targets) {
    if (targets.layers.size() + 1 != trajectory.lambda.size())
        throw ShapeError("prior targets do not match trajectory depth");
    ElboTerms t;
    t.nll = nll;
    for (std::size_t l = 0; l < targets.layers.size(); ++l)
        t.kl.push_back(diag_gaussian_kl(trajectory.lambda[l + 1], targets.layers[l]));
    return t;
}

std::vector<double> discount_weights(int steps) {
    std::vector<double> w;
    for (int i = 1; i <= steps; ++i) w.push_back(discount_weight(i, steps));
    return w;
}

torch::Tensor geco_apply(const torch::Tensor& kl, const torch::Tensor& nll, const GecoState& state) {
    return kl + state.multiplier() * (nll - state.nll_threshold);
}

double geco_apply(double kl, double nll, const GecoState& state) {
    return kl + state.multiplier() * (nll - state.nll_threshold);
}

GecoState geco_update(const GecoState& state, double batch_nll) {
    GecoState next = state;
    const double slack = state.nll_threshold - batch_nll;
    next.c_ema = state.ema_alpha * state.c_ema + (1.0 - state.ema_alpha) * slack;
    next.zeta = std::max(GecoState::kMinZeta, state.zeta - state.update_rate * next.c_ema);
    return next;
}

}  // namespace emorl
