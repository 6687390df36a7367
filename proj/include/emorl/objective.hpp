#ifndef EMORL_OBJECTIVE_HPP
#define EMORL_OBJECTIVE_HPP

#include <torch/torch.h>

#include <cmath>
#include <vector>

#include "emorl/generative.hpp"
#include "emorl/hvae.hpp"

namespace emorl {

/// KL(q || p) for diagonal Gaussians, summed over K and D: [B].
torch::Tensor diag_gaussian_kl(const Gaussian& q, const Gaussian& p);
inline torch::Tensor diag_gaussian_kl(const PosteriorParams& q, const Gaussian& p) {
    return diag_gaussian_kl(Gaussian{q.mu, q.sigma}, p);
}

/// Per-image terms of the single-sample negative ELBO.
struct ElboTerms {
    torch::Tensor nll;              // [B]
    std::vector<torch::Tensor> kl;  // per layer 1..L, each [B]

    [[nodiscard]] torch::Tensor kl_total() const;
    [[nodiscard]] torch::Tensor total() const { return nll + kl_total(); }
};

/// NLL of x under the decoding of the top-layer sample plus the per-layer
/// KLs against the variant's targets.
ElboTerms elbo_terms(const torch::Tensor& nll, const Trajectory& trajectory, const PriorTargets& targets);

/// Weight on the i-th refinement loss (i = 1..I): (I - (i-1)) / (I + 1).
inline double discount_weight(int i, int steps) {
    return static_cast<double>(steps - (i - 1)) / static_cast<double>(steps + 1);
}
std::vector<double> discount_weights(int steps);

/// L = L0 + sum_i w_i L_i. Works for doubles and tensors alike.
template <typename T>
T discounted_total(const T& stage1, const std::vector<T>& refinement) {
    T total = stage1;
    const int steps = static_cast<int>(refinement.size());
    for (int i = 1; i <= steps; ++i) total = total + discount_weight(i, steps) * refinement[i - 1];
    return total;
}

/// Lagrangian controller holding the reconstruction NLL near a threshold.
struct GecoState {
    static constexpr double kMinZeta = 0.55;
    double zeta = kMinZeta;
    double c_ema = 0.0;
    double ema_alpha = 0.99;
    double update_rate = 1e-6;
    /// Target per-image NLL (the negated C).
    double nll_threshold = 0.0;

    [[nodiscard]] double multiplier() const { return std::log1p(std::exp(zeta)); }
};

/// kl + softplus(zeta) * (nll - threshold).
torch::Tensor geco_apply(const torch::Tensor& kl, const torch::Tensor& nll, const GecoState& state);
double geco_apply(double kl, double nll, const GecoState& state);

/// slack = threshold - nll; c_ema <- a c_ema + (1-a) slack;
/// zeta <- max(0.55, zeta - rate * c_ema).
GecoState geco_update(const GecoState& state, double batch_nll);

/// Threshold for an image of `values` channel-values at `nats` per value.
inline double geco_threshold(double nats_per_value, int64_t values) { return nats_per_value * static_cast<double>(values); }

}  // namespace emorl

#endif  // EMORL_OBJECTIVE_HPP
