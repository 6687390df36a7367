#include "emorl/refinement.hpp"

#include "emorl/errors.hpp"
#include "emorl/ops.hpp"

namespace nn = torch::nn;

namespace emorl {

RefinementNetImpl::RefinementNetImpl(int64_t latent_dim_, int64_t hidden) : latent_dim(latent_dim_) {
    const int64_t d = latent_dim;
    ln_lambda = register_module("ln_lambda", nn::LayerNorm(nn::LayerNormOptions({2 * d})));
    ln_grad = register_module("ln_grad", nn::LayerNorm(nn::LayerNormOptions({2 * d})));
    mlp = register_module("mlp", nn::Sequential(nn::Linear(4 * d, hidden), nn::ELU(), nn::Linear(hidden, d), nn::ELU()));
    gru = register_module("gru", nn::GRUCell(d, d));
    head_mu = register_module("head_mu", nn::Linear(d, d));
    head_sigma = register_module("head_sigma", nn::Linear(d, d));
    // Start with small sigma increments; softplus(0) would add log 2 per step.
    torch::NoGradGuard guard;
    head_sigma->bias.fill_(-4.0);
}

torch::Tensor RefinementNetImpl::grad_signal(const torch::Tensor& loss_grad) {
    check_finite(loss_grad, "refinement loss gradient");
    return ln_grad->forward(loss_grad);
}

RefinementNetImpl::Update RefinementNetImpl::refine_step(const PosteriorParams& lambda, const torch::Tensor& signal,
                                                         const torch::Tensor& hidden) {
    const int64_t b = lambda.mu.size(0);
    const int64_t k = lambda.mu.size(1);
    const auto input = torch::cat({ln_lambda->forward(lambda.joined()), signal}, -1);
    const auto features = mlp->forward(input).reshape({b * k, latent_dim});
    const auto h = hidden.defined() ? gru->forward(features, hidden) : gru->forward(features);
    const auto delta_mu = head_mu->forward(h).view({b, k, latent_dim});
    const auto delta_sigma = torch::softplus(head_sigma->forward(h)).view({b, k, latent_dim});

    Update u;
    u.lambda = {lambda.mu + delta_mu, lambda.sigma + delta_sigma, lambda.layer, lambda.refinement + 1};
    u.hidden = h;
    u.delta = torch::cat({delta_mu, delta_sigma}, -1);
    return u;
}

void RefinementNetImpl::silence_output_heads() {
    torch::NoGradGuard guard;
    head_mu->weight.zero_();
    head_mu->bias.zero_();
    head_sigma->weight.zero_();
    // softplus(-1e4) underflows to exactly 0 in both float32 and float64.
    head_sigma->bias.fill_(-1e4);
}

RefinementTrace run_refinement(RefinementNet& net, const PosteriorParams& lambda0, const StepLoss& loss0, int steps,
                               const RefinementObjective& objective, RefinementOptions options) {
    if (steps < 0) throw ConfigError("refinement steps must be >= 0");
    RefinementTrace trace;
    trace.lambda.push_back(lambda0);
    trace.losses.push_back(loss0);

    torch::AutoGradMode enable(true);
    torch::Tensor hidden;
    for (int i = 1; i <= steps; ++i) {
        const auto& lambda = trace.lambda.back();
        if (!lambda.mu.requires_grad() || !lambda.sigma.requires_grad())
            throw ConfigError("refinement needs a posterior that requires grad");
        const auto grads = torch::autograd::grad({trace.losses.back().total().sum()}, {lambda.mu, lambda.sigma},
                                                 /*grad_outputs=*/{}, /*retain_graph=*/true,
                                                 /*create_graph=*/options.second_order);
        auto raw = torch::cat({grads[0], grads[1]}, -1);
        if (!options.second_order) raw = raw.detach();
        trace.gradients.push_back(raw);

        auto update = net->refine_step(lambda, net->grad_signal(raw), hidden);
        hidden = update.hidden;
        auto next = update.lambda;
        if (options.detach_between_steps) {
            next.mu = next.mu.detach().requires_grad_(true);
            next.sigma = next.sigma.detach().requires_grad_(true);
            hidden = hidden.detach();
        }
        {
            torch::NoGradGuard no_grad;
            trace.update_norms.push_back(update.delta.norm().item<double>());
        }
        trace.hidden.push_back(hidden);
        trace.losses.push_back(objective(next, i));
        trace.lambda.push_back(next);
    }
    return trace;
}

}  // namespace emorl
