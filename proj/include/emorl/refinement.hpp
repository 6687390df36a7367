#ifndef EMORL_REFINEMENT_HPP
#define EMORL_REFINEMENT_HPP

#include <torch/torch.h>

#include <functional>
#include <vector>

#include "emorl/generative.hpp"
#include "emorl/hvae.hpp"

namespace emorl {

/// Per-slot refinement network f: LayerNorm'd [lambda, grad] (4D) -> MLP
/// 4D->128->D (ELU) -> GRUCell(D, D) -> linear heads for delta-mu and
/// softplus delta-sigma.
struct RefinementNetImpl : torch::nn::Module {
    RefinementNetImpl(int64_t latent_dim, int64_t hidden);

    /// LN of the loss gradient w.r.t. (mu, sigma), [B, K, 2D]. The gradient
    /// must arrive already detached from the graph.
    torch::Tensor grad_signal(const torch::Tensor& loss_grad);

    struct Update {
        PosteriorParams lambda;
        torch::Tensor hidden;  // [B*K, D]
        torch::Tensor delta;   // [B, K, 2D]
    };
    /// lambda' = lambda + f(lambda, signal). hidden may be undefined (zeros).
    Update refine_step(const PosteriorParams& lambda, const torch::Tensor& signal, const torch::Tensor& hidden);

    /// Makes both heads emit a zero update: delta-mu head zeroed, delta-sigma
    /// head driven deep into the softplus floor.
    void silence_output_heads();

    torch::nn::LayerNorm ln_lambda{nullptr}, ln_grad{nullptr};
    torch::nn::Sequential mlp{nullptr};
    torch::nn::GRUCell gru{nullptr};
    torch::nn::Linear head_mu{nullptr}, head_sigma{nullptr};
    int64_t latent_dim;
};
TORCH_MODULE(RefinementNet);

/// Loss terms at one refinement step, per image.
struct StepLoss {
    torch::Tensor nll;  // [B]
    torch::Tensor kl;   // [B]
    DecoderOutput output;

    [[nodiscard]] torch::Tensor total() const { return nll + kl; }
};

/// Evaluates the refinement loss for a posterior at step i (1-based).
using RefinementObjective = std::function<StepLoss(const PosteriorParams&, int)>;

struct RefinementOptions {
    /// Cut the graph between steps (evaluation: only the gradient w.r.t.
    /// lambda is needed).
    bool detach_between_steps = false;
    /// Differentiate through the gradient input. Only for tests that show
    /// the stop-gradient matters.
    bool second_order = false;
};

struct RefinementTrace {
    std::vector<PosteriorParams> lambda;   // 0..I
    std::vector<StepLoss> losses;          // 0..I
    std::vector<torch::Tensor> gradients;  // raw dL/dlambda fed at steps 1..I
    std::vector<torch::Tensor> hidden;     // 1..I
    std::vector<double> update_norms;      // ||lambda_i - lambda_{i-1}||_2, 1..I

    [[nodiscard]] int steps() const { return static_cast<int>(update_norms.size()); }
    [[nodiscard]] const PosteriorParams& final_lambda() const { return lambda.back(); }
};

/// Runs I refinement steps from lambda0, whose loss is loss0. lambda0 must
/// require grad so the loss gradient with respect to it exists.
RefinementTrace run_refinement(RefinementNet& net, const PosteriorParams& lambda0, const StepLoss& loss0, int steps,
                               const RefinementObjective& objective, RefinementOptions options = {});

}  // namespace emorl

#endif  // EMORL_REFINEMENT_HPP
