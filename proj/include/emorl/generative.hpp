#ifndef EMORL_GENERATIVE_HPP
#define EMORL_GENERATIVE_HPP

#include <torch/torch.h>

#include <vector>

#include "emorl/hvae.hpp"
#include "emorl/model_config.hpp"

namespace emorl {

/// Diagonal Gaussian over [B, K, D].
struct Gaussian {
    torch::Tensor mu;
    torch::Tensor sigma;
};

Gaussian standard_normal_like(const torch::Tensor& z);

/// p(z^l | z^{l+-1}): Linear D->128, ELU, then a linear mean head and a
/// clamped-softplus scale head. Applied per slot; one instance serves every
/// conditional layer.
struct PriorNetImpl : torch::nn::Module {
    PriorNetImpl(int64_t latent_dim, int64_t hidden);
    Gaussian forward(const torch::Tensor& z);

    torch::nn::Linear hidden{nullptr}, mu_head{nullptr}, sigma_head{nullptr};
};
TORCH_MODULE(PriorNet);

/// Where a KL target comes from: the standard Gaussian, or the prior network
/// evaluated at the stage-1 sample of layer `conditioned_on` (1-based).
struct TargetSpec {
    bool standard = true;
    int conditioned_on = 0;
    bool operator==(const TargetSpec&) const = default;
};

struct PriorLayout {
    std::vector<TargetSpec> layers;  // targets for layers 1..L
    TargetSpec refinement;
};

/// bottom_up:   [N(0,I), p(.|z1), ..., p(.|z^{L-1})], refinement p(.|z^{L-1})
/// reversed:    [p(.|z2), ..., p(.|z^L), N(0,I)],     refinement N(0,I)
/// reversed_pp: as reversed,                          refinement p(.|z2)
/// Throws ConfigError when the variant needs a conditioning layer that L lacks.
PriorLayout prior_layout(PriorVariant variant, int layers);

struct PriorTargets {
    PriorLayout layout;
    std::vector<Gaussian> layers;
    Gaussian refinement;
};

PriorTargets prior_targets(PriorVariant variant, PriorNet& prior, const Trajectory& trajectory);

/// mask_logits/log_pi/pi: [B, K, H, W]; y: [B, K, 3, H, W].
struct DecoderOutput {
    torch::Tensor mask_logits;
    torch::Tensor log_pi;
    torch::Tensor pi;
    torch::Tensor y;

    /// sum_k pi_k * y_k, [B, 3, H, W].
    [[nodiscard]] torch::Tensor reconstruction() const;
};

/// Mask softmax over K and RGB sigmoid applied to raw 4-channel maps.
DecoderOutput split_decoder_maps(const torch::Tensor& maps);

/// Spatial broadcast decoder, weight-tied across slots.
struct SpatialBroadcastDecoderImpl : torch::nn::Module {
    explicit SpatialBroadcastDecoderImpl(const ModelConfig& config);

    /// Raw 4-channel per-slot maps, [B*K, 4, H, W].
    torch::Tensor decode_maps(const torch::Tensor& z);
    DecoderOutput forward(const torch::Tensor& z);
    /// Zeroes every weight that carries z into the convolutions.
    void disconnect_latents();

    torch::nn::Linear pos_proj{nullptr};
    torch::nn::Sequential convs{nullptr};
    int64_t height, width, margin, latent_dim;
    int64_t invocations = 0;
};
TORCH_MODULE(SpatialBroadcastDecoder);

/// Per-image NLL, [B]. x: [B, 3, H, W].
torch::Tensor gaussian_nll(const torch::Tensor& x, const DecoderOutput& out, double sigma_lik);
torch::Tensor mog_nll(const torch::Tensor& x, const DecoderOutput& out, double sigma_lik);
torch::Tensor image_nll(Likelihood kind, const torch::Tensor& x, const DecoderOutput& out, double sigma_lik);

}  // namespace emorl

#endif  // EMORL_GENERATIVE_HPP
