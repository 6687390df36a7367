#include "emorl/generative.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "emorl/errors.hpp"
#include "emorl/ops.hpp"

namespace nn = torch::nn;

namespace emorl {

Gaussian standard_normal_like(const torch::Tensor& z) { return {torch::zeros_like(z), torch::ones_like(z)}; }

PriorNetImpl::PriorNetImpl(int64_t latent_dim, int64_t hidden_dim) {
    hidden = register_module("hidden", nn::Linear(latent_dim, hidden_dim));
    mu_head = register_module("mu_head", nn::Linear(hidden_dim, latent_dim));
    sigma_head = register_module("sigma_head", nn::Linear(hidden_dim, latent_dim));
}

Gaussian PriorNetImpl::forward(const torch::Tensor& z) {
    const auto h = torch::elu(hidden->forward(z));
    return {mu_head->forward(h), softplus_clamped(sigma_head->forward(h))};
}

PriorLayout prior_layout(PriorVariant variant, int layers) {
    if (layers < 1) throw ConfigError("L must be >= 1");
    PriorLayout p;
    p.layers.resize(static_cast<std::size_t>(layers));
    switch (variant) {
        case PriorVariant::BottomUp:
            if (layers < 2) throw ConfigError("bottom_up prior needs L >= 2 for its refinement target");
            for (int l = 2; l <= layers; ++l) p.layers[l - 1] = {false, l - 1};
            p.refinement = {false, layers - 1};
            break;
        case PriorVariant::Reversed:
            for (int l = 1; l < layers; ++l) p.layers[l - 1] = {false, l + 1};
            p.refinement = {true, 0};
            break;
        case PriorVariant::ReversedPlusPlus:
            if (layers < 2) throw ConfigError("reversed_pp prior needs L >= 2 for p(z1 | z2)");
            for (int l = 1; l < layers; ++l) p.layers[l - 1] = {false, l + 1};
            p.refinement = {false, 2};
            break;
    }
    return p;
}

PriorTargets prior_targets(PriorVariant variant, PriorNet& prior, const Trajectory& trajectory) {
    PriorTargets t;
    t.layout = prior_layout(variant, trajectory.layers());
    const auto& ref = trajectory.z.back().z;
    auto materialise = [&](const TargetSpec& spec) {
        if (spec.standard) return standard_normal_like(ref);
        return prior->forward(trajectory.z.at(static_cast<std::size_t>(spec.conditioned_on)).z);
    };
    for (const auto& spec : t.layout.layers) t.layers.push_back(materialise(spec));
    t.refinement = materialise(t.layout.refinement);
    return t;
}

// Decoder ----------------------------------------------------------------------

torch::Tensor DecoderOutput::reconstruction() const { return slot_sum(pi.unsqueeze(2) * y, 1); }

DecoderOutput split_decoder_maps(const torch::Tensor& maps) {
    DecoderOutput out;
    out.mask_logits = maps.select(2, 0);
    out.log_pi = slot_log_softmax(out.mask_logits, 1);
    out.pi = slot_softmax(out.mask_logits, 1);
    out.y = torch::sigmoid(maps.narrow(2, 1, 3));
    return out;
}

SpatialBroadcastDecoderImpl::SpatialBroadcastDecoderImpl(const ModelConfig& config)
    : height(config.height), width(config.width), margin(config.broadcast_margin()), latent_dim(config.latent_dim) {
    pos_proj = register_module("pos_proj", nn::Linear(4, latent_dim));
    convs = nn::Sequential();
    const int64_t ch = config.decoder_channels;
    if (config.decoder == DecoderKind::Standard) {
        int64_t in = latent_dim;
        for (int i = 0; i < 4; ++i) {
            convs->push_back(nn::Conv2d(nn::Conv2dOptions(in, ch, 3).stride(1).padding(0)));
            convs->push_back(nn::ELU());
            in = ch;
        }
        convs->push_back(nn::Conv2d(nn::Conv2dOptions(ch, 4, 3).stride(1).padding(0)));
    } else {
        convs->push_back(nn::Conv2d(nn::Conv2dOptions(latent_dim, ch, 5).stride(1).padding(1)));
        convs->push_back(nn::ELU());
        convs->push_back(nn::Conv2d(nn::Conv2dOptions(ch, ch, 5).stride(1).padding(1)));
        convs->push_back(nn::ELU());
        convs->push_back(nn::Conv2d(nn::Conv2dOptions(ch, 4, 5).stride(1).padding(1)));
    }
    register_module("convs", convs);
}

torch::Tensor SpatialBroadcastDecoderImpl::decode_maps(const torch::Tensor& z) {
    if (z.dim() != 3 || z.size(2) != latent_dim) throw ShapeError("decoder expects z of shape [B, K, D]");
    const int64_t bk = z.size(0) * z.size(1);
    const int64_t gh = height + margin;
    const int64_t gw = width + margin;
    const auto grid = pos_proj->forward(positional_grid(gh, gw, z.options())).permute({2, 0, 1});  // [D, gh, gw]
    const auto broadcast = z.reshape({bk, latent_dim, 1, 1}).expand({bk, latent_dim, gh, gw});
    auto maps = convs->forward(broadcast + grid.unsqueeze(0));
    if (maps.size(2) != height || maps.size(3) != width)
        throw ShapeError("decoder output is " + std::to_string(maps.size(2)) + "x" + std::to_string(maps.size(3)) +
                         ", expected " + std::to_string(height) + "x" + std::to_string(width));
    return maps;
}

DecoderOutput SpatialBroadcastDecoderImpl::forward(const torch::Tensor& z) {
    ++invocations;
    const auto maps = decode_maps(z);
    return split_decoder_maps(maps.view({z.size(0), z.size(1), 4, height, width}));
}

void SpatialBroadcastDecoderImpl::disconnect_latents() {
    torch::NoGradGuard guard;
    auto first = convs->ptr(0)->as<nn::Conv2d>();
    first->weight.zero_();
}

// Likelihoods -------------------------------------------------------------------

namespace {
double log_norm_const(double sigma) { return 0.5 * std::log(2.0 * std::numbers::pi * sigma * sigma); }
}  // namespace

torch::Tensor gaussian_nll(const torch::Tensor& x, const DecoderOutput& out, double sigma_lik) {
    const auto residual = x - out.reconstruction();
    const auto per_value = log_norm_const(sigma_lik) + residual.square() / (2.0 * sigma_lik * sigma_lik);
    return per_value.flatten(1).sum(1);
}

torch::Tensor mog_nll(const torch::Tensor& x, const DecoderOutput& out, double sigma_lik) {
    const auto log_pi = out.log_pi.defined() ? out.log_pi : torch::log(out.pi);
    const auto sq = (x.unsqueeze(1) - out.y).square().sum(2);  // [B, K, H, W]
    const auto log_comp = log_pi - 3.0 * log_norm_const(sigma_lik) - sq / (2.0 * sigma_lik * sigma_lik);
    return -slot_logsumexp(log_comp, 1).flatten(1).sum(1);
}

torch::Tensor image_nll(Likelihood kind, const torch::Tensor& x, const DecoderOutput& out, double sigma_lik) {
    return kind == Likelihood::Gaussian ? gaussian_nll(x, out, sigma_lik) : mog_nll(x, out, sigma_lik);
}

}  // namespace emorl
