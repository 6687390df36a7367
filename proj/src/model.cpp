#include "emorl/model.hpp"

#include "emorl/errors.hpp"
#include "emorl/ops.hpp"

namespace emorl {

StageNoise StageNoise::permuted(const torch::Tensor& perm) const {
    StageNoise out;
    out.bottom_up = bottom_up.index_select(2, perm.to(torch::kLong));
    for (const auto& n : refinement) out.refinement.push_back(permute_slots(n, perm));
    return out;
}

StageNoise draw_noise(const ModelConfig& config, int64_t batch, int steps, torch::Generator& gen,
                      torch::TensorOptions options) {
    StageNoise n;
    n.bottom_up = torch::randn({config.layers + 1, batch, config.slots, config.latent_dim}, gen, options);
    for (int i = 0; i < steps; ++i)
        n.refinement.push_back(torch::randn({batch, config.slots, config.latent_dim}, gen, options));
    return n;
}

EfficientMorlImpl::EfficientMorlImpl(const ModelConfig& config_) : config(config_) {
    config.validate();
    encoder = register_module("encoder", ImageEncoder(config.encoder_channels));
    inference = register_module("inference", BottomUpInference(config));
    prior = register_module("prior", PriorNet(config.latent_dim, config.prior_hidden));
    decoder = register_module("decoder", SpatialBroadcastDecoder(config));
    refiner = register_module("refiner", RefinementNet(config.latent_dim, config.refine_hidden));
}

ForwardResult EfficientMorlImpl::forward(const torch::Tensor& images, const StageNoise& noise, ForwardMode mode,
                                         RefinementOptions refinement) {
    ImageEmbedding embedding;
    if (mode == ForwardMode::Eval) {
        torch::NoGradGuard no_grad;
        embedding = encoder->forward(images);
    } else {
        embedding = encoder->forward(images);
    }
    return forward_tokens(embedding, images, noise, mode, refinement);
}

ForwardResult EfficientMorlImpl::forward_tokens(const ImageEmbedding& embedding, const torch::Tensor& images,
                                                const StageNoise& noise, ForwardMode mode,
                                                RefinementOptions refinement) {
    if (images.size(2) != config.height || images.size(3) != config.width)
        throw ShapeError("image size does not match model configuration");
    ForwardResult r;
    r.embedding = embedding;
    const int layers = static_cast<int>(config.layers);

    if (mode == ForwardMode::Eval) {
        {
            torch::NoGradGuard no_grad;
            r.trajectory = inference->forward(embedding.tokens, noise.bottom_up);
        }
        // Only the gradient w.r.t. the top posterior is needed from here on.
        auto& top = r.trajectory.lambda.back();
        top.mu = top.mu.detach().requires_grad_(true);
        top.sigma = top.sigma.detach().requires_grad_(true);
        r.trajectory.z.back() = reparameterized_sample(top, noise.bottom_up[layers]);
        refinement.detach_between_steps = true;
    } else {
        r.trajectory = inference->forward(embedding.tokens, noise.bottom_up);
    }

    torch::AutoGradMode enable(true);
    r.targets = prior_targets(config.prior, prior, r.trajectory);
    auto output = decoder->forward(r.trajectory.z.back().z);
    const auto nll = image_nll(config.likelihood, images, output, config.sigma_lik);
    r.stage1 = elbo_terms(nll, r.trajectory, r.targets);

    StepLoss loss0{r.stage1.nll, r.stage1.kl_total(), output};
    const auto& refinement_target = r.targets.refinement;
    RefinementObjective objective = [&](const PosteriorParams& lambda, int step) {
        const auto sample = reparameterized_sample(lambda, noise.refinement.at(static_cast<std::size_t>(step - 1)));
        StepLoss s;
        s.output = decoder->forward(sample.z);
        s.nll = image_nll(config.likelihood, images, s.output, config.sigma_lik);
        s.kl = diag_gaussian_kl(lambda, refinement_target);
        return s;
    };
    r.trace = run_refinement(refiner, r.trajectory.lambda.back(), loss0, static_cast<int>(noise.refinement.size()),
                             objective, refinement);
    return r;
}

int64_t count_parameters(const torch::nn::Module& module) {
    int64_t n = 0;
    for (const auto& p : module.parameters()) n += p.numel();
    return n;
}

int64_t EfficientMorlImpl::parameter_count() const { return count_parameters(*this); }

}  // namespace emorl
