#ifndef EMORL_MODEL_HPP
#define EMORL_MODEL_HPP

#include <torch/torch.h>

#include <vector>

#include "emorl/encoder.hpp"
#include "emorl/generative.hpp"
#include "emorl/hvae.hpp"
#include "emorl/model_config.hpp"
#include "emorl/objective.hpp"
#include "emorl/refinement.hpp"

namespace emorl {

/// All reparameterisation noise for one forward pass.
struct StageNoise {
    torch::Tensor bottom_up;                 // [L+1, B, K, D]
    std::vector<torch::Tensor> refinement;   // I x [B, K, D]

    /// Applies a slot permutation to every draw.
    [[nodiscard]] StageNoise permuted(const torch::Tensor& perm) const;
};

StageNoise draw_noise(const ModelConfig& config, int64_t batch, int steps, torch::Generator& gen,
                      torch::TensorOptions options = torch::TensorOptions().dtype(torch::kFloat32));

struct ForwardResult {
    ImageEmbedding embedding;
    Trajectory trajectory;
    PriorTargets targets;
    ElboTerms stage1;
    RefinementTrace trace;

    /// lambda^(L,I): the image representation.
    [[nodiscard]] const PosteriorParams& representation() const { return trace.final_lambda(); }
    /// Decoding of the last sample (stage 1 when I = 0).
    [[nodiscard]] const DecoderOutput& final_output() const { return trace.losses.back().output; }
    [[nodiscard]] int refinement_steps() const { return trace.steps(); }
};

enum class ForwardMode {
    Train,  // one graph from parameters through every refinement step
    Eval,   // stage 1 without parameter graph; refinement cut between steps
};

struct EfficientMorlImpl : torch::nn::Module {
    explicit EfficientMorlImpl(const ModelConfig& config);

    /// images: [B, 3, H, W] in [0, 1]. noise.refinement.size() sets I.
    ForwardResult forward(const torch::Tensor& images, const StageNoise& noise, ForwardMode mode = ForwardMode::Train,
                          RefinementOptions refinement = {});

    /// Same as forward but starting from precomputed tokens.
    ForwardResult forward_tokens(const ImageEmbedding& embedding, const torch::Tensor& images, const StageNoise& noise,
                                 ForwardMode mode = ForwardMode::Train, RefinementOptions refinement = {});

    /// Decodes a [B, K, D] latent.
    DecoderOutput decode(const torch::Tensor& z) { return decoder->forward(z); }

    [[nodiscard]] int64_t parameter_count() const;

    ModelConfig config;
    ImageEncoder encoder{nullptr};
    BottomUpInference inference{nullptr};
    PriorNet prior{nullptr};
    SpatialBroadcastDecoder decoder{nullptr};
    RefinementNet refiner{nullptr};
};
TORCH_MODULE(EfficientMorl);

/// Trainable parameter count of a module tree.
int64_t count_parameters(const torch::nn::Module& module);

}  // namespace emorl

#endif  // EMORL_MODEL_HPP
