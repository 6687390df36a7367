#ifndef EMORL_ENCODER_HPP
#define EMORL_ENCODER_HPP

#include <torch/torch.h>

namespace emorl {

/// N = H*W position-aware tokens, flattened row-major over (H, W).
struct ImageEmbedding {
    torch::Tensor tokens;  // [B, N, C]
    int64_t height = 0;
    int64_t width = 0;
};

/// Four 5x5 stride-1 pad-2 ReLU convolutions, an added projection of the
/// positional grid, then LayerNorm -> Linear -> ReLU -> Linear per token.
struct ImageEncoderImpl : torch::nn::Module {
    explicit ImageEncoderImpl(int64_t channels = 64);

    /// Conv features plus projected grid, before the LayerNorm. [B, H, W, C]
    torch::Tensor pre_norm_features(const torch::Tensor& images);
    /// images: [B, 3, H, W] in [0, 1].
    ImageEmbedding forward(const torch::Tensor& images);

    torch::nn::Sequential convs{nullptr};
    torch::nn::Linear pos_proj{nullptr};
    torch::nn::LayerNorm norm{nullptr};
    torch::nn::Linear mlp_in{nullptr};
    torch::nn::Linear mlp_out{nullptr};
    int64_t channels;
};
TORCH_MODULE(ImageEncoder);

}  // namespace emorl

#endif  // EMORL_ENCODER_HPP
