#include "emorl/encoder.hpp"

#include "emorl/errors.hpp"
#include "emorl/ops.hpp"

namespace nn = torch::nn;

namespace emorl {

ImageEncoderImpl::ImageEncoderImpl(int64_t channels_) : channels(channels_) {
    convs = nn::Sequential();
    int64_t in = 3;
    for (int i = 0; i < 4; ++i) {
        convs->push_back(nn::Conv2d(nn::Conv2dOptions(in, channels, 5).stride(1).padding(2)));
        convs->push_back(nn::ReLU());
        in = channels;
    }
    register_module("convs", convs);
    pos_proj = register_module("pos_proj", nn::Linear(4, channels));
    norm = register_module("norm", nn::LayerNorm(nn::LayerNormOptions({channels})));
    mlp_in = register_module("mlp_in", nn::Linear(channels, channels));
    mlp_out = register_module("mlp_out", nn::Linear(channels, channels));
}

torch::Tensor ImageEncoderImpl::pre_norm_features(const torch::Tensor& images) {
    if (images.dim() != 4 || images.size(1) != 3) throw ShapeError("encoder expects [B, 3, H, W] images");
    check_finite(images, "encoder input");
    const int64_t h = images.size(2);
    const int64_t w = images.size(3);
    auto features = convs->forward(images).permute({0, 2, 3, 1});
    auto grid = positional_grid(h, w, images.options());
    return features + pos_proj->forward(grid).unsqueeze(0);
}

ImageEmbedding ImageEncoderImpl::forward(const torch::Tensor& images) {
    const int64_t b = images.size(0);
    const int64_t h = images.size(2);
    const int64_t w = images.size(3);
    auto x = pre_norm_features(images).reshape({b, h * w, channels});
    x = mlp_out->forward(torch::relu(mlp_in->forward(norm->forward(x))));
    return {x, h, w};
}

}  // namespace emorl
