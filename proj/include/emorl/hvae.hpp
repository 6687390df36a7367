#ifndef EMORL_HVAE_HPP
#define EMORL_HVAE_HPP

#include <torch/torch.h>

#include <utility>
#include <vector>

#include "emorl/encoder.hpp"
#include "emorl/model_config.hpp"

namespace emorl {

/// K diagonal Gaussians. mu, sigma: [B, K, D], sigma > 0.
struct PosteriorParams {
    torch::Tensor mu;
    torch::Tensor sigma;
    int layer = 0;
    int refinement = 0;

    /// [B, K, 2D] concatenation (mu, sigma).
    [[nodiscard]] torch::Tensor joined() const { return torch::cat({mu, sigma}, -1); }
};

struct SlotSample {
    torch::Tensor z;  // [B, K, D]
    int layer = 0;
    int refinement = 0;
};

struct AttentionState {
    torch::Tensor assignment;  // softmax over K, [B, K, N]; columns sum to 1
    torch::Tensor alpha;       // eps-renormalised over N; rows sum to 1
    torch::Tensor theta;       // [B, K, D]
};

/// z = mu + sigma * noise.
SlotSample reparameterized_sample(const PosteriorParams& lambda, const torch::Tensor& noise);

/// Two D-dimensional GRUs (one advancing mu, one advancing sigma, both fed
/// Theta) fused into one 2D-dimensional GRU with block-diagonal weights.
/// Parameters are stored per block in GRUCell layout (rows r, z, n).
struct DualGRUImpl : torch::nn::Module {
    explicit DualGRUImpl(int64_t dim);

    struct BlockWeights {
        torch::Tensor w_ih;  // [4D, 2D] reset/update gates, input side
        torch::Tensor w_hh;  // [4D, 2D] reset/update gates, hidden side
        torch::Tensor w_in;  // [2D, 2D] candidate, input side
        torch::Tensor w_hn;  // [2D, 2D] candidate, hidden side
        torch::Tensor b_ih, b_hh, b_in, b_hn;
    };
    [[nodiscard]] BlockWeights block_weights() const;

    /// theta: [B, K, D]; returns the raw (mu, sigma) pair.
    std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& theta, const torch::Tensor& mu_prev,
                                                    const torch::Tensor& sigma_prev);

    int64_t dim;
    torch::Tensor w_ih_mu, w_hh_mu, b_ih_mu, b_hh_mu;
    torch::Tensor w_ih_sigma, w_hh_sigma, b_ih_sigma, b_hh_sigma;
};
TORCH_MODULE(DualGRU);

/// Residual Gaussian-parameter heads:
///   mu    = mu_raw + MLP(LN(mu_raw))
///   sigma = max(sigma_raw, 0) + softplus_clamped(MLP(LN(sigma_raw)))
struct PosteriorHeadsImpl : torch::nn::Module {
    explicit PosteriorHeadsImpl(int64_t dim);
    std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& mu_raw, const torch::Tensor& sigma_raw);
    /// Zeroes the last linear map of both MLPs.
    void zero_output_layers();

    torch::nn::LayerNorm ln_mu{nullptr}, ln_sigma{nullptr};
    torch::nn::Sequential mlp_mu{nullptr}, mlp_sigma{nullptr};
};
TORCH_MODULE(PosteriorHeads);

/// One bottom-up stochastic layer. The same instance is applied at every l.
struct InferenceLayerImpl : torch::nn::Module {
    InferenceLayerImpl(int64_t token_dim, int64_t latent_dim, double eps);

    AttentionState attend(const torch::Tensor& tokens, const torch::Tensor& z);
    std::pair<PosteriorParams, AttentionState> forward(const torch::Tensor& tokens, const torch::Tensor& z_prev,
                                                       const PosteriorParams& lambda_prev);

    /// Adds a distinct offset to each slot's query. Breaks weight tying; only
    /// used as a negative control for the equivariance checks.
    void untie_slot_queries(const torch::Tensor& offsets);

    torch::nn::LayerNorm ln_z{nullptr};
    torch::nn::Linear key{nullptr}, value{nullptr}, query{nullptr};
    DualGRU gru{nullptr};
    PosteriorHeads heads{nullptr};
    double eps;
    int64_t latent_dim;
    torch::Tensor slot_offsets;
};
TORCH_MODULE(InferenceLayer);

/// Per-layer record of a bottom-up pass. Index 0 holds the shared
/// (mu0, sigma0) broadcast over K and the sample z0.
struct Trajectory {
    std::vector<PosteriorParams> lambda;  // 0..L
    std::vector<SlotSample> z;            // 0..L
    std::vector<AttentionState> attention;  // 1..L stored at 0..L-1

    [[nodiscard]] int layers() const { return static_cast<int>(lambda.size()) - 1; }
    [[nodiscard]] const PosteriorParams& top() const { return lambda.back(); }
};

struct BottomUpInferenceImpl : torch::nn::Module {
    explicit BottomUpInferenceImpl(const ModelConfig& config);

    /// noise: [L+1, B, K, D] standard-normal draws (row 0 feeds z0).
    Trajectory forward(const torch::Tensor& tokens, const torch::Tensor& noise);

    InferenceLayer layer{nullptr};
    torch::Tensor mu0, sigma0;  // [D]
    int64_t num_layers;
};
TORCH_MODULE(BottomUpInference);

}  // namespace emorl

#endif  // EMORL_HVAE_HPP
