#include "emorl/hvae.hpp"

#include <cmath>

#include "emorl/errors.hpp"
#include "emorl/ops.hpp"

namespace nn = torch::nn;

namespace emorl {

SlotSample reparameterized_sample(const PosteriorParams& lambda, const torch::Tensor& noise) {
    return {lambda.mu + lambda.sigma * noise, lambda.layer, lambda.refinement};
}

// DualGRU ----------------------------------------------------------------------

DualGRUImpl::DualGRUImpl(int64_t dim_) : dim(dim_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
    auto init = [&](const char* name, std::vector<int64_t> shape) {
        return register_parameter(name, torch::empty(shape).uniform_(-bound, bound));
    };
    w_ih_mu = init("w_ih_mu", {3 * dim, dim});
    w_hh_mu = init("w_hh_mu", {3 * dim, dim});
    b_ih_mu = init("b_ih_mu", {3 * dim});
    b_hh_mu = init("b_hh_mu", {3 * dim});
    w_ih_sigma = init("w_ih_sigma", {3 * dim, dim});
    w_hh_sigma = init("w_hh_sigma", {3 * dim, dim});
    b_ih_sigma = init("b_ih_sigma", {3 * dim});
    b_hh_sigma = init("b_hh_sigma", {3 * dim});
}

DualGRUImpl::BlockWeights DualGRUImpl::block_weights() const {
    const int64_t d = dim;
    auto gates = [d](const torch::Tensor& t) { return t.narrow(0, 0, 2 * d); };
    auto cand = [d](const torch::Tensor& t) { return t.narrow(0, 2 * d, d); };
    BlockWeights w;
    w.w_ih = torch::block_diag({gates(w_ih_mu), gates(w_ih_sigma)});
    w.w_hh = torch::block_diag({gates(w_hh_mu), gates(w_hh_sigma)});
    w.w_in = torch::block_diag({cand(w_ih_mu), cand(w_ih_sigma)});
    w.w_hn = torch::block_diag({cand(w_hh_mu), cand(w_hh_sigma)});
    w.b_ih = torch::cat({gates(b_ih_mu), gates(b_ih_sigma)});
    w.b_hh = torch::cat({gates(b_hh_mu), gates(b_hh_sigma)});
    w.b_in = torch::cat({cand(b_ih_mu), cand(b_ih_sigma)});
    w.b_hn = torch::cat({cand(b_hh_mu), cand(b_hh_sigma)});
    return w;
}

std::pair<torch::Tensor, torch::Tensor> DualGRUImpl::forward(const torch::Tensor& theta, const torch::Tensor& mu_prev,
                                                             const torch::Tensor& sigma_prev) {
    if (theta.size(-1) != dim || mu_prev.size(-1) != dim || sigma_prev.size(-1) != dim)
        throw ShapeError("DualGRU input width must equal D");
    const auto w = block_weights();
    const auto x = torch::cat({theta, theta}, -1);
    const auto h = torch::cat({mu_prev, sigma_prev}, -1);

    // Gate activations come out as [r_mu, z_mu, r_sigma, z_sigma].
    const auto gates = torch::sigmoid(torch::nn::functional::linear(x, w.w_ih, w.b_ih) +
                                      torch::nn::functional::linear(h, w.w_hh, w.b_hh));
    const auto g = gates.split(dim, -1);
    const auto r = torch::cat({g[0], g[2]}, -1);
    const auto u = torch::cat({g[1], g[3]}, -1);
    const auto n = torch::tanh(torch::nn::functional::linear(x, w.w_in, w.b_in) +
                               r * torch::nn::functional::linear(h, w.w_hn, w.b_hn));
    const auto h_next = (1 - u) * n + u * h;
    auto halves = h_next.split(dim, -1);
    return {halves[0], halves[1]};
}

// Posterior heads --------------------------------------------------------------

namespace {
nn::Sequential residual_mlp(int64_t dim) {
    return nn::Sequential(nn::Linear(dim, 2 * dim), nn::ReLU(), nn::Linear(2 * dim, dim));
}
}  // namespace

PosteriorHeadsImpl::PosteriorHeadsImpl(int64_t dim) {
    ln_mu = register_module("ln_mu", nn::LayerNorm(nn::LayerNormOptions({dim})));
    ln_sigma = register_module("ln_sigma", nn::LayerNorm(nn::LayerNormOptions({dim})));
    mlp_mu = register_module("mlp_mu", residual_mlp(dim));
    mlp_sigma = register_module("mlp_sigma", residual_mlp(dim));
}

std::pair<torch::Tensor, torch::Tensor> PosteriorHeadsImpl::forward(const torch::Tensor& mu_raw,
                                                                    const torch::Tensor& sigma_raw) {
    auto mu = mu_raw + mlp_mu->forward(ln_mu->forward(mu_raw));
    auto sigma = torch::relu(sigma_raw) + softplus_clamped(mlp_sigma->forward(ln_sigma->forward(sigma_raw)));
    return {mu, sigma};
}

void PosteriorHeadsImpl::zero_output_layers() {
    torch::NoGradGuard guard;
    for (auto* seq : {&mlp_mu, &mlp_sigma}) {
        auto last = (*seq)->ptr(2)->as<nn::Linear>();
        last->weight.zero_();
        last->bias.zero_();
    }
}

// Inference layer -------------------------------------------------------------

InferenceLayerImpl::InferenceLayerImpl(int64_t token_dim, int64_t latent_dim_, double eps_)
    : eps(eps_), latent_dim(latent_dim_) {
    ln_z = register_module("ln_z", nn::LayerNorm(nn::LayerNormOptions({latent_dim})));
    key = register_module("key", nn::Linear(nn::LinearOptions(token_dim, latent_dim).bias(false)));
    value = register_module("value", nn::Linear(nn::LinearOptions(token_dim, latent_dim).bias(false)));
    query = register_module("query", nn::Linear(nn::LinearOptions(latent_dim, latent_dim).bias(false)));
    gru = register_module("gru", DualGRU(latent_dim));
    heads = register_module("heads", PosteriorHeads(latent_dim));
}

void InferenceLayerImpl::untie_slot_queries(const torch::Tensor& offsets) { slot_offsets = offsets; }

AttentionState InferenceLayerImpl::attend(const torch::Tensor& tokens, const torch::Tensor& z) {
    auto q = query->forward(ln_z->forward(z));  // [B, K, D]
    if (slot_offsets.defined()) q = q + slot_offsets.to(q.options()).unsqueeze(0);
    const auto k = key->forward(tokens);        // [B, N, D]
    const auto v = value->forward(tokens);
    const auto logits = torch::bmm(q, k.transpose(1, 2)) / std::sqrt(static_cast<double>(latent_dim));
    check_finite(logits, "attention logits");

    AttentionState s;
    s.assignment = slot_softmax(logits, 1);
    const auto shifted = s.assignment + eps;
    s.alpha = shifted / shifted.sum(2, /*keepdim=*/true);
    s.theta = torch::bmm(s.alpha, v);
    return s;
}

std::pair<PosteriorParams, AttentionState> InferenceLayerImpl::forward(const torch::Tensor& tokens,
                                                                       const torch::Tensor& z_prev,
                                                                       const PosteriorParams& lambda_prev) {
    auto attention = attend(tokens, z_prev);
    auto [mu_raw, sigma_raw] = gru->forward(attention.theta, lambda_prev.mu, lambda_prev.sigma);
    auto [mu, sigma] = heads->forward(mu_raw, sigma_raw);
    PosteriorParams lambda{mu, sigma, lambda_prev.layer + 1, 0};
    return {lambda, attention};
}

// Bottom-up pass ---------------------------------------------------------------

BottomUpInferenceImpl::BottomUpInferenceImpl(const ModelConfig& config) : num_layers(config.layers) {
    layer = register_module("layer", InferenceLayer(config.encoder_channels, config.latent_dim, config.attention_eps));
    mu0 = register_parameter("mu0", torch::zeros({config.latent_dim}));
    sigma0 = register_parameter("sigma0", torch::ones({config.latent_dim}));
}

Trajectory BottomUpInferenceImpl::forward(const torch::Tensor& tokens, const torch::Tensor& noise) {
    if (noise.dim() != 4 || noise.size(0) != num_layers + 1)
        throw ShapeError("bottom-up noise must be [L+1, B, K, D]");
    if (noise.size(1) != tokens.size(0)) throw ShapeError("noise batch does not match tokens");
    const auto shape = noise[0].sizes();

    Trajectory t;
    PosteriorParams lambda0{mu0.expand(shape), sigma0.expand(shape), 0, 0};
    t.z.push_back(reparameterized_sample(lambda0, noise[0]));
    t.lambda.push_back(lambda0);
    for (int64_t l = 1; l <= num_layers; ++l) {
        auto [lambda, attention] = layer->forward(tokens, t.z.back().z, t.lambda.back());
        t.z.push_back(reparameterized_sample(lambda, noise[l]));
        t.lambda.push_back(lambda);
        t.attention.push_back(attention);
    }
    return t;
}

}  // namespace emorl
