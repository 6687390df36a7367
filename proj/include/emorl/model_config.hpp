#ifndef EMORL_MODEL_CONFIG_HPP
#define EMORL_MODEL_CONFIG_HPP

#include <cstdint>
#include <string>

namespace emorl {

enum class Likelihood { Gaussian, MixtureOfGaussians };
enum class PriorVariant { BottomUp, Reversed, ReversedPlusPlus };
enum class DecoderKind { Standard, Light };

std::string to_string(Likelihood v);
std::string to_string(PriorVariant v);
std::string to_string(DecoderKind v);
Likelihood parse_likelihood(const std::string& s);
PriorVariant parse_prior_variant(const std::string& s);
DecoderKind parse_decoder_kind(const std::string& s);

/// Architecture and likelihood settings shared by every network module.
struct ModelConfig {
    int64_t height = 32;
    int64_t width = 32;
    int64_t slots = 4;           // K
    int64_t latent_dim = 32;     // D
    int64_t layers = 3;          // L
    int64_t encoder_channels = 64;
    DecoderKind decoder = DecoderKind::Light;
    int64_t decoder_channels = 32;
    Likelihood likelihood = Likelihood::Gaussian;
    double sigma_lik = 0.3;
    PriorVariant prior = PriorVariant::BottomUp;
    double attention_eps = 1e-8;
    int64_t prior_hidden = 128;
    int64_t refine_hidden = 128;

    /// Extra broadcast border so the valid convolutions land on H x W.
    [[nodiscard]] int64_t broadcast_margin() const { return decoder == DecoderKind::Standard ? 10 : 6; }
    void validate() const;
};

/// D = 64 standard-decoder configuration used for the parameter budget.
ModelConfig reference_model_config();

}  // namespace emorl

#endif  // EMORL_MODEL_CONFIG_HPP
