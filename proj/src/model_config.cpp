#include "emorl/model_config.hpp"

#include "emorl/errors.hpp"

namespace emorl {

std::string to_string(Likelihood v) { return v == Likelihood::Gaussian ? "gaussian" : "mog"; }

std::string to_string(PriorVariant v) {
    switch (v) {
        case PriorVariant::BottomUp: return "bottom_up";
        case PriorVariant::Reversed: return "reversed";
        case PriorVariant::ReversedPlusPlus: return "reversed_pp";
    }
    return "?";
}

std::string to_string(DecoderKind v) { return v == DecoderKind::Standard ? "standard" : "light"; }

Likelihood parse_likelihood(const std::string& s) {
    if (s == "gaussian") return Likelihood::Gaussian;
    if (s == "mog") return Likelihood::MixtureOfGaussians;
    throw ConfigError("unknown likelihood '" + s + "' (expected gaussian|mog)");
}

PriorVariant parse_prior_variant(const std::string& s) {
    if (s == "bottom_up") return PriorVariant::BottomUp;
    if (s == "reversed") return PriorVariant::Reversed;
    if (s == "reversed_pp") return PriorVariant::ReversedPlusPlus;
    throw ConfigError("unknown prior variant '" + s + "' (expected bottom_up|reversed|reversed_pp)");
}

DecoderKind parse_decoder_kind(const std::string& s) {
    if (s == "standard") return DecoderKind::Standard;
    if (s == "light") return DecoderKind::Light;
    throw ConfigError("unknown decoder '" + s + "' (expected standard|light)");
}

void ModelConfig::validate() const {
    if (height < 1 || width < 1) throw ConfigError("image size must be positive");
    if (slots < 1) throw ConfigError("K must be >= 1");
    if (latent_dim < 1) throw ConfigError("D must be >= 1");
    if (layers < 1) throw ConfigError("L must be >= 1");
    if (!(sigma_lik > 0)) throw ConfigError("likelihood sigma must be positive");
    if (encoder_channels < 1 || decoder_channels < 1) throw ConfigError("channel counts must be positive");
}

ModelConfig reference_model_config() {
    ModelConfig c;
    c.height = c.width = 64;
    c.slots = 7;
    c.latent_dim = 64;
    c.layers = 3;
    c.decoder = DecoderKind::Standard;
    c.decoder_channels = 64;
    c.likelihood = Likelihood::MixtureOfGaussians;
    c.sigma_lik = 0.1;
    c.prior = PriorVariant::ReversedPlusPlus;
    return c;
}

}  // namespace emorl
