#include "doctest_torch.hpp"

#include <cmath>
#include <numbers>

#include "emorl/model.hpp"
#include "emorl/objective.hpp"
#include "test_util.hpp"

using namespace emorl;

namespace {

double normal_logpdf(double x, double mu, double sigma) {
    const double r = (x - mu) / sigma;
    return -0.5 * r * r - std::log(sigma) - 0.5 * std::log(2 * std::numbers::pi);
}

}  // namespace

TEST_SUITE("objective") {

TEST_CASE("diagonal KL closed-form examples") {
    const auto mu = torch::randn({2, 3, 4}, torch::kFloat64);
    const auto sigma = torch::rand({2, 3, 4}, torch::kFloat64) + 0.1;
    CHECK(diag_gaussian_kl(Gaussian{mu, sigma}, Gaussian{mu, sigma}).abs().max().item<double>() == 0.0);

    const auto one = torch::ones({1, 1, 1}, torch::kFloat64);
    CHECK(diag_gaussian_kl(Gaussian{one, one}, Gaussian{one * 0, one}).item<double>() == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(diag_gaussian_kl(Gaussian{mu, sigma}, Gaussian{mu, sigma}).sizes() == torch::IntArrayRef({2}));
}

TEST_CASE("diagonal KL matches a Monte Carlo estimate") {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(3);
    const auto mq = torch::randn({1, 3, 4}, gen, torch::kFloat64);
    const auto sq = torch::rand({1, 3, 4}, gen, torch::kFloat64) + 0.3;
    const auto mp = torch::randn({1, 3, 4}, gen, torch::kFloat64);
    const auto sp = torch::rand({1, 3, 4}, gen, torch::kFloat64) + 0.3;
    const double kl = diag_gaussian_kl(Gaussian{mq, sq}, Gaussian{mp, sp}).item<double>();

    const int64_t n = 1000000;
    const auto z = mq + sq * torch::randn({n, 1, 3, 4}, gen, torch::kFloat64);
    // Independent per-element log densities, summed over the 12 dims.
    auto log_density = [](const torch::Tensor& x, const torch::Tensor& m, const torch::Tensor& s) {
        return (-0.5 * ((x - m) / s).square() - torch::log(s) - 0.5 * std::log(2 * std::numbers::pi)).flatten(1).sum(1);
    };
    const auto samples = log_density(z, mq, sq) - log_density(z, mp, sp);
    const double mean = samples.mean().item<double>();
    const double se = samples.std().item<double>() / std::sqrt(static_cast<double>(n));
    CHECK(std::abs(mean - kl) <= 3 * se);
    CHECK(normal_logpdf(0.0, 0.0, 1.0) == doctest::Approx(-0.5 * std::log(2 * std::numbers::pi)));
}

TEST_CASE("diagonal KL is non-negative with exact gradients") {
    for (uint64_t seed = 0; seed < 50; ++seed) {
        auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
        const auto m = torch::randn({2, 3, 4}, gen, torch::kFloat64) * 3;
        const auto s = torch::rand({2, 3, 4}, gen, torch::kFloat64) * 4 + 1e-3;
        const auto m2 = torch::randn({2, 3, 4}, gen, torch::kFloat64) * 3;
        const auto s2 = torch::rand({2, 3, 4}, gen, torch::kFloat64) * 4 + 1e-3;
        CHECK(diag_gaussian_kl(Gaussian{m, s}, Gaussian{m2, s2}).min().item<double>() >= -1e-9);
    }
    auto gen = at::make_generator<at::CPUGeneratorImpl>(99);
    const auto packed = torch::cat({torch::randn({1, 2, 3}, gen, torch::kFloat64),
                                    torch::rand({1, 2, 3}, gen, torch::kFloat64) + 0.2,
                                    torch::randn({1, 2, 3}, gen, torch::kFloat64),
                                    torch::rand({1, 2, 3}, gen, torch::kFloat64) + 0.2},
                                   -1);
    auto f = [](const torch::Tensor& p) {
        const auto parts = p.split(3, -1);
        return diag_gaussian_kl(Gaussian{parts[0], parts[1]}, Gaussian{parts[2], parts[3]}).sum();
    };
    CHECK(test::gradient_rel_error(f, packed) <= 1e-4);
}

TEST_CASE("posteriors pinned to their targets leave only the NLL") {
    torch::manual_seed(0);
    PriorNet prior(6, 16);
    prior->to(torch::kFloat64);
    Trajectory t;
    auto z_prev = torch::randn({2, 3, 6}, torch::kFloat64);
    t.lambda.push_back({torch::zeros({2, 3, 6}, torch::kFloat64), torch::ones({2, 3, 6}, torch::kFloat64), 0, 0});
    t.z.push_back({z_prev, 0, 0});
    const auto layout = prior_layout(PriorVariant::BottomUp, 3);
    for (int l = 1; l <= 3; ++l) {
        // Layer 1 targets N(0, I); deeper layers the prior at z^{l-1}.
        Gaussian g = l == 1 ? standard_normal_like(z_prev) : prior->forward(t.z.back().z);
        t.lambda.push_back({g.mu.detach(), g.sigma.detach(), l, 0});
        t.z.push_back({(g.mu + g.sigma * torch::randn_like(g.mu)).detach(), l, 0});
    }
    CHECK(layout.layers[0].standard);
    const auto targets = prior_targets(PriorVariant::BottomUp, prior, t);
    const auto nll = torch::tensor({3.25, 7.5}, torch::kFloat64);
    const auto terms = elbo_terms(nll, t, targets);
    CHECK(terms.kl.size() == 3);
    CHECK(test::max_abs_diff(terms.total(), nll) == 0.0);
}

TEST_CASE("single-layer reversed prior uses one standard-normal KL") {
    Trajectory t;
    const auto mu = torch::randn({1, 2, 4}, torch::kFloat64);
    const auto sigma = torch::rand({1, 2, 4}, torch::kFloat64) + 0.5;
    t.lambda.push_back({torch::zeros_like(mu), torch::ones_like(mu), 0, 0});
    t.lambda.push_back({mu, sigma, 1, 0});
    t.z.push_back({torch::zeros_like(mu), 0, 0});
    t.z.push_back({mu, 1, 0});
    PriorNet prior(4, 8);
    const auto targets = prior_targets(PriorVariant::Reversed, prior, t);
    const auto terms = elbo_terms(torch::zeros({1}, torch::kFloat64), t, targets);
    REQUIRE(terms.kl.size() == 1);
    const double expected = (0.5 * (sigma.square() + mu.square() - 1) - torch::log(sigma)).sum().item<double>();
    CHECK(terms.kl[0].item<double>() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("stage-1 loss gradient on a toy model") {
    torch::manual_seed(1);
    ModelConfig cfg;
    cfg.height = cfg.width = 4;
    cfg.slots = 2;
    cfg.latent_dim = 4;
    cfg.layers = 2;
    cfg.encoder_channels = 8;
    cfg.decoder_channels = 8;
    cfg.prior_hidden = 8;
    cfg.refine_hidden = 8;
    cfg.likelihood = Likelihood::MixtureOfGaussians;
    cfg.prior = PriorVariant::ReversedPlusPlus;
    EfficientMorl model(cfg);
    model->to(torch::kFloat64);
    auto gen = at::make_generator<at::CPUGeneratorImpl>(2);
    const auto noise = draw_noise(cfg, 1, 0, gen, torch::TensorOptions().dtype(torch::kFloat64));
    const auto image = torch::rand({1, 3, 4, 4}, gen, torch::kFloat64);

    // With respect to the input image (through encoder, inference, decoder and NLL).
    auto by_image = [&](const torch::Tensor& x) { return model->forward(x, noise).stage1.total().sum(); };
    CHECK(test::gradient_rel_error(by_image, image) <= 1e-4);

    // With respect to a prior weight, perturbed in place.
    auto& w = model->prior->mu_head->weight;
    model->zero_grad();
    model->forward(image, noise).stage1.total().sum().backward();
    const auto analytic = w.grad().clone();
    auto numeric = torch::zeros_like(w);
    {
        torch::NoGradGuard guard;
        auto flat = w.view({-1});
        for (int64_t i = 0; i < flat.numel(); ++i) {
            const double v = flat[i].item<double>();
            flat[i] = v + 1e-6;
            const double up = model->forward(image, noise).stage1.total().sum().item<double>();
            flat[i] = v - 1e-6;
            const double down = model->forward(image, noise).stage1.total().sum().item<double>();
            flat[i] = v;
            numeric.view({-1})[i] = (up - down) / 2e-6;
        }
    }
    const double scale = std::max(analytic.norm().item<double>(), numeric.norm().item<double>());
    REQUIRE(scale > 0.0);
    CHECK((analytic - numeric).norm().item<double>() / scale <= 1e-4);
}

TEST_CASE("discount weights") {
    CHECK(discount_weights(3) == std::vector<double>{0.75, 0.5, 0.25});
    CHECK(discount_weights(1) == std::vector<double>{0.5});
    CHECK(discount_weights(0).empty());
    for (int steps = 1; steps <= 10; ++steps) {
        const auto w = discount_weights(steps);
        for (int i = 1; i <= steps; ++i) {
            CHECK(w[i - 1] == static_cast<double>(steps - i + 1) / (steps + 1));
            if (i > 1) CHECK(w[i - 1] < w[i - 2]);
        }
    }
    CHECK(discounted_total(2.0, {}) == 2.0);
    CHECK(discounted_total(2.0, {1.0, 1.0, 1.0}) == 2.0 + 0.75 + 0.5 + 0.25);
    const auto t = discounted_total(torch::tensor(1.0), {torch::tensor(4.0)});
    CHECK(t.item<double>() == 3.0);
}

TEST_CASE("GECO constraint term") {
    GecoState s;
    s.nll_threshold = 100.0;
    // softplus(0.55) = ln(1 + e^0.55) = 1.0054925...
    CHECK(s.multiplier() == doctest::Approx(1.0054925).epsilon(1e-6));
    CHECK(s.multiplier() >= 1.0);
    CHECK(geco_apply(5.0, 100.0, s) == 5.0);
    CHECK(geco_apply(5.0, 90.0, s) < 5.0);
    CHECK(geco_apply(5.0, 110.0, s) > 5.0);
    const auto t = geco_apply(torch::tensor({5.0}), torch::tensor({110.0}), s);
    CHECK(t.item<double>() == doctest::Approx(geco_apply(5.0, 110.0, s)));
}

TEST_CASE("GECO update law") {
    GecoState s;
    s.nll_threshold = 100.0;
    s.zeta = 2.0;
    SUBCASE("zero EMA leaves zeta unchanged") {
        const auto n = geco_update(s, 100.0);
        CHECK(n.c_ema == 0.0);
        CHECK(n.zeta == 2.0);
    }
    SUBCASE("clamp") {
        GecoState low = s;
        low.zeta = 0.5500001;
        low.c_ema = 1e6;  // would drive zeta to ~-0.45
        CHECK(geco_update(low, 100.0).zeta == GecoState::kMinZeta);
    }
    SUBCASE("constant NLL above threshold raises zeta") {
        GecoState cur = s;
        double prev = cur.zeta;
        for (int i = 0; i < 500; ++i) {
            cur = geco_update(cur, 5000.0);
            CHECK(cur.zeta >= prev);
            prev = cur.zeta;
        }
        CHECK(cur.zeta > s.zeta);
    }
    SUBCASE("constant NLL below threshold lowers zeta down to the clamp") {
        GecoState cur = s;
        cur.update_rate = 1e-2;
        double prev = cur.zeta;
        for (int i = 0; i < 2000; ++i) {
            cur = geco_update(cur, 0.0);
            CHECK(cur.zeta <= prev);
            CHECK(cur.zeta >= GecoState::kMinZeta);
            prev = cur.zeta;
        }
        CHECK(cur.zeta == GecoState::kMinZeta);
    }
    SUBCASE("random streams never break the clamp") {
        std::mt19937_64 rng(4);
        std::uniform_real_distribution<double> u(-1e6, 1e6);
        GecoState cur = s;
        cur.update_rate = 1e-3;
        for (int i = 0; i < 5000; ++i) {
            cur = geco_update(cur, u(rng));
            REQUIRE(cur.zeta >= GecoState::kMinZeta);
        }
    }
}

}  // TEST_SUITE
