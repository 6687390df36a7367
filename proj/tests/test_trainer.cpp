#include "doctest_torch.hpp"

#include <cmath>

#include "emorl/errors.hpp"
#include "emorl/trainer.hpp"
#include "test_util.hpp"

using namespace emorl;

namespace {

TrainConfig toy_train_config() {
    TrainConfig c;
    c.model.height = c.model.width = 16;
    c.model.slots = 3;
    c.model.latent_dim = 8;
    c.model.layers = 2;
    c.model.encoder_channels = 16;
    c.model.decoder_channels = 16;
    c.model.prior_hidden = 16;
    c.model.refine_hidden = 16;
    c.model.prior = PriorVariant::ReversedPlusPlus;
    c.batch_size = 4;
    c.total_steps = 100;
    c.lr.warmup = 5;
    c.lr.half_life = 1000.0;
    c.curriculum = {{0, 2}, {6, 1}};
    c.geco = true;
    c.seed = 3;
    return c;
}

torch::Tensor toy_images(int64_t n, uint64_t seed) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    return torch::rand({n, 3, 16, 16}, gen);
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("learning-rate schedule") {
    LrSchedule s;
    CHECK(lr_at(0, s) == 0.0);
    CHECK(lr_at(s.warmup / 2, s) == doctest::Approx(2e-4).epsilon(1e-12));
    CHECK(lr_at(s.warmup, s) == doctest::Approx(4e-4).epsilon(1e-12));
    CHECK(lr_at(s.warmup + 100000, s) == doctest::Approx(2e-4).epsilon(1e-12));
    CHECK(lr_at(s.warmup + 200000, s) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK_THROWS_AS(lr_at(-1, s), ConfigError);
}

TEST_CASE("curriculum lookup") {
    const std::vector<CurriculumEntry> c{{0, 3}, {100000, 1}};
    CHECK(current_I(0, c) == 3);
    CHECK(current_I(99999, c) == 3);
    CHECK(current_I(100000, c) == 1);
    CHECK(current_I(5000000, {{0, 3}}) == 3);

    auto cfg = toy_train_config();
    cfg.curriculum = {{0, 1}, {10, 3}};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.curriculum = {{0, 3}, {0, 1}};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.curriculum = {};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("global-norm clipping") {
    auto a = torch::zeros({3}, torch::requires_grad());
    auto b = torch::zeros({4}, torch::requires_grad());
    a.mutable_grad() = torch::tensor({30.f, 0.f, 0.f});
    b.mutable_grad() = torch::tensor({40.f, 0.f, 0.f, 0.f});
    CHECK(clip_gradients({a, b}, 5.0) == doctest::Approx(50.0));
    const double after = std::sqrt(a.grad().square().sum().item<double>() + b.grad().square().sum().item<double>());
    CHECK(after == doctest::Approx(5.0).epsilon(1e-6));
    CHECK(a.grad()[0].item<float>() == doctest::Approx(3.0));

    // Below the limit gradients are left alone.
    a.mutable_grad() = torch::tensor({1.f, 0.f, 0.f});
    b.mutable_grad() = torch::zeros({4});
    CHECK(clip_gradients({a, b}, 5.0) == doctest::Approx(1.0));
    CHECK(a.grad()[0].item<float>() == 1.f);
}

TEST_CASE("batch schedule covers every scene once per epoch") {
    std::vector<int> seen(10, 0);
    for (int64_t step = 0; step < 5; ++step)
        for (auto i : batch_indices(7, step, 2, 10)) ++seen[i];
    for (int c : seen) CHECK(c == 1);
    CHECK(batch_indices(7, 3, 4, 10) == batch_indices(7, 3, 4, 10));
    CHECK(batch_indices(7, 0, 10, 10) != batch_indices(8, 0, 10, 10));
    CHECK_THROWS_AS(batch_indices(1, 0, 2, 0), IndexError);
}

TEST_CASE("configuration hash") {
    const auto a = toy_train_config();
    auto b = a;
    CHECK(config_hash(a) == config_hash(b));
    b.model.sigma_lik = 0.1;
    CHECK(config_hash(a) != config_hash(b));
    b = a;
    b.total_steps = 5000;
    CHECK(config_hash(a) == config_hash(b));
    CHECK(fnv1a("") == 14695981039346656037ull);
    CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cull);
}

TEST_CASE("training steps are deterministic and follow the curriculum") {
    const auto images = toy_images(4, 1);
    Trainer a(toy_train_config());
    Trainer b(toy_train_config());
    for (int i = 0; i < 8; ++i) {
        const auto la = a.train_step(images);
        const auto lb = b.train_step(images);
        CHECK(la.total == lb.total);
        CHECK(la.refinement_steps == (i < 6 ? 2 : 1));
        CHECK(la.refinement_nll.size() == static_cast<std::size_t>(la.refinement_steps));
        CHECK(la.kl.size() == 2);
        CHECK(la.zeta >= GecoState::kMinZeta);
        CHECK(std::isfinite(la.grad_norm));
    }
    CHECK(a.step() == 8);
    const auto pa = a.model()->parameters();
    const auto pb = b.model()->parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(test::max_abs_diff(pa[i], pb[i]) == 0.0);
}

TEST_CASE("checkpoint round trip and resume") {
    test::TempDir dir;
    const auto images = toy_images(4, 2);
    Trainer straight(toy_train_config());
    Trainer first(toy_train_config());
    for (int i = 0; i < 4; ++i) {
        straight.train_step(images);
        first.train_step(images);
    }
    first.save(dir.path / "ckpt.pt");

    Trainer resumed(toy_train_config());
    resumed.load(dir.path / "ckpt.pt");
    CHECK(resumed.step() == 4);
    CHECK(resumed.geco().zeta == first.geco().zeta);
    CHECK(resumed.geco().c_ema == first.geco().c_ema);
    const auto p1 = first.model()->parameters();
    const auto p2 = resumed.model()->parameters();
    for (std::size_t i = 0; i < p1.size(); ++i) CHECK(test::max_abs_diff(p1[i], p2[i]) == 0.0);

    for (int i = 0; i < 3; ++i) {
        const auto s = straight.train_step(images);
        const auto r = resumed.train_step(images);
        CHECK(r.step == s.step);
        CHECK(r.total == doctest::Approx(s.total).epsilon(1e-6));
    }

    auto other = toy_train_config();
    other.seed = 4;
    Trainer mismatched(other);
    CHECK_THROWS_AS(mismatched.load(dir.path / "ckpt.pt"), MismatchError);
    CHECK_THROWS_AS(resumed.load(dir.path / "missing.pt"), IoError);

    auto model = EfficientMorl(toy_train_config().model);
    save_model(first.model(), first.hash(), dir.path / "weights.pt");
    load_model(model, first.hash(), dir.path / "weights.pt");
    const auto p3 = model->parameters();
    for (std::size_t i = 0; i < p1.size(); ++i) CHECK(test::max_abs_diff(p1[i], p3[i]) == 0.0);
    CHECK_THROWS_AS(load_model(model, first.hash() + 1, dir.path / "ckpt.pt"), MismatchError);
}

TEST_CASE("loss breakdown serialises as one JSON line") {
    Trainer t(toy_train_config());
    const auto b = t.train_step(toy_images(4, 3));
    const auto line = b.json();
    CHECK(line.find('\n') == std::string::npos);
    CHECK(line.find("\"zeta\"") != std::string::npos);
    CHECK(line.find("\"update_norms\"") != std::string::npos);
}

TEST_CASE("reference model parameter budget") {
    EfficientMorl model(reference_model_config());
    const auto n = static_cast<double>(model->parameter_count());
    MESSAGE("reference parameter count: " << n);
    CHECK(n >= 666000 * 0.95);
    CHECK(n <= 666000 * 1.05);
}

}  // TEST_SUITE
