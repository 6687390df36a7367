// Acceptance run: one PASS/FAIL line per criterion.
//
// Criteria 1-7 and 12 run by default. Criteria 8-11 need full training runs
// and only execute with --long; without it they report FAIL with the
// measured per-step cost, since they were not demonstrated.

#include <torch/torch.h>

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "../oracles.hpp"
#include "../test_util.hpp"
#include "emorl/errors.hpp"
#include "emorl/evaluation.hpp"
#include "emorl/model.hpp"
#include "emorl/objective.hpp"
#include "emorl/ops.hpp"
#include "emorl/scene_data.hpp"
#include "emorl/trainer.hpp"

namespace fs = std::filesystem;
using namespace emorl;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string num(double v, int precision = 4) {
    std::ostringstream s;
    s << std::setprecision(precision) << v;
    return s.str();
}

double diff(const torch::Tensor& a, const torch::Tensor& b) { return (a - b).abs().max().item<double>(); }

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Model configurations the structural criteria are exercised on.
std::vector<std::pair<std::string, ModelConfig>> structural_configs() {
    auto tet = tetromino_train_preset().model;
    auto spr = sprites_train_preset().model;
    ModelConfig mog;
    mog.height = mog.width = 16;
    mog.slots = 5;
    mog.latent_dim = 8;
    mog.layers = 2;
    mog.encoder_channels = 16;
    mog.decoder_channels = 16;
    mog.prior_hidden = 16;
    mog.refine_hidden = 16;
    mog.likelihood = Likelihood::MixtureOfGaussians;
    mog.prior = PriorVariant::BottomUp;
    auto ref = reference_model_config();
    ref.height = ref.width = 32;
    return {{"tetromino", tet}, {"sprites", spr}, {"mog-bottomup", mog}, {"standard-decoder", ref}};
}

// 1 ---------------------------------------------------------------------------

Outcome equivariance() {
    double worst = 0.0;
    int cases = 0;
    for (const auto& [name, cfg] : structural_configs()) {
        for (uint64_t seed = 0; seed < 2; ++seed) {
            torch::manual_seed(100 + seed);
            EfficientMorl model(cfg);
            model->eval();
            auto gen = at::make_generator<at::CPUGeneratorImpl>(200 + seed);
            const auto images = torch::rand({2, 3, cfg.height, cfg.width}, gen);
            const auto noise = draw_noise(cfg, 2, 3, gen);
            const auto perm = test::derangement(cfg.slots, 300 + seed);
            const auto a = model->forward(images, noise, ForwardMode::Eval);
            const auto b = model->forward(images, noise.permuted(perm), ForwardMode::Eval);
            double dev = 0.0;
            for (std::size_t l = 0; l < a.trajectory.lambda.size(); ++l) {
                dev = std::max(dev, diff(b.trajectory.lambda[l].mu, permute_slots(a.trajectory.lambda[l].mu, perm)));
                dev = std::max(dev,
                               diff(b.trajectory.lambda[l].sigma, permute_slots(a.trajectory.lambda[l].sigma, perm)));
                dev = std::max(dev, diff(b.trajectory.z[l].z, permute_slots(a.trajectory.z[l].z, perm)));
            }
            for (std::size_t i = 0; i < a.trace.lambda.size(); ++i) {
                dev = std::max(dev, diff(b.trace.lambda[i].mu, permute_slots(a.trace.lambda[i].mu, perm)));
                dev = std::max(dev, diff(b.trace.lambda[i].sigma, permute_slots(a.trace.lambda[i].sigma, perm)));
                dev = std::max(dev,
                               diff(b.trace.losses[i].output.pi, permute_slots(a.trace.losses[i].output.pi, perm)));
                dev = std::max(dev, diff(b.trace.losses[i].output.y, permute_slots(a.trace.losses[i].output.y, perm)));
            }
            worst = std::max(worst, dev);
            ++cases;
        }
    }
    return {worst <= 1e-6, "max_deviation=" + num(worst) + " tol=1e-6 cases=" + std::to_string(cases) +
                               " (lambda^l, z^l, pi, y, refinement trace; I=3)"};
}

// 2 ---------------------------------------------------------------------------

Outcome token_invariance() {
    double worst = 0.0;
    int cases = 0;
    for (const auto& [name, cfg] : structural_configs()) {
        torch::manual_seed(400);
        EfficientMorl model(cfg);
        torch::NoGradGuard no_grad;
        auto gen = at::make_generator<at::CPUGeneratorImpl>(401);
        const auto images = torch::rand({2, 3, cfg.height, cfg.width}, gen);
        const auto noise = draw_noise(cfg, 2, 0, gen);
        const auto tokens = model->encoder->forward(images).tokens;
        const auto a = model->inference->forward(tokens, noise.bottom_up);
        for (int trial = 0; trial < 3; ++trial) {
            const auto perm = torch::randperm(tokens.size(1), gen, torch::kLong);
            const auto b = model->inference->forward(tokens.index_select(1, perm), noise.bottom_up);
            worst = std::max({worst, diff(a.top().mu, b.top().mu), diff(a.top().sigma, b.top().sigma)});
            ++cases;
        }
    }
    return {worst <= 1e-5, "max_deviation=" + num(worst) + " tol=1e-5 cases=" + std::to_string(cases)};
}

// 3 ---------------------------------------------------------------------------

Outcome oracle_equivalences() {
    std::vector<std::string> notes;
    bool pass = true;

    // ARI: every pair of labelings of n <= 8 pixels, up to relabelling.
    int64_t ari_cases = 0;
    double ari_dev = 0.0;
    for (int n = 1; n <= 8; ++n) {
        const auto parts = oracle::set_partitions(n);
        for (std::size_t i = 0; i < parts.size(); ++i)
            for (std::size_t j = i; j < parts.size(); ++j) {
                const double ref = oracle::ari_pair_counting(parts[i], parts[j]);
                const auto got = ari(parts[i], parts[j], false);
                ari_dev = std::max(ari_dev, got ? std::abs(*got - ref) : 1.0);
                ++ari_cases;
            }
    }
    pass = pass && ari_dev <= 1e-12;
    notes.push_back("ari_cases=" + std::to_string(ari_cases) + " ari_dev=" + num(ari_dev));

    // Hungarian against brute force, G <= 5 rows, K <= 7 columns.
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    int hung_cases = 0;
    double hung_dev = 0.0;
    for (int g = 1; g <= 5; ++g)
        for (int k = g; k <= 7; ++k)
            for (int trial = 0; trial < 50; ++trial, ++hung_cases) {
                Eigen::MatrixXd iou(g, k);
                for (int r = 0; r < g; ++r)
                    for (int c = 0; c < k; ++c) iou(r, c) = trial % 3 == 0 ? std::round(u(rng) * 4) / 4 : u(rng);
                hung_dev = std::max(hung_dev, std::abs(hungarian_match(iou).total - oracle::best_injection(iou)));
            }
    pass = pass && hung_cases >= 1000 && hung_dev <= 1e-12;
    notes.push_back("hungarian_cases=" + std::to_string(hung_cases) + " hungarian_dev=" + num(hung_dev));

    // Mixture NLL against the naive 64-bit sum.
    double mog_dev = 0.0;
    for (uint64_t seed = 0; seed < 20; ++seed) {
        auto gen = at::make_generator<at::CPUGeneratorImpl>(500 + seed);
        const auto out = split_decoder_maps(torch::randn({1, 4, 4, 6, 6}, gen, torch::kFloat64));
        const auto x = torch::rand({1, 3, 6, 6}, gen, torch::kFloat64);
        for (double s : {0.1, 0.3})
            mog_dev = std::max(mog_dev, std::abs(mog_nll(x, out, s).item<double>() - oracle::mog_nll_oracle(x, out, s)));
    }
    pass = pass && mog_dev <= 1e-8;
    notes.push_back("mog_dev=" + num(mog_dev));

    // Diagonal KL against a 1e6-sample Monte Carlo estimate.
    double worst_z = 0.0;
    for (uint64_t seed = 0; seed < 3; ++seed) {
        auto gen = at::make_generator<at::CPUGeneratorImpl>(600 + seed);
        const auto mq = torch::randn({1, 3, 4}, gen, torch::kFloat64);
        const auto sq = torch::rand({1, 3, 4}, gen, torch::kFloat64) + 0.3;
        const auto mp = torch::randn({1, 3, 4}, gen, torch::kFloat64);
        const auto sp = torch::rand({1, 3, 4}, gen, torch::kFloat64) + 0.3;
        const double kl = diag_gaussian_kl(Gaussian{mq, sq}, Gaussian{mp, sp}).item<double>();
        const int64_t n = 1000000;
        const auto z = mq + sq * torch::randn({n, 1, 3, 4}, gen, torch::kFloat64);
        auto log_density = [](const torch::Tensor& x, const torch::Tensor& m, const torch::Tensor& s) {
            return (-0.5 * ((x - m) / s).square() - torch::log(s) - 0.5 * std::log(2 * std::numbers::pi))
                .flatten(1)
                .sum(1);
        };
        const auto samples = log_density(z, mq, sq) - log_density(z, mp, sp);
        const double se = samples.std().item<double>() / std::sqrt(static_cast<double>(n));
        worst_z = std::max(worst_z, std::abs(samples.mean().item<double>() - kl) / se);
    }
    pass = pass && worst_z <= 3.0;
    notes.push_back("kl_mc_worst=" + num(worst_z) + "SE");

    std::string detail;
    for (const auto& n : notes) detail += (detail.empty() ? "" : " ") + n;
    return {pass, detail};
}

// 4 ---------------------------------------------------------------------------

Outcome gradient_checks() {
    std::vector<std::pair<std::string, double>> errs;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(700);
    const auto x = torch::rand({1, 3, 4, 4}, gen, torch::kFloat64);
    const auto maps0 = torch::randn({1, 3, 4, 4, 4}, gen, torch::kFloat64);
    for (double s : {0.1, 0.3}) {
        errs.emplace_back("gaussian_nll", test::gradient_rel_error(
                                              [&](const torch::Tensor& m) {
                                                  return gaussian_nll(x, split_decoder_maps(m), s).sum();
                                              },
                                              maps0));
        errs.emplace_back("mog_nll", test::gradient_rel_error(
                                         [&](const torch::Tensor& m) {
                                             return mog_nll(x, split_decoder_maps(m), s).sum();
                                         },
                                         maps0));
    }
    const auto mq = torch::randn({2, 3, 4}, gen, torch::kFloat64);
    const auto sq = torch::rand({2, 3, 4}, gen, torch::kFloat64) + 0.2;
    const auto mp = torch::randn({2, 3, 4}, gen, torch::kFloat64);
    const auto sp = torch::rand({2, 3, 4}, gen, torch::kFloat64) + 0.2;
    errs.emplace_back("kl_q_mu", test::gradient_rel_error(
                                     [&](const torch::Tensor& v) {
                                         return diag_gaussian_kl(Gaussian{v, sq}, Gaussian{mp, sp}).sum();
                                     },
                                     mq));
    errs.emplace_back("kl_q_sigma", test::gradient_rel_error(
                                        [&](const torch::Tensor& v) {
                                            return diag_gaussian_kl(Gaussian{mq, v}, Gaussian{mp, sp}).sum();
                                        },
                                        sq));
    errs.emplace_back("kl_p_mu", test::gradient_rel_error(
                                     [&](const torch::Tensor& v) {
                                         return diag_gaussian_kl(Gaussian{mq, sq}, Gaussian{v, sp}).sum();
                                     },
                                     mp));
    errs.emplace_back("kl_p_sigma", test::gradient_rel_error(
                                        [&](const torch::Tensor& v) {
                                            return diag_gaussian_kl(Gaussian{mq, sq}, Gaussian{mp, v}).sum();
                                        },
                                        sp));

    // Full stage-1 loss of a toy 4x4 model, for both likelihoods.
    for (auto lik : {Likelihood::Gaussian, Likelihood::MixtureOfGaussians}) {
        torch::manual_seed(701);
        ModelConfig cfg;
        cfg.height = cfg.width = 4;
        cfg.slots = 2;
        cfg.latent_dim = 4;
        cfg.layers = 2;
        cfg.encoder_channels = 8;
        cfg.decoder_channels = 8;
        cfg.prior_hidden = 8;
        cfg.refine_hidden = 8;
        cfg.likelihood = lik;
        cfg.prior = PriorVariant::ReversedPlusPlus;
        EfficientMorl model(cfg);
        model->to(torch::kFloat64);
        const auto noise = draw_noise(cfg, 1, 0, gen, torch::TensorOptions().dtype(torch::kFloat64));
        const auto image = torch::rand({1, 3, 4, 4}, gen, torch::kFloat64);
        const std::string tag = lik == Likelihood::Gaussian ? "gaussian" : "mog";
        errs.emplace_back("stage1_image_" + tag, test::gradient_rel_error(
                                                     [&](const torch::Tensor& v) {
                                                         return model->forward(v, noise).stage1.total().sum();
                                                     },
                                                     image));

        // Parameter gradient: the prior mean head weight, perturbed in place.
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
        errs.emplace_back("stage1_prior_weight_" + tag,
                          scale == 0.0 ? 0.0 : (analytic - numeric).norm().item<double>() / scale);
    }

    double worst = 0.0;
    std::string which;
    for (const auto& [name, e] : errs)
        if (e >= worst) {
            worst = e;
            which = name;
        }
    return {worst <= 1e-4, "max_rel_error=" + num(worst) + " (" + which + ") tol=1e-4 checks=" +
                               std::to_string(errs.size())};
}

// 5 ---------------------------------------------------------------------------

TrainConfig small_train_config(int steps_I, bool geco) {
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
    c.curriculum = {{0, steps_I}};
    c.geco = geco;
    return c;
}

Outcome discount_weights_check() {
    const auto w = discount_weights(3);
    const bool exact = w == std::vector<double>{0.75, 0.5, 0.25};

    // I = 0: the minimised quantity is the stage-1 loss itself.
    torch::manual_seed(800);
    Trainer zero(small_train_config(0, false));
    const auto images = torch::rand({4, 3, 16, 16});
    const auto b0 = zero.train_step(images);
    const double dev0 = std::abs(b0.total + b0.elbo);

    // I = 3: total = stage 1 + 0.75 L1 + 0.5 L2 + 0.25 L3 (batch means).
    torch::manual_seed(801);
    Trainer three(small_train_config(3, false));
    const auto b3 = three.train_step(images);
    double expected = -b3.elbo;
    for (std::size_t i = 0; i < 3; ++i) expected += w[i] * (b3.refinement_nll[i] + b3.refinement_kl[i]);
    const double dev3 = std::abs(b3.total - expected) / std::abs(expected);
    const bool pass = exact && dev0 <= 1e-6 * std::abs(b0.elbo) && dev3 <= 1e-5;
    return {pass, "weights(I=3)=(" + num(w[0]) + "," + num(w[1]) + "," + num(w[2]) + ")" +
                      " I0_total_vs_stage1=" + num(dev0) + " I3_rel_dev=" + num(dev3)};
}

// 6 ---------------------------------------------------------------------------

Outcome geco_controller() {
    bool clamp_ok = true, up_ok = true, down_ok = true;
    std::mt19937_64 rng(900);
    std::uniform_real_distribution<double> u(-1e6, 1e6);
    for (int stream = 0; stream < 20; ++stream) {
        GecoState s;
        s.nll_threshold = 1000.0;
        s.zeta = 0.55 + stream * 0.2;
        s.update_rate = 1e-3;
        for (int i = 0; i < 2000; ++i) {
            s = geco_update(s, u(rng));
            clamp_ok = clamp_ok && s.zeta >= GecoState::kMinZeta;
        }
    }
    for (double nll : {1100.0, 5000.0, 1e5}) {
        GecoState s;
        s.nll_threshold = 1000.0;
        double prev = s.zeta;
        for (int i = 0; i < 1000; ++i) {
            s = geco_update(s, nll);
            up_ok = up_ok && s.zeta >= prev && s.zeta >= GecoState::kMinZeta;
            prev = s.zeta;
        }
        up_ok = up_ok && s.zeta > 0.55;
    }
    double floor_reached = 0.0;
    for (double nll : {0.0, 500.0, 999.0}) {
        GecoState s;
        s.nll_threshold = 1000.0;
        s.zeta = 3.0;
        s.update_rate = 1e-2;
        double prev = s.zeta;
        for (int i = 0; i < 20000; ++i) {
            s = geco_update(s, nll);
            down_ok = down_ok && s.zeta <= prev && s.zeta >= GecoState::kMinZeta;
            prev = s.zeta;
        }
        floor_reached = s.zeta;
    }
    return {clamp_ok && up_ok && down_ok,
            std::string("clamp=") + (clamp_ok ? "ok" : "violated") + " nll_above_threshold_raises_zeta=" +
                (up_ok ? "ok" : "no") + " nll_below_threshold_lowers_zeta=" + (down_ok ? "ok" : "no") +
                " final_low_zeta=" + num(floor_reached)};
}

// 7 ---------------------------------------------------------------------------

Outcome parameter_count() {
    EfficientMorl model(reference_model_config());
    const auto n = model->parameter_count();
    const double rel = std::abs(static_cast<double>(n) - 666000.0) / 666000.0;
    return {rel <= 0.05, "parameters=" + std::to_string(n) + " target=666000 rel_dev=" + num(rel) + " tol=0.05"};
}

// 12 --------------------------------------------------------------------------

Outcome bench_monotonicity() {
    torch::manual_seed(1200);
    EfficientMorl model(tetromino_train_preset().model);
    const auto r = bench(model, {0, 1, 3}, 10, 2, 4, 1200);
    const auto& a = r.rows[0];
    const auto& b = r.rows[1];
    const auto& c = r.rows[2];
    const bool monotone = a.forward_ms < b.forward_ms && b.forward_ms < c.forward_ms;
    const bool single_decode = a.decoder_calls_per_forward == 1.0;
    return {monotone && single_decode,
            "t(I=0)=" + num(a.forward_ms) + "ms t(I=1)=" + num(b.forward_ms) + "ms t(I=3)=" + num(c.forward_ms) +
                "ms decoder_calls(I=0,1,3)=" + num(a.decoder_calls_per_forward) + "," +
                num(b.decoder_calls_per_forward) + "," + num(c.decoder_calls_per_forward) + " batch=4"};
}

// Training criteria 8-11 --------------------------------------------------------

struct LongOptions {
    fs::path work = "acceptance_runs";
    int seeds = 5;
    int64_t max_steps = 0;  // 0 = the preset's step count
    double budget_hours = 4.0;
};

// Seconds per training step of a preset, measured on random images.
double measure_step_seconds(const TrainConfig& preset) {
    auto cfg = preset;
    Trainer t(cfg);
    const auto images = torch::rand({cfg.batch_size, 3, cfg.model.height, cfg.model.width});
    t.train_step(images);
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < 2; ++i) t.train_step(images);
    return seconds_since(t0) / 2.0;
}

struct Data {
    std::unique_ptr<DatasetReader> reader;
    DatasetView train{nullptr, 0, 0};
    DatasetView test{nullptr, 0, 0};
};

Data make_data(const fs::path& path, GeneratorPreset preset, std::size_t count, std::size_t n_test, uint64_t seed) {
    if (!fs::exists(path)) {
        std::vector<Scene> scenes;
        for (std::size_t i = 0; i < count; ++i) scenes.push_back(generate_scene(scene_seed(seed, i), preset));
        fs::create_directories(path.parent_path());
        write_dataset(scenes, path, static_cast<uint32_t>(preset.max_objects), seed, preset.name);
    }
    Data d;
    d.reader = std::make_unique<DatasetReader>(path);
    std::tie(d.train, d.test) = split_dataset(*d.reader, d.reader->size() - n_test, n_test);
    return d;
}

struct RunResult {
    int64_t steps = 0;
    double seconds = 0.0;
    double final_elbo = 0.0;  // mean training ELBO over the last 500 logged steps
    bool completed = false;
};

// Trains (resuming when a checkpoint exists) until total_steps or the
// wall-clock budget, whichever comes first.
RunResult train_run(const fs::path& dir, TrainConfig cfg, const DatasetView& train, double budget_s,
                    EfficientMorl& out_model) {
    fs::create_directories(dir);
    torch::manual_seed(cfg.seed);
    Trainer t(cfg);
    const auto ckpt = dir / "checkpoint.pt";
    double elapsed = 0.0;
    if (fs::exists(ckpt)) {
        t.load(ckpt);
        std::ifstream(dir / "elapsed.txt") >> elapsed;
    }
    std::ofstream log(dir / "metrics.jsonl", std::ios::app);
    auto t0 = std::chrono::steady_clock::now();
    const double start_elapsed = elapsed;
    auto save = [&] {
        log.flush();
        t.save(ckpt);
        std::ofstream(dir / "elapsed.txt") << std::setprecision(17) << elapsed;
    };
    while (t.step() < cfg.total_steps && elapsed < budget_s) {
        const auto b = t.train_step(train);
        log << b.json() << '\n';
        elapsed = start_elapsed + seconds_since(t0);
        if (t.step() % 100 == 0)
            std::cerr << "  " << dir.filename().string() << " step " << t.step() << " elbo=" << num(b.elbo, 6)
                      << " elapsed=" << num(elapsed / 3600.0, 3) << "h\n";
        if (t.step() % 250 == 0) save();
    }
    save();

    RunResult r;
    r.steps = t.step();
    r.seconds = elapsed;
    r.completed = t.step() >= cfg.total_steps;
    std::vector<std::pair<int64_t, double>> elbos;
    std::ifstream in(dir / "metrics.jsonl");
    for (std::string line; std::getline(in, line);) {
        auto j = nlohmann::json::parse(line, nullptr, false);
        if (!j.is_discarded() && j.contains("elbo")) elbos.emplace_back(j["step"].get<int64_t>(), j["elbo"].get<double>());
    }
    std::sort(elbos.begin(), elbos.end());
    elbos.erase(std::unique(elbos.begin(), elbos.end(), [](auto& a, auto& b) { return a.first == b.first; }),
                elbos.end());
    const std::size_t n = std::min<std::size_t>(500, elbos.size());
    for (std::size_t i = elbos.size() - n; i < elbos.size(); ++i) r.final_elbo += elbos[i].second / n;
    out_model = t.model();
    return r;
}

double test_ari(EfficientMorl& model, const DatasetView& view, int I, int64_t K = 0) {
    const auto trained_K = model->config.slots;
    if (K > 0) model->config.slots = K;
    EvalOptions opt;
    opt.refinement_steps = I;
    opt.max_scenes = 320;
    const double a = evaluate(model, view, opt).ari_mean;
    model->config.slots = trained_K;
    return a;
}

TrainConfig with_limits(TrainConfig c, const LongOptions& o, uint64_t seed) {
    if (o.max_steps > 0) c.total_steps = std::min(c.total_steps, o.max_steps);
    c.seed = seed;
    return c;
}

struct TetrominoRuns {
    std::vector<RunResult> runs;
    std::vector<double> ari;
};

TetrominoRuns tetromino_runs(const LongOptions& o, Data& data, int I) {
    TetrominoRuns out;
    for (int s = 0; s < o.seeds; ++s) {
        auto cfg = with_limits(tetromino_train_preset(), o, static_cast<uint64_t>(s));
        cfg.curriculum = {{0, I}};
        EfficientMorl model{nullptr};
        out.runs.push_back(train_run(o.work / ("tetromino_I" + std::to_string(I) + "_seed" + std::to_string(s)), cfg,
                                     data.train, o.budget_hours * 3600.0, model));
        out.ari.push_back(test_ari(model, data.test, I));
        std::cerr << "  tetromino I=" << I << " seed " << s << ": steps=" << out.runs.back().steps
                  << " ari=" << num(out.ari.back()) << '\n';
    }
    return out;
}

std::string list(const std::vector<double>& v) {
    std::string s;
    for (double x : v) s += (s.empty() ? "" : ",") + num(x, 3);
    return "[" + s + "]";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    bool long_mode = false;
    std::vector<int> only;
    LongOptions lo;
    int threads = 1;
    app.add_flag("--long", long_mode, "Run the training criteria 8-11");
    app.add_option("--criteria", only, "Subset of criteria to run");
    app.add_option("--work", lo.work, "Directory for datasets and training runs (long mode)");
    app.add_option("--seeds", lo.seeds, "Seeds per training setting (long mode)");
    app.add_option("--max-steps", lo.max_steps, "Cap on training steps per run (long mode)");
    app.add_option("--budget-hours", lo.budget_hours, "Wall-clock budget per training run (long mode)");
    app.add_option("--threads", threads, "Intra-op threads");
    CLI11_PARSE(app, argc, argv);
    torch::set_num_threads(threads);

    auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
    int failures = 0;
    auto report = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
        if (!wanted(id)) return;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            std::string msg = e.what();
            o = {false, "exception: " + msg.substr(0, msg.find('\n'))};
        }
        if (!o.pass) ++failures;
        std::cout << "criterion " << std::setw(2) << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << name
                  << "  " << o.detail << "  [" << num(seconds_since(t0), 3) << " s]" << std::endl;
    };

    report(1, "slot-permutation equivariance", equivariance);
    report(2, "token-order invariance", token_invariance);
    report(3, "oracle equivalences", oracle_equivalences);
    report(4, "gradient checks", gradient_checks);
    report(5, "refinement loss weights", discount_weights_check);
    report(6, "GECO controller", geco_controller);
    report(7, "reference parameter count", parameter_count);

    const bool any_training = wanted(8) || wanted(9) || wanted(10) || wanted(11);
    if (!long_mode && any_training) {
        const double tet = measure_step_seconds(tetromino_train_preset());
        const double spr = measure_step_seconds(sprites_train_preset());
        const auto tet_steps = tetromino_train_preset().total_steps;
        const auto spr_steps = sprites_train_preset().total_steps;
        auto not_run = [&](const std::string& cost) {
            return [cost] { return Outcome{false, "not demonstrated: needs --long; " + cost}; };
        };
        const std::string tet_cost = num(tet, 3) + " s/step x " + std::to_string(tet_steps) + " steps = " +
                                     num(tet * tet_steps / 3600.0, 3) + " h per seed on " +
                                     std::to_string(torch::get_num_threads()) + " thread(s)";
        report(8, "desk-scale decomposition (tetromino ARI >= 0.80, 3 of 5 seeds, <= 4 h CPU)",
               not_run(tet_cost + "; the 4 h budget allows " + std::to_string(static_cast<int64_t>(4 * 3600 / tet)) +
                       " steps"));
        report(9, "refinement benefit (ELBO I=3 > I=0, ARI collapse only at I=0)",
               not_run("10 runs x " + tet_cost));
        const std::string spr_cost = num(spr, 3) + " s/step x " + std::to_string(spr_steps) + " steps = " +
                                     num(spr * spr_steps / 3600.0, 3) + " h";
        report(10, "zero-step test inference (ARI(I=0) >= 0.95 ARI(I=1))", not_run(spr_cost));
        report(11, "more-objects generalization (K=7, 5-6 objects, drop <= 0.1)", not_run(spr_cost));
    } else if (any_training) {
        Data tet, spr, ood;
        if (wanted(8) || wanted(9)) tet = make_data(lo.work / "tetromino.bin", tetromino_preset(), 10000, 320, 1);
        TetrominoRuns i3, i0;
        if (wanted(8) || wanted(9)) i3 = tetromino_runs(lo, tet, 3);
        report(8, "desk-scale decomposition (tetromino ARI >= 0.80, 3 of 5 seeds, <= 4 h CPU)", [&] {
            int good = 0;
            bool within = true;
            for (std::size_t s = 0; s < i3.ari.size(); ++s) {
                good += i3.ari[s] >= 0.80;
                within = within && i3.runs[s].seconds <= 4 * 3600.0 + 1.0;
            }
            std::string steps;
            for (const auto& r : i3.runs) steps += (steps.empty() ? "" : ",") + std::to_string(r.steps);
            return Outcome{good >= 3 && within && lo.seeds >= 5,
                           "ari=" + list(i3.ari) + " seeds>=0.80: " + std::to_string(good) + "/" +
                               std::to_string(lo.seeds) + " steps=[" + steps + "]"};
        });
        if (wanted(9)) i0 = tetromino_runs(lo, tet, 0);
        report(9, "refinement benefit (ELBO I=3 > I=0, ARI collapse only at I=0)", [&] {
            double e3 = 0.0, e0 = 0.0;
            for (const auto& r : i3.runs) e3 += r.final_elbo / i3.runs.size();
            for (const auto& r : i0.runs) e0 += r.final_elbo / i0.runs.size();
            const bool collapse0 = std::any_of(i0.ari.begin(), i0.ari.end(), [](double a) { return a < 0.5; });
            const bool collapse3 = std::any_of(i3.ari.begin(), i3.ari.end(), [](double a) { return a < 0.5; });
            return Outcome{e3 > e0 && collapse0 && !collapse3 && lo.seeds >= 5,
                           "mean_final_elbo I=3: " + num(e3, 6) + " I=0: " + num(e0, 6) + " ari I=3 " + list(i3.ari) +
                               " I=0 " + list(i0.ari)};
        });

        if (wanted(10) || wanted(11)) {
            spr = make_data(lo.work / "sprites.bin", sprites_preset(), 10000, 320, 1);
            auto many = sprites_preset();
            many.min_objects = 5;
            many.max_objects = 6;
            ood = make_data(lo.work / "sprites_5to6.bin", many, 320, 320, 2);
            EfficientMorl model{nullptr};
            const auto run =
                train_run(lo.work / "sprites_seed0", with_limits(sprites_train_preset(), lo, 0), spr.train,
                          lo.budget_hours * 3600.0, model);
            const double a0 = test_ari(model, spr.test, 0);
            const double a1 = test_ari(model, spr.test, 1);
            report(10, "zero-step test inference (ARI(I=0) >= 0.95 ARI(I=1))", [&] {
                return Outcome{run.completed && a0 >= 0.95 * a1, "steps=" + std::to_string(run.steps) +
                                                                     " ari(I=0)=" + num(a0) + " ari(I=1)=" + num(a1)};
            });
            report(11, "more-objects generalization (K=7, 5-6 objects, drop <= 0.1)", [&] {
                const double in = a1;
                const double out = test_ari(model, ood.test, 1, 7);
                return Outcome{run.completed && in - out <= 0.1, "steps=" + std::to_string(run.steps) +
                                                                     " ari(K=5, 1-4 objects)=" + num(in) +
                                                                     " ari(K=7, 5-6 objects)=" + num(out)};
            });
        }
    }

    report(12, "bench monotonicity", bench_monotonicity);

    std::cout << (failures == 0 ? "all selected criteria passed" : std::to_string(failures) + " criteria failed")
              << std::endl;
    return failures == 0 ? 0 : 1;
}
