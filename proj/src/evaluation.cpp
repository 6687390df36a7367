#include "emorl/evaluation.hpp"

#include <png.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>

#include "emorl/errors.hpp"
#include "emorl/ops.hpp"
#include "emorl/trainer.hpp"

namespace emorl {

namespace {

double choose2(double n) { return n * (n - 1.0) / 2.0; }

double entropy_normalised(const Eigen::VectorXd& p, Eigen::Index categories) {
    if (categories <= 1) return 0.0;
    double h = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i)
        if (p(i) > 0.0) h -= p(i) * std::log(p(i));
    return h / std::log(static_cast<double>(categories));
}

torch::Tensor to_uint8_hwc(const torch::Tensor& chw) {
    return chw.detach().clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8).permute({1, 2, 0}).contiguous();
}

// Distinct colours for slot segmentations.
const std::vector<std::array<float, 3>>& slot_palette() {
    static const std::vector<std::array<float, 3>> p{
        {0.89f, 0.10f, 0.11f}, {0.22f, 0.49f, 0.72f}, {0.30f, 0.69f, 0.29f}, {0.60f, 0.31f, 0.64f},
        {1.00f, 0.50f, 0.00f}, {1.00f, 1.00f, 0.20f}, {0.65f, 0.34f, 0.16f}, {0.97f, 0.51f, 0.75f},
        {0.60f, 0.60f, 0.60f}, {0.40f, 0.76f, 0.65f}, {0.55f, 0.63f, 0.80f}, {0.90f, 0.77f, 0.58f}};
    return p;
}

}  // namespace

std::optional<double> ari(const std::vector<int>& predicted, const std::vector<int>& truth, bool exclude_background) {
    if (predicted.size() != truth.size()) throw ShapeError("label maps differ in size");
    std::vector<std::pair<int, int>> pairs;
    for (std::size_t i = 0; i < truth.size(); ++i)
        if (!exclude_background || truth[i] != 0) pairs.emplace_back(truth[i], predicted[i]);
    if (pairs.empty()) return std::nullopt;

    std::vector<int> true_ids, pred_ids;
    for (auto [t, p] : pairs) {
        true_ids.push_back(t);
        pred_ids.push_back(p);
    }
    auto compact = [](std::vector<int>& ids) {
        std::vector<int> u = ids;
        std::sort(u.begin(), u.end());
        u.erase(std::unique(u.begin(), u.end()), u.end());
        for (auto& v : ids) v = static_cast<int>(std::lower_bound(u.begin(), u.end(), v) - u.begin());
        return static_cast<Eigen::Index>(u.size());
    };
    const auto rows = compact(true_ids);
    const auto cols = compact(pred_ids);
    Eigen::MatrixXd table = Eigen::MatrixXd::Zero(rows, cols);
    for (std::size_t i = 0; i < true_ids.size(); ++i) table(true_ids[i], pred_ids[i]) += 1.0;

    const double n = static_cast<double>(pairs.size());
    const double index = table.unaryExpr([](double v) { return choose2(v); }).sum();
    const double a = table.rowwise().sum().unaryExpr([](double v) { return choose2(v); }).sum();
    const double b = table.colwise().sum().unaryExpr([](double v) { return choose2(v); }).sum();
    const double expected = n > 1.0 ? a * b / choose2(n) : 0.0;
    const double maximum = 0.5 * (a + b);
    // Both partitions trivial (one cluster or all singletons): identical by construction.
    if (maximum == expected) return 1.0;
    return (index - expected) / (maximum - expected);
}

std::vector<int> argmax_labels(const torch::Tensor& pi) {
    const auto p = pi.dim() == 4 ? pi[0] : pi;
    const auto labels = p.argmax(0).flatten().to(torch::kInt32).contiguous();
    return {labels.data_ptr<int>(), labels.data_ptr<int>() + labels.numel()};
}

double mse(const torch::Tensor& x, const torch::Tensor& reconstruction) {
    if (x.sizes() != reconstruction.sizes()) throw ShapeError("mse operands differ in shape");
    return (x.to(torch::kFloat64) - reconstruction.to(torch::kFloat64)).square().mean().item<double>();
}

MatchResult hungarian_match(const Eigen::MatrixXd& iou) {
    const Eigen::Index g = iou.rows();
    const Eigen::Index k = iou.cols();
    if (g > k) throw ShapeError("more ground-truth objects than slots");
    MatchResult r;
    r.iou = iou;
    r.assignment.assign(static_cast<std::size_t>(g), -1);
    if (g == 0) return r;

    // Shortest augmenting paths with row/column potentials; cost = -iou,
    // 1-based with column 0 as the virtual source.
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<std::size_t>(g + 1), 0.0), v(static_cast<std::size_t>(k + 1), 0.0);
    std::vector<Eigen::Index> owner(static_cast<std::size_t>(k + 1), 0), way(static_cast<std::size_t>(k + 1), 0);
    for (Eigen::Index row = 1; row <= g; ++row) {
        owner[0] = row;
        Eigen::Index col0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(k + 1), inf);
        std::vector<char> used(static_cast<std::size_t>(k + 1), 0);
        do {
            used[static_cast<std::size_t>(col0)] = 1;
            const Eigen::Index row0 = owner[static_cast<std::size_t>(col0)];
            double delta = inf;
            Eigen::Index col1 = 0;
            for (Eigen::Index j = 1; j <= k; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                const double cur = -iou(row0 - 1, j - 1) - u[static_cast<std::size_t>(row0)] - v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = col0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    col1 = j;
                }
            }
            for (Eigen::Index j = 0; j <= k; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(owner[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            col0 = col1;
        } while (owner[static_cast<std::size_t>(col0)] != 0);
        do {
            const Eigen::Index col1 = way[static_cast<std::size_t>(col0)];
            owner[static_cast<std::size_t>(col0)] = owner[static_cast<std::size_t>(col1)];
            col0 = col1;
        } while (col0 != 0);
    }
    for (Eigen::Index j = 1; j <= k; ++j)
        if (owner[static_cast<std::size_t>(j)] != 0)
            r.assignment[static_cast<std::size_t>(owner[static_cast<std::size_t>(j)] - 1)] = static_cast<int>(j - 1);
    for (Eigen::Index row = 0; row < g; ++row) r.total += iou(row, r.assignment[static_cast<std::size_t>(row)]);
    return r;
}

Eigen::MatrixXd object_slot_iou(const Scene& scene, const std::vector<int>& predicted, int64_t slots) {
    const auto g = static_cast<Eigen::Index>(scene.num_objects());
    const std::size_t n = scene.num_pixels();
    if (predicted.size() != n) throw ShapeError("label map does not match scene size");
    Eigen::MatrixXd inter = Eigen::MatrixXd::Zero(g, slots);
    Eigen::VectorXd object_area = Eigen::VectorXd::Zero(g);
    Eigen::VectorXd slot_area = Eigen::VectorXd::Zero(slots);
    for (std::size_t p = 0; p < n; ++p) {
        const int s = predicted[p];
        slot_area(s) += 1.0;
        for (Eigen::Index o = 0; o < g; ++o) {
            if (!scene.true_masks[static_cast<std::size_t>(o + 1) * n + p]) continue;
            object_area(o) += 1.0;
            inter(o, s) += 1.0;
        }
    }
    Eigen::MatrixXd iou = Eigen::MatrixXd::Zero(g, slots);
    for (Eigen::Index o = 0; o < g; ++o)
        for (Eigen::Index s = 0; s < slots; ++s) {
            const double uni = object_area(o) + slot_area(s) - inter(o, s);
            iou(o, s) = uni > 0.0 ? inter(o, s) / uni : 0.0;
        }
    return iou;
}

EvalReport evaluate(EfficientMorl& model, const DatasetView& data, const EvalOptions& options) {
    EvalReport report;
    report.refinement_steps = options.refinement_steps;
    report.slots = model->config.slots;
    const std::size_t total = options.max_scenes ? std::min(options.max_scenes, data.size()) : data.size();
    model->eval();
    double ari_sum = 0.0, mse_sum = 0.0, nll_sum = 0.0;
    for (std::size_t begin = 0, batch = 0; begin < total; begin += static_cast<std::size_t>(options.batch_size), ++batch) {
        const std::size_t end = std::min(total, begin + static_cast<std::size_t>(options.batch_size));
        std::vector<Scene> scenes;
        for (std::size_t i = begin; i < end; ++i) scenes.push_back(data.at(i));
        const auto images = images_to_tensor(scenes);
        auto gen = at::make_generator<at::CPUGeneratorImpl>(step_seed(options.seed, static_cast<int64_t>(batch)));
        const auto noise = draw_noise(model->config, images.size(0), options.refinement_steps, gen);
        const auto r = model->forward(images, noise, ForwardMode::Eval);

        torch::NoGradGuard no_grad;
        const auto& out = r.final_output();
        const auto pi = out.pi.detach();
        const auto recon = out.reconstruction().detach();
        const auto nll = r.trace.losses.back().nll.detach();
        const auto mu = r.representation().mu.detach();
        for (std::size_t i = 0; i < scenes.size(); ++i) {
            const auto idx = static_cast<int64_t>(i);
            SceneResult s;
            s.pi = pi[idx].clone();
            s.recon = recon[idx].clone();
            s.mu = mu[idx].clone();
            s.ari = ari(argmax_labels(s.pi), scenes[i].label_map(), true);
            s.mse = mse(images[idx], s.recon);
            s.nll = nll[idx].item<double>();
            if (s.ari) {
                ari_sum += *s.ari;
                ++report.ari_scored;
            } else {
                ++report.ari_skipped;
            }
            mse_sum += s.mse;
            nll_sum += s.nll;
            report.scenes.push_back(std::move(s));
        }
    }
    if (report.ari_scored) report.ari_mean = ari_sum / static_cast<double>(report.ari_scored);
    if (!report.scenes.empty()) {
        report.mse_mean = mse_sum / static_cast<double>(report.scenes.size());
        report.nll_mean = nll_sum / static_cast<double>(report.scenes.size());
    }
    return report;
}

std::vector<std::pair<double, double>> traversal_ranges(const std::vector<torch::Tensor>& means) {
    if (means.empty()) throw IndexError("no posterior means");
    const auto all = torch::cat(means, 0).reshape({-1, means.front().size(-1)}).to(torch::kFloat64);
    const auto lo = std::get<0>(all.min(0));
    const auto hi = std::get<0>(all.max(0));
    std::vector<std::pair<double, double>> out;
    for (int64_t d = 0; d < all.size(1); ++d) out.emplace_back(lo[d].item<double>(), hi[d].item<double>());
    return out;
}

std::vector<double> sweep_grid(std::pair<double, double> range, int points) {
    std::vector<double> g;
    for (int i = 0; i < points; ++i)
        g.push_back(points == 1 ? range.first
                                : range.first + (range.second - range.first) * i / static_cast<double>(points - 1));
    return g;
}

std::vector<double> activeness(EfficientMorl& model, const std::vector<torch::Tensor>& means,
                               const std::vector<std::pair<double, double>>& ranges, uint64_t seed, int points) {
    if (means.empty()) throw IndexError("no posterior means");
    torch::NoGradGuard no_grad;
    model->eval();
    const int64_t k = means.front().size(0);
    const int64_t d = means.front().size(1);
    if (static_cast<int64_t>(ranges.size()) != d) throw ShapeError("ranges do not match latent size");
    std::vector<double> score(static_cast<std::size_t>(d), 0.0);
    for (const auto& mu : means) {
        // The slot is a hash of the latent itself, so a repeated image repeats its choice.
        const auto bytes = mu.to(torch::kFloat32).contiguous();
        std::string raw(reinterpret_cast<const char*>(bytes.data_ptr<float>()), static_cast<std::size_t>(bytes.numel()) * 4);
        const auto slot = static_cast<int64_t>(scene_seed(seed, fnv1a(raw)) % static_cast<uint64_t>(k));
        for (int64_t dim = 0; dim < d; ++dim) {
            auto z = mu.unsqueeze(0).repeat({points, 1, 1});
            const auto grid = sweep_grid(ranges[static_cast<std::size_t>(dim)], points);
            for (int p = 0; p < points; ++p) z[p][slot][dim] = grid[static_cast<std::size_t>(p)];
            const auto recon = model->decode(z).reconstruction();
            score[static_cast<std::size_t>(dim)] += recon.var(0, /*unbiased=*/false).mean().item<double>();
        }
    }
    for (auto& s : score) s /= static_cast<double>(means.size());
    return score;
}

std::pair<double, double> dci_from_importance(const Eigen::MatrixXd& r) {
    if ((r.array() < 0.0).any()) throw ConfigError("importance must be non-negative");
    const double total = r.sum();
    if (total <= 0.0) return {0.0, 0.0};
    double dis = 0.0, com = 0.0;
    for (Eigen::Index i = 0; i < r.rows(); ++i) {
        const double row = r.row(i).sum();
        if (row <= 0.0) continue;
        dis += row / total * (1.0 - entropy_normalised(r.row(i).transpose() / row, r.cols()));
    }
    for (Eigen::Index j = 0; j < r.cols(); ++j) {
        const double col = r.col(j).sum();
        if (col <= 0.0) continue;
        com += col / total * (1.0 - entropy_normalised(r.col(j) / col, r.rows()));
    }
    return {dis, com};
}

DciScores dci(const Eigen::MatrixXd& latents, const Eigen::MatrixXd& factors, const std::vector<std::string>& names,
              uint64_t seed, double ridge) {
    if (latents.rows() != factors.rows()) throw ShapeError("latent and factor rows differ");
    if (static_cast<Eigen::Index>(names.size()) != factors.cols()) throw ShapeError("factor names do not match");
    const Eigen::Index n = latents.rows();
    if (n < 4) throw IndexError("DCI needs at least 4 matched rows");
    DciScores out;
    out.predictor = "ridge regression, |standardised coefficient| importances";

    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::mt19937_64 rng(seed);
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng() % (i + 1)]);
    const Eigen::Index n_train = n / 2;
    auto gather = [&](const Eigen::MatrixXd& m, Eigen::Index from, Eigen::Index count) {
        Eigen::MatrixXd s(count, m.cols());
        for (Eigen::Index i = 0; i < count; ++i) s.row(i) = m.row(order[static_cast<std::size_t>(from + i)]);
        return s;
    };
    const Eigen::MatrixXd x_train = gather(latents, 0, n_train), x_test = gather(latents, n_train, n - n_train);
    const Eigen::MatrixXd y_train = gather(factors, 0, n_train), y_test = gather(factors, n_train, n - n_train);

    const Eigen::RowVectorXd x_mean = x_train.colwise().mean();
    Eigen::RowVectorXd x_std = ((x_train.rowwise() - x_mean).array().square().colwise().mean()).sqrt();
    x_std = x_std.unaryExpr([](double s) { return s > 1e-12 ? s : 1.0; });
    const Eigen::MatrixXd xs_train = (x_train.rowwise() - x_mean).array().rowwise() / x_std.array();
    const Eigen::MatrixXd xs_test = (x_test.rowwise() - x_mean).array().rowwise() / x_std.array();
    const Eigen::MatrixXd gram =
        xs_train.transpose() * xs_train + ridge * static_cast<double>(n_train) *
                                              Eigen::MatrixXd::Identity(latents.cols(), latents.cols());
    const Eigen::LDLT<Eigen::MatrixXd> solver(gram);

    std::vector<Eigen::VectorXd> importances;
    double r2_sum = 0.0;
    for (Eigen::Index f = 0; f < factors.cols(); ++f) {
        const double y_mean = y_train.col(f).mean();
        const double y_std = std::sqrt((y_train.col(f).array() - y_mean).square().mean());
        if (y_std < 1e-8) {
            out.warnings.push_back("factor '" + names[static_cast<std::size_t>(f)] + "' is constant; excluded");
            continue;
        }
        const Eigen::VectorXd ys = (y_train.col(f).array() - y_mean) / y_std;
        const Eigen::VectorXd w = solver.solve(xs_train.transpose() * ys);
        importances.push_back(w.cwiseAbs());
        const Eigen::VectorXd pred = (xs_test * w).array() * y_std + y_mean;
        const double sse = (y_test.col(f) - pred).squaredNorm();
        const double sst = (y_test.col(f).array() - y_test.col(f).mean()).square().sum();
        r2_sum += sst > 0.0 ? std::clamp(1.0 - sse / sst, 0.0, 1.0) : 0.0;
        out.factors_used.push_back(names[static_cast<std::size_t>(f)]);
    }
    if (importances.empty()) throw ConfigError("every factor is constant");
    Eigen::MatrixXd r(latents.cols(), static_cast<Eigen::Index>(importances.size()));
    for (std::size_t f = 0; f < importances.size(); ++f) r.col(static_cast<Eigen::Index>(f)) = importances[f];
    std::tie(out.disentanglement, out.completeness) = dci_from_importance(r);
    out.informativeness = r2_sum / static_cast<double>(importances.size());
    return out;
}

MatchedLatents matched_latents(const EvalReport& report, const DatasetView& data) {
    MatchedLatents m;
    m.names = {"x", "y", "scale", "angle", "r", "g", "b", "shape"};
    std::vector<Eigen::VectorXd> lat, fac;
    for (std::size_t i = 0; i < report.scenes.size(); ++i) {
        const auto& res = report.scenes[i];
        const Scene scene = data.at(i);
        const auto k = res.pi.size(0);
        if (scene.num_objects() == 0 || static_cast<int64_t>(scene.num_objects()) > k) continue;
        const auto match = hungarian_match(object_slot_iou(scene, argmax_labels(res.pi), k));
        const auto mu = res.mu.to(torch::kFloat64).contiguous();
        for (std::size_t o = 0; o < scene.num_objects(); ++o) {
            const auto slot = match.assignment[o];
            Eigen::VectorXd z(mu.size(1));
            for (int64_t d = 0; d < mu.size(1); ++d) z(d) = mu[slot][d].item<double>();
            const auto& f = scene.factors.objects[o];
            Eigen::VectorXd y(8);
            y << f.x, f.y, f.scale, f.angle, f.color[0], f.color[1], f.color[2], static_cast<double>(f.shape_id);
            lat.push_back(z);
            fac.push_back(y);
        }
    }
    m.latents.resize(static_cast<Eigen::Index>(lat.size()), lat.empty() ? 0 : lat.front().size());
    m.factors.resize(static_cast<Eigen::Index>(fac.size()), 8);
    for (std::size_t i = 0; i < lat.size(); ++i) {
        m.latents.row(static_cast<Eigen::Index>(i)) = lat[i].transpose();
        m.factors.row(static_cast<Eigen::Index>(i)) = fac[i].transpose();
    }
    return m;
}

bool PropertyReport::all_passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const PropertyCheck& c) { return c.passed; });
}

PropertyReport property_harness(EfficientMorl& model, uint64_t seed, int64_t batch, int refinement_steps) {
    PropertyReport report;
    auto add = [&](std::string name, double dev, double tol) {
        report.checks.push_back({std::move(name), dev, tol, dev <= tol});
    };
    const auto& cfg = model->config;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    const auto images = torch::rand({batch, 3, cfg.height, cfg.width}, gen);
    const auto noise = draw_noise(cfg, batch, refinement_steps, gen);
    model->eval();

    auto diff = [](const torch::Tensor& a, const torch::Tensor& b) { return (a - b).abs().max().item<double>(); };

    {
        std::vector<int64_t> p(static_cast<std::size_t>(cfg.slots));
        std::iota(p.begin(), p.end(), int64_t{0});
        std::rotate(p.begin(), p.begin() + 1, p.end());
        const auto perm = torch::tensor(p, torch::kLong);
        const auto a = model->forward(images, noise, ForwardMode::Eval);
        const auto b = model->forward(images, noise.permuted(perm), ForwardMode::Eval);
        double dev = 0.0;
        for (std::size_t l = 0; l < a.trajectory.lambda.size(); ++l) {
            dev = std::max(dev, diff(b.trajectory.lambda[l].mu, permute_slots(a.trajectory.lambda[l].mu, perm)));
            dev = std::max(dev, diff(b.trajectory.lambda[l].sigma, permute_slots(a.trajectory.lambda[l].sigma, perm)));
            dev = std::max(dev, diff(b.trajectory.z[l].z, permute_slots(a.trajectory.z[l].z, perm)));
        }
        for (std::size_t i = 0; i < a.trace.lambda.size(); ++i) {
            dev = std::max(dev, diff(b.trace.lambda[i].mu, permute_slots(a.trace.lambda[i].mu, perm)));
            dev = std::max(dev, diff(b.trace.lambda[i].sigma, permute_slots(a.trace.lambda[i].sigma, perm)));
            dev = std::max(dev, diff(b.trace.losses[i].output.pi, permute_slots(a.trace.losses[i].output.pi, perm)));
            dev = std::max(dev, diff(b.trace.losses[i].output.y, permute_slots(a.trace.losses[i].output.y, perm)));
        }
        add("slot_equivariance", dev, 1e-6);

        double simplex = 0.0;
        for (const auto& loss : a.trace.losses) {
            simplex = std::max(simplex, diff(loss.output.pi.sum(1), torch::ones_like(loss.output.pi.sum(1))));
            simplex = std::max(simplex, std::max(0.0, -loss.output.pi.min().item<double>()));
        }
        add("mask_simplex", simplex, 1e-6);
    }
    {
        torch::NoGradGuard no_grad;
        const auto emb = model->encoder->forward(images);
        const auto tokens_perm = torch::randperm(emb.tokens.size(1), gen, torch::kLong);
        const auto a = model->inference->forward(emb.tokens, noise.bottom_up);
        const auto b = model->inference->forward(emb.tokens.index_select(1, tokens_perm), noise.bottom_up);
        add("token_invariance", std::max(diff(a.top().mu, b.top().mu), diff(a.top().sigma, b.top().sigma)), 1e-5);
    }
    {
        // Silence the refiner heads on a snapshot, run, then restore.
        auto& ref = model->refiner;
        std::vector<torch::Tensor> saved;
        for (auto& p : ref->parameters()) saved.push_back(p.detach().clone());
        ref->silence_output_heads();
        const auto r = model->forward(images, noise, ForwardMode::Eval);
        double dev = 0.0;
        for (const auto& l : r.trace.lambda) {
            dev = std::max(dev, diff(l.mu, r.trace.lambda.front().mu));
            dev = std::max(dev, diff(l.sigma, r.trace.lambda.front().sigma));
        }
        torch::NoGradGuard no_grad;
        auto params = ref->parameters();
        for (std::size_t i = 0; i < params.size(); ++i) params[i].copy_(saved[i]);
        add("identity_refinement", dev, 0.0);
    }
    return report;
}

BenchReport bench(EfficientMorl& model, const std::vector<int>& steps, int passes, int warmup, int64_t batch_size,
                  uint64_t seed) {
    using clock = std::chrono::steady_clock;
    BenchReport report;
    report.batch_size = batch_size;
    report.parameters = model->parameter_count();
    report.passes = passes;
    report.warmup = warmup;
    const auto& cfg = model->config;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    const auto images = torch::rand({batch_size, 3, cfg.height, cfg.width}, gen);
    for (int steps_i : steps) {
        BenchRow row;
        row.refinement_steps = steps_i;
        const auto noise = draw_noise(cfg, batch_size, steps_i, gen);
        model->eval();
        for (int i = 0; i < warmup; ++i) model->forward(images, noise, ForwardMode::Eval);
        const auto calls0 = model->decoder->invocations;
        auto t0 = clock::now();
        for (int i = 0; i < passes; ++i) model->forward(images, noise, ForwardMode::Eval);
        auto t1 = clock::now();
        row.forward_ms = std::chrono::duration<double, std::milli>(t1 - t0).count() / passes;
        row.decoder_calls_per_forward =
            static_cast<double>(model->decoder->invocations - calls0) / static_cast<double>(passes);

        model->train();
        auto train_pass = [&] {
            model->zero_grad();
            const auto r = model->forward(images, noise, ForwardMode::Train);
            std::vector<torch::Tensor> losses;
            for (std::size_t i = 1; i < r.trace.losses.size(); ++i) losses.push_back(r.trace.losses[i].total().mean());
            discounted_total(r.stage1.total().mean(), losses).backward();
        };
        for (int i = 0; i < warmup; ++i) train_pass();
        t0 = clock::now();
        for (int i = 0; i < passes; ++i) train_pass();
        t1 = clock::now();
        row.forward_backward_ms = std::chrono::duration<double, std::milli>(t1 - t0).count() / passes;
        model->zero_grad();
        report.rows.push_back(row);
    }
    model->eval();
    return report;
}

void write_png(const std::filesystem::path& path, const torch::Tensor& image) {
    if (image.dim() != 3 || image.size(2) != 3 || image.scalar_type() != torch::kUInt8)
        throw ShapeError("write_png expects an [H, W, 3] uint8 tensor");
    const auto img = image.contiguous();
    FILE* fp = std::fopen(path.string().c_str(), "wb");
    if (!fp) throw IoError("cannot open " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("png encoding failed for " + path.string());
    }
    png_init_io(png, fp);
    const auto h = static_cast<png_uint_32>(img.size(0));
    const auto w = static_cast<png_uint_32>(img.size(1));
    png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    auto* data = img.data_ptr<uint8_t>();
    for (png_uint_32 row = 0; row < h; ++row) png_write_row(png, data + static_cast<std::size_t>(row) * w * 3);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

torch::Tensor decomposition_grid(const torch::Tensor& images, const std::vector<SceneResult>& results) {
    if (images.size(0) != static_cast<int64_t>(results.size())) throw ShapeError("one result per image required");
    std::vector<torch::Tensor> rows;
    for (std::size_t i = 0; i < results.size(); ++i) {
        const auto& r = results[i];
        const int64_t k = r.pi.size(0);
        std::vector<torch::Tensor> tiles{images[static_cast<int64_t>(i)], r.recon};
        auto seg = torch::zeros_like(r.recon);
        const auto labels = r.pi.argmax(0);
        for (int64_t s = 0; s < k; ++s) {
            const auto& c = slot_palette()[static_cast<std::size_t>(s) % slot_palette().size()];
            const auto m = (labels == s).to(torch::kFloat32);
            for (int ch = 0; ch < 3; ++ch) seg[ch] += m * c[static_cast<std::size_t>(ch)];
        }
        tiles.push_back(seg);
        for (int64_t s = 0; s < k; ++s) {
            // Each component over white, weighted by its mask.
            const auto m = r.pi[s].unsqueeze(0);
            tiles.push_back(m * r.recon + (1.0 - m));
        }
        rows.push_back(torch::cat(tiles, 2));
    }
    return to_uint8_hwc(torch::cat(rows, 1));
}

torch::Tensor traversal_grid(EfficientMorl& model, const torch::Tensor& mu, int64_t slot,
                             const std::vector<int64_t>& dims, const std::vector<std::pair<double, double>>& ranges,
                             int points) {
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> rows;
    for (auto d : dims) {
        auto z = mu.unsqueeze(0).repeat({points, 1, 1});
        const auto grid = sweep_grid(ranges.at(static_cast<std::size_t>(d)), points);
        for (int p = 0; p < points; ++p) z[p][slot][d] = grid[static_cast<std::size_t>(p)];
        const auto recon = model->decode(z).reconstruction();
        std::vector<torch::Tensor> tiles;
        for (int p = 0; p < points; ++p) tiles.push_back(recon[p]);
        rows.push_back(torch::cat(tiles, 2));
    }
    return to_uint8_hwc(torch::cat(rows, 1));
}

}  // namespace emorl
