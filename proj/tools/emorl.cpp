// emorl: dataset generation, training, evaluation and diagnostics.

#include <torch/torch.h>

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "emorl/errors.hpp"
#include "emorl/evaluation.hpp"
#include "emorl/run_config.hpp"
#include "emorl/scene_data.hpp"
#include "emorl/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace emorl;

namespace {

struct Flags {
    std::string config;
    std::vector<std::string> sets;
    std::optional<int> I;
    std::optional<int64_t> K;
    std::optional<uint64_t> seed;
    std::optional<std::string> out;
};

std::string hex(uint64_t v) {
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << v;
    return s.str();
}

std::string file_hash(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return hex(fnv1a(bytes));
}

// Applies the generic flags. Their meaning depends on the command: --seed is
// the run seed for train, the dataset seed for gen-data and the evaluation
// seed elsewhere; --I and --K set the training curriculum/slots for train and
// the test-time values elsewhere. --out is the run directory for train, the
// dataset directory for gen-data and the artifact directory elsewhere (the
// checkpoint is always read from the run directory).
RunConfig resolve(const Flags& f, const std::string& command) {
    json doc = load_config_document(f.config);
    for (const auto& s : f.sets) apply_override(doc, s);
    const bool training = command == "train";
    if (f.seed) {
        if (command == "gen-data")
            doc["data"]["seed"] = *f.seed;
        else if (training)
            doc["seed"] = *f.seed;
        else
            doc["eval"]["seed"] = *f.seed;
    }
    if (f.I) {
        if (training)
            doc["train"]["curriculum"] = json::array({json::array({0, *f.I})});
        else
            doc["eval"]["I"] = json::array({*f.I});
    }
    if (f.K) {
        if (training)
            doc["model"]["slots"] = *f.K;
        else
            doc["eval"]["K"] = *f.K;
    }
    if (f.out && training) doc["out"] = *f.out;
    if (f.out && command == "gen-data") {
        const fs::path current = doc["data"].value("path", std::string("dataset.bin"));
        doc["data"]["path"] = (fs::path(*f.out) / current.filename()).string();
    }
    return parse_run_config(doc);
}

class Report {
public:
    Report(const fs::path& path, const RunConfig& rc) : out_(path) {
        if (!out_) throw IoError("cannot write " + path.string());
        line("config_hash=" + hex(rc.hash()));
    }
    void line(const std::string& text) {
        out_ << text << '\n';
        std::cout << text << '\n';
    }

private:
    std::ofstream out_;
};

std::string fmt(double v) {
    std::ostringstream s;
    s << std::setprecision(6) << v;
    return s.str();
}

void check_geometry(const DatasetReader& reader, const ModelConfig& model) {
    const auto& h = reader.header();
    if (h.height != model.height || h.width != model.width)
        throw ConfigError("dataset is " + std::to_string(h.height) + "x" + std::to_string(h.width) +
                          " but the model expects " + std::to_string(model.height) + "x" +
                          std::to_string(model.width));
}

std::unique_ptr<DatasetReader> open_dataset(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("missing dataset " + path.string() + " (run gen-data first)");
    return std::make_unique<DatasetReader>(path);
}

// Test data: the eval.data file in full, or the run's own held-out split.
DatasetView test_view(const RunConfig& rc, std::unique_ptr<DatasetReader>& reader) {
    if (!rc.eval.data.empty()) {
        reader = open_dataset(rc.eval.data);
        return DatasetView(reader.get(), 0, reader->size());
    }
    reader = open_dataset(rc.data.path);
    return split_dataset(*reader, rc.data.n_train, rc.data.n_test).second;
}

EfficientMorl trained_model(const RunConfig& rc) {
    EfficientMorl model(rc.train.model);
    const auto ckpt = rc.checkpoint_path();
    if (!fs::exists(ckpt)) throw IoError("missing checkpoint " + ckpt.string() + " (run train first)");
    load_model(model, rc.hash(), ckpt);
    if (rc.eval.slots > 0) model->config.slots = rc.eval.slots;
    return model;
}

// A trained model when a checkpoint exists, otherwise a seeded initialisation.
EfficientMorl any_model(const RunConfig& rc, std::string& source) {
    if (fs::exists(rc.checkpoint_path())) {
        source = rc.checkpoint_path().string();
        return trained_model(rc);
    }
    torch::manual_seed(rc.eval.seed);
    source = "init(seed=" + std::to_string(rc.eval.seed) + ")";
    EfficientMorl model(rc.train.model);
    if (rc.eval.slots > 0) model->config.slots = rc.eval.slots;
    return model;
}

int max_I(const RunConfig& rc) { return *std::max_element(rc.eval.refinement_steps.begin(), rc.eval.refinement_steps.end()); }

// Commands --------------------------------------------------------------------

int cmd_gen_data(const RunConfig& rc) {
    const auto& d = rc.data;
    if (d.count == 0) throw ConfigError("data.count must be > 0");
    if (d.n_train + d.n_test > d.count) throw ConfigError("data.n_train + data.n_test exceeds data.count");
    std::vector<Scene> scenes;
    scenes.reserve(d.count);
    for (std::size_t i = 0; i < d.count; ++i) scenes.push_back(generate_scene(scene_seed(d.seed, i), d.preset));
    if (d.path.has_parent_path()) fs::create_directories(d.path.parent_path());
    write_dataset(scenes, d.path, static_cast<uint32_t>(d.preset.max_objects), d.seed, d.preset.name);
    std::cout << "dataset=" << d.path.string() << " preset=" << d.preset.name << " scenes=" << d.count
              << " seed=" << d.seed << " file_hash=" << file_hash(d.path) << '\n';
    return 0;
}

// Drops log records past the checkpoint so a resumed run appends the same
// lines an uninterrupted run would have written.
void truncate_log(const fs::path& path, int64_t step) {
    if (!fs::exists(path)) return;
    std::ifstream in(path);
    std::vector<std::string> keep;
    for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        try {
            if (json::parse(line).at("step").get<int64_t>() < step) keep.push_back(line);
        } catch (const json::exception&) {
        }
    }
    in.close();
    std::ofstream out(path, std::ios::trunc);
    for (const auto& l : keep) out << l << '\n';
}

int cmd_train(const RunConfig& rc) {
    auto reader = open_dataset(rc.data.path);
    check_geometry(*reader, rc.train.model);
    auto [train, test] = split_dataset(*reader, rc.data.n_train, rc.data.n_test);
    if (train.empty()) throw ConfigError("empty training split");
    fs::create_directories(rc.out);

    torch::manual_seed(rc.train.seed);
    Trainer trainer(rc.train);
    const auto ckpt = rc.checkpoint_path();
    if (fs::exists(ckpt)) {
        trainer.load(ckpt);
        std::cout << "resumed " << ckpt.string() << " at step " << trainer.step() << '\n';
    }
    {
        json meta = rc.document;
        meta["config_hash"] = hex(rc.hash());
        std::ofstream(rc.out / "config.json") << meta.dump(2) << '\n';
    }
    const auto log_path = rc.out / "metrics.jsonl";
    truncate_log(log_path, trainer.step());
    std::ofstream log(log_path, std::ios::app);

    const auto start = std::chrono::steady_clock::now();
    const int64_t first = trainer.step();
    while (trainer.step() < rc.train.total_steps) {
        const int64_t s = trainer.step();
        const int I = current_I(s, rc.train.curriculum);
        if (s == 0 || I != current_I(s - 1, rc.train.curriculum)) {
            log << json{{"step", s}, {"event", "curriculum"}, {"I", I}}.dump() << '\n';
            std::cout << "step " << s << ": refinement steps I=" << I << '\n';
        }
        const auto b = trainer.train_step(train);
        log << b.json() << '\n';
        if ((s + 1) % rc.log_every == 0 || s + 1 == rc.train.total_steps) {
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            std::cout << "step " << s + 1 << " total=" << fmt(b.total) << " nll=" << fmt(b.nll)
                      << " elbo=" << fmt(b.elbo) << " zeta=" << fmt(b.zeta) << " lr=" << fmt(b.lr)
                      << " s/step=" << fmt(secs / static_cast<double>(s + 1 - first)) << std::endl;
        }
        if ((s + 1) % rc.checkpoint_every == 0) {
            log.flush();
            trainer.save(ckpt);
        }
    }
    log.flush();
    trainer.save(ckpt);
    std::cout << "checkpoint=" << ckpt.string() << " step=" << trainer.step() << " config_hash=" << hex(rc.hash())
              << '\n';
    return 0;
}

int cmd_eval(const RunConfig& rc, const fs::path& out) {
    std::unique_ptr<DatasetReader> reader;
    const auto view = test_view(rc, reader);
    check_geometry(*reader, rc.train.model);
    auto model = trained_model(rc);
    fs::create_directories(out);
    Report report(out / "eval.txt", rc);
    report.line("scenes=" + std::to_string(rc.eval.max_scenes ? std::min(rc.eval.max_scenes, view.size()) : view.size()));

    const std::size_t grid_n = std::min(rc.eval.grid_scenes, view.size());
    std::vector<Scene> grid_scenes;
    for (std::size_t i = 0; i < grid_n; ++i) grid_scenes.push_back(view.at(i));

    EvalReport last;
    for (int I : rc.eval.refinement_steps) {
        EvalOptions opt;
        opt.refinement_steps = I;
        opt.seed = rc.eval.seed;
        opt.batch_size = rc.eval.batch_size;
        opt.max_scenes = rc.eval.max_scenes;
        auto r = evaluate(model, view, opt);
        report.line("I=" + std::to_string(I) + " K=" + std::to_string(r.slots) + " ari=" + fmt(r.ari_mean) +
                    " ari_scored=" + std::to_string(r.ari_scored) + " ari_skipped=" +
                    std::to_string(r.ari_skipped) + " mse=" + fmt(r.mse_mean) + " nll=" + fmt(r.nll_mean));
        if (grid_n > 0) {
            std::vector<SceneResult> head(r.scenes.begin(), r.scenes.begin() + static_cast<long>(grid_n));
            write_png(out / ("decomposition_I" + std::to_string(I) + ".png"),
                      decomposition_grid(images_to_tensor(grid_scenes), head));
        }
        if (I == max_I(rc)) last = std::move(r);
    }

    const auto matched = matched_latents(last, view);
    if (matched.latents.rows() >= 4) {
        const auto d = dci(matched.latents, matched.factors, matched.names, rc.eval.seed);
        report.line("dci_I=" + std::to_string(last.refinement_steps) + " predictor=" + d.predictor +
                    " disentanglement=" + fmt(d.disentanglement) + " completeness=" + fmt(d.completeness) +
                    " informativeness=" + fmt(d.informativeness) + " rows=" + std::to_string(matched.latents.rows()));
        for (const auto& w : d.warnings) report.line("dci_warning=" + w);
    } else {
        report.line("dci_skipped=too few matched objects");
    }
    return 0;
}

// Posterior means of the first latent_scenes test images at the largest I.
EvalReport latent_sample(EfficientMorl& model, const RunConfig& rc, const DatasetView& view) {
    EvalOptions opt;
    opt.refinement_steps = max_I(rc);
    opt.seed = rc.eval.seed;
    opt.batch_size = rc.eval.batch_size;
    opt.max_scenes = rc.eval.latent_scenes;
    return evaluate(model, view, opt);
}

std::vector<torch::Tensor> means_of(const EvalReport& r) {
    std::vector<torch::Tensor> means;
    for (const auto& s : r.scenes) means.push_back(s.mu);
    return means;
}

int cmd_activeness(const RunConfig& rc, const fs::path& out) {
    std::unique_ptr<DatasetReader> reader;
    const auto view = test_view(rc, reader);
    check_geometry(*reader, rc.train.model);
    auto model = trained_model(rc);
    fs::create_directories(out);
    const auto sample = latent_sample(model, rc, view);
    const auto means = means_of(sample);
    const auto ranges = traversal_ranges(means);
    const auto scores = activeness(model, means, ranges, rc.eval.seed);

    Report report(out / "activeness.txt", rc);
    report.line("I=" + std::to_string(sample.refinement_steps) + " scenes=" + std::to_string(means.size()) +
                " points=8");
    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
    for (auto d : order)
        report.line("dim=" + std::to_string(d) + " activeness=" + fmt(scores[d]) + " range=[" +
                    fmt(ranges[d].first) + "," + fmt(ranges[d].second) + "]");
    return 0;
}

int cmd_traverse(const RunConfig& rc, const fs::path& out) {
    std::unique_ptr<DatasetReader> reader;
    const auto view = test_view(rc, reader);
    check_geometry(*reader, rc.train.model);
    auto model = trained_model(rc);
    fs::create_directories(out);
    const auto sample = latent_sample(model, rc, view);
    if (sample.scenes.empty()) throw ConfigError("no scenes to traverse");
    const auto ranges = traversal_ranges(means_of(sample));

    // Sweep the slot with the second-largest mask area of the first scene:
    // the largest is usually the background.
    const auto& first = sample.scenes.front();
    const auto area = first.pi.sum({1, 2});
    const auto sorted = std::get<1>(area.sort(0, /*descending=*/true));
    const int64_t slot = sorted.size(0) > 1 ? sorted[1].item<int64_t>() : 0;

    std::vector<int64_t> dims(static_cast<std::size_t>(model->config.latent_dim));
    for (std::size_t d = 0; d < dims.size(); ++d) dims[d] = static_cast<int64_t>(d);
    const auto grid = traversal_grid(model, first.mu, slot, dims, ranges, 8);
    write_png(out / "traversal.png", grid);

    Report report(out / "traverse.txt", rc);
    report.line("I=" + std::to_string(sample.refinement_steps) + " scene=0 slot=" + std::to_string(slot) +
                " dims=" + std::to_string(dims.size()) + " points=8 image=" + (out / "traversal.png").string());
    return 0;
}

int cmd_bench(const RunConfig& rc, const fs::path& out) {
    std::string source;
    auto model = any_model(rc, source);
    fs::create_directories(out);
    auto steps = rc.eval.refinement_steps;
    std::sort(steps.begin(), steps.end());
    const auto b = bench(model, steps, rc.bench_passes, rc.bench_warmup, 4, rc.eval.seed);
    Report report(out / "bench.txt", rc);
    report.line("model=" + source + " parameters=" + std::to_string(b.parameters) + " batch_size=" +
                std::to_string(b.batch_size) + " passes=" + std::to_string(b.passes) + " warmup=" +
                std::to_string(b.warmup) + " threads=" + std::to_string(torch::get_num_threads()));
    for (const auto& r : b.rows)
        report.line("I=" + std::to_string(r.refinement_steps) + " forward_ms=" + fmt(r.forward_ms) +
                    " forward_backward_ms=" + fmt(r.forward_backward_ms) +
                    " decoder_calls_per_forward=" + fmt(r.decoder_calls_per_forward));
    return 0;
}

int cmd_check(const RunConfig& rc, const fs::path& out) {
    std::string source;
    auto model = any_model(rc, source);
    if (rc.negative_control) {
        torch::manual_seed(rc.eval.seed + 1);
        model->inference->layer->untie_slot_queries(
            torch::randn({model->config.slots, model->config.latent_dim}));
        source += "+untied_slot_queries";
    }
    fs::create_directories(out);
    const auto r = property_harness(model, rc.eval.seed);
    Report report(out / "check.txt", rc);
    report.line("model=" + source);
    for (const auto& c : r.checks)
        report.line("check=" + c.name + " max_deviation=" + fmt(c.max_deviation) + " tolerance=" + fmt(c.tolerance) +
                    " result=" + (c.passed ? "PASS" : "FAIL"));
    if (!r.all_passed()) {
        std::cerr << "error: property_violation: structural check failed (see " << (out / "check.txt").string()
                  << ")\n";
        return 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Object-centric scene decomposition: data, training and evaluation"};
    app.require_subcommand(1);
    Flags flags;
    const std::vector<std::pair<std::string, std::string>> commands{
        {"gen-data", "Generate a scene dataset file"},
        {"train", "Train (resumes from the run's checkpoint)"},
        {"eval", "ARI / MSE / NLL per refinement-step count, decomposition grids and DCI"},
        {"traverse", "Latent traversal grid"},
        {"activeness", "Per-dimension activeness scores"},
        {"bench", "Forward and forward+backward timing"},
        {"check", "Structural property checks"}};
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", flags.config, "JSON config file")->required();
        sub->add_option("--set", flags.sets, "Override a config key: a.b=value (repeatable)");
        sub->add_option("--I", flags.I, "Refinement steps");
        sub->add_option("--K", flags.K, "Slots");
        sub->add_option("--seed", flags.seed, "Seed");
        sub->add_option("--out", flags.out, "Output directory");
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: usage_error: " << e.what() << '\n';
        return 2;
    }
    const std::string command = app.get_subcommands().front()->get_name();
    try {
        const auto rc = resolve(flags, command);
        torch::set_num_threads(rc.threads);
        if (command == "gen-data") return cmd_gen_data(rc);
        if (command == "train") return cmd_train(rc);
        const fs::path out = flags.out ? fs::path(*flags.out) : rc.out;
        if (command == "eval") return cmd_eval(rc, out);
        if (command == "traverse") return cmd_traverse(rc, out);
        if (command == "activeness") return cmd_activeness(rc, out);
        if (command == "bench") return cmd_bench(rc, out);
        return cmd_check(rc, out);
    } catch (const ConfigError& e) {
        std::cerr << "error: usage_error: " << e.what() << '\n';
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.kind() << ": " << e.what() << '\n';
        return 1;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: config_error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::string msg = e.what();
        msg = msg.substr(0, msg.find('\n'));
        std::cerr << "error: internal_error: " << msg << '\n';
        return 1;
    }
}
