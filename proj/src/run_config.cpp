#include "emorl/run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "emorl/errors.hpp"

using nlohmann::json;

namespace emorl {

namespace {

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
    if (!obj.is_object()) throw ConfigError(where + " must be an object");
    for (const auto& [key, value] : obj.items())
        if (!allowed.contains(key)) throw ConfigError("unknown config key '" + where + "." + key + "'");
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
    }
}

json model_json(const ModelConfig& m) {
    return {{"height", m.height},
            {"width", m.width},
            {"slots", m.slots},
            {"latent_dim", m.latent_dim},
            {"layers", m.layers},
            {"encoder_channels", m.encoder_channels},
            {"decoder", to_string(m.decoder)},
            {"decoder_channels", m.decoder_channels},
            {"likelihood", to_string(m.likelihood)},
            {"sigma_lik", m.sigma_lik},
            {"prior", to_string(m.prior)},
            {"attention_eps", m.attention_eps},
            {"prior_hidden", m.prior_hidden},
            {"refine_hidden", m.refine_hidden}};
}

json train_json(const TrainConfig& t) {
    json curriculum = json::array();
    for (const auto& e : t.curriculum) curriculum.push_back({e.step, e.refinement_steps});
    return {{"batch_size", t.batch_size},
            {"total_steps", t.total_steps},
            {"lr", {{"base", t.lr.base}, {"warmup", t.lr.warmup}, {"half_life", t.lr.half_life}}},
            {"grad_clip", t.grad_clip},
            {"curriculum", curriculum},
            {"geco", t.geco},
            {"geco_nats_per_value", t.geco_nats_per_value}};
}

}  // namespace

json preset_document(const std::string& name) {
    TrainConfig t;
    json data;
    if (name == "tetromino") {
        t = tetromino_train_preset();
        data = {{"path", "data/tetromino.bin"}, {"scene_preset", "tetromino"}, {"count", 10000},
                {"seed", 1},                    {"n_train", 9680},               {"n_test", 320}};
    } else if (name == "sprites") {
        t = sprites_train_preset();
        data = {{"path", "data/sprites.bin"}, {"scene_preset", "sprites"}, {"count", 10000},
                {"seed", 1},                  {"n_train", 9680},             {"n_test", 320}};
    } else {
        throw ConfigError("unknown preset '" + name + "' (expected tetromino or sprites)");
    }
    return {{"seed", 0},
            {"model", model_json(t.model)},
            {"train", train_json(t)},
            {"data", data},
            {"eval",
             {{"I", {0, 1, 3}},
              {"batch_size", 16},
              {"max_scenes", 0},
              {"K", 0},
              {"data", ""},
              {"latent_scenes", 100},
              {"seed", 0},
              {"grid_scenes", 8}}},
            {"out", "runs/" + name},
            {"log_every", 50},
            {"checkpoint_every", 1000},
            {"threads", 1},
            {"bench", {{"passes", 20}, {"warmup", 5}}},
            {"check", {{"negative_control", false}}}};
}

json load_config_document(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path.string());
    json doc;
    try {
        doc = json::parse(in, nullptr, true, /*ignore_comments=*/true);
    } catch (const json::exception& e) {
        throw ConfigError("invalid JSON in " + path.string() + ": " + e.what());
    }
    if (!doc.is_object()) throw ConfigError("config root must be an object");
    if (!doc.contains("preset")) return doc;
    const auto preset = doc["preset"].get<std::string>();
    json base;
    if (preset.ends_with(".json"))
        base = load_config_document(path.parent_path() / preset);
    else
        base = preset_document(preset);
    doc.erase("preset");
    base.merge_patch(doc);
    return base;
}

void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
    const auto key = assignment.substr(0, eq);
    const auto text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::exception&) {
        value = text;
    }
    json* node = &doc;
    std::stringstream parts(key);
    std::string part;
    std::vector<std::string> path;
    while (std::getline(parts, part, '.')) path.push_back(part);
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
        if (!node->is_object()) throw ConfigError("cannot descend into '" + path[i] + "' in " + key);
        node = &(*node)[path[i]];
    }
    (*node)[path.back()] = value;
}

GeneratorPreset scene_preset_from(const json& data) {
    auto preset = preset_by_name(data.value("scene_preset", std::string("tetromino")));
    read(data, "min_objects", preset.min_objects);
    read(data, "max_objects", preset.max_objects);
    preset.validate();
    return preset;
}

RunConfig parse_run_config(const json& doc, const std::filesystem::path& base_dir) {
    check_keys(doc, {"seed", "model", "train", "data", "eval", "out", "log_every", "checkpoint_every", "threads",
                     "bench", "check"},
               "config");
    RunConfig rc;
    rc.document = doc;
    auto& t = rc.train;
    read(doc, "seed", t.seed);

    if (doc.contains("model")) {
        const auto& m = doc["model"];
        check_keys(m, {"height", "width", "slots", "latent_dim", "layers", "encoder_channels", "decoder",
                       "decoder_channels", "likelihood", "sigma_lik", "prior", "attention_eps", "prior_hidden",
                       "refine_hidden"},
                   "model");
        auto& mc = t.model;
        read(m, "height", mc.height);
        read(m, "width", mc.width);
        read(m, "slots", mc.slots);
        read(m, "latent_dim", mc.latent_dim);
        read(m, "layers", mc.layers);
        read(m, "encoder_channels", mc.encoder_channels);
        read(m, "decoder_channels", mc.decoder_channels);
        read(m, "sigma_lik", mc.sigma_lik);
        read(m, "attention_eps", mc.attention_eps);
        read(m, "prior_hidden", mc.prior_hidden);
        read(m, "refine_hidden", mc.refine_hidden);
        if (m.contains("decoder")) mc.decoder = parse_decoder_kind(m["decoder"].get<std::string>());
        if (m.contains("likelihood")) mc.likelihood = parse_likelihood(m["likelihood"].get<std::string>());
        if (m.contains("prior")) mc.prior = parse_prior_variant(m["prior"].get<std::string>());
    }
    if (doc.contains("train")) {
        const auto& tr = doc["train"];
        check_keys(tr, {"batch_size", "total_steps", "lr", "grad_clip", "curriculum", "geco", "geco_nats_per_value"},
                   "train");
        read(tr, "batch_size", t.batch_size);
        read(tr, "total_steps", t.total_steps);
        read(tr, "grad_clip", t.grad_clip);
        read(tr, "geco", t.geco);
        read(tr, "geco_nats_per_value", t.geco_nats_per_value);
        if (tr.contains("lr")) {
            check_keys(tr["lr"], {"base", "warmup", "half_life"}, "train.lr");
            read(tr["lr"], "base", t.lr.base);
            read(tr["lr"], "warmup", t.lr.warmup);
            read(tr["lr"], "half_life", t.lr.half_life);
        }
        if (tr.contains("curriculum")) {
            t.curriculum.clear();
            for (const auto& e : tr["curriculum"]) {
                if (!e.is_array() || e.size() != 2) throw ConfigError("curriculum entries are [step, I] pairs");
                t.curriculum.push_back({e[0].get<int64_t>(), e[1].get<int>()});
            }
        }
    }
    if (doc.contains("data")) {
        const auto& d = doc["data"];
        check_keys(d, {"path", "scene_preset", "count", "seed", "n_train", "n_test", "min_objects", "max_objects"},
                   "data");
        rc.data.path = base_dir / d.value("path", std::string("data/dataset.bin"));
        rc.data.preset = scene_preset_from(d);
        read(d, "count", rc.data.count);
        read(d, "seed", rc.data.seed);
        read(d, "n_train", rc.data.n_train);
        read(d, "n_test", rc.data.n_test);
    }
    if (doc.contains("eval")) {
        const auto& e = doc["eval"];
        check_keys(e, {"I", "batch_size", "max_scenes", "K", "data", "latent_scenes", "seed", "grid_scenes"}, "eval");
        if (e.contains("I")) {
            rc.eval.refinement_steps.clear();
            if (e["I"].is_array())
                for (const auto& v : e["I"]) rc.eval.refinement_steps.push_back(v.get<int>());
            else
                rc.eval.refinement_steps.push_back(e["I"].get<int>());
        }
        read(e, "batch_size", rc.eval.batch_size);
        read(e, "max_scenes", rc.eval.max_scenes);
        read(e, "K", rc.eval.slots);
        read(e, "latent_scenes", rc.eval.latent_scenes);
        read(e, "seed", rc.eval.seed);
        read(e, "grid_scenes", rc.eval.grid_scenes);
        const auto data = e.value("data", std::string());
        if (!data.empty()) rc.eval.data = base_dir / data;
    }
    if (doc.contains("out")) rc.out = base_dir / doc["out"].get<std::string>();
    read(doc, "log_every", rc.log_every);
    read(doc, "checkpoint_every", rc.checkpoint_every);
    read(doc, "threads", rc.threads);
    if (doc.contains("bench")) {
        check_keys(doc["bench"], {"passes", "warmup"}, "bench");
        read(doc["bench"], "passes", rc.bench_passes);
        read(doc["bench"], "warmup", rc.bench_warmup);
    }
    if (doc.contains("check")) {
        check_keys(doc["check"], {"negative_control"}, "check");
        read(doc["check"], "negative_control", rc.negative_control);
    }
    if (rc.log_every < 1 || rc.checkpoint_every < 1) throw ConfigError("log_every and checkpoint_every must be >= 1");
    if (rc.threads < 1) throw ConfigError("threads must be >= 1");
    for (int i : rc.eval.refinement_steps)
        if (i < 0) throw ConfigError("eval I must be >= 0");
    t.validate();
    return rc;
}

}  // namespace emorl
