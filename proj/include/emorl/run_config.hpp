#ifndef EMORL_RUN_CONFIG_HPP
#define EMORL_RUN_CONFIG_HPP

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "emorl/scene_data.hpp"
#include "emorl/trainer.hpp"

namespace emorl {

/// Built-in base document for "tetromino" or "sprites".
nlohmann::json preset_document(const std::string& name);

/// Reads a config file, resolving its "preset" key (a built-in name or a
/// path relative to the file) and merging the file over the base.
nlohmann::json load_config_document(const std::filesystem::path& path);

/// Applies "a.b.c=value"; value is parsed as JSON when possible, else taken
/// as a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

struct DataSettings {
    std::filesystem::path path;
    GeneratorPreset preset;
    std::size_t count = 0;
    uint64_t seed = 0;
    std::size_t n_train = 0;
    std::size_t n_test = 0;
};

struct EvalSettings {
    std::vector<int> refinement_steps{0};
    int64_t batch_size = 16;
    std::size_t max_scenes = 0;
    int64_t slots = 0;               // 0 = as trained
    std::filesystem::path data;      // empty = the run's own test split
    std::size_t latent_scenes = 100;  // activeness / traversal sample
    uint64_t seed = 0;
    std::size_t grid_scenes = 8;
};

struct RunConfig {
    TrainConfig train;
    DataSettings data;
    EvalSettings eval;
    std::filesystem::path out = "runs/default";
    int64_t log_every = 50;
    int64_t checkpoint_every = 1000;
    int threads = 1;
    int bench_passes = 20;
    int bench_warmup = 5;
    bool negative_control = false;
    nlohmann::json document;

    [[nodiscard]] uint64_t hash() const { return config_hash(train); }
    [[nodiscard]] std::filesystem::path checkpoint_path() const { return out / "checkpoint.pt"; }
};

/// Typed view of a merged document; throws ConfigError on unknown keys or
/// bad values.
RunConfig parse_run_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = ".");

/// Generator preset with the document's overrides applied.
GeneratorPreset scene_preset_from(const nlohmann::json& data);

}  // namespace emorl

#endif  // EMORL_RUN_CONFIG_HPP
