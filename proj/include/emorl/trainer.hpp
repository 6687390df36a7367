#ifndef EMORL_TRAINER_HPP
#define EMORL_TRAINER_HPP

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "emorl/model.hpp"
#include "emorl/model_config.hpp"
#include "emorl/objective.hpp"
#include "emorl/scene_data.hpp"

namespace emorl {

struct LrSchedule {
    double base = 4e-4;
    int64_t warmup = 10000;
    double half_life = 100000.0;
};

/// Linear warm-up from 0 to base over `warmup` steps, then halving every `half_life`.
double lr_at(int64_t step, const LrSchedule& schedule);

struct CurriculumEntry {
    int64_t step = 0;
    int refinement_steps = 3;
    bool operator==(const CurriculumEntry&) const = default;
};

/// I of the last entry with entry.step <= step.
int current_I(int64_t step, const std::vector<CurriculumEntry>& curriculum);

struct TrainConfig {
    ModelConfig model;
    int64_t batch_size = 32;
    int64_t total_steps = 30000;
    LrSchedule lr;
    double grad_clip = 5.0;
    std::vector<CurriculumEntry> curriculum{{0, 3}};
    bool geco = false;
    /// GECO target in nats per image channel-value; scaled by 3 H W.
    double geco_nats_per_value = 2.2;
    uint64_t seed = 0;

    void validate() const;
    [[nodiscard]] double geco_threshold_value() const {
        return geco_threshold(geco_nats_per_value, 3 * model.height * model.width);
    }
};

TrainConfig tetromino_train_preset();
TrainConfig sprites_train_preset();

/// Stable text form of every field, and its 64-bit FNV-1a hash.
std::string canonical_string(const TrainConfig& config);
uint64_t fnv1a(const std::string& text);
inline uint64_t config_hash(const TrainConfig& config) { return fnv1a(canonical_string(config)); }

/// Batch-mean loss terms of one step (doubles, for logging).
struct LossBreakdown {
    int64_t step = 0;
    int refinement_steps = 0;
    double nll = 0.0;
    std::vector<double> kl;                   // per layer
    std::vector<double> refinement_nll;       // per step 1..I
    std::vector<double> refinement_kl;
    std::vector<double> update_norms;
    double total = 0.0;  // the minimised quantity (GECO-wrapped when enabled)
    double elbo = 0.0;   // -(nll + sum kl) of stage 1
    double zeta = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;  // before clipping

    [[nodiscard]] std::string json() const;
};

/// Global-norm clipping; returns the norm before clipping.
double clip_gradients(const std::vector<torch::Tensor>& parameters, double max_norm);

/// Scenes -> float images in [0, 1], [B, 3, H, W].
torch::Tensor images_to_tensor(const std::vector<Scene>& scenes);

/// Deterministic batch schedule: each epoch is a seeded shuffle of the view.
std::vector<std::size_t> batch_indices(uint64_t seed, int64_t step, int64_t batch_size, std::size_t dataset_size);

/// Seed for the reparameterisation noise of a given step.
uint64_t step_seed(uint64_t seed, int64_t step);

class Trainer {
public:
    explicit Trainer(TrainConfig config);

    /// One optimisation step on a batch of images.
    LossBreakdown train_step(const torch::Tensor& images);
    LossBreakdown train_step(const DatasetView& data);

    void save(const std::filesystem::path& path);
    /// Refuses checkpoints written under a different configuration.
    void load(const std::filesystem::path& path);

    [[nodiscard]] const TrainConfig& config() const { return config_; }
    [[nodiscard]] int64_t step() const { return step_; }
    [[nodiscard]] const GecoState& geco() const { return geco_; }
    [[nodiscard]] uint64_t hash() const { return hash_; }
    EfficientMorl& model() { return model_; }

private:
    TrainConfig config_;
    uint64_t hash_;
    EfficientMorl model_{nullptr};
    std::unique_ptr<torch::optim::Adam> optimizer_;
    GecoState geco_;
    int64_t step_ = 0;
};

/// Writes only the model weights and the configuration hash.
void save_model(EfficientMorl& model, uint64_t hash, const std::filesystem::path& path);
/// Loads weights from a trainer checkpoint or save_model file; throws
/// MismatchError if the stored hash differs from `hash`.
void load_model(EfficientMorl& model, uint64_t hash, const std::filesystem::path& path);

}  // namespace emorl

#endif  // EMORL_TRAINER_HPP
