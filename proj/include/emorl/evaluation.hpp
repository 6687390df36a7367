#ifndef EMORL_EVALUATION_HPP
#define EMORL_EVALUATION_HPP

#include <torch/torch.h>

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "emorl/model.hpp"
#include "emorl/scene_data.hpp"

namespace emorl {

// Segmentation ----------------------------------------------------------------

/// Adjusted Rand index between two labelings of the same pixels. With
/// exclude_background, only pixels whose true label is non-zero count; an
/// empty foreground yields nullopt (a skip, not a score).
std::optional<double> ari(const std::vector<int>& predicted, const std::vector<int>& truth, bool exclude_background);

/// Per-pixel argmax over K of pi [K, H, W] (or [B, K, H, W] -> first image).
std::vector<int> argmax_labels(const torch::Tensor& pi);

/// Mean squared error over every pixel and channel.
double mse(const torch::Tensor& x, const torch::Tensor& reconstruction);

// Matching --------------------------------------------------------------------

struct MatchResult {
    std::vector<int> assignment;  // ground-truth row -> predicted column
    Eigen::MatrixXd iou;
    double total = 0.0;
};

/// Maximum-IOU injective assignment of G rows to K >= G columns.
MatchResult hungarian_match(const Eigen::MatrixXd& iou);

/// IOU between each ground-truth object mask and each predicted slot
/// segment (argmax labels), [G, K].
Eigen::MatrixXd object_slot_iou(const Scene& scene, const std::vector<int>& predicted, int64_t slots);

// Evaluation over a dataset ---------------------------------------------------

struct EvalOptions {
    int refinement_steps = 0;
    uint64_t seed = 0;
    int64_t batch_size = 16;
    std::size_t max_scenes = 0;  // 0 = all
};

struct SceneResult {
    std::optional<double> ari;
    double mse = 0.0;
    double nll = 0.0;
    torch::Tensor mu;     // [K, D] representation means
    torch::Tensor pi;     // [K, H, W]
    torch::Tensor recon;  // [3, H, W]
};

struct EvalReport {
    int refinement_steps = 0;
    int64_t slots = 0;
    double ari_mean = 0.0;
    std::size_t ari_scored = 0;
    std::size_t ari_skipped = 0;
    double mse_mean = 0.0;
    double nll_mean = 0.0;
    std::vector<SceneResult> scenes;
};

/// Runs the model (I refinement steps, gradient-only refinement) over the view.
EvalReport evaluate(EfficientMorl& model, const DatasetView& data, const EvalOptions& options);

// Latent analysis -------------------------------------------------------------

/// Coordinate-wise (min, max) of posterior means over every slot of every image.
std::vector<std::pair<double, double>> traversal_ranges(const std::vector<torch::Tensor>& means);

/// Evenly spaced sweep of `points` values across a range.
std::vector<double> sweep_grid(std::pair<double, double> range, int points = 8);

/// For each latent dimension: mean over images of the pixel variance across
/// a sweep of that dimension in one uniformly chosen slot.
std::vector<double> activeness(EfficientMorl& model, const std::vector<torch::Tensor>& means,
                               const std::vector<std::pair<double, double>>& ranges, uint64_t seed, int points = 8);

struct DciScores {
    double disentanglement = 0.0;
    double completeness = 0.0;
    double informativeness = 0.0;
    std::vector<std::string> factors_used;
    std::vector<std::string> warnings;
    std::string predictor;
};

/// Disentanglement and completeness of a non-negative [D latents, F factors]
/// importance matrix.
std::pair<double, double> dci_from_importance(const Eigen::MatrixXd& importance);

/// Ridge-regression DCI over matched (latent, factor) rows; 50/50 random split.
DciScores dci(const Eigen::MatrixXd& latents, const Eigen::MatrixXd& factors, const std::vector<std::string>& names,
              uint64_t seed, double ridge = 1e-3);

/// Matches slots to objects by mask IOU and returns paired rows of posterior
/// means and ground-truth factors (x, y, scale, angle, r, g, b, shape).
struct MatchedLatents {
    Eigen::MatrixXd latents;
    Eigen::MatrixXd factors;
    std::vector<std::string> names;
};
MatchedLatents matched_latents(const EvalReport& report, const DatasetView& data);

// Structural checks -------------------------------------------------------------

struct PropertyCheck {
    std::string name;
    double max_deviation = 0.0;
    double tolerance = 0.0;
    bool passed = false;
};

struct PropertyReport {
    std::vector<PropertyCheck> checks;
    [[nodiscard]] bool all_passed() const;
};

/// Slot equivariance, token invariance, mask simplex and identity refinement
/// on a live model with random inputs.
PropertyReport property_harness(EfficientMorl& model, uint64_t seed, int64_t batch = 2, int refinement_steps = 2);

// Timing ----------------------------------------------------------------------

struct BenchRow {
    int refinement_steps = 0;
    double forward_ms = 0.0;
    double forward_backward_ms = 0.0;
    double decoder_calls_per_forward = 0.0;
};

struct BenchReport {
    int64_t batch_size = 4;
    int64_t parameters = 0;
    int passes = 0;
    int warmup = 0;
    std::vector<BenchRow> rows;
};

BenchReport bench(EfficientMorl& model, const std::vector<int>& steps, int passes, int warmup, int64_t batch_size = 4,
                  uint64_t seed = 0);

// Images ----------------------------------------------------------------------

/// Writes an [H, W, 3] uint8 tensor as an 8-bit RGB PNG.
void write_png(const std::filesystem::path& path, const torch::Tensor& image);

/// Rows of: image | reconstruction | segmentation | K masked components.
torch::Tensor decomposition_grid(const torch::Tensor& images, const std::vector<SceneResult>& results);

/// Rows of sweeps: one row per listed dimension, `points` decodings each.
torch::Tensor traversal_grid(EfficientMorl& model, const torch::Tensor& mu, int64_t slot,
                             const std::vector<int64_t>& dims, const std::vector<std::pair<double, double>>& ranges,
                             int points = 8);

}  // namespace emorl

#endif  // EMORL_EVALUATION_HPP
