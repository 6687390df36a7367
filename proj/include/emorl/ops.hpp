#ifndef EMORL_OPS_HPP
#define EMORL_OPS_HPP

#include <torch/torch.h>

namespace emorl {

inline constexpr double kSoftplusClamp = 80.0;
inline constexpr double kSoftplusFloor = 1e-5;

/// log(1 + exp(min(o, 80))) + 1e-5. Strictly positive, finite for any input.
torch::Tensor softplus_clamped(const torch::Tensor& o);
double softplus_clamped(double o);

/// H x W x 4 ramps (left, right, top, bottom) in [0,1]. A degenerate axis
/// (size 1) yields the constant 0 for both of its channels.
torch::Tensor positional_grid(int64_t height, int64_t width,
                              torch::TensorOptions options = torch::TensorOptions().dtype(torch::kFloat32));

/// Throws NumericError naming `what` if t holds NaN or Inf.
void check_finite(const torch::Tensor& t, const char* what);

/// Reductions across the slot axis. Float32 inputs are accumulated in
/// float64 and rounded back, so the result does not depend on slot order.
torch::Tensor slot_softmax(const torch::Tensor& x, int64_t dim);
torch::Tensor slot_log_softmax(const torch::Tensor& x, int64_t dim);
torch::Tensor slot_logsumexp(const torch::Tensor& x, int64_t dim);
torch::Tensor slot_sum(const torch::Tensor& x, int64_t dim);

/// Permutes the slot axis (dim 1 of a [B, K, ...] tensor).
torch::Tensor permute_slots(const torch::Tensor& t, const torch::Tensor& perm);

}  // namespace emorl

#endif  // EMORL_OPS_HPP
