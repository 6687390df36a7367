#include "emorl/ops.hpp"

#include <cmath>
#include <string>

#include "emorl/errors.hpp"

namespace emorl {

torch::Tensor softplus_clamped(const torch::Tensor& o) {
    return torch::log1p(torch::exp(o.clamp_max(kSoftplusClamp))) + kSoftplusFloor;
}

double softplus_clamped(double o) {
    return std::log1p(std::exp(std::min(o, kSoftplusClamp))) + kSoftplusFloor;
}

torch::Tensor positional_grid(int64_t height, int64_t width, torch::TensorOptions options) {
    auto ramp = [&](int64_t n) {
        if (n <= 1) return torch::zeros({n}, options);
        return torch::linspace(0.0, 1.0, n, options);
    };
    const auto rows = ramp(height).view({height, 1}).expand({height, width});
    const auto cols = ramp(width).view({1, width}).expand({height, width});
    auto left = width > 1 ? 1.0 - cols : torch::zeros_like(cols);
    auto top = height > 1 ? 1.0 - rows : torch::zeros_like(rows);
    return torch::stack({left, cols, top, rows}, -1).contiguous();
}

void check_finite(const torch::Tensor& t, const char* what) {
    if (!torch::isfinite(t).all().item<bool>())
        throw NumericError(std::string("non-finite values in ") + what);
}

namespace {

template <typename F>
torch::Tensor widened(const torch::Tensor& x, F&& f) {
    if (x.scalar_type() != torch::kFloat32) return f(x);
    return f(x.to(torch::kFloat64)).to(torch::kFloat32);
}

}  // namespace

torch::Tensor slot_softmax(const torch::Tensor& x, int64_t dim) {
    return widened(x, [dim](const torch::Tensor& v) { return torch::softmax(v, dim); });
}

torch::Tensor slot_log_softmax(const torch::Tensor& x, int64_t dim) {
    return widened(x, [dim](const torch::Tensor& v) { return torch::log_softmax(v, dim); });
}

torch::Tensor slot_logsumexp(const torch::Tensor& x, int64_t dim) {
    return widened(x, [dim](const torch::Tensor& v) { return torch::logsumexp(v, dim); });
}

torch::Tensor slot_sum(const torch::Tensor& x, int64_t dim) {
    return widened(x, [dim](const torch::Tensor& v) { return v.sum(dim); });
}

torch::Tensor permute_slots(const torch::Tensor& t, const torch::Tensor& perm) {
    return t.index_select(1, perm.to(t.device(), torch::kLong));
}

}  // namespace emorl
