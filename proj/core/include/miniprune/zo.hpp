#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "miniprune/error.hpp"
#include "miniprune/model.hpp"
#include "miniprune/tensor.hpp"

namespace miniprune::zo {

// Floor applied to |z| on the gaussian path when clamping is enabled.
inline constexpr float kClampFloor = 0.1f;

struct PerturbSpec {
    float epsilon = 1e-3f;
    Distribution distribution = Distribution::kGaussian;
    int n_samples = 1;
    std::uint64_t base_seed = 0;
    bool clamp = false;

    void validate() const;
};

struct LossDeltaEntry {
    double loss_plus = 0.0;
    double loss_minus = 0.0;
    std::uint64_t stream_id = 0;
};
using LossDelta = std::vector<LossDeltaEntry>;

/// A named float tensor the estimator may perturb in place.
struct ParamRef {
    std::string name;
    Tensor* tensor = nullptr;
};
using ParamList = std::vector<ParamRef>;

/// Every tensor of the checkpoint (the full parameter vector).
ParamList all_params(ModelCheckpoint& ckpt);

/// Stream id of sample `sample_id`; per-tensor streams are derived from it
/// and the tensor name, so any one tensor's z can be replayed alone.
std::uint64_t sample_stream_id(const PerturbSpec& spec, int sample_id);
std::uint64_t tensor_stream_id(std::uint64_t sample_stream, const std::string& tensor_name);

/// Draws the z tensor for one parameter; clamping applied if enabled.
Tensor regenerate_z(const PerturbSpec& spec, std::uint64_t sample_stream, const std::string& name, const Shape& shape);

/// W <- W + scale * z, tensor by tensor, regenerating z on the fly.
void perturb_in_place(const ParamList& params, const PerturbSpec& spec, int sample_id, float scale);
void perturb_in_place(ModelCheckpoint& ckpt, const PerturbSpec& spec, int sample_id, float scale);

/// Two-sided measurement: +eps, L+, -2 eps, L-, +eps. Generic over the
/// parameter space so the same sequence drives checkpoints, adapter sets
/// and analytic test losses. `perturb(scale)` must apply scale * z.
template <class Perturb, class Loss>
    requires std::invocable<Perturb&, double> && std::invocable<Loss&>
LossDeltaEntry estimate_loss_delta(Perturb&& perturb, Loss&& loss, const PerturbSpec& spec, int sample_id) {
    spec.validate();
    const double eps = spec.epsilon;
    LossDeltaEntry entry;
    entry.stream_id = sample_stream_id(spec, sample_id);
    perturb(eps);
    entry.loss_plus = loss();
    perturb(-2.0 * eps);
    entry.loss_minus = loss();
    perturb(eps);
    if (!std::isfinite(entry.loss_plus) || !std::isfinite(entry.loss_minus))
        throw NumericalError("zo estimation: non-finite loss at sample " + std::to_string(sample_id));
    return entry;
}

LossDeltaEntry estimate_loss_delta(const ParamList& params, const std::function<double()>& loss,
                                   const PerturbSpec& spec, int sample_id);
LossDeltaEntry estimate_loss_delta(ModelCheckpoint& ckpt, const TokenBatch& batch, const PerturbSpec& spec,
                                   int sample_id);

/// (L+ - L-) / (2 eps z). Throws NumericalError when |z| < min_abs_z or z == 0.
double per_weight_gradient(const LossDeltaEntry& delta, double z_element, double epsilon, double min_abs_z = 0.0);

/// Lazily reconstructed gradient estimate. Holds only the loss deltas and
/// the tensor shapes; `tensor(name)` replays z for that tensor alone.
class ZoGradients {
public:
    ZoGradients(PerturbSpec spec, LossDelta deltas, std::map<std::string, Shape> shapes);

    Tensor tensor(const std::string& name) const;
    const LossDelta& deltas() const noexcept { return deltas_; }
    const PerturbSpec& spec() const noexcept { return spec_; }
    std::vector<std::string> names() const;
    bool has(const std::string& name) const { return shapes_.contains(name); }

private:
    PerturbSpec spec_;
    LossDelta deltas_;
    std::map<std::string, Shape> shapes_;
};

/// Runs n_samples two-sided measurements over the full parameter vector.
/// The checkpoint is mutated during the call and restored (up to rounding
/// drift) before it returns.
ZoGradients estimate_gradients(ModelCheckpoint& ckpt, const TokenBatch& batch, const PerturbSpec& spec);
ZoGradients estimate_gradients(const ParamList& params, const std::function<double()>& loss, const PerturbSpec& spec);

}  // namespace miniprune::zo
