#include "miniprune/zo.hpp"

#include <cmath>

namespace miniprune::zo {

void PerturbSpec::validate() const {
    if (!(epsilon > 0.0f) || !std::isfinite(epsilon)) throw ConfigError("zo.epsilon must be positive");
    if (n_samples < 1) throw ConfigError("zo.n_samples must be at least 1");
}

ParamList all_params(ModelCheckpoint& ckpt) {
    ParamList out;
    out.reserve(ckpt.tensors.size());
    for (auto& [name, t] : ckpt.tensors) out.push_back({name, &t});
    return out;
}

std::uint64_t sample_stream_id(const PerturbSpec& spec, int sample_id) {
    return mix64(spec.base_seed ^ mix64(static_cast<std::uint64_t>(sample_id) + 1));
}

std::uint64_t tensor_stream_id(std::uint64_t sample_stream, const std::string& tensor_name) {
    return mix64(sample_stream ^ fnv1a64(tensor_name));
}

namespace {

inline float clamp_z(float z, const PerturbSpec& spec) {
    if (!spec.clamp || spec.distribution != Distribution::kGaussian) return z;
    if (std::fabs(z) >= kClampFloor) return z;
    return z < 0.0f ? -kClampFloor : kClampFloor;
}

}  // namespace

Tensor regenerate_z(const PerturbSpec& spec, std::uint64_t sample_stream, const std::string& name, const Shape& shape) {
    RngStream rng(spec.base_seed, tensor_stream_id(sample_stream, name));
    Tensor z = sample_perturbation(rng, shape, spec.distribution);
    for (auto& v : z.storage()) v = clamp_z(v, spec);
    return z;
}

void perturb_in_place(const ParamList& params, const PerturbSpec& spec, int sample_id, float scale) {
    if (!std::isfinite(scale)) throw ConfigError("perturbation scale must be finite");
    if (scale == 0.0f) return;
    const std::uint64_t stream = sample_stream_id(spec, sample_id);
    for (const auto& p : params) {
        // One draw per element straight into the weight; z is never stored.
        RngStream rng(spec.base_seed, tensor_stream_id(stream, p.name));
        for (auto& w : p.tensor->storage()) w += scale * clamp_z(draw(rng, spec.distribution), spec);
    }
}

void perturb_in_place(ModelCheckpoint& ckpt, const PerturbSpec& spec, int sample_id, float scale) {
    perturb_in_place(all_params(ckpt), spec, sample_id, scale);
}

LossDeltaEntry estimate_loss_delta(const ParamList& params, const std::function<double()>& loss,
                                   const PerturbSpec& spec, int sample_id) {
    auto perturb = [&](double s) { perturb_in_place(params, spec, sample_id, static_cast<float>(s)); };
    return estimate_loss_delta(perturb, loss, spec, sample_id);
}

LossDeltaEntry estimate_loss_delta(ModelCheckpoint& ckpt, const TokenBatch& batch, const PerturbSpec& spec,
                                   int sample_id) {
    const ParamList params = all_params(ckpt);
    return estimate_loss_delta(params, [&] { return forward_loss(ckpt, batch); }, spec, sample_id);
}

double per_weight_gradient(const LossDeltaEntry& delta, double z_element, double epsilon, double min_abs_z) {
    if (z_element == 0.0 || std::fabs(z_element) < min_abs_z)
        throw NumericalError("zo gradient: |z| = " + std::to_string(std::fabs(z_element)) + " below division guard");
    return (delta.loss_plus - delta.loss_minus) / (2.0 * epsilon * z_element);
}

ZoGradients::ZoGradients(PerturbSpec spec, LossDelta deltas, std::map<std::string, Shape> shapes)
    : spec_(spec), deltas_(std::move(deltas)), shapes_(std::move(shapes)) {}

std::vector<std::string> ZoGradients::names() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : shapes_) out.push_back(name);
    return out;
}

Tensor ZoGradients::tensor(const std::string& name) const {
    auto it = shapes_.find(name);
    if (it == shapes_.end()) throw ConsistencyError("zo gradients: unknown tensor '" + name + "'");
    const Shape& shape = it->second;
    std::vector<double> acc(static_cast<std::size_t>(shape_numel(shape)), 0.0);
    const double min_abs = spec_.clamp && spec_.distribution == Distribution::kGaussian ? kClampFloor : 0.0;
    for (const auto& d : deltas_) {
        RngStream rng(spec_.base_seed, tensor_stream_id(d.stream_id, name));
        for (auto& a : acc) a += per_weight_gradient(d, clamp_z(draw(rng, spec_.distribution), spec_), spec_.epsilon, min_abs);
    }
    Tensor g(shape);
    const double inv_n = 1.0 / static_cast<double>(deltas_.size());
    for (std::size_t i = 0; i < acc.size(); ++i) g.storage()[i] = static_cast<float>(acc[i] * inv_n);
    if (!g.all_finite()) throw NumericalError("zo gradients: non-finite estimate for '" + name + "'");
    return g;
}

ZoGradients estimate_gradients(const ParamList& params, const std::function<double()>& loss, const PerturbSpec& spec) {
    spec.validate();
    LossDelta deltas;
    deltas.reserve(static_cast<std::size_t>(spec.n_samples));
    for (int j = 0; j < spec.n_samples; ++j) deltas.push_back(estimate_loss_delta(params, loss, spec, j));
    std::map<std::string, Shape> shapes;
    for (const auto& p : params) shapes.emplace(p.name, p.tensor->shape());
    return ZoGradients(spec, std::move(deltas), std::move(shapes));
}

ZoGradients estimate_gradients(ModelCheckpoint& ckpt, const TokenBatch& batch, const PerturbSpec& spec) {
    return estimate_gradients(all_params(ckpt), [&] { return forward_loss(ckpt, batch); }, spec);
}

}  // namespace miniprune::zo
