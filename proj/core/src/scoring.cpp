#include "miniprune/scoring.hpp"

#include <cmath>

#include "miniprune/error.hpp"
#include "miniprune/zo.hpp"

namespace miniprune {

std::string to_string(Criterion c) {
    switch (c) {
        case Criterion::kMagnitudeL1: return "magnitude_l1";
        case Criterion::kMagnitudeL2: return "magnitude_l2";
        case Criterion::kWanda: return "wanda";
        case Criterion::kTaylorBp: return "taylor_bp";
        case Criterion::kTaylorZo: return "taylor_zo";
        case Criterion::kFmsBp: return "fms_bp";
        case Criterion::kFmsZo: return "fms_zo";
    }
    return "unknown";
}

Criterion criterion_from_string(const std::string& s) {
    for (auto c : all_criteria())
        if (to_string(c) == s) return c;
    throw ConfigError("unknown criterion '" + s + "'");
}

std::vector<Criterion> all_criteria() {
    return {Criterion::kMagnitudeL1, Criterion::kMagnitudeL2, Criterion::kWanda, Criterion::kTaylorBp,
            Criterion::kTaylorZo,    Criterion::kFmsBp,       Criterion::kFmsZo};
}

bool needs_bp_gradient(Criterion c) { return c == Criterion::kTaylorBp || c == Criterion::kFmsBp; }
bool needs_zo_gradient(Criterion c) { return c == Criterion::kTaylorZo || c == Criterion::kFmsZo; }
bool needs_activations(Criterion c) {
    return c == Criterion::kWanda || c == Criterion::kFmsBp || c == Criterion::kFmsZo;
}

ActivationNorms activation_norms(const ActivationRecord& record) {
    if (record.token_count <= 0) throw CalibrationError("activation record is empty (no calibration tokens)");
    ActivationNorms out;
    for (const auto& [name, sq] : record.input_feature_sq_sums) {
        Tensor norms(sq.shape());
        for (std::int64_t j = 0; j < sq.numel(); ++j) {
            if (sq[j] < 0.0f) throw CalibrationError("negative squared-activation sum for " + name);
            norms[j] = std::sqrt(sq[j]);
        }
        out.emplace(name, std::move(norms));
    }
    return out;
}

GradientSource GradientSource::exact(const GradientBuffers& grads) {
    GradientSource s;
    s.exact_ = &grads;
    return s;
}

GradientSource GradientSource::estimated(const zo::ZoGradients& grads) {
    GradientSource s;
    s.estimated_ = &grads;
    return s;
}

Tensor GradientSource::tensor(const std::string& name) const {
    if (exact_) {
        auto it = exact_->find(name);
        if (it == exact_->end()) throw ConsistencyError("gradient buffers lack '" + name + "'");
        return it->second;
    }
    if (estimated_) return estimated_->tensor(name);
    throw ConfigError("empty gradient source");
}

SensitivityMap score(const ModelCheckpoint& ckpt, Criterion criterion, const GradientSource* grads,
                     const ActivationNorms* acts) {
    const bool use_grad = needs_bp_gradient(criterion) || needs_zo_gradient(criterion);
    const bool use_act = needs_activations(criterion);
    if (use_grad && !grads) throw ConfigError(to_string(criterion) + " requires a gradient source");
    if (use_act && !acts) throw ConfigError(to_string(criterion) + " requires activation norms");

    SensitivityMap map;
    map.criterion = criterion;
    for (const auto& name : prunable_tensor_names(ckpt.config)) {
        const Tensor& w = ckpt.at(name);
        Tensor s(w.shape());
        for (std::int64_t i = 0; i < w.numel(); ++i) {
            const float m = std::fabs(w[i]);
            s[i] = criterion == Criterion::kMagnitudeL2 ? w[i] * w[i] : m;
        }
        if (use_grad) {
            const Tensor g = grads->tensor(name);
            if (g.shape() != w.shape()) throw ConsistencyError("gradient shape mismatch for " + name);
            for (std::int64_t i = 0; i < w.numel(); ++i) s[i] *= std::fabs(g[i]);
        }
        if (use_act) {
            auto it = acts->find(name);
            if (it == acts->end()) throw ConfigError("activation norms missing for " + name);
            const Tensor& norm = it->second;
            if (norm.numel() != w.cols()) throw ConsistencyError("activation width mismatch for " + name);
            for (std::int64_t r = 0; r < w.rows(); ++r)
                for (std::int64_t c = 0; c < w.cols(); ++c) s.at(r, c) *= norm[c];
        }
        if (!s.all_finite()) throw NumericalError("non-finite sensitivity score in " + name);
        map.scores.emplace(name, std::move(s));
    }
    return map;
}

double structure_sum(const SensitivityMap& map, const StructureSlice& slice) {
    auto it = map.scores.find(slice.tensor);
    if (it == map.scores.end()) throw ConsistencyError("sensitivity map has no tensor '" + slice.tensor + "'");
    const Tensor& t = it->second;
    const std::int64_t rows = t.rows(), cols = t.cols();
    const std::int64_t limit = slice.axis == StructureSlice::Axis::kRows ? rows : cols;
    if (slice.begin < 0 || slice.end > limit || slice.begin >= slice.end)
        throw IndexError("structure slice [" + std::to_string(slice.begin) + ", " + std::to_string(slice.end) +
                         ") out of bounds for " + slice.tensor + " " + shape_to_string(t.shape()));
    double sum = 0.0;
    if (slice.axis == StructureSlice::Axis::kRows) {
        for (std::int64_t r = slice.begin; r < slice.end; ++r)
            for (std::int64_t c = 0; c < cols; ++c) sum += t.at(r, c);
    } else {
        for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t c = slice.begin; c < slice.end; ++c) sum += t.at(r, c);
    }
    return sum;
}

}  // namespace miniprune
