#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "miniprune/model.hpp"
#include "miniprune/tensor.hpp"

namespace miniprune {
namespace zo {
class ZoGradients;
}

enum class Criterion { kMagnitudeL1, kMagnitudeL2, kWanda, kTaylorBp, kTaylorZo, kFmsBp, kFmsZo };

std::string to_string(Criterion c);
Criterion criterion_from_string(const std::string& s);
bool needs_bp_gradient(Criterion c);
bool needs_zo_gradient(Criterion c);
bool needs_activations(Criterion c);
std::vector<Criterion> all_criteria();

/// Per-feature l2 norms keyed by weight name, derived from an activation record.
using ActivationNorms = std::map<std::string, Tensor>;

/// norm_j = sqrt(sum of squared activations of feature j). Throws
/// CalibrationError when the record saw no tokens.
ActivationNorms activation_norms(const ActivationRecord& record);

/// Source of per-weight gradients: exact buffers or a ZO reconstruction.
class GradientSource {
public:
    static GradientSource exact(const GradientBuffers& grads);
    static GradientSource estimated(const zo::ZoGradients& grads);

    Tensor tensor(const std::string& name) const;

private:
    const GradientBuffers* exact_ = nullptr;
    const zo::ZoGradients* estimated_ = nullptr;
};

struct SensitivityMap {
    Criterion criterion = Criterion::kMagnitudeL1;
    std::map<std::string, Tensor> scores;
    std::string provenance;
};

/// Per-weight scores for every prunable tensor:
///   magnitude_l1 |W|, magnitude_l2 W^2, wanda |W[i,j]| norm_j,
///   taylor |W g|, fms |W g norm_j|.
SensitivityMap score(const ModelCheckpoint& ckpt, Criterion criterion, const GradientSource* grads,
                     const ActivationNorms* acts);

/// Contiguous block of rows or columns of one tensor.
struct StructureSlice {
    enum class Axis { kRows, kCols };
    std::string tensor;
    Axis axis = Axis::kRows;
    std::int64_t begin = 0;
    std::int64_t end = 0;

    bool operator==(const StructureSlice&) const = default;
};

/// Sum of the scores inside the slice, accumulated in double.
double structure_sum(const SensitivityMap& map, const StructureSlice& slice);

}  // namespace miniprune
