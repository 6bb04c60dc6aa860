#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "miniprune/model.hpp"
#include "miniprune/scoring.hpp"
#include "miniprune/zo.hpp"

namespace miniprune {

enum class GroupKind { kAttentionHead, kFfnChannel };
std::string to_string(GroupKind kind);
GroupKind group_kind_from_string(const std::string& s);

/// A set of coupled structures that must be removed together.
///   attention head h: rows [h*dh, (h+1)*dh) of wq/wk/wv, same columns of wo
///   ffn channel c:    row c of w_up (and w_gate), column c of w_down
struct PruneGroup {
    int layer = 0;
    GroupKind kind = GroupKind::kAttentionHead;
    int index = 0;
    std::vector<StructureSlice> structures;
};

std::vector<PruneGroup> build_groups(const ModelConfig& config);

/// max over the group's structures of that structure's score sum.
double group_score(const SensitivityMap& map, const PruneGroup& group);

struct PrunePlan {
    struct Entry {
        int total = 0;
        std::vector<int> retained;  // ascending
        std::vector<double> scores;  // one per group index
    };

    double ratio = 0.0;
    std::string scope = "per_layer";
    std::set<int> protected_layers;
    std::map<std::pair<int, GroupKind>, Entry> layers;
    // Free-form audit fields (criterion, seeds, calibration sizes).
    std::map<std::string, std::string> meta;

    const Entry& entry(int layer, GroupKind kind) const;
    /// Indices removed for (layer, kind), ascending.
    std::vector<int> pruned(int layer, GroupKind kind) const;
};

/// Number of groups kept out of n at ratio p: ceil((1 - p) n), computed
/// with a 1e-9 guard against representation error.
int retained_count(int n, double ratio);

/// Keeps the top ceil((1-p) n) groups per (layer, kind); ties keep the
/// lower index; protected layers keep everything.
PrunePlan select(const std::vector<PruneGroup>& groups, const std::vector<double>& scores, double ratio,
                 const std::set<int>& protected_layers, int n_layers);

/// Returns a new, physically smaller checkpoint.
ModelCheckpoint apply_plan(const ModelCheckpoint& ckpt, const PrunePlan& plan);

/// First `first` and last `last` layers, clipped to the model depth.
std::set<int> protected_layer_set(int n_layers, int first, int last);

struct PrunableCount {
    std::int64_t prunable = 0;  // attention + FFN matrices
    std::int64_t total = 0;
};
PrunableCount count_prunable(const ModelConfig& config);

struct MiniLlmOptions {
    Criterion criterion = Criterion::kFmsZo;
    double ratio = 0.2;
    std::set<int> protected_layers;
    zo::PerturbSpec zo;
    bool keep_scores = false;
};

struct MiniLlmResult {
    PrunePlan plan;
    ModelCheckpoint pruned;
    std::optional<SensitivityMap> scores;
    // One entry per pipeline event, e.g. {"stage":"zo", ...} as JSON text.
    std::vector<std::string> log;
};

/// One-shot pipeline: gradient estimate (ZO or exact, as the criterion
/// requires) on the gradient calibration batch, activation capture on the
/// activation calibration batch, per-weight scoring, group scoring,
/// per-layer top-(1-p) selection, physical slicing.
MiniLlmResult run_minillm(const ModelCheckpoint& ckpt, const TokenBatch& calib_grad, const TokenBatch& calib_act,
                          const MiniLlmOptions& options);

/// |A intersect B| / |A| * 100. Throws InputError when A is empty.
double channel_similarity(const std::set<int>& a, const std::set<int>& b);

}  // namespace miniprune
