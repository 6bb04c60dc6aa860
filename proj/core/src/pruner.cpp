#include "miniprune/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "miniprune/error.hpp"

namespace miniprune {

std::string to_string(GroupKind kind) { return kind == GroupKind::kAttentionHead ? "attention_head" : "ffn_channel"; }

GroupKind group_kind_from_string(const std::string& s) {
    if (s == "attention_head") return GroupKind::kAttentionHead;
    if (s == "ffn_channel") return GroupKind::kFfnChannel;
    throw ConfigError("unknown group kind '" + s + "'");
}

std::vector<PruneGroup> build_groups(const ModelConfig& config) {
    config.validate();
    using Axis = StructureSlice::Axis;
    std::vector<PruneGroup> out;
    const int dh = config.d_head();
    for (int l = 0; l < config.n_layers; ++l) {
        for (int h = 0; h < config.heads(l); ++h) {
            const std::int64_t b = static_cast<std::int64_t>(h) * dh, e = b + dh;
            out.push_back({l,
                           GroupKind::kAttentionHead,
                           h,
                           {{names::wq(l), Axis::kRows, b, e},
                            {names::wk(l), Axis::kRows, b, e},
                            {names::wv(l), Axis::kRows, b, e},
                            {names::wo(l), Axis::kCols, b, e}}});
        }
        for (int c = 0; c < config.ffn_dim(l); ++c) {
            PruneGroup g{l, GroupKind::kFfnChannel, c, {{names::w_up(l), Axis::kRows, c, c + 1}}};
            if (config.ffn_kind == FfnKind::kSwiglu3) g.structures.push_back({names::w_gate(l), Axis::kRows, c, c + 1});
            g.structures.push_back({names::w_down(l), Axis::kCols, c, c + 1});
            out.push_back(std::move(g));
        }
    }
    return out;
}

double group_score(const SensitivityMap& map, const PruneGroup& group) {
    if (group.structures.empty()) throw ConsistencyError("group without structures");
    double best = structure_sum(map, group.structures.front());
    for (std::size_t i = 1; i < group.structures.size(); ++i) best = std::max(best, structure_sum(map, group.structures[i]));
    return best;
}

const PrunePlan::Entry& PrunePlan::entry(int layer, GroupKind kind) const {
    auto it = layers.find({layer, kind});
    if (it == layers.end())
        throw ConsistencyError("plan has no entry for layer " + std::to_string(layer) + " " + to_string(kind));
    return it->second;
}

std::vector<int> PrunePlan::pruned(int layer, GroupKind kind) const {
    const Entry& e = entry(layer, kind);
    std::vector<int> out;
    std::size_t k = 0;
    for (int i = 0; i < e.total; ++i) {
        if (k < e.retained.size() && e.retained[k] == i)
            ++k;
        else
            out.push_back(i);
    }
    return out;
}

int retained_count(int n, double ratio) {
    if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("prune ratio must lie in [0, 1)");
    const int keep = static_cast<int>(std::ceil((1.0 - ratio) * n - 1e-9));
    return std::clamp(keep, 1, n);
}

PrunePlan select(const std::vector<PruneGroup>& groups, const std::vector<double>& scores, double ratio,
                 const std::set<int>& protected_layers, int n_layers) {
    if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("prune ratio must lie in [0, 1), got " + std::to_string(ratio));
    if (groups.size() != scores.size()) throw ConsistencyError("one score per group required");
    for (int l : protected_layers)
        if (l < 0 || l >= n_layers) throw ConfigError("protected layer " + std::to_string(l) + " out of range");

    PrunePlan plan;
    plan.ratio = ratio;
    plan.protected_layers = protected_layers;
    std::map<std::pair<int, GroupKind>, std::vector<std::pair<int, double>>> buckets;
    for (std::size_t i = 0; i < groups.size(); ++i)
        buckets[{groups[i].layer, groups[i].kind}].push_back({groups[i].index, scores[i]});

    for (auto& [key, items] : buckets) {
        std::sort(items.begin(), items.end());
        PrunePlan::Entry e;
        e.total = static_cast<int>(items.size());
        for (int i = 0; i < e.total; ++i)
            if (items[i].first != i) throw ConsistencyError("group indices must be dense per layer and kind");
        for (const auto& it : items) e.scores.push_back(it.second);
        const int keep = protected_layers.contains(key.first) ? e.total : retained_count(e.total, ratio);
        std::vector<int> order(static_cast<std::size_t>(e.total));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return e.scores[a] > e.scores[b]; });
        e.retained.assign(order.begin(), order.begin() + keep);
        std::sort(e.retained.begin(), e.retained.end());
        plan.layers.emplace(key, std::move(e));
    }
    return plan;
}

namespace {

Tensor take_rows(const Tensor& t, const std::vector<std::int64_t>& rows) {
    Tensor out({static_cast<std::int64_t>(rows.size()), t.cols()});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        auto src = t.row(rows[i]);
        std::copy(src.begin(), src.end(), out.row(static_cast<std::int64_t>(i)).begin());
    }
    return out;
}

Tensor take_cols(const Tensor& t, const std::vector<std::int64_t>& cols) {
    Tensor out({t.rows(), static_cast<std::int64_t>(cols.size())});
    for (std::int64_t r = 0; r < t.rows(); ++r)
        for (std::size_t j = 0; j < cols.size(); ++j) out.at(r, static_cast<std::int64_t>(j)) = t.at(r, cols[j]);
    return out;
}

}  // namespace

ModelCheckpoint apply_plan(const ModelCheckpoint& ckpt, const PrunePlan& plan) {
    validate_checkpoint(ckpt);
    const ModelConfig& cfg = ckpt.config;
    for (const auto& [key, e] : plan.layers) {
        if (key.first < 0 || key.first >= cfg.n_layers) throw ConsistencyError("plan references a missing layer");
        const int have = key.second == GroupKind::kAttentionHead ? cfg.heads(key.first) : cfg.ffn_dim(key.first);
        if (e.total != have)
            throw ConsistencyError("plan expects " + std::to_string(e.total) + " " + to_string(key.second) +
                                   " groups in layer " + std::to_string(key.first) + ", model has " +
                                   std::to_string(have));
        for (int r : e.retained)
            if (r < 0 || r >= e.total) throw ConsistencyError("retained index out of range");
        if (e.retained.empty()) throw ConsistencyError("plan removes every group of a layer");
    }

    ModelCheckpoint out = ckpt;
    std::vector<int> heads(static_cast<std::size_t>(cfg.n_layers)), dff(static_cast<std::size_t>(cfg.n_layers));
    bool changed = false;
    const int dh = cfg.d_head();
    for (int l = 0; l < cfg.n_layers; ++l) {
        heads[l] = cfg.heads(l);
        dff[l] = cfg.ffn_dim(l);
        if (auto it = plan.layers.find({l, GroupKind::kAttentionHead}); it != plan.layers.end()) {
            const auto& kept = it->second.retained;
            if (static_cast<int>(kept.size()) != heads[l]) {
                std::vector<std::int64_t> idx;
                for (int h : kept)
                    for (int j = 0; j < dh; ++j) idx.push_back(static_cast<std::int64_t>(h) * dh + j);
                for (const auto& n : {names::wq(l), names::wk(l), names::wv(l)}) out.at(n) = take_rows(ckpt.at(n), idx);
                out.at(names::wo(l)) = take_cols(ckpt.at(names::wo(l)), idx);
                heads[l] = static_cast<int>(kept.size());
                changed = true;
            }
        }
        if (auto it = plan.layers.find({l, GroupKind::kFfnChannel}); it != plan.layers.end()) {
            const auto& kept = it->second.retained;
            if (static_cast<int>(kept.size()) != dff[l]) {
                const std::vector<std::int64_t> idx(kept.begin(), kept.end());
                out.at(names::w_up(l)) = take_rows(ckpt.at(names::w_up(l)), idx);
                if (cfg.ffn_kind == FfnKind::kSwiglu3) out.at(names::w_gate(l)) = take_rows(ckpt.at(names::w_gate(l)), idx);
                out.at(names::w_down(l)) = take_cols(ckpt.at(names::w_down(l)), idx);
                dff[l] = static_cast<int>(kept.size());
                changed = true;
            }
        }
    }
    if (changed) {
        out.config.layer_heads = heads;
        out.config.layer_d_ff = dff;
    }
    validate_checkpoint(out);
    return out;
}

std::set<int> protected_layer_set(int n_layers, int first, int last) {
    if (first < 0 || last < 0) throw ConfigError("protected layer counts must be non-negative");
    std::set<int> out;
    for (int l = 0; l < std::min(first, n_layers); ++l) out.insert(l);
    for (int l = std::max(0, n_layers - last); l < n_layers; ++l) out.insert(l);
    return out;
}

PrunableCount count_prunable(const ModelConfig& config) {
    PrunableCount out;
    const auto prunable = prunable_tensor_names(config);
    for (const auto& spec : expected_tensors(config)) {
        const auto n = shape_numel(spec.shape);
        out.total += n;
        if (std::find(prunable.begin(), prunable.end(), spec.name) != prunable.end()) out.prunable += n;
    }
    return out;
}

MiniLlmResult run_minillm(const ModelCheckpoint& ckpt_in, const TokenBatch& calib_grad, const TokenBatch& calib_act,
                          const MiniLlmOptions& options) {
    using nlohmann::json;
    validate_checkpoint(ckpt_in);
    if (!(options.ratio >= 0.0 && options.ratio < 1.0)) throw ConfigError("prune ratio must lie in [0, 1)");
    MiniLlmResult result;
    const Criterion crit = options.criterion;

    // The estimator perturbs its own copy; scoring and slicing read the
    // caller's exact weights.
    ModelCheckpoint work = ckpt_in;
    const ModelCheckpoint& ckpt = ckpt_in;
    std::optional<zo::ZoGradients> zo_grads;
    std::optional<BackwardResult> bp;
    if (needs_zo_gradient(crit)) {
        zo_grads = zo::estimate_gradients(work, calib_grad, options.zo);
        for (std::size_t j = 0; j < zo_grads->deltas().size(); ++j) {
            const auto& d = zo_grads->deltas()[j];
            result.log.push_back(json{{"stage", "zo"},
                                      {"sample", j},
                                      {"loss_plus", d.loss_plus},
                                      {"loss_minus", d.loss_minus},
                                      {"stream_id", d.stream_id}}
                                     .dump());
        }
    } else if (needs_bp_gradient(crit)) {
        bp = backward(ckpt, calib_grad);
        result.log.push_back(json{{"stage", "backward"}, {"loss", bp->loss}}.dump());
    }

    std::optional<ActivationNorms> acts;
    if (needs_activations(crit)) {
        const CaptureResult cap = forward_capture(ckpt, calib_act);
        acts = activation_norms(cap.record);
        result.log.push_back(json{{"stage", "activations"}, {"tokens", cap.record.token_count}, {"loss", cap.loss}}.dump());
    }

    std::optional<GradientSource> gsrc;
    if (zo_grads) gsrc = GradientSource::estimated(*zo_grads);
    if (bp) gsrc = GradientSource::exact(bp->grads);
    SensitivityMap map = score(ckpt, crit, gsrc ? &*gsrc : nullptr, acts ? &*acts : nullptr);
    map.provenance = "criterion=" + to_string(crit) + " zo.seed=" + std::to_string(options.zo.base_seed) +
                     " grad_batch=" + std::to_string(calib_grad.rows) + "x" + std::to_string(calib_grad.cols) +
                     " act_batch=" + std::to_string(calib_act.rows) + "x" + std::to_string(calib_act.cols);
    result.log.push_back(json{{"stage", "score"}, {"criterion", to_string(crit)}}.dump());

    const auto groups = build_groups(ckpt.config);
    std::vector<double> gscores;
    gscores.reserve(groups.size());
    for (const auto& g : groups) gscores.push_back(group_score(map, g));
    result.plan = select(groups, gscores, options.ratio, options.protected_layers, ckpt.config.n_layers);
    result.plan.meta["criterion"] = to_string(crit);
    result.plan.meta["zo.seed"] = std::to_string(options.zo.base_seed);
    result.plan.meta["zo.epsilon"] = json(options.zo.epsilon).dump();
    result.plan.meta["zo.n_samples"] = std::to_string(options.zo.n_samples);
    result.plan.meta["zo.distribution"] = to_string(options.zo.distribution);
    result.plan.meta["calib.grad"] = std::to_string(calib_grad.rows) + "x" + std::to_string(calib_grad.cols);
    result.plan.meta["calib.act"] = std::to_string(calib_act.rows) + "x" + std::to_string(calib_act.cols);
    result.log.push_back(json{{"stage", "select"}, {"ratio", options.ratio}}.dump());

    result.pruned = apply_plan(ckpt, result.plan);
    if (options.keep_scores) result.scores = std::move(map);
    return result;
}

double channel_similarity(const std::set<int>& a, const std::set<int>& b) {
    if (a.empty()) throw InputError("channel similarity is undefined for an empty reference set");
    std::size_t common = 0;
    for (int x : a) common += b.contains(x) ? 1 : 0;
    return 100.0 * static_cast<double>(common) / static_cast<double>(a.size());
}

}  // namespace miniprune
