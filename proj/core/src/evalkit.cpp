#include "miniprune/evalkit.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <map>
#include <mutex>
#include <thread>

#include "miniprune/error.hpp"

namespace miniprune {

using nlohmann::json;

namespace {

constexpr std::int64_t kEvalBatch = 16;

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string pad(std::string s, std::size_t w) {
    if (s.size() < w) s.insert(0, w - s.size(), ' ');
    return s;
}

std::string humanize(std::int64_t n) {
    const double v = static_cast<double>(n);
    if (v >= 1e9) return fmt("%.2fG", v / 1e9);
    if (v >= 1e6) return fmt("%.2fM", v / 1e6);
    if (v >= 1e3) return fmt("%.2fK", v / 1e3);
    return std::to_string(n);
}

}  // namespace

PplResult perplexity(const ModelCheckpoint& ckpt, std::span<const std::int32_t> tokens, int context_length,
                     std::int64_t max_windows) {
    if (context_length < 2) throw ConfigError("context_length must be at least 2");
    if (context_length > ckpt.config.max_seq_len)
        throw ConfigError("context_length " + std::to_string(context_length) + " exceeds max_seq_len " +
                          std::to_string(ckpt.config.max_seq_len));
    if (tokens.empty()) throw InputError("perplexity: empty corpus");
    std::int64_t windows = static_cast<std::int64_t>(tokens.size()) / context_length;
    if (max_windows > 0) windows = std::min(windows, max_windows);
    if (windows == 0)
        throw InputError("perplexity: corpus of " + std::to_string(tokens.size()) + " tokens holds no full window of " +
                         std::to_string(context_length));

    double total = 0.0;
    for (std::int64_t w0 = 0; w0 < windows; w0 += kEvalBatch) {
        const std::int64_t nb = std::min(kEvalBatch, windows - w0);
        const auto begin = tokens.begin() + static_cast<std::ptrdiff_t>(w0 * context_length);
        std::vector<std::int32_t> data(begin, begin + static_cast<std::ptrdiff_t>(nb * context_length));
        const TokenBatch batch(nb, context_length, std::move(data));
        for (double nll : forward_row_nll(ckpt, batch)) total += nll;
    }
    PplResult r;
    r.windows = windows;
    r.predictions = windows * (context_length - 1);
    r.mean_nll = total / static_cast<double>(r.predictions);
    r.perplexity = std::exp(r.mean_nll);
    if (!std::isfinite(r.perplexity)) throw NumericalError("perplexity is not finite");
    return r;
}

json EvalReport::to_json() const {
    return {{"model_id", model_id},       {"dataset_id", dataset_id}, {"context_length", context_length},
            {"perplexity", perplexity},   {"mean_nll", mean_nll},     {"windows", windows},
            {"param_count", param_count}, {"mac_count", mac_count},   {"wall_time_s", wall_time_s}};
}

EvalReport evaluate(const ModelCheckpoint& ckpt, std::span<const std::int32_t> tokens, int context_length,
                    std::int64_t max_windows, std::string model_id, std::string dataset_id) {
    const auto t0 = std::chrono::steady_clock::now();
    const PplResult p = perplexity(ckpt, tokens, context_length, max_windows);
    const ParamMacCount pm = count_params_macs(ckpt.config, context_length);
    EvalReport r;
    r.model_id = std::move(model_id);
    r.dataset_id = std::move(dataset_id);
    r.context_length = context_length;
    r.perplexity = p.perplexity;
    r.mean_nll = p.mean_nll;
    r.windows = p.windows;
    r.param_count = pm.params;
    r.mac_count = pm.macs;
    r.wall_time_s = seconds_since(t0);
    return r;
}

json CompareRow::to_json() const {
    json j = {{"criterion", criterion},
              {"ratio", ratio},
              {"seed", seed},
              {"ppl_pruned", ppl_pruned},
              {"ppl_recovered", ppl_recovered ? json(*ppl_recovered) : json(nullptr)},
              {"params", params},
              {"macs", macs},
              {"removed_all", removed_all},
              {"removed_prunable", removed_prunable},
              {"wall_time_s", wall_time_s}};
    json retained = json::object();
    for (const auto& [key, e] : plan.layers)
        retained[std::to_string(key.first) + "." + to_string(key.second)] = e.retained.size();
    j["retained"] = retained;
    return j;
}

std::string CompareReport::to_jsonl() const {
    std::string out;
    for (const auto& row : rows) out += row.to_json().dump() + "\n";
    return out;
}

std::string CompareReport::to_text() const {
    std::string out;
    const auto line = [&](const std::vector<std::string>& cells) {
        static const std::size_t widths[] = {7, 14, 6, 14, 14, 10, 10};
        for (std::size_t i = 0; i < cells.size(); ++i) out += pad(cells[i], widths[i]) + (i + 1 < cells.size() ? " | " : "\n");
    };
    line({"Ratio", "Method", "Seed", "PPL w/o tune", "PPL w/ tune", "#Params", "MACs"});
    out += std::string(98, '-') + "\n";
    line({"0%", "dense", "-", fmt("%.2f", base_ppl), "-", humanize(base_params), humanize(base_macs)});

    // Per-seed rows, then the seed mean per (ratio, criterion).
    std::map<std::pair<double, std::string>, std::vector<const CompareRow*>> groups;
    std::vector<std::pair<double, std::string>> order;
    for (const auto& r : rows) {
        auto key = std::make_pair(r.ratio, r.criterion);
        if (!groups.contains(key)) order.push_back(key);
        groups[key].push_back(&r);
    }
    std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    double last_ratio = -1.0;
    for (const auto& key : order) {
        if (key.first != last_ratio) {
            out += std::string(98, '-') + "\n";
            last_ratio = key.first;
        }
        const auto& g = groups[key];
        double sum_p = 0.0, sum_r = 0.0;
        bool all_r = true;
        for (const CompareRow* r : g) {
            line({fmt("%.0f%%", r->ratio * 100.0), r->criterion, std::to_string(r->seed), fmt("%.2f", r->ppl_pruned),
                  r->ppl_recovered ? fmt("%.2f", *r->ppl_recovered) : "-", humanize(r->params), humanize(r->macs)});
            sum_p += r->ppl_pruned;
            if (r->ppl_recovered) sum_r += *r->ppl_recovered;
            else all_r = false;
        }
        if (g.size() > 1) {
            const double n = static_cast<double>(g.size());
            line({fmt("%.0f%%", key.first * 100.0), key.second, "mean", fmt("%.2f", sum_p / n),
                  all_r ? fmt("%.2f", sum_r / n) : "-", humanize(g.front()->params), humanize(g.front()->macs)});
        }
    }
    return out;
}

SeedStreams derive_seed_streams(std::uint64_t seed) {
    return {mix64(seed ^ fnv1a64("calib.grad")), mix64(seed ^ fnv1a64("calib.act")), mix64(seed ^ fnv1a64("zo")),
            mix64(seed ^ fnv1a64("train")), mix64(seed ^ fnv1a64("lora"))};
}

CompareRow run_cell(const ModelCheckpoint& base, const Corpus& corpus, const CompareSpec& spec, Criterion criterion,
                    double ratio, std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    const SeedStreams s = derive_seed_streams(seed);
    const TokenBatch grad = sample_windows(corpus.train(), spec.grad_samples, spec.calib_len, s.calib_grad);
    const TokenBatch act = sample_windows(corpus.train(), spec.act_samples, spec.calib_len, s.calib_act);
    MiniLlmOptions opt;
    opt.criterion = criterion;
    opt.ratio = ratio;
    opt.protected_layers = protected_layer_set(base.config.n_layers, spec.protect_first, spec.protect_last);
    opt.zo = spec.zo;
    opt.zo.base_seed = s.zo;
    MiniLlmResult res = run_minillm(base, grad, act, opt);

    CompareRow row;
    row.criterion = to_string(criterion);
    row.ratio = ratio;
    row.seed = seed;
    row.ppl_pruned = perplexity(res.pruned, corpus.validation(), spec.context_length, spec.max_windows).perplexity;
    const ParamMacCount pm = count_params_macs(res.pruned.config, spec.context_length);
    const ParamMacCount base_pm = count_params_macs(base.config, spec.context_length);
    row.params = pm.params;
    row.macs = pm.macs;
    row.removed_all = 1.0 - static_cast<double>(pm.params) / static_cast<double>(base_pm.params);
    const PrunableCount pc = count_prunable(res.pruned.config), base_pc = count_prunable(base.config);
    row.removed_prunable = 1.0 - static_cast<double>(pc.prunable) / static_cast<double>(base_pc.prunable);

    if (spec.recover) {
        LoraOptions lo = spec.lora;
        lo.seed = s.lora;
        TrainConfig tc = spec.train;
        tc.seed = s.train;
        AdapterSet adapters = attach_lora(res.pruned, default_lora_targets(res.pruned.config), lo);
        train_recovery(res.pruned, adapters, corpus.train(), tc);
        const ModelCheckpoint merged = merge_lora(res.pruned, adapters);
        row.ppl_recovered = perplexity(merged, corpus.validation(), spec.context_length, spec.max_windows).perplexity;
    }
    row.plan = std::move(res.plan);
    row.wall_time_s = seconds_since(t0);
    return row;
}

CompareReport compare_criteria(const ModelCheckpoint& base, const Corpus& corpus, const CompareSpec& spec) {
    if (spec.criteria.empty() || spec.ratios.empty() || spec.seeds.empty())
        throw ConfigError("compare needs at least one criterion, ratio and seed");
    struct Cell {
        Criterion criterion;
        double ratio;
        std::uint64_t seed;
    };
    std::vector<Cell> cells;
    for (auto c : spec.criteria)
        for (double r : spec.ratios)
            for (auto s : spec.seeds) cells.push_back({c, r, s});

    CompareReport report;
    report.base_ppl = perplexity(base, corpus.validation(), spec.context_length, spec.max_windows).perplexity;
    const ParamMacCount pm = count_params_macs(base.config, spec.context_length);
    report.base_params = pm.params;
    report.base_macs = pm.macs;
    report.rows.resize(cells.size());

    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    const auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= cells.size()) return;
            try {
                report.rows[i] = run_cell(base, corpus, spec, cells[i].criterion, cells[i].ratio, cells[i].seed);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                next = cells.size();
            }
        }
    };
    const int threads = std::max(1, std::min<int>(spec.threads, static_cast<int>(cells.size())));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);
    return report;
}

}  // namespace miniprune
