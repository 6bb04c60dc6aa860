#include "miniprune/recovery.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <json.hpp>

#include "miniprune/dataio.hpp"
#include "miniprune/error.hpp"

namespace miniprune {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string a_name(const std::string& target) { return "lora." + target + ".A"; }
std::string b_name(const std::string& target) { return "lora." + target + ".B"; }

struct AdamState {
    Tensor m;
    Tensor v;
};

class AdamW {
public:
    explicit AdamW(const TrainConfig& cfg) : cfg_(cfg) {}

    void step(const std::string& name, Tensor& w, const Tensor& g, double lr, double grad_scale) {
        auto [it, fresh] = state_.try_emplace(name);
        if (fresh) it->second = {Tensor(w.shape()), Tensor(w.shape())};
        AdamState& s = it->second;
        const double b1 = cfg_.beta1, b2 = cfg_.beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        for (std::int64_t i = 0; i < w.numel(); ++i) {
            const double gi = g[i] * grad_scale;
            const double m = b1 * s.m[i] + (1.0 - b1) * gi;
            const double v = b2 * s.v[i] + (1.0 - b2) * gi * gi;
            s.m[i] = static_cast<float>(m);
            s.v[i] = static_cast<float>(v);
            const double update = (m / c1) / (std::sqrt(v / c2) + cfg_.adam_eps) + cfg_.weight_decay * w[i];
            w[i] = static_cast<float>(w[i] - lr * update);
        }
    }

    void next() { ++t_; }

private:
    const TrainConfig& cfg_;
    std::map<std::string, AdamState> state_;
    std::int64_t t_ = 0;
};

double clip_factor(const TrainConfig& cfg, const std::vector<const Tensor*>& grads) {
    if (cfg.grad_clip <= 0.0) return 1.0;
    double sq = 0.0;
    for (const Tensor* g : grads)
        for (float x : g->span()) sq += static_cast<double>(x) * x;
    const double norm = std::sqrt(sq);
    return norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0;
}

template <class Fn>
auto guarded(std::int64_t step, Fn&& fn) {
    try {
        return fn();
    } catch (const NumericalError& e) {
        throw TrainingError(std::string("training diverged: ") + e.what(), step);
    }
}

}  // namespace

LowRankBranches AdapterSet::branches() const {
    LowRankBranches out;
    for (const auto& [name, ad] : adapters) out[name] = {&ad.a, &ad.b, ad.scale};
    return out;
}

std::int64_t AdapterSet::param_count() const {
    std::int64_t n = 0;
    for (const auto& [name, ad] : adapters) n += ad.a.numel() + ad.b.numel();
    return n;
}

zo::ParamList AdapterSet::params() {
    zo::ParamList out;
    for (auto& [name, ad] : adapters) {
        out.push_back({a_name(name), &ad.a});
        out.push_back({b_name(name), &ad.b});
    }
    return out;
}

std::vector<std::string> default_lora_targets(const ModelConfig& config) { return prunable_tensor_names(config); }

AdapterSet attach_lora(const ModelCheckpoint& ckpt, const std::vector<std::string>& targets, const LoraOptions& options) {
    if (options.r <= 0) throw ConfigError("LoRA rank must be positive");
    if (!(options.alpha > 0.0f)) throw ConfigError("LoRA alpha must be positive");
    if (targets.empty()) throw ConfigError("no LoRA targets given");
    const auto linear = linear_tensor_names(ckpt.config);
    AdapterSet set;
    for (const auto& target : targets) {
        if (std::find(linear.begin(), linear.end(), target) == linear.end())
            throw ConfigError("unknown LoRA target '" + target + "' (not a linear weight of this model)");
        if (set.adapters.contains(target)) throw ConfigError("duplicate LoRA target '" + target + "'");
        const Tensor& w = ckpt.at(target);
        const std::int64_t out = w.rows(), in = w.cols();
        if (2 * static_cast<std::int64_t>(options.r) > std::min(in, out))
            throw ConfigError("LoRA rank " + std::to_string(options.r) + " exceeds min(" + std::to_string(in) + ", " +
                              std::to_string(out) + ")/2 for " + target);
        LoraAdapter ad;
        ad.target = target;
        ad.r = options.r;
        ad.alpha = options.alpha;
        ad.scale = options.literal_scale ? 1.0f : options.alpha / static_cast<float>(options.r);
        ad.b = Tensor({in, options.r});
        ad.a = Tensor({options.r, out});
        RngStream rng(options.seed, fnv1a64(a_name(target)));
        for (auto& x : ad.a.storage()) x = static_cast<float>(rng.next_gaussian()) * options.a_init_std;
        set.adapters.emplace(target, std::move(ad));
    }
    return set;
}

Tensor lora_forward(const Tensor& x, const Tensor& w0, const LoraAdapter& ad) {
    if (x.rank() != 2 || w0.rank() != 2) throw DimensionError("lora_forward expects 2-D x and W0");
    if (x.cols() != w0.cols())
        throw DimensionError("lora_forward: x " + shape_to_string(x.shape()) + " incompatible with W0 " +
                             shape_to_string(w0.shape()));
    if (ad.b.rank() != 2 || ad.a.rank() != 2 || ad.b.rows() != w0.cols() || ad.a.cols() != w0.rows() ||
        ad.b.cols() != ad.a.rows())
        throw DimensionError("lora_forward: adapter shapes B " + shape_to_string(ad.b.shape()) + ", A " +
                             shape_to_string(ad.a.shape()) + " do not fit W0 " + shape_to_string(w0.shape()));
    Tensor y = matmul_nt(x, w0);
    const Tensor delta = matmul(matmul(x, ad.b), ad.a);
    for (std::int64_t i = 0; i < y.numel(); ++i)
        if (delta[i] != 0.0f) y[i] += ad.scale * delta[i];
    return y;
}

ModelCheckpoint merge_lora(const ModelCheckpoint& ckpt, AdapterSet& adapters) {
    if (adapters.consumed()) throw ConsistencyError("adapters were already merged");
    ModelCheckpoint out = ckpt;
    for (const auto& [target, ad] : adapters.adapters) {
        auto it = out.tensors.find(target);
        if (it == out.tensors.end()) throw ConsistencyError("adapter target '" + target + "' not in checkpoint");
        Tensor& w = it->second;
        if (ad.b.rows() != w.cols() || ad.a.cols() != w.rows())
            throw ConsistencyError("adapter for " + target + " does not match weight " + shape_to_string(w.shape()));
        const Tensor ba = matmul(ad.b, ad.a);  // [in x out]
        for (std::int64_t o = 0; o < w.rows(); ++o)
            for (std::int64_t i = 0; i < w.cols(); ++i) {
                const float d = ba.at(i, o);
                if (d != 0.0f) w.at(o, i) += ad.scale * d;
            }
        if (!w.all_finite()) throw NumericalError("merge produced non-finite weights in " + target);
    }
    adapters.mark_consumed();
    return out;
}

void save_adapters(const AdapterSet& set, const fs::path& dir) {
    std::map<std::string, Tensor> tensors;
    std::vector<std::string> order;
    json records = json::array();
    for (const auto& [target, ad] : set.adapters) {
        tensors.emplace(a_name(target), ad.a);
        tensors.emplace(b_name(target), ad.b);
        order.push_back(a_name(target));
        order.push_back(b_name(target));
        records.push_back({{"target", target}, {"r", ad.r}, {"alpha", ad.alpha}, {"scale", ad.scale}});
    }
    json meta = {{"kind", "adapters"}, {"adapters", records}};
    if (!set.adapters.empty()) {
        meta["r"] = set.adapters.begin()->second.r;
        meta["alpha"] = set.adapters.begin()->second.alpha;
    }
    write_container(dir, "adapters", meta, tensors, order);
}

AdapterSet load_adapters(const fs::path& path) {
    const fs::path manifest = fs::is_directory(path) ? path / "adapters.json" : path;
    ContainerContents c = read_container(manifest);
    if (c.meta.value("kind", "") != "adapters") throw LoadError(manifest.string() + ": not an adapter manifest");
    AdapterSet set;
    try {
        for (const auto& rec : c.meta.at("adapters")) {
            LoraAdapter ad;
            ad.target = rec.at("target").get<std::string>();
            ad.r = rec.at("r").get<int>();
            ad.alpha = rec.at("alpha").get<float>();
            ad.scale = rec.at("scale").get<float>();
            auto ia = c.tensors.find(a_name(ad.target));
            auto ib = c.tensors.find(b_name(ad.target));
            if (ia == c.tensors.end() || ib == c.tensors.end())
                throw LoadError(manifest.string() + ": missing tensors for adapter '" + ad.target + "'");
            ad.a = std::move(ia->second);
            ad.b = std::move(ib->second);
            if (ad.a.rank() != 2 || ad.b.rank() != 2 || ad.a.rows() != ad.r || ad.b.cols() != ad.r)
                throw LoadError(manifest.string() + ": record '" + a_name(ad.target) + "' disagrees with r");
            set.adapters.emplace(ad.target, std::move(ad));
        }
    } catch (const json::exception& e) {
        throw LoadError(manifest.string() + ": " + e.what());
    }
    return set;
}

std::string to_string(Optimizer o) { return o == Optimizer::kAdamW ? "adamw" : "zo_sgd"; }

Optimizer optimizer_from_string(const std::string& s) {
    if (s == "adamw") return Optimizer::kAdamW;
    if (s == "zo_sgd") return Optimizer::kZoSgd;
    throw ConfigError("unknown optimizer '" + s + "'");
}

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be >= 0");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1 || seq_len < 1) throw ConfigError("batch_size and seq_len must be positive");
    if (max_steps < 0 || warmup_steps < 0) throw ConfigError("step counts must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam betas must lie in [0, 1)");
    if (optimizer == Optimizer::kZoSgd) zo.validate();
}

double cosine_lr(const TrainConfig& cfg, std::int64_t step, std::int64_t total_steps) {
    if (step < cfg.warmup_steps)
        return cfg.learning_rate * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
    const std::int64_t span = std::max<std::int64_t>(1, total_steps - cfg.warmup_steps);
    const double progress = static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span);
    return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::int64_t planned_steps(const TrainConfig& cfg, std::span<const std::int32_t> tokens) {
    if (cfg.max_steps > 0) return cfg.max_steps;
    BatchIterator it(tokens, cfg.batch_size, cfg.seq_len, cfg.seed);
    return static_cast<std::int64_t>(cfg.epochs) * it.batches_per_epoch();
}

TrainLog train_recovery(const ModelCheckpoint& ckpt, AdapterSet& adapters, std::span<const std::int32_t> tokens,
                        const TrainConfig& cfg, const StepCallback& on_step) {
    cfg.validate();
    if (adapters.consumed()) throw ConsistencyError("cannot train adapters that were already merged");
    if (adapters.adapters.empty()) throw ConfigError("no adapters to train");
    for (const auto& [target, ad] : adapters.adapters) {
        auto it = ckpt.tensors.find(target);
        if (it == ckpt.tensors.end() || it->second.rows() != ad.a.cols() || it->second.cols() != ad.b.rows())
            throw ConsistencyError("adapter '" + target + "' does not match the checkpoint");
    }
    BatchIterator batches(tokens, cfg.batch_size, cfg.seq_len, cfg.seed);
    const std::int64_t total = planned_steps(cfg, tokens);
    TrainLog log;
    AdamW adam(cfg);
    zo::PerturbSpec zspec = cfg.zo;
    zspec.base_seed = mix64(cfg.seed ^ zspec.base_seed);

    for (std::int64_t step = 0; step < total; ++step) {
        const TokenBatch batch = batches.next();
        const double lr = cosine_lr(cfg, step, total);
        double loss = 0.0;
        if (cfg.optimizer == Optimizer::kAdamW) {
            const LowRankBranches br = adapters.branches();
            BackwardOptions opts;
            opts.base_grads = false;
            opts.branches = &br;
            const BackwardResult res = guarded(step, [&] { return backward(ckpt, batch, opts); });
            loss = res.loss;
            if (!std::isfinite(loss)) throw TrainingError("non-finite recovery loss", step);
            std::vector<const Tensor*> gs;
            for (const auto& [name, g] : res.branch_grads) {
                gs.push_back(&g.a);
                gs.push_back(&g.b);
            }
            const double f = clip_factor(cfg, gs);
            adam.next();
            for (auto& [name, ad] : adapters.adapters) {
                const BranchGrads& g = res.branch_grads.at(name);
                adam.step(a_name(name), ad.a, g.a, lr, f);
                adam.step(b_name(name), ad.b, g.b, lr, f);
            }
        } else {
            zo::ParamList params = adapters.params();
            double sum = 0.0;
            for (int s = 0; s < zspec.n_samples; ++s) {
                const int sample = static_cast<int>(step * zspec.n_samples + s);
                std::vector<Tensor> saved;
                for (const auto& p : params) saved.push_back(*p.tensor);
                const std::function<double()> loss_fn = [&] {
                    const LowRankBranches br = adapters.branches();
                    return forward_loss(ckpt, batch, &br);
                };
                const zo::LossDeltaEntry e =
                    guarded(step, [&] { return zo::estimate_loss_delta(params, loss_fn, zspec, sample); });
                for (std::size_t i = 0; i < params.size(); ++i) *params[i].tensor = std::move(saved[i]);
                sum += 0.5 * (e.loss_plus + e.loss_minus);
                const double g = (e.loss_plus - e.loss_minus) / (2.0 * zspec.epsilon);
                const auto scale = static_cast<float>(-lr * g / zspec.n_samples);
                zo::perturb_in_place(params, zspec, sample, scale);
            }
            loss = sum / zspec.n_samples;
        }
        if (!std::isfinite(loss)) throw TrainingError("non-finite recovery loss", step);
        for (const auto& [name, ad] : adapters.adapters)
            if (!ad.a.all_finite() || !ad.b.all_finite()) throw TrainingError("non-finite adapter " + name, step);
        log.loss.push_back(loss);
        log.lr.push_back(lr);
        log.steps = step + 1;
        if (on_step) on_step(step, loss, lr);
    }
    return log;
}

TrainLog train_full(ModelCheckpoint& ckpt, std::span<const std::int32_t> tokens, const TrainConfig& cfg,
                    const StepCallback& on_step) {
    cfg.validate();
    if (cfg.optimizer != Optimizer::kAdamW) throw ConfigError("full-parameter training supports adamw only");
    validate_checkpoint(ckpt);
    BatchIterator batches(tokens, cfg.batch_size, cfg.seq_len, cfg.seed);
    const std::int64_t total = planned_steps(cfg, tokens);
    TrainLog log;
    AdamW adam(cfg);
    for (std::int64_t step = 0; step < total; ++step) {
        const TokenBatch batch = batches.next();
        const double lr = cosine_lr(cfg, step, total);
        const BackwardResult res = guarded(step, [&] { return backward(ckpt, batch); });
        if (!std::isfinite(res.loss)) throw TrainingError("non-finite training loss", step);
        std::vector<const Tensor*> gs;
        for (const auto& [name, g] : res.grads) gs.push_back(&g);
        const double f = clip_factor(cfg, gs);
        adam.next();
        for (const auto& [name, g] : res.grads) adam.step(name, ckpt.at(name), g, lr, f);
        for (const auto& [name, w] : ckpt.tensors)
            if (!w.all_finite()) throw TrainingError("non-finite weights in " + name, step);
        log.loss.push_back(res.loss);
        log.lr.push_back(lr);
        log.steps = step + 1;
        if (on_step) on_step(step, res.loss, lr);
    }
    return log;
}

}  // namespace miniprune
