#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "miniprune/model.hpp"
#include "miniprune/zo.hpp"

namespace miniprune {

/// Low-rank adapter on one linear map W0 [out x in]:
///   y = x W0^T + scale * (x B) A,   B [in x r] (zero-init), A [r x out].
struct LoraAdapter {
    std::string target;
    Tensor a;
    Tensor b;
    int r = 8;
    float alpha = 16.0f;
    float scale = 2.0f;
};

class AdapterSet {
public:
    std::map<std::string, LoraAdapter> adapters;

    bool consumed() const noexcept { return consumed_; }
    void mark_consumed() noexcept { consumed_ = true; }
    LowRankBranches branches() const;
    std::int64_t param_count() const;
    /// The A and B tensors as perturbable parameters ("lora.<target>.A" / ".B").
    zo::ParamList params();

private:
    bool consumed_ = false;
};

struct LoraOptions {
    int r = 8;
    float alpha = 16.0f;
    // Literal f(x) = x W0 + x B A, i.e. scale 1 instead of alpha / r.
    bool literal_scale = false;
    float a_init_std = 0.02f;
    std::uint64_t seed = 0;
};

/// Default targets: every attention and FFN matrix.
std::vector<std::string> default_lora_targets(const ModelConfig& config);

/// Throws ConfigError for unknown or non-linear targets and for
/// r > min(in, out) / 2.
AdapterSet attach_lora(const ModelCheckpoint& ckpt, const std::vector<std::string>& targets, const LoraOptions& options);

/// x W0^T + scale (x B) A for x [n x in] and W0 [out x in].
Tensor lora_forward(const Tensor& x, const Tensor& w0, const LoraAdapter& adapter);

/// W0 <- W0 + scale (B A)^T for every adapter; marks the set consumed so
/// it cannot be merged a second time.
ModelCheckpoint merge_lora(const ModelCheckpoint& ckpt, AdapterSet& adapters);

void save_adapters(const AdapterSet& adapters, const std::filesystem::path& dir);
AdapterSet load_adapters(const std::filesystem::path& path);

enum class Optimizer { kAdamW, kZoSgd };
std::string to_string(Optimizer o);
Optimizer optimizer_from_string(const std::string& s);

struct TrainConfig {
    double learning_rate = 1e-4;
    int epochs = 2;
    int batch_size = 64;
    int seq_len = 128;
    Optimizer optimizer = Optimizer::kAdamW;
    std::uint64_t seed = 0;
    // When positive, overrides the epoch-derived step count.
    std::int64_t max_steps = 0;
    std::int64_t warmup_steps = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    // Global gradient-norm clip; 0 disables it.
    double grad_clip = 0.0;
    // Perturbation settings of the zo_sgd optimizer.
    zo::PerturbSpec zo;

    void validate() const;
};

/// Linear warmup then cosine decay to zero over total_steps.
double cosine_lr(const TrainConfig& cfg, std::int64_t step, std::int64_t total_steps);

struct TrainLog {
    std::vector<double> loss;  // one per step
    std::vector<double> lr;
    std::int64_t steps = 0;
};

using StepCallback = std::function<void(std::int64_t step, double loss, double lr)>;

/// Number of optimizer steps train_recovery/train_full will take.
std::int64_t planned_steps(const TrainConfig& cfg, std::span<const std::int32_t> tokens);

/// Updates only adapter tensors; the checkpoint is never written.
/// Throws TrainingError on a non-finite loss.
TrainLog train_recovery(const ModelCheckpoint& ckpt, AdapterSet& adapters, std::span<const std::int32_t> tokens,
                        const TrainConfig& cfg, const StepCallback& on_step = {});

/// Full-parameter AdamW training of every tensor (base model pretraining).
TrainLog train_full(ModelCheckpoint& ckpt, std::span<const std::int32_t> tokens, const TrainConfig& cfg,
                    const StepCallback& on_step = {});

}  // namespace miniprune
