#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "miniprune/dataio.hpp"
#include "miniprune/model.hpp"
#include "miniprune/pruner.hpp"
#include "miniprune/recovery.hpp"

namespace miniprune {

struct PplResult {
    double perplexity = 0.0;
    double mean_nll = 0.0;
    std::int64_t windows = 0;
    std::int64_t predictions = 0;
};

/// exp(mean next-token NLL) over consecutive non-overlapping windows of
/// context_length tokens (context_length - 1 predictions each). A trailing
/// partial window is dropped. max_windows > 0 caps the count.
PplResult perplexity(const ModelCheckpoint& ckpt, std::span<const std::int32_t> tokens, int context_length,
                     std::int64_t max_windows = 0);

struct EvalReport {
    std::string model_id;
    std::string dataset_id;
    int context_length = 0;
    double perplexity = 0.0;
    double mean_nll = 0.0;
    std::int64_t windows = 0;
    std::int64_t param_count = 0;
    std::int64_t mac_count = 0;
    double wall_time_s = 0.0;

    nlohmann::json to_json() const;
};

EvalReport evaluate(const ModelCheckpoint& ckpt, std::span<const std::int32_t> tokens, int context_length,
                    std::int64_t max_windows, std::string model_id, std::string dataset_id);

struct CompareSpec {
    std::vector<Criterion> criteria;
    std::vector<double> ratios;
    std::vector<std::uint64_t> seeds;
    int protect_first = 1;
    int protect_last = 1;
    zo::PerturbSpec zo;
    int grad_samples = 10;
    int act_samples = 128;
    int calib_len = 128;
    bool recover = true;
    TrainConfig train;
    LoraOptions lora;
    int context_length = 128;
    std::int64_t max_windows = 0;
    int threads = 1;
};

struct CompareRow {
    std::string criterion;
    double ratio = 0.0;
    std::uint64_t seed = 0;
    double ppl_pruned = 0.0;
    std::optional<double> ppl_recovered;
    std::int64_t params = 0;
    std::int64_t macs = 0;
    double removed_all = 0.0;       // fraction of all parameters removed
    double removed_prunable = 0.0;  // fraction of attention + FFN parameters removed
    double wall_time_s = 0.0;
    PrunePlan plan;

    nlohmann::json to_json() const;
};

struct CompareReport {
    double base_ppl = 0.0;
    std::int64_t base_params = 0;
    std::int64_t base_macs = 0;
    std::vector<CompareRow> rows;  // criteria x ratios x seeds, seed fastest

    std::string to_jsonl() const;
    std::string to_text() const;
};

/// Calibration and recovery data of one seed; identical across criteria
/// so every arm sees the same batches and budget.
struct SeedStreams {
    std::uint64_t calib_grad;
    std::uint64_t calib_act;
    std::uint64_t zo;
    std::uint64_t train;
    std::uint64_t lora;
};
SeedStreams derive_seed_streams(std::uint64_t seed);

/// One grid cell: prune, evaluate, optionally recover and evaluate again.
CompareRow run_cell(const ModelCheckpoint& base, const Corpus& corpus, const CompareSpec& spec, Criterion criterion,
                    double ratio, std::uint64_t seed);

/// Runs every (criterion, ratio, seed) cell, up to spec.threads at once,
/// and reports the rows in grid order.
CompareReport compare_criteria(const ModelCheckpoint& base, const Corpus& corpus, const CompareSpec& spec);

}  // namespace miniprune
