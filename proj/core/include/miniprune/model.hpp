#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "miniprune/tensor.hpp"

namespace miniprune {

enum class FfnKind { kGelu2, kSwiglu3 };
std::string to_string(FfnKind kind);
FfnKind ffn_kind_from_string(const std::string& s);

/// Architecture of the pre-norm decoder.
///
/// `layer_heads` and `layer_d_ff` carry per-layer widths after pruning.
/// When empty every layer uses `n_heads` / `d_ff`. The head width is
/// always d_model / n_heads of the original dense model.
struct ModelConfig {
    int vocab_size = 256;
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int d_ff = 256;
    FfnKind ffn_kind = FfnKind::kGelu2;
    int max_seq_len = 128;
    bool tie_embeddings = false;
    std::vector<int> layer_heads;
    std::vector<int> layer_d_ff;

    int d_head() const { return d_model / n_heads; }
    int heads(int layer) const;
    int ffn_dim(int layer) const;
    int attn_dim(int layer) const { return heads(layer) * d_head(); }
    bool uniform() const;
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

// Canonical tensor names.
namespace names {
inline constexpr const char* kTokEmbed = "embed.tok";
inline constexpr const char* kPosEmbed = "embed.pos";
inline constexpr const char* kFinalGamma = "ln_f.gamma";
inline constexpr const char* kFinalBeta = "ln_f.beta";
inline constexpr const char* kHead = "head.out";
std::string layer(int i, const char* suffix);
inline std::string wq(int i) { return layer(i, "attn.wq"); }
inline std::string wk(int i) { return layer(i, "attn.wk"); }
inline std::string wv(int i) { return layer(i, "attn.wv"); }
inline std::string wo(int i) { return layer(i, "attn.wo"); }
inline std::string w_up(int i) { return layer(i, "ffn.w_up"); }
inline std::string w_gate(int i) { return layer(i, "ffn.w_gate"); }
inline std::string w_down(int i) { return layer(i, "ffn.w_down"); }
inline std::string ln1_gamma(int i) { return layer(i, "ln1.gamma"); }
inline std::string ln1_beta(int i) { return layer(i, "ln1.beta"); }
inline std::string ln2_gamma(int i) { return layer(i, "ln2.gamma"); }
inline std::string ln2_beta(int i) { return layer(i, "ln2.beta"); }
}  // namespace names

struct TensorSpec {
    std::string name;
    Shape shape;
};

/// Every tensor the config implies, in canonical order.
std::vector<TensorSpec> expected_tensors(const ModelConfig& config);
/// Attention projections and FFN matrices, in canonical order.
std::vector<std::string> prunable_tensor_names(const ModelConfig& config);
/// All prunable names plus the output head: the linear maps of the model.
std::vector<std::string> linear_tensor_names(const ModelConfig& config);

struct ModelCheckpoint {
    ModelConfig config;
    std::map<std::string, Tensor> tensors;

    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool bit_equal(const ModelCheckpoint& other) const;
    std::int64_t param_count() const;
};

/// Normal(0, 0.02) projections and embeddings, unit gamma, zero beta.
ModelCheckpoint init_checkpoint(const ModelConfig& config, std::uint64_t seed, float init_std = 0.02f);
/// Throws ConsistencyError if the tensor set or any shape disagrees with config.
void validate_checkpoint(const ModelCheckpoint& ckpt);

/// Row-major token matrix [rows x cols]; each row is one sequence.
struct TokenBatch {
    std::int64_t rows = 0;
    std::int64_t cols = 0;
    std::vector<std::int32_t> tokens;

    TokenBatch() = default;
    TokenBatch(std::int64_t r, std::int64_t c, std::vector<std::int32_t> t);
    static TokenBatch single(std::vector<std::int32_t> seq);
    std::int32_t at(std::int64_t r, std::int64_t c) const { return tokens[static_cast<std::size_t>(r * cols + c)]; }
    std::span<const std::int32_t> row(std::int64_t r) const {
        return std::span<const std::int32_t>(tokens).subspan(static_cast<std::size_t>(r * cols),
                                                             static_cast<std::size_t>(cols));
    }
};

/// Per-input-feature squared activation sums at the input of every
/// prunable linear map, keyed by that map's weight name.
struct ActivationRecord {
    std::map<std::string, Tensor> input_feature_sq_sums;
    std::int64_t token_count = 0;

    void accumulate(const ActivationRecord& other);
};

using GradientBuffers = std::map<std::string, Tensor>;

/// Low-rank side branch on a linear map: y += scale * (x B) A, with
/// B [in x r] and A [r x out]. Pointers are non-owning.
struct LowRankBranch {
    const Tensor* a = nullptr;
    const Tensor* b = nullptr;
    float scale = 1.0f;
};
using LowRankBranches = std::map<std::string, LowRankBranch>;

struct BranchGrads {
    Tensor a;
    Tensor b;
};

struct BackwardOptions {
    bool base_grads = true;
    const LowRankBranches* branches = nullptr;
};

struct BackwardResult {
    double loss = 0.0;
    GradientBuffers grads;
    std::map<std::string, BranchGrads> branch_grads;
};

struct CaptureResult {
    double loss = 0.0;
    ActivationRecord record;
};

/// Mean next-token cross-entropy over the rows x (cols - 1) predicted
/// positions of the batch.
double forward_loss(const ModelCheckpoint& ckpt, const TokenBatch& batch,
                    const LowRankBranches* branches = nullptr);
/// Per-row summed NLL (cols - 1 positions each), for perplexity reduction.
std::vector<double> forward_row_nll(const ModelCheckpoint& ckpt, const TokenBatch& batch,
                                    const LowRankBranches* branches = nullptr);
CaptureResult forward_capture(const ModelCheckpoint& ckpt, const TokenBatch& batch);
/// Exact gradients of forward_loss by a hand-derived reverse pass.
BackwardResult backward(const ModelCheckpoint& ckpt, const TokenBatch& batch, const BackwardOptions& options = {});
/// Logits [cols x vocab] for a single sequence.
Tensor sequence_logits(const ModelCheckpoint& ckpt, std::span<const std::int32_t> tokens);

struct ParamMacCount {
    std::int64_t params = 0;
    std::int64_t macs = 0;
};

/// Parameters from tensor shapes; MACs for one forward pass over seq_len
/// tokens = seq_len * sum(in * out over every linear map incl. the head)
///        + sum over layers of 2 * seq_len^2 * heads * d_head
/// (attention scores plus value mixing, no causal discount).
ParamMacCount count_params_macs(const ModelConfig& config, std::int64_t seq_len);

/// Greedy argmax decoding; ties go to the lower token id. Stops early when
/// the context reaches max_seq_len.
std::vector<std::int32_t> generate_greedy(const ModelCheckpoint& ckpt, std::vector<std::int32_t> prompt,
                                          int max_new);

}  // namespace miniprune
