#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "miniprune/model.hpp"
#include "miniprune/pruner.hpp"
#include "miniprune/rng.hpp"
#include "miniprune/scoring.hpp"

namespace miniprune {

// ---------------------------------------------------------------------------
// Tokenization and corpora
// ---------------------------------------------------------------------------

inline constexpr int kByteVocab = 256;

std::vector<std::int32_t> tokenize_bytes(std::string_view text);
std::string detokenize_bytes(std::span<const std::int32_t> tokens);

struct Corpus {
    std::vector<std::int32_t> tokens;
    int vocab_size = kByteVocab;
    std::string source;
    std::int64_t train_end = 0;  // tokens[0, train_end) train, rest validation

    std::span<const std::int32_t> train() const;
    std::span<const std::int32_t> validation() const;
};

/// Reads a byte corpus; `train_fraction` of it (rounded down) is the train split.
Corpus load_corpus(const std::filesystem::path& path, double train_fraction);
Corpus make_corpus(std::string_view text, double train_fraction, std::string source = "<memory>");

/// Deterministic English-like text from a small probabilistic grammar.
std::string synthesize_corpus(std::uint64_t seed, std::size_t bytes);

/// Shuffled windows of seq_len + 1 tokens. Each epoch tiles the token
/// stream from a random offset with stride seq_len + 1, shuffles the
/// windows, and yields them batch_size at a time (the final partial batch
/// of an epoch is dropped). The stream continues into later epochs.
class BatchIterator {
public:
    BatchIterator(std::span<const std::int32_t> tokens, int batch_size, int seq_len, std::uint64_t seed);

    TokenBatch next();
    std::int64_t windows_per_epoch() const noexcept { return windows_per_epoch_; }
    std::int64_t batches_per_epoch() const noexcept { return windows_per_epoch_ / batch_size_; }
    std::int64_t epoch() const noexcept { return epoch_; }
    /// Start offsets of the current epoch, in yield order.
    const std::vector<std::int64_t>& epoch_starts() const noexcept { return starts_; }

private:
    void begin_epoch();

    std::span<const std::int32_t> tokens_;
    int batch_size_;
    int seq_len_;
    std::uint64_t seed_;
    std::int64_t windows_per_epoch_ = 0;
    std::int64_t epoch_ = -1;
    std::size_t cursor_ = 0;
    std::vector<std::int64_t> starts_;
};

/// `count` windows of `length` tokens at uniformly random start positions.
TokenBatch sample_windows(std::span<const std::int32_t> tokens, int count, int length, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Manifest + raw little-endian f32 container
// ---------------------------------------------------------------------------

inline constexpr int kFormatVersion = 1;

struct ContainerContents {
    nlohmann::json meta;
    std::map<std::string, Tensor> tensors;
    std::vector<std::string> order;
};

/// Writes `<dir>/<stem>.bin` then `<dir>/<stem>.json`, each through a temp
/// file and rename. Tensors are laid out in `order`.
void write_container(const std::filesystem::path& dir, const std::string& stem, const nlohmann::json& meta,
                     const std::map<std::string, Tensor>& tensors, const std::vector<std::string>& order);
/// Validates version, record layout and checksum before returning anything.
ContainerContents read_container(const std::filesystem::path& manifest_path);

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& dir);
/// Accepts the directory or the path of its model.json.
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json plan_to_json(const PrunePlan& plan);
PrunePlan plan_from_json(const nlohmann::json& j);
void save_plan(const PrunePlan& plan, const std::filesystem::path& file);
PrunePlan load_plan(const std::filesystem::path& file);

void save_scores(const SensitivityMap& map, const std::filesystem::path& dir);
SensitivityMap load_scores(const std::filesystem::path& path);

/// Writes text to `file` through a temp file and rename.
void write_text_atomic(const std::filesystem::path& file, const std::string& text);
std::string read_text(const std::filesystem::path& file);

}  // namespace miniprune
