#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "miniprune/model.hpp"

namespace miniprune::testing {

ModelConfig tiny_config(int d_model, int n_layers, int n_heads, int d_ff, FfnKind ffn = FfnKind::kGelu2,
                        int vocab = 32, int max_seq = 16);

TokenBatch random_batch(std::int64_t rows, std::int64_t cols, int vocab, std::uint64_t seed);

/// Independent double-precision forward: mean next-token cross-entropy.
/// Written directly from the architecture description with naive loops;
/// shares no code with the library's engine.
double reference_loss(const ModelCheckpoint& ckpt, const TokenBatch& batch);

/// Fresh directory under the system temp path, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag);
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

private:
    std::filesystem::path path_;
};

std::string read_bytes(const std::filesystem::path& file);

}  // namespace miniprune::testing

namespace miniprune::testing {

struct FdReport {
    double max_rel_error = 0.0;
    double max_scaled_error = 0.0;
    int checked = 0;
    std::string worst;
};

/// Compares backward() with central differences of reference_loss at
/// `samples` coordinates drawn uniformly from the full parameter vector.
/// Step h = 1e-3 * max(|w|, 1e-2); the error is |a - fd| / (|a| + 1e-6).
/// max_scaled_error divides by max(|a|, |fd|, 1e-3 max |g|) instead, which
/// discounts the float noise of entries far below the largest gradient.
FdReport finite_difference_check(const ModelCheckpoint& ckpt, const TokenBatch& batch, int samples,
                                 std::uint64_t seed);

}  // namespace miniprune::testing
