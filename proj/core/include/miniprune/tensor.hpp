#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "miniprune/rng.hpp"

namespace miniprune {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major float32 array of rank 1..3.
///
/// The element count always equals the product of the shape; every
/// constructor and reshape enforces that.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> data);

    static Tensor from_rows(std::initializer_list<std::initializer_list<float>> rows);
    static Tensor identity(std::int64_t n);

    const Shape& shape() const noexcept { return shape_; }
    int rank() const noexcept { return static_cast<int>(shape_.size()); }
    std::int64_t dim(int axis) const;
    std::int64_t numel() const noexcept { return static_cast<std::int64_t>(data_.size()); }
    std::int64_t rows() const { return dim(0); }
    std::int64_t cols() const { return rank() >= 2 ? shape_.back() : 1; }

    std::span<float> span() noexcept { return data_; }
    std::span<const float> span() const noexcept { return data_; }
    float* data() noexcept { return data_.data(); }
    const float* data() const noexcept { return data_.data(); }
    std::vector<float>& storage() noexcept { return data_; }
    const std::vector<float>& storage() const noexcept { return data_; }

    float& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    float operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }
    float& at(std::int64_t r, std::int64_t c) { return data_[static_cast<std::size_t>(r * cols() + c)]; }
    float at(std::int64_t r, std::int64_t c) const {
        return data_[static_cast<std::size_t>(r * cols() + c)];
    }

    std::span<float> row(std::int64_t r) { return span().subspan(r * cols(), cols()); }
    std::span<const float> row(std::int64_t r) const { return span().subspan(r * cols(), cols()); }

    void reshape(Shape shape);
    void fill(float v);
    bool all_finite() const noexcept;

    // Bitwise equality of shape and payload (distinguishes -0 from +0).
    bool bit_equal(const Tensor& other) const noexcept;

private:
    Shape shape_;
    std::vector<float> data_;
};

// ---------------------------------------------------------------------------
// Kernels. All public kernels are pure and throw NumericalError if their
// output contains NaN or Inf.
// ---------------------------------------------------------------------------

/// C = A * B with A [m x k] and B [k x n]. Each output element is summed
/// over k in ascending order with a single accumulator, so the value of a
/// row never depends on how many other rows are in the batch.
Tensor matmul(const Tensor& a, const Tensor& b);
/// C = A * B^T with B stored as [n x k].
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// C = A^T * B with A stored as [k x m].
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps);

// GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
inline constexpr float kGeluCoeff = 0.044715f;
inline constexpr float kSqrt2OverPi = 0.7978845608028654f;
Tensor gelu(const Tensor& x);
float gelu_scalar(float x);
float gelu_grad_scalar(float x);

/// Mean over rows of -log softmax(logits)[target]. Accumulated in double.
double cross_entropy_mean(const Tensor& logits, std::span<const std::int32_t> targets);

enum class Distribution { kGaussian, kRademacher };
std::string to_string(Distribution d);
Distribution distribution_from_string(const std::string& s);

/// Fills a tensor of the given shape with i.i.d. draws from `rng`,
/// advancing it. Replaying the same stream state reproduces the tensor.
Tensor sample_perturbation(RngStream& rng, const Shape& shape, Distribution distribution);
float draw(RngStream& rng, Distribution distribution);

namespace detail {
// Unchecked kernels for hot paths: out[m x n] = a[m x k] * b[k x n], all
// row-major with the given leading dimensions.
void gemm(const float* a, std::int64_t lda, const float* b, std::int64_t ldb, float* out,
          std::int64_t ldo, std::int64_t m, std::int64_t k, std::int64_t n, bool accumulate);
void transpose_into(const float* src, std::int64_t rows, std::int64_t cols, std::int64_t ld_src,
                    float* dst, std::int64_t ld_dst);
void require_finite(const Tensor& t, const char* kernel);
}  // namespace detail

}  // namespace miniprune
