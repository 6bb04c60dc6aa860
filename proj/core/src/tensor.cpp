#include "miniprune/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

#include "miniprune/error.hpp"

namespace miniprune {

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
    if (shape.empty() || shape.size() > 3)
        throw DimensionError("tensor rank must be 1..3, got shape " + shape_to_string(shape));
    for (auto d : shape)
        if (d <= 0) throw DimensionError("tensor dimensions must be positive: " + shape_to_string(shape));
}

}  // namespace

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(static_cast<std::size_t>(shape_numel(shape_)), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_))
        throw DimensionError("data length " + std::to_string(data_.size()) + " does not match shape " +
                             shape_to_string(shape_));
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
    const auto r = static_cast<std::int64_t>(rows.size());
    const auto c = r ? static_cast<std::int64_t>(rows.begin()->size()) : 0;
    std::vector<float> data;
    data.reserve(static_cast<std::size_t>(r * c));
    for (const auto& row : rows) {
        if (static_cast<std::int64_t>(row.size()) != c) throw DimensionError("ragged rows");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
}

Tensor Tensor::identity(std::int64_t n) {
    Tensor t({n, n});
    for (std::int64_t i = 0; i < n; ++i) t.at(i, i) = 1.0f;
    return t;
}

std::int64_t Tensor::dim(int axis) const {
    if (axis < 0 || axis >= rank()) throw IndexError("axis out of range");
    return shape_[static_cast<std::size_t>(axis)];
}

void Tensor::reshape(Shape shape) {
    validate_shape(shape);
    if (shape_numel(shape) != numel())
        throw DimensionError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
    shape_ = std::move(shape);
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const noexcept {
    for (float v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

bool Tensor::bit_equal(const Tensor& other) const noexcept {
    return shape_ == other.shape_ && data_.size() == other.data_.size() &&
           (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(float)) == 0);
}

namespace detail {

void require_finite(const Tensor& t, const char* kernel) {
    if (!t.all_finite()) throw NumericalError(std::string(kernel) + ": non-finite value in output");
}

namespace {

constexpr std::int64_t kTileRows = 4;
constexpr std::int64_t kTileCols = 64;

// 4 x NC register tile over a packed B panel (row stride NC). Every output
// element is acc = 0, acc = acc + a*b for k ascending, whatever the panel
// width, so padding never changes a computed value.
template <std::int64_t NC>
void gemm_tile(const float* a, std::int64_t lda, const float* panel, float* out, std::int64_t k) {
    alignas(64) float acc[kTileRows][NC] = {};
    for (std::int64_t p = 0; p < k; ++p) {
        const float* brow = panel + p * NC;
        const float a0 = a[p];
        const float a1 = a[lda + p];
        const float a2 = a[2 * lda + p];
        const float a3 = a[3 * lda + p];
        for (std::int64_t j = 0; j < NC; ++j) {
            const float bv = brow[j];
            acc[0][j] += a0 * bv;
            acc[1][j] += a1 * bv;
            acc[2][j] += a2 * bv;
            acc[3][j] += a3 * bv;
        }
    }
    for (std::int64_t r = 0; r < kTileRows; ++r) std::memcpy(out + r * NC, acc[r], sizeof(float) * NC);
}

std::int64_t panel_width(std::int64_t cols) { return cols <= 16 ? 16 : cols <= 32 ? 32 : 64; }

}  // namespace

void gemm(const float* a, std::int64_t lda, const float* b, std::int64_t ldb, float* out,
          std::int64_t ldo, std::int64_t m, std::int64_t k, std::int64_t n, bool accumulate) {
    if (m <= 0 || n <= 0) return;
    thread_local std::vector<float> panel, arows;
    alignas(64) float tile[kTileRows * kTileCols];
    for (std::int64_t j0 = 0; j0 < n; j0 += kTileCols) {
        const std::int64_t cols = std::min(kTileCols, n - j0);
        const std::int64_t nc = panel_width(cols);
        panel.assign(static_cast<std::size_t>(std::max<std::int64_t>(k, 1) * nc), 0.0f);
        for (std::int64_t p = 0; p < k; ++p)
            std::memcpy(panel.data() + p * nc, b + p * ldb + j0, sizeof(float) * static_cast<std::size_t>(cols));
        for (std::int64_t i0 = 0; i0 < m; i0 += kTileRows) {
            const std::int64_t rows = std::min(kTileRows, m - i0);
            const float* ablk = a + i0 * lda;
            std::int64_t stride = lda;
            if (rows < kTileRows) {
                arows.assign(static_cast<std::size_t>(kTileRows * std::max<std::int64_t>(k, 1)), 0.0f);
                for (std::int64_t r = 0; r < rows; ++r)
                    std::memcpy(arows.data() + r * k, ablk + r * lda, sizeof(float) * static_cast<std::size_t>(k));
                ablk = arows.data();
                stride = k;
            }
            switch (nc) {
                case 16: gemm_tile<16>(ablk, stride, panel.data(), tile, k); break;
                case 32: gemm_tile<32>(ablk, stride, panel.data(), tile, k); break;
                default: gemm_tile<64>(ablk, stride, panel.data(), tile, k); break;
            }
            for (std::int64_t r = 0; r < rows; ++r) {
                float* dst = out + (i0 + r) * ldo + j0;
                const float* src = tile + r * nc;
                if (accumulate)
                    for (std::int64_t j = 0; j < cols; ++j) dst[j] += src[j];
                else
                    std::memcpy(dst, src, sizeof(float) * static_cast<std::size_t>(cols));
            }
        }
    }
}

void transpose_into(const float* src, std::int64_t rows, std::int64_t cols, std::int64_t ld_src,
                    float* dst, std::int64_t ld_dst) {
    constexpr std::int64_t kBlock = 32;
    for (std::int64_t i0 = 0; i0 < rows; i0 += kBlock)
        for (std::int64_t j0 = 0; j0 < cols; j0 += kBlock) {
            const std::int64_t i1 = std::min(rows, i0 + kBlock);
            const std::int64_t j1 = std::min(cols, j0 + kBlock);
            for (std::int64_t i = i0; i < i1; ++i)
                for (std::int64_t j = j0; j < j1; ++j) dst[j * ld_dst + i] = src[i * ld_src + j];
        }
}

}  // namespace detail

namespace {

void require_matrix(const Tensor& t, const char* what) {
    if (t.rank() != 2) throw DimensionError(std::string(what) + " must be a matrix, got " + shape_to_string(t.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul lhs");
    require_matrix(b, "matmul rhs");
    if (a.cols() != b.rows())
        throw DimensionError("matmul inner dimensions differ: " + shape_to_string(a.shape()) + " x " +
                             shape_to_string(b.shape()));
    Tensor c({a.rows(), b.cols()});
    detail::gemm(a.data(), a.cols(), b.data(), b.cols(), c.data(), c.cols(), a.rows(), a.cols(), b.cols(), false);
    detail::require_finite(c, "matmul");
    return c;
}

Tensor transpose(const Tensor& a) {
    require_matrix(a, "transpose input");
    Tensor t({a.cols(), a.rows()});
    detail::transpose_into(a.data(), a.rows(), a.cols(), a.cols(), t.data(), t.cols());
    return t;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul(a, transpose(b)); }

Tensor matmul_tn(const Tensor& a, const Tensor& b) { return matmul(transpose(a), b); }

Tensor softmax_rows(const Tensor& x) {
    require_matrix(x, "softmax input");
    detail::require_finite(x, "softmax_rows input");
    Tensor y(x.shape());
    for (std::int64_t r = 0; r < x.rows(); ++r) {
        auto in = x.row(r);
        auto out = y.row(r);
        const float mx = *std::max_element(in.begin(), in.end());
        double sum = 0.0;
        for (std::size_t j = 0; j < in.size(); ++j) {
            out[j] = std::exp(in[j] - mx);
            sum += out[j];
        }
        const auto inv = static_cast<float>(1.0 / sum);
        for (auto& v : out) v *= inv;
    }
    detail::require_finite(y, "softmax_rows");
    return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    require_matrix(x, "layer_norm input");
    if (!(eps > 0.0f)) throw ConfigError("layer_norm eps must be positive");
    const auto n = x.cols();
    if (gamma.numel() != n || beta.numel() != n) throw DimensionError("layer_norm affine size mismatch");
    Tensor y(x.shape());
    for (std::int64_t r = 0; r < x.rows(); ++r) {
        auto in = x.row(r);
        auto out = y.row(r);
        double mean = 0.0;
        for (float v : in) mean += v;
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (float v : in) var += (v - mean) * (v - mean);
        var /= static_cast<double>(n);
        const double rstd = 1.0 / std::sqrt(var + eps);
        for (std::int64_t j = 0; j < n; ++j)
            out[j] = static_cast<float>((in[j] - mean) * rstd) * gamma[j] + beta[j];
    }
    detail::require_finite(y, "layer_norm");
    return y;
}

float gelu_scalar(float x) {
    const float inner = kSqrt2OverPi * (x + kGeluCoeff * x * x * x);
    return 0.5f * x * (1.0f + std::tanh(inner));
}

float gelu_grad_scalar(float x) {
    const float inner = kSqrt2OverPi * (x + kGeluCoeff * x * x * x);
    const float t = std::tanh(inner);
    const float dinner = kSqrt2OverPi * (1.0f + 3.0f * kGeluCoeff * x * x);
    return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * dinner;
}

Tensor gelu(const Tensor& x) {
    Tensor y(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = gelu_scalar(x[i]);
    detail::require_finite(y, "gelu");
    return y;
}

double cross_entropy_mean(const Tensor& logits, std::span<const std::int32_t> targets) {
    require_matrix(logits, "cross_entropy logits");
    if (static_cast<std::int64_t>(targets.size()) != logits.rows())
        throw DimensionError("cross_entropy: one target per logits row required");
    if (targets.empty()) throw InputError("cross_entropy: no positions");
    const auto vocab = logits.cols();
    double total = 0.0;
    for (std::int64_t r = 0; r < logits.rows(); ++r) {
        const auto t = targets[static_cast<std::size_t>(r)];
        if (t < 0 || t >= vocab)
            throw IndexError("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                             std::to_string(vocab) + ")");
        auto row = logits.row(r);
        const float mx = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (float v : row) sum += std::exp(static_cast<double>(v) - mx);
        total += std::log(sum) + mx - row[static_cast<std::size_t>(t)];
    }
    const double mean = total / static_cast<double>(logits.rows());
    if (!std::isfinite(mean)) throw NumericalError("cross_entropy: non-finite loss");
    return mean;
}

std::string to_string(Distribution d) { return d == Distribution::kGaussian ? "gaussian" : "rademacher"; }

Distribution distribution_from_string(const std::string& s) {
    if (s == "gaussian") return Distribution::kGaussian;
    if (s == "rademacher") return Distribution::kRademacher;
    throw ConfigError("unknown perturbation distribution '" + s + "' (expected gaussian|rademacher)");
}

float draw(RngStream& rng, Distribution distribution) {
    return distribution == Distribution::kGaussian ? static_cast<float>(rng.next_gaussian()) : rng.next_sign();
}

Tensor sample_perturbation(RngStream& rng, const Shape& shape, Distribution distribution) {
    Tensor t(shape);
    for (auto& v : t.storage()) v = draw(rng, distribution);
    return t;
}

}  // namespace miniprune
