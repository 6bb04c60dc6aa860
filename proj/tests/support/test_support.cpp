#include "test_support.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "miniprune/rng.hpp"

namespace miniprune::testing {

ModelConfig tiny_config(int d_model, int n_layers, int n_heads, int d_ff, FfnKind ffn, int vocab, int max_seq) {
    ModelConfig c;
    c.vocab_size = vocab;
    c.d_model = d_model;
    c.n_layers = n_layers;
    c.n_heads = n_heads;
    c.d_ff = d_ff;
    c.ffn_kind = ffn;
    c.max_seq_len = max_seq;
    c.validate();
    return c;
}

TokenBatch random_batch(std::int64_t rows, std::int64_t cols, int vocab, std::uint64_t seed) {
    RngStream rng(seed, 77);
    std::vector<std::int32_t> t(static_cast<std::size_t>(rows * cols));
    for (auto& v : t) v = static_cast<std::int32_t>(rng.next_below(static_cast<std::uint64_t>(vocab)));
    return TokenBatch(rows, cols, std::move(t));
}

namespace {

using Mat = std::vector<std::vector<double>>;

Mat zeros(std::size_t r, std::size_t c) { return Mat(r, std::vector<double>(c, 0.0)); }

double w(const Tensor& t, std::int64_t r, std::int64_t c) { return t.at(r, c); }

// y = x W^T, W stored [out x in]
Mat linear(const Mat& x, const Tensor& wt) {
    const auto out = static_cast<std::size_t>(wt.rows());
    const auto in = static_cast<std::size_t>(wt.cols());
    Mat y = zeros(x.size(), out);
    for (std::size_t n = 0; n < x.size(); ++n)
        for (std::size_t o = 0; o < out; ++o) {
            double s = 0.0;
            for (std::size_t i = 0; i < in; ++i) s += x[n][i] * w(wt, o, i);
            y[n][o] = s;
        }
    return y;
}

Mat norm(const Mat& x, const Tensor& g, const Tensor& b) {
    Mat y = x;
    for (std::size_t n = 0; n < x.size(); ++n) {
        const double d = static_cast<double>(x[n].size());
        double mean = 0.0, var = 0.0;
        for (double v : x[n]) mean += v;
        mean /= d;
        for (double v : x[n]) var += (v - mean) * (v - mean);
        var /= d;
        const double rs = 1.0 / std::sqrt(var + 1e-5);
        for (std::size_t j = 0; j < x[n].size(); ++j) y[n][j] = (x[n][j] - mean) * rs * g[j] + b[j];
    }
    return y;
}

double gelu(double x) {
    const double c = std::sqrt(2.0 / 3.14159265358979323846);
    return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

}  // namespace

double reference_loss(const ModelCheckpoint& ckpt, const TokenBatch& batch) {
    const ModelConfig& c = ckpt.config;
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto t = static_cast<std::size_t>(batch.cols);
    const auto dh = static_cast<std::size_t>(c.d_head());
    double total = 0.0;
    std::int64_t count = 0;
    for (std::int64_t s = 0; s < batch.rows; ++s) {
        Mat x = zeros(t, d);
        for (std::size_t p = 0; p < t; ++p)
            for (std::size_t j = 0; j < d; ++j)
                x[p][j] = w(ckpt.at(names::kTokEmbed), batch.at(s, static_cast<std::int64_t>(p)), j) +
                          w(ckpt.at(names::kPosEmbed), static_cast<std::int64_t>(p), j);
        for (int l = 0; l < c.n_layers; ++l) {
            const Mat a = norm(x, ckpt.at(names::ln1_gamma(l)), ckpt.at(names::ln1_beta(l)));
            const Mat q = linear(a, ckpt.at(names::wq(l)));
            const Mat k = linear(a, ckpt.at(names::wk(l)));
            const Mat v = linear(a, ckpt.at(names::wv(l)));
            const std::size_t heads = static_cast<std::size_t>(c.heads(l));
            Mat o = zeros(t, heads * dh);
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t i = 0; i < t; ++i) {
                    std::vector<double> sc(i + 1);
                    double mx = -1e300;
                    for (std::size_t j = 0; j <= i; ++j) {
                        double dot = 0.0;
                        for (std::size_t e = 0; e < dh; ++e) dot += q[i][h * dh + e] * k[j][h * dh + e];
                        sc[j] = dot / std::sqrt(static_cast<double>(dh));
                        mx = std::max(mx, sc[j]);
                    }
                    double z = 0.0;
                    for (auto& v2 : sc) z += (v2 = std::exp(v2 - mx));
                    for (std::size_t j = 0; j <= i; ++j)
                        for (std::size_t e = 0; e < dh; ++e) o[i][h * dh + e] += sc[j] / z * v[j][h * dh + e];
                }
            const Mat proj = linear(o, ckpt.at(names::wo(l)));
            for (std::size_t i = 0; i < t; ++i)
                for (std::size_t j = 0; j < d; ++j) x[i][j] += proj[i][j];
            const Mat a2 = norm(x, ckpt.at(names::ln2_gamma(l)), ckpt.at(names::ln2_beta(l)));
            Mat hidden = linear(a2, ckpt.at(names::w_up(l)));
            if (c.ffn_kind == FfnKind::kGelu2) {
                for (auto& row : hidden)
                    for (auto& v2 : row) v2 = gelu(v2);
            } else {
                const Mat gate = linear(a2, ckpt.at(names::w_gate(l)));
                for (std::size_t i = 0; i < t; ++i)
                    for (std::size_t j = 0; j < hidden[i].size(); ++j) {
                        const double g = gate[i][j];
                        hidden[i][j] *= g / (1.0 + std::exp(-g));
                    }
            }
            const Mat down = linear(hidden, ckpt.at(names::w_down(l)));
            for (std::size_t i = 0; i < t; ++i)
                for (std::size_t j = 0; j < d; ++j) x[i][j] += down[i][j];
        }
        const Mat f = norm(x, ckpt.at(names::kFinalGamma), ckpt.at(names::kFinalBeta));
        const Mat logits = linear(f, ckpt.at(c.tie_embeddings ? names::kTokEmbed : names::kHead));
        for (std::size_t p = 0; p + 1 < t; ++p) {
            double mx = -1e300;
            for (double v2 : logits[p]) mx = std::max(mx, v2);
            double z = 0.0;
            for (double v2 : logits[p]) z += std::exp(v2 - mx);
            const auto target = static_cast<std::size_t>(batch.at(s, static_cast<std::int64_t>(p + 1)));
            total += std::log(z) + mx - logits[p][target];
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

FdReport finite_difference_check(const ModelCheckpoint& ckpt, const TokenBatch& batch, int samples,
                                 std::uint64_t seed) {
    const BackwardResult exact = backward(ckpt, batch);
    double scale = 0.0;
    for (const auto& [_, g] : exact.grads)
        for (float v : g.storage()) scale = std::max(scale, static_cast<double>(std::fabs(v)));
    std::int64_t total = 0;
    for (const auto& [name, t] : ckpt.tensors) total += t.numel();
    RngStream rng(seed, 31);
    ModelCheckpoint probe = ckpt;
    FdReport report;
    for (int s = 0; s < samples; ++s) {
        auto k = static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(total)));
        auto it = probe.tensors.begin();
        while (k >= it->second.numel()) {
            k -= it->second.numel();
            ++it;
        }
        float& w = it->second[k];
        const float w0 = w;
        const double h = 1e-3 * std::max(std::fabs(static_cast<double>(w0)), 1e-2);
        const float wp = static_cast<float>(w0 + h);
        const float wm = static_cast<float>(w0 - h);
        w = wp;
        const double lp = reference_loss(probe, batch);
        w = wm;
        const double lm = reference_loss(probe, batch);
        w = w0;
        const double fd = (lp - lm) / (static_cast<double>(wp) - static_cast<double>(wm));
        const double a = exact.grads.at(it->first)[k];
        const double err = std::fabs(a - fd);
        report.max_scaled_error = std::max(report.max_scaled_error, err / std::max({std::fabs(a), std::fabs(fd), 1e-3 * scale}));
        const double rel = err / (std::fabs(a) + 1e-6);
        if (rel > report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst = it->first + "[" + std::to_string(k) + "] analytic " + std::to_string(a) + " fd " +
                           std::to_string(fd);
        }
        ++report.checked;
    }
    return report;
}

TempDir::TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("miniprune_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
}

std::string read_bytes(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace miniprune::testing
