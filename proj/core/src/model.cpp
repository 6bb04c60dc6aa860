#include "miniprune/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "miniprune/error.hpp"

namespace miniprune {

std::string to_string(FfnKind kind) { return kind == FfnKind::kGelu2 ? "gelu2" : "swiglu3"; }

FfnKind ffn_kind_from_string(const std::string& s) {
    if (s == "gelu2") return FfnKind::kGelu2;
    if (s == "swiglu3") return FfnKind::kSwiglu3;
    throw ConfigError("unknown ffn_kind '" + s + "' (expected gelu2|swiglu3)");
}

int ModelConfig::heads(int layer) const {
    return layer_heads.empty() ? n_heads : layer_heads.at(static_cast<std::size_t>(layer));
}

int ModelConfig::ffn_dim(int layer) const {
    return layer_d_ff.empty() ? d_ff : layer_d_ff.at(static_cast<std::size_t>(layer));
}

bool ModelConfig::uniform() const {
    for (int l = 0; l < n_layers; ++l)
        if (heads(l) != n_heads || ffn_dim(l) != d_ff) return false;
    return true;
}

void ModelConfig::validate() const {
    auto positive = [](int v, const char* what) {
        if (v <= 0) throw ConfigError(std::string("model.") + what + " must be positive");
    };
    positive(vocab_size, "vocab_size");
    positive(d_model, "d_model");
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(d_ff, "d_ff");
    positive(max_seq_len, "max_seq_len");
    if (d_model % n_heads != 0) throw ConfigError("model.d_model must be divisible by model.n_heads");
    if (!layer_heads.empty() && static_cast<int>(layer_heads.size()) != n_layers)
        throw ConfigError("layer_heads must list one count per layer");
    if (!layer_d_ff.empty() && static_cast<int>(layer_d_ff.size()) != n_layers)
        throw ConfigError("layer_d_ff must list one width per layer");
    for (int l = 0; l < n_layers; ++l) {
        if (heads(l) <= 0 || heads(l) > n_heads) throw ConfigError("layer head count out of range");
        if (ffn_dim(l) <= 0 || ffn_dim(l) > d_ff) throw ConfigError("layer d_ff out of range");
    }
}

namespace names {
std::string layer(int i, const char* suffix) { return "layers." + std::to_string(i) + "." + suffix; }
}  // namespace names

std::vector<TensorSpec> expected_tensors(const ModelConfig& c) {
    const std::int64_t d = c.d_model;
    std::vector<TensorSpec> out;
    out.push_back({names::kTokEmbed, {c.vocab_size, d}});
    out.push_back({names::kPosEmbed, {c.max_seq_len, d}});
    for (int l = 0; l < c.n_layers; ++l) {
        const std::int64_t a = c.attn_dim(l);
        const std::int64_t f = c.ffn_dim(l);
        out.push_back({names::ln1_gamma(l), {d}});
        out.push_back({names::ln1_beta(l), {d}});
        out.push_back({names::wq(l), {a, d}});
        out.push_back({names::wk(l), {a, d}});
        out.push_back({names::wv(l), {a, d}});
        out.push_back({names::wo(l), {d, a}});
        out.push_back({names::ln2_gamma(l), {d}});
        out.push_back({names::ln2_beta(l), {d}});
        out.push_back({names::w_up(l), {f, d}});
        if (c.ffn_kind == FfnKind::kSwiglu3) out.push_back({names::w_gate(l), {f, d}});
        out.push_back({names::w_down(l), {d, f}});
    }
    out.push_back({names::kFinalGamma, {d}});
    out.push_back({names::kFinalBeta, {d}});
    if (!c.tie_embeddings) out.push_back({names::kHead, {c.vocab_size, d}});
    return out;
}

std::vector<std::string> prunable_tensor_names(const ModelConfig& c) {
    std::vector<std::string> out;
    for (int l = 0; l < c.n_layers; ++l) {
        out.push_back(names::wq(l));
        out.push_back(names::wk(l));
        out.push_back(names::wv(l));
        out.push_back(names::wo(l));
        out.push_back(names::w_up(l));
        if (c.ffn_kind == FfnKind::kSwiglu3) out.push_back(names::w_gate(l));
        out.push_back(names::w_down(l));
    }
    return out;
}

std::vector<std::string> linear_tensor_names(const ModelConfig& c) {
    auto out = prunable_tensor_names(c);
    out.push_back(c.tie_embeddings ? names::kTokEmbed : names::kHead);
    return out;
}

Tensor& ModelCheckpoint::at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConsistencyError("checkpoint has no tensor '" + name + "'");
    return it->second;
}

const Tensor& ModelCheckpoint::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConsistencyError("checkpoint has no tensor '" + name + "'");
    return it->second;
}

bool ModelCheckpoint::bit_equal(const ModelCheckpoint& other) const {
    if (!(config == other.config) || tensors.size() != other.tensors.size()) return false;
    for (const auto& [name, t] : tensors) {
        auto it = other.tensors.find(name);
        if (it == other.tensors.end() || !t.bit_equal(it->second)) return false;
    }
    return true;
}

std::int64_t ModelCheckpoint::param_count() const {
    std::int64_t n = 0;
    for (const auto& [_, t] : tensors) n += t.numel();
    return n;
}

ModelCheckpoint init_checkpoint(const ModelConfig& config, std::uint64_t seed, float init_std) {
    config.validate();
    ModelCheckpoint ckpt{config, {}};
    for (const auto& spec : expected_tensors(config)) {
        Tensor t(spec.shape);
        const bool gamma = spec.name.ends_with(".gamma");
        const bool beta = spec.name.ends_with(".beta");
        if (gamma) {
            t.fill(1.0f);
        } else if (!beta) {
            RngStream rng(seed, fnv1a64(spec.name));
            for (auto& v : t.storage()) v = init_std * static_cast<float>(rng.next_gaussian());
        }
        ckpt.tensors.emplace(spec.name, std::move(t));
    }
    return ckpt;
}

void validate_checkpoint(const ModelCheckpoint& ckpt) {
    ckpt.config.validate();
    const auto specs = expected_tensors(ckpt.config);
    if (specs.size() != ckpt.tensors.size())
        throw ConsistencyError("checkpoint holds " + std::to_string(ckpt.tensors.size()) + " tensors, config implies " +
                               std::to_string(specs.size()));
    for (const auto& spec : specs) {
        auto it = ckpt.tensors.find(spec.name);
        if (it == ckpt.tensors.end()) throw ConsistencyError("checkpoint is missing tensor '" + spec.name + "'");
        if (it->second.shape() != spec.shape)
            throw ConsistencyError("tensor '" + spec.name + "' has shape " + shape_to_string(it->second.shape()) +
                                   ", config implies " + shape_to_string(spec.shape));
    }
}

TokenBatch::TokenBatch(std::int64_t r, std::int64_t c, std::vector<std::int32_t> t)
    : rows(r), cols(c), tokens(std::move(t)) {
    if (r <= 0 || c <= 0 || static_cast<std::int64_t>(tokens.size()) != r * c)
        throw InputError("token batch dimensions do not match its payload");
}

TokenBatch TokenBatch::single(std::vector<std::int32_t> seq) {
    const auto n = static_cast<std::int64_t>(seq.size());
    return TokenBatch(1, n, std::move(seq));
}

void ActivationRecord::accumulate(const ActivationRecord& other) {
    for (const auto& [name, t] : other.input_feature_sq_sums) {
        auto it = input_feature_sq_sums.find(name);
        if (it == input_feature_sq_sums.end()) {
            input_feature_sq_sums.emplace(name, t);
            continue;
        }
        if (it->second.shape() != t.shape()) throw ConsistencyError("activation record shape mismatch for " + name);
        for (std::int64_t i = 0; i < t.numel(); ++i) it->second[i] += t[i];
    }
    token_count += other.token_count;
}

namespace {

constexpr float kLnEps = 1e-5f;
using Buf = std::vector<float>;

Buf zeros(std::int64_t n) { return Buf(static_cast<std::size_t>(n), 0.0f); }

// y[n x out] = x[n x in] * W^T, W stored [out x in].
void linear_nt(const float* x, std::int64_t n, std::int64_t in, const Tensor& w, float* y, bool accumulate = false) {
    const std::int64_t out = w.rows();
    Buf wt = zeros(in * out);
    detail::transpose_into(w.data(), out, in, in, wt.data(), out);
    detail::gemm(x, in, wt.data(), out, y, out, n, in, out, accumulate);
}

void ln_forward(const float* x, std::int64_t n, std::int64_t d, const Tensor& gamma, const Tensor& beta, float* xhat,
                float* rstd, float* y) {
    for (std::int64_t r = 0; r < n; ++r) {
        const float* xr = x + r * d;
        double mean = 0.0;
        for (std::int64_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<double>(d);
        const double rs = 1.0 / std::sqrt(var + kLnEps);
        rstd[r] = static_cast<float>(rs);
        for (std::int64_t j = 0; j < d; ++j) {
            const float xh = static_cast<float>((xr[j] - mean) * rs);
            xhat[r * d + j] = xh;
            y[r * d + j] = xh * gamma[j] + beta[j];
        }
    }
}

// dx += LN backward; dgamma/dbeta accumulated when non-null.
void ln_backward(const float* dy, const float* xhat, const float* rstd, const Tensor& gamma, std::int64_t n,
                 std::int64_t d, float* dx, float* dgamma, float* dbeta) {
    Buf dxhat = zeros(d);
    for (std::int64_t r = 0; r < n; ++r) {
        const float* dyr = dy + r * d;
        const float* xr = xhat + r * d;
        double m1 = 0.0, m2 = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            dxhat[j] = dyr[j] * gamma[j];
            m1 += dxhat[j];
            m2 += static_cast<double>(dxhat[j]) * xr[j];
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        for (std::int64_t j = 0; j < d; ++j)
            dx[r * d + j] += static_cast<float>(rstd[r] * (dxhat[j] - m1 - xr[j] * m2));
        if (dgamma)
            for (std::int64_t j = 0; j < d; ++j) {
                dgamma[j] += dyr[j] * xr[j];
                dbeta[j] += dyr[j];
            }
    }
}

inline float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

struct LayerCache {
    Buf x_in, xhat1, rstd1, a1, q, k, v, probs, o, h1, xhat2, rstd2, a2, u, gt, act;
    std::map<std::string, Buf> xb;
};

struct Trace {
    std::vector<LayerCache> layers;
    LayerCache head_cache;
    Buf x_final, xhatf, rstdf, af, logits;
};

class Engine {
public:
    Engine(const ModelCheckpoint& ckpt, const LowRankBranches* branches) : ckpt_(ckpt), cfg_(ckpt.config), branches_(branches) {}

    void check_batch(const TokenBatch& batch, bool need_targets) const {
        if (batch.rows <= 0 || batch.cols <= 0) throw InputError("empty token batch");
        if (batch.cols > cfg_.max_seq_len)
            throw InputError("sequence length " + std::to_string(batch.cols) + " exceeds max_seq_len " +
                             std::to_string(cfg_.max_seq_len));
        if (need_targets && batch.cols < 2) throw InputError("sequences need at least two tokens for a loss");
        for (auto t : batch.tokens)
            if (t < 0 || t >= cfg_.vocab_size)
                throw InputError("token " + std::to_string(t) + " outside vocabulary of size " +
                                 std::to_string(cfg_.vocab_size));
    }

    // Runs the network; `keep` retains every layer's cache for backward.
    void forward(const TokenBatch& batch, Trace& tr, bool keep, ActivationRecord* capture) {
        const std::int64_t n = batch.rows * batch.cols;
        const std::int64_t t = batch.cols;
        const std::int64_t d = cfg_.d_model;
        Buf x = zeros(n * d);
        const Tensor& tok = ckpt_.at(names::kTokEmbed);
        const Tensor& pos = ckpt_.at(names::kPosEmbed);
        for (std::int64_t r = 0; r < n; ++r) {
            const auto id = batch.tokens[static_cast<std::size_t>(r)];
            const float* te = tok.data() + static_cast<std::int64_t>(id) * d;
            const float* pe = pos.data() + (r % t) * d;
            for (std::int64_t j = 0; j < d; ++j) x[r * d + j] = te[j] + pe[j];
        }
        tr.layers.assign(keep ? cfg_.n_layers : 1, LayerCache{});
        for (int l = 0; l < cfg_.n_layers; ++l) {
            LayerCache& c = tr.layers[keep ? l : 0];
            c.x_in = std::move(x);
            layer_forward(l, batch, c, keep, capture);
            x = keep ? c.h1 : std::move(c.h1);
            // x currently holds h1; add the FFN output stored in c.act path.
            for (std::int64_t i = 0; i < n * d; ++i) x[i] += ffn_out_[i];
        }
        tr.x_final = std::move(x);
        tr.xhatf = zeros(n * d);
        tr.rstdf = zeros(n);
        tr.af = zeros(n * d);
        ln_forward(tr.x_final.data(), n, d, ckpt_.at(names::kFinalGamma), ckpt_.at(names::kFinalBeta), tr.xhatf.data(),
                   tr.rstdf.data(), tr.af.data());
        tr.logits = zeros(n * cfg_.vocab_size);
        apply_linear(head_name(), tr.af.data(), n, d, tr.logits.data(), &tr.head_cache, keep);
        if (capture) capture->token_count += n;
    }

    const Tensor& head() const { return ckpt_.at(cfg_.tie_embeddings ? names::kTokEmbed : names::kHead); }
    const std::string& head_name() const {
        static const std::string tok = names::kTokEmbed, out = names::kHead;
        return cfg_.tie_embeddings ? tok : out;
    }

    // y = x W^T (+ low-rank branch).
    void apply_linear(const std::string& name, const float* x, std::int64_t n, std::int64_t in, float* y, LayerCache* c,
                      bool keep) {
        const Tensor& w = ckpt_.at(name);
        linear_nt(x, n, in, w, y);
        const LowRankBranch* br = branch(name);
        if (!br) return;
        const std::int64_t r = br->b->cols();
        const std::int64_t out = w.rows();
        Buf xb = zeros(n * r);
        detail::gemm(x, in, br->b->data(), r, xb.data(), r, n, in, r, false);
        Buf delta = zeros(n * out);
        detail::gemm(xb.data(), r, br->a->data(), out, delta.data(), out, n, r, out, false);
        for (std::int64_t i = 0; i < n * out; ++i)
            if (delta[i] != 0.0f) y[i] += br->scale * delta[i];
        if (keep && c) c->xb[name] = std::move(xb);
    }

    const LowRankBranch* branch(const std::string& name) const {
        if (!branches_) return nullptr;
        auto it = branches_->find(name);
        return it == branches_->end() ? nullptr : &it->second;
    }

    void capture_sq(ActivationRecord* capture, const std::string& name, const float* x, std::int64_t n,
                    std::int64_t width) {
        if (!capture) return;
        std::vector<double> acc(static_cast<std::size_t>(width), 0.0);
        for (std::int64_t r = 0; r < n; ++r)
            for (std::int64_t j = 0; j < width; ++j) acc[j] += static_cast<double>(x[r * width + j]) * x[r * width + j];
        auto [it, inserted] = capture->input_feature_sq_sums.try_emplace(name, Tensor({width}));
        if (it->second.numel() != width) throw ConsistencyError("activation record width mismatch for " + name);
        for (std::int64_t j = 0; j < width; ++j) it->second[j] += static_cast<float>(acc[j]);
    }

    void layer_forward(int l, const TokenBatch& batch, LayerCache& c, bool keep, ActivationRecord* capture) {
        const std::int64_t b = batch.rows, t = batch.cols, n = b * t;
        const std::int64_t d = cfg_.d_model, h = cfg_.heads(l), dh = cfg_.d_head(), a = h * dh, f = cfg_.ffn_dim(l);
        c.xhat1 = zeros(n * d);
        c.rstd1 = zeros(n);
        c.a1 = zeros(n * d);
        ln_forward(c.x_in.data(), n, d, ckpt_.at(names::ln1_gamma(l)), ckpt_.at(names::ln1_beta(l)), c.xhat1.data(),
                   c.rstd1.data(), c.a1.data());
        capture_sq(capture, names::wq(l), c.a1.data(), n, d);
        capture_sq(capture, names::wk(l), c.a1.data(), n, d);
        capture_sq(capture, names::wv(l), c.a1.data(), n, d);
        c.q = zeros(n * a);
        c.k = zeros(n * a);
        c.v = zeros(n * a);
        apply_linear(names::wq(l), c.a1.data(), n, d, c.q.data(), &c, keep);
        apply_linear(names::wk(l), c.a1.data(), n, d, c.k.data(), &c, keep);
        apply_linear(names::wv(l), c.a1.data(), n, d, c.v.data(), &c, keep);

        c.o = zeros(n * a);
        c.probs = zeros(keep ? b * h * t * t : t * t);
        const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
        Buf kt = zeros(dh * t);
        Buf scores = zeros(t * t);
        for (std::int64_t s = 0; s < b; ++s)
            for (std::int64_t hh = 0; hh < h; ++hh) {
                const std::int64_t base = s * t * a + hh * dh;
                detail::transpose_into(c.k.data() + base, t, dh, a, kt.data(), t);
                detail::gemm(c.q.data() + base, a, kt.data(), t, scores.data(), t, t, dh, t, false);
                float* p = c.probs.data() + (keep ? (s * h + hh) * t * t : 0);
                for (std::int64_t i = 0; i < t; ++i) {
                    float* srow = scores.data() + i * t;
                    float* prow = p + i * t;
                    float mx = srow[0] * scale;
                    for (std::int64_t j = 0; j <= i; ++j) mx = std::max(mx, srow[j] * scale);
                    double sum = 0.0;
                    for (std::int64_t j = 0; j <= i; ++j) {
                        prow[j] = std::exp(srow[j] * scale - mx);
                        sum += prow[j];
                    }
                    const auto inv = static_cast<float>(1.0 / sum);
                    for (std::int64_t j = 0; j <= i; ++j) prow[j] *= inv;
                    for (std::int64_t j = i + 1; j < t; ++j) prow[j] = 0.0f;
                }
                detail::gemm(p, t, c.v.data() + base, a, c.o.data() + base, a, t, t, dh, false);
            }
        capture_sq(capture, names::wo(l), c.o.data(), n, a);
        c.h1 = zeros(n * d);
        apply_linear(names::wo(l), c.o.data(), n, a, c.h1.data(), &c, keep);
        for (std::int64_t i = 0; i < n * d; ++i) c.h1[i] += c.x_in[i];

        c.xhat2 = zeros(n * d);
        c.rstd2 = zeros(n);
        c.a2 = zeros(n * d);
        ln_forward(c.h1.data(), n, d, ckpt_.at(names::ln2_gamma(l)), ckpt_.at(names::ln2_beta(l)), c.xhat2.data(),
                   c.rstd2.data(), c.a2.data());
        capture_sq(capture, names::w_up(l), c.a2.data(), n, d);
        c.u = zeros(n * f);
        apply_linear(names::w_up(l), c.a2.data(), n, d, c.u.data(), &c, keep);
        c.act = zeros(n * f);
        if (cfg_.ffn_kind == FfnKind::kGelu2) {
            for (std::int64_t i = 0; i < n * f; ++i) c.act[i] = gelu_scalar(c.u[i]);
        } else {
            capture_sq(capture, names::w_gate(l), c.a2.data(), n, d);
            c.gt = zeros(n * f);
            apply_linear(names::w_gate(l), c.a2.data(), n, d, c.gt.data(), &c, keep);
            for (std::int64_t i = 0; i < n * f; ++i) c.act[i] = c.gt[i] * sigmoid(c.gt[i]) * c.u[i];
        }
        capture_sq(capture, names::w_down(l), c.act.data(), n, f);
        ffn_out_ = zeros(n * d);
        apply_linear(names::w_down(l), c.act.data(), n, f, ffn_out_.data(), &c, keep);
    }

    // Fills grads for the linear map `name` given its input x and output
    // gradient dy, and adds dy W (+ branch) into dx.
    void linear_backward(const std::string& name, const float* x, std::int64_t n, std::int64_t in, const float* dy,
                         float* dx, LayerCache* c, bool base_grads, BackwardResult& res) {
        const Tensor& w = ckpt_.at(name);
        const std::int64_t out = w.rows();
        detail::gemm(dy, out, w.data(), in, dx, in, n, out, in, true);
        Buf dyt;
        auto ensure_dyt = [&] {
            if (dyt.empty()) {
                dyt = zeros(out * n);
                detail::transpose_into(dy, n, out, out, dyt.data(), n);
            }
        };
        if (base_grads) {
            ensure_dyt();
            Tensor gw(w.shape());
            detail::gemm(dyt.data(), n, x, in, gw.data(), in, out, n, in, false);
            add_grad(res, name, gw);
        }
        const LowRankBranch* br = branch(name);
        if (!br) return;
        const std::int64_t r = br->b->cols();
        const Buf& xb = c->xb.at(name);
        // dA = scale * (xB)^T dy
        Buf xbt = zeros(r * n);
        detail::transpose_into(xb.data(), n, r, r, xbt.data(), n);
        BranchGrads g{Tensor(br->a->shape()), Tensor(br->b->shape())};
        detail::gemm(xbt.data(), n, dy, out, g.a.data(), out, r, n, out, false);
        for (auto& v : g.a.storage()) v *= br->scale;
        // d(xB) = scale * dy A^T
        Buf at = zeros(out * r);
        detail::transpose_into(br->a->data(), r, out, out, at.data(), r);
        Buf dxb = zeros(n * r);
        detail::gemm(dy, out, at.data(), r, dxb.data(), r, n, out, r, false);
        for (auto& v : dxb) v *= br->scale;
        // dB = x^T d(xB)
        Buf xt = zeros(in * n);
        detail::transpose_into(x, n, in, in, xt.data(), n);
        detail::gemm(xt.data(), n, dxb.data(), r, g.b.data(), r, in, n, r, false);
        // dx += d(xB) B^T
        Buf bt = zeros(r * in);
        detail::transpose_into(br->b->data(), in, r, r, bt.data(), in);
        detail::gemm(dxb.data(), r, bt.data(), in, dx, in, n, r, in, true);
        res.branch_grads[name] = std::move(g);
    }

    static void add_grad(BackwardResult& res, const std::string& name, Tensor& g) {
        auto it = res.grads.find(name);
        if (it == res.grads.end()) {
            res.grads.emplace(name, std::move(g));
        } else {
            for (std::int64_t i = 0; i < g.numel(); ++i) it->second[i] += g[i];
        }
    }

    Tensor& grad_slot(BackwardResult& res, const std::string& name) {
        auto it = res.grads.find(name);
        if (it == res.grads.end()) it = res.grads.emplace(name, Tensor(ckpt_.at(name).shape())).first;
        return it->second;
    }

    BackwardResult backward(const TokenBatch& batch, const BackwardOptions& opt) {
        check_batch(batch, true);
        Trace tr;
        forward(batch, tr, true, nullptr);
        const std::int64_t b = batch.rows, t = batch.cols, n = b * t;
        const std::int64_t d = cfg_.d_model, v = cfg_.vocab_size;
        BackwardResult res;
        const bool bg = opt.base_grads;

        // Loss and dlogits.
        const double count = static_cast<double>(b * (t - 1));
        Buf dlogits = zeros(n * v);
        double total = 0.0;
        for (std::int64_t s = 0; s < b; ++s)
            for (std::int64_t i = 0; i + 1 < t; ++i) {
                const std::int64_t r = s * t + i;
                const float* lr = tr.logits.data() + r * v;
                float* dl = dlogits.data() + r * v;
                const float mx = *std::max_element(lr, lr + v);
                double sum = 0.0;
                for (std::int64_t j = 0; j < v; ++j) sum += std::exp(static_cast<double>(lr[j]) - mx);
                const auto target = batch.at(s, i + 1);
                total += std::log(sum) + mx - lr[target];
                for (std::int64_t j = 0; j < v; ++j)
                    dl[j] = static_cast<float>(std::exp(static_cast<double>(lr[j]) - mx) / sum / count);
                dl[target] -= static_cast<float>(1.0 / count);
            }
        res.loss = total / count;
        if (!std::isfinite(res.loss)) throw NumericalError("backward: non-finite loss");

        Buf dx = zeros(n * d);
        // Head.
        {
            Buf daf = zeros(n * d);
            linear_backward(head_name(), tr.af.data(), n, d, dlogits.data(), daf.data(), &tr.head_cache, bg, res);
            float* dg = bg ? grad_slot(res, names::kFinalGamma).data() : nullptr;
            float* db = bg ? grad_slot(res, names::kFinalBeta).data() : nullptr;
            ln_backward(daf.data(), tr.xhatf.data(), tr.rstdf.data(), ckpt_.at(names::kFinalGamma), n, d, dx.data(), dg, db);
        }
        for (int l = cfg_.n_layers - 1; l >= 0; --l) layer_backward(l, batch, tr.layers[l], dx, bg, res);

        if (bg) {
            Tensor& gtok = grad_slot(res, names::kTokEmbed);
            Tensor& gpos = grad_slot(res, names::kPosEmbed);
            for (std::int64_t r = 0; r < n; ++r) {
                const auto id = batch.tokens[static_cast<std::size_t>(r)];
                float* gt = gtok.data() + static_cast<std::int64_t>(id) * d;
                float* gp = gpos.data() + (r % t) * d;
                for (std::int64_t j = 0; j < d; ++j) {
                    gt[j] += dx[r * d + j];
                    gp[j] += dx[r * d + j];
                }
            }
        }
        return res;
    }

    // dx holds dL/d(layer output) on entry and dL/d(layer input) on exit.
    void layer_backward(int l, const TokenBatch& batch, LayerCache& c, Buf& dx, bool bg, BackwardResult& res) {
        const std::int64_t b = batch.rows, t = batch.cols, n = b * t;
        const std::int64_t d = cfg_.d_model, h = cfg_.heads(l), dh = cfg_.d_head(), a = h * dh, f = cfg_.ffn_dim(l);

        // FFN branch: x_out = h1 + FFN(LN2(h1)).
        Buf dact = zeros(n * f);
        linear_backward(names::w_down(l), c.act.data(), n, f, dx.data(), dact.data(), &c, bg, res);
        Buf da2 = zeros(n * d);
        Buf du = zeros(n * f);
        if (cfg_.ffn_kind == FfnKind::kGelu2) {
            for (std::int64_t i = 0; i < n * f; ++i) du[i] = dact[i] * gelu_grad_scalar(c.u[i]);
            linear_backward(names::w_up(l), c.a2.data(), n, d, du.data(), da2.data(), &c, bg, res);
        } else {
            Buf dgt = zeros(n * f);
            for (std::int64_t i = 0; i < n * f; ++i) {
                const float sg = sigmoid(c.gt[i]);
                const float silu = c.gt[i] * sg;
                du[i] = dact[i] * silu;
                dgt[i] = dact[i] * c.u[i] * (sg * (1.0f + c.gt[i] * (1.0f - sg)));
            }
            linear_backward(names::w_up(l), c.a2.data(), n, d, du.data(), da2.data(), &c, bg, res);
            linear_backward(names::w_gate(l), c.a2.data(), n, d, dgt.data(), da2.data(), &c, bg, res);
        }
        {
            float* dg = bg ? grad_slot(res, names::ln2_gamma(l)).data() : nullptr;
            float* db = bg ? grad_slot(res, names::ln2_beta(l)).data() : nullptr;
            ln_backward(da2.data(), c.xhat2.data(), c.rstd2.data(), ckpt_.at(names::ln2_gamma(l)), n, d, dx.data(), dg, db);
        }
        // dx now holds dL/dh1. Attention branch: h1 = x_in + Attn(LN1(x_in)).
        Buf dout = zeros(n * a);
        linear_backward(names::wo(l), c.o.data(), n, a, dx.data(), dout.data(), &c, bg, res);
        Buf dq = zeros(n * a), dk = zeros(n * a), dv = zeros(n * a);
        const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
        Buf vt = zeros(dh * t), dp = zeros(t * t), ds = zeros(t * t), tmp = zeros(t * t);
        for (std::int64_t s = 0; s < b; ++s)
            for (std::int64_t hh = 0; hh < h; ++hh) {
                const std::int64_t base = s * t * a + hh * dh;
                const float* p = c.probs.data() + (s * h + hh) * t * t;
                // dP = dO V^T
                detail::transpose_into(c.v.data() + base, t, dh, a, vt.data(), t);
                detail::gemm(dout.data() + base, a, vt.data(), t, dp.data(), t, t, dh, t, false);
                // dS = P * (dP - rowsum(P * dP)) * scale
                for (std::int64_t i = 0; i < t; ++i) {
                    double dot = 0.0;
                    for (std::int64_t j = 0; j <= i; ++j) dot += static_cast<double>(p[i * t + j]) * dp[i * t + j];
                    for (std::int64_t j = 0; j < t; ++j)
                        ds[i * t + j] = j <= i ? p[i * t + j] * static_cast<float>(dp[i * t + j] - dot) * scale : 0.0f;
                }
                // dQ = dS K ; dK = dS^T Q ; dV = P^T dO
                detail::gemm(ds.data(), t, c.k.data() + base, a, dq.data() + base, a, t, t, dh, false);
                detail::transpose_into(ds.data(), t, t, t, tmp.data(), t);
                detail::gemm(tmp.data(), t, c.q.data() + base, a, dk.data() + base, a, t, t, dh, false);
                detail::transpose_into(p, t, t, t, tmp.data(), t);
                detail::gemm(tmp.data(), t, dout.data() + base, a, dv.data() + base, a, t, t, dh, false);
            }
        Buf da1 = zeros(n * d);
        linear_backward(names::wq(l), c.a1.data(), n, d, dq.data(), da1.data(), &c, bg, res);
        linear_backward(names::wk(l), c.a1.data(), n, d, dk.data(), da1.data(), &c, bg, res);
        linear_backward(names::wv(l), c.a1.data(), n, d, dv.data(), da1.data(), &c, bg, res);
        float* dg = bg ? grad_slot(res, names::ln1_gamma(l)).data() : nullptr;
        float* db = bg ? grad_slot(res, names::ln1_beta(l)).data() : nullptr;
        ln_backward(da1.data(), c.xhat1.data(), c.rstd1.data(), ckpt_.at(names::ln1_gamma(l)), n, d, dx.data(), dg, db);
    }

private:
    const ModelCheckpoint& ckpt_;
    const ModelConfig& cfg_;
    const LowRankBranches* branches_;
    Buf ffn_out_;
};

std::vector<double> row_nll(const Trace& tr, const TokenBatch& batch, std::int64_t vocab) {
    std::vector<double> out(static_cast<std::size_t>(batch.rows), 0.0);
    const std::int64_t t = batch.cols;
    for (std::int64_t s = 0; s < batch.rows; ++s) {
        double total = 0.0;
        for (std::int64_t i = 0; i + 1 < t; ++i) {
            const float* lr = tr.logits.data() + (s * t + i) * vocab;
            const float mx = *std::max_element(lr, lr + vocab);
            double sum = 0.0;
            for (std::int64_t j = 0; j < vocab; ++j) sum += std::exp(static_cast<double>(lr[j]) - mx);
            total += std::log(sum) + mx - lr[batch.at(s, i + 1)];
        }
        out[static_cast<std::size_t>(s)] = total;
    }
    return out;
}

double mean_loss(const std::vector<double>& rows, const TokenBatch& batch) {
    double total = 0.0;
    for (double r : rows) total += r;
    const double loss = total / static_cast<double>(batch.rows * (batch.cols - 1));
    if (!std::isfinite(loss)) throw NumericalError("forward: non-finite loss");
    return loss;
}

}  // namespace

std::vector<double> forward_row_nll(const ModelCheckpoint& ckpt, const TokenBatch& batch,
                                    const LowRankBranches* branches) {
    Engine engine(ckpt, branches);
    engine.check_batch(batch, true);
    Trace tr;
    engine.forward(batch, tr, false, nullptr);
    return row_nll(tr, batch, ckpt.config.vocab_size);
}

double forward_loss(const ModelCheckpoint& ckpt, const TokenBatch& batch, const LowRankBranches* branches) {
    return mean_loss(forward_row_nll(ckpt, batch, branches), batch);
}

CaptureResult forward_capture(const ModelCheckpoint& ckpt, const TokenBatch& batch) {
    Engine engine(ckpt, nullptr);
    engine.check_batch(batch, true);
    Trace tr;
    CaptureResult out;
    engine.forward(batch, tr, false, &out.record);
    out.loss = mean_loss(row_nll(tr, batch, ckpt.config.vocab_size), batch);
    return out;
}

BackwardResult backward(const ModelCheckpoint& ckpt, const TokenBatch& batch, const BackwardOptions& options) {
    Engine engine(ckpt, options.branches);
    return engine.backward(batch, options);
}

Tensor sequence_logits(const ModelCheckpoint& ckpt, std::span<const std::int32_t> tokens) {
    TokenBatch batch(1, static_cast<std::int64_t>(tokens.size()), std::vector<std::int32_t>(tokens.begin(), tokens.end()));
    Engine engine(ckpt, nullptr);
    engine.check_batch(batch, false);
    Trace tr;
    engine.forward(batch, tr, false, nullptr);
    return Tensor({batch.cols, ckpt.config.vocab_size}, std::move(tr.logits));
}

ParamMacCount count_params_macs(const ModelConfig& config, std::int64_t seq_len) {
    config.validate();
    ParamMacCount out;
    for (const auto& spec : expected_tensors(config)) out.params += shape_numel(spec.shape);
    std::int64_t linear_macs = 0;
    for (const auto& spec : expected_tensors(config)) {
        const bool linear = spec.name.find(".attn.w") != std::string::npos ||
                            spec.name.find(".ffn.w_") != std::string::npos || spec.name == names::kHead;
        if (linear) linear_macs += spec.shape[0] * spec.shape[1];
    }
    if (config.tie_embeddings) linear_macs += static_cast<std::int64_t>(config.vocab_size) * config.d_model;
    out.macs = seq_len * linear_macs;
    for (int l = 0; l < config.n_layers; ++l)
        out.macs += 2 * seq_len * seq_len * static_cast<std::int64_t>(config.heads(l)) * config.d_head();
    return out;
}

std::vector<std::int32_t> generate_greedy(const ModelCheckpoint& ckpt, std::vector<std::int32_t> prompt, int max_new) {
    if (prompt.empty()) throw InputError("generate: prompt must be non-empty");
    if (static_cast<int>(prompt.size()) > ckpt.config.max_seq_len)
        throw InputError("generate: prompt longer than max_seq_len");
    for (int step = 0; step < max_new && static_cast<int>(prompt.size()) < ckpt.config.max_seq_len; ++step) {
        const Tensor logits = sequence_logits(ckpt, prompt);
        auto last = logits.row(logits.rows() - 1);
        const auto best = std::max_element(last.begin(), last.end()) - last.begin();
        prompt.push_back(static_cast<std::int32_t>(best));
    }
    return prompt;
}

}  // namespace miniprune
