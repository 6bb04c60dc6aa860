#include <cmath>

#include <gtest/gtest.h>

#include "miniprune/error.hpp"
#include "miniprune/model.hpp"
#include "test_support.hpp"

using namespace miniprune;
using miniprune::testing::random_batch;
using miniprune::testing::tiny_config;

namespace {

ModelCheckpoint scaled_init(const ModelConfig& c, std::uint64_t seed, float std) { return init_checkpoint(c, seed, std); }

}  // namespace

TEST(ModelConfig, Validation) {
    ModelConfig c;
    EXPECT_NO_THROW(c.validate());
    c.n_heads = 5;
    EXPECT_THROW(c.validate(), ConfigError);
    c = ModelConfig{};
    c.layer_heads = {4};
    EXPECT_THROW(c.validate(), ConfigError);
    c.layer_heads = {4, 5};
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_THROW(ffn_kind_from_string("relu"), ConfigError);
}

TEST(ModelConfig, FfnMatrixCount) {
    auto gelu = tiny_config(8, 1, 2, 16, FfnKind::kGelu2);
    auto swiglu = tiny_config(8, 1, 2, 16, FfnKind::kSwiglu3);
    EXPECT_EQ(prunable_tensor_names(gelu).size(), 4u + 2u);
    EXPECT_EQ(prunable_tensor_names(swiglu).size(), 4u + 3u);
}

TEST(Checkpoint, InitMatchesExpectedTensors) {
    const auto c = tiny_config(16, 2, 4, 32);
    const auto ckpt = init_checkpoint(c, 3);
    EXPECT_NO_THROW(validate_checkpoint(ckpt));
    EXPECT_EQ(ckpt.param_count(), count_params_macs(c, 1).params);
    EXPECT_TRUE(ckpt.bit_equal(init_checkpoint(c, 3)));
    EXPECT_FALSE(ckpt.bit_equal(init_checkpoint(c, 4)));
    for (const auto& [name, t] : ckpt.tensors) {
        if (name.ends_with(".gamma")) {
            for (float v : t.storage()) ASSERT_EQ(v, 1.0f);
        } else if (name.ends_with(".beta")) {
            for (float v : t.storage()) ASSERT_EQ(v, 0.0f);
        }
    }
}

TEST(Checkpoint, ValidateRejectsWrongShapes) {
    auto ckpt = init_checkpoint(tiny_config(16, 2, 4, 32), 1);
    ckpt.at(names::wq(0)) = Tensor({8, 16});
    EXPECT_THROW(validate_checkpoint(ckpt), ConsistencyError);
    ckpt = init_checkpoint(tiny_config(16, 2, 4, 32), 1);
    ckpt.tensors.erase(names::kHead);
    EXPECT_THROW(validate_checkpoint(ckpt), ConsistencyError);
}

TEST(Forward, InitLossNearLogVocab) {
    ModelConfig c = tiny_config(32, 2, 4, 64, FfnKind::kGelu2, 256, 32);
    const auto ckpt = init_checkpoint(c, 0);
    const double loss = forward_loss(ckpt, random_batch(4, 32, 256, 1));
    EXPECT_NEAR(loss, std::log(256.0), 0.5);
}

TEST(Forward, MatchesDoublePrecisionReference) {
    for (auto ffn : {FfnKind::kGelu2, FfnKind::kSwiglu3}) {
        for (bool tied : {false, true}) {
            auto c = tiny_config(16, 2, 4, 24, ffn);
            c.tie_embeddings = tied;
            const auto ckpt = scaled_init(c, 5, 0.3f);
            const auto batch = random_batch(3, 9, c.vocab_size, 2);
            EXPECT_NEAR(forward_loss(ckpt, batch), miniprune::testing::reference_loss(ckpt, batch), 1e-5);
        }
    }
}

TEST(Forward, DuplicateRowsKeepMeanLoss) {
    const auto ckpt = scaled_init(tiny_config(16, 2, 4, 32), 1, 0.2f);
    const auto one = random_batch(1, 12, 32, 9);
    std::vector<std::int32_t> two = one.tokens;
    two.insert(two.end(), one.tokens.begin(), one.tokens.end());
    EXPECT_EQ(forward_loss(ckpt, one), forward_loss(ckpt, TokenBatch(2, 12, two)));
}

TEST(Forward, CausalMaskHidesFuture) {
    const auto ckpt = scaled_init(tiny_config(16, 2, 4, 32), 1, 0.3f);
    auto seq = random_batch(1, 10, 32, 4).tokens;
    const Tensor a = sequence_logits(ckpt, seq);
    seq.back() = (seq.back() + 1) % 32;
    const Tensor b = sequence_logits(ckpt, seq);
    for (std::int64_t p = 0; p + 1 < 10; ++p)
        for (std::int64_t v = 0; v < 32; ++v) ASSERT_EQ(a.at(p, v), b.at(p, v)) << p;
    const auto nll_a = forward_row_nll(ckpt, TokenBatch::single(seq));
    EXPECT_EQ(nll_a.size(), 1u);
}

TEST(Forward, InputErrors) {
    const auto ckpt = init_checkpoint(tiny_config(16, 1, 4, 32), 1);
    EXPECT_THROW(forward_loss(ckpt, random_batch(1, 17, 32, 1)), InputError);
    EXPECT_THROW(forward_loss(ckpt, TokenBatch::single({1, 32})), InputError);
    EXPECT_THROW(forward_loss(ckpt, TokenBatch::single({1})), InputError);
    EXPECT_THROW(forward_loss(ckpt, TokenBatch::single({-1, 2})), InputError);
}

TEST(Capture, LossBitIdenticalAndTokenCount) {
    const auto ckpt = scaled_init(tiny_config(16, 2, 4, 32), 2, 0.2f);
    const auto batch = random_batch(3, 11, 32, 5);
    const auto cap = forward_capture(ckpt, batch);
    EXPECT_EQ(cap.loss, forward_loss(ckpt, batch));
    EXPECT_EQ(cap.record.token_count, 33);
    for (const auto& name : prunable_tensor_names(ckpt.config)) {
        ASSERT_TRUE(cap.record.input_feature_sq_sums.contains(name)) << name;
        EXPECT_EQ(cap.record.input_feature_sq_sums.at(name).numel(), ckpt.at(name).cols());
    }
}

TEST(Capture, ZeroEmbeddingsStillCountTokens) {
    auto ckpt = init_checkpoint(tiny_config(16, 1, 4, 32), 2);
    ckpt.at(names::kTokEmbed).fill(0.0f);
    EXPECT_EQ(forward_capture(ckpt, random_batch(2, 5, 32, 1)).record.token_count, 10);
}

TEST(Capture, RecordsAreAdditive) {
    const auto ckpt = scaled_init(tiny_config(16, 2, 4, 32), 2, 0.2f);
    const auto b1 = random_batch(2, 8, 32, 1);
    const auto b2 = random_batch(3, 8, 32, 2);
    std::vector<std::int32_t> joined = b1.tokens;
    joined.insert(joined.end(), b2.tokens.begin(), b2.tokens.end());
    const auto whole = forward_capture(ckpt, TokenBatch(5, 8, joined)).record;
    auto parts = forward_capture(ckpt, b1).record;
    parts.accumulate(forward_capture(ckpt, b2).record);
    EXPECT_EQ(parts.token_count, whole.token_count);
    for (const auto& [name, t] : whole.input_feature_sq_sums)
        for (std::int64_t i = 0; i < t.numel(); ++i)
            ASSERT_NEAR(parts.input_feature_sq_sums.at(name)[i], t[i], 1e-4 * (1.0 + t[i])) << name;
}

TEST(Backward, LossEqualsForward) {
    const auto ckpt = scaled_init(tiny_config(16, 2, 4, 32), 2, 0.2f);
    const auto batch = random_batch(2, 8, 32, 3);
    EXPECT_NEAR(backward(ckpt, batch).loss, forward_loss(ckpt, batch), 1e-9);
}

TEST(Backward, MatchesFiniteDifferences) {
    for (auto ffn : {FfnKind::kGelu2, FfnKind::kSwiglu3}) {
        for (bool tied : {false, true}) {
            auto c = tiny_config(16, 2, 4, 24, ffn);
            c.tie_embeddings = tied;
            const auto ckpt = scaled_init(c, 11, 0.3f);
            const auto report = miniprune::testing::finite_difference_check(ckpt, random_batch(2, 8, 32, 6), 100, 1);
            EXPECT_LE(report.max_rel_error, 1e-3) << report.worst;
        }
    }
}

TEST(Backward, PrunedShapesMatchFiniteDifferences) {
    auto c = tiny_config(16, 2, 4, 24);
    c.layer_heads = {3, 1};
    c.layer_d_ff = {24, 7};
    const auto ckpt = scaled_init(c, 12, 0.3f);
    const auto report = miniprune::testing::finite_difference_check(ckpt, random_batch(2, 8, 32, 7), 100, 2);
    EXPECT_LE(report.max_rel_error, 1e-3) << report.worst;
}

TEST(Backward, UnusedEmbeddingRowHasZeroGradient) {
    const auto ckpt = scaled_init(tiny_config(16, 2, 4, 32), 2, 0.2f);
    TokenBatch batch(2, 6, {1, 2, 3, 4, 5, 6, 6, 5, 4, 3, 2, 1});
    const auto res = backward(ckpt, batch);
    const Tensor& g = res.grads.at(names::kTokEmbed);
    for (std::int64_t j = 0; j < 16; ++j) EXPECT_EQ(g.at(20, j), 0.0f);
    double used = 0.0;
    for (std::int64_t j = 0; j < 16; ++j) used += std::fabs(g.at(3, j));
    EXPECT_GT(used, 0.0);
}

TEST(Backward, BranchOnlyModeSkipsBaseGradients) {
    const auto ckpt = scaled_init(tiny_config(16, 1, 4, 32), 2, 0.2f);
    BackwardOptions opts;
    opts.base_grads = false;
    const auto res = backward(ckpt, random_batch(1, 6, 32, 1), opts);
    EXPECT_TRUE(res.grads.empty());
}

TEST(Backward, DuplicatedBatchKeepsGradients) {
    const auto ckpt = scaled_init(tiny_config(16, 1, 4, 32), 2, 0.2f);
    const auto batch = random_batch(1, 7, 32, 3);
    std::vector<std::int32_t> doubled = batch.tokens;
    doubled.insert(doubled.end(), batch.tokens.begin(), batch.tokens.end());
    const auto one = backward(ckpt, batch);
    const auto two = backward(ckpt, TokenBatch(2, 7, doubled));
    for (const auto& [name, g] : one.grads)
        for (std::int64_t i = 0; i < g.numel(); ++i) ASSERT_NEAR(two.grads.at(name)[i], g[i], 1e-6 + 1e-4 * std::fabs(g[i]));
}

TEST(ParamsMacs, HeadRemovalDelta) {
    const auto dense = tiny_config(64, 3, 4, 128);
    auto pruned = dense;
    pruned.layer_heads = {4, 3, 4};
    pruned.layer_d_ff = {128, 128, 128};
    const auto a = count_params_macs(dense, 16);
    const auto b = count_params_macs(pruned, 16);
    EXPECT_EQ(a.params - b.params, 4 * 64 * 16);
}

TEST(ParamsMacs, ChannelRemovalDelta) {
    const auto dense = tiny_config(64, 2, 4, 128, FfnKind::kSwiglu3);
    auto pruned = dense;
    pruned.layer_heads = {4, 4};
    pruned.layer_d_ff = {127, 128};
    EXPECT_EQ(count_params_macs(dense, 1).params - count_params_macs(pruned, 1).params, 3 * 64);
}

TEST(ParamsMacs, DoublingLayersDoublesLayerShare) {
    auto c1 = tiny_config(32, 1, 4, 64);
    auto c2 = tiny_config(32, 2, 4, 64);
    const auto p1 = count_params_macs(c1, 8), p2 = count_params_macs(c2, 8);
    const auto layer_params = p2.params - p1.params;
    const auto layer_macs = p2.macs - p1.macs;
    auto c4 = tiny_config(32, 4, 4, 64);
    const auto p4 = count_params_macs(c4, 8);
    EXPECT_EQ(p4.params - p2.params, 2 * layer_params);
    EXPECT_EQ(p4.macs - p2.macs, 2 * layer_macs);
}

TEST(ParamsMacs, ClosedFormMacs) {
    const auto c = tiny_config(32, 2, 4, 64, FfnKind::kGelu2, 100, 16);
    const std::int64_t t = 10;
    const std::int64_t per_layer = 4 * 32 * 32 + 2 * 32 * 64;
    const std::int64_t expected = t * (2 * per_layer + 100 * 32) + 2 * (2 * t * t * 4 * 8);
    EXPECT_EQ(count_params_macs(c, t).macs, expected);
}

TEST(ParamsMacs, Llama7bShape) {
    ModelConfig c;
    c.vocab_size = 32000;
    c.d_model = 4096;
    c.n_layers = 32;
    c.n_heads = 32;
    c.d_ff = 11008;
    c.ffn_kind = FfnKind::kSwiglu3;
    c.max_seq_len = 2048;
    const auto counts = count_params_macs(c, 64);
    // Positional table included; the reference model has rotary positions.
    EXPECT_NEAR(static_cast<double>(counts.params), 6.74e9, 0.01 * 6.74e9);
}

TEST(Generate, ZeroNewTokensReturnsPrompt) {
    const auto ckpt = init_checkpoint(tiny_config(16, 1, 4, 32), 1);
    const std::vector<std::int32_t> prompt{1, 2, 3};
    EXPECT_EQ(generate_greedy(ckpt, prompt, 0), prompt);
}

TEST(Generate, DeterministicAndBounded) {
    const auto ckpt = scaled_init(tiny_config(16, 1, 4, 32), 1, 0.3f);
    const auto a = generate_greedy(ckpt, {1, 2}, 100);
    EXPECT_EQ(a, generate_greedy(ckpt, {1, 2}, 100));
    EXPECT_EQ(a.size(), 16u);
    EXPECT_THROW(generate_greedy(ckpt, std::vector<std::int32_t>(17, 1), 1), InputError);
}

TEST(Generate, TiesGoToLowerToken) {
    auto ckpt = init_checkpoint(tiny_config(16, 1, 4, 32), 1);
    ckpt.at(names::kHead).fill(0.0f);
    EXPECT_EQ(generate_greedy(ckpt, {7}, 3), (std::vector<std::int32_t>{7, 0, 0, 0}));
}
