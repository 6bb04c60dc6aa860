#include <cmath>

#include <gtest/gtest.h>

#include "miniprune/dataio.hpp"
#include "miniprune/error.hpp"
#include "miniprune/evalkit.hpp"
#include "test_support.hpp"

using namespace miniprune;
using miniprune::testing::random_batch;
using miniprune::testing::tiny_config;

namespace {

// Zero head: every position sees identical logits.
ModelCheckpoint uniform_model(int vocab) {
    auto ckpt = init_checkpoint(tiny_config(16, 1, 4, 32, FfnKind::kGelu2, vocab, 32), 1);
    ckpt.at(names::kHead).fill(0.0f);
    return ckpt;
}

CompareSpec small_spec() {
    CompareSpec s;
    s.grad_samples = 2;
    s.act_samples = 4;
    s.calib_len = 16;
    s.context_length = 16;
    s.max_windows = 8;
    s.protect_first = 0;
    s.protect_last = 0;
    s.train.batch_size = 2;
    s.train.seq_len = 15;
    s.train.max_steps = 3;
    s.train.learning_rate = 1e-3;
    s.lora.r = 2;
    return s;
}

}  // namespace

TEST(Perplexity, UniformModelGivesVocab) {
    const auto ckpt = uniform_model(256);
    const auto tokens = random_batch(1, 32 * 10, 256, 3).tokens;
    const auto r = perplexity(ckpt, tokens, 32);
    EXPECT_NEAR(r.perplexity, 256.0, 256.0 * 1e-3);
    EXPECT_EQ(r.windows, 10);
    EXPECT_EQ(r.predictions, 10 * 31);
}

TEST(Perplexity, SingleWindowIsExpOfLoss) {
    const auto ckpt = init_checkpoint(tiny_config(16, 2, 4, 32), 1, 0.2f);
    const auto batch = random_batch(1, 12, 32, 8);
    const auto r = perplexity(ckpt, batch.tokens, 12);
    EXPECT_NEAR(r.perplexity, std::exp(forward_loss(ckpt, batch)), 1e-9 * r.perplexity);
}

TEST(Perplexity, BatchingDoesNotChangeResult) {
    const auto ckpt = init_checkpoint(tiny_config(16, 2, 4, 32), 1, 0.2f);
    const auto tokens = random_batch(1, 8 * 37 + 5, 32, 9).tokens;
    const auto all = perplexity(ckpt, tokens, 8);
    EXPECT_EQ(all.windows, 37);
    double total = 0.0;
    for (int w = 0; w < 37; ++w) {
        std::vector<std::int32_t> win(tokens.begin() + w * 8, tokens.begin() + w * 8 + 8);
        total += forward_row_nll(ckpt, TokenBatch::single(win))[0];
    }
    EXPECT_NEAR(all.mean_nll, total / (37.0 * 7.0), 1e-12);
    EXPECT_EQ(perplexity(ckpt, tokens, 8, 5).windows, 5);
}

TEST(Perplexity, Errors) {
    const auto ckpt = uniform_model(32);
    const std::vector<std::int32_t> empty;
    EXPECT_THROW(perplexity(ckpt, empty, 8), InputError);
    EXPECT_THROW(perplexity(ckpt, std::vector<std::int32_t>(5, 1), 8), InputError);
    EXPECT_THROW(perplexity(ckpt, std::vector<std::int32_t>(50, 1), 1), ConfigError);
    EXPECT_THROW(perplexity(ckpt, std::vector<std::int32_t>(50, 1), 33), ConfigError);
}

TEST(Perplexity, MemorizedPatternApproachesOne) {
    auto ckpt = init_checkpoint(tiny_config(16, 1, 4, 32, FfnKind::kGelu2, 256, 32), 2);
    std::string text;
    while (text.size() < 4000) text += "ab";
    const auto tokens = tokenize_bytes(text);
    TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.batch_size = 4;
    cfg.seq_len = 31;
    cfg.max_steps = 150;
    cfg.warmup_steps = 10;
    train_full(ckpt, tokens, cfg);
    EXPECT_LT(perplexity(ckpt, tokens, 32).perplexity, 1.05);
}

TEST(Evaluate, ReportFields) {
    const auto ckpt = uniform_model(32);
    const auto r = evaluate(ckpt, random_batch(1, 64, 32, 1).tokens, 16, 0, "m", "d");
    const auto j = r.to_json();
    EXPECT_EQ(j.at("model_id"), "m");
    EXPECT_EQ(j.at("windows"), 4);
    EXPECT_EQ(j.at("param_count"), ckpt.param_count());
    EXPECT_EQ(j.at("mac_count"), count_params_macs(ckpt.config, 16).macs);
    EXPECT_NEAR(j.at("perplexity").get<double>(), 32.0, 1e-3);
}

TEST(Compare, GridShapeAndOrder) {
    const auto ckpt = init_checkpoint(tiny_config(16, 2, 4, 16, FfnKind::kGelu2, 256, 32), 1, 0.1f);
    const Corpus corpus = make_corpus(synthesize_corpus(1, 6000), 0.8);
    auto spec = small_spec();
    spec.criteria = {Criterion::kMagnitudeL2, Criterion::kWanda};
    spec.ratios = {0.25, 0.5};
    spec.seeds = {3};
    spec.recover = false;
    const auto report = compare_criteria(ckpt, corpus, spec);
    ASSERT_EQ(report.rows.size(), 4u);
    EXPECT_EQ(report.rows[0].criterion, "magnitude_l2");
    EXPECT_EQ(report.rows[1].ratio, 0.5);
    EXPECT_EQ(report.rows[2].criterion, "wanda");
    EXPECT_FALSE(report.rows[0].ppl_recovered.has_value());
    for (const auto& r : report.rows) {
        EXPECT_GT(r.removed_prunable, 0.0);
        EXPECT_LT(r.removed_all, r.removed_prunable);
        EXPECT_LT(r.params, report.base_params);
    }
    std::size_t lines = 0;
    for (char c : report.to_jsonl()) lines += c == '\n';
    EXPECT_EQ(lines, 4u);
    EXPECT_NE(report.to_text().find("PPL w/o tune"), std::string::npos);
}

TEST(Compare, ZeroRatioMatchesBase) {
    const auto ckpt = init_checkpoint(tiny_config(16, 2, 4, 16, FfnKind::kGelu2, 256, 32), 1, 0.1f);
    const Corpus corpus = make_corpus(synthesize_corpus(2, 6000), 0.8);
    auto spec = small_spec();
    spec.criteria = {Criterion::kFmsZo};
    spec.ratios = {0.0};
    spec.seeds = {0};
    spec.recover = false;
    const auto report = compare_criteria(ckpt, corpus, spec);
    EXPECT_EQ(report.rows[0].ppl_pruned, report.base_ppl);
    EXPECT_EQ(report.rows[0].params, report.base_params);
}

TEST(Compare, ThreadedMatchesSerial) {
    const auto ckpt = init_checkpoint(tiny_config(16, 2, 4, 16, FfnKind::kGelu2, 256, 32), 1, 0.1f);
    const Corpus corpus = make_corpus(synthesize_corpus(3, 6000), 0.8);
    auto spec = small_spec();
    spec.criteria = {Criterion::kFmsZo, Criterion::kTaylorBp};
    spec.ratios = {0.3};
    spec.seeds = {0, 1};
    const auto serial = compare_criteria(ckpt, corpus, spec);
    spec.threads = 3;
    const auto threaded = compare_criteria(ckpt, corpus, spec);
    ASSERT_EQ(serial.rows.size(), threaded.rows.size());
    for (std::size_t i = 0; i < serial.rows.size(); ++i) {
        EXPECT_EQ(serial.rows[i].ppl_pruned, threaded.rows[i].ppl_pruned);
        EXPECT_EQ(serial.rows[i].ppl_recovered, threaded.rows[i].ppl_recovered);
    }
}

TEST(Compare, EmptyGridRejected) {
    const auto ckpt = uniform_model(256);
    const Corpus corpus = make_corpus(synthesize_corpus(3, 4000), 0.8);
    EXPECT_THROW(compare_criteria(ckpt, corpus, CompareSpec{}), ConfigError);
}

TEST(SeedStreams, DistinctPerPurposeAndSeed) {
    const auto a = derive_seed_streams(0), b = derive_seed_streams(1);
    EXPECT_NE(a.calib_grad, a.calib_act);
    EXPECT_NE(a.zo, a.train);
    EXPECT_NE(a.calib_grad, b.calib_grad);
}
