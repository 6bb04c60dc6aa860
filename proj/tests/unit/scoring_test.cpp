#include <cmath>

#include <gtest/gtest.h>

#include "miniprune/error.hpp"
#include "miniprune/scoring.hpp"
#include "miniprune/zo.hpp"
#include "test_support.hpp"

using namespace miniprune;
using miniprune::testing::random_batch;
using miniprune::testing::tiny_config;

namespace {

struct Fixture {
    ModelCheckpoint ckpt;
    GradientBuffers grads;
    ActivationRecord record;
};

// Every prunable weight, gradient and squared activation sum is set from
// a small closed-form pattern so each criterion can be checked by hand.
Fixture make_fixture() {
    Fixture f;
    f.ckpt = init_checkpoint(tiny_config(4, 1, 2, 6), 3);
    f.record.token_count = 5;
    for (const auto& name : prunable_tensor_names(f.ckpt.config)) {
        Tensor& w = f.ckpt.at(name);
        Tensor g(w.shape());
        for (std::int64_t i = 0; i < w.numel(); ++i) {
            w[i] = 0.1f * static_cast<float>((i % 7) - 3);
            g[i] = 0.5f * static_cast<float>((i % 5) - 2);
        }
        f.grads.emplace(name, std::move(g));
        Tensor sq({w.cols()});
        for (std::int64_t j = 0; j < w.cols(); ++j) sq[j] = static_cast<float>((j + 1) * (j + 1));
        f.record.input_feature_sq_sums.emplace(name, std::move(sq));
    }
    return f;
}

}  // namespace

TEST(Criterion, NamesRoundTrip) {
    for (auto c : all_criteria()) EXPECT_EQ(criterion_from_string(to_string(c)), c);
    EXPECT_THROW(criterion_from_string("random"), ConfigError);
    EXPECT_TRUE(needs_zo_gradient(Criterion::kFmsZo));
    EXPECT_TRUE(needs_bp_gradient(Criterion::kTaylorBp));
    EXPECT_FALSE(needs_activations(Criterion::kTaylorZo));
    EXPECT_TRUE(needs_activations(Criterion::kWanda));
    EXPECT_FALSE(needs_zo_gradient(Criterion::kMagnitudeL1) || needs_bp_gradient(Criterion::kMagnitudeL1));
}

TEST(ActivationNorms, SingleToken) {
    ActivationRecord r;
    r.token_count = 1;
    r.input_feature_sq_sums.emplace("x", Tensor({2}, std::vector<float>{9.0f, 16.0f}));
    const auto n = activation_norms(r);
    EXPECT_FLOAT_EQ(n.at("x")[0], 3.0f);
    EXPECT_FLOAT_EQ(n.at("x")[1], 4.0f);
}

TEST(ActivationNorms, TwoTokensPythagorean) {
    ActivationRecord a, b;
    a.token_count = b.token_count = 1;
    a.input_feature_sq_sums.emplace("x", Tensor({2}, std::vector<float>{9.0f, 0.0f}));
    b.input_feature_sq_sums.emplace("x", Tensor({2}, std::vector<float>{16.0f, 0.0f}));
    a.accumulate(b);
    const auto n = activation_norms(a);
    EXPECT_FLOAT_EQ(n.at("x")[0], 5.0f);
    EXPECT_EQ(n.at("x")[1], 0.0f);
}

TEST(ActivationNorms, EmptyRecordIsCalibrationError) {
    EXPECT_THROW(activation_norms(ActivationRecord{}), CalibrationError);
}

TEST(Score, FmsHandExample) {
    auto f = make_fixture();
    const std::string name = names::wq(0);
    f.ckpt.at(name)[0] = 0.5f;
    f.grads.at(name)[0] = -4.0f;
    f.record.input_feature_sq_sums.at(name)[0] = 4.0f;
    const auto src = GradientSource::exact(f.grads);
    const auto norms = activation_norms(f.record);
    const auto m = score(f.ckpt, Criterion::kFmsBp, &src, &norms);
    EXPECT_FLOAT_EQ(m.scores.at(name)[0], 4.0f);
}

TEST(Score, WandaHandExample) {
    auto f = make_fixture();
    const std::string name = names::wq(0);
    Tensor& w = f.ckpt.at(name);
    w.at(0, 0) = 1.0f;
    w.at(0, 1) = -2.0f;
    f.record.input_feature_sq_sums.at(name)[0] = 9.0f;
    f.record.input_feature_sq_sums.at(name)[1] = 1.0f;
    const auto norms = activation_norms(f.record);
    const auto m = score(f.ckpt, Criterion::kWanda, nullptr, &norms);
    EXPECT_FLOAT_EQ(m.scores.at(name).at(0, 0), 3.0f);
    EXPECT_FLOAT_EQ(m.scores.at(name).at(0, 1), 2.0f);
}

TEST(Score, EveryCriterionMatchesClosedForm) {
    const auto f = make_fixture();
    const auto src = GradientSource::exact(f.grads);
    const auto norms = activation_norms(f.record);
    for (auto c : all_criteria()) {
        const auto m = score(f.ckpt, c, &src, &norms);
        EXPECT_EQ(m.criterion, c);
        for (const auto& name : prunable_tensor_names(f.ckpt.config)) {
            const Tensor& w = f.ckpt.at(name);
            const Tensor& s = m.scores.at(name);
            ASSERT_EQ(s.shape(), w.shape());
            for (std::int64_t r = 0; r < w.rows(); ++r)
                for (std::int64_t j = 0; j < w.cols(); ++j) {
                    const double wv = w.at(r, j), gv = f.grads.at(name).at(r, j);
                    const double nv = static_cast<double>(j + 1);
                    double expected = 0.0;
                    switch (c) {
                        case Criterion::kMagnitudeL1: expected = std::fabs(wv); break;
                        case Criterion::kMagnitudeL2: expected = wv * wv; break;
                        case Criterion::kWanda: expected = std::fabs(wv) * nv; break;
                        case Criterion::kTaylorBp:
                        case Criterion::kTaylorZo: expected = std::fabs(wv * gv); break;
                        case Criterion::kFmsBp:
                        case Criterion::kFmsZo: expected = std::fabs(wv * gv * nv); break;
                    }
                    ASSERT_NEAR(s.at(r, j), expected, 1e-6) << to_string(c) << " " << name;
                    if (wv == 0.0) ASSERT_EQ(s.at(r, j), 0.0f);
                }
        }
    }
}

TEST(Score, MissingSourcesAreConfigErrors) {
    const auto f = make_fixture();
    const auto norms = activation_norms(f.record);
    const auto src = GradientSource::exact(f.grads);
    EXPECT_THROW(score(f.ckpt, Criterion::kFmsZo, nullptr, &norms), ConfigError);
    EXPECT_THROW(score(f.ckpt, Criterion::kFmsBp, &src, nullptr), ConfigError);
    EXPECT_THROW(score(f.ckpt, Criterion::kWanda, nullptr, nullptr), ConfigError);
    EXPECT_NO_THROW(score(f.ckpt, Criterion::kMagnitudeL2, nullptr, nullptr));
}

TEST(Score, EstimatedSourceReplaysZo) {
    auto ckpt = init_checkpoint(tiny_config(8, 1, 2, 8), 4);
    zo::PerturbSpec spec;
    spec.distribution = Distribution::kRademacher;
    const auto g = zo::estimate_gradients(ckpt, random_batch(2, 6, 32, 1), spec);
    const auto src = GradientSource::estimated(g);
    const auto m = score(ckpt, Criterion::kTaylorZo, &src, nullptr);
    // With one rademacher sample |g| is the same for every weight.
    const auto& d = g.deltas().front();
    const double mag = std::fabs(d.loss_plus - d.loss_minus) / (2.0 * spec.epsilon);
    for (const auto& name : prunable_tensor_names(ckpt.config)) {
        const Tensor& w = ckpt.at(name);
        for (std::int64_t i = 0; i < w.numel(); ++i)
            ASSERT_NEAR(m.scores.at(name)[i], std::fabs(w[i]) * mag, 1e-5 * (1.0 + std::fabs(w[i]) * mag));
    }
}

TEST(StructureSum, RowsAndColumns) {
    SensitivityMap m;
    m.scores.emplace("t", Tensor::from_rows({{1, 2, 3}, {4, 5, 6}}));
    using Axis = StructureSlice::Axis;
    EXPECT_EQ(structure_sum(m, {"t", Axis::kRows, 0, 1}), 6.0);
    EXPECT_EQ(structure_sum(m, {"t", Axis::kRows, 0, 2}), 21.0);
    EXPECT_EQ(structure_sum(m, {"t", Axis::kCols, 1, 3}), 2.0 + 3.0 + 5.0 + 6.0);
    EXPECT_THROW(structure_sum(m, {"t", Axis::kRows, 1, 3}), IndexError);
    EXPECT_THROW(structure_sum(m, {"t", Axis::kCols, -1, 1}), IndexError);
    EXPECT_THROW(structure_sum(m, {"u", Axis::kRows, 0, 1}), ConsistencyError);
}
