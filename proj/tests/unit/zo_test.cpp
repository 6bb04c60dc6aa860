#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "miniprune/error.hpp"
#include "miniprune/zo.hpp"
#include "test_support.hpp"

using namespace miniprune;
using miniprune::testing::random_batch;
using miniprune::testing::tiny_config;

namespace {

zo::PerturbSpec rademacher(float eps, int n = 1, std::uint64_t seed = 0) {
    zo::PerturbSpec s;
    s.epsilon = eps;
    s.distribution = Distribution::kRademacher;
    s.n_samples = n;
    s.base_seed = seed;
    return s;
}

}  // namespace

TEST(ZoSpec, Validation) {
    zo::PerturbSpec s;
    s.epsilon = 0.0f;
    EXPECT_THROW(s.validate(), ConfigError);
    s.epsilon = 1e-3f;
    s.n_samples = 0;
    EXPECT_THROW(s.validate(), ConfigError);
}

TEST(ZoScalar, SquareLossHandArithmetic) {
    double w = 3.0;
    auto perturb = [&](double s) { w += s * 1.0; };
    auto loss = [&] { return w * w; };
    const auto d = zo::estimate_loss_delta(perturb, loss, rademacher(0.01f), 0);
    EXPECT_NEAR(d.loss_plus, 9.0601, 1e-6);
    EXPECT_NEAR(d.loss_minus, 8.9401, 1e-6);
    EXPECT_NEAR(w, 3.0, 1e-12);
    EXPECT_NEAR(zo::per_weight_gradient(d, 1.0, 0.01), 6.0, 1e-4);
}

TEST(ZoScalar, PerWeightGradientArithmetic) {
    zo::LossDeltaEntry d{0.12, 0.0, 0};
    EXPECT_NEAR(zo::per_weight_gradient(d, 1.0, 0.01), 6.0, 1e-12);
    EXPECT_NEAR(zo::per_weight_gradient(d, -2.0, 0.01), -3.0, 1e-12);
    zo::LossDeltaEntry e{0.08, 0.0, 0};
    const double mean = (zo::per_weight_gradient(d, 1.0, 0.01) + zo::per_weight_gradient(e, 1.0, 0.01)) / 2.0;
    EXPECT_NEAR(mean, 5.0, 1e-12);
}

TEST(ZoScalar, DivisionGuard) {
    zo::LossDeltaEntry d{1.0, 0.0, 0};
    EXPECT_THROW(zo::per_weight_gradient(d, 0.0, 0.01), NumericalError);
    EXPECT_THROW(zo::per_weight_gradient(d, 0.05, 0.01, 0.1), NumericalError);
    EXPECT_NO_THROW(zo::per_weight_gradient(d, 0.2, 0.01, 0.1));
}

TEST(ZoScalar, ConstantLossGivesEqualMeasurements) {
    double w = 1.0;
    const auto d = zo::estimate_loss_delta([&](double s) { w += s; }, [] { return 4.25; }, rademacher(1e-3f), 3);
    EXPECT_EQ(d.loss_plus, d.loss_minus);
}

TEST(ZoScalar, NonFiniteLossNamesSample) {
    double w = 1.0;
    try {
        zo::estimate_loss_delta([&](double s) { w += s; },
                                [] { return std::numeric_limits<double>::quiet_NaN(); }, rademacher(1e-3f), 7);
        FAIL() << "expected NumericalError";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("sample 7"), std::string::npos);
    }
}

TEST(ZoVector, SumOfSquaresClosedForm) {
    // Find a seed whose first sample draws z = (+1, +1).
    Tensor w({2}, std::vector<float>{1.0f, 2.0f});
    zo::ParamList params{{"w", &w}};
    auto loss = [&] { return static_cast<double>(w[0]) * w[0] + static_cast<double>(w[1]) * w[1]; };
    for (std::uint64_t seed = 0; seed < 64; ++seed) {
        auto spec = rademacher(1e-3f, 1, seed);
        const Tensor z = zo::regenerate_z(spec, zo::sample_stream_id(spec, 0), "w", {2});
        if (z[0] != 1.0f || z[1] != 1.0f) continue;
        const auto g = zo::estimate_gradients(params, loss, spec);
        const auto& d = g.deltas().front();
        EXPECT_NEAR(d.loss_plus - d.loss_minus, 0.012, 1e-6);
        const Tensor gh = g.tensor("w");
        EXPECT_NEAR(gh[0], 6.0, 1e-3);
        EXPECT_NEAR(gh[1], 6.0, 1e-3);
        return;
    }
    FAIL() << "no seed produced z = (1, 1)";
}

TEST(ZoVector, GeneralRademacherDirection) {
    Tensor w({5}, std::vector<float>{0.5f, -1.0f, 2.0f, 0.25f, 3.0f});
    const Tensor w0 = w;
    zo::ParamList params{{"w", &w}};
    auto loss = [&] {
        double s = 0.0;
        for (float v : w.storage()) s += static_cast<double>(v) * v;
        return s;
    };
    const auto spec = rademacher(1e-3f, 1, 99);
    const auto g = zo::estimate_gradients(params, loss, spec);
    const Tensor z = zo::regenerate_z(spec, zo::sample_stream_id(spec, 0), "w", {5});
    double wz = 0.0;
    for (int i = 0; i < 5; ++i) wz += static_cast<double>(w0[i]) * z[i];
    const Tensor gh = g.tensor("w");
    for (int i = 0; i < 5; ++i) EXPECT_NEAR(gh[i], 2.0 * wz / z[i], 2e-3);
}

TEST(ZoVector, UnknownTensorRejected) {
    Tensor w({1}, 1.0f);
    const auto g = zo::estimate_gradients({{"w", &w}}, [&] { return 1.0; }, rademacher(1e-3f));
    EXPECT_THROW(g.tensor("missing"), ConsistencyError);
    EXPECT_TRUE(g.has("w"));
}

TEST(ZoPerturb, ZeroScaleIsIdentity) {
    auto ckpt = init_checkpoint(tiny_config(16, 2, 4, 32), 1);
    const auto before = ckpt;
    zo::perturb_in_place(ckpt, zo::PerturbSpec{}, 0, 0.0f);
    EXPECT_TRUE(ckpt.bit_equal(before));
}

TEST(ZoPerturb, RoundTripDriftBounded) {
    auto ckpt = init_checkpoint(tiny_config(32, 2, 4, 64, FfnKind::kGelu2, 64, 32), 1);
    const auto before = ckpt;
    for (auto dist : {Distribution::kGaussian, Distribution::kRademacher}) {
        zo::PerturbSpec spec;
        spec.distribution = dist;
        for (int s = 0; s < 3; ++s) {
            zo::perturb_in_place(ckpt, spec, s, 1e-3f);
            zo::perturb_in_place(ckpt, spec, s, -2e-3f);
            zo::perturb_in_place(ckpt, spec, s, 1e-3f);
        }
        zo::perturb_in_place(ckpt, spec, 9, 1e-3f);
        zo::perturb_in_place(ckpt, spec, 9, -1e-3f);
    }
    double drift = 0.0;
    for (const auto& [name, t] : ckpt.tensors)
        for (std::int64_t i = 0; i < t.numel(); ++i) drift = std::max(drift, static_cast<double>(std::fabs(t[i] - before.at(name)[i])));
    EXPECT_LE(drift, 1e-5);
}

TEST(ZoPerturb, RademacherTouchesEveryTensor) {
    auto ckpt = init_checkpoint(tiny_config(16, 1, 4, 32), 1);
    const auto before = ckpt;
    zo::PerturbSpec spec;
    spec.distribution = Distribution::kRademacher;
    zo::perturb_in_place(ckpt, spec, 0, 0.5f);
    for (const auto& [name, t] : ckpt.tensors)
        for (std::int64_t i = 0; i < t.numel(); ++i) ASSERT_NEAR(std::fabs(t[i] - before.at(name)[i]), 0.5f, 1e-6f) << name;
}

TEST(ZoEstimate, DeterministicAndRestoring) {
    const auto base = init_checkpoint(tiny_config(16, 2, 4, 32), 1);
    const auto batch = random_batch(2, 8, 32, 3);
    zo::PerturbSpec spec;
    spec.base_seed = 17;
    auto ckpt = base;
    const auto a = zo::estimate_loss_delta(ckpt, batch, spec, 0);
    ckpt = base;
    const auto b = zo::estimate_loss_delta(ckpt, batch, spec, 0);
    EXPECT_EQ(a.loss_plus, b.loss_plus);
    EXPECT_EQ(a.loss_minus, b.loss_minus);
    EXPECT_EQ(a.stream_id, b.stream_id);
    EXPECT_NE(a.loss_plus, a.loss_minus);
    EXPECT_NE(zo::estimate_loss_delta(ckpt, batch, spec, 1).stream_id, a.stream_id);
}

TEST(ZoEstimate, ClampedGaussianIsFinite) {
    auto ckpt = init_checkpoint(tiny_config(16, 2, 4, 32), 1);
    zo::PerturbSpec spec;
    spec.clamp = true;
    spec.n_samples = 2;
    const auto g = zo::estimate_gradients(ckpt, random_batch(2, 8, 32, 3), spec);
    for (const auto& name : g.names()) {
        const Tensor t = g.tensor(name);
        EXPECT_TRUE(t.all_finite()) << name;
    }
    for (const auto& name : g.names()) {
        const Tensor z = zo::regenerate_z(spec, g.deltas()[0].stream_id, name, ckpt.at(name).shape());
        for (float v : z.storage()) ASSERT_GE(std::fabs(v), zo::kClampFloor);
    }
}

TEST(ZoEstimate, CoversFullParameterVector) {
    auto ckpt = init_checkpoint(tiny_config(16, 1, 4, 32), 1);
    const auto g = zo::estimate_gradients(ckpt, random_batch(1, 6, 32, 3), rademacher(1e-3f));
    EXPECT_EQ(g.names().size(), ckpt.tensors.size());
}

TEST(ZoEstimate, AveragesAcrossSamples) {
    Tensor w({3}, std::vector<float>{1.0f, -2.0f, 0.5f});
    auto loss = [&] { return 3.0 * w[0] - 1.0 * w[1] + 0.5 * w[2]; };
    // Off-diagonal terms of z z^T average out as the sample count grows.
    const auto g = zo::estimate_gradients({{"w", &w}}, loss, rademacher(1e-2f, 4000, 5));
    const Tensor gh = g.tensor("w");
    EXPECT_NEAR(gh[0], 3.0, 0.15);
    EXPECT_NEAR(gh[1], -1.0, 0.15);
    EXPECT_NEAR(gh[2], 0.5, 0.15);
}
