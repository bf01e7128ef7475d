#include "support.hpp"

#include "semalign/errors.hpp"
#include "semalign/fusion.hpp"

#include <doctest.h>

#include <cmath>

using namespace semalign;
using namespace semalign::testing;

TEST_CASE("fusion with zero weights is the decoder map") {
    const auto s_dl = random_tensor<double>({2, 2, 8, 8}, 1, -3, 3);
    const auto s_zp = random_tensor<double>({2, 2, 2, 2}, 2);
    const auto s_zt = random_tensor<double>({2, 2, 2, 2}, 3);
    const auto fused = fuse_logits(s_dl, s_zp, s_zt, FusionWeights{0, 0});
    CHECK((fused.array() == s_dl.array()).all());
    CHECK((fuse_logits(s_dl, Tensor<double>(), Tensor<double>(), FusionWeights{}).array() == s_dl.array()).all());
}

TEST_CASE("fusion hand example") {
    Tensor<double> s_dl(1, 2, 1, 1), s_zp(1, 2, 1, 1), s_zt(1, 2, 1, 1);
    s_dl(0, 0, 0, 0) = 2;
    s_dl(0, 1, 0, 0) = 1;
    s_zp(0, 0, 0, 0) = 1;
    s_zt(0, 1, 0, 0) = 1;
    const auto f = fuse_logits(s_dl, s_zp, s_zt, FusionWeights{0.1, 0.1});
    CHECK(std::abs(f(0, 0, 0, 0) - 2.1) < 1e-12);
    CHECK(std::abs(f(0, 1, 0, 0) - 1.1) < 1e-12);

    // Constant feature-resolution maps upsample to the same constant.
    Tensor<double> big = Tensor<double>::constant({1, 2, 4, 4}, 0);
    big.plane(0, 0).setConstant(2);
    big.plane(0, 1).setConstant(1);
    const auto g = fuse_logits(big, s_zp, s_zt, FusionWeights{0.1, 0.1});
    CHECK((g.plane(0, 0).array() - 2.1).abs().maxCoeff() < 1e-12);
    CHECK((g.plane(0, 1).array() - 1.1).abs().maxCoeff() < 1e-12);
}

TEST_CASE("fusion default weights") {
    FusionWeights w;
    CHECK(w.eta_p == 0.1);
    CHECK(w.eta_t == 0.1);
}

TEST_CASE("fusion linearity and shift invariance of argmax") {
    const auto s_dl = random_tensor<double>({1, 3, 8, 8}, 4, -2, 2);
    const auto s_zp = random_tensor<double>({1, 3, 2, 2}, 5);
    const auto s_zt = random_tensor<double>({1, 3, 2, 2}, 6);
    const FusionWeights w{0.1, 0.3};
    const double a = 2.5;
    Tensor<double> as_dl = s_dl, as_zp = s_zp, as_zt = s_zt;
    as_dl.array() *= a;
    as_zp.array() *= a;
    as_zt.array() *= a;
    const auto lhs = fuse_logits(as_dl, as_zp, as_zt, w);
    Tensor<double> rhs = fuse_logits(s_dl, s_zp, s_zt, w);
    rhs.array() *= a;
    CHECK((lhs.array() - rhs.array()).abs().maxCoeff() < 1e-12);

    const auto base = generate_pseudo_labels(fuse_logits(s_dl, s_zp, s_zt, w), 0.0);
    Tensor<double> shifted = s_dl;
    for (Index y = 0; y < 8; ++y)
        for (Index x = 0; x < 8; ++x)
            for (Index c = 0; c < 3; ++c) shifted(0, c, y, x) += 0.37 * static_cast<double>(y - x);
    CHECK(generate_pseudo_labels(fuse_logits(shifted, s_zp, s_zt, w), 0.0).labels == base.labels);
}

TEST_CASE("fusion rejects channel mismatch") {
    CHECK_THROWS_AS(fuse_logits(Tensor<double>(1, 2, 4, 4), Tensor<double>(1, 3, 1, 1), Tensor<double>(), FusionWeights{}),
                    ConfigError);
}

TEST_CASE("fusion backward is the adjoint") {
    const Shape4 zp{1, 2, 2, 3};
    const auto s_dl = random_tensor<double>({1, 2, 8, 12}, 7);
    const auto s_zp = random_tensor<double>(zp, 8);
    const auto s_zt = random_tensor<double>(zp, 9);
    const auto d = random_tensor<double>({1, 2, 8, 12}, 10);
    const FusionWeights w{0.1, 0.2};
    const auto g = fuse_logits_backward(d, zp, zp, w);
    // <d, fuse(x)> is linear in each input, so <d, fuse(e_i)> is the gradient entry.
    const double base = (d.array() * fuse_logits(s_dl, s_zp, s_zt, w).array()).sum();
    for (Index i = 0; i < s_zp.size(); ++i) {
        Tensor<double> p = s_zp;
        p.array()[i] += 1;
        const double delta = (d.array() * fuse_logits(s_dl, p, s_zt, w).array()).sum() - base;
        CHECK(g.d_zp.array()[i] == doctest::Approx(delta).epsilon(1e-9));
    }
    CHECK((g.d_dl.array() == d.array()).all());
}

TEST_CASE("pseudo-label scalar examples") {
    Tensor<double> l(1, 2, 1, 3);
    l(0, 0, 0, 0) = 3;
    l(0, 1, 0, 0) = -3;
    l(0, 0, 0, 1) = 0.5;
    l(0, 1, 0, 1) = 0.5;
    l(0, 0, 0, 2) = -1;
    l(0, 1, 0, 2) = 1;
    const auto pl = generate_pseudo_labels(l, 0.7);
    CHECK(pl.confidence[0] == doctest::Approx(1 / (1 + std::exp(-6.0))).epsilon(1e-12));
    CHECK(pl.confidence[0] == doctest::Approx(0.9975).epsilon(1e-4));
    CHECK(pl.labels(0, 0, 0) == 0);
    CHECK(pl.valid(0, 0, 0) == 1);
    CHECK(pl.confidence[1] == doctest::Approx(0.5));
    CHECK(pl.valid(0, 0, 1) == 0);
    CHECK(pl.labels(0, 0, 2) == 1);
    CHECK(pl.gated()(0, 0, 1) == LabelMap::kIgnore);
    CHECK(pl.gated()(0, 0, 0) == 0);

    const auto all = generate_pseudo_labels(l, 0.0);
    CHECK(all.valid_fraction() == 1.0);
}

TEST_CASE("pseudo-label gate properties") {
    const auto logits = random_tensor<double>({2, 3, 6, 6}, 11, -3, 3);
    Index prev = logits.n() * logits.h() * logits.w() + 1;
    for (int k = 0; k <= 20; ++k) {
        const double tau = k / 20.0;
        const auto pl = generate_pseudo_labels(logits, tau);
        Index valid = 0;
        for (std::size_t i = 0; i < pl.valid.data.size(); ++i) {
            if (!pl.valid.data[i]) continue;
            ++valid;
            CHECK(pl.confidence[static_cast<Index>(i)] >= tau);
        }
        CHECK(valid <= prev);
        prev = valid;
    }
    // Labels are the argmax everywhere.
    const auto pl = generate_pseudo_labels(logits, 0.9);
    for (Index b = 0; b < 2; ++b)
        for (Index y = 0; y < 6; ++y)
            for (Index x = 0; x < 6; ++x) {
                Index best = 0;
                for (Index c = 1; c < 3; ++c)
                    if (logits(b, c, y, x) > logits(b, best, y, x)) best = c;
                CHECK(pl.labels(b, y, x) == best);
            }
}

TEST_CASE("EMA threshold update") {
    ThresholdState s;
    CHECK(s.tau == 0.7);
    s.alpha = 0.9;
    const std::vector<double> high{0.9, 0.9};
    CHECK(update_threshold(s, high).tau == doctest::Approx(0.72).epsilon(1e-12));

    const std::vector<double> at{0.6, 0.8};
    CHECK(update_threshold(s, at).tau == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(update_threshold(s, {}).tau == s.tau);

    const std::vector<double> ones{1.0};
    ThresholdState fast = s;
    fast.alpha = 0;
    CHECK(update_threshold(fast, ones).tau == 0.95);
    const std::vector<double> zeros{0.0};
    CHECK(update_threshold(fast, zeros).tau == 0.5);
}

TEST_CASE("EMA converges geometrically") {
    ThresholdState s;
    s.alpha = 0.9;
    const double m = 0.85;
    const std::vector<double> batch{m};
    const double gap0 = std::abs(s.tau - m);
    for (int i = 0; i < 100; ++i) s = update_threshold(s, batch);
    CHECK(std::abs(s.tau - m) == doctest::Approx(gap0 * std::pow(0.9, 100)).epsilon(1e-6));
}
