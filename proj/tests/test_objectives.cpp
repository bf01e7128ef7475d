#include "support.hpp"

#include "semalign/errors.hpp"
#include "semalign/objectives.hpp"

#include <doctest.h>

#include <cmath>

using namespace semalign;
using namespace semalign::testing;

namespace {

Tensor<double> pixel_logits(std::initializer_list<double> values) {
    Tensor<double> t(1, static_cast<Index>(values.size()), 1, 1);
    Index c = 0;
    for (double v : values) t(0, c++, 0, 0) = v;
    return t;
}

// Independent scalar oracle: softmax cross-entropy of one pixel.
double scalar_ce(const std::vector<double>& logits, int target) {
    double m = *std::max_element(logits.begin(), logits.end());
    double z = 0;
    for (double l : logits) z += std::exp(l - m);
    return -(logits[static_cast<std::size_t>(target)] - m - std::log(z));
}

// Central differences of a scalar function of a tensor.
template <typename F>
double fd_max_rel_error(Tensor<double> x, const Tensor<double>& analytic, F f, double eps = 1e-6) {
    double worst = 0;
    for (Index i = 0; i < x.size(); ++i) {
        const double x0 = x.array()[i];
        x.array()[i] = x0 + eps;
        const double up = f(x);
        x.array()[i] = x0 - eps;
        const double down = f(x);
        x.array()[i] = x0;
        const double num = (up - down) / (2 * eps);
        const double a = analytic.array()[i];
        worst = std::max(worst, std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-7}));
    }
    return worst;
}

}  // namespace

TEST_CASE("ce_ignore matches scalar softmax arithmetic") {
    const auto confident = ce_ignore(pixel_logits({10, 0}), LabelMap(1, 1, 1, 0));
    CHECK(confident.value == doctest::Approx(std::log1p(std::exp(-10.0))).epsilon(1e-12));
    CHECK(confident.value < 1e-4);

    const auto uniform = ce_ignore(pixel_logits({0.3, 0.3}), LabelMap(1, 1, 1, 1));
    CHECK(uniform.value == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    const auto ignored = ce_ignore(pixel_logits({1, 2}), LabelMap(1, 1, 1, LabelMap::kIgnore));
    CHECK(ignored.value == 0);
    CHECK(ignored.empty);
    CHECK(ignored.count == 0);
}

TEST_CASE("ce_ignore averages over non-ignored pixels only") {
    const auto logits = random_tensor<double>({2, 3, 4, 5}, 1, -3, 3);
    const auto labels = random_labels(2, 4, 5, 3, 2, 0.3);
    const auto term = ce_ignore(logits, labels);
    double acc = 0;
    int n = 0;
    for (Index b = 0; b < 2; ++b)
        for (Index y = 0; y < 4; ++y)
            for (Index x = 0; x < 5; ++x) {
                if (labels(b, y, x) == LabelMap::kIgnore) continue;
                acc += scalar_ce({logits(b, 0, y, x), logits(b, 1, y, x), logits(b, 2, y, x)}, labels(b, y, x));
                ++n;
            }
    CHECK(term.count == n);
    CHECK(term.value == doctest::Approx(acc / n).epsilon(1e-12));
    CHECK(fd_max_rel_error(logits, term.grad, [&](const Tensor<double>& l) {
              return ce_ignore(l, labels, false).value;
          }) < 1e-6);
}

TEST_CASE("ce_ignore rejects out-of-range targets") {
    CHECK_THROWS_AS(ce_ignore(pixel_logits({0, 0}), LabelMap(1, 1, 1, 2)), ConfigError);
    CHECK_THROWS_AS(ce_ignore(random_tensor<double>({1, 2, 2, 2}, 1), LabelMap(1, 3, 3)), ConfigError);
}

TEST_CASE("kl_consistency scalar example and identity") {
    const auto kl = kl_consistency(pixel_logits({0, 0}), pixel_logits({2, 0}));
    const double q0 = 1 / (1 + std::exp(-2.0));
    const double expected = 0.5 * std::log(0.5 / q0) + 0.5 * std::log(0.5 / (1 - q0));
    CHECK(kl.value == doctest::Approx(expected).epsilon(1e-12));
    CHECK(kl.value == doctest::Approx(0.4338).epsilon(1e-4));

    const auto x = random_tensor<double>({2, 3, 4, 4}, 3, -4, 4);
    CHECK(std::abs(kl_consistency(x, x).value) < 1e-15);
}

TEST_CASE("kl_consistency gradient treats the weak side as a constant") {
    const auto s = random_tensor<double>({1, 3, 3, 4}, 4, -2, 2);
    const auto w = random_tensor<double>({1, 3, 3, 4}, 5, -2, 2);
    const auto kl = kl_consistency(s, w);
    CHECK(kl.value >= 0);
    CHECK(fd_max_rel_error(s, kl.grad, [&](const Tensor<double>& t) { return kl_consistency(t, w, false).value; }) <
          1e-6);
}

TEST_CASE("align_loss values") {
    const auto P = random_matrix<double>(2, 8, 6);
    // Rows are normalized with a 1e-8 guard, so identities hold to ~1e-8.
    CHECK(align_loss<double>(P, P, AlignLoss::mse).value == 0);
    for (auto kind : {AlignLoss::cosine, AlignLoss::kl}) CHECK(std::abs(align_loss<double>(P, P, kind).value) < 1e-7);
    CHECK(align_loss<double>(P, random_matrix<double>(2, 8, 7), AlignLoss::none).value == 0);

    // A unit row against its negation contributes 4 / D per entry of that row.
    const Index D = 8;
    MatrixX<double> u = normalize_rows<double>(random_matrix<double>(1, D, 8));
    const auto opposed = align_loss<double>(u, -u, AlignLoss::mse);
    CHECK(opposed.value == doctest::Approx(4.0 / D).epsilon(1e-7));
    CHECK(align_loss<double>(u, -u, AlignLoss::cosine).value == doctest::Approx(2.0).epsilon(1e-7));

    // Scale of the raw rows is irrelevant: only directions are compared.
    MatrixX<double> T = random_matrix<double>(2, D, 9);
    CHECK(align_loss<double>(P, T, AlignLoss::mse).value ==
          doctest::Approx(align_loss<double>(3.0 * P, 0.5 * T, AlignLoss::mse).value).epsilon(1e-7));
}

TEST_CASE("align_loss gradients match finite differences") {
    const auto P = random_matrix<double>(3, 5, 10);
    const auto T = random_matrix<double>(3, 5, 11);
    for (auto kind : {AlignLoss::mse, AlignLoss::cosine, AlignLoss::kl}) {
        const auto a = align_loss<double>(P, T, kind);
        const double eps = 1e-6;
        double worst = 0;
        for (int which = 0; which < 2; ++which) {
            MatrixX<double> M = which == 0 ? P : T;
            const MatrixX<double>& g = which == 0 ? a.d_prototypes : a.d_text;
            for (Index i = 0; i < M.size(); ++i) {
                const double m0 = M.data()[i];
                M.data()[i] = m0 + eps;
                const double up = which == 0 ? align_loss<double>(M, T, kind).value : align_loss<double>(P, M, kind).value;
                M.data()[i] = m0 - eps;
                const double dn = which == 0 ? align_loss<double>(M, T, kind).value : align_loss<double>(P, M, kind).value;
                M.data()[i] = m0;
                const double num = (up - dn) / (2 * eps);
                worst = std::max(worst, std::abs(g.data()[i] - num) / std::max({std::abs(num), std::abs(g.data()[i]), 1e-7}));
            }
        }
        CAPTURE(to_string(kind));
        CHECK(worst < 1e-5);
    }
}

TEST_CASE("parse_align_loss round-trips names") {
    for (auto kind : {AlignLoss::none, AlignLoss::cosine, AlignLoss::kl, AlignLoss::mse})
        CHECK(parse_align_loss(to_string(kind)) == kind);
    CHECK_THROWS_AS(parse_align_loss("huber"), ConfigError);
}

TEST_CASE("supervised_loss composes its terms") {
    const auto s_dl = random_tensor<double>({1, 2, 4, 4}, 20, -2, 2);
    const auto s_zp = random_tensor<double>({1, 2, 4, 4}, 21);
    const auto s_zt = random_tensor<double>({1, 2, 4, 4}, 22);
    const auto P = random_matrix<double>(2, 8, 23);
    const auto T = random_matrix<double>(2, 8, 24);
    const auto y = random_labels(1, 4, 4, 2, 25, 0.2);
    const auto sup = supervised_loss(s_dl, s_zp, s_zt, P, T, y);
    CHECK(sup.dl == doctest::Approx(ce_ignore(s_dl, y).value).epsilon(1e-14));
    CHECK(sup.proto == doctest::Approx(ce_ignore(s_zp, y).value).epsilon(1e-14));
    CHECK(sup.text == doctest::Approx(ce_ignore(s_zt, y).value).epsilon(1e-14));
    CHECK(sup.align == doctest::Approx(align_loss<double>(P, T, AlignLoss::mse).value).epsilon(1e-14));
    CHECK(sup.sum() == doctest::Approx(sup.dl + sup.proto + sup.text + sup.align).epsilon(1e-14));

    // Perfect heads and P = T drive every term to ~0.
    Tensor<double> perfect(1, 2, 4, 4);
    for (Index yy = 0; yy < 4; ++yy)
        for (Index xx = 0; xx < 4; ++xx) perfect(0, y(0, yy, xx) == 1 ? 1 : 0, yy, xx) = 40;
    CHECK(supervised_loss(perfect, perfect, perfect, P, P, y).sum() < 1e-12);

    // Disabled branches contribute nothing.
    const auto dl_only = supervised_loss(s_dl, Tensor<double>(), Tensor<double>(), MatrixX<double>(), MatrixX<double>(), y);
    CHECK(dl_only.sum() == doctest::Approx(sup.dl).epsilon(1e-14));
    CHECK(dl_only.d_zp.empty());
}

TEST_CASE("unsupervised_loss gating and weights") {
    const auto strong = random_tensor<double>({1, 2, 4, 4}, 30, -2, 2);
    const auto weak = random_tensor<double>({1, 2, 4, 4}, 31, -2, 2);
    const auto fp = random_tensor<double>({1, 2, 4, 4}, 32, -2, 2);
    const LabelMap none(1, 4, 4, LabelMap::kIgnore);
    const std::array<double, 3> lambda{0.5, 0.25, 0.25};

    const auto gated_out = unsupervised_loss(strong, weak, fp, none, none, lambda);
    CHECK(gated_out.hard == 0);
    CHECK(gated_out.corr == 0);
    CHECK(gated_out.weighted() == doctest::Approx(0.25 * gated_out.soft).epsilon(1e-14));

    const auto same = unsupervised_loss(weak, weak, fp, none, none, lambda);
    CHECK(std::abs(same.soft) < 1e-15);

    const auto labels = random_labels(1, 4, 4, 2, 33, 0.4);
    const auto un = unsupervised_loss(strong, weak, fp, labels, labels, lambda);
    CHECK(un.hard == doctest::Approx(ce_ignore(strong, labels).value).epsilon(1e-14));
    CHECK(un.corr == doctest::Approx(ce_ignore(fp, labels).value).epsilon(1e-14));
    CHECK(un.soft == doctest::Approx(kl_consistency(strong, weak).value).epsilon(1e-14));
    CHECK(un.hard >= 0);
    CHECK(un.soft >= 0);
    CHECK(un.corr >= 0);

    // Weighted gradients are those of the weighted sum.
    CHECK(fd_max_rel_error(strong, un.d_strong, [&](const Tensor<double>& s) {
              return unsupervised_loss(s, weak, fp, labels, labels, lambda).weighted();
          }) < 1e-6);
    CHECK(fd_max_rel_error(fp, un.d_fp, [&](const Tensor<double>& f) {
              return unsupervised_loss(strong, weak, f, labels, labels, lambda).weighted();
          }) < 1e-6);
}

TEST_CASE("total_loss halves the sum") {
    CHECK(total_loss(2, 0) == 1);
    CHECK(total_loss(1.2, 0.8) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("LossReport keeps components separately") {
    LossReport r;
    r.sup = {1, 2, 3, 4};
    r.unsup = {1, 2, 4};
    r.lambda = {0.5, 0.25, 0.25};
    CHECK(r.sup_sum() == 10);
    CHECK(r.unsup_sum() == doctest::Approx(0.5 + 0.5 + 1.0));
    CHECK(r.all_finite());
    r.unsup.soft = std::nan("");
    CHECK_FALSE(r.all_finite());
    CHECK(r.describe().find("soft") != std::string::npos);
}

TEST_CASE("miniature model gradients of L_sup and L_unsup") {
    const auto check = check_objective_gradients(2);
    CAPTURE(check.sup.worst);
    CAPTURE(check.unsup.worst);
    CHECK(check.sup.max_rel_error < 1e-4);
    CHECK(check.unsup.max_rel_error < 1e-4);
}
