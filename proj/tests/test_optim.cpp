#include "support.hpp"

#include "semalign/errors.hpp"
#include "semalign/optim.hpp"

#include <doctest.h>

#include <cmath>

using namespace semalign;
using namespace semalign::testing;

TEST_CASE("poly learning rate") {
    CHECK(poly_lr(0, 100, 0.001, 0.9) == 0.001);
    CHECK(poly_lr(100, 100, 0.001, 0.9) == 0);
    CHECK(poly_lr(50, 100, 0.001, 0.9) == doctest::Approx(0.001 * std::pow(0.5, 0.9)).epsilon(1e-12));
    CHECK(poly_lr(50, 100, 0.001, 0.9) == doctest::Approx(5.359e-4).epsilon(1e-3));
    double prev = 1;
    for (long s = 0; s <= 100; ++s) {
        const double lr = poly_lr(s, 100, 0.001, 0.9);
        CHECK(lr <= prev);
        prev = lr;
    }
    CHECK_THROWS_AS(poly_lr(0, 0, 0.001, 0.9), ConfigError);
    CHECK_THROWS_AS(poly_lr(101, 100, 0.001, 0.9), ConfigError);
    CHECK_THROWS_AS(poly_lr(-1, 100, 0.001, 0.9), ConfigError);
}

TEST_CASE("heavy-ball SGD with selective weight decay") {
    Parameter<double> w("w", ParamGroup::decoder, 1, 2, true, true);
    Parameter<double> p("p", ParamGroup::prototypes, 1, 2, true, false);
    w.value << 1, -2;
    p.value << 1, -2;
    Sgd<double> opt({&w, &p}, SgdConfig{0.9, 0.1});
    CHECK(opt.decays(0));
    CHECK_FALSE(opt.decays(1));

    w.grad << 0.5, 0.5;
    p.grad << 0.5, 0.5;
    opt.step(0.1);
    // v = g + wd * w; w -= lr * v
    CHECK(w.value(0, 0) == doctest::Approx(1 - 0.1 * (0.5 + 0.1 * 1)));
    CHECK(p.value(0, 0) == doctest::Approx(1 - 0.1 * 0.5));
    const double w1 = w.value(0, 1);
    const double v1 = 0.5 + 0.1 * -2;
    opt.step(0.1);
    CHECK(w.value(0, 1) == doctest::Approx(w1 - 0.1 * (0.9 * v1 + 0.5 + 0.1 * w1)));

    opt.zero_grad();
    CHECK(w.grad.isZero());
}

TEST_CASE("SGD refuses frozen tensors") {
    Parameter<double> frozen("f", ParamGroup::encoder, 1, 1, false, false);
    CHECK_THROWS_AS(Sgd<double>({&frozen}, SgdConfig{}), ConfigError);
}

TEST_CASE("weight decay groups of the model") {
    TrainConfig cfg = mini_config();
    SegmentationModel<float> model(cfg.model);
    Sgd<float> opt(model.trainable_parameters(), SgdConfig{});
    for (std::size_t i = 0; i < opt.params().size(); ++i) {
        const auto g = opt.params()[i]->group;
        CAPTURE(opt.params()[i]->name);
        if (g == ParamGroup::prototypes || g == ParamGroup::context || g == ParamGroup::norm) CHECK_FALSE(opt.decays(i));
        if (opt.params()[i]->name.find("bias") != std::string::npos) CHECK_FALSE(opt.decays(i));
    }
}
