#include "support.hpp"

#include "semalign/backbone.hpp"
#include "semalign/errors.hpp"
#include "semalign/nn.hpp"

#include <doctest.h>

using namespace semalign;
using namespace semalign::testing;

TEST_CASE("toy encoder tap shapes") {
    EncoderConfig cfg;
    ToyVitEncoder<float> enc(cfg);
    CHECK(enc.width() == 768);
    CHECK(enc.taps() == std::pair<int, int>{2, 9});
    const auto taps = enc.encode(random_tensor<float>({1, 3, 256, 256}, 1));
    CHECK(taps.low.shape() == Shape4{1, 768, 16, 16});
    CHECK(taps.high.shape() == Shape4{1, 768, 16, 16});

    cfg.width = 32;
    ToyVitEncoder<float> small(cfg);
    const auto t64 = small.encode(random_tensor<float>({2, 3, 64, 64}, 2));
    CHECK(t64.low.shape() == Shape4{2, 32, 4, 4});
    CHECK(t64.high.shape() == Shape4{2, 32, 4, 4});
}

TEST_CASE("toy encoder is a deterministic frozen function") {
    EncoderConfig cfg;
    cfg.width = 24;
    ToyVitEncoder<double> a(cfg), b(cfg);
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
        CHECK(a.parameters()[i]->value == b.parameters()[i]->value);
        CHECK_FALSE(a.parameters()[i]->trainable);
    }
    const auto x = random_tensor<double>({1, 3, 32, 48}, 3);
    const auto t1 = a.encode(x);
    const auto t2 = a.encode(x);
    CHECK((t1.high.array() == t2.high.array()).all());
    CHECK((t1.low.array() == b.encode(x).low.array()).all());

    // Zero images give the fixed bias response, identical at every call.
    const Tensor<double> zero(1, 3, 32, 32);
    CHECK((a.encode(zero).high.array() == a.encode(zero).high.array()).all());

    // Random input gives non-degenerate features.
    const ArrayX<double> v = t1.high.array();
    CHECK((v - v.mean()).square().mean() > 1e-6);

    cfg.seed = 99;
    ToyVitEncoder<double> c(cfg);
    CHECK_FALSE((c.encode(x).high.array() == t1.high.array()).all());
}

TEST_CASE("encoder input validation") {
    EncoderConfig cfg;
    cfg.width = 8;
    ToyVitEncoder<float> enc(cfg);
    CHECK_THROWS_WITH_AS(enc.encode(Tensor<float>(1, 3, 40, 32)), doctest::Contains("pad"), ConfigError);
    CHECK_THROWS_AS(enc.encode(Tensor<float>(1, 1, 32, 32)), ConfigError);

    cfg.kind = "uni";
    CHECK_THROWS_AS(make_encoder<float>(cfg), ConfigError);
    cfg.kind = "resnet";
    CHECK_THROWS_AS(make_encoder<float>(cfg), ConfigError);
    cfg.kind = "toy";
    cfg.taps = {9, 2};
    CHECK_THROWS_AS(make_encoder<float>(cfg), ConfigError);
}

TEST_CASE("feature projection channels") {
    FeatureProjection<float> proj(768, 256, 2048);
    Rng rng(1);
    proj.init(rng);
    const auto f = proj.forward(random_tensor<float>({1, 768, 4, 4}, 4), random_tensor<float>({1, 768, 4, 4}, 5));
    CHECK(f.low.shape() == Shape4{1, 256, 4, 4});
    CHECK(f.high.shape() == Shape4{1, 2048, 4, 4});
    CHECK_THROWS_AS(proj.forward(Tensor<float>(1, 64, 4, 4), Tensor<float>(1, 64, 4, 4)), ConfigError);
}

TEST_CASE("decoder loss gradient reaches a projection weight") {
    TrainConfig cfg = mini_config();
    SegmentationModel<double> model(cfg.model);
    const auto x = random_tensor<double>({1, 3, 32, 32}, 6);
    const auto y = random_labels(1, 32, 32, 2, 7);
    ForwardOptions<double> opt;
    opt.training = true;
    opt.alignment = false;
    auto loss = [&] { return ce_ignore(model.forward(x, opt).logits, y, false).value; };
    model.zero_grad();
    const auto out = model.forward(x, opt);
    model.backward(ce_ignore(out.logits, y).grad, {}, {});
    Parameter<double>* w = nullptr;
    for (auto* p : model.trainable_parameters())
        if (p->group == ParamGroup::projection && p->name.find("high") != std::string::npos && p->decay) w = p;
    REQUIRE(w != nullptr);
    const double eps = 1e-6;
    double& v = w->value(0, 0);
    const double v0 = v;
    v = v0 + eps;
    const double up = loss();
    v = v0 - eps;
    const double down = loss();
    v = v0;
    const double numeric = (up - down) / (2 * eps);
    CHECK(std::abs(numeric) > 0);
    CHECK(w->grad(0, 0) == doctest::Approx(numeric).epsilon(1e-6));
}

TEST_CASE("decoder output shape and classifier linearity") {
    DeepLabDecoder<double> dec(DecoderConfig{});
    Rng rng(2);
    dec.init(rng);
    const auto f_low = random_tensor<double>({1, 256, 16, 16}, 8);
    const auto f_high = random_tensor<double>({1, 2048, 16, 16}, 9);
    const auto s = dec.forward(f_low, f_high, 256, 256, nn::Mode::eval);
    CHECK(s.shape() == Shape4{1, 2, 256, 256});
    CHECK(s.all_finite());

    const double delta = 0.75;
    dec.classifier().bias().value(0, 1) += delta;
    const auto shifted = dec.forward(f_low, f_high, 256, 256, nn::Mode::eval);
    CHECK((shifted.plane(0, 0).array() == s.plane(0, 0).array()).all());
    CHECK(((shifted.plane(0, 1).array() - s.plane(0, 1).array()) - delta).abs().maxCoeff() < 1e-12);
}

TEST_CASE("model shape chain") {
    TrainConfig cfg = mini_config();
    SegmentationModel<float> model(cfg.model);
    ForwardOptions<float> opt;
    const auto out = model.forward(random_tensor<float>({2, 3, 64, 48}, 10), opt);
    CHECK(out.logits.shape() == Shape4{2, 2, 64, 48});
    CHECK(out.proto.shape() == Shape4{2, 2, 4, 3});
    CHECK(out.text.shape() == Shape4{2, 2, 4, 3});
    CHECK_THROWS_AS(model.forward(Tensor<float>(1, 3, 50, 48), opt), ConfigError);
}

TEST_CASE("model forward is deterministic for a fixed seed") {
    TrainConfig cfg = mini_config();
    SegmentationModel<float> a(cfg.model), b(cfg.model);
    const auto x = random_tensor<float>({1, 3, 32, 32}, 11);
    ForwardOptions<float> opt;
    CHECK((a.forward(x, opt).logits.array() == b.forward(x, opt).logits.array()).all());
}

TEST_CASE("batch statistics modes") {
    nn::BatchNorm2d<double> bn("bn", 2);
    ParameterRefs<double> ps;
    bn.collect(ps);
    auto running = [&] {
        MatrixX<double> all(2, 2);
        int k = 0;
        for (auto* p : ps)
            if (p->group == ParamGroup::buffer) all.row(k++) = p->value.row(0);
        return all;
    };
    const auto x = random_tensor<double>({2, 2, 3, 3}, 12, 2, 4);
    const auto before = running();
    const auto frozen = bn.forward(x, nn::Mode::train_frozen_stats);
    CHECK(running() == before);
    const auto trained = bn.forward(x, nn::Mode::train);
    CHECK(running() != before);
    CHECK((frozen.array() == trained.array()).all());
    // Batch statistics normalize each channel to zero mean.
    CHECK(std::abs(trained.array().head(9).mean() + trained.array().segment(18, 9).mean()) < 1e-12);
}
