#include "semalign/backbone.hpp"

#include "semalign/errors.hpp"
#include "semalign/random.hpp"

#include <cmath>

namespace semalign {

namespace {

template <typename Scalar>
void fill_normal(Parameter<Scalar>& p, Rng& rng, double std) {
    std::normal_distribution<double> dist(0.0, std);
    for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = Scalar(dist(rng));
}

}  // namespace

void check_patch_divisible(Index h, Index w, Index patch) {
    if (h <= 0 || w <= 0 || h % patch != 0 || w % patch != 0)
        throw ConfigError("image size " + std::to_string(h) + "x" + std::to_string(w) +
                          " is not divisible by the patch size " + std::to_string(patch) +
                          "; pad the input to a multiple of " + std::to_string(patch));
}

template <typename Scalar>
ToyVitEncoder<Scalar>::ToyVitEncoder(const EncoderConfig& cfg)
    : width_(cfg.width),
      tap_low_(cfg.taps.size() == 2 ? cfg.taps[0] : 0),
      tap_high_(cfg.taps.size() == 2 ? cfg.taps[1] : 0),
      patch_weight_("encoder.patch_embed.weight", ParamGroup::encoder, 3 * 16 * 16, cfg.width, false, false),
      patch_bias_("encoder.patch_embed.bias", ParamGroup::encoder, 1, cfg.width, false, false),
      cls_token_("encoder.cls_token", ParamGroup::encoder, 1, cfg.width, false, false) {
    if (cfg.taps.size() != 2 || tap_low_ < 1 || tap_high_ < tap_low_)
        throw ConfigError("encoder.taps must be two 1-based block indices [low, high] with low <= high");
    if (width_ < 1) throw ConfigError("encoder.width must be positive");
    Rng rng = derive_rng(cfg.seed, "toy_vit");
    fill_normal(patch_weight_, rng, 1.0 / std::sqrt(3.0 * 16 * 16));
    fill_normal(patch_bias_, rng, 0.02);
    fill_normal(cls_token_, rng, 0.02);
    const double mix_std = 1.0 / std::sqrt(static_cast<double>(width_));
    for (int l = 0; l < tap_high_; ++l) {
        const std::string prefix = "encoder.block" + std::to_string(l + 1);
        Block b{Parameter<Scalar>(prefix + ".mix", ParamGroup::encoder, width_, width_, false, false),
                Parameter<Scalar>(prefix + ".bias", ParamGroup::encoder, 1, width_, false, false),
                Parameter<Scalar>(prefix + ".token_mix", ParamGroup::encoder, width_, width_, false, false)};
        fill_normal(b.mix, rng, mix_std);
        fill_normal(b.bias, rng, 0.02);
        fill_normal(b.token_mix, rng, mix_std);
        blocks_.push_back(std::move(b));
    }
}

template <typename Scalar>
EncoderTaps<Scalar> ToyVitEncoder<Scalar>::encode(const Tensor<Scalar>& images) const {
    if (images.c() != 3) throw ConfigError("encoder expects 3-channel images");
    check_patch_divisible(images.h(), images.w(), 16);
    const Index gh = images.h() / 16, gw = images.w() / 16, N = gh * gw;
    EncoderTaps<Scalar> out{Tensor<Scalar>(images.n(), width_, gh, gw),
                            Tensor<Scalar>(images.n(), width_, gh, gw)};

    MatrixX<Scalar> pos = MatrixX<Scalar>::Zero(N + 1, width_);
    for (Index t = 0; t < N; ++t) {
        const double gy = static_cast<double>(t / gw), gx = static_cast<double>(t % gw);
        for (Index k = 0; k < width_; ++k) {
            const double freq = std::pow(100.0, -static_cast<double>(k / 4) * 4.0 / static_cast<double>(width_));
            const double coord = (k % 4) < 2 ? gy : gx;
            pos(t + 1, k) = Scalar(0.1 * ((k % 2) == 0 ? std::sin(coord * freq) : std::cos(coord * freq)));
        }
    }

    MatrixX<Scalar> patches(N, 3 * 16 * 16);
    for (Index b = 0; b < images.n(); ++b) {
        for (Index py = 0; py < gh; ++py)
            for (Index px = 0; px < gw; ++px)
                for (Index c = 0; c < 3; ++c)
                    for (Index y = 0; y < 16; ++y)
                        for (Index x = 0; x < 16; ++x)
                            patches(py * gw + px, (c * 16 + y) * 16 + x) = images(b, c, py * 16 + y, px * 16 + x);

        MatrixX<Scalar> tokens(N + 1, width_);
        tokens.row(0) = cls_token_.value;
        tokens.bottomRows(N).noalias() = patches * patch_weight_.value;
        tokens.bottomRows(N).rowwise() += patch_bias_.value.row(0);
        tokens += pos;

        for (int l = 0; l < tap_high_; ++l) {
            const Block& blk = blocks_[static_cast<std::size_t>(l)];
            MatrixX<Scalar> local = tokens * blk.mix.value;
            local.rowwise() += blk.bias.value.row(0);
            const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> mean = tokens.colwise().mean();
            const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> global =
                (mean * blk.token_mix.value).array().tanh().matrix();
            tokens.array() += Scalar(0.5) * local.array().tanh();
            tokens.rowwise() += Scalar(0.1) * global;
            if (l + 1 == tap_low_) out.low.sample(b) = tokens.bottomRows(N).transpose();
            if (l + 1 == tap_high_) out.high.sample(b) = tokens.bottomRows(N).transpose();
        }
    }
    return out;
}

template <typename Scalar>
ParameterRefs<Scalar> ToyVitEncoder<Scalar>::parameters() {
    ParameterRefs<Scalar> out{&patch_weight_, &patch_bias_, &cls_token_};
    for (auto& b : blocks_) {
        out.push_back(&b.mix);
        out.push_back(&b.bias);
        out.push_back(&b.token_mix);
    }
    return out;
}

template <typename Scalar>
std::unique_ptr<EncoderAdapter<Scalar>> make_encoder(const EncoderConfig& cfg) {
    if (cfg.kind == "toy") return std::make_unique<ToyVitEncoder<Scalar>>(cfg);
    if (cfg.kind == "uni")
        throw ConfigError("encoder.kind=uni needs pretrained weights from an external adapter "
                          "plugin, which is not part of this build");
    throw ConfigError("unknown encoder.kind '" + cfg.kind + "' (expected toy or uni)");
}

template <typename Scalar>
FeatureProjection<Scalar>::FeatureProjection(Index width, Index low_channels, Index high_channels)
    : width_(width),
      low_("proj_low", width, low_channels, 1, 1, true, ParamGroup::projection),
      high_("proj_high", width, high_channels, 1, 1, true, ParamGroup::projection) {}

template <typename Scalar>
void FeatureProjection<Scalar>::init(Rng& rng) {
    low_.init_uniform(rng);
    high_.init_uniform(rng);
}

template <typename Scalar>
BackboneFeatures<Scalar> FeatureProjection<Scalar>::forward(const Tensor<Scalar>& tap_low,
                                                            const Tensor<Scalar>& tap_high) {
    if (tap_low.c() != width_ || tap_high.c() != width_)
        throw ConfigError("feature projection expects " + std::to_string(width_) +
                          " channels, got " + std::to_string(tap_low.c()) + " and " +
                          std::to_string(tap_high.c()));
    return {low_.forward(tap_low), high_.forward(tap_high)};
}

template <typename Scalar>
void FeatureProjection<Scalar>::backward(const Tensor<Scalar>& d_low, const Tensor<Scalar>& d_high) {
    low_.backward(d_low, false);
    high_.backward(d_high, false);
}

template <typename Scalar>
void FeatureProjection<Scalar>::collect(ParameterRefs<Scalar>& out) {
    low_.collect(out);
    high_.collect(out);
}

template <typename Scalar>
DeepLabDecoder<Scalar>::DeepLabDecoder(const DecoderConfig& cfg)
    : cfg_(cfg),
      aspp_point_("aspp.point", cfg.high_channels, cfg.aspp_channels, 1),
      aspp_pool_("aspp.pool.conv", cfg.high_channels, cfg.aspp_channels, 1, 1, true),
      aspp_project_("aspp.project", cfg.aspp_channels * static_cast<Index>(cfg.atrous_rates.size() + 2),
                    cfg.aspp_channels, 1),
      low_reduce_("decoder.low_reduce", cfg.low_channels, cfg.low_reduce, 1),
      refine1_("decoder.refine1", cfg.aspp_channels + cfg.low_reduce, cfg.aspp_channels, 3),
      refine2_("decoder.refine2", cfg.aspp_channels, cfg.aspp_channels, 3),
      classifier_("classifier", cfg.aspp_channels, cfg.num_classes, 1, 1, true, ParamGroup::classifier) {
    for (std::size_t i = 0; i < cfg.atrous_rates.size(); ++i)
        aspp_atrous_.emplace_back("aspp.atrous" + std::to_string(cfg.atrous_rates[i]), cfg.high_channels,
                                  cfg.aspp_channels, 3, cfg.atrous_rates[i]);
}

template <typename Scalar>
void DeepLabDecoder<Scalar>::init(Rng& rng) {
    aspp_point_.init(rng);
    for (auto& a : aspp_atrous_) a.init(rng);
    aspp_pool_.init_kaiming(rng);
    aspp_project_.init(rng);
    low_reduce_.init(rng);
    refine1_.init(rng);
    refine2_.init(rng);
    classifier_.init_uniform(rng);
}

template <typename Scalar>
Tensor<Scalar> DeepLabDecoder<Scalar>::forward(const Tensor<Scalar>& f_low, const Tensor<Scalar>& f_high,
                                               Index out_h, Index out_w, nn::Mode mode) {
    if (f_low.c() != cfg_.low_channels || f_high.c() != cfg_.high_channels)
        throw ConfigError("decoder expects low/high channels " + std::to_string(cfg_.low_channels) +
                          "/" + std::to_string(cfg_.high_channels) + ", got " + f_low.shape().str() +
                          " and " + f_high.shape().str());
    low_shape_ = f_low.shape();
    high_shape_ = f_high.shape();
    const Index B = f_high.n(), H = f_high.h(), W = f_high.w();

    Tensor<Scalar> aspp = aspp_point_.forward(f_high, mode);
    for (auto& a : aspp_atrous_) aspp = nn::concat_channels(aspp, a.forward(f_high, mode));

    Tensor<Scalar> pooled(B, f_high.c(), 1, 1);
    for (Index b = 0; b < B; ++b) pooled.sample(b) = f_high.sample(b).rowwise().mean();
    const Tensor<Scalar> pool_act = aspp_pool_relu_.forward(aspp_pool_.forward(pooled));
    Tensor<Scalar> pool_map(B, cfg_.aspp_channels, H, W);
    for (Index b = 0; b < B; ++b) pool_map.sample(b).colwise() = pool_act.sample(b).col(0);
    aspp = nn::concat_channels(aspp, pool_map);

    Tensor<Scalar> context = aspp_project_.forward(aspp, mode);
    context = nn::resize_bilinear(context, f_low.h(), f_low.w());
    aspp_h_ = H;
    aspp_w_ = W;

    const Tensor<Scalar> skip = low_reduce_.forward(f_low, mode);
    Tensor<Scalar> x = refine1_.forward(nn::concat_channels(context, skip), mode);
    x = refine2_.forward(x, mode);
    return nn::resize_bilinear(classifier_.forward(x), out_h, out_w);
}

template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> DeepLabDecoder<Scalar>::backward(const Tensor<Scalar>& d_logits) {
    Tensor<Scalar> d = nn::resize_bilinear_backward(d_logits, low_shape_.h, low_shape_.w);
    d = classifier_.backward(d);
    d = refine2_.backward(d);
    d = refine1_.backward(d);
    auto [d_context, d_skip] = nn::split_channels(d, cfg_.aspp_channels);
    Tensor<Scalar> d_low = low_reduce_.backward(d_skip);

    d_context = nn::resize_bilinear_backward(d_context, aspp_h_, aspp_w_);
    Tensor<Scalar> d_aspp = aspp_project_.backward(d_context);

    const Index A = cfg_.aspp_channels, B = high_shape_.n;
    auto [d_point, rest] = nn::split_channels(d_aspp, A);
    Tensor<Scalar> d_high = aspp_point_.backward(d_point);
    for (auto& a : aspp_atrous_) {
        auto [d_branch, tail] = nn::split_channels(rest, A);
        d_high.array() += a.backward(d_branch).array();
        rest = std::move(tail);
    }
    Tensor<Scalar> d_pool_act(B, A, 1, 1);
    for (Index b = 0; b < B; ++b) d_pool_act.sample(b) = rest.sample(b).rowwise().sum();
    const Tensor<Scalar> d_pooled = aspp_pool_.backward(aspp_pool_relu_.backward(d_pool_act));
    const Scalar inv_area = Scalar(1) / Scalar(high_shape_.h * high_shape_.w);
    for (Index b = 0; b < B; ++b)
        d_high.sample(b).colwise() += d_pooled.sample(b).col(0) * inv_area;
    return {std::move(d_low), std::move(d_high)};
}

template <typename Scalar>
void DeepLabDecoder<Scalar>::collect(ParameterRefs<Scalar>& out) {
    aspp_point_.collect(out);
    for (auto& a : aspp_atrous_) a.collect(out);
    aspp_pool_.collect(out);
    aspp_project_.collect(out);
    low_reduce_.collect(out);
    refine1_.collect(out);
    refine2_.collect(out);
    classifier_.collect(out);
}

template class ToyVitEncoder<float>;
template class ToyVitEncoder<double>;
template std::unique_ptr<EncoderAdapter<float>> make_encoder<float>(const EncoderConfig&);
template std::unique_ptr<EncoderAdapter<double>> make_encoder<double>(const EncoderConfig&);
template class FeatureProjection<float>;
template class FeatureProjection<double>;
template class DeepLabDecoder<float>;
template class DeepLabDecoder<double>;

}  // namespace semalign
