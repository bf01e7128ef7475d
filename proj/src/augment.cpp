#include "semalign/augment.hpp"

#include "semalign/errors.hpp"
#include "semalign/nn.hpp"
#include "semalign/random.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace semalign {

namespace {

Index reflect_index(Index i, Index n) {
    if (n == 1) return 0;
    const Index period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

// Symmetric padding needed before cropping: the scaled image is centred in the padded canvas.
Index pad_before(Index scaled, Index crop) { return scaled >= crop ? 0 : (crop - scaled) / 2; }

template <typename Fn>
void for_crop(const Geometry& g, Fn&& fn) {
    const Index pad_y = pad_before(g.scaled_h, g.crop_h);
    const Index pad_x = pad_before(g.scaled_w, g.crop_w);
    for (Index y = 0; y < g.crop_h; ++y) {
        const Index sy = reflect_index(y + g.top - pad_y, g.scaled_h);
        for (Index x = 0; x < g.crop_w; ++x) {
            const Index xx = g.flip ? g.crop_w - 1 - x : x;
            const Index sx = reflect_index(xx + g.left - pad_x, g.scaled_w);
            fn(y, x, sy, sx);
        }
    }
}

Tensor<float> gaussian_blur(const Tensor<float>& img, double sigma) {
    const auto radius = static_cast<Index>(std::ceil(3.0 * sigma));
    std::vector<float> k(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0;
    for (Index i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
        k[static_cast<std::size_t>(i + radius)] = static_cast<float>(v);
        sum += v;
    }
    for (auto& v : k) v = static_cast<float>(v / sum);
    const Index H = img.h(), W = img.w();
    Tensor<float> tmp(img.shape()), out(img.shape());
    for (Index c = 0; c < img.c(); ++c) {
        for (Index y = 0; y < H; ++y)
            for (Index x = 0; x < W; ++x) {
                float acc = 0;
                for (Index i = -radius; i <= radius; ++i)
                    acc += k[static_cast<std::size_t>(i + radius)] * img(0, c, y, reflect_index(x + i, W));
                tmp(0, c, y, x) = acc;
            }
        for (Index y = 0; y < H; ++y)
            for (Index x = 0; x < W; ++x) {
                float acc = 0;
                for (Index i = -radius; i <= radius; ++i)
                    acc += k[static_cast<std::size_t>(i + radius)] * tmp(0, c, reflect_index(y + i, H), x);
                out(0, c, y, x) = acc;
            }
    }
    return out;
}

}  // namespace

Geometry sample_geometry(Index in_h, Index in_w, std::uint64_t seed, const AugmentConfig& cfg) {
    if (cfg.scale_min <= 0 || cfg.scale_max < cfg.scale_min)
        throw ConfigError("augment scale range must satisfy 0 < min <= max");
    Rng rng = derive_rng(seed, "geometry");
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Geometry g;
    g.in_h = in_h;
    g.in_w = in_w;
    const double s = cfg.scale_min + (cfg.scale_max - cfg.scale_min) * unit(rng);
    g.scaled_h = std::max<Index>(1, static_cast<Index>(std::lround(static_cast<double>(in_h) * s)));
    g.scaled_w = std::max<Index>(1, static_cast<Index>(std::lround(static_cast<double>(in_w) * s)));
    g.crop_h = cfg.crop;
    g.crop_w = cfg.crop;
    const Index span_h = std::max(g.scaled_h, g.crop_h) - g.crop_h;
    const Index span_w = std::max(g.scaled_w, g.crop_w) - g.crop_w;
    g.top = std::uniform_int_distribution<Index>(0, span_h)(rng);
    g.left = std::uniform_int_distribution<Index>(0, span_w)(rng);
    g.flip = unit(rng) < cfg.flip_prob;
    return g;
}

Tensor<float> apply_geometry(const Tensor<float>& image, const Geometry& g) {
    const Tensor<float> scaled = nn::resize_bilinear(image, g.scaled_h, g.scaled_w);
    Tensor<float> out(image.n(), image.c(), g.crop_h, g.crop_w);
    for (Index b = 0; b < image.n(); ++b)
        for (Index c = 0; c < image.c(); ++c)
            for_crop(g, [&](Index y, Index x, Index sy, Index sx) { out(b, c, y, x) = scaled(b, c, sy, sx); });
    return out;
}

LabelMap apply_geometry(const LabelMap& mask, const Geometry& g) {
    LabelMap out(mask.n, g.crop_h, g.crop_w);
    auto nearest = [](Index o, Index in, Index out_size) {
        const double src = (static_cast<double>(o) + 0.5) * static_cast<double>(in) /
                           static_cast<double>(out_size);
        return std::min(in - 1, static_cast<Index>(std::floor(src)));
    };
    for (Index b = 0; b < mask.n; ++b)
        for_crop(g, [&](Index y, Index x, Index sy, Index sx) {
            out(b, y, x) = mask(b, nearest(sy, mask.h, g.scaled_h), nearest(sx, mask.w, g.scaled_w));
        });
    return out;
}

Tensor<float> weak_augment(const Tensor<float>& image, std::uint64_t seed,
                           const AugmentConfig& cfg) {
    return apply_geometry(image, sample_geometry(image.h(), image.w(), seed, cfg));
}

Tensor<float> photometric_augment(const Tensor<float>& image, std::uint64_t seed,
                                  const AugmentConfig& cfg) {
    Rng rng = derive_rng(seed, "photometric");
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
    Tensor<float> out = image;
    const Index HW = image.h() * image.w();

    // Decisions are drawn unconditionally so every probability setting consumes the same stream.
    const bool jitter = unit(rng) < cfg.color_jitter_prob;
    const double brightness = uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness);
    const double contrast = uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast);
    const double saturation = uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation);
    const double hue = uniform(-cfg.hue, cfg.hue);
    const bool gray = unit(rng) < cfg.grayscale_prob;
    const bool blur = unit(rng) < cfg.blur_prob;
    const double sigma = uniform(cfg.blur_sigma_min, cfg.blur_sigma_max);

    for (Index b = 0; b < out.n(); ++b) {
        auto px = out.sample(b);
        auto luma = [&]() -> ArrayX<float> {
            return (0.299f * px.row(0).array() + 0.587f * px.row(1).array() +
                    0.114f * px.row(2).array())
                .transpose();
        };
        if (jitter) {
            px.array() *= static_cast<float>(brightness);
            px.array() = px.array().min(1.0f).max(0.0f);
            const float mean = luma().mean();
            px.array() = ((px.array() - mean) * static_cast<float>(contrast) + mean).min(1.0f).max(0.0f);
            const ArrayX<float> l = luma();
            for (Index c = 0; c < 3; ++c)
                px.row(c) = ((px.row(c).array().transpose() - l) * static_cast<float>(saturation) + l)
                                .min(1.0f)
                                .max(0.0f)
                                .transpose();
            // Hue rotation about the gray axis (YIQ chroma plane).
            const double angle = hue * 2.0 * std::numbers::pi;
            const float cs = static_cast<float>(std::cos(angle)), sn = static_cast<float>(std::sin(angle));
            for (Index i = 0; i < HW; ++i) {
                const float r = px(0, i), g = px(1, i), bl = px(2, i);
                const float y = 0.299f * r + 0.587f * g + 0.114f * bl;
                const float ci = 0.596f * r - 0.274f * g - 0.322f * bl;
                const float cq = 0.211f * r - 0.523f * g + 0.312f * bl;
                const float i2 = cs * ci - sn * cq, q2 = sn * ci + cs * cq;
                px(0, i) = std::clamp(y + 0.956f * i2 + 0.621f * q2, 0.0f, 1.0f);
                px(1, i) = std::clamp(y - 0.272f * i2 - 0.647f * q2, 0.0f, 1.0f);
                px(2, i) = std::clamp(y - 1.106f * i2 + 1.703f * q2, 0.0f, 1.0f);
            }
        }
        if (gray) {
            const ArrayX<float> l = luma();
            for (Index c = 0; c < 3; ++c) px.row(c) = l.transpose();
        }
    }
    if (blur) out = gaussian_blur(out, sigma);
    out.array() = out.array().min(1.0f).max(0.0f);
    return out;
}

Tensor<float> strong_augment(const Tensor<float>& image, std::uint64_t seed,
                             const AugmentConfig& cfg) {
    return photometric_augment(weak_augment(image, seed, cfg), seed, cfg);
}

ViewPair make_views(const Tensor<float>& image, std::uint64_t seed, const AugmentConfig& cfg) {
    ViewPair v;
    v.geometry = sample_geometry(image.h(), image.w(), seed, cfg);
    v.weak = apply_geometry(image, v.geometry);
    v.strong = photometric_augment(v.weak, seed, cfg);
    return v;
}

std::vector<CutMixPlan> sample_cutmix_plans(Index batch, Index h, Index w, std::uint64_t seed,
                                            const AugmentConfig& cfg) {
    std::vector<CutMixPlan> plans;
    if (batch < 2) return plans;
    Rng rng = derive_rng(seed, "cutmix");
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
    for (Index i = 0; i < batch; ++i) {
        CutMixPlan p;
        const bool apply = unit(rng) < cfg.cutmix_prob;
        const double area = uniform(cfg.cutmix_area_min, cfg.cutmix_area_max) * static_cast<double>(h * w);
        const double aspect = uniform(cfg.cutmix_aspect_min, cfg.cutmix_aspect_max);
        p.h = std::clamp<Index>(static_cast<Index>(std::lround(std::sqrt(area * aspect))), 0, h);
        p.w = std::clamp<Index>(static_cast<Index>(std::lround(std::sqrt(area / aspect))), 0, w);
        p.top = std::uniform_int_distribution<Index>(0, h - p.h)(rng);
        p.left = std::uniform_int_distribution<Index>(0, w - p.w)(rng);
        Index other = std::uniform_int_distribution<Index>(0, batch - 2)(rng);
        p.partner = other >= i ? other + 1 : other;
        if (!apply) p.h = p.w = 0;
        plans.push_back(p);
    }
    return plans;
}

template <typename Scalar>
Tensor<Scalar> apply_cutmix(const Tensor<Scalar>& x, const std::vector<CutMixPlan>& plans) {
    Tensor<Scalar> out = x;
    for (std::size_t i = 0; i < plans.size(); ++i) {
        const auto& p = plans[i];
        const auto b = static_cast<Index>(i);
        for (Index c = 0; c < x.c(); ++c)
            out.plane(b, c).block(p.top, p.left, p.h, p.w) =
                x.plane(p.partner, c).block(p.top, p.left, p.h, p.w);
    }
    return out;
}

LabelMap apply_cutmix(const LabelMap& x, const std::vector<CutMixPlan>& plans) {
    LabelMap out = x;
    for (std::size_t i = 0; i < plans.size(); ++i) {
        const auto& p = plans[i];
        for (Index y = p.top; y < p.top + p.h; ++y)
            for (Index xx = p.left; xx < p.left + p.w; ++xx)
                out(static_cast<Index>(i), y, xx) = x(p.partner, y, xx);
    }
    return out;
}

CutMixResult cutmix(const Tensor<float>& images, const LabelMap& targets, std::uint64_t seed,
                    const AugmentConfig& cfg, const LabelMap* valid) {
    if (targets.n != images.n() || targets.h != images.h() || targets.w != images.w())
        throw ConfigError("cutmix: targets do not match image batch");
    CutMixResult r;
    r.plans = sample_cutmix_plans(images.n(), images.h(), images.w(), seed, cfg);
    r.images = apply_cutmix(images, r.plans);
    r.targets = apply_cutmix(targets, r.plans);
    if (valid != nullptr) r.valid = apply_cutmix(*valid, r.plans);
    return r;
}

template <typename Scalar>
ArrayX<Scalar> channel_dropout_mask(Index n, Index c, double rate, std::uint64_t seed) {
    if (!(rate >= 0.0 && rate < 1.0))
        throw ConfigError("feature dropout rate must be in [0, 1), got " + std::to_string(rate));
    ArrayX<Scalar> mask(n * c);
    Rng rng = derive_rng(seed, "feature_perturb");
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const Scalar keep = Scalar(1.0 / (1.0 - rate));
    for (Index i = 0; i < n * c; ++i) mask[i] = unit(rng) < rate ? Scalar(0) : keep;
    return mask;
}

template <typename Scalar>
Tensor<Scalar> apply_channel_mask(const Tensor<Scalar>& f, const ArrayX<Scalar>& mask) {
    Tensor<Scalar> out(f.shape());
    for (Index b = 0; b < f.n(); ++b)
        for (Index c = 0; c < f.c(); ++c)
            out.sample(b).row(c) = f.sample(b).row(c) * mask[b * f.c() + c];
    return out;
}

template <typename Scalar>
Tensor<Scalar> feature_perturb(const Tensor<Scalar>& f, double rate, std::uint64_t seed) {
    return apply_channel_mask(f, channel_dropout_mask<Scalar>(f.n(), f.c(), rate, seed));
}

#define SEMALIGN_INSTANTIATE_AUG(S)                                                           \
    template Tensor<S> apply_cutmix<S>(const Tensor<S>&, const std::vector<CutMixPlan>&);     \
    template ArrayX<S> channel_dropout_mask<S>(Index, Index, double, std::uint64_t);          \
    template Tensor<S> apply_channel_mask<S>(const Tensor<S>&, const ArrayX<S>&);             \
    template Tensor<S> feature_perturb<S>(const Tensor<S>&, double, std::uint64_t);

SEMALIGN_INSTANTIATE_AUG(float)
SEMALIGN_INSTANTIATE_AUG(double)

}  // namespace semalign
