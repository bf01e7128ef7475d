#include "semalign/inference.hpp"

#include "semalign/errors.hpp"
#include "semalign/fusion.hpp"

namespace semalign {

std::vector<Index> window_starts(Index size, Index window, Index stride) {
    if (window <= 0 || stride <= 0) throw ConfigError("window and stride must be positive");
    if (stride > window) throw ConfigError("stride must not exceed the window size");
    if (size < window) throw ConfigError("image smaller than window");
    std::vector<Index> starts;
    for (Index s = 0; s + window < size; s += stride) starts.push_back(s);
    starts.push_back(size - window);
    return starts;
}

Eigen::ArrayXXi coverage_map(Index h, Index w, Index window, Index stride) {
    Eigen::ArrayXXi cover = Eigen::ArrayXXi::Zero(h, w);
    const Index wh = std::min(window, h), ww = std::min(window, w);
    for (Index y0 : window_starts(h, wh, std::min(stride, wh)))
        for (Index x0 : window_starts(w, ww, std::min(stride, ww))) cover.block(y0, x0, wh, ww) += 1;
    return cover;
}

namespace {

Index reflect(Index i, Index n) {
    if (n == 1) return 0;
    const Index period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> reflect_pad(const Tensor<Scalar>& x, Index bottom, Index right) {
    if (bottom == 0 && right == 0) return x;
    Tensor<Scalar> out(x.n(), x.c(), x.h() + bottom, x.w() + right);
    for (Index b = 0; b < x.n(); ++b)
        for (Index c = 0; c < x.c(); ++c) {
            auto src = x.plane(b, c);
            auto dst = out.plane(b, c);
            for (Index y = 0; y < out.h(); ++y)
                for (Index xx = 0; xx < out.w(); ++xx) dst(y, xx) = src(reflect(y, x.h()), reflect(xx, x.w()));
        }
    return out;
}

template <typename Scalar>
Tensor<Scalar> crop(const Tensor<Scalar>& x, Index top, Index left, Index h, Index w) {
    if (top < 0 || left < 0 || top + h > x.h() || left + w > x.w()) throw ConfigError("crop outside the image");
    Tensor<Scalar> out(x.n(), x.c(), h, w);
    for (Index b = 0; b < x.n(); ++b)
        for (Index c = 0; c < x.c(); ++c) out.plane(b, c) = x.plane(b, c).block(top, left, h, w);
    return out;
}

template <typename Scalar>
Tensor<Scalar> sliding_window_infer(const LogitFn<Scalar>& fn, const Tensor<Scalar>& image, Index window,
                                    Index stride) {
    if (stride <= 0 || stride > window) throw ConfigError("sliding_window_infer: need 0 < stride <= window");
    const Index H = image.h(), W = image.w();
    const Tensor<Scalar> padded = reflect_pad(image, std::max<Index>(0, window - H), std::max<Index>(0, window - W));
    const Index PH = padded.h(), PW = padded.w();

    Tensor<Scalar> sum;
    Eigen::ArrayXXi cover = Eigen::ArrayXXi::Zero(PH, PW);
    for (Index y0 : window_starts(PH, window, stride))
        for (Index x0 : window_starts(PW, window, stride)) {
            const Tensor<Scalar> logits = fn(crop(padded, y0, x0, window, window));
            if (sum.empty()) sum = Tensor<Scalar>(padded.n(), logits.c(), PH, PW);
            for (Index b = 0; b < sum.n(); ++b)
                for (Index c = 0; c < sum.c(); ++c)
                    sum.plane(b, c).block(y0, x0, window, window) += logits.plane(b, c);
            cover.block(y0, x0, window, window) += 1;
        }
    for (Index b = 0; b < sum.n(); ++b)
        for (Index c = 0; c < sum.c(); ++c)
            sum.plane(b, c).array() /= cover.cast<Scalar>();
    return crop(sum, 0, 0, H, W);
}

template <typename Scalar>
Tensor<Scalar> single_infer(const LogitFn<Scalar>& fn, const Tensor<Scalar>& image, Index multiple) {
    const Index H = image.h(), W = image.w();
    const Index ph = (multiple - H % multiple) % multiple, pw = (multiple - W % multiple) % multiple;
    return crop(fn(reflect_pad(image, ph, pw)), 0, 0, H, W);
}

template <typename Scalar>
LabelMap argmax_labels(const Tensor<Scalar>& logits) {
    LabelMap out(logits.n(), logits.h(), logits.w());
    const Index HW = logits.h() * logits.w();
    for (Index b = 0; b < logits.n(); ++b) {
        const auto s = logits.sample(b);
        for (Index p = 0; p < HW; ++p) {
            Index best = 0;
            s.col(p).maxCoeff(&best);
            out.data[static_cast<std::size_t>(b * HW + p)] = static_cast<std::uint8_t>(best);
        }
    }
    return out;
}

template <typename Scalar>
LogitFn<Scalar> model_logit_fn(SegmentationModel<Scalar>& model, const TrainConfig& cfg) {
    const bool fused = cfg.eval.logits == "fused";
    const FusionWeights weights = cfg.fusion;
    return [&model, fused, weights](const Tensor<Scalar>& x) {
        ForwardOptions<Scalar> opt;
        opt.training = false;
        opt.alignment = fused;
        auto out = model.forward(x, opt);
        if (!fused) return std::move(out.logits);
        return fuse_logits(out.logits, out.proto, out.text, weights);
    };
}

template <typename Scalar>
Tensor<Scalar> infer_image(SegmentationModel<Scalar>& model, const Tensor<float>& image, const TrainConfig& cfg) {
    Tensor<float> x = image;
    standardize(x, {cfg.data.mean.begin(), cfg.data.mean.end()}, {cfg.data.std.begin(), cfg.data.std.end()});
    const Tensor<Scalar> xs = x.cast<Scalar>();
    const auto fn = model_logit_fn(model, cfg);
    if (cfg.eval.mode == "sliding") return sliding_window_infer<Scalar>(fn, xs, cfg.eval.window, cfg.eval.stride);
    return single_infer<Scalar>(fn, xs, model.encoder().patch_size());
}

template <typename Scalar>
MetricReport evaluate(SegmentationModel<Scalar>& model, const std::vector<Sample>& samples, const TrainConfig& cfg) {
    if (samples.empty()) throw DataError("evaluate: empty dataset");
    OverlapCounts counts(cfg.model.num_classes);
    for (const auto& s : samples) {
        if (!s.mask) throw DataError("evaluate: sample '" + s.id + "' has no mask");
        counts.add(argmax_labels(infer_image(model, s.image, cfg)), *s.mask);
    }
    return metrics_from_counts(counts);
}

#define SEMALIGN_INSTANTIATE_INFER(S)                                                                  \
    template Tensor<S> reflect_pad<S>(const Tensor<S>&, Index, Index);                                 \
    template Tensor<S> crop<S>(const Tensor<S>&, Index, Index, Index, Index);                          \
    template Tensor<S> sliding_window_infer<S>(const LogitFn<S>&, const Tensor<S>&, Index, Index);     \
    template Tensor<S> single_infer<S>(const LogitFn<S>&, const Tensor<S>&, Index);                    \
    template LabelMap argmax_labels<S>(const Tensor<S>&);                                              \
    template LogitFn<S> model_logit_fn<S>(SegmentationModel<S>&, const TrainConfig&);                  \
    template Tensor<S> infer_image<S>(SegmentationModel<S>&, const Tensor<float>&, const TrainConfig&); \
    template MetricReport evaluate<S>(SegmentationModel<S>&, const std::vector<Sample>&, const TrainConfig&);

SEMALIGN_INSTANTIATE_INFER(float)
SEMALIGN_INSTANTIATE_INFER(double)

}  // namespace semalign
