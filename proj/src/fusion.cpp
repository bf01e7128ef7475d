#include "semalign/fusion.hpp"

#include "semalign/errors.hpp"
#include "semalign/nn.hpp"

#include <algorithm>
#include <cmath>

namespace semalign {

template <typename Scalar>
Tensor<Scalar> fuse_logits(const Tensor<Scalar>& s_dl, const Tensor<Scalar>& s_zp,
                           const Tensor<Scalar>& s_zt, const FusionWeights& w) {
    Tensor<Scalar> fused = s_dl;
    auto add = [&](const Tensor<Scalar>& branch, double eta, const char* name) {
        if (branch.empty()) return;
        if (branch.c() != s_dl.c() || branch.n() != s_dl.n())
            throw ConfigError(std::string("fuse_logits: ") + name + " shape " + branch.shape().str() +
                              " incompatible with decoder logits " + s_dl.shape().str());
        if (eta == 0.0) return;
        fused.array() += Scalar(eta) * nn::resize_bilinear(branch, s_dl.h(), s_dl.w()).array();
    };
    add(s_zp, w.eta_p, "prototype logits");
    add(s_zt, w.eta_t, "text logits");
    return fused;
}

template <typename Scalar>
FusionGrad<Scalar> fuse_logits_backward(const Tensor<Scalar>& d_fused, const Shape4& zp_shape,
                                        const Shape4& zt_shape, const FusionWeights& w) {
    FusionGrad<Scalar> g;
    g.d_dl = d_fused;
    if (zp_shape.numel() > 0) {
        g.d_zp = nn::resize_bilinear_backward(d_fused, zp_shape.h, zp_shape.w);
        g.d_zp.array() *= Scalar(w.eta_p);
    }
    if (zt_shape.numel() > 0) {
        g.d_zt = nn::resize_bilinear_backward(d_fused, zt_shape.h, zt_shape.w);
        g.d_zt.array() *= Scalar(w.eta_t);
    }
    return g;
}

LabelMap PseudoLabelMap::gated() const {
    LabelMap out = labels;
    for (std::size_t i = 0; i < out.data.size(); ++i)
        if (valid.data[i] == 0) out.data[i] = LabelMap::kIgnore;
    return out;
}

double PseudoLabelMap::valid_fraction() const {
    if (valid.data.empty()) return 0.0;
    const auto n = std::count(valid.data.begin(), valid.data.end(), std::uint8_t{1});
    return static_cast<double>(n) / static_cast<double>(valid.data.size());
}

template <typename Scalar>
PseudoLabelMap generate_pseudo_labels(const Tensor<Scalar>& logits, double tau) {
    const Index B = logits.n(), C = logits.c(), HW = logits.h() * logits.w();
    if (!logits.all_finite()) throw NumericError("generate_pseudo_labels: non-finite logits");
    PseudoLabelMap pl{LabelMap(B, logits.h(), logits.w()), LabelMap(B, logits.h(), logits.w()),
                      ArrayX<double>(B * HW)};
    for (Index b = 0; b < B; ++b) {
        const auto s = logits.sample(b);
        for (Index p = 0; p < HW; ++p) {
            Index best = 0;
            double best_v = static_cast<double>(s(0, p));
            for (Index c = 1; c < C; ++c)
                if (static_cast<double>(s(c, p)) > best_v) {
                    best_v = static_cast<double>(s(c, p));
                    best = c;
                }
            double denom = 0;
            for (Index c = 0; c < C; ++c) denom += std::exp(static_cast<double>(s(c, p)) - best_v);
            const double conf = 1.0 / denom;
            const auto idx = static_cast<std::size_t>(b * HW + p);
            pl.labels.data[idx] = static_cast<std::uint8_t>(best);
            pl.valid.data[idx] = conf >= tau ? 1 : 0;
            pl.confidence[static_cast<Index>(idx)] = conf;
        }
    }
    return pl;
}

ThresholdState update_threshold(const ThresholdState& state, std::span<const double> confidences) {
    if (confidences.empty()) return state;
    double sum = 0;
    for (double c : confidences) sum += c;
    const double mean = sum / static_cast<double>(confidences.size());
    ThresholdState next = state;
    next.tau = std::clamp(state.alpha * state.tau + (1.0 - state.alpha) * mean, state.tau_min, state.tau_max);
    return next;
}

template Tensor<float> fuse_logits<float>(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                          const FusionWeights&);
template Tensor<double> fuse_logits<double>(const Tensor<double>&, const Tensor<double>&,
                                            const Tensor<double>&, const FusionWeights&);
template FusionGrad<float> fuse_logits_backward<float>(const Tensor<float>&, const Shape4&, const Shape4&,
                                                       const FusionWeights&);
template FusionGrad<double> fuse_logits_backward<double>(const Tensor<double>&, const Shape4&, const Shape4&,
                                                         const FusionWeights&);
template PseudoLabelMap generate_pseudo_labels<float>(const Tensor<float>&, double);
template PseudoLabelMap generate_pseudo_labels<double>(const Tensor<double>&, double);

}  // namespace semalign
