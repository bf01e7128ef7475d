#pragma once

#include "semalign/tensor.hpp"

#include <span>

namespace semalign {

struct FusionWeights {
    double eta_p = 0.1;
    double eta_t = 0.1;
};

/// S_fuse = S_dl + eta_p * up(S_zp) + eta_t * up(S_zt).
///
/// The alignment maps arrive at feature resolution and are bilinearly upsampled to the
/// decoder's resolution before the weighted sum. An empty tensor marks a disabled branch.
template <typename Scalar>
Tensor<Scalar> fuse_logits(const Tensor<Scalar>& s_dl, const Tensor<Scalar>& s_zp,
                           const Tensor<Scalar>& s_zt, const FusionWeights& w);

/// Gradients of fuse_logits w.r.t. its three inputs given dL/dS_fuse.
template <typename Scalar>
struct FusionGrad {
    Tensor<Scalar> d_dl;
    Tensor<Scalar> d_zp;
    Tensor<Scalar> d_zt;
};

template <typename Scalar>
FusionGrad<Scalar> fuse_logits_backward(const Tensor<Scalar>& d_fused, const Shape4& zp_shape,
                                        const Shape4& zt_shape, const FusionWeights& w);

struct PseudoLabelMap {
    LabelMap labels;          // argmax of the fused softmax, everywhere
    LabelMap valid;           // 1 where confidence >= tau
    ArrayX<double> confidence;  // max softmax probability, [B * H * W]

    /// Labels with invalid pixels replaced by the ignore value.
    LabelMap gated() const;
    double valid_fraction() const;
};

/// Softmax over classes, argmax labels, and confidence gating at `tau`.
template <typename Scalar>
PseudoLabelMap generate_pseudo_labels(const Tensor<Scalar>& fused_logits, double tau);

struct ThresholdState {
    double tau = 0.7;
    double alpha = 0.999;
    double tau_min = 0.5;
    double tau_max = 0.95;
};

/// tau' = clamp(alpha * tau + (1 - alpha) * mean(confidences), tau_min, tau_max).
/// An empty batch leaves the state unchanged.
ThresholdState update_threshold(const ThresholdState& state, std::span<const double> confidences);

}  // namespace semalign
