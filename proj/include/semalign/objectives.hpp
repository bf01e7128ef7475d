#pragma once

#include "semalign/tensor.hpp"

#include <array>
#include <string>

namespace semalign {

enum class AlignLoss { none, cosine, kl, mse };

AlignLoss parse_align_loss(const std::string& name);
const char* to_string(AlignLoss kind);

/// A scalar loss with its gradient w.r.t. the logits it was computed from.
template <typename Scalar>
struct LossTerm {
    Scalar value = 0;
    Tensor<Scalar> grad;
    Index count = 0;     // pixels that contributed
    bool empty = false;  // true when every pixel was ignored
};

/// Mean pixel-wise cross-entropy over pixels whose target is not `ignore_value`.
/// Returns 0 (and `empty`) when every pixel is ignored.
template <typename Scalar>
LossTerm<Scalar> ce_ignore(const Tensor<Scalar>& logits, const LabelMap& targets, bool need_grad = true,
                           std::uint8_t ignore_value = LabelMap::kIgnore);

/// Mean over all pixels of KL(softmax(strong) || softmax(weak)); the weak side is a
/// constant target, so only dL/dstrong is returned.
template <typename Scalar>
LossTerm<Scalar> kl_consistency(const Tensor<Scalar>& strong, const Tensor<Scalar>& weak,
                                bool need_grad = true);

template <typename Scalar>
struct AlignTerm {
    Scalar value = 0;
    MatrixX<Scalar> d_prototypes;
    MatrixX<Scalar> d_text;
};

/// Class-level agreement between normalize(P) and normalize(T).
///   mse:    mean over all C*D entries of the squared difference
///   cosine: mean over classes of 1 - cos(P_c, T_c)
///   kl:     mean over classes of KL(softmax(P_c) || softmax(T_c)) on normalized rows
template <typename Scalar>
AlignTerm<Scalar> align_loss(const MatrixX<Scalar>& prototypes, const MatrixX<Scalar>& text, AlignLoss kind);

/// Every term is kept separately so the objective can be audited after the fact.
struct LossReport {
    struct Supervised {
        double dl = 0, proto = 0, text = 0, align = 0;
        bool operator==(const Supervised&) const = default;
    };
    struct Unsupervised {
        double hard = 0, soft = 0, corr = 0;
        bool operator==(const Unsupervised&) const = default;
    };

    double total = 0;
    Supervised sup;
    Unsupervised unsup;
    std::array<double, 3> lambda{0.5, 0.25, 0.25};
    double valid_pixel_fraction = 0;
    double lr = 0;
    double tau = 0;

    double sup_sum() const { return sup.dl + sup.proto + sup.text + sup.align; }
    double unsup_sum() const {
        return lambda[0] * unsup.hard + lambda[1] * unsup.soft + lambda[2] * unsup.corr;
    }
    bool all_finite() const;
    std::string describe() const;
    bool operator==(const LossReport&) const = default;
};

/// L = (L_sup + L_unsup) / 2.
inline double total_loss(double sup, double unsup) { return 0.5 * (sup + unsup); }

template <typename Scalar>
struct SupervisedLoss {
    Scalar dl = 0, proto = 0, text = 0, align = 0;
    Tensor<Scalar> d_dl, d_zp, d_zt;  // w.r.t. image-resolution logits; empty when disabled
    MatrixX<Scalar> d_prototypes, d_text;
    Scalar sum() const { return dl + proto + text + align; }
};

/// L_sup = CE(S_dl, y) + CE(S_zp, y) + CE(S_zt, y) + L_align(P, T).
/// `s_zp` / `s_zt` must already be upsampled to the label resolution; pass an empty
/// tensor to drop a branch. Gradients are those of the sum.
template <typename Scalar>
SupervisedLoss<Scalar> supervised_loss(const Tensor<Scalar>& s_dl, const Tensor<Scalar>& s_zp,
                                       const Tensor<Scalar>& s_zt, const MatrixX<Scalar>& prototypes,
                                       const MatrixX<Scalar>& text, const LabelMap& labels,
                                       AlignLoss align_kind = AlignLoss::mse);

template <typename Scalar>
struct UnsupervisedLoss {
    Scalar hard = 0, soft = 0, corr = 0;
    Tensor<Scalar> d_strong, d_fp;  // gradients of the lambda-weighted sum
    std::array<double, 3> lambda{0.5, 0.25, 0.25};
    Scalar weighted() const {
        return Scalar(lambda[0]) * hard + Scalar(lambda[1]) * soft + Scalar(lambda[2]) * corr;
    }
};

/// Hard CE on the strong view, KL(strong || weak) over all pixels, and CE on the
/// feature-perturbed weak view. `strong_targets` are gated pseudo-labels aligned with the
/// strong view (after CutMix); `fp_targets` are aligned with the weak view.
template <typename Scalar>
UnsupervisedLoss<Scalar> unsupervised_loss(const Tensor<Scalar>& s_strong, const Tensor<Scalar>& s_weak,
                                           const Tensor<Scalar>& s_fp, const LabelMap& strong_targets,
                                           const LabelMap& fp_targets, std::array<double, 3> lambda);

}  // namespace semalign
