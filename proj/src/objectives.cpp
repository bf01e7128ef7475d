#include "semalign/objectives.hpp"

#include "semalign/alignment.hpp"
#include "semalign/errors.hpp"

#include <cmath>
#include <sstream>

namespace semalign {

AlignLoss parse_align_loss(const std::string& name) {
    if (name == "none") return AlignLoss::none;
    if (name == "cosine") return AlignLoss::cosine;
    if (name == "kl") return AlignLoss::kl;
    if (name == "mse") return AlignLoss::mse;
    throw ConfigError("unknown alignment loss '" + name + "' (expected none, cosine, kl, mse)");
}

const char* to_string(AlignLoss kind) {
    switch (kind) {
        case AlignLoss::none: return "none";
        case AlignLoss::cosine: return "cosine";
        case AlignLoss::kl: return "kl";
        case AlignLoss::mse: return "mse";
    }
    return "unknown";
}

bool LossReport::all_finite() const {
    for (double v : {total, sup.dl, sup.proto, sup.text, sup.align, unsup.hard, unsup.soft, unsup.corr})
        if (!std::isfinite(v)) return false;
    return true;
}

std::string LossReport::describe() const {
    std::ostringstream os;
    os.precision(9);
    os << "total=" << total << " sup{dl=" << sup.dl << " proto=" << sup.proto << " text=" << sup.text
       << " align=" << sup.align << "} unsup{hard=" << unsup.hard << " soft=" << unsup.soft
       << " corr=" << unsup.corr << "} valid=" << valid_pixel_fraction;
    return os.str();
}

namespace {

template <typename Scalar>
void check_targets(const Tensor<Scalar>& logits, const LabelMap& targets) {
    if (targets.n != logits.n() || targets.h != logits.h() || targets.w != logits.w())
        throw ConfigError("loss: logits " + logits.shape().str() + " do not match targets [" +
                          std::to_string(targets.n) + "," + std::to_string(targets.h) + "," +
                          std::to_string(targets.w) + "]");
}

}  // namespace

template <typename Scalar>
LossTerm<Scalar> ce_ignore(const Tensor<Scalar>& logits, const LabelMap& targets, bool need_grad,
                           std::uint8_t ignore_value) {
    check_targets(logits, targets);
    const Index B = logits.n(), C = logits.c(), HW = logits.h() * logits.w();
    LossTerm<Scalar> out;
    if (need_grad) out.grad = Tensor<Scalar>(logits.shape());
    Scalar total = 0;
    Index count = 0;
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> prob(C);
    for (Index b = 0; b < B; ++b) {
        const auto s = logits.sample(b);
        for (Index p = 0; p < HW; ++p) {
            const std::uint8_t t = targets.data[static_cast<std::size_t>(b * HW + p)];
            if (t == ignore_value) continue;
            if (t >= C)
                throw ConfigError("ce_ignore: target " + std::to_string(t) + " >= class count " +
                                  std::to_string(C));
            const Scalar m = s.col(p).maxCoeff();
            prob = (s.col(p).array() - m).exp().matrix();
            const Scalar z = prob.sum();
            total += std::log(z) + m - s(t, p);
            if (need_grad) {
                prob /= z;
                prob(t) -= Scalar(1);
                out.grad.sample(b).col(p) = prob;
            }
            ++count;
        }
    }
    out.count = count;
    out.empty = count == 0;
    if (count > 0) {
        out.value = total / Scalar(count);
        if (need_grad) out.grad.array() /= Scalar(count);
    }
    return out;
}

template <typename Scalar>
LossTerm<Scalar> kl_consistency(const Tensor<Scalar>& strong, const Tensor<Scalar>& weak, bool need_grad) {
    if (!(strong.shape() == weak.shape()))
        throw ConfigError("kl_consistency: shape mismatch " + strong.shape().str() + " vs " + weak.shape().str());
    const Index B = strong.n(), C = strong.c(), HW = strong.h() * strong.w();
    LossTerm<Scalar> out;
    if (need_grad) out.grad = Tensor<Scalar>(strong.shape());
    Scalar total = 0;
    Eigen::Array<Scalar, Eigen::Dynamic, 1> log_p(C), log_q(C), p(C);
    for (Index b = 0; b < B; ++b) {
        const auto s = strong.sample(b);
        const auto w = weak.sample(b);
        for (Index i = 0; i < HW; ++i) {
            const Scalar ms = s.col(i).maxCoeff(), mw = w.col(i).maxCoeff();
            log_p = s.col(i).array() - ms;
            log_p -= std::log(log_p.exp().sum());
            log_q = w.col(i).array() - mw;
            log_q -= std::log(log_q.exp().sum());
            p = log_p.exp();
            const Scalar kl = (p * (log_p - log_q)).sum();
            total += kl;
            if (need_grad) out.grad.sample(b).col(i) = (p * (log_p - log_q - kl)).matrix();
        }
    }
    const Index n = B * HW;
    out.count = n;
    out.empty = n == 0;
    if (n > 0) {
        out.value = total / Scalar(n);
        if (need_grad) out.grad.array() /= Scalar(n);
    }
    return out;
}

template <typename Scalar>
AlignTerm<Scalar> align_loss(const MatrixX<Scalar>& prototypes, const MatrixX<Scalar>& text, AlignLoss kind) {
    if (prototypes.rows() != text.rows() || prototypes.cols() != text.cols())
        throw ConfigError("align_loss: prototype and text matrices differ in shape");
    const Index C = prototypes.rows(), D = prototypes.cols();
    AlignTerm<Scalar> out;
    out.d_prototypes = MatrixX<Scalar>::Zero(C, D);
    out.d_text = MatrixX<Scalar>::Zero(C, D);
    if (kind == AlignLoss::none || C == 0) return out;

    const MatrixX<Scalar> pn = normalize_rows<Scalar>(prototypes);
    const MatrixX<Scalar> tn = normalize_rows<Scalar>(text);
    MatrixX<Scalar> d_pn(C, D), d_tn(C, D);
    switch (kind) {
        case AlignLoss::mse: {
            const MatrixX<Scalar> diff = pn - tn;
            out.value = diff.squaredNorm() / Scalar(C * D);
            d_pn = diff * (Scalar(2) / Scalar(C * D));
            d_tn = -d_pn;
            break;
        }
        case AlignLoss::cosine: {
            Scalar sum = 0;
            for (Index c = 0; c < C; ++c) sum += Scalar(1) - pn.row(c).dot(tn.row(c));
            out.value = sum / Scalar(C);
            d_pn = -tn / Scalar(C);
            d_tn = -pn / Scalar(C);
            break;
        }
        case AlignLoss::kl: {
            Scalar sum = 0;
            for (Index c = 0; c < C; ++c) {
                Eigen::Array<Scalar, 1, Eigen::Dynamic> lp = pn.row(c).array() - pn.row(c).maxCoeff();
                lp -= std::log(lp.exp().sum());
                Eigen::Array<Scalar, 1, Eigen::Dynamic> lq = tn.row(c).array() - tn.row(c).maxCoeff();
                lq -= std::log(lq.exp().sum());
                const auto p = lp.exp();
                const auto q = lq.exp();
                const Scalar kl = (p * (lp - lq)).sum();
                sum += kl;
                d_pn.row(c) = (p * (lp - lq - kl)).matrix() / Scalar(C);
                d_tn.row(c) = (q - p).matrix() / Scalar(C);
            }
            out.value = sum / Scalar(C);
            break;
        }
        case AlignLoss::none: break;
    }
    out.d_prototypes = normalize_rows_backward<Scalar>(prototypes, d_pn);
    out.d_text = normalize_rows_backward<Scalar>(text, d_tn);
    return out;
}

template <typename Scalar>
SupervisedLoss<Scalar> supervised_loss(const Tensor<Scalar>& s_dl, const Tensor<Scalar>& s_zp,
                                       const Tensor<Scalar>& s_zt, const MatrixX<Scalar>& prototypes,
                                       const MatrixX<Scalar>& text, const LabelMap& labels,
                                       AlignLoss align_kind) {
    SupervisedLoss<Scalar> out;
    auto dl = ce_ignore(s_dl, labels);
    out.dl = dl.value;
    out.d_dl = std::move(dl.grad);
    if (!s_zp.empty()) {
        auto t = ce_ignore(s_zp, labels);
        out.proto = t.value;
        out.d_zp = std::move(t.grad);
    }
    if (!s_zt.empty()) {
        auto t = ce_ignore(s_zt, labels);
        out.text = t.value;
        out.d_zt = std::move(t.grad);
    }
    if (align_kind != AlignLoss::none && prototypes.size() > 0 && text.size() > 0) {
        auto a = align_loss(prototypes, text, align_kind);
        out.align = a.value;
        out.d_prototypes = std::move(a.d_prototypes);
        out.d_text = std::move(a.d_text);
    }
    return out;
}

template <typename Scalar>
UnsupervisedLoss<Scalar> unsupervised_loss(const Tensor<Scalar>& s_strong, const Tensor<Scalar>& s_weak,
                                           const Tensor<Scalar>& s_fp, const LabelMap& strong_targets,
                                           const LabelMap& fp_targets, std::array<double, 3> lambda) {
    UnsupervisedLoss<Scalar> out;
    out.lambda = lambda;
    auto hard = ce_ignore(s_strong, strong_targets);
    auto soft = kl_consistency(s_strong, s_weak);
    auto corr = ce_ignore(s_fp, fp_targets);
    out.hard = hard.value;
    out.soft = soft.value;
    out.corr = corr.value;
    out.d_strong = Tensor<Scalar>(s_strong.shape());
    out.d_strong.array() = Scalar(lambda[0]) * hard.grad.array() + Scalar(lambda[1]) * soft.grad.array();
    out.d_fp = std::move(corr.grad);
    out.d_fp.array() *= Scalar(lambda[2]);
    return out;
}

#define SEMALIGN_INSTANTIATE_OBJ(S)                                                                      \
    template LossTerm<S> ce_ignore<S>(const Tensor<S>&, const LabelMap&, bool, std::uint8_t);            \
    template LossTerm<S> kl_consistency<S>(const Tensor<S>&, const Tensor<S>&, bool);                    \
    template AlignTerm<S> align_loss<S>(const MatrixX<S>&, const MatrixX<S>&, AlignLoss);                \
    template SupervisedLoss<S> supervised_loss<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,  \
                                                  const MatrixX<S>&, const MatrixX<S>&, const LabelMap&, \
                                                  AlignLoss);                                            \
    template UnsupervisedLoss<S> unsupervised_loss<S>(const Tensor<S>&, const Tensor<S>&,                \
                                                      const Tensor<S>&, const LabelMap&,                 \
                                                      const LabelMap&, std::array<double, 3>);

SEMALIGN_INSTANTIATE_OBJ(float)
SEMALIGN_INSTANTIATE_OBJ(double)

}  // namespace semalign
