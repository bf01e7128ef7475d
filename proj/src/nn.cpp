#include "semalign/nn.hpp"

#include "semalign/errors.hpp"

#include <cmath>

namespace semalign {

const char* to_string(ParamGroup group) {
    switch (group) {
        case ParamGroup::encoder: return "encoder";
        case ParamGroup::text_encoder: return "text_encoder";
        case ParamGroup::projection: return "projection";
        case ParamGroup::decoder: return "decoder";
        case ParamGroup::classifier: return "classifier";
        case ParamGroup::norm: return "norm";
        case ParamGroup::prototypes: return "prototypes";
        case ParamGroup::context: return "context";
        case ParamGroup::text_projection: return "text_projection";
        case ParamGroup::buffer: return "buffer";
    }
    return "unknown";
}

}  // namespace semalign

namespace semalign::nn {

template <typename Scalar>
Conv2d<Scalar>::Conv2d(std::string name, Index in_channels, Index out_channels, Index kernel,
                       Index dilation, bool bias, ParamGroup group)
    : name_(std::move(name)),
      in_(in_channels),
      out_(out_channels),
      k_(kernel),
      dilation_(dilation),
      has_bias_(bias),
      weight_(name_ + ".weight", group, out_channels, in_channels * kernel * kernel),
      bias_(name_ + ".bias", group, bias ? out_channels : 0, bias ? 1 : 0, true, false) {
    if (kernel % 2 != 1) throw ConfigError("Conv2d " + name_ + ": kernel must be odd");
}

template <typename Scalar>
void Conv2d<Scalar>::init_kaiming(Rng& rng) {
    const double std = std::sqrt(2.0 / static_cast<double>(in_ * k_ * k_));
    std::normal_distribution<double> dist(0.0, std);
    for (Index i = 0; i < weight_.value.size(); ++i) weight_.value.data()[i] = Scalar(dist(rng));
    if (has_bias_) bias_.value.setZero();
}

template <typename Scalar>
void Conv2d<Scalar>::init_uniform(Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_ * k_ * k_));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Index i = 0; i < weight_.value.size(); ++i) weight_.value.data()[i] = Scalar(dist(rng));
    if (has_bias_)
        for (Index i = 0; i < bias_.value.size(); ++i) bias_.value.data()[i] = Scalar(dist(rng));
}

template <typename Scalar>
std::vector<typename Conv2d<Scalar>::Tap> Conv2d<Scalar>::active_taps(Index h, Index w) const {
    std::vector<Tap> taps;
    const Index half = (k_ - 1) / 2;
    for (Index ky = 0; ky < k_; ++ky) {
        for (Index kx = 0; kx < k_; ++kx) {
            const Index oy = (ky - half) * dilation_;
            const Index ox = (kx - half) * dilation_;
            if (std::abs(oy) < h && std::abs(ox) < w) taps.push_back({oy, ox, ky * k_ + kx});
        }
    }
    return taps;
}

template <typename Scalar>
Tensor<Scalar> Conv2d<Scalar>::forward(const Tensor<Scalar>& x) {
    if (x.c() != in_)
        throw ConfigError("Conv2d " + name_ + ": expected " + std::to_string(in_) +
                          " input channels, got " + std::to_string(x.c()));
    in_shape_ = x.shape();
    const Index B = x.n(), H = x.h(), W = x.w(), HW = H * W;
    taps_ = active_taps(H, W);
    const auto T = static_cast<Index>(taps_.size());

    col_.setZero(in_ * T, B * HW);
    for (Index b = 0; b < B; ++b) {
        for (Index ci = 0; ci < in_; ++ci) {
            const Scalar* src = x.data() + (b * in_ + ci) * HW;
            for (Index t = 0; t < T; ++t) {
                const auto [oy, ox, idx] = taps_[static_cast<std::size_t>(t)];
                Scalar* dst = col_.data() + (ci * T + t) * (B * HW) + b * HW;
                const Index y0 = std::max<Index>(0, -oy), y1 = std::min(H, H - oy);
                const Index x0 = std::max<Index>(0, -ox), x1 = std::min(W, W - ox);
                for (Index y = y0; y < y1; ++y)
                    for (Index xx = x0; xx < x1; ++xx) dst[y * W + xx] = src[(y + oy) * W + xx + ox];
            }
        }
    }

    MatrixX<Scalar> out_mat;
    if (T == k_ * k_) {
        out_mat.noalias() = weight_.value * col_;
    } else {
        MatrixX<Scalar> wa(out_, in_ * T);
        for (Index ci = 0; ci < in_; ++ci)
            for (Index t = 0; t < T; ++t)
                wa.col(ci * T + t) = weight_.value.col(ci * k_ * k_ + taps_[static_cast<std::size_t>(t)].index);
        out_mat.noalias() = wa * col_;
    }
    if (has_bias_) out_mat.colwise() += bias_.value.col(0);

    Tensor<Scalar> y(B, out_, H, W);
    for (Index b = 0; b < B; ++b) y.sample(b) = out_mat.middleCols(b * HW, HW);
    return y;
}

template <typename Scalar>
Tensor<Scalar> Conv2d<Scalar>::backward(const Tensor<Scalar>& dy, bool need_input_grad) {
    const Index B = in_shape_.n, H = in_shape_.h, W = in_shape_.w, HW = H * W;
    const auto T = static_cast<Index>(taps_.size());
    MatrixX<Scalar> dy_mat(out_, B * HW);
    for (Index b = 0; b < B; ++b) dy_mat.middleCols(b * HW, HW) = dy.sample(b);

    if (has_bias_) bias_.grad.col(0) += dy_mat.rowwise().sum();
    MatrixX<Scalar> dwa;
    dwa.noalias() = dy_mat * col_.transpose();
    if (T == k_ * k_) {
        weight_.grad += dwa;
    } else {
        for (Index ci = 0; ci < in_; ++ci)
            for (Index t = 0; t < T; ++t)
                weight_.grad.col(ci * k_ * k_ + taps_[static_cast<std::size_t>(t)].index) +=
                    dwa.col(ci * T + t);
    }
    if (!need_input_grad) return {};

    MatrixX<Scalar> dcol;
    if (T == k_ * k_) {
        dcol.noalias() = weight_.value.transpose() * dy_mat;
    } else {
        MatrixX<Scalar> wa(out_, in_ * T);
        for (Index ci = 0; ci < in_; ++ci)
            for (Index t = 0; t < T; ++t)
                wa.col(ci * T + t) = weight_.value.col(ci * k_ * k_ + taps_[static_cast<std::size_t>(t)].index);
        dcol.noalias() = wa.transpose() * dy_mat;
    }

    Tensor<Scalar> dx(in_shape_);
    for (Index b = 0; b < B; ++b) {
        for (Index ci = 0; ci < in_; ++ci) {
            Scalar* dst = dx.data() + (b * in_ + ci) * HW;
            for (Index t = 0; t < T; ++t) {
                const auto [oy, ox, idx] = taps_[static_cast<std::size_t>(t)];
                const Scalar* src = dcol.data() + (ci * T + t) * (B * HW) + b * HW;
                const Index y0 = std::max<Index>(0, -oy), y1 = std::min(H, H - oy);
                const Index x0 = std::max<Index>(0, -ox), x1 = std::min(W, W - ox);
                for (Index y = y0; y < y1; ++y)
                    for (Index xx = x0; xx < x1; ++xx) dst[(y + oy) * W + xx + ox] += src[y * W + xx];
            }
        }
    }
    return dx;
}

template <typename Scalar>
void Conv2d<Scalar>::collect(ParameterRefs<Scalar>& out) {
    out.push_back(&weight_);
    if (has_bias_) out.push_back(&bias_);
}

template <typename Scalar>
BatchNorm2d<Scalar>::BatchNorm2d(std::string name, Index channels, Scalar momentum, Scalar eps)
    : channels_(channels),
      momentum_(momentum),
      eps_(eps),
      gamma_(name + ".gamma", ParamGroup::norm, channels, 1, true, false),
      beta_(name + ".beta", ParamGroup::norm, channels, 1, true, false),
      running_mean_(name + ".running_mean", ParamGroup::buffer, channels, 1, false, false),
      running_var_(name + ".running_var", ParamGroup::buffer, channels, 1, false, false) {
    gamma_.value.setOnes();
    running_var_.value.setOnes();
}

template <typename Scalar>
Tensor<Scalar> BatchNorm2d<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
    const Index B = x.n(), HW = x.h() * x.w();
    const Index count = B * HW;
    const bool training = mode != Mode::eval;
    trained_pass_ = training;
    inv_std_.resize(channels_);
    xhat_ = Tensor<Scalar>(x.shape());
    Tensor<Scalar> y(x.shape());
    for (Index c = 0; c < channels_; ++c) {
        Scalar mean, var;
        if (training) {
            double s = 0;
            for (Index b = 0; b < B; ++b) s += static_cast<double>(x.sample(b).row(c).sum());
            mean = Scalar(s / static_cast<double>(count));
            double v = 0;
            for (Index b = 0; b < B; ++b)
                v += static_cast<double>((x.sample(b).row(c).array() - mean).square().sum());
            var = Scalar(v / static_cast<double>(count));
            const Scalar unbiased = count > 1 ? var * Scalar(count) / Scalar(count - 1) : var;
            if (mode == Mode::train) {
                running_mean_.value(c, 0) =
                    (Scalar(1) - momentum_) * running_mean_.value(c, 0) + momentum_ * mean;
                running_var_.value(c, 0) =
                    (Scalar(1) - momentum_) * running_var_.value(c, 0) + momentum_ * unbiased;
            }
        } else {
            mean = running_mean_.value(c, 0);
            var = running_var_.value(c, 0);
        }
        const Scalar inv = Scalar(1) / std::sqrt(var + eps_);
        inv_std_[c] = inv;
        for (Index b = 0; b < B; ++b) {
            xhat_.sample(b).row(c) = (x.sample(b).row(c).array() - mean) * inv;
            y.sample(b).row(c) =
                xhat_.sample(b).row(c).array() * gamma_.value(c, 0) + beta_.value(c, 0);
        }
    }
    return y;
}

template <typename Scalar>
Tensor<Scalar> BatchNorm2d<Scalar>::backward(const Tensor<Scalar>& dy) {
    const Index B = dy.n(), HW = dy.h() * dy.w();
    const auto count = static_cast<Scalar>(B * HW);
    Tensor<Scalar> dx(dy.shape());
    for (Index c = 0; c < channels_; ++c) {
        Scalar sum_dy = 0, sum_dy_xhat = 0;
        for (Index b = 0; b < B; ++b) {
            sum_dy += dy.sample(b).row(c).sum();
            sum_dy_xhat += (dy.sample(b).row(c).array() * xhat_.sample(b).row(c).array()).sum();
        }
        gamma_.grad(c, 0) += sum_dy_xhat;
        beta_.grad(c, 0) += sum_dy;
        const Scalar g = gamma_.value(c, 0);
        const Scalar inv = inv_std_[c];
        for (Index b = 0; b < B; ++b) {
            if (trained_pass_) {
                dx.sample(b).row(c) =
                    (g * inv / count) *
                    (count * dy.sample(b).row(c).array() - sum_dy -
                     xhat_.sample(b).row(c).array() * sum_dy_xhat);
            } else {
                dx.sample(b).row(c) = dy.sample(b).row(c) * (g * inv);
            }
        }
    }
    return dx;
}

template <typename Scalar>
void BatchNorm2d<Scalar>::collect(ParameterRefs<Scalar>& out) {
    out.push_back(&gamma_);
    out.push_back(&beta_);
    out.push_back(&running_mean_);
    out.push_back(&running_var_);
}

template <typename Scalar>
Tensor<Scalar> Relu<Scalar>::forward(const Tensor<Scalar>& x) {
    out_ = x;
    out_.array() = out_.array().max(Scalar(0));
    return out_;
}

template <typename Scalar>
Tensor<Scalar> Relu<Scalar>::backward(const Tensor<Scalar>& dy) const {
    Tensor<Scalar> dx(dy.shape());
    dx.array() = (out_.array() > Scalar(0)).select(dy.array(), Scalar(0));
    return dx;
}

template <typename Scalar>
ConvBnRelu<Scalar>::ConvBnRelu(const std::string& name, Index in_channels, Index out_channels,
                               Index kernel, Index dilation)
    : conv_(name + ".conv", in_channels, out_channels, kernel, dilation, false),
      bn_(name + ".bn", out_channels) {}

template <typename Scalar>
Tensor<Scalar> ConvBnRelu<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
    return relu_.forward(bn_.forward(conv_.forward(x), mode));
}

template <typename Scalar>
Tensor<Scalar> ConvBnRelu<Scalar>::backward(const Tensor<Scalar>& dy, bool need_input_grad) {
    return conv_.backward(bn_.backward(relu_.backward(dy)), need_input_grad);
}

template <typename Scalar>
void ConvBnRelu<Scalar>::collect(ParameterRefs<Scalar>& out) {
    conv_.collect(out);
    bn_.collect(out);
}

template <typename Scalar>
MatrixX<Scalar> linear_resample_matrix(Index in_size, Index out_size) {
    MatrixX<Scalar> r = MatrixX<Scalar>::Zero(out_size, in_size);
    const double scale = static_cast<double>(in_size) / static_cast<double>(out_size);
    for (Index o = 0; o < out_size; ++o) {
        double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        if (src < 0) src = 0;
        auto i0 = static_cast<Index>(std::floor(src));
        if (i0 > in_size - 1) i0 = in_size - 1;
        const Index i1 = std::min(i0 + 1, in_size - 1);
        const double l1 = src - static_cast<double>(i0);
        r(o, i0) += Scalar(1.0 - l1);
        r(o, i1) += Scalar(l1);
    }
    return r;
}

template <typename Scalar>
Tensor<Scalar> resize_bilinear(const Tensor<Scalar>& x, Index out_h, Index out_w) {
    if (x.h() == out_h && x.w() == out_w) return x;
    const MatrixX<Scalar> ry = linear_resample_matrix<Scalar>(x.h(), out_h);
    const MatrixX<Scalar> rxt = linear_resample_matrix<Scalar>(x.w(), out_w).transpose();
    Tensor<Scalar> y(x.n(), x.c(), out_h, out_w);
    for (Index b = 0; b < x.n(); ++b)
        for (Index c = 0; c < x.c(); ++c) y.plane(b, c).noalias() = ry * x.plane(b, c) * rxt;
    return y;
}

template <typename Scalar>
Tensor<Scalar> resize_bilinear_backward(const Tensor<Scalar>& dy, Index in_h, Index in_w) {
    if (dy.h() == in_h && dy.w() == in_w) return dy;
    const MatrixX<Scalar> ryt = linear_resample_matrix<Scalar>(in_h, dy.h()).transpose();
    const MatrixX<Scalar> rx = linear_resample_matrix<Scalar>(in_w, dy.w());
    Tensor<Scalar> dx(dy.n(), dy.c(), in_h, in_w);
    for (Index b = 0; b < dy.n(); ++b)
        for (Index c = 0; c < dy.c(); ++c) dx.plane(b, c).noalias() = ryt * dy.plane(b, c) * rx;
    return dx;
}

template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w())
        throw ConfigError("concat_channels: shape mismatch " + a.shape().str() + " vs " +
                          b.shape().str());
    Tensor<Scalar> y(a.n(), a.c() + b.c(), a.h(), a.w());
    for (Index n = 0; n < a.n(); ++n) {
        y.sample(n).topRows(a.c()) = a.sample(n);
        y.sample(n).bottomRows(b.c()) = b.sample(n);
    }
    return y;
}

template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> split_channels(const Tensor<Scalar>& x, Index first) {
    Tensor<Scalar> a(x.n(), first, x.h(), x.w());
    Tensor<Scalar> b(x.n(), x.c() - first, x.h(), x.w());
    for (Index n = 0; n < x.n(); ++n) {
        a.sample(n) = x.sample(n).topRows(first);
        b.sample(n) = x.sample(n).bottomRows(x.c() - first);
    }
    return {std::move(a), std::move(b)};
}

#define SEMALIGN_INSTANTIATE_NN(S)                                                         \
    template class Conv2d<S>;                                                              \
    template class BatchNorm2d<S>;                                                         \
    template class Relu<S>;                                                                \
    template class ConvBnRelu<S>;                                                          \
    template MatrixX<S> linear_resample_matrix<S>(Index, Index);                           \
    template Tensor<S> resize_bilinear<S>(const Tensor<S>&, Index, Index);                 \
    template Tensor<S> resize_bilinear_backward<S>(const Tensor<S>&, Index, Index);        \
    template Tensor<S> concat_channels<S>(const Tensor<S>&, const Tensor<S>&);             \
    template std::pair<Tensor<S>, Tensor<S>> split_channels<S>(const Tensor<S>&, Index);

SEMALIGN_INSTANTIATE_NN(float)
SEMALIGN_INSTANTIATE_NN(double)

}  // namespace semalign::nn
