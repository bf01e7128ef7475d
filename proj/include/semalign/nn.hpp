#pragma once

#include "semalign/random.hpp"
#include "semalign/tensor.hpp"

#include <string>
#include <vector>

namespace semalign::nn {

/// Stride-1 "same" 2-D convolution with optional dilation, lowered to im2col + GEMM.
///
/// Kernel taps whose offset falls outside the input for every output position are
/// dropped from the lowered matrix. With large atrous rates on small grids this turns a
/// 3x3 kernel into its centre tap, which is exactly what zero padding computes anyway.
template <typename Scalar>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(std::string name, Index in_channels, Index out_channels, Index kernel,
           Index dilation = 1, bool bias = true, ParamGroup group = ParamGroup::decoder);

    /// Kaiming-normal weights (fan-in, ReLU gain); bias zero.
    void init_kaiming(Rng& rng);
    /// PyTorch default: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
    void init_uniform(Rng& rng);

    Tensor<Scalar> forward(const Tensor<Scalar>& x);
    /// Accumulates parameter gradients; returns dL/dx unless `need_input_grad` is false.
    Tensor<Scalar> backward(const Tensor<Scalar>& dy, bool need_input_grad = true);

    Parameter<Scalar>& weight() { return weight_; }
    Parameter<Scalar>& bias() { return bias_; }
    bool has_bias() const { return has_bias_; }
    Index in_channels() const { return in_; }
    Index out_channels() const { return out_; }
    Index kernel() const { return k_; }
    Index dilation() const { return dilation_; }
    void collect(ParameterRefs<Scalar>& out);

private:
    struct Tap {
        Index dy;
        Index dx;
        Index index;
    };
    std::vector<Tap> active_taps(Index h, Index w) const;

    std::string name_;
    Index in_ = 0;
    Index out_ = 0;
    Index k_ = 1;
    Index dilation_ = 1;
    bool has_bias_ = true;
    Parameter<Scalar> weight_;
    Parameter<Scalar> bias_;

    Shape4 in_shape_{};
    std::vector<Tap> taps_;
    MatrixX<Scalar> col_;
};

/// Normalization behaviour of a forward pass: running statistics, batch statistics with
/// running-estimate updates, or batch statistics leaving the running estimates untouched.
enum class Mode { eval, train, train_frozen_stats };

/// Per-channel batch normalization with running statistics.
template <typename Scalar>
class BatchNorm2d {
public:
    BatchNorm2d() = default;
    BatchNorm2d(std::string name, Index channels, Scalar momentum = Scalar(0.1),
                Scalar eps = Scalar(1e-5));

    Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode);
    Tensor<Scalar> backward(const Tensor<Scalar>& dy);
    void collect(ParameterRefs<Scalar>& out);

private:
    Index channels_ = 0;
    Scalar momentum_ = Scalar(0.1);
    Scalar eps_ = Scalar(1e-5);
    Parameter<Scalar> gamma_;
    Parameter<Scalar> beta_;
    Parameter<Scalar> running_mean_;
    Parameter<Scalar> running_var_;

    bool trained_pass_ = false;
    Tensor<Scalar> xhat_;
    ArrayX<Scalar> inv_std_;
};

template <typename Scalar>
class Relu {
public:
    Tensor<Scalar> forward(const Tensor<Scalar>& x);
    Tensor<Scalar> backward(const Tensor<Scalar>& dy) const;

private:
    Tensor<Scalar> out_;
};

/// Conv -> BatchNorm -> ReLU, the DeepLab building block.
template <typename Scalar>
class ConvBnRelu {
public:
    ConvBnRelu() = default;
    ConvBnRelu(const std::string& name, Index in_channels, Index out_channels, Index kernel,
               Index dilation = 1);

    void init(Rng& rng) { conv_.init_kaiming(rng); }
    Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode);
    Tensor<Scalar> backward(const Tensor<Scalar>& dy, bool need_input_grad = true);
    void collect(ParameterRefs<Scalar>& out);
    Conv2d<Scalar>& conv() { return conv_; }

private:
    Conv2d<Scalar> conv_;
    BatchNorm2d<Scalar> bn_;
    Relu<Scalar> relu_;
};

/// Interpolation matrix [out, in] for 1-D bilinear resampling with half-pixel centres
/// (the `align_corners=False` convention).
template <typename Scalar>
MatrixX<Scalar> linear_resample_matrix(Index in_size, Index out_size);

/// Bilinear resize of every channel plane to (out_h, out_w).
template <typename Scalar>
Tensor<Scalar> resize_bilinear(const Tensor<Scalar>& x, Index out_h, Index out_w);

/// Adjoint of resize_bilinear: maps a gradient at (out_h, out_w) back to (in_h, in_w).
template <typename Scalar>
Tensor<Scalar> resize_bilinear_backward(const Tensor<Scalar>& dy, Index in_h, Index in_w);

template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

/// Splits channels [0, first) and [first, C).
template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> split_channels(const Tensor<Scalar>& x, Index first);

}  // namespace semalign::nn
