#pragma once

#include "semalign/nn.hpp"
#include "semalign/tensor.hpp"

#include <memory>
#include <string>
#include <vector>

namespace semalign {

struct EncoderConfig {
    std::string kind = "toy";  // toy | uni
    Index width = 768;
    /// 1-based transformer blocks whose outputs are tapped (low, high).
    std::vector<int> taps{2, 9};
    std::uint64_t seed = 17;
};

/// Token grids tapped from two encoder depths, each [B, width, H/16, W/16].
template <typename Scalar>
struct EncoderTaps {
    Tensor<Scalar> low;
    Tensor<Scalar> high;
};

/// A frozen patch-16 transformer encoder that exposes two intermediate token grids.
template <typename Scalar>
class EncoderAdapter {
public:
    virtual ~EncoderAdapter() = default;

    virtual Index patch_size() const { return 16; }
    virtual Index width() const = 0;
    virtual std::pair<int, int> taps() const = 0;
    virtual bool frozen() const { return true; }
    /// Class token removed, remaining tokens reshaped row-major onto the patch grid.
    virtual EncoderTaps<Scalar> encode(const Tensor<Scalar>& images) const = 0;
    virtual ParameterRefs<Scalar> parameters() = 0;
};

/// Seeded stand-in for a pretrained ViT: fixed random linear patch embedding, a class
/// token, sinusoidal positions, and residual token-mixing blocks. Never trained.
template <typename Scalar>
class ToyVitEncoder final : public EncoderAdapter<Scalar> {
public:
    explicit ToyVitEncoder(const EncoderConfig& cfg);

    Index width() const override { return width_; }
    std::pair<int, int> taps() const override { return {tap_low_, tap_high_}; }
    EncoderTaps<Scalar> encode(const Tensor<Scalar>& images) const override;
    ParameterRefs<Scalar> parameters() override;
    int depth() const { return static_cast<int>(blocks_.size()); }

private:
    struct Block {
        Parameter<Scalar> mix;
        Parameter<Scalar> bias;
        Parameter<Scalar> token_mix;
    };
    Index width_;
    int tap_low_;
    int tap_high_;
    Parameter<Scalar> patch_weight_;  // [patch_dim, width]
    Parameter<Scalar> patch_bias_;    // [1, width]
    Parameter<Scalar> cls_token_;     // [1, width]
    std::vector<Block> blocks_;
};

/// Builds the configured encoder; `uni` requires an external plugin and is rejected here.
template <typename Scalar>
std::unique_ptr<EncoderAdapter<Scalar>> make_encoder(const EncoderConfig& cfg);

/// Throws unless H and W are positive multiples of the patch size.
void check_patch_divisible(Index h, Index w, Index patch);

template <typename Scalar>
struct BackboneFeatures {
    Tensor<Scalar> low;   // [B, low_channels, H', W']
    Tensor<Scalar> high;  // [B, high_channels, H', W']
};

/// 1x1 projections of the two encoder taps.
template <typename Scalar>
class FeatureProjection {
public:
    FeatureProjection() = default;
    FeatureProjection(Index width, Index low_channels, Index high_channels);

    void init(Rng& rng);
    BackboneFeatures<Scalar> forward(const Tensor<Scalar>& tap_low, const Tensor<Scalar>& tap_high);
    /// Encoder is frozen, so no gradient is propagated past the projections.
    void backward(const Tensor<Scalar>& d_low, const Tensor<Scalar>& d_high);
    void collect(ParameterRefs<Scalar>& out);

private:
    Index width_ = 0;
    nn::Conv2d<Scalar> low_;
    nn::Conv2d<Scalar> high_;
};

struct DecoderConfig {
    Index num_classes = 2;
    Index low_channels = 256;
    Index high_channels = 2048;
    Index aspp_channels = 256;
    Index low_reduce = 48;
    std::vector<Index> atrous_rates{6, 12, 18};
};

/// DeepLabV3+ head: ASPP on the high-level map, channel-reduced low-level skip, two 3x3
/// refinement blocks, a 1x1 classifier, and bilinear upsampling to the image size.
template <typename Scalar>
class DeepLabDecoder {
public:
    DeepLabDecoder() = default;
    explicit DeepLabDecoder(const DecoderConfig& cfg);

    void init(Rng& rng);
    Tensor<Scalar> forward(const Tensor<Scalar>& f_low, const Tensor<Scalar>& f_high, Index out_h,
                           Index out_w, nn::Mode mode);
    /// Returns (dL/df_low, dL/df_high).
    std::pair<Tensor<Scalar>, Tensor<Scalar>> backward(const Tensor<Scalar>& d_logits);
    void collect(ParameterRefs<Scalar>& out);
    nn::Conv2d<Scalar>& classifier() { return classifier_; }

private:
    DecoderConfig cfg_;
    nn::ConvBnRelu<Scalar> aspp_point_;
    std::vector<nn::ConvBnRelu<Scalar>> aspp_atrous_;
    nn::Conv2d<Scalar> aspp_pool_;
    nn::Relu<Scalar> aspp_pool_relu_;
    nn::ConvBnRelu<Scalar> aspp_project_;
    nn::ConvBnRelu<Scalar> low_reduce_;
    nn::ConvBnRelu<Scalar> refine1_;
    nn::ConvBnRelu<Scalar> refine2_;
    nn::Conv2d<Scalar> classifier_;

    Shape4 low_shape_{};
    Shape4 high_shape_{};
    Index aspp_h_ = 0, aspp_w_ = 0;
};

}  // namespace semalign
