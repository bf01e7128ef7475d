#pragma once

#include "semalign/alignment.hpp"
#include "semalign/backbone.hpp"
#include "semalign/tensor.hpp"

#include <memory>
#include <string>
#include <vector>

namespace semalign {

struct ModelConfig {
    EncoderConfig encoder;
    TextEncoderConfig text_encoder;
    Index num_classes = 2;
    Index low_channels = 256;
    Index high_channels = 2048;
    Index aspp_channels = 256;
    Index low_reduce = 48;
    std::vector<Index> atrous_rates{6, 12, 18};
    Index embed_dim = 256;
    bool use_prototype = true;
    bool use_text = true;
    Index num_context_tokens = 4;
    std::vector<std::string> class_names{"background tissue", "gland"};
    double temperature = 1.0;
    std::uint64_t seed = 0;
};

template <typename Scalar>
struct ForwardOptions {
    bool training = false;
    /// Whether batch-statistics passes update the normalization running estimates.
    bool update_stats = true;
    /// Compute the prototype/text logits. Off for passes that only feed decoder losses.
    bool alignment = true;
    /// Optional per-(sample, channel) multipliers on the encoder taps (feature perturbation).
    const ArrayX<Scalar>* low_mask = nullptr;
    const ArrayX<Scalar>* high_mask = nullptr;
};

template <typename Scalar>
struct ModelOutput {
    Tensor<Scalar> logits;  // S_dl at image resolution
    Tensor<Scalar> proto;   // S_zp at feature resolution, empty when off
    Tensor<Scalar> text;    // S_zt at feature resolution, empty when off
};

/// Frozen encoder + trainable projections, DeepLabV3+ decoder, pixel projector,
/// prototype bank and prompt learner over a frozen text encoder.
///
/// Layers cache their last forward, so `backward` must follow the `forward` it
/// differentiates before any other forward runs. Text embeddings are computed once per
/// step with `refresh_text`; their gradient accumulates across passes until
/// `backward_text` pushes it into the prompt parameters.
template <typename Scalar>
class SegmentationModel {
public:
    explicit SegmentationModel(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    bool has_prototype() const { return cfg_.use_prototype; }
    bool has_text() const { return cfg_.use_text; }

    ModelOutput<Scalar> forward(const Tensor<Scalar>& images, const ForwardOptions<Scalar>& opt);
    /// Gradients w.r.t. the outputs of the latest forward; `d_proto` / `d_text` may be empty.
    void backward(const Tensor<Scalar>& d_logits, const Tensor<Scalar>& d_proto,
                  const Tensor<Scalar>& d_text);

    void refresh_text();
    const MatrixX<Scalar>& text_embeddings() const { return text_; }
    MatrixX<Scalar>& text_grad() { return d_text_; }
    void backward_text();

    const MatrixX<Scalar>& prototypes() const { return prototypes_.value(); }
    Parameter<Scalar>& prototype_param() { return prototypes_.param(); }

    /// Every tensor with state: trainable parameters, frozen encoders and buffers.
    ParameterRefs<Scalar> parameters();
    ParameterRefs<Scalar> trainable_parameters();
    void zero_grad();

    EncoderAdapter<Scalar>& encoder() { return *encoder_; }
    TextEncoderAdapter<Scalar>& text_encoder() { return *text_encoder_; }
    PromptLearner<Scalar>& prompt_learner() { return prompt_; }

private:
    ModelConfig cfg_;
    std::unique_ptr<EncoderAdapter<Scalar>> encoder_;
    std::unique_ptr<TextEncoderAdapter<Scalar>> text_encoder_;
    FeatureProjection<Scalar> projection_;
    DeepLabDecoder<Scalar> decoder_;
    PixelProjector<Scalar> projector_;
    PrototypeBank<Scalar> prototypes_;
    PromptLearner<Scalar> prompt_;

    MatrixX<Scalar> text_;
    MatrixX<Scalar> d_text_;
    PixelEmbeddings<Scalar> z_;
    bool aligned_ = false;
};

DecoderConfig decoder_config(const ModelConfig& cfg);

}  // namespace semalign
