#include "semalign/model.hpp"

#include "semalign/augment.hpp"
#include "semalign/errors.hpp"
#include "semalign/random.hpp"

namespace semalign {

DecoderConfig decoder_config(const ModelConfig& cfg) {
    DecoderConfig d;
    d.num_classes = cfg.num_classes;
    d.low_channels = cfg.low_channels;
    d.high_channels = cfg.high_channels;
    d.aspp_channels = cfg.aspp_channels;
    d.low_reduce = cfg.low_reduce;
    d.atrous_rates = cfg.atrous_rates;
    return d;
}

namespace {

void validate(const ModelConfig& cfg) {
    if (cfg.num_classes < 2) throw ConfigError("model.num_classes must be >= 2");
    if (static_cast<Index>(cfg.class_names.size()) != cfg.num_classes)
        throw ConfigError("align.class_names has " + std::to_string(cfg.class_names.size()) +
                          " entries but model.num_classes is " + std::to_string(cfg.num_classes));
    if (cfg.num_context_tokens < 0) throw ConfigError("align.num_context_tokens must be >= 0");
    if (cfg.embed_dim <= 0 || cfg.low_channels <= 0 || cfg.high_channels <= 0 || cfg.aspp_channels <= 0 ||
        cfg.low_reduce <= 0)
        throw ConfigError("model channel widths must be positive");
    if (!(cfg.temperature > 0)) throw ConfigError("align.temperature must be > 0");
}

}  // namespace

template <typename Scalar>
SegmentationModel<Scalar>::SegmentationModel(const ModelConfig& cfg) : cfg_(cfg) {
    validate(cfg_);
    encoder_ = make_encoder<Scalar>(cfg_.encoder);
    text_encoder_ = make_text_encoder<Scalar>(cfg_.text_encoder);
    projection_ = FeatureProjection<Scalar>(encoder_->width(), cfg_.low_channels, cfg_.high_channels);
    decoder_ = DeepLabDecoder<Scalar>(decoder_config(cfg_));
    projector_ = PixelProjector<Scalar>(cfg_.high_channels, cfg_.embed_dim);
    prototypes_ = PrototypeBank<Scalar>(cfg_.num_classes, cfg_.embed_dim);
    prompt_ = PromptLearner<Scalar>(
        build_prompts(cfg_.class_names, cfg_.num_context_tokens, text_encoder_->tokenizer(),
                      text_encoder_->context_length()),
        cfg_.num_context_tokens, text_encoder_->token_dim(), text_encoder_->text_dim(), cfg_.embed_dim);

    // Each component draws from its own stream so toggling one leaves the others unchanged.
    Rng r_proj = derive_rng(cfg_.seed, "init.projection");
    Rng r_dec = derive_rng(cfg_.seed, "init.decoder");
    Rng r_pix = derive_rng(cfg_.seed, "init.pixel_projector");
    Rng r_proto = derive_rng(cfg_.seed, "init.prototypes");
    Rng r_text = derive_rng(cfg_.seed, "init.prompts");
    projection_.init(r_proj);
    decoder_.init(r_dec);
    projector_.init(r_pix);
    prototypes_.init(r_proto);
    prompt_.init(r_text);
    if (cfg_.use_text) refresh_text();
}

template <typename Scalar>
ModelOutput<Scalar> SegmentationModel<Scalar>::forward(const Tensor<Scalar>& images, const ForwardOptions<Scalar>& opt) {
    check_patch_divisible(images.h(), images.w(), encoder_->patch_size());
    EncoderTaps<Scalar> taps = encoder_->encode(images);
    if (opt.low_mask) taps.low = apply_channel_mask(taps.low, *opt.low_mask);
    if (opt.high_mask) taps.high = apply_channel_mask(taps.high, *opt.high_mask);

    const BackboneFeatures<Scalar> feats = projection_.forward(taps.low, taps.high);
    ModelOutput<Scalar> out;
    const nn::Mode mode = !opt.training ? nn::Mode::eval
                         : opt.update_stats ? nn::Mode::train
                                            : nn::Mode::train_frozen_stats;
    out.logits = decoder_.forward(feats.low, feats.high, images.h(), images.w(), mode);

    aligned_ = opt.alignment && (cfg_.use_prototype || cfg_.use_text);
    if (aligned_) {
        z_ = projector_.forward(feats.high);
        const auto temp = static_cast<Scalar>(cfg_.temperature);
        if (cfg_.use_prototype) out.proto = prototype_logits(z_, prototypes_.value(), temp);
        if (cfg_.use_text) out.text = text_logits(z_, text_, temp);
    }
    return out;
}

template <typename Scalar>
void SegmentationModel<Scalar>::backward(const Tensor<Scalar>& d_logits, const Tensor<Scalar>& d_proto,
                                         const Tensor<Scalar>& d_text) {
    auto [d_low, d_high] = decoder_.backward(d_logits);
    const bool want_align = !d_proto.empty() || !d_text.empty();
    if (want_align) {
        if (!aligned_) throw ConfigError("alignment gradient given for a forward pass without alignment");
        const auto temp = static_cast<Scalar>(cfg_.temperature);
        Tensor<Scalar> dz;
        if (!d_proto.empty())
            cosine_logits_backward(z_, prototypes_.value(), d_proto, dz, prototypes_.param().grad, temp);
        if (!d_text.empty()) cosine_logits_backward(z_, text_, d_text, dz, d_text_, temp);
        d_high.array() += projector_.backward(dz).array();
    }
    projection_.backward(d_low, d_high);
}

template <typename Scalar>
void SegmentationModel<Scalar>::refresh_text() {
    text_ = prompt_.encode_text(*text_encoder_);
    d_text_ = MatrixX<Scalar>::Zero(text_.rows(), text_.cols());
}

template <typename Scalar>
void SegmentationModel<Scalar>::backward_text() {
    if (!cfg_.use_text) return;
    prompt_.backward(*text_encoder_, d_text_);
    d_text_.setZero();
}

template <typename Scalar>
ParameterRefs<Scalar> SegmentationModel<Scalar>::trainable_parameters() {
    ParameterRefs<Scalar> out;
    projection_.collect(out);
    decoder_.collect(out);
    if (cfg_.use_prototype || cfg_.use_text) projector_.collect(out);
    if (cfg_.use_prototype) out.push_back(&prototypes_.param());
    if (cfg_.use_text) prompt_.collect(out);
    std::erase_if(out, [](const Parameter<Scalar>* p) { return !p->trainable; });
    return out;
}

template <typename Scalar>
ParameterRefs<Scalar> SegmentationModel<Scalar>::parameters() {
    ParameterRefs<Scalar> out = encoder_->parameters();
    for (auto* p : text_encoder_->parameters()) out.push_back(p);
    projection_.collect(out);
    decoder_.collect(out);
    projector_.collect(out);
    out.push_back(&prototypes_.param());
    prompt_.collect(out);
    return out;
}

template <typename Scalar>
void SegmentationModel<Scalar>::zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
    if (d_text_.size() > 0) d_text_.setZero();
}

template class SegmentationModel<float>;
template class SegmentationModel<double>;

}  // namespace semalign
