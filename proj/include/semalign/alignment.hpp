#pragma once

#include "semalign/nn.hpp"
#include "semalign/tensor.hpp"

#include <memory>
#include <string>
#include <vector>

namespace semalign {

/// Unit-norm pixel embeddings. Stored channel-first as [B, D, H', W'] so that column n
/// of `z.sample(b)` is the embedding of pixel n; `rows(b)` gives the [N, D] view.
template <typename Scalar>
struct PixelEmbeddings {
    Tensor<Scalar> z;
    Index batch() const { return z.n(); }
    Index pixels() const { return z.h() * z.w(); }
    Index dim() const { return z.c(); }
    auto rows(Index b) const { return z.sample(b).transpose(); }
};

/// Row-wise x / (||x|| + eps).
template <typename Scalar>
MatrixX<Scalar> normalize_rows(const MatrixX<Scalar>& x, Scalar eps = Scalar(1e-8));

/// Adjoint of normalize_rows at `x`.
template <typename Scalar>
MatrixX<Scalar> normalize_rows_backward(const MatrixX<Scalar>& x, const MatrixX<Scalar>& d_out,
                                        Scalar eps = Scalar(1e-8));

/// 3x3 conv head followed by per-pixel l2 normalization.
template <typename Scalar>
class PixelProjector {
public:
    PixelProjector() = default;
    PixelProjector(Index in_channels, Index embed_dim);

    void init(Rng& rng) { conv_.init_uniform(rng); }
    PixelEmbeddings<Scalar> forward(const Tensor<Scalar>& f_high);
    /// Takes dL/dz and returns dL/df_high.
    Tensor<Scalar> backward(const Tensor<Scalar>& dz);
    void collect(ParameterRefs<Scalar>& out) { conv_.collect(out); }

private:
    nn::Conv2d<Scalar> conv_;
    Tensor<Scalar> raw_;
};

/// Cosine-similarity logits S[b, c, n] = z[b, n] . normalize(K)[c] / temperature.
template <typename Scalar>
Tensor<Scalar> cosine_logits(const PixelEmbeddings<Scalar>& z, const MatrixX<Scalar>& classes,
                             Scalar temperature = Scalar(1));

/// Gradients of cosine_logits; accumulates into dz and d_classes (raw, pre-normalization).
template <typename Scalar>
void cosine_logits_backward(const PixelEmbeddings<Scalar>& z, const MatrixX<Scalar>& classes,
                            const Tensor<Scalar>& d_logits, Tensor<Scalar>& dz,
                            MatrixX<Scalar>& d_classes, Scalar temperature = Scalar(1));

template <typename Scalar>
Tensor<Scalar> prototype_logits(const PixelEmbeddings<Scalar>& z, const MatrixX<Scalar>& prototypes,
                                Scalar temperature = Scalar(1)) {
    return cosine_logits(z, prototypes, temperature);
}

template <typename Scalar>
Tensor<Scalar> text_logits(const PixelEmbeddings<Scalar>& z, const MatrixX<Scalar>& text,
                           Scalar temperature = Scalar(1)) {
    return cosine_logits(z, text, temperature);
}

/// Learnable class anchors [C, D], initialized N(0, 1) / sqrt(D).
template <typename Scalar>
class PrototypeBank {
public:
    PrototypeBank() = default;
    PrototypeBank(Index classes, Index dim);
    void init(Rng& rng);
    Parameter<Scalar>& param() { return p_; }
    const MatrixX<Scalar>& value() const { return p_.value; }

private:
    Parameter<Scalar> p_;
};

/// Token vocabulary of a text encoder.
class TextTokenizer {
public:
    virtual ~TextTokenizer() = default;
    virtual int bos() const = 0;
    virtual int eot() const = 0;
    virtual int pad() const = 0;
    virtual int placeholder() const = 0;
    virtual int vocab_size() const = 0;
    virtual std::vector<int> tokenize(const std::string& text) const = 0;
};

/// Word pieces of up to four characters hashed into a 64-token vocabulary.
class ToyTokenizer final : public TextTokenizer {
public:
    int bos() const override { return 1; }
    int eot() const override { return 2; }
    int pad() const override { return 0; }
    int placeholder() const override { return 3; }
    int vocab_size() const override { return 64; }
    std::vector<int> tokenize(const std::string& text) const override;
};

/// [BOS][v_1..v_M][class tokens][EOT][PAD...] for one class.
struct PromptTemplate {
    std::string class_name;
    std::vector<int> tokens;            // length = context length L
    std::vector<Index> context_positions;
    Index eot_index = 0;
};

std::vector<PromptTemplate> build_prompts(const std::vector<std::string>& class_names,
                                          Index num_context, const TextTokenizer& tokenizer,
                                          Index context_length);

/// Opaque forward record kept by a text encoder for its input backward pass.
struct TextTrace {
    virtual ~TextTrace() = default;
};

/// Frozen text transformer. Gradients are only ever propagated to its input sequence.
template <typename Scalar>
class TextEncoderAdapter {
public:
    virtual ~TextEncoderAdapter() = default;

    virtual const TextTokenizer& tokenizer() const = 0;
    virtual Index context_length() const = 0;
    virtual Index token_dim() const = 0;
    virtual Index hidden_dim() const = 0;
    virtual Index text_dim() const = 0;

    /// Token embedding lookup: [L, token_dim].
    virtual MatrixX<Scalar> embed(const std::vector<int>& tokens) const = 0;
    /// Positional embeddings [L, token_dim].
    virtual const MatrixX<Scalar>& positional() const = 0;
    /// [L, token_dim] -> [L, hidden_dim].
    virtual MatrixX<Scalar> encode(const MatrixX<Scalar>& x, std::unique_ptr<TextTrace>& trace) const = 0;
    virtual MatrixX<Scalar> encode_backward(const MatrixX<Scalar>& d_hidden, const TextTrace& trace) const = 0;
    /// Text projection [hidden_dim, text_dim].
    virtual const MatrixX<Scalar>& clip_projection() const = 0;
    virtual ParameterRefs<Scalar> parameters() = 0;
};

struct TextEncoderConfig {
    std::string kind = "toy";  // toy | conch
    std::uint64_t seed = 29;
};

/// Seeded stand-in for a CLIP-style text tower: token + positional embeddings, one causal
/// single-head attention layer with residual, a final LayerNorm, and a fixed projection.
template <typename Scalar>
class ToyTextEncoder final : public TextEncoderAdapter<Scalar> {
public:
    static constexpr Index kTokenDim = 64;
    static constexpr Index kTextDim = 512;
    static constexpr Index kContextLength = 16;

    explicit ToyTextEncoder(std::uint64_t seed);

    const TextTokenizer& tokenizer() const override { return tokenizer_; }
    Index context_length() const override { return kContextLength; }
    Index token_dim() const override { return kTokenDim; }
    Index hidden_dim() const override { return kTokenDim; }
    Index text_dim() const override { return kTextDim; }
    MatrixX<Scalar> embed(const std::vector<int>& tokens) const override;
    const MatrixX<Scalar>& positional() const override { return positional_.value; }
    MatrixX<Scalar> encode(const MatrixX<Scalar>& x, std::unique_ptr<TextTrace>& trace) const override;
    MatrixX<Scalar> encode_backward(const MatrixX<Scalar>& d_hidden, const TextTrace& trace) const override;
    const MatrixX<Scalar>& clip_projection() const override { return clip_.value; }
    ParameterRefs<Scalar> parameters() override;

private:
    ToyTokenizer tokenizer_;
    Parameter<Scalar> token_embedding_;
    Parameter<Scalar> positional_;
    Parameter<Scalar> wq_, wk_, wv_, wo_;
    Parameter<Scalar> clip_;
};

template <typename Scalar>
std::unique_ptr<TextEncoderAdapter<Scalar>> make_text_encoder(const TextEncoderConfig& cfg);

/// Learnable per-class prompt context tokens plus the learnable map into the shared space.
template <typename Scalar>
class PromptLearner {
public:
    PromptLearner() = default;
    PromptLearner(std::vector<PromptTemplate> prompts, Index num_context, Index token_dim,
                  Index text_dim, Index embed_dim);

    void init(Rng& rng);
    /// T = (h_EOT W_clip) W_proj + b, one row per class.
    MatrixX<Scalar> encode_text(const TextEncoderAdapter<Scalar>& encoder);
    /// Accumulates gradients into the context tokens and W_proj from dL/dT.
    void backward(const TextEncoderAdapter<Scalar>& encoder, const MatrixX<Scalar>& d_text);
    void collect(ParameterRefs<Scalar>& out);

    const std::vector<PromptTemplate>& prompts() const { return prompts_; }
    Parameter<Scalar>& context() { return context_; }
    Parameter<Scalar>& projection() { return proj_; }
    Index num_context() const { return num_context_; }

private:
    std::vector<PromptTemplate> prompts_;
    Index num_context_ = 0;
    Parameter<Scalar> context_;  // [C * M, token_dim]
    Parameter<Scalar> proj_;     // [text_dim, embed_dim]
    Parameter<Scalar> proj_bias_;

    std::vector<std::unique_ptr<TextTrace>> traces_;
    MatrixX<Scalar> clip_out_;  // [C, text_dim]
};

}  // namespace semalign
