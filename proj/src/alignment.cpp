#include "semalign/alignment.hpp"

#include "semalign/errors.hpp"
#include "semalign/random.hpp"

#include <cctype>
#include <cmath>
#include <sstream>

namespace semalign {

template <typename Scalar>
MatrixX<Scalar> normalize_rows(const MatrixX<Scalar>& x, Scalar eps) {
    MatrixX<Scalar> out(x.rows(), x.cols());
    for (Index r = 0; r < x.rows(); ++r) out.row(r) = x.row(r) / (x.row(r).norm() + eps);
    return out;
}

template <typename Scalar>
MatrixX<Scalar> normalize_rows_backward(const MatrixX<Scalar>& x, const MatrixX<Scalar>& d_out,
                                        Scalar eps) {
    MatrixX<Scalar> dx(x.rows(), x.cols());
    for (Index r = 0; r < x.rows(); ++r) {
        const Scalar n = x.row(r).norm();
        const Scalar denom = n + eps;
        if (n == Scalar(0)) {
            dx.row(r) = d_out.row(r) / denom;
            continue;
        }
        const Scalar proj = x.row(r).dot(d_out.row(r));
        dx.row(r) = d_out.row(r) / denom - x.row(r) * (proj / (n * denom * denom));
    }
    return dx;
}

template <typename Scalar>
PixelProjector<Scalar>::PixelProjector(Index in_channels, Index embed_dim)
    : conv_("pixel_proj", in_channels, embed_dim, 3, 1, true, ParamGroup::projection) {}

template <typename Scalar>
PixelEmbeddings<Scalar> PixelProjector<Scalar>::forward(const Tensor<Scalar>& f_high) {
    raw_ = conv_.forward(f_high);
    PixelEmbeddings<Scalar> out{Tensor<Scalar>(raw_.shape())};
    for (Index b = 0; b < raw_.n(); ++b) {
        const auto r = raw_.sample(b);
        const ArrayX<Scalar> inv = (r.colwise().norm().array() + Scalar(1e-8)).inverse().transpose();
        out.z.sample(b) = r * inv.matrix().asDiagonal();
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> PixelProjector<Scalar>::backward(const Tensor<Scalar>& dz) {
    Tensor<Scalar> d_raw(raw_.shape());
    for (Index b = 0; b < raw_.n(); ++b) {
        const MatrixX<Scalar> x = raw_.sample(b).transpose();
        const MatrixX<Scalar> d = dz.sample(b).transpose();
        d_raw.sample(b) = normalize_rows_backward<Scalar>(x, d).transpose();
    }
    return conv_.backward(d_raw);
}

template <typename Scalar>
Tensor<Scalar> cosine_logits(const PixelEmbeddings<Scalar>& z, const MatrixX<Scalar>& classes,
                             Scalar temperature) {
    if (classes.cols() != z.dim())
        throw ConfigError("cosine_logits: class matrix has dim " + std::to_string(classes.cols()) +
                          ", embeddings have dim " + std::to_string(z.dim()));
    const MatrixX<Scalar> kn = normalize_rows<Scalar>(classes);
    Tensor<Scalar> s(z.batch(), classes.rows(), z.z.h(), z.z.w());
    for (Index b = 0; b < z.batch(); ++b) s.sample(b).noalias() = (kn * z.z.sample(b)) / temperature;
    return s;
}

template <typename Scalar>
void cosine_logits_backward(const PixelEmbeddings<Scalar>& z, const MatrixX<Scalar>& classes,
                            const Tensor<Scalar>& d_logits, Tensor<Scalar>& dz,
                            MatrixX<Scalar>& d_classes, Scalar temperature) {
    const MatrixX<Scalar> kn = normalize_rows<Scalar>(classes);
    MatrixX<Scalar> d_kn = MatrixX<Scalar>::Zero(kn.rows(), kn.cols());
    if (dz.empty()) dz = Tensor<Scalar>(z.z.shape());
    for (Index b = 0; b < z.batch(); ++b) {
        const MatrixX<Scalar> ds = d_logits.sample(b) / temperature;
        dz.sample(b).noalias() += kn.transpose() * ds;
        d_kn.noalias() += ds * z.z.sample(b).transpose();
    }
    d_classes += normalize_rows_backward<Scalar>(classes, d_kn);
}

template <typename Scalar>
PrototypeBank<Scalar>::PrototypeBank(Index classes, Index dim)
    : p_("prototypes", ParamGroup::prototypes, classes, dim, true, false) {}

template <typename Scalar>
void PrototypeBank<Scalar>::init(Rng& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(p_.value.cols()));
    for (Index i = 0; i < p_.value.size(); ++i) p_.value.data()[i] = Scalar(dist(rng) * scale);
}

std::vector<int> ToyTokenizer::tokenize(const std::string& text) const {
    std::vector<int> ids;
    std::istringstream is(text);
    std::string word;
    while (is >> word) {
        for (auto& ch : word) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        for (std::size_t i = 0; i < word.size(); i += 4) {
            const std::string piece = word.substr(i, 4);
            ids.push_back(4 + static_cast<int>(fnv1a(piece) % 60));
        }
    }
    return ids;
}

std::vector<PromptTemplate> build_prompts(const std::vector<std::string>& class_names,
                                          Index num_context, const TextTokenizer& tokenizer,
                                          Index context_length) {
    if (class_names.empty()) throw ConfigError("build_prompts: no class names");
    if (num_context < 0) throw ConfigError("build_prompts: negative context token count");
    std::vector<PromptTemplate> out;
    for (const auto& name : class_names) {
        const auto words = tokenizer.tokenize(name);
        if (words.empty()) throw ConfigError("class name '" + name + "' produces no tokens");
        const Index budget = context_length - num_context - 2;
        if (static_cast<Index>(words.size()) > budget)
            throw ConfigError("class name '" + name + "' needs " + std::to_string(words.size()) +
                              " tokens but only " + std::to_string(std::max<Index>(budget, 0)) +
                              " fit with " + std::to_string(num_context) + " context tokens");
        PromptTemplate t;
        t.class_name = name;
        t.tokens.assign(static_cast<std::size_t>(context_length), tokenizer.pad());
        t.tokens[0] = tokenizer.bos();
        for (Index m = 0; m < num_context; ++m) {
            t.tokens[static_cast<std::size_t>(1 + m)] = tokenizer.placeholder();
            t.context_positions.push_back(1 + m);
        }
        for (std::size_t i = 0; i < words.size(); ++i)
            t.tokens[static_cast<std::size_t>(1 + num_context) + i] = words[i];
        t.eot_index = num_context + static_cast<Index>(words.size()) + 1;
        t.tokens[static_cast<std::size_t>(t.eot_index)] = tokenizer.eot();
        out.push_back(std::move(t));
    }
    return out;
}

namespace {

template <typename Scalar>
struct ToyTextTrace final : TextTrace {
    MatrixX<Scalar> x, q, k, v, attn, mixed, normed;
    ArrayX<Scalar> inv_std;
};

template <typename Scalar>
void fill_normal(Parameter<Scalar>& p, Rng& rng, double std) {
    std::normal_distribution<double> dist(0.0, std);
    for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = Scalar(dist(rng));
}

}  // namespace

template <typename Scalar>
ToyTextEncoder<Scalar>::ToyTextEncoder(std::uint64_t seed)
    : token_embedding_("text_encoder.token_embedding", ParamGroup::text_encoder, 64, kTokenDim, false, false),
      positional_("text_encoder.positional", ParamGroup::text_encoder, kContextLength, kTokenDim, false, false),
      wq_("text_encoder.attn.q", ParamGroup::text_encoder, kTokenDim, kTokenDim, false, false),
      wk_("text_encoder.attn.k", ParamGroup::text_encoder, kTokenDim, kTokenDim, false, false),
      wv_("text_encoder.attn.v", ParamGroup::text_encoder, kTokenDim, kTokenDim, false, false),
      wo_("text_encoder.attn.out", ParamGroup::text_encoder, kTokenDim, kTokenDim, false, false),
      clip_("text_encoder.clip_projection", ParamGroup::text_encoder, kTokenDim, kTextDim, false, false) {
    Rng rng = derive_rng(seed, "toy_text");
    fill_normal(token_embedding_, rng, 0.02);
    fill_normal(positional_, rng, 0.01);
    const double s = 1.0 / std::sqrt(static_cast<double>(kTokenDim));
    fill_normal(wq_, rng, s);
    fill_normal(wk_, rng, s);
    fill_normal(wv_, rng, s);
    fill_normal(wo_, rng, s);
    fill_normal(clip_, rng, s);
}

template <typename Scalar>
MatrixX<Scalar> ToyTextEncoder<Scalar>::embed(const std::vector<int>& tokens) const {
    MatrixX<Scalar> x(static_cast<Index>(tokens.size()), kTokenDim);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || tokens[i] >= 64) throw ConfigError("token id out of vocabulary");
        x.row(static_cast<Index>(i)) = token_embedding_.value.row(tokens[i]);
    }
    return x;
}

template <typename Scalar>
MatrixX<Scalar> ToyTextEncoder<Scalar>::encode(const MatrixX<Scalar>& x, std::unique_ptr<TextTrace>& trace) const {
    auto t = std::make_unique<ToyTextTrace<Scalar>>();
    const Index L = x.rows();
    const Scalar scale = Scalar(1) / std::sqrt(Scalar(kTokenDim));
    t->x = x;
    t->q = x * wq_.value;
    t->k = x * wk_.value;
    t->v = x * wv_.value;
    MatrixX<Scalar> scores = (t->q * t->k.transpose()) * scale;
    t->attn = MatrixX<Scalar>::Zero(L, L);
    for (Index i = 0; i < L; ++i) {
        const Scalar m = scores.row(i).head(i + 1).maxCoeff();
        const auto e = (scores.row(i).head(i + 1).array() - m).exp();
        t->attn.row(i).head(i + 1) = e / e.sum();
    }
    t->mixed = x + t->attn * t->v * wo_.value;
    t->normed.resize(L, kTokenDim);
    t->inv_std.resize(L);
    for (Index i = 0; i < L; ++i) {
        const Scalar mean = t->mixed.row(i).mean();
        const Scalar var = (t->mixed.row(i).array() - mean).square().mean();
        t->inv_std[i] = Scalar(1) / std::sqrt(var + Scalar(1e-5));
        t->normed.row(i) = (t->mixed.row(i).array() - mean) * t->inv_std[i];
    }
    MatrixX<Scalar> out = t->normed;
    trace = std::move(t);
    return out;
}

template <typename Scalar>
MatrixX<Scalar> ToyTextEncoder<Scalar>::encode_backward(const MatrixX<Scalar>& d_hidden,
                                                        const TextTrace& trace) const {
    const auto& t = dynamic_cast<const ToyTextTrace<Scalar>&>(trace);
    const Index L = t.x.rows();
    const Scalar scale = Scalar(1) / std::sqrt(Scalar(kTokenDim));
    MatrixX<Scalar> d_mixed(L, kTokenDim);
    for (Index i = 0; i < L; ++i) {
        const auto dy = d_hidden.row(i).array();
        const auto y = t.normed.row(i).array();
        d_mixed.row(i) = t.inv_std[i] * (dy - dy.mean() - y * (dy * y).mean());
    }
    MatrixX<Scalar> dx = d_mixed;
    const MatrixX<Scalar> d_av = d_mixed * wo_.value.transpose();
    const MatrixX<Scalar> d_attn = d_av * t.v.transpose();
    const MatrixX<Scalar> dv = t.attn.transpose() * d_av;
    MatrixX<Scalar> d_scores = MatrixX<Scalar>::Zero(L, L);
    for (Index i = 0; i < L; ++i) {
        const auto a = t.attn.row(i).head(i + 1).array();
        const auto g = d_attn.row(i).head(i + 1).array();
        d_scores.row(i).head(i + 1) = a * (g - (a * g).sum());
    }
    d_scores *= scale;
    const MatrixX<Scalar> dq = d_scores * t.k;
    const MatrixX<Scalar> dk = d_scores.transpose() * t.q;
    dx.noalias() += dq * wq_.value.transpose();
    dx.noalias() += dk * wk_.value.transpose();
    dx.noalias() += dv * wv_.value.transpose();
    return dx;
}

template <typename Scalar>
ParameterRefs<Scalar> ToyTextEncoder<Scalar>::parameters() {
    return {&token_embedding_, &positional_, &wq_, &wk_, &wv_, &wo_, &clip_};
}

template <typename Scalar>
std::unique_ptr<TextEncoderAdapter<Scalar>> make_text_encoder(const TextEncoderConfig& cfg) {
    if (cfg.kind == "toy") return std::make_unique<ToyTextEncoder<Scalar>>(cfg.seed);
    if (cfg.kind == "conch")
        throw ConfigError("text_encoder.kind=conch needs pretrained weights from an external "
                          "adapter plugin, which is not part of this build");
    throw ConfigError("unknown text_encoder.kind '" + cfg.kind + "' (expected toy or conch)");
}

template <typename Scalar>
PromptLearner<Scalar>::PromptLearner(std::vector<PromptTemplate> prompts, Index num_context,
                                     Index token_dim, Index text_dim, Index embed_dim)
    : prompts_(std::move(prompts)),
      num_context_(num_context),
      context_("text.context", ParamGroup::context,
               static_cast<Index>(prompts_.size()) * num_context, token_dim, true, false),
      proj_("text.proj.weight", ParamGroup::text_projection, text_dim, embed_dim, true, true),
      proj_bias_("text.proj.bias", ParamGroup::text_projection, 1, embed_dim, true, false) {}

template <typename Scalar>
void PromptLearner<Scalar>::init(Rng& rng) {
    std::normal_distribution<double> dist(0.0, 0.02);
    for (Index i = 0; i < context_.value.size(); ++i) context_.value.data()[i] = Scalar(dist(rng));
    proj_.value.setZero();
    for (Index i = 0; i < std::min(proj_.value.rows(), proj_.value.cols()); ++i) proj_.value(i, i) = Scalar(1);
    proj_bias_.value.setZero();
}

template <typename Scalar>
MatrixX<Scalar> PromptLearner<Scalar>::encode_text(const TextEncoderAdapter<Scalar>& encoder) {
    const auto C = static_cast<Index>(prompts_.size());
    traces_.clear();
    traces_.resize(prompts_.size());
    clip_out_.resize(C, encoder.text_dim());
    for (Index c = 0; c < C; ++c) {
        const auto& p = prompts_[static_cast<std::size_t>(c)];
        MatrixX<Scalar> x = encoder.embed(p.tokens);
        for (Index m = 0; m < num_context_; ++m)
            x.row(p.context_positions[static_cast<std::size_t>(m)]) = context_.value.row(c * num_context_ + m);
        x += encoder.positional();
        const MatrixX<Scalar> h = encoder.encode(x, traces_[static_cast<std::size_t>(c)]);
        clip_out_.row(c) = h.row(p.eot_index) * encoder.clip_projection();
    }
    MatrixX<Scalar> t = clip_out_ * proj_.value;
    t.rowwise() += proj_bias_.value.row(0);
    return t;
}

template <typename Scalar>
void PromptLearner<Scalar>::backward(const TextEncoderAdapter<Scalar>& encoder, const MatrixX<Scalar>& d_text) {
    proj_.grad.noalias() += clip_out_.transpose() * d_text;
    proj_bias_.grad.row(0) += d_text.colwise().sum();
    if (num_context_ == 0) return;
    const MatrixX<Scalar> d_clip = d_text * proj_.value.transpose();
    const MatrixX<Scalar> d_eot = d_clip * encoder.clip_projection().transpose();
    for (std::size_t c = 0; c < prompts_.size(); ++c) {
        const auto& p = prompts_[c];
        MatrixX<Scalar> dh = MatrixX<Scalar>::Zero(encoder.context_length(), encoder.hidden_dim());
        dh.row(p.eot_index) = d_eot.row(static_cast<Index>(c));
        const MatrixX<Scalar> dx = encoder.encode_backward(dh, *traces_[c]);
        for (Index m = 0; m < num_context_; ++m)
            context_.grad.row(static_cast<Index>(c) * num_context_ + m) += dx.row(p.context_positions[static_cast<std::size_t>(m)]);
    }
}

template <typename Scalar>
void PromptLearner<Scalar>::collect(ParameterRefs<Scalar>& out) {
    if (num_context_ > 0) out.push_back(&context_);
    out.push_back(&proj_);
    out.push_back(&proj_bias_);
}

#define SEMALIGN_INSTANTIATE_ALIGN(S)                                                                   \
    template MatrixX<S> normalize_rows<S>(const MatrixX<S>&, S);                                        \
    template MatrixX<S> normalize_rows_backward<S>(const MatrixX<S>&, const MatrixX<S>&, S);            \
    template class PixelProjector<S>;                                                                   \
    template Tensor<S> cosine_logits<S>(const PixelEmbeddings<S>&, const MatrixX<S>&, S);               \
    template void cosine_logits_backward<S>(const PixelEmbeddings<S>&, const MatrixX<S>&,               \
                                            const Tensor<S>&, Tensor<S>&, MatrixX<S>&, S);              \
    template class PrototypeBank<S>;                                                                    \
    template class ToyTextEncoder<S>;                                                                   \
    template std::unique_ptr<TextEncoderAdapter<S>> make_text_encoder<S>(const TextEncoderConfig&);     \
    template class PromptLearner<S>;

SEMALIGN_INSTANTIATE_ALIGN(float)
SEMALIGN_INSTANTIATE_ALIGN(double)

}  // namespace semalign
