#include "semalign/trainer.hpp"

#include "semalign/augment.hpp"
#include "semalign/errors.hpp"
#include "semalign/nn.hpp"
#include "semalign/random.hpp"

#include <algorithm>
#include <numeric>

namespace semalign {

namespace {

template <typename Scalar>
Tensor<Scalar> concat_batch(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    Tensor<Scalar> out(a.n() + b.n(), a.c(), a.h(), a.w());
    out.array().head(a.size()) = a.array();
    out.array().tail(b.size()) = b.array();
    return out;
}

template <typename Scalar>
Tensor<Scalar> slice_batch(const Tensor<Scalar>& x, Index first, Index count) {
    Tensor<Scalar> out(count, x.c(), x.h(), x.w());
    const Index per = x.c() * x.h() * x.w();
    out.array() = x.array().segment(first * per, count * per);
    return out;
}

LabelMap gate(const LabelMap& labels, const LabelMap& valid) {
    LabelMap out = labels;
    for (std::size_t i = 0; i < out.data.size(); ++i)
        if (valid.data[i] == 0) out.data[i] = LabelMap::kIgnore;
    return out;
}

template <typename Scalar>
Tensor<Scalar> up(const Tensor<Scalar>& x, Index h, Index w) {
    return x.empty() ? Tensor<Scalar>() : nn::resize_bilinear(x, h, w);
}

template <typename Scalar>
Tensor<Scalar> down(const Tensor<Scalar>& d, const Tensor<Scalar>& like, Scalar scale) {
    if (d.empty()) return {};
    Tensor<Scalar> g = nn::resize_bilinear_backward(d, like.h(), like.w());
    g.array() *= scale;
    return g;
}

}  // namespace

template <typename Scalar>
SupervisedLoss<Scalar> supervised_pass(SegmentationModel<Scalar>& model, const Tensor<Scalar>& images,
                                       const LabelMap& labels, const TrainConfig& cfg, Scalar grad_scale) {
    ForwardOptions<Scalar> opt;
    opt.training = true;
    opt.alignment = true;
    const ModelOutput<Scalar> out = model.forward(images, opt);
    const Index H = images.h(), W = images.w();
    const bool align = model.has_prototype() && model.has_text();
    const MatrixX<Scalar> none;
    SupervisedLoss<Scalar> sl =
        supervised_loss(out.logits, up(out.proto, H, W), up(out.text, H, W),
                        align ? model.prototypes() : none, align ? model.text_embeddings() : none, labels,
                        cfg.loss.align);

    Tensor<Scalar> d_logits = sl.d_dl;
    d_logits.array() *= grad_scale;
    model.backward(d_logits, down(sl.d_zp, out.proto, grad_scale), down(sl.d_zt, out.text, grad_scale));
    if (sl.d_prototypes.size() > 0) model.prototype_param().grad += grad_scale * sl.d_prototypes;
    if (sl.d_text.size() > 0) model.text_grad() += grad_scale * sl.d_text;
    return sl;
}

template <typename Scalar>
WeakPrediction<Scalar> predict_weak(SegmentationModel<Scalar>& model, const Tensor<Scalar>& weak,
                                    const TrainConfig& cfg, double tau) {
    ForwardOptions<Scalar> opt;
    opt.training = true;
    opt.update_stats = false;
    opt.alignment = true;
    ModelOutput<Scalar> out = model.forward(weak, opt);
    WeakPrediction<Scalar> w;
    w.fused = fuse_logits(out.logits, out.proto, out.text, cfg.fusion);
    w.logits = std::move(out.logits);
    w.pseudo = generate_pseudo_labels(w.fused, tau);
    return w;
}

template <typename Scalar>
UnlabeledTargets<Scalar> mix_unlabeled(const Tensor<Scalar>& strong, const WeakPrediction<Scalar>& weak,
                                       std::uint64_t seed, const AugmentConfig& aug) {
    const auto plans = sample_cutmix_plans(strong.n(), strong.h(), strong.w(), seed, aug);
    UnlabeledTargets<Scalar> t;
    t.strong_images = apply_cutmix(strong, plans);
    t.weak_logits = apply_cutmix(weak.logits, plans);
    t.strong_labels = gate(apply_cutmix(weak.pseudo.labels, plans), apply_cutmix(weak.pseudo.valid, plans));
    t.fp_labels = weak.pseudo.gated();
    return t;
}

template <typename Scalar>
UnsupervisedLoss<Scalar> unsupervised_pass(SegmentationModel<Scalar>& model, const UnlabeledTargets<Scalar>& targets,
                                           const Tensor<Scalar>& weak, const TrainConfig& cfg, std::uint64_t seed,
                                           Scalar grad_scale) {
    const Index B = weak.n();
    const Index width = model.encoder().width();
    const double rate = cfg.augment.feature_dropout;
    ArrayX<Scalar> low = ArrayX<Scalar>::Ones(2 * B * width);
    ArrayX<Scalar> high = ArrayX<Scalar>::Ones(2 * B * width);
    if (rate > 0) {
        low.tail(B * width) = channel_dropout_mask<Scalar>(B, width, rate, derive_seed(seed, "fp.low", 0));
        high.tail(B * width) = channel_dropout_mask<Scalar>(B, width, rate, derive_seed(seed, "fp.high", 0));
    }
    ForwardOptions<Scalar> opt;
    opt.training = true;
    opt.update_stats = false;
    opt.alignment = false;
    opt.low_mask = &low;
    opt.high_mask = &high;
    const ModelOutput<Scalar> out = model.forward(concat_batch(targets.strong_images, weak), opt);

    UnsupervisedLoss<Scalar> un =
        unsupervised_loss(slice_batch(out.logits, 0, B), targets.weak_logits, slice_batch(out.logits, B, B),
                          targets.strong_labels, targets.fp_labels, cfg.loss.lambda);
    Tensor<Scalar> d = concat_batch(un.d_strong, un.d_fp);
    d.array() *= grad_scale;
    model.backward(d, Tensor<Scalar>(), Tensor<Scalar>());
    return un;
}

LossReport train_step(SegmentationModel<float>& model, Sgd<float>& optimizer, ThresholdState& threshold,
                      const StepBatch<float>& batch, const TrainConfig& cfg, double lr) {
    model.zero_grad();
    if (model.has_text()) model.refresh_text();

    LossReport r;
    r.lambda = cfg.loss.lambda;
    r.lr = lr;
    r.tau = threshold.tau;

    const auto sup = supervised_pass(model, batch.labeled, batch.labels, cfg, 0.5f);
    r.sup = {sup.dl, sup.proto, sup.text, sup.align};

    ArrayX<double> confidence;
    if (!batch.weak.empty() && batch.weak.n() > 0) {
        const auto weak = predict_weak(model, batch.weak, cfg, threshold.tau);
        const auto targets = mix_unlabeled(batch.strong, weak, derive_seed(batch.seed, "cutmix", 0), cfg.augment);
        const auto un = unsupervised_pass(model, targets, batch.weak, cfg, batch.seed, 0.5f);
        r.unsup = {un.hard, un.soft, un.corr};
        r.valid_pixel_fraction = weak.pseudo.valid_fraction();
        confidence = weak.pseudo.confidence;
    }
    r.total = total_loss(r.sup_sum(), r.unsup_sum());
    if (!r.all_finite()) throw NumericError("non-finite loss: " + r.describe());

    model.backward_text();
    optimizer.step(lr);
    if (confidence.size() > 0)
        threshold = update_threshold(threshold, std::span<const double>(confidence.data(), confidence.size()));
    return r;
}

namespace {

std::vector<Index> permutation(Index n, std::uint64_t seed) {
    std::vector<Index> p(static_cast<std::size_t>(n));
    std::iota(p.begin(), p.end(), Index{0});
    Rng rng(seed);
    std::shuffle(p.begin(), p.end(), rng);
    return p;
}

Tensor<float> stack(const std::vector<Tensor<float>>& xs) {
    Tensor<float> out(static_cast<Index>(xs.size()), xs[0].c(), xs[0].h(), xs[0].w());
    const Index per = xs[0].size();
    for (std::size_t i = 0; i < xs.size(); ++i) out.array().segment(static_cast<Index>(i) * per, per) = xs[i].array();
    return out;
}

LabelMap stack(const std::vector<LabelMap>& ms) {
    LabelMap out(static_cast<Index>(ms.size()), ms[0].h, ms[0].w);
    std::size_t off = 0;
    for (const auto& m : ms) {
        std::copy(m.data.begin(), m.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
        off += m.data.size();
    }
    return out;
}

}  // namespace

Trainer::Trainer(TrainConfig cfg, std::vector<Sample> labeled, std::vector<Sample> unlabeled)
    : cfg_(std::move(cfg)), labeled_(std::move(labeled)), unlabeled_(std::move(unlabeled)) {
    cfg_.validate();
    if (labeled_.empty()) throw DataError("training needs at least one labeled sample");
    for (const auto& s : labeled_)
        if (!s.mask) throw DataError("labeled sample '" + s.id + "' has no mask");
    model_ = std::make_unique<SegmentationModel<float>>(cfg_.model);
    optimizer_ = std::make_unique<Sgd<float>>(model_->trainable_parameters(),
                                              SgdConfig{cfg_.momentum, cfg_.weight_decay});
    threshold_ = cfg_.initial_threshold();
}

long Trainer::iterations_per_epoch() const {
    if (!unlabeled_.empty() && cfg_.batch_unlabeled > 0) {
        const auto u = static_cast<long>(unlabeled_.size());
        return (u + cfg_.batch_unlabeled - 1) / cfg_.batch_unlabeled;
    }
    const auto l = static_cast<long>(labeled_.size());
    return (l + cfg_.batch_labeled - 1) / cfg_.batch_labeled;
}

long Trainer::total_steps() const {
    return cfg_.max_steps > 0 ? cfg_.max_steps : static_cast<long>(cfg_.epochs) * iterations_per_epoch();
}

double Trainer::lr_at(long step) const { return poly_lr(step, total_steps(), cfg_.lr, cfg_.poly_power); }

StepBatch<float> Trainer::make_batch(long step) const {
    const auto seed = cfg_.seed;
    const auto k = static_cast<std::uint64_t>(step);
    StepBatch<float> batch;
    batch.seed = derive_seed(seed, "step", k);

    // Labeled stream: consecutive passes over a fresh permutation, cycled independently of epochs.
    const auto L = static_cast<Index>(labeled_.size());
    std::vector<Tensor<float>> images;
    std::vector<LabelMap> masks;
    for (Index j = 0; j < cfg_.batch_labeled; ++j) {
        const Index pos = step * cfg_.batch_labeled + j;
        const auto perm = permutation(L, derive_seed(seed, "labeled.pass", static_cast<std::uint64_t>(pos / L)));
        const Sample& s = labeled_[static_cast<std::size_t>(perm[static_cast<std::size_t>(pos % L)])];
        const Geometry g = sample_geometry(s.image.h(), s.image.w(),
                                           derive_seed(seed, "aug.labeled", k, static_cast<std::uint64_t>(j)),
                                           cfg_.augment);
        images.push_back(apply_geometry(s.image, g));
        masks.push_back(apply_geometry(*s.mask, g));
    }
    const std::vector<double> mean(cfg_.data.mean.begin(), cfg_.data.mean.end());
    const std::vector<double> sd(cfg_.data.std.begin(), cfg_.data.std.end());
    batch.labeled = stack(images);
    batch.labels = stack(masks);
    standardize(batch.labeled, mean, sd);

    if (unlabeled_.empty() || cfg_.batch_unlabeled == 0) return batch;
    const auto U = static_cast<Index>(unlabeled_.size());
    const long ipe = iterations_per_epoch();
    const auto perm = permutation(U, derive_seed(seed, "unlabeled.epoch", static_cast<std::uint64_t>(step / ipe)));
    std::vector<Tensor<float>> weak, strong;
    for (Index j = 0; j < cfg_.batch_unlabeled; ++j) {
        const Index pos = ((step % ipe) * cfg_.batch_unlabeled + j) % U;
        const Sample& s = unlabeled_[static_cast<std::size_t>(perm[static_cast<std::size_t>(pos)])];
        ViewPair v = make_views(s.image, derive_seed(seed, "aug.unlabeled", k, static_cast<std::uint64_t>(j)),
                                cfg_.augment);
        weak.push_back(std::move(v.weak));
        strong.push_back(std::move(v.strong));
    }
    batch.weak = stack(weak);
    batch.strong = stack(strong);
    standardize(batch.weak, mean, sd);
    standardize(batch.strong, mean, sd);
    return batch;
}

LossReport Trainer::train_step() {
    if (done()) throw ConfigError("training already finished (" + std::to_string(step_) + " steps)");
    const double lr = lr_at(step_);
    LossReport r = semalign::train_step(*model_, *optimizer_, threshold_, make_batch(step_), cfg_, lr);
    ++step_;
    return r;
}

void Trainer::save(const std::filesystem::path& dir) {
    save_checkpoint(dir, cfg_, *model_, optimizer_.get(), threshold_, step_);
}

void Trainer::resume(const std::filesystem::path& dir) {
    const CheckpointState st = read_checkpoint(dir);
    if (to_json(st.config) != to_json(cfg_))
        throw ConfigError("checkpoint config differs from the run config; resume with the saved config");
    restore_model(st, *model_);
    restore_optimizer(st, *optimizer_);
    threshold_ = cfg_.initial_threshold();
    threshold_.tau = st.tau;
    step_ = st.step;
}

#define SEMALIGN_INSTANTIATE_TRAIN(S)                                                                        \
    template SupervisedLoss<S> supervised_pass<S>(SegmentationModel<S>&, const Tensor<S>&, const LabelMap&, \
                                                  const TrainConfig&, S);                                   \
    template WeakPrediction<S> predict_weak<S>(SegmentationModel<S>&, const Tensor<S>&, const TrainConfig&, \
                                               double);                                                     \
    template UnlabeledTargets<S> mix_unlabeled<S>(const Tensor<S>&, const WeakPrediction<S>&,               \
                                                  std::uint64_t, const AugmentConfig&);                     \
    template UnsupervisedLoss<S> unsupervised_pass<S>(SegmentationModel<S>&, const UnlabeledTargets<S>&,    \
                                                      const Tensor<S>&, const TrainConfig&, std::uint64_t, S);

SEMALIGN_INSTANTIATE_TRAIN(float)
SEMALIGN_INSTANTIATE_TRAIN(double)

}  // namespace semalign
