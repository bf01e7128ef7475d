#pragma once

#include "semalign/checkpoint.hpp"
#include "semalign/config.hpp"
#include "semalign/data.hpp"
#include "semalign/fusion.hpp"
#include "semalign/model.hpp"
#include "semalign/objectives.hpp"
#include "semalign/optim.hpp"

#include <filesystem>
#include <functional>
#include <memory>
#include <vector>

namespace semalign {

/// One optimizer step worth of inputs, standardized. `weak`/`strong` may be empty.
template <typename Scalar>
struct StepBatch {
    Tensor<Scalar> labeled;
    LabelMap labels;
    Tensor<Scalar> weak;
    Tensor<Scalar> strong;
    std::uint64_t seed = 0;  // CutMix and feature-dropout draws
};

/// Labeled forward, L_sup, and its backward scaled by `grad_scale`. Gradients of the
/// prototype and text rows are accumulated into the model (text via `text_grad`).
template <typename Scalar>
SupervisedLoss<Scalar> supervised_pass(SegmentationModel<Scalar>& model, const Tensor<Scalar>& images,
                                       const LabelMap& labels, const TrainConfig& cfg, Scalar grad_scale);

/// Weak-view prediction without gradients: decoder logits, fused logits, pseudo-labels.
template <typename Scalar>
struct WeakPrediction {
    Tensor<Scalar> logits;
    Tensor<Scalar> fused;
    PseudoLabelMap pseudo;
};

template <typename Scalar>
WeakPrediction<Scalar> predict_weak(SegmentationModel<Scalar>& model, const Tensor<Scalar>& weak,
                                    const TrainConfig& cfg, double tau);

/// Targets of the unlabeled losses after CutMix.
template <typename Scalar>
struct UnlabeledTargets {
    Tensor<Scalar> strong_images;  // CutMix-ed strong view
    Tensor<Scalar> weak_logits;    // KL target, mixed with the same boxes
    LabelMap strong_labels;        // gated, mixed
    LabelMap fp_labels;            // gated, unmixed (aligned with the weak view)
};

template <typename Scalar>
UnlabeledTargets<Scalar> mix_unlabeled(const Tensor<Scalar>& strong, const WeakPrediction<Scalar>& weak,
                                       std::uint64_t seed, const AugmentConfig& aug);

/// Strong view and feature-perturbed weak view share one forward/backward: the first half
/// of the batch is the strong view, the second the weak view with channel dropout on both
/// encoder taps. Backward is scaled by `grad_scale`.
template <typename Scalar>
UnsupervisedLoss<Scalar> unsupervised_pass(SegmentationModel<Scalar>& model, const UnlabeledTargets<Scalar>& targets,
                                           const Tensor<Scalar>& weak, const TrainConfig& cfg, std::uint64_t seed,
                                           Scalar grad_scale);

/// Full semi-supervised step (steps 1 through 7) at learning rate `lr`. Throws
/// NumericError with every loss component when the objective is not finite.
LossReport train_step(SegmentationModel<float>& model, Sgd<float>& optimizer, ThresholdState& threshold,
                      const StepBatch<float>& batch, const TrainConfig& cfg, double lr);

/// Owns the run state and derives every batch from (seed, step) so resumed runs see the
/// same data as uninterrupted ones.
class Trainer {
public:
    Trainer(TrainConfig cfg, std::vector<Sample> labeled, std::vector<Sample> unlabeled);

    long iterations_per_epoch() const;
    long total_steps() const;
    long step() const { return step_; }
    bool done() const { return step_ >= total_steps(); }
    double lr_at(long step) const;

    StepBatch<float> make_batch(long step) const;
    LossReport train_step();

    SegmentationModel<float>& model() { return *model_; }
    Sgd<float>& optimizer() { return *optimizer_; }
    const ThresholdState& threshold() const { return threshold_; }
    const TrainConfig& config() const { return cfg_; }

    void save(const std::filesystem::path& dir);
    /// Restores model, optimizer, threshold and step; the checkpoint config must match.
    void resume(const std::filesystem::path& dir);

private:
    TrainConfig cfg_;
    std::vector<Sample> labeled_;
    std::vector<Sample> unlabeled_;
    std::unique_ptr<SegmentationModel<float>> model_;
    std::unique_ptr<Sgd<float>> optimizer_;
    ThresholdState threshold_;
    long step_ = 0;
};

}  // namespace semalign
