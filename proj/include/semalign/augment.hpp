#pragma once

#include "semalign/tensor.hpp"

#include <cstdint>
#include <vector>

namespace semalign {

struct AugmentConfig {
    Index crop = 256;
    double scale_min = 0.5;
    double scale_max = 2.0;
    double flip_prob = 0.5;

    double color_jitter_prob = 0.5;
    double brightness = 0.5;
    double contrast = 0.5;
    double saturation = 0.5;
    double hue = 0.25;
    double grayscale_prob = 0.2;
    double blur_prob = 0.5;
    double blur_sigma_min = 0.1;
    double blur_sigma_max = 2.0;

    double cutmix_prob = 1.0;
    double cutmix_area_min = 0.1;
    double cutmix_area_max = 0.5;
    double cutmix_aspect_min = 0.5;
    double cutmix_aspect_max = 2.0;

    double feature_dropout = 0.5;
};

/// Geometric part of an augmentation, shared by the weak and strong view.
struct Geometry {
    Index in_h = 0, in_w = 0;
    Index scaled_h = 0, scaled_w = 0;
    Index top = 0, left = 0;
    Index crop_h = 0, crop_w = 0;
    bool flip = false;
};

struct ViewPair {
    Tensor<float> weak;
    Tensor<float> strong;
    Geometry geometry;
};

struct CutMixPlan {
    Index top = 0, left = 0, h = 0, w = 0;
    Index partner = 0;
};

Geometry sample_geometry(Index in_h, Index in_w, std::uint64_t seed, const AugmentConfig& cfg);

/// Rescale (bilinear), reflect-pad up to the crop size if needed, crop, and flip.
Tensor<float> apply_geometry(const Tensor<float>& image, const Geometry& g);
/// Same geometry on labels with nearest-neighbour rescaling.
LabelMap apply_geometry(const LabelMap& mask, const Geometry& g);

Tensor<float> weak_augment(const Tensor<float>& image, std::uint64_t seed,
                           const AugmentConfig& cfg);
/// Weak geometry followed by color jitter, random grayscale, and Gaussian blur.
Tensor<float> strong_augment(const Tensor<float>& image, std::uint64_t seed,
                             const AugmentConfig& cfg);
ViewPair make_views(const Tensor<float>& image, std::uint64_t seed, const AugmentConfig& cfg);

/// Photometric half of strong_augment; operates on [1, 3, H, W] in [0, 1].
Tensor<float> photometric_augment(const Tensor<float>& image, std::uint64_t seed,
                                  const AugmentConfig& cfg);

std::vector<CutMixPlan> sample_cutmix_plans(Index batch, Index h, Index w, std::uint64_t seed,
                                            const AugmentConfig& cfg);

/// Pastes `plan[i].partner`'s box into sample i. Sources are read from the unmixed input.
template <typename Scalar>
Tensor<Scalar> apply_cutmix(const Tensor<Scalar>& x, const std::vector<CutMixPlan>& plans);
LabelMap apply_cutmix(const LabelMap& x, const std::vector<CutMixPlan>& plans);

struct CutMixResult {
    Tensor<float> images;
    LabelMap targets;
    LabelMap valid;  // empty when no validity mask was supplied
    std::vector<CutMixPlan> plans;
};

/// Mixes a batch and its targets (and validity mask, when given) with one shared plan.
/// A batch of one is returned unchanged with an empty plan.
CutMixResult cutmix(const Tensor<float>& images, const LabelMap& targets, std::uint64_t seed,
                    const AugmentConfig& cfg, const LabelMap* valid = nullptr);

/// Per-(sample, channel) multipliers of channel dropout: 0 with probability `rate`,
/// otherwise 1 / (1 - rate). Layout [n * c].
template <typename Scalar>
ArrayX<Scalar> channel_dropout_mask(Index n, Index c, double rate, std::uint64_t seed);

template <typename Scalar>
Tensor<Scalar> apply_channel_mask(const Tensor<Scalar>& f, const ArrayX<Scalar>& mask);

/// Channel dropout on a feature map, expectation preserving.
template <typename Scalar>
Tensor<Scalar> feature_perturb(const Tensor<Scalar>& f, double rate, std::uint64_t seed);

}  // namespace semalign
