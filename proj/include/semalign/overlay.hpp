#pragma once

#include "semalign/png_io.hpp"
#include "semalign/tensor.hpp"

#include <cstdint>

namespace semalign {

struct OverlayResult {
    RawImage image;
    std::int64_t disagreement = 0;  // non-ignored pixels where prediction != ground truth
};

/// Renders prediction against ground truth on top of an RGB image [1, 3, H, W] in [0, 1].
/// Foreground fill: green where both agree, red for false positives, blue for misses.
/// The predicted foreground boundary is drawn in yellow. Without ground truth every
/// predicted foreground pixel is filled green.
OverlayResult render_overlay(const Tensor<float>& image, const LabelMap& pred, const LabelMap* gt,
                             double alpha = 0.45);

}  // namespace semalign
