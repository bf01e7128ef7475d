#pragma once

#include "semalign/config.hpp"
#include "semalign/data.hpp"
#include "semalign/metrics.hpp"
#include "semalign/model.hpp"

#include <functional>
#include <vector>

namespace semalign {

/// Maps an image batch [B, 3, h, w] to logits [B, C, h, w].
template <typename Scalar>
using LogitFn = std::function<Tensor<Scalar>(const Tensor<Scalar>&)>;

/// Window origins along one axis: 0, stride, 2*stride, ... with the last window flush to
/// the border. Requires size >= window.
std::vector<Index> window_starts(Index size, Index window, Index stride);

/// Number of windows covering each pixel of an h x w image (brute force over all windows).
Eigen::ArrayXXi coverage_map(Index h, Index w, Index window, Index stride);

/// Reflect padding (edge not repeated) on the bottom and right; handles pads larger than the image.
template <typename Scalar>
Tensor<Scalar> reflect_pad(const Tensor<Scalar>& x, Index bottom, Index right);

template <typename Scalar>
Tensor<Scalar> crop(const Tensor<Scalar>& x, Index top, Index left, Index h, Index w);

/// Averages overlapping window logits by per-pixel coverage. Images smaller than the
/// window are reflect-padded and the result is cropped back.
template <typename Scalar>
Tensor<Scalar> sliding_window_infer(const LogitFn<Scalar>& fn, const Tensor<Scalar>& image, Index window,
                                    Index stride);

/// One forward pass on the image reflect-padded to a multiple of `multiple`, cropped back.
template <typename Scalar>
Tensor<Scalar> single_infer(const LogitFn<Scalar>& fn, const Tensor<Scalar>& image, Index multiple = 16);

template <typename Scalar>
LabelMap argmax_labels(const Tensor<Scalar>& logits);

/// Eval-mode logits of a standardized batch: decoder logits, or the fused map when
/// `cfg.eval.logits == "fused"`.
template <typename Scalar>
LogitFn<Scalar> model_logit_fn(SegmentationModel<Scalar>& model, const TrainConfig& cfg);

/// Logits for one raw image [1, 3, H, W] in [0, 1] using the configured inference mode.
template <typename Scalar>
Tensor<Scalar> infer_image(SegmentationModel<Scalar>& model, const Tensor<float>& image, const TrainConfig& cfg);

/// Argmax predictions against ground truth, aggregated over the dataset.
template <typename Scalar>
MetricReport evaluate(SegmentationModel<Scalar>& model, const std::vector<Sample>& samples,
                      const TrainConfig& cfg);

}  // namespace semalign
