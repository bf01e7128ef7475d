#pragma once

#include "semalign/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace semalign {

/// One image with an optional label mask. `image` is [1, 3, H, W] in [0, 1];
/// `mask` is [1, H, W] with values in {0..C-1} or 255 (ignore).
struct Sample {
    std::string id;
    Tensor<float> image;
    std::optional<LabelMap> mask;
};

/// Labeled/unlabeled partition of a training id list.
struct SplitManifest {
    std::vector<std::string> labeled_ids;
    std::vector<std::string> unlabeled_ids;
    std::uint64_t seed = 0;
    double ratio = 1.0;

    std::string serialize() const;
    static SplitManifest parse(const std::string& text);
    bool operator==(const SplitManifest&) const = default;
};

struct SyntheticSpec {
    int n_images = 40;
    int size = 64;
    std::pair<int, int> n_blobs{1, 3};
    /// Range of ellipse semi-axis lengths in pixels.
    std::pair<double, double> blob_scale{10.0, 20.0};
    double noise_sigma = 0.04;
    std::uint64_t seed = 0;
    std::string id_prefix = "synth";
};

enum class DataSplit { train, test };

DataSplit parse_split(const std::string& name);
const char* to_string(DataSplit split);

/// Reads `root/images/<split>/*.png` and the matching `root/masks/<split>/*.png`.
/// Samples are ordered by id (file stem).
std::vector<Sample> load_dataset(const std::filesystem::path& root, DataSplit split,
                                 int num_classes = 2);

/// Like load_dataset but masks are optional (images without a mask load unlabeled).
std::vector<Sample> load_images(const std::filesystem::path& root, DataSplit split,
                                int num_classes = 2);

/// Writes samples in the on-disk dataset layout; masks are written when present.
void write_dataset(const std::filesystem::path& root, DataSplit split,
                   const std::vector<Sample>& samples);

/// Number of labeled ids for a given ratio: round-half-up of ratio * n.
std::size_t labeled_count(std::size_t n, double ratio);

SplitManifest make_ssl_split(const std::vector<std::string>& ids, double ratio,
                             std::uint64_t seed);

void write_manifest(const std::filesystem::path& path, const SplitManifest& manifest);
SplitManifest read_manifest(const std::filesystem::path& path);

std::vector<Sample> generate_synthetic_glands(const SyntheticSpec& spec);

/// Stacks equally sized images into [B, 3, H, W].
Tensor<float> stack_images(const std::vector<const Sample*>& samples);
/// Stacks masks into [B, H, W]; every sample must carry a mask.
LabelMap stack_masks(const std::vector<const Sample*>& samples);

/// Per-channel (x - mean) / std on a [B, 3, H, W] batch in place.
void standardize(Tensor<float>& images, const std::vector<double>& mean,
                 const std::vector<double>& std);

}  // namespace semalign
