#pragma once

#include "semalign/config.hpp"
#include "semalign/fusion.hpp"
#include "semalign/model.hpp"
#include "semalign/optim.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace semalign {

inline constexpr int kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    MatrixX<float> value;
};

/// Everything needed to resume: stateful tensors, momentum, threshold, step, config.
///
/// On disk: `<dir>/manifest.txt` plus one blob per tensor under `<dir>/tensors/`. A blob is
/// the tensor's rows * cols float32 values, row-major, little-endian, no header. The manifest
/// lists `tensor <kind> <index> <name> f32 <rows> <cols> <file> <fnv1a64>` per blob and ends
/// with `manifest_hash <fnv1a64>` over all preceding bytes.
struct CheckpointState {
    TrainConfig config;
    long step = 0;
    double tau = 0.7;
    std::string frozen_hash;
    std::vector<NamedTensor> tensors;   // model state: trainable parameters and buffers
    std::vector<NamedTensor> momentum;  // one per optimizer parameter, same order
};

/// Hash of the frozen encoder weights; they are rebuilt from the config seed on load.
std::string frozen_weights_hash(SegmentationModel<float>& model);

void save_checkpoint(const std::filesystem::path& dir, const TrainConfig& cfg, SegmentationModel<float>& model,
                     const Sgd<float>* optimizer, const ThresholdState& threshold, long step);

/// Verifies format, version, manifest hash and every blob hash.
CheckpointState read_checkpoint(const std::filesystem::path& dir);

void restore_model(const CheckpointState& state, SegmentationModel<float>& model);
void restore_optimizer(const CheckpointState& state, Sgd<float>& optimizer);

}  // namespace semalign
