#pragma once

#include "semalign/augment.hpp"
#include "semalign/fusion.hpp"
#include "semalign/model.hpp"
#include "semalign/objectives.hpp"

#include <json.hpp>

#include <array>
#include <string>
#include <vector>

namespace semalign {

struct PseudoConfig {
    double tau_init = 0.7;
    double ema_alpha = 0.999;
    std::array<double, 2> tau_clamp{0.5, 0.95};
};

struct LossConfig {
    std::array<double, 3> lambda{0.5, 0.25, 0.25};
    bool kl_stopgrad_target = true;
    AlignLoss align = AlignLoss::mse;
};

struct EvalConfig {
    std::string mode = "single";  // single | sliding
    Index window = 256;
    Index stride = 171;
    std::string logits = "decoder";  // decoder | fused
};

struct DataConfig {
    std::array<double, 3> mean{0.5, 0.5, 0.5};
    std::array<double, 3> std{0.5, 0.5, 0.5};
};

struct TrainConfig {
    int epochs = 80;
    double lr = 0.001;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double poly_power = 0.9;
    Index batch_labeled = 4;
    Index batch_unlabeled = 4;
    std::uint64_t seed = 0;
    /// Hard cap on optimizer steps; 0 means epochs * iterations-per-epoch.
    long max_steps = 0;
    /// Evaluate on the held-out set every `eval_every` epochs (0 = only at the end).
    int eval_every = 0;

    ModelConfig model;
    AugmentConfig augment;
    FusionWeights fusion;
    PseudoConfig pseudo;
    LossConfig loss;
    EvalConfig eval;
    DataConfig data;

    ThresholdState initial_threshold() const;
    void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
/// Strict: unknown keys and type mismatches raise ConfigError naming the dotted key.
TrainConfig config_from_json(const nlohmann::json& j);

/// Applies `dotted.key=value`; the value is parsed as JSON when possible, else taken as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Defaults, then each file merged in order, then overrides.
TrainConfig resolve_config(const std::vector<std::string>& files, const std::vector<std::string>& overrides);

std::string dump_config(const TrainConfig& cfg);

}  // namespace semalign
