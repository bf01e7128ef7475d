#pragma once

#include "semalign/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

namespace semalign::testing {

/// Miniature model: toy encoders, small widths, D = 8.
inline TrainConfig mini_config() {
    TrainConfig cfg;
    cfg.model.encoder.width = 16;
    cfg.model.low_channels = 8;
    cfg.model.high_channels = 16;
    cfg.model.aspp_channels = 8;
    cfg.model.low_reduce = 4;
    cfg.model.embed_dim = 8;
    cfg.augment.crop = 32;
    cfg.batch_labeled = 2;
    cfg.batch_unlabeled = 2;
    cfg.validate();
    return cfg;
}

/// Reduced widths used by the synthetic-set training experiments.
inline TrainConfig small_config() {
    TrainConfig cfg;
    cfg.model.encoder.width = 192;
    cfg.model.low_channels = 64;
    cfg.model.high_channels = 256;
    cfg.model.aspp_channels = 64;
    cfg.model.embed_dim = 64;
    cfg.augment.crop = 64;
    cfg.validate();
    return cfg;
}

template <typename Scalar>
Tensor<Scalar> random_tensor(Shape4 shape, std::uint64_t seed, double lo = -1, double hi = 1) {
    Rng rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor<Scalar> t(shape);
    for (Index i = 0; i < t.size(); ++i) t.array()[i] = static_cast<Scalar>(u(rng));
    return t;
}

template <typename Scalar>
MatrixX<Scalar> random_matrix(Index rows, Index cols, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> n(0, 1);
    MatrixX<Scalar> m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(n(rng));
    return m;
}

inline LabelMap random_labels(Index n, Index h, Index w, int classes, std::uint64_t seed,
                              double ignore_fraction = 0) {
    Rng rng(seed);
    std::uniform_int_distribution<int> c(0, classes - 1);
    std::uniform_real_distribution<double> u(0, 1);
    LabelMap m(n, h, w);
    for (auto& v : m.data) v = u(rng) < ignore_fraction ? LabelMap::kIgnore : static_cast<std::uint8_t>(c(rng));
    return m;
}

struct GradCheck {
    double max_rel_error = 0;
    std::string worst;
    int checked = 0;
};

/// Central differences on up to `per_tensor` seeded entries of every parameter. The analytic
/// gradient must already sit in `p->grad`; `loss` evaluates the objective only.
inline GradCheck check_gradients(const ParameterRefs<double>& params, const std::function<double()>& loss,
                                 int per_tensor = 6, double eps = 1e-5, double floor = 1e-6,
                                 std::uint64_t seed = 3) {
    std::vector<MatrixX<double>> analytic;
    for (auto* p : params) analytic.push_back(p->grad);
    GradCheck out;
    Rng rng(seed);
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto* p = params[k];
        const Index n = p->value.size();
        std::vector<Index> idx(static_cast<std::size_t>(n));
        std::iota(idx.begin(), idx.end(), Index{0});
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(static_cast<std::size_t>(std::min<Index>(n, per_tensor)));
        for (Index i : idx) {
            double& w = p->value.data()[i];
            const double w0 = w;
            w = w0 + eps;
            const double up = loss();
            w = w0 - eps;
            const double down = loss();
            w = w0;
            const double numeric = (up - down) / (2 * eps);
            const double a = analytic[k].data()[i];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
            ++out.checked;
            if (rel > out.max_rel_error) {
                out.max_rel_error = rel;
                out.worst = p->name + "[" + std::to_string(i) + "] analytic " + std::to_string(a) + " numeric " +
                            std::to_string(numeric);
            }
        }
    }
    for (std::size_t k = 0; k < params.size(); ++k) params[k]->grad = analytic[k];
    return out;
}

/// Miniature-model gradient checks of L_sup and the lambda-weighted L_unsup. The step is
/// 1e-4: smaller steps are dominated by roundoff on the ~1e-6 decoder gradients, larger
/// ones start crossing ReLU kinks.
struct ObjectiveGradCheck {
    GradCheck sup;
    GradCheck unsup;
    std::vector<std::string> groups;  // parameter groups that were checked
};

inline ObjectiveGradCheck check_objective_gradients(int per_tensor = 6, double eps = 1e-4) {
    TrainConfig cfg = mini_config();
    SegmentationModel<double> model(cfg.model);
    const auto params = model.trainable_parameters();
    const Tensor<double> x = random_tensor<double>({1, 3, 32, 32}, 11);
    const Tensor<double> xs = random_tensor<double>({1, 3, 32, 32}, 12);
    const Tensor<double> xw = random_tensor<double>({1, 3, 32, 32}, 13);
    const LabelMap y = random_labels(1, 32, 32, 2, 14, 0.1);

    ObjectiveGradCheck out;
    for (auto* p : params) {
        const std::string g = to_string(p->group);
        if (std::find(out.groups.begin(), out.groups.end(), g) == out.groups.end()) out.groups.push_back(g);
    }

    auto sup_value = [&] {
        model.zero_grad();
        model.refresh_text();
        return static_cast<double>(supervised_pass(model, x, y, cfg, 1.0).sum());
    };
    model.zero_grad();
    model.refresh_text();
    supervised_pass(model, x, y, cfg, 1.0);
    model.backward_text();
    out.sup = check_gradients(params, sup_value, per_tensor, eps);

    // Pseudo-labels and the KL target are constants of the unlabeled objective.
    model.refresh_text();
    const auto weak = predict_weak(model, xw, cfg, 0.5);
    auto conf = weak.pseudo.confidence;
    std::sort(conf.begin(), conf.end());
    const double tau = conf[conf.size() / 2];
    const auto gated = predict_weak(model, xw, cfg, tau);
    const auto targets = mix_unlabeled(xs, gated, 5, cfg.augment);
    auto unsup_value = [&] {
        model.zero_grad();
        return static_cast<double>(unsupervised_pass(model, targets, xw, cfg, 9, 1.0).weighted());
    };
    model.zero_grad();
    unsupervised_pass(model, targets, xw, cfg, 9, 1.0);
    out.unsup = check_gradients(params, unsup_value, per_tensor, eps);
    return out;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("semalign_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

/// Small synthetic gland images of side `size` with masks.
inline std::vector<Sample> tiny_samples(int n, std::uint64_t seed, int size = 32) {
    SyntheticSpec spec;
    spec.n_images = n;
    spec.size = size;
    spec.blob_scale = {size / 8.0, size / 4.0};
    spec.seed = seed;
    spec.id_prefix = "s" + std::to_string(seed) + "_";
    return generate_synthetic_glands(spec);
}

/// Mini trainer with 4 labeled and 4 unlabeled 32x32 images.
inline Trainer mini_trainer(TrainConfig cfg = mini_config()) {
    auto unlabeled = tiny_samples(4, 101);
    for (auto& s : unlabeled) s.mask.reset();
    return Trainer(std::move(cfg), tiny_samples(4, 100), std::move(unlabeled));
}

}  // namespace semalign::testing
