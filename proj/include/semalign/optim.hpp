#pragma once

#include "semalign/tensor.hpp"

#include <vector>

namespace semalign {

/// lr0 * (1 - step / total)^power. Throws for total <= 0 or step outside [0, total].
double poly_lr(long step, long total_steps, double lr0, double power);

struct SgdConfig {
    double momentum = 0.9;
    double weight_decay = 1e-4;
};

/// Heavy-ball SGD: g = grad + wd * w (decaying tensors only), v = mu * v + g, w -= lr * v.
/// Weight decay applies only to parameters flagged `decay` (conv and linear weights).
template <typename Scalar>
class Sgd {
public:
    Sgd(ParameterRefs<Scalar> params, SgdConfig cfg);

    void step(double lr);
    void zero_grad();

    const ParameterRefs<Scalar>& params() const { return params_; }
    std::vector<MatrixX<Scalar>>& momentum_buffers() { return buffers_; }
    const std::vector<MatrixX<Scalar>>& momentum_buffers() const { return buffers_; }
    bool decays(std::size_t i) const { return params_[i]->decay && cfg_.weight_decay > 0; }
    const SgdConfig& config() const { return cfg_; }

private:
    ParameterRefs<Scalar> params_;
    SgdConfig cfg_;
    std::vector<MatrixX<Scalar>> buffers_;
};

}  // namespace semalign
