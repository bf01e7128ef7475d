#include "semalign/optim.hpp"

#include "semalign/errors.hpp"

#include <cmath>

namespace semalign {

double poly_lr(long step, long total_steps, double lr0, double power) {
    if (total_steps <= 0) throw ConfigError("poly_lr: total_steps must be > 0");
    if (step < 0 || step > total_steps)
        throw ConfigError("poly_lr: step " + std::to_string(step) + " outside [0, " +
                          std::to_string(total_steps) + "]");
    return lr0 * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total_steps), power);
}

template <typename Scalar>
Sgd<Scalar>::Sgd(ParameterRefs<Scalar> params, SgdConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    buffers_.reserve(params_.size());
    for (const auto* p : params_) {
        if (!p->trainable) throw ConfigError("optimizer given frozen tensor '" + p->name + "'");
        buffers_.push_back(MatrixX<Scalar>::Zero(p->value.rows(), p->value.cols()));
    }
}

template <typename Scalar>
void Sgd<Scalar>::step(double lr) {
    const auto mu = static_cast<Scalar>(cfg_.momentum);
    const auto wd = static_cast<Scalar>(cfg_.weight_decay);
    const auto eta = static_cast<Scalar>(lr);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = *params_[i];
        auto& v = buffers_[i];
        if (decays(i))
            v = mu * v + p.grad + wd * p.value;
        else
            v = mu * v + p.grad;
        p.value -= eta * v;
    }
}

template <typename Scalar>
void Sgd<Scalar>::zero_grad() {
    for (auto* p : params_) p->zero_grad();
}

template class Sgd<float>;
template class Sgd<double>;

}  // namespace semalign
