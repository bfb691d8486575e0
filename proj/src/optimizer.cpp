#include "dreamscene/optimizer.hpp"

#include "dreamscene/error.hpp"

#include <cmath>

namespace dreamscene {

namespace {

template <typename T>
void adam_update(T& param, const T& grad, T& m, T& v, double lr, double b1, double b2, double c1, double c2,
                 double eps) {
    m = b1 * m + (1.0 - b1) * grad;
    if constexpr (std::is_same_v<T, double>) {
        v = b2 * v + (1.0 - b2) * grad * grad;
        param -= lr * (m / c1) / (std::sqrt(v / c2) + eps);
    } else {
        v = b2 * v + (1.0 - b2) * grad.cwiseProduct(grad);
        param -= lr * ((m / c1).array() / ((v / c2).array().sqrt() + eps)).matrix();
    }
}

} // namespace

void Adam::step(GaussianCloud& cloud, const ParamGrads& grads) {
    if (grads.size() != cloud.size()) {
        throw ValidationError("optimizer: " + std::to_string(grads.size()) + " gradient rows for " +
                              std::to_string(cloud.size()) + " Gaussians");
    }
    if (!grads.all_finite()) throw NumericError("optimizer: non-finite gradient");
    rows_.resize(cloud.size());
    ++steps_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, double(steps_)), c2 = 1.0 - std::pow(b2, double(steps_));
    const double eps = config_.epsilon;
    const LearningRates& lr = config_.lr;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        if (cloud.frozen[i]) continue;
        Row& r = rows_[i];
        adam_update(cloud.means[i], grads.means[i], r.m_mean, r.v_mean, lr.means, b1, b2, c1, c2, eps);
        adam_update(cloud.log_scales[i], grads.log_scales[i], r.m_scale, r.v_scale, lr.scales, b1, b2, c1, c2, eps);
        adam_update(cloud.opacity_logits[i], grads.opacity_logits[i], r.m_opacity, r.v_opacity, lr.opacity, b1, b2,
                    c1, c2, eps);
        auto sh = cloud.sh_of(i);
        Eigen::Vector3d dc(sh[0], sh[1], sh[2]);
        adam_update(dc, grads.sh_dc[i], r.m_dc, r.v_dc, lr.color, b1, b2, c1, c2, eps);
        sh[0] = dc.x();
        sh[1] = dc.y();
        sh[2] = dc.z();
    }
}

void Adam::remap(std::span<const std::size_t> source) {
    std::vector<Row> next(source.size());
    for (std::size_t i = 0; i < source.size(); ++i) {
        if (source[i] < rows_.size()) next[i] = rows_[source[i]];
    }
    rows_ = std::move(next);
}

} // namespace dreamscene
