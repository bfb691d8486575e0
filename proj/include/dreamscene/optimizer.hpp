#pragma once

#include "dreamscene/gaussian_cloud.hpp"
#include "dreamscene/render.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace dreamscene {

struct LearningRates {
    double means = 1.6e-4;
    double opacity = 5e-2;
    double color = 2.5e-3;
    double scales = 5e-3;
};

struct AdamConfig {
    LearningRates lr;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-15;
};

/// Adam over the trainable groups of a GaussianCloud: means, log scales,
/// opacity logits and the SH DC band. Frozen rows are never touched and
/// their moments stay at zero.
class Adam {
public:
    explicit Adam(AdamConfig config = {}) : config_(config) {}

    void step(GaussianCloud& cloud, const ParamGrads& grads);
    /// Re-indexes per-row state after the cloud was rebuilt from `source`
    /// (clone/split children inherit their parent's moments).
    void remap(std::span<const std::size_t> source);
    void reset() { rows_.clear(); steps_ = 0; }
    long steps() const { return steps_; }
    const AdamConfig& config() const { return config_; }

private:
    struct Row {
        Eigen::Vector3d m_mean = Eigen::Vector3d::Zero(), v_mean = Eigen::Vector3d::Zero();
        Eigen::Vector3d m_scale = Eigen::Vector3d::Zero(), v_scale = Eigen::Vector3d::Zero();
        Eigen::Vector3d m_dc = Eigen::Vector3d::Zero(), v_dc = Eigen::Vector3d::Zero();
        double m_opacity = 0.0, v_opacity = 0.0;
    };

    AdamConfig config_;
    std::vector<Row> rows_;
    long steps_ = 0;
};

} // namespace dreamscene
