#pragma once

#include "oodx/tensor.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace oodx {

enum class OptimizerKind { adam, rmsprop };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& text);

/// Moment buffers and step count for one parameter list.
///
/// Constants are fixed: Adam beta1=0.9, beta2=0.999, eps=1e-8; RMSprop rho=0.9, eps=1e-8.
/// Buffers are allocated on the first step and must keep matching the parameter shapes.
struct OptimizerState {
    static constexpr double adam_beta1 = 0.9;
    static constexpr double adam_beta2 = 0.999;
    static constexpr double rmsprop_rho = 0.9;
    static constexpr double epsilon = 1e-8;

    OptimizerKind kind = OptimizerKind::adam;
    double learning_rate = 1e-3;
    std::uint64_t step = 0;
    std::vector<Eigen::VectorXd> first_moment;
    std::vector<Eigen::VectorXd> second_moment;

    OptimizerState() = default;
    OptimizerState(OptimizerKind k, double lr);
};

/// Applies one update from the accumulated gradients of `params`. Throws NumericError
/// naming the first parameter whose gradient is not finite; nothing is updated then.
void optimizer_step(OptimizerState& state, std::span<Var> params);

}  // namespace oodx
