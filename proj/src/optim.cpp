#include "oodx/optim.hpp"

#include "oodx/error.hpp"

#include <cmath>

namespace oodx {

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "rmsprop"; }

OptimizerKind parse_optimizer(const std::string& text) {
    if (text == "adam") return OptimizerKind::adam;
    if (text == "rmsprop") return OptimizerKind::rmsprop;
    throw ConfigError("unknown optimizer '" + text + "' (expected adam or rmsprop)");
}

OptimizerState::OptimizerState(OptimizerKind k, double lr) : kind(k), learning_rate(lr) {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive and finite");
}

void optimizer_step(OptimizerState& state, std::span<Var> params) {
    if (state.first_moment.empty() && state.second_moment.empty()) {
        for (const Var& p : params) {
            state.first_moment.push_back(Eigen::VectorXd::Zero(p.value().size()));
            state.second_moment.push_back(Eigen::VectorXd::Zero(p.value().size()));
        }
    }
    if (state.second_moment.size() != params.size())
        throw ConfigError("optimizer state holds " + std::to_string(state.second_moment.size()) +
                          " buffers for " + std::to_string(params.size()) + " parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.second_moment[i].size() != params[i].value().size())
            throw ConfigError("optimizer buffer for '" + params[i].name() + "' does not match shape " +
                              shape_string(params[i].shape()));
        if (!params[i].grad().allFinite())
            throw NumericError("non-finite gradient in parameter '" + params[i].name() + "'");
    }

    ++state.step;
    const double lr = state.learning_rate;
    const double eps = OptimizerState::epsilon;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Eigen::VectorXd& g = params[i].grad();
        Eigen::VectorXd& p = params[i].value().data;
        Eigen::VectorXd& v = state.second_moment[i];
        if (state.kind == OptimizerKind::adam) {
            constexpr double b1 = OptimizerState::adam_beta1, b2 = OptimizerState::adam_beta2;
            Eigen::VectorXd& m = state.first_moment[i];
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g.cwiseAbs2();
            const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
            const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
            p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
        } else {
            constexpr double rho = OptimizerState::rmsprop_rho;
            v = rho * v + (1.0 - rho) * g.cwiseAbs2();
            p.array() -= lr * g.array() / (v.array().sqrt() + eps);
        }
    }
}

}  // namespace oodx
