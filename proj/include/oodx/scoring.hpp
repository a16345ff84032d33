#pragma once

#include "oodx/error.hpp"

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace oodx {

/// Largest softmax probability. Higher means more in-distribution.
template <typename Derived>
typename Derived::Scalar msp_score(const Eigen::MatrixBase<Derived>& logits) {
    using Scalar = typename Derived::Scalar;
    if (logits.size() == 0 || !logits.allFinite()) throw InputError("msp_score: logits must be finite and non-empty");
    const Scalar m = logits.maxCoeff();
    // max_i softmax_i = e^0 / sum_j e^{z_j - m}
    return Scalar(1) / (logits.array() - m).exp().sum();
}

/// E = -T log sum_i exp(f_i / T), evaluated as -m - T log sum_i exp((f_i - m) / T).
template <typename Derived>
typename Derived::Scalar energy(const Eigen::MatrixBase<Derived>& logits, typename Derived::Scalar temperature) {
    using Scalar = typename Derived::Scalar;
    if (!(temperature > Scalar(0))) throw InputError("energy: temperature must be positive");
    if (logits.size() == 0 || !logits.allFinite()) throw InputError("energy: logits must be finite and non-empty");
    const Scalar m = logits.maxCoeff();
    return -m - temperature * std::log(((logits.array() - m) / temperature).exp().sum());
}

/// Gate-oriented energy score s = -E, so higher means more in-distribution.
template <typename Derived>
typename Derived::Scalar energy_id_score(const Eigen::MatrixBase<Derived>& logits,
                                         typename Derived::Scalar temperature) {
    return -energy(logits, temperature);
}

inline constexpr double kDefaultTemperature = 0.001;
inline constexpr double kDefaultQuantile = 0.95;

enum class Method { softmax, energy, ensemble, ensemble_weighted };
enum class Origin { id, ood };

std::string to_string(Method method);
/// Accepts `ensemble-weighted` and `ensemble_weighted`.
Method parse_method(const std::string& text);
std::string to_string(Origin origin);
Origin parse_origin(const std::string& text);

/// Index k = floor((1 - q) n) of the ascending-sorted scores. At least q*n of the
/// scores are >= the returned value. Shared by calibration, FPR95 and FNR5 filtering.
double quantile_threshold(std::span<const double> scores, double q);

struct ThresholdSet {
    std::vector<double> thresholds;
    double quantile = kDefaultQuantile;
    /// Hash of the calibration scores.
    std::string fingerprint;
    Method method = Method::energy;
    /// Fingerprint of the model the scores came from; empty when unknown.
    std::string model_fingerprint;

    void save(const std::filesystem::path& path) const;
    static ThresholdSet load(const std::filesystem::path& path);
};

inline constexpr std::size_t kMinCalibrationScores = 20;

/// One threshold per exit; `id_scores[e]` holds the ID scores of exit e.
ThresholdSet calibrate(std::span<const std::vector<double>> id_scores, double q = kDefaultQuantile);

/// ID iff every exit score reaches its threshold.
Origin gate(std::span<const double> exit_scores, const ThresholdSet& thresholds);

/// min_e (s_e - tau_e); non-negative exactly when the gate says ID.
double gate_margin(std::span<const double> exit_scores, const ThresholdSet& thresholds);

/// One row of a scores file.
struct ScoreRecord {
    std::string sample_id;
    Method method = Method::softmax;
    std::vector<double> exit_scores;  // energy method only
    double combined = 0.0;
    Origin origin = Origin::id;
};

/// CSV with header `sample_id,method,exit1,exit2,exit3,combined,origin`; unused exit
/// columns are left empty.
void write_scores(const std::filesystem::path& path, std::span<const ScoreRecord> records);
std::vector<ScoreRecord> read_scores(const std::filesystem::path& path);
std::string scores_csv(std::span<const ScoreRecord> records);

std::vector<double> combined_scores(std::span<const ScoreRecord> records);
/// Column of exit e (0-based). Throws InputError if a record lacks it.
std::vector<double> exit_column(std::span<const ScoreRecord> records, std::size_t exit);

std::string fingerprint_scores(std::span<const double> scores);

}  // namespace oodx
