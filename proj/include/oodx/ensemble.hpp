#pragma once

#include "oodx/model.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace oodx {

/// Diversification protocol for a deep ensemble.
struct EnsembleSpec {
    int members = 20;
    double leave_out_min = 0.0;
    double leave_out_max = 0.15;
    double lr_min = 1e-4;
    double lr_max = 1e-3;
    std::vector<OptimizerKind> optimizers{OptimizerKind::adam, OptimizerKind::rmsprop};
    int epochs_min = 25;
    int epochs_max = 85;
    std::vector<int> batch_sizes{8, 16, 32, 64, 128};
    std::uint64_t master_seed = 0;

    void validate() const;
};

/// Hyperparameters drawn for one member.
struct MemberConfig {
    int index = 0;
    std::uint64_t seed = 0;
    double leave_out = 0.0;
    double learning_rate = 1e-3;
    OptimizerKind optimizer = OptimizerKind::adam;
    int epochs = 25;
    int batch_size = 8;

    bool operator==(const MemberConfig&) const = default;
};

/// Leave-out uniform in its range, learning rate log-uniform, optimizer, epoch count and
/// batch size uniform over their choices. Depends only on the spec.
std::vector<MemberConfig> sample_member_configs(const EnsembleSpec& spec);

/// Seed of member `index`, derived from the master seed with a splitmix64 step.
std::uint64_t member_seed(std::uint64_t master_seed, int index);

struct EnsembleMember {
    MemberConfig config;
    MultiExitModel model;
    std::vector<std::string> left_out;
};

struct Ensemble {
    EnsembleSpec spec;
    std::vector<EnsembleMember> members;
    /// Class whose mean probability is reported as the malignant score.
    std::optional<Index> malignant_class;
};

/// Trains every member on its own seeded subsample. Members run on up to `threads`
/// worker threads (0 = hardware concurrency); results do not depend on scheduling.
Ensemble train_ensemble(const EnsembleSpec& spec, const ModelConfig& base, std::span<const LabeledImage> data,
                        unsigned threads = 0);

/// Subsample kept by a member after leave-out, in original order.
std::vector<std::size_t> member_subset(const MemberConfig& member, std::span<const LabeledImage> data,
                                       Index num_classes);

struct EnsembleOutput {
    Eigen::MatrixXd member_probs;  // one row per member
    Eigen::VectorXd mean;
    Eigen::VectorXd stddev;  // population std (divisor N)
    double uncertainty = 0.0;           // sum_c stddev_c
    double weighted_uncertainty = 0.0;  // sum_c mean_c * stddev_c
    Index vote = 0;

    /// Working OOD scores: higher means more in-distribution.
    double id_score() const { return -uncertainty; }
    double weighted_id_score() const { return -weighted_uncertainty; }
};

/// Aggregates per-member probability vectors (rows). Majority vote over member argmaxes;
/// ties go to the highest mean probability, then the lowest class index.
EnsembleOutput aggregate(const Eigen::Ref<const Eigen::MatrixXd>& member_probs);

EnsembleOutput ensemble_predict(const Ensemble& ensemble, const Tensor& image);

/// Mean probability of the designated malignant class.
double malignant_score(const EnsembleOutput& output, std::optional<Index> malignant_class);
double ensemble_malignant_score(const Ensemble& ensemble, const Tensor& image);

/// Layout: ensemble.manifest, member_{i}/checkpoint(.bin), member_{i}/manifest.
void save_ensemble(const Ensemble& ensemble, const std::filesystem::path& dir);
Ensemble load_ensemble(const std::filesystem::path& dir);

std::string member_manifest_text(const EnsembleMember& member);
std::string ensemble_fingerprint(const Ensemble& ensemble);

}  // namespace oodx
