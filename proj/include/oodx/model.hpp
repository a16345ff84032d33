#pragma once

#include "oodx/optim.hpp"
#include "oodx/sample.hpp"
#include "oodx/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace oodx {

inline constexpr int kExitCount = 3;

/// Architecture of the multi-exit classifier.
///
/// The trunk is `channels.size()` blocks of conv(kernel_size, same padding), ReLU and
/// 2x2 max-pooling, followed by FC(hidden), ReLU, FC(num_classes). Two auxiliary heads
/// tap the trunk after the blocks listed in `exit_after` (1-based); each head is
/// conv(exit_channels, 3x3, exit_padding), ReLU, 2x2 max-pool and FC(num_classes).
struct ModelConfig {
    Index input_size = 128;
    std::vector<Index> channels{16, 32, 64, 128, 128};
    Index kernel_size = 3;
    Index hidden = 256;
    Index num_classes = 3;
    std::vector<Index> exit_after{2, 4};
    Index exit_channels = 128;
    Padding exit_padding = Padding::valid;
    OddPooling odd_pooling = OddPooling::error;
    std::array<double, kExitCount> loss_weights{0.5, 0.5, 1.0};
    std::uint64_t seed = 0;

    /// Throws ConfigError if the config is inconsistent or the spatial sizes do not work out.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

/// Logits of every exit; index 0 and 1 are the auxiliary heads, index 2 the final output.
struct ExitLogits {
    std::array<Eigen::VectorXd, kExitCount> exits;

    const Eigen::VectorXd& operator[](std::size_t e) const { return exits[e]; }
    const Eigen::VectorXd& final_logits() const { return exits[kExitCount - 1]; }
};

class MultiExitModel {
public:
    /// Seeded He-normal initialisation, zero biases.
    explicit MultiExitModel(ModelConfig config);

    const ModelConfig& config() const { return config_; }

    /// Inference for all exits; records no graph, safe to call concurrently.
    ExitLogits forward(const Tensor& image) const;
    /// Final exit only, skipping the auxiliary heads.
    Eigen::VectorXd forward_final(const Tensor& image) const;
    /// Training forward pass: the returned logits are connected to the parameters.
    std::array<Var, kExitCount> forward_graph(const Tensor& image) const;

    std::span<Var> parameters() { return params_; }
    std::span<const Var> parameters() const { return params_; }
    const Var& parameter(const std::string& name) const;

    Index parameter_count() const;
    /// Content hash of the float32-rounded parameters, stable across save/load.
    std::string fingerprint() const;

private:
    struct Layer {
        std::size_t weight = 0;
        std::size_t bias = 0;
    };
    struct Head {
        Layer conv;
        Layer fc;
    };

    Var run_trunk(const Tensor& image, std::array<Var, kExitCount - 1>* taps) const;
    Var run_head(std::size_t head, const Var& features) const;
    void check_input(const Tensor& image) const;
    Layer add_layer(const std::string& name, Shape weight_shape, Index fan_in, std::uint64_t& stream);

    ModelConfig config_;
    std::vector<Var> params_;
    std::vector<Layer> blocks_;
    Layer fc1_, fc2_;
    std::array<Head, kExitCount - 1> heads_;
};

/// Weighted sum of the per-exit cross entropies: sum_e weights[e] * CE(exit e, label).
Var multi_exit_loss(const std::array<Var, kExitCount>& logits, Index label,
                    const std::array<double, kExitCount>& weights);

struct TrainOptions {
    int epochs = 30;
    int batch_size = 16;
    OptimizerKind optimizer = OptimizerKind::adam;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
};

struct TrainHistory {
    /// Mean per-sample total loss for each epoch.
    std::vector<double> epoch_loss;
};

/// Mini-batch training on the weighted three-exit loss. Samples are reshuffled each
/// epoch with a Fisher-Yates pass driven only by `options.seed`.
TrainHistory train(MultiExitModel& model, std::span<const LabeledImage> data, const TrainOptions& options);

/// Fraction of samples whose final-exit argmax equals the label.
double accuracy(const MultiExitModel& model, std::span<const LabeledImage> data);

Index argmax(const Eigen::Ref<const Eigen::VectorXd>& values);

// Checkpoints: a key-value manifest at `path` and a little-endian float32 payload next to it
// (`<path>.bin`). See docs/checkpoint_format.md.
inline constexpr int kCheckpointVersion = 1;

void save(const MultiExitModel& model, const std::filesystem::path& path);
MultiExitModel load(const std::filesystem::path& path);

std::string config_to_text(const ModelConfig& config);

}  // namespace oodx
