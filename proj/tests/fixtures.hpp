#pragma once

#include "oodx/model.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace fixtures {

/// Five blocks on 16x16: the trunk ends at 1x1, so exit heads need same padding and
/// odd-size pooling.
inline oodx::ModelConfig tiny_config(std::uint64_t seed = 1) {
    oodx::ModelConfig c;
    c.input_size = 16;
    c.channels = {3, 4, 4, 4, 4};
    c.hidden = 6;
    c.exit_channels = 3;
    c.exit_padding = oodx::Padding::same;
    c.odd_pooling = oodx::OddPooling::pad;
    c.seed = seed;
    return c;
}

inline oodx::ModelConfig small_config(std::uint64_t seed = 1) {
    oodx::ModelConfig c;
    c.input_size = 32;
    c.channels = {8, 16, 16, 32, 32};
    c.hidden = 32;
    c.exit_channels = 16;
    c.exit_padding = oodx::Padding::same;
    c.odd_pooling = oodx::OddPooling::pad;
    c.seed = seed;
    return c;
}

inline oodx::Tensor random_image(oodx::Index size, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    oodx::Tensor t({1, size, size});
    for (oodx::Index i = 0; i < t.size(); ++i) t[i] = u(rng);
    return t;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("oodx_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace fixtures
