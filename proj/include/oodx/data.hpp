#pragma once

#include "oodx/sample.hpp"
#include "oodx/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace oodx {

// ---- images -----------------------------------------------------------------

/// 8-bit grayscale raster, row-major.
struct GrayImage {
    Index width = 0;
    Index height = 0;
    std::vector<std::uint8_t> pixels;
};

/// Decodes 8-bit PNG (any colour type, converted to gray) or binary/ASCII PGM.
GrayImage read_image(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const GrayImage& image);
void write_pgm(const std::filesystem::path& path, const GrayImage& image);

/// [1,H,W] tensor with values v/255.
Tensor to_tensor(const GrayImage& image);
/// Rounds clamp(v,0,1)*255.
GrayImage to_gray(const Tensor& image);

/// Bilinear resize of a [1,H,W] tensor with half-pixel centres and edge clamping.
Tensor resize_bilinear(const Tensor& image, Index height, Index width);

// ---- manifests ----------------------------------------------------------------

enum class Split { train, calibrate, test };
std::string to_string(Split split);
Split parse_split(const std::string& text);

struct ManifestRow {
    std::string path;   // relative to the manifest's directory
    std::string label;  // class index or class name
    Split split = Split::train;
    int line = 0;
};

/// CSV with header `path,label,split`.
///
/// Labels that are all non-negative integers are used as indices directly; otherwise
/// names are indexed in sorted order. A path may appear in only one split.
struct DatasetManifest {
    std::filesystem::path root;
    std::vector<ManifestRow> rows;
    std::map<std::string, Index> classes;
    std::optional<Index> malignant_class;

    static DatasetManifest read(const std::filesystem::path& path);
    void write(const std::filesystem::path& path) const;
    Index label_index(const ManifestRow& row) const;
};

/// Loads the rows of `manifest` (optionally one split) resized to size x size, in
/// manifest order. Row-level failures throw DataError naming the row's line.
Dataset load_dataset(const DatasetManifest& manifest, Index size, std::optional<Split> split = std::nullopt,
                     std::optional<Index> num_classes = std::nullopt);
Dataset load_dataset(const std::filesystem::path& manifest_path, Index size,
                     std::optional<Split> split = std::nullopt);

/// Writes each image as `<dir>/<prefix><i>.png` and a manifest at `<dir>/manifest.csv`.
DatasetManifest write_dataset(const Dataset& data, const std::filesystem::path& dir, Split split,
                              const std::string& prefix = "img_");

// ---- IDX ------------------------------------------------------------------

/// Standard big-endian IDX pair (magic 0x00000803 for images, 0x00000801 for labels).
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
Dataset parse_idx(const std::string& image_bytes, const std::string& label_bytes);

// ---- corruption ---------------------------------------------------------------

/// Occlusion, blur and noise applied in that fixed order.
struct CorruptionConfig {
    std::uint64_t seed = 0;
    bool dark_region = true;
    bool blur = true;
    bool noise = true;
    int dark_count_min = 1;
    int dark_count_max = 3;
    // Rectangle side as a fraction of the image side.
    double dark_size_min = 0.10;
    double dark_size_max = 0.30;
    double blur_sigma_min = 1.0;
    double blur_sigma_max = 3.0;
    double noise_std_min = 0.05;
    double noise_std_max = 0.15;

    void validate() const;
};

/// Output is clamped to [0,1] and determined by (config.seed, image_seed).
Tensor corrupt(const Tensor& image, const CorruptionConfig& config, std::uint64_t image_seed);

/// Normalised 1-D Gaussian with radius ceil(3 sigma); {1} for sigma == 0.
Eigen::VectorXd gaussian_kernel(double sigma);
/// Separable blur with clamp-to-edge borders.
Tensor gaussian_blur(const Tensor& image, double sigma);

// ---- synthetic data -------------------------------------------------------------

/// Blob images, one class per blob radius, plus speckle. Labels cycle 0,1,..,K-1.
Dataset make_synthetic(Index classes, Index per_class, std::uint64_t seed, Index size = 32);

/// Independent uniform [0,1] pixels; label 0.
Dataset make_uniform_noise(Index count, std::uint64_t seed, Index size = 32);

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace oodx
