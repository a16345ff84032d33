#include "oodx/data.hpp"

#include "oodx/error.hpp"
#include "oodx/text.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>

namespace oodx {

// ---- images -----------------------------------------------------------------

namespace {

bool has_png_signature(const std::string& bytes) {
    return bytes.size() >= 8 && png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) == 0;
}

GrayImage decode_png(const std::string& bytes, const std::string& name) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
        throw FormatError("cannot decode PNG '" + name + "': " + img.message);
    img.format = PNG_FORMAT_GRAY;
    GrayImage out;
    out.width = img.width;
    out.height = img.height;
    out.pixels.resize(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
        png_image_free(&img);
        throw FormatError("cannot decode PNG '" + name + "': " + img.message);
    }
    return out;
}

GrayImage decode_pgm(const std::string& bytes, const std::string& name) {
    std::istringstream in(bytes);
    std::string magic;
    in >> magic;
    if (magic != "P5" && magic != "P2") throw FormatError("'" + name + "' is neither PNG nor PGM");
    auto next_int = [&]() -> long {
        while (in >> std::ws && in.peek() == '#') in.ignore(std::numeric_limits<std::streamsize>::max(), '\n');
        long v = -1;
        if (!(in >> v)) throw FormatError("truncated PGM header in '" + name + "'");
        return v;
    };
    GrayImage out;
    out.width = next_int();
    out.height = next_int();
    const long maxval = next_int();
    if (out.width <= 0 || out.height <= 0 || maxval <= 0 || maxval > 255)
        throw FormatError("unsupported PGM geometry or depth in '" + name + "'");
    const auto n = static_cast<std::size_t>(out.width * out.height);
    out.pixels.resize(n);
    if (magic == "P5") {
        in.get();  // single whitespace after maxval
        in.read(reinterpret_cast<char*>(out.pixels.data()), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in.gcount()) != n) throw FormatError("truncated PGM payload in '" + name + "'");
    } else {
        for (auto& p : out.pixels) p = static_cast<std::uint8_t>(next_int());
    }
    if (maxval != 255)
        for (auto& p : out.pixels) p = static_cast<std::uint8_t>(std::lround(255.0 * p / static_cast<double>(maxval)));
    return out;
}

}  // namespace

GrayImage read_image(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw InputError("image '" + path.string() + "' not found");
    const std::string bytes = read_file(path);
    return has_png_signature(bytes) ? decode_png(bytes, path.string()) : decode_pgm(bytes, path.string());
}

void write_png(const std::filesystem::path& path, const GrayImage& image) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&img, path.string().c_str(), 0, image.pixels.data(), 0, nullptr))
        throw InputError("cannot write PNG '" + path.string() + "': " + img.message);
}

void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
    std::string out = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
    out.append(reinterpret_cast<const char*>(image.pixels.data()), image.pixels.size());
    write_file(path, out);
}

Tensor to_tensor(const GrayImage& image) {
    Tensor t({1, image.height, image.width});
    for (std::size_t i = 0; i < image.pixels.size(); ++i) t[static_cast<Index>(i)] = image.pixels[i] / 255.0;
    return t;
}

GrayImage to_gray(const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 1) throw InputError("expected a [1,H,W] image, got " + shape_string(image.shape));
    GrayImage out{image.dim(2), image.dim(1), std::vector<std::uint8_t>(static_cast<std::size_t>(image.size()))};
    for (Index i = 0; i < image.size(); ++i)
        out.pixels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::lround(std::clamp(image[i], 0.0, 1.0) * 255.0));
    return out;
}

Tensor resize_bilinear(const Tensor& image, Index height, Index width) {
    if (image.rank() != 3 || image.dim(0) != 1) throw InputError("expected a [1,H,W] image, got " + shape_string(image.shape));
    if (height < 1 || width < 1) throw InputError("resize target must be positive");
    const Index in_h = image.dim(1), in_w = image.dim(2);
    if (in_h == height && in_w == width) return Tensor(image.shape, image.data);

    Tensor out({1, height, width});
    auto source = [](Index dst, Index in, Index outn, Index& lo, Index& hi, double& frac) {
        double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(in - 1));
        lo = static_cast<Index>(std::floor(s));
        hi = std::min(lo + 1, in - 1);
        frac = s - static_cast<double>(lo);
    };
    for (Index y = 0; y < height; ++y) {
        Index y0, y1;
        double fy;
        source(y, in_h, height, y0, y1, fy);
        for (Index x = 0; x < width; ++x) {
            Index x0, x1;
            double fx;
            source(x, in_w, width, x0, x1, fx);
            const double top = (1 - fx) * image[y0 * in_w + x0] + fx * image[y0 * in_w + x1];
            const double bottom = (1 - fx) * image[y1 * in_w + x0] + fx * image[y1 * in_w + x1];
            out[y * width + x] = (1 - fy) * top + fy * bottom;
        }
    }
    return out;
}

// ---- manifests ----------------------------------------------------------------

std::string to_string(Split split) {
    switch (split) {
        case Split::train: return "train";
        case Split::calibrate: return "calibrate";
        case Split::test: return "test";
    }
    return "?";
}

Split parse_split(const std::string& text) {
    if (text == "train") return Split::train;
    if (text == "calibrate") return Split::calibrate;
    if (text == "test") return Split::test;
    throw InputError("unknown split '" + text + "' (train, calibrate, test)");
}

namespace {

bool is_index(const std::string& s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}

}  // namespace

DatasetManifest DatasetManifest::read(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw InputError("manifest '" + path.string() + "' not found");
    DatasetManifest m;
    m.root = path.parent_path();
    const auto lines = split(read_file(path), '\n');
    if (lines.empty() || trim(lines[0]) != "path,label,split")
        throw FormatError("manifest '" + path.string() + "' must start with the header path,label,split");

    std::map<std::string, Split> seen;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const std::string line = trim(lines[i]);
        if (line.empty()) continue;
        const int line_no = static_cast<int>(i + 1);
        const auto fields = split(line, ',');
        const std::string where = "manifest '" + path.string() + "' line " + std::to_string(line_no);
        if (fields.size() != 3) throw DataError(where + ": expected 3 fields");
        ManifestRow row{trim(fields[0]), trim(fields[1]), Split::train, line_no};
        try {
            row.split = parse_split(trim(fields[2]));
        } catch (const InputError& e) {
            throw DataError(where + ": " + e.what());
        }
        if (row.path.empty() || row.label.empty()) throw DataError(where + ": empty path or label");
        auto [it, inserted] = seen.emplace(row.path, row.split);
        if (!inserted && it->second != row.split)
            throw DataError(where + ": '" + row.path + "' appears in both " + to_string(it->second) + " and " +
                            to_string(row.split) + " splits");
        m.rows.push_back(std::move(row));
    }

    const bool numeric = std::all_of(m.rows.begin(), m.rows.end(), [](const ManifestRow& r) { return is_index(r.label); });
    std::set<std::string> names;
    for (const auto& r : m.rows) names.insert(r.label);
    Index next = 0;
    for (const auto& name : names) m.classes[name] = numeric ? static_cast<Index>(parse_int(name)) : next++;
    return m;
}

void DatasetManifest::write(const std::filesystem::path& path) const {
    std::ostringstream os;
    os << "path,label,split\n";
    for (const auto& r : rows) os << r.path << ',' << r.label << ',' << to_string(r.split) << '\n';
    write_file(path, os.str());
}

Index DatasetManifest::label_index(const ManifestRow& row) const {
    auto it = classes.find(row.label);
    if (it == classes.end()) throw DataError("line " + std::to_string(row.line) + ": unknown label '" + row.label + "'");
    return it->second;
}

Dataset load_dataset(const DatasetManifest& manifest, Index size, std::optional<Split> split,
                     std::optional<Index> num_classes) {
    Dataset out;
    for (const auto& row : manifest.rows) {
        if (split && row.split != *split) continue;
        const std::string where = "manifest line " + std::to_string(row.line);
        const Index label = manifest.label_index(row);
        if (num_classes && label >= *num_classes)
            throw DataError(where + ": unknown label '" + row.label + "' (model has " + std::to_string(*num_classes) +
                            " classes)");
        const auto file = manifest.root / row.path;
        if (!std::filesystem::exists(file)) throw DataError(where + ": missing file '" + file.string() + "'");
        GrayImage img;
        try {
            img = read_image(file);
        } catch (const Error& e) {
            throw DataError(where + ": " + e.what());
        }
        out.push_back({row.path, resize_bilinear(to_tensor(img), size, size), label});
    }
    return out;
}

Dataset load_dataset(const std::filesystem::path& manifest_path, Index size, std::optional<Split> split) {
    return load_dataset(DatasetManifest::read(manifest_path), size, split);
}

DatasetManifest write_dataset(const Dataset& data, const std::filesystem::path& dir, Split split,
                              const std::string& prefix) {
    std::filesystem::create_directories(dir);
    DatasetManifest m;
    m.root = dir;
    int line = 2;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const std::string name = prefix + std::to_string(i) + ".png";
        write_png(dir / name, to_gray(data[i].image));
        m.rows.push_back({name, std::to_string(data[i].label), split, line++});
    }
    m.write(dir / "manifest.csv");
    return m;
}

// ---- IDX ------------------------------------------------------------------

namespace {

std::uint32_t be32(const std::string& b, std::size_t at) {
    return (static_cast<std::uint32_t>(static_cast<unsigned char>(b[at])) << 24) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 1])) << 16) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 2])) << 8) |
           static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 3]));
}

}  // namespace

Dataset parse_idx(const std::string& image_bytes, const std::string& label_bytes) {
    if (image_bytes.size() < 16) throw FormatError("IDX image file is empty or truncated");
    if (label_bytes.size() < 8) throw FormatError("IDX label file is empty or truncated");
    if (be32(image_bytes, 0) != 0x00000803u) throw FormatError("bad IDX image magic (expected 0x00000803)");
    if (be32(label_bytes, 0) != 0x00000801u) throw FormatError("bad IDX label magic (expected 0x00000801)");
    const std::size_t count = be32(image_bytes, 4);
    const std::size_t rows = be32(image_bytes, 8);
    const std::size_t cols = be32(image_bytes, 12);
    const std::size_t label_count = be32(label_bytes, 4);
    if (count != label_count)
        throw FormatError("IDX count mismatch: " + std::to_string(count) + " images, " + std::to_string(label_count) +
                          " labels");
    if (image_bytes.size() < 16 + count * rows * cols) throw FormatError("IDX image payload is truncated");
    if (label_bytes.size() < 8 + count) throw FormatError("IDX label payload is truncated");

    Dataset out;
    out.reserve(count);
    for (std::size_t n = 0; n < count; ++n) {
        Tensor img({1, static_cast<Index>(rows), static_cast<Index>(cols)});
        const std::size_t base = 16 + n * rows * cols;
        for (std::size_t p = 0; p < rows * cols; ++p)
            img[static_cast<Index>(p)] = static_cast<unsigned char>(image_bytes[base + p]) / 255.0;
        out.push_back({"idx:" + std::to_string(n), std::move(img), static_cast<unsigned char>(label_bytes[8 + n])});
    }
    return out;
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
    return parse_idx(read_file(images), read_file(labels));
}

// ---- corruption ---------------------------------------------------------------

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2));
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

void CorruptionConfig::validate() const {
    if (!dark_region && !blur && !noise) throw ConfigError("corruption needs at least one operation enabled");
    if (dark_count_min < 0 || dark_count_min > dark_count_max) throw ConfigError("dark region count range is invalid");
    if (!(dark_size_min >= 0.0 && dark_size_min <= dark_size_max && dark_size_max <= 1.0))
        throw ConfigError("dark region size range must lie in [0,1]");
    if (!(blur_sigma_min >= 0.0 && blur_sigma_min <= blur_sigma_max)) throw ConfigError("blur sigma range is invalid");
    if (!(noise_std_min >= 0.0 && noise_std_min <= noise_std_max)) throw ConfigError("noise std range is invalid");
}

Eigen::VectorXd gaussian_kernel(double sigma) {
    if (!(sigma >= 0.0)) throw InputError("blur sigma must be non-negative");
    if (sigma == 0.0) return Eigen::VectorXd::Ones(1);
    const auto radius = static_cast<Index>(std::ceil(3.0 * sigma));
    Eigen::VectorXd k(2 * radius + 1);
    for (Index i = -radius; i <= radius; ++i) k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    return k / k.sum();
}

Tensor gaussian_blur(const Tensor& image, double sigma) {
    const Eigen::VectorXd k = gaussian_kernel(sigma);
    const Index r = (k.size() - 1) / 2;
    const Index h = image.dim(1), w = image.dim(2);
    Tensor tmp(image.shape), out(image.shape);
    for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
            double acc = 0.0;
            for (Index i = -r; i <= r; ++i) acc += k[i + r] * image[y * w + std::clamp<Index>(x + i, 0, w - 1)];
            tmp[y * w + x] = acc;
        }
    for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
            double acc = 0.0;
            for (Index i = -r; i <= r; ++i) acc += k[i + r] * tmp[std::clamp<Index>(y + i, 0, h - 1) * w + x];
            out[y * w + x] = acc;
        }
    return out;
}

Tensor corrupt(const Tensor& image, const CorruptionConfig& config, std::uint64_t image_seed) {
    config.validate();
    if (image.rank() != 3 || image.dim(0) != 1) throw InputError("expected a [1,H,W] image, got " + shape_string(image.shape));
    std::mt19937_64 rng(mix_seed(config.seed, image_seed));
    auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    const Index h = image.dim(1), w = image.dim(2);
    Tensor out(image.shape, image.data);

    if (config.dark_region) {
        const int count = std::uniform_int_distribution<int>(config.dark_count_min, config.dark_count_max)(rng);
        for (int n = 0; n < count; ++n) {
            const double fh = config.dark_size_min == config.dark_size_max ? config.dark_size_min
                                                                           : uniform(config.dark_size_min, config.dark_size_max);
            const double fw = config.dark_size_min == config.dark_size_max ? config.dark_size_min
                                                                           : uniform(config.dark_size_min, config.dark_size_max);
            const Index rh = std::clamp<Index>(std::lround(fh * h), 1, h);
            const Index rw = std::clamp<Index>(std::lround(fw * w), 1, w);
            const Index y0 = std::uniform_int_distribution<Index>(0, h - rh)(rng);
            const Index x0 = std::uniform_int_distribution<Index>(0, w - rw)(rng);
            for (Index y = y0; y < y0 + rh; ++y)
                for (Index x = x0; x < x0 + rw; ++x) out[y * w + x] = 0.0;
        }
    }
    if (config.blur) {
        const double sigma = config.blur_sigma_min == config.blur_sigma_max
                                 ? config.blur_sigma_min
                                 : uniform(config.blur_sigma_min, config.blur_sigma_max);
        out = gaussian_blur(out, sigma);
    }
    if (config.noise) {
        const double sd = config.noise_std_min == config.noise_std_max ? config.noise_std_min
                                                                       : uniform(config.noise_std_min, config.noise_std_max);
        if (sd > 0.0) {
            std::normal_distribution<double> normal(0.0, sd);
            for (Index i = 0; i < out.size(); ++i) out[i] += normal(rng);
        }
    }
    out.data = out.data.cwiseMax(0.0).cwiseMin(1.0);
    return out;
}

// ---- synthetic data -------------------------------------------------------------

Dataset make_synthetic(Index classes, Index per_class, std::uint64_t seed, Index size) {
    if (classes < 1 || per_class < 1 || size < 4) throw InputError("synthetic data needs classes, count >= 1 and size >= 4");
    std::mt19937_64 rng(mix_seed(seed, 0x51A7));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> speckle(0.0, 0.04);
    const double s = static_cast<double>(size);

    Dataset out;
    for (Index n = 0; n < per_class; ++n)
        for (Index c = 0; c < classes; ++c) {
            // Blob radius grows with the class index; centre and radius jitter a little.
            const double frac = classes == 1 ? 0.0 : static_cast<double>(c) / static_cast<double>(classes - 1);
            const double radius = s * (0.10 + 0.16 * frac) * (0.95 + 0.1 * unit(rng));
            const double cy = s * (0.45 + 0.1 * unit(rng));
            const double cx = s * (0.45 + 0.1 * unit(rng));
            Tensor img({1, size, size});
            for (Index y = 0; y < size; ++y)
                for (Index x = 0; x < size; ++x) {
                    const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
                    const double blob = 0.75 * std::exp(-(dy * dy + dx * dx) / (2.0 * radius * radius));
                    img[y * size + x] = std::clamp(0.1 + blob + speckle(rng), 0.0, 1.0);
                }
            out.push_back({"synth_" + std::to_string(n * classes + c), std::move(img), c});
        }
    return out;
}

Dataset make_uniform_noise(Index count, std::uint64_t seed, Index size) {
    if (count < 1 || size < 1) throw InputError("noise data needs count and size >= 1");
    std::mt19937_64 rng(mix_seed(seed, 0x0015E));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Dataset out;
    for (Index n = 0; n < count; ++n) {
        Tensor img({1, size, size});
        for (Index i = 0; i < img.size(); ++i) img[i] = unit(rng);
        out.push_back({"noise_" + std::to_string(n), std::move(img), 0});
    }
    return out;
}

}  // namespace oodx
