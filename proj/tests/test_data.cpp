#include <doctest.h>

#include "fixtures.hpp"
#include "oodx/data.hpp"
#include "oodx/error.hpp"
#include "oodx/text.hpp"

#include <cmath>
#include <numeric>

using namespace oodx;
namespace fs = std::filesystem;

namespace {

std::string be32(std::uint32_t v) {
    std::string s(4, '\0');
    for (int i = 0; i < 4; ++i) s[static_cast<std::size_t>(i)] = static_cast<char>((v >> (24 - 8 * i)) & 0xFF);
    return s;
}

GrayImage constant_gray(Index w, Index h, std::uint8_t v) {
    return GrayImage{w, h, std::vector<std::uint8_t>(static_cast<std::size_t>(w * h), v)};
}

}  // namespace

TEST_CASE("IDX parsing from hand-built bytes") {
    const std::string images = be32(0x00000803) + be32(2) + be32(2) + be32(2) + std::string("\x00\xff\x80\x40", 4) +
                               std::string("\x10\x20\x30\xfe", 4);
    const std::string labels = be32(0x00000801) + be32(2) + std::string("\x07\x01", 2);
    const Dataset d = parse_idx(images, labels);
    REQUIRE(d.size() == 2);
    CHECK(d[0].label == 7);
    CHECK(d[1].label == 1);
    CHECK(d[0].image.shape == Shape{1, 2, 2});
    CHECK(d[0].image[0] == 0.0);
    CHECK(d[0].image[1] == 1.0);
    CHECK(d[0].image[2] == 128.0 / 255.0);
    CHECK(d[0].image[3] == 64.0 / 255.0);
    CHECK(d[1].image[3] == 254.0 / 255.0);
    CHECK(d[1].id == "idx:1");

    CHECK_THROWS_AS(parse_idx("", labels), FormatError);
    CHECK_THROWS_AS(parse_idx(images, ""), FormatError);
    CHECK_THROWS_AS(parse_idx(be32(0x00000801) + images.substr(4), labels), FormatError);
    CHECK_THROWS_AS(parse_idx(images, be32(0x00000801) + be32(3) + std::string("\x07\x01\x02", 3)), FormatError);
    CHECK_THROWS_AS(parse_idx(images.substr(0, images.size() - 1), labels), FormatError);
    CHECK_THROWS_AS(parse_idx(images, labels.substr(0, labels.size() - 1)), FormatError);

    const auto dir = fixtures::scratch_dir("idx");
    write_file(dir / "img", images);
    write_file(dir / "lbl", labels);
    CHECK(load_idx(dir / "img", dir / "lbl").size() == 2);
    write_file(dir / "empty", "");
    CHECK_THROWS_AS(load_idx(dir / "empty", dir / "lbl"), FormatError);
}

TEST_CASE("bilinear resize of a checkerboard") {
    const Tensor board({1, 2, 2}, {0, 1, 1, 0});
    const Tensor out = resize_bilinear(board, 4, 4);
    // half-pixel centres: output row i samples source row i/2 - 1/4, clamped to [0,1]
    Eigen::Matrix<double, 4, 2> w;
    w << 1, 0, 0.75, 0.25, 0.25, 0.75, 0, 1;
    Eigen::Matrix2d c;
    c << 0, 1, 1, 0;
    const Eigen::Matrix4d expect = w * c * w.transpose();
    for (Index i = 0; i < 4; ++i)
        for (Index j = 0; j < 4; ++j) CHECK(std::abs(out[i * 4 + j] - expect(i, j)) <= 1e-15);
    CHECK(out[5] == 0.375);

    // same size is the identity, constants stay constant
    const Tensor img = fixtures::random_image(5, 3);
    CHECK(resize_bilinear(img, 5, 5).data == img.data);
    const Tensor flat = resize_bilinear(Tensor::filled({1, 7, 3}, 0.4), 4, 9);
    CHECK((flat.data.array() - 0.4).abs().maxCoeff() <= 1e-15);
}

TEST_CASE("image files and manifests") {
    const auto dir = fixtures::scratch_dir("manifest");
    write_png(dir / "a.png", constant_gray(6, 4, 51));
    write_pgm(dir / "b.pgm", constant_gray(3, 3, 255));
    GrayImage grad{4, 1, {0, 10, 20, 30}};
    write_png(dir / "c.png", grad);
    const GrayImage back = read_image(dir / "c.png");
    CHECK(back.width == 4);
    CHECK(back.pixels == grad.pixels);
    CHECK(read_image(dir / "b.pgm").pixels == std::vector<std::uint8_t>(9, 255));
    write_file(dir / "ascii.pgm", "P2\n# comment\n2 1\n255\n7 9\n");
    CHECK(read_image(dir / "ascii.pgm").pixels == std::vector<std::uint8_t>{7, 9});

    write_file(dir / "manifest.csv", "path,label,split\na.png,benign,train\nb.pgm,malignant,train\nc.png,benign,test\n");
    const auto m = DatasetManifest::read(dir / "manifest.csv");
    CHECK(m.rows.size() == 3);
    CHECK(m.classes.at("benign") == 0);
    CHECK(m.classes.at("malignant") == 1);

    const Dataset all = load_dataset(m, 8);
    REQUIRE(all.size() == 3);
    for (const auto& s : all) CHECK(s.image.shape == Shape{1, 8, 8});
    CHECK((all[0].image.data.array() - 51.0 / 255.0).abs().maxCoeff() <= 1e-15);
    CHECK(all[1].label == 1);
    CHECK(all[0].id == "a.png");
    CHECK(load_dataset(m, 8, Split::test).size() == 1);
    CHECK(load_dataset(dir / "manifest.csv", 4).size() == 3);

    write_file(dir / "numeric.csv", "path,label,split\na.png,2,train\nb.pgm,0,calibrate\n");
    const auto numeric = DatasetManifest::read(dir / "numeric.csv");
    CHECK(load_dataset(numeric, 4)[0].label == 2);
    CHECK_THROWS_AS(load_dataset(numeric, 4, std::nullopt, Index{2}), DataError);
}

TEST_CASE("manifest row errors carry the line number") {
    const auto dir = fixtures::scratch_dir("manifest_err");
    write_png(dir / "a.png", constant_gray(2, 2, 0));
    auto expect_line = [&](const std::string& body, const std::string& needle) {
        write_file(dir / "m.csv", "path,label,split\n" + body);
        try {
            load_dataset(dir / "m.csv", 4);
            FAIL("expected DataError");
        } catch (const DataError& e) {
            CHECK(std::string(e.what()).find(needle) != std::string::npos);
        }
    };
    expect_line("a.png,0,train\nmissing.png,0,train\n", "line 3");
    expect_line("a.png,0,train\na.png,0,test\n", "line 3");
    expect_line("a.png,0,elsewhere\n", "line 2");
    expect_line("a.png,0\n", "line 2");
    write_file(dir / "junk.png", "not an image");
    expect_line("a.png,0,train\na.png,0,train\njunk.png,1,train\n", "line 4");
    write_file(dir / "hdr.csv", "file,label\n");
    CHECK_THROWS_AS(DatasetManifest::read(dir / "hdr.csv"), FormatError);
    CHECK_THROWS_AS(DatasetManifest::read(dir / "none.csv"), InputError);
}

TEST_CASE("write_dataset round trip") {
    const auto dir = fixtures::scratch_dir("write_dataset");
    const Dataset d = make_synthetic(3, 2, 4, 12);
    const auto m = write_dataset(d, dir, Split::calibrate);
    CHECK(fs::exists(dir / "manifest.csv"));
    const Dataset back = load_dataset(dir / "manifest.csv", 12);
    REQUIRE(back.size() == d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        CHECK(back[i].label == d[i].label);
        CHECK((back[i].image.data - d[i].image.data).cwiseAbs().maxCoeff() <= 0.5 / 255.0 + 1e-12);
    }
}

TEST_CASE("gaussian kernel and blur") {
    for (double sigma : {0.5, 1.0, 2.3, 3.0}) {
        const Eigen::VectorXd k = gaussian_kernel(sigma);
        CHECK(k.size() == 2 * static_cast<Index>(std::ceil(3 * sigma)) + 1);
        CHECK(std::abs(k.sum() - 1.0) <= 1e-12);
        CHECK(k == k.reverse());
        const Tensor flat = Tensor::filled({1, 9, 11}, 0.3);
        CHECK((gaussian_blur(flat, sigma).data.array() - 0.3).abs().maxCoeff() <= 1e-12);
    }
    CHECK(gaussian_kernel(0.0).size() == 1);
    const Tensor img = fixtures::random_image(6, 1);
    CHECK(gaussian_blur(img, 0.0).data == img.data);
    CHECK_THROWS_AS(gaussian_kernel(-1.0), InputError);
}

TEST_CASE("corruption") {
    const Tensor img = fixtures::random_image(20, 5);
    CorruptionConfig noise_only;
    noise_only.dark_region = false;
    noise_only.blur = false;
    noise_only.noise_std_min = noise_only.noise_std_max = 0.0;
    CHECK(corrupt(img, noise_only, 3).data == img.data);

    CorruptionConfig black;
    black.blur = black.noise = false;
    black.dark_count_min = black.dark_count_max = 1;
    black.dark_size_min = black.dark_size_max = 1.0;
    CHECK(corrupt(img, black, 9).data.cwiseAbs().maxCoeff() == 0.0);

    CorruptionConfig all;
    all.seed = 12;
    const Tensor a = corrupt(img, all, 4), b = corrupt(img, all, 4), c = corrupt(img, all, 5);
    CHECK(a.data == b.data);
    CHECK(a.data != c.data);
    CHECK(a.data.minCoeff() >= 0.0);
    CHECK(a.data.maxCoeff() <= 1.0);
    CHECK(a.shape == img.shape);
    auto reseeded = all;
    reseeded.seed = 13;
    CHECK(corrupt(img, reseeded, 4).data != a.data);

    // constant images survive blur alone
    CorruptionConfig blur_only;
    blur_only.dark_region = blur_only.noise = false;
    const Tensor flat = Tensor::filled({1, 10, 10}, 0.6);
    CHECK((corrupt(flat, blur_only, 1).data.array() - 0.6).abs().maxCoeff() <= 1e-12);

    CorruptionConfig none;
    none.dark_region = none.blur = none.noise = false;
    CHECK_THROWS_AS(none.validate(), ConfigError);
    CorruptionConfig bad;
    bad.noise_std_min = 0.3;
    bad.noise_std_max = 0.1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = CorruptionConfig{};
    bad.dark_size_max = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("synthetic blobs") {
    const Dataset a = make_synthetic(3, 30, 8, 32), b = make_synthetic(3, 30, 8, 32);
    REQUIRE(a.size() == 90);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].image.data == b[i].image.data);
        CHECK(a[i].label == static_cast<Index>(i % 3));
        CHECK(a[i].image.data.minCoeff() >= 0.0);
        CHECK(a[i].image.data.maxCoeff() <= 1.0);
    }
    CHECK(make_synthetic(3, 30, 9, 32)[0].image.data != a[0].image.data);

    // per-class mean intensity is separated by at least three within-class std
    std::array<std::vector<double>, 3> means;
    for (const auto& s : a) means[static_cast<std::size_t>(s.label)].push_back(s.image.data.mean());
    std::array<double, 3> mu{}, sd{};
    for (std::size_t c = 0; c < 3; ++c) {
        mu[c] = std::accumulate(means[c].begin(), means[c].end(), 0.0) / static_cast<double>(means[c].size());
        double v = 0.0;
        for (double x : means[c]) v += (x - mu[c]) * (x - mu[c]);
        sd[c] = std::sqrt(v / static_cast<double>(means[c].size()));
    }
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = i + 1; j < 3; ++j) {
            INFO("classes " << i << " and " << j);
            CHECK(std::abs(mu[i] - mu[j]) >= 3.0 * std::max(sd[i], sd[j]));
        }

    const Dataset noise = make_uniform_noise(5, 1, 16);
    CHECK(noise.size() == 5);
    CHECK(noise[0].image.shape == Shape{1, 16, 16});
    CHECK(noise[0].image.data.minCoeff() >= 0.0);
    CHECK(noise[0].image.data.maxCoeff() <= 1.0);
}
