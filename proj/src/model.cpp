#include "oodx/model.hpp"

#include "oodx/error.hpp"
#include "oodx/text.hpp"

#include <bit>
#include <cmath>
#include <random>
#include <sstream>

namespace oodx {

namespace {

template <typename T>
std::string join(const std::vector<T>& values) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) out += ',';
        if constexpr (std::is_floating_point_v<T>)
            out += format_double(values[i]);
        else
            out += std::to_string(values[i]);
    }
    return out;
}

std::vector<Index> parse_index_list(const std::string& text) {
    std::vector<Index> out;
    for (const auto& part : split(text, ',')) out.push_back(static_cast<Index>(parse_int(part)));
    return out;
}

Index pooled(Index size, OddPooling odd, const std::string& where) {
    if (size % 2 != 0 && odd == OddPooling::error)
        throw ConfigError(where + ": max-pooling an odd spatial size " + std::to_string(size) +
                          " (set odd_pooling = pad or change the input size)");
    return (size + 1) / 2;
}

// Spatial size of the trunk output after each block.
std::vector<Index> trunk_sizes(const ModelConfig& c) {
    std::vector<Index> sizes;
    Index s = c.input_size;
    for (std::size_t b = 0; b < c.channels.size(); ++b) {
        s = pooled(s, c.odd_pooling, "block " + std::to_string(b + 1));
        sizes.push_back(s);
    }
    return sizes;
}

Index head_output_size(const ModelConfig& c, Index in_size, std::size_t head) {
    const std::string where = "exit head " + std::to_string(head + 1);
    Index s = in_size;
    if (c.exit_padding == Padding::valid) {
        if (s < 3)
            throw ConfigError(where + ": valid 3x3 conv on a " + std::to_string(s) + "x" + std::to_string(s) +
                              " feature map (set exit_padding = same or enlarge the input)");
        s -= 2;
    }
    return pooled(s, c.odd_pooling, where);
}

const char* padding_name(Padding p) { return p == Padding::valid ? "valid" : "same"; }
const char* odd_name(OddPooling p) { return p == OddPooling::error ? "error" : "pad"; }

}  // namespace

void ModelConfig::validate() const {
    if (input_size < 1) throw ConfigError("input_size must be positive");
    if (channels.empty()) throw ConfigError("at least one conv block is required");
    for (Index ch : channels)
        if (ch < 1) throw ConfigError("conv channel counts must be positive");
    if (kernel_size < 1) throw ConfigError("kernel_size must be positive");
    if (hidden < 1 || exit_channels < 1) throw ConfigError("hidden and exit_channels must be positive");
    if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
    if (exit_after.size() != kExitCount - 1)
        throw ConfigError("exactly " + std::to_string(kExitCount - 1) + " auxiliary exits are required, got " +
                          std::to_string(exit_after.size()));
    for (std::size_t i = 0; i < exit_after.size(); ++i) {
        if (exit_after[i] < 1 || exit_after[i] >= static_cast<Index>(channels.size()))
            throw ConfigError("exit_after entries must lie in [1, " + std::to_string(channels.size() - 1) + "]");
        if (i > 0 && exit_after[i] <= exit_after[i - 1])
            throw ConfigError("exit_after entries must be strictly increasing");
    }
    bool any_positive = false;
    for (double w : loss_weights) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and non-negative");
        any_positive = any_positive || w > 0.0;
    }
    if (!any_positive) throw ConfigError("at least one loss weight must be positive");

    const auto sizes = trunk_sizes(*this);
    for (std::size_t h = 0; h < exit_after.size(); ++h)
        head_output_size(*this, sizes[static_cast<std::size_t>(exit_after[h] - 1)], h);
}

MultiExitModel::Layer MultiExitModel::add_layer(const std::string& name, Shape weight_shape, Index fan_in,
                                                std::uint64_t& stream) {
    std::mt19937_64 rng(config_.seed * 0x9E3779B97F4A7C15ULL + stream++);
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    const Index out = weight_shape.front();
    Tensor w(std::move(weight_shape));
    for (Index i = 0; i < w.size(); ++i) w[i] = normal(rng);
    Layer layer;
    layer.weight = params_.size();
    params_.push_back(Var::parameter(std::move(w), name + ".weight"));
    layer.bias = params_.size();
    params_.push_back(Var::parameter(Tensor({out}), name + ".bias"));
    return layer;
}

MultiExitModel::MultiExitModel(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    const auto sizes = trunk_sizes(config_);
    const Index k = config_.kernel_size;
    std::uint64_t stream = 0;

    Index in_ch = 1;
    for (std::size_t b = 0; b < config_.channels.size(); ++b) {
        const Index out_ch = config_.channels[b];
        blocks_.push_back(add_layer("block" + std::to_string(b + 1) + ".conv", {out_ch, in_ch, k, k}, in_ch * k * k,
                                    stream));
        in_ch = out_ch;
    }
    const Index flat = in_ch * sizes.back() * sizes.back();
    fc1_ = add_layer("fc1", {config_.hidden, flat}, flat, stream);
    fc2_ = add_layer("fc2", {config_.num_classes, config_.hidden}, config_.hidden, stream);

    for (std::size_t h = 0; h < heads_.size(); ++h) {
        const auto tap = static_cast<std::size_t>(config_.exit_after[h] - 1);
        const Index tap_ch = config_.channels[tap];
        const Index out = head_output_size(config_, sizes[tap], h);
        const std::string prefix = "exit" + std::to_string(h + 1);
        heads_[h].conv = add_layer(prefix + ".conv", {config_.exit_channels, tap_ch, 3, 3}, tap_ch * 9, stream);
        const Index head_flat = config_.exit_channels * out * out;
        heads_[h].fc = add_layer(prefix + ".fc", {config_.num_classes, head_flat}, head_flat, stream);
    }
}

void MultiExitModel::check_input(const Tensor& image) const {
    const Shape expected{1, config_.input_size, config_.input_size};
    if (image.shape != expected)
        throw InputError("model expects an image of shape " + shape_string(expected) + ", got " +
                         shape_string(image.shape));
}

Var MultiExitModel::run_trunk(const Tensor& image, std::array<Var, kExitCount - 1>* taps) const {
    check_input(image);
    Var x = Var::constant(image);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        x = conv2d(x, params_[blocks_[b].weight], params_[blocks_[b].bias], Padding::same);
        x = maxpool2d(relu(x), config_.odd_pooling);
        if (taps)
            for (std::size_t h = 0; h < taps->size(); ++h)
                if (config_.exit_after[h] == static_cast<Index>(b + 1)) (*taps)[h] = x;
    }
    x = relu(dense(flatten(x), params_[fc1_.weight], params_[fc1_.bias]));
    return dense(x, params_[fc2_.weight], params_[fc2_.bias]);
}

Var MultiExitModel::run_head(std::size_t head, const Var& features) const {
    const Head& h = heads_[head];
    Var x = conv2d(features, params_[h.conv.weight], params_[h.conv.bias], config_.exit_padding);
    x = maxpool2d(relu(x), config_.odd_pooling);
    return dense(flatten(x), params_[h.fc.weight], params_[h.fc.bias]);
}

std::array<Var, kExitCount> MultiExitModel::forward_graph(const Tensor& image) const {
    std::array<Var, kExitCount - 1> taps;
    std::array<Var, kExitCount> out;
    out[kExitCount - 1] = run_trunk(image, &taps);
    for (std::size_t h = 0; h < taps.size(); ++h) out[h] = run_head(h, taps[h]);
    return out;
}

ExitLogits MultiExitModel::forward(const Tensor& image) const {
    NoGradGuard guard;
    const auto vars = forward_graph(image);
    ExitLogits logits;
    for (std::size_t e = 0; e < vars.size(); ++e) logits.exits[e] = vars[e].data();
    return logits;
}

Eigen::VectorXd MultiExitModel::forward_final(const Tensor& image) const {
    NoGradGuard guard;
    return run_trunk(image, nullptr).data();
}

const Var& MultiExitModel::parameter(const std::string& name) const {
    for (const Var& p : params_)
        if (p.name() == name) return p;
    throw InputError("no parameter named '" + name + "'");
}

Index MultiExitModel::parameter_count() const {
    Index n = 0;
    for (const Var& p : params_) n += p.value().size();
    return n;
}

namespace {

void append_le(std::string& out, float value) {
    const auto bits = std::bit_cast<std::uint32_t>(value);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

float read_le(const std::string& in, std::size_t at) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
    return std::bit_cast<float>(bits);
}

std::string payload_bytes(std::span<const Var> params) {
    std::string bytes;
    for (const Var& p : params)
        for (double v : p.data()) append_le(bytes, static_cast<float>(v));
    return bytes;
}

void write_config(KeyValueFile& kv, const ModelConfig& c) {
    kv.set("seed", std::to_string(c.seed));
    kv.set("input_size", std::to_string(c.input_size));
    kv.set("channels", join(c.channels));
    kv.set("kernel_size", std::to_string(c.kernel_size));
    kv.set("hidden", std::to_string(c.hidden));
    kv.set("num_classes", std::to_string(c.num_classes));
    kv.set("exit_after", join(c.exit_after));
    kv.set("exit_channels", std::to_string(c.exit_channels));
    kv.set("exit_padding", padding_name(c.exit_padding));
    kv.set("odd_pooling", odd_name(c.odd_pooling));
    kv.set("loss_weights", join(std::vector<double>(c.loss_weights.begin(), c.loss_weights.end())));
}

ModelConfig read_config(const KeyValueFile& kv) {
    ModelConfig c;
    c.seed = static_cast<std::uint64_t>(std::stoull(kv.get("seed")));
    c.input_size = parse_int(kv.get("input_size"));
    c.channels = parse_index_list(kv.get("channels"));
    c.kernel_size = parse_int(kv.get("kernel_size"));
    c.hidden = parse_int(kv.get("hidden"));
    c.num_classes = parse_int(kv.get("num_classes"));
    c.exit_after = parse_index_list(kv.get("exit_after"));
    c.exit_channels = parse_int(kv.get("exit_channels"));
    const std::string pad = kv.get("exit_padding");
    if (pad != "valid" && pad != "same") throw FormatError("exit_padding must be valid or same");
    c.exit_padding = pad == "valid" ? Padding::valid : Padding::same;
    const std::string odd = kv.get("odd_pooling");
    if (odd != "error" && odd != "pad") throw FormatError("odd_pooling must be error or pad");
    c.odd_pooling = odd == "error" ? OddPooling::error : OddPooling::pad;
    const auto weights = split(kv.get("loss_weights"), ',');
    if (weights.size() != kExitCount) throw FormatError("loss_weights needs three values");
    for (std::size_t i = 0; i < kExitCount; ++i) c.loss_weights[i] = parse_double(weights[i]);
    return c;
}

std::filesystem::path payload_path(const std::filesystem::path& manifest) {
    auto p = manifest;
    p += ".bin";
    return p;
}

}  // namespace

std::string MultiExitModel::fingerprint() const {
    const std::string bytes = payload_bytes(params_);
    return hex64(fnv1a(bytes, fnv1a(config_to_text(config_))));
}

std::string config_to_text(const ModelConfig& config) {
    KeyValueFile kv;
    write_config(kv, config);
    return kv.str();
}

void save(const MultiExitModel& model, const std::filesystem::path& path) {
    const std::string bytes = payload_bytes(model.parameters());
    KeyValueFile kv;
    kv.set("format_version", std::to_string(kCheckpointVersion));
    kv.set("dtype", "float32");
    kv.set("byte_order", "little");
    kv.set("payload", payload_path(path).filename().string());
    kv.set("payload_bytes", std::to_string(bytes.size()));
    kv.set("fingerprint", model.fingerprint());
    write_config(kv, model.config());
    std::size_t offset = 0;
    for (const Var& p : model.parameters()) {
        std::string shape;
        for (std::size_t i = 0; i < p.shape().size(); ++i) shape += (i ? "," : "") + std::to_string(p.shape()[i]);
        kv.set("tensor", p.name() + " float32 " + shape + " " + std::to_string(offset));
        offset += static_cast<std::size_t>(p.value().size()) * 4;
    }
    write_file(payload_path(path), bytes);
    kv.write(path);
}

MultiExitModel load(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw LoadError("checkpoint manifest '" + path.string() + "' not found");
    const std::string text = read_file(path);
    if (trim(text).empty()) throw TruncatedPayloadError("checkpoint manifest '" + path.string() + "' is empty");
    KeyValueFile kv;
    try {
        kv = KeyValueFile::parse(text);
    } catch (const FormatError& e) {
        throw LoadError("checkpoint manifest '" + path.string() + "': " + e.what());
    }

    const auto version = kv.find("format_version");
    if (!version || *version != std::to_string(kCheckpointVersion))
        throw VersionMismatchError("checkpoint '" + path.string() + "' has format version '" +
                                   version.value_or("<missing>") + "', expected " +
                                   std::to_string(kCheckpointVersion));
    if (kv.find("dtype").value_or("") != "float32") throw LoadError("checkpoint dtype must be float32");

    MultiExitModel model = [&] {
        try {
            return MultiExitModel(read_config(kv));
        } catch (const Error& e) {
            throw LoadError("checkpoint '" + path.string() + "' config: " + e.what());
        }
    }();

    const auto payload_file = path.parent_path() / kv.get("payload");
    const std::string bytes = std::filesystem::exists(payload_file) ? read_file(payload_file) : std::string{};
    const auto tensors = kv.all("tensor");
    auto params = model.parameters();
    if (tensors.size() != params.size())
        throw ShapeMismatchError("checkpoint lists " + std::to_string(tensors.size()) + " tensors, the config needs " +
                                 std::to_string(params.size()));

    for (std::size_t i = 0; i < tensors.size(); ++i) {
        std::istringstream line(tensors[i]);
        std::string name, dtype, shape_text;
        std::size_t offset = 0;
        if (!(line >> name >> dtype >> shape_text >> offset)) throw LoadError("malformed tensor entry: " + tensors[i]);
        Var& p = params[i];
        if (name != p.name()) throw ShapeMismatchError("tensor " + name + " found where " + p.name() + " was expected");
        Shape shape;
        try {
            shape = parse_index_list(shape_text);
        } catch (const FormatError&) {
            throw ShapeMismatchError("tensor " + name + " has an unreadable shape '" + shape_text + "'");
        }
        if (shape != p.shape())
            throw ShapeMismatchError("tensor " + name + " has shape " + shape_string(shape) + " in the manifest, model needs " +
                                     shape_string(p.shape()));
        const std::size_t need = static_cast<std::size_t>(p.value().size()) * 4;
        if (offset + need > bytes.size())
            throw TruncatedPayloadError("payload '" + payload_file.string() + "' ends before tensor " + name + " (" +
                                        std::to_string(bytes.size()) + " bytes, need " + std::to_string(offset + need) +
                                        ")");
        for (Index j = 0; j < p.value().size(); ++j)
            p.value().data[j] = static_cast<double>(read_le(bytes, offset + static_cast<std::size_t>(j) * 4));
    }
    if (const auto recorded = kv.find("fingerprint"); recorded && *recorded != model.fingerprint())
        throw FingerprintMismatchError("checkpoint '" + path.string() + "' payload hashes to " + model.fingerprint() +
                                       ", manifest records " + *recorded);
    return model;
}

Index argmax(const Eigen::Ref<const Eigen::VectorXd>& values) {
    Index best = 0;
    for (Index i = 1; i < values.size(); ++i)
        if (values[i] > values[best]) best = i;
    return best;
}

Var multi_exit_loss(const std::array<Var, kExitCount>& logits, Index label,
                    const std::array<double, kExitCount>& weights) {
    Var total;
    for (std::size_t e = 0; e < logits.size(); ++e) {
        Var term = scale(cross_entropy_logits(logits[e], label), weights[e]);
        total = total.defined() ? add(total, term) : term;
    }
    return total;
}

TrainHistory train(MultiExitModel& model, std::span<const LabeledImage> data, const TrainOptions& options) {
    const Index classes = model.config().num_classes;
    if (options.epochs < 1 || options.batch_size < 1) throw ConfigError("epochs and batch size must be positive");
    std::vector<Index> per_class(static_cast<std::size_t>(classes), 0);
    for (const auto& s : data) {
        if (s.label < 0 || s.label >= classes)
            throw DataError("sample '" + s.id + "' has label " + std::to_string(s.label) + " outside [0," +
                            std::to_string(classes) + ")");
        ++per_class[static_cast<std::size_t>(s.label)];
    }
    for (Index c = 0; c < classes; ++c)
        if (per_class[static_cast<std::size_t>(c)] == 0)
            throw DataError("class " + std::to_string(c) + " has no training samples");

    OptimizerState state(options.optimizer, options.learning_rate);
    std::mt19937_64 rng(options.seed);
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    TrainHistory history;
    const auto params = model.parameters();
    const auto& weights = model.config().loss_weights;
    for (int epoch = 0; epoch < options.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) {
            std::uniform_int_distribution<std::size_t> pick(0, i - 1);
            std::swap(order[i - 1], order[pick(rng)]);
        }
        double epoch_loss = 0.0;
        int batch = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(options.batch_size), ++batch) {
            const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(options.batch_size));
            const double inv = 1.0 / static_cast<double>(stop - start);
            for (Var& p : params) p.zero_grad();
            for (std::size_t i = start; i < stop; ++i) {
                const LabeledImage& sample = data[order[i]];
                Var loss = multi_exit_loss(model.forward_graph(sample.image), sample.label, weights);
                const double value = loss.item();
                if (!std::isfinite(value))
                    throw NumericError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                                       std::to_string(batch + 1) + " (sample '" + sample.id + "')");
                epoch_loss += value;
                backward(scale(loss, inv));
            }
            optimizer_step(state, params);
        }
        history.epoch_loss.push_back(epoch_loss / static_cast<double>(data.size()));
    }
    return history;
}

double accuracy(const MultiExitModel& model, std::span<const LabeledImage> data) {
    if (data.empty()) return 0.0;
    std::size_t correct = 0;
    for (const auto& s : data)
        if (argmax(model.forward_final(s.image)) == s.label) ++correct;
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace oodx
