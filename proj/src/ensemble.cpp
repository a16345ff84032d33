#include "oodx/ensemble.hpp"

#include "oodx/error.hpp"
#include "oodx/text.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <random>
#include <thread>

namespace oodx {

void EnsembleSpec::validate() const {
    if (members < 2) throw ConfigError("an ensemble needs at least two members");
    if (!(leave_out_min >= 0.0 && leave_out_min <= leave_out_max && leave_out_max < 1.0))
        throw ConfigError("leave-out range must satisfy 0 <= min <= max < 1");
    if (!(lr_min > 0.0 && lr_min <= lr_max)) throw ConfigError("learning-rate range must satisfy 0 < min <= max");
    if (optimizers.empty()) throw ConfigError("at least one optimizer choice is required");
    if (epochs_min < 1 || epochs_min > epochs_max) throw ConfigError("epoch range must satisfy 1 <= min <= max");
    if (batch_sizes.empty()) throw ConfigError("at least one batch size choice is required");
    for (int b : batch_sizes)
        if (b < 1) throw ConfigError("batch sizes must be positive");
}

std::uint64_t member_seed(std::uint64_t master_seed, int index) {
    std::uint64_t z = master_seed + 0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

std::vector<MemberConfig> sample_member_configs(const EnsembleSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.master_seed);
    std::uniform_real_distribution<double> leave_out(spec.leave_out_min, spec.leave_out_max);
    std::uniform_real_distribution<double> log_lr(std::log(spec.lr_min), std::log(spec.lr_max));
    std::uniform_int_distribution<std::size_t> optimizer(0, spec.optimizers.size() - 1);
    std::uniform_int_distribution<int> epochs(spec.epochs_min, spec.epochs_max);
    std::uniform_int_distribution<std::size_t> batch(0, spec.batch_sizes.size() - 1);

    std::vector<MemberConfig> out;
    for (int m = 0; m < spec.members; ++m) {
        MemberConfig c;
        c.index = m;
        c.seed = member_seed(spec.master_seed, m);
        c.leave_out = leave_out(rng);
        c.learning_rate = std::clamp(std::exp(log_lr(rng)), spec.lr_min, spec.lr_max);
        c.optimizer = spec.optimizers[optimizer(rng)];
        c.epochs = epochs(rng);
        c.batch_size = spec.batch_sizes[batch(rng)];
        out.push_back(c);
    }
    return out;
}

std::vector<std::size_t> member_subset(const MemberConfig& member, std::span<const LabeledImage> data,
                                       Index num_classes) {
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(member.seed ^ 0x5DEECE66DULL);
    for (std::size_t i = order.size(); i > 1; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(order[i - 1], order[pick(rng)]);
    }
    const auto drop = static_cast<std::size_t>(std::floor(member.leave_out * static_cast<double>(data.size())));
    std::vector<std::size_t> kept(order.begin() + static_cast<std::ptrdiff_t>(drop), order.end());
    std::sort(kept.begin(), kept.end());

    std::vector<std::size_t> per_class(static_cast<std::size_t>(num_classes), 0);
    for (std::size_t i : kept)
        if (data[i].label >= 0 && data[i].label < num_classes) ++per_class[static_cast<std::size_t>(data[i].label)];
    for (Index c = 0; c < num_classes; ++c)
        if (per_class[static_cast<std::size_t>(c)] == 0)
            throw DataError("member " + std::to_string(member.index) + ": class " + std::to_string(c) +
                            " has no samples left after leaving out " + std::to_string(drop) + " of " +
                            std::to_string(data.size()));
    return kept;
}

Ensemble train_ensemble(const EnsembleSpec& spec, const ModelConfig& base, std::span<const LabeledImage> data,
                        unsigned threads) {
    const auto configs = sample_member_configs(spec);
    base.validate();

    // Subsets are checked up front so starvation is reported before any training.
    std::vector<std::vector<std::size_t>> subsets;
    for (const auto& c : configs) subsets.push_back(member_subset(c, data, base.num_classes));

    std::vector<std::optional<EnsembleMember>> trained(configs.size());
    std::vector<std::exception_ptr> errors(configs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t m = next++; m < configs.size(); m = next++) {
            try {
                const MemberConfig& c = configs[m];
                ModelConfig mc = base;
                mc.seed = c.seed;
                MultiExitModel model(mc);
                Dataset subset;
                subset.reserve(subsets[m].size());
                for (std::size_t i : subsets[m]) subset.push_back(data[i]);
                TrainOptions opts;
                opts.epochs = c.epochs;
                opts.batch_size = c.batch_size;
                opts.optimizer = c.optimizer;
                opts.learning_rate = c.learning_rate;
                opts.seed = c.seed + 1;
                train(model, subset, opts);

                std::vector<std::string> left_out;
                std::size_t k = 0;
                for (std::size_t i = 0; i < data.size(); ++i) {
                    if (k < subsets[m].size() && subsets[m][k] == i)
                        ++k;
                    else
                        left_out.push_back(data[i].id);
                }
                trained[m] = EnsembleMember{c, std::move(model), std::move(left_out)};
            } catch (...) {
                errors[m] = std::current_exception();
            }
        }
    };

    unsigned workers = threads ? threads : std::max(1u, std::thread::hardware_concurrency());
    workers = std::min<unsigned>(workers, static_cast<unsigned>(configs.size()));
    if (workers <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (unsigned t = 0; t < workers; ++t) pool.emplace_back(worker);
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    Ensemble ensemble;
    ensemble.spec = spec;
    ensemble.malignant_class = base.num_classes - 1;
    for (auto& m : trained) ensemble.members.push_back(std::move(*m));
    return ensemble;
}

EnsembleOutput aggregate(const Eigen::Ref<const Eigen::MatrixXd>& member_probs) {
    const Index n = member_probs.rows();
    const Index k = member_probs.cols();
    if (n < 2) throw InputError("ensemble aggregation needs at least two members");
    if (k < 1) throw InputError("ensemble aggregation needs at least one class");

    EnsembleOutput out;
    out.member_probs = member_probs;
    // Shifting by the column minimum makes identical members give exactly zero spread.
    const Eigen::RowVectorXd low = member_probs.colwise().minCoeff();
    out.mean = (low + (member_probs.rowwise() - low).colwise().mean()).transpose();
    out.stddev = ((member_probs.rowwise() - out.mean.transpose()).array().square().colwise().sum() /
                  static_cast<double>(n))
                     .sqrt()
                     .transpose();
    out.uncertainty = out.stddev.sum();
    out.weighted_uncertainty = out.mean.dot(out.stddev);

    Eigen::VectorXi votes = Eigen::VectorXi::Zero(k);
    for (Index m = 0; m < n; ++m) ++votes[argmax(member_probs.row(m).transpose())];
    Index best = 0;
    for (Index c = 1; c < k; ++c)
        if (votes[c] > votes[best] || (votes[c] == votes[best] && out.mean[c] > out.mean[best])) best = c;
    out.vote = best;
    return out;
}

EnsembleOutput ensemble_predict(const Ensemble& ensemble, const Tensor& image) {
    if (ensemble.members.size() < 2) throw ConfigError("ensemble prediction needs at least two members");
    const Index k = ensemble.members.front().model.config().num_classes;
    Eigen::MatrixXd probs(static_cast<Index>(ensemble.members.size()), k);
    for (std::size_t m = 0; m < ensemble.members.size(); ++m) {
        const auto& model = ensemble.members[m].model;
        if (model.config().num_classes != k)
            throw ConfigError("member " + std::to_string(m) + " has " + std::to_string(model.config().num_classes) +
                              " classes, member 0 has " + std::to_string(k));
        probs.row(static_cast<Index>(m)) = softmax(model.forward_final(image)).transpose();
    }
    return aggregate(probs);
}

double malignant_score(const EnsembleOutput& output, std::optional<Index> malignant_class) {
    if (!malignant_class) throw ConfigError("no malignant class designated");
    if (*malignant_class < 0 || *malignant_class >= output.mean.size())
        throw ConfigError("malignant class " + std::to_string(*malignant_class) + " outside the class range");
    return output.mean[*malignant_class];
}

double ensemble_malignant_score(const Ensemble& ensemble, const Tensor& image) {
    if (!ensemble.malignant_class) throw ConfigError("no malignant class designated");
    return malignant_score(ensemble_predict(ensemble, image), ensemble.malignant_class);
}

namespace {

std::string join_ints(const std::vector<int>& values) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) out += (i ? "," : "") + std::to_string(values[i]);
    return out;
}

std::filesystem::path member_dir(const std::filesystem::path& dir, int index) {
    return dir / ("member_" + std::to_string(index));
}

KeyValueFile member_manifest(const EnsembleMember& member) {
    const MemberConfig& c = member.config;
    KeyValueFile kv;
    kv.set("index", std::to_string(c.index));
    kv.set("seed", std::to_string(c.seed));
    kv.set("leave_out", format_double(c.leave_out));
    kv.set("learning_rate", format_double(c.learning_rate));
    kv.set("optimizer", to_string(c.optimizer));
    kv.set("epochs", std::to_string(c.epochs));
    kv.set("batch_size", std::to_string(c.batch_size));
    kv.set("left_out_count", std::to_string(member.left_out.size()));
    std::string ids;
    for (std::size_t i = 0; i < member.left_out.size(); ++i) ids += (i ? "," : "") + member.left_out[i];
    kv.set("left_out", ids);
    kv.set("fingerprint", member.model.fingerprint());
    return kv;
}

}  // namespace

std::string member_manifest_text(const EnsembleMember& member) { return member_manifest(member).str(); }

std::string ensemble_fingerprint(const Ensemble& ensemble) {
    std::uint64_t h = fnv1a(std::string_view("ensemble"));
    for (const auto& m : ensemble.members) h = fnv1a(m.model.fingerprint(), h);
    return hex64(h);
}

void save_ensemble(const Ensemble& ensemble, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const EnsembleSpec& s = ensemble.spec;
    KeyValueFile kv;
    kv.set("members", std::to_string(ensemble.members.size()));
    kv.set("master_seed", std::to_string(s.master_seed));
    kv.set("leave_out_range", format_double(s.leave_out_min) + "," + format_double(s.leave_out_max));
    kv.set("lr_range", format_double(s.lr_min) + "," + format_double(s.lr_max));
    std::string opts;
    for (std::size_t i = 0; i < s.optimizers.size(); ++i) opts += (i ? "," : "") + to_string(s.optimizers[i]);
    kv.set("optimizers", opts);
    kv.set("epoch_range", std::to_string(s.epochs_min) + "," + std::to_string(s.epochs_max));
    kv.set("batch_sizes", join_ints(s.batch_sizes));
    kv.set("malignant_class", ensemble.malignant_class ? std::to_string(*ensemble.malignant_class) : "-");
    kv.set("fingerprint", ensemble_fingerprint(ensemble));
    for (const auto& m : ensemble.members) {
        const auto mdir = member_dir(dir, m.config.index);
        std::filesystem::create_directories(mdir);
        save(m.model, mdir / "checkpoint");
        member_manifest(m).write(mdir / "manifest");
        kv.set("member", std::to_string(m.config.index) + " " + m.model.fingerprint());
    }
    kv.write(dir / "ensemble.manifest");
}

Ensemble load_ensemble(const std::filesystem::path& dir) {
    const auto manifest = dir / "ensemble.manifest";
    if (!std::filesystem::exists(manifest)) throw InputError("no ensemble.manifest in '" + dir.string() + "'");
    const auto kv = KeyValueFile::read(manifest);
    Ensemble e;
    EnsembleSpec& s = e.spec;
    s.master_seed = std::stoull(kv.get("master_seed"));
    const auto lo = split(kv.get("leave_out_range"), ',');
    const auto lr = split(kv.get("lr_range"), ',');
    const auto ep = split(kv.get("epoch_range"), ',');
    if (lo.size() != 2 || lr.size() != 2 || ep.size() != 2) throw FormatError("malformed range in ensemble.manifest");
    s.leave_out_min = parse_double(lo[0]);
    s.leave_out_max = parse_double(lo[1]);
    s.lr_min = parse_double(lr[0]);
    s.lr_max = parse_double(lr[1]);
    s.epochs_min = static_cast<int>(parse_int(ep[0]));
    s.epochs_max = static_cast<int>(parse_int(ep[1]));
    s.optimizers.clear();
    for (const auto& o : split(kv.get("optimizers"), ',')) s.optimizers.push_back(parse_optimizer(o));
    s.batch_sizes.clear();
    for (const auto& b : split(kv.get("batch_sizes"), ',')) s.batch_sizes.push_back(static_cast<int>(parse_int(b)));
    s.members = static_cast<int>(parse_int(kv.get("members")));
    const std::string malignant = kv.get("malignant_class");
    if (malignant != "-") e.malignant_class = parse_int(malignant);

    for (const auto& entry : kv.all("member")) {
        const auto parts = split(entry, ' ');
        if (parts.size() != 2) throw FormatError("malformed member entry '" + entry + "'");
        const int index = static_cast<int>(parse_int(parts[0]));
        const auto mdir = member_dir(dir, index);
        const auto mkv = KeyValueFile::read(mdir / "manifest");
        MemberConfig c;
        c.index = index;
        c.seed = std::stoull(mkv.get("seed"));
        c.leave_out = parse_double(mkv.get("leave_out"));
        c.learning_rate = parse_double(mkv.get("learning_rate"));
        c.optimizer = parse_optimizer(mkv.get("optimizer"));
        c.epochs = static_cast<int>(parse_int(mkv.get("epochs")));
        c.batch_size = static_cast<int>(parse_int(mkv.get("batch_size")));
        std::vector<std::string> left_out;
        const std::string ids = mkv.get("left_out");
        if (!ids.empty()) left_out = split(ids, ',');
        EnsembleMember member{c, load(mdir / "checkpoint"), std::move(left_out)};
        if (member.model.fingerprint() != parts[1])
            throw FingerprintMismatchError("member " + std::to_string(index) + " checkpoint does not match its fingerprint");
        e.members.push_back(std::move(member));
    }
    if (static_cast<int>(e.members.size()) != s.members)
        throw FormatError("ensemble.manifest lists " + std::to_string(e.members.size()) + " members, expected " +
                          std::to_string(s.members));
    if (e.members.size() < 2) throw ConfigError("an ensemble needs at least two members");
    return e;
}

}  // namespace oodx
