#include "oodx/cli.hpp"

#include "oodx/data.hpp"
#include "oodx/ensemble.hpp"
#include "oodx/error.hpp"
#include "oodx/metrics.hpp"
#include "oodx/model.hpp"
#include "oodx/scoring.hpp"
#include "oodx/text.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <sstream>

namespace oodx::cli {

namespace fs = std::filesystem;

namespace {

// Exclusive marker for an output directory while a command writes into it.
class DirLock {
public:
    explicit DirLock(const fs::path& dir) : path_(dir / ".oodx.lock") {
        fs::create_directories(dir);
        std::FILE* f = std::fopen(path_.string().c_str(), "wx");
        if (!f) throw InputError("output directory '" + dir.string() + "' is locked by another run (" + path_.string() + ")");
        std::fclose(f);
    }
    ~DirLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    fs::path path_;
};

std::string data_fingerprint(const Dataset& data) {
    std::uint64_t h = fnv1a(std::string_view("dataset"));
    for (const auto& s : data) {
        h = fnv1a(s.id + ":" + std::to_string(s.label), h);
        h = fnv1a(std::span(reinterpret_cast<const unsigned char*>(s.image.data.data()),
                            static_cast<std::size_t>(s.image.size()) * sizeof(double)),
                  h);
    }
    return hex64(h);
}

void require_file(const fs::path& path, const std::string& what) {
    if (!fs::exists(path)) throw InputError(what + " '" + path.string() + "' not found");
}

// ---- shared option groups ------------------------------------------------------

struct ModelOptions {
    Index input_size = 32;
    std::vector<Index> channels{8, 16, 32, 32, 32};
    Index hidden = 64;
    Index classes = 3;
    std::vector<Index> exit_after{2, 4};
    Index exit_channels = 16;
    std::string exit_padding = "same";
    std::string odd_pooling = "pad";
    std::vector<double> loss_weights{0.5, 0.5, 1.0};

    void add(CLI::App* app) {
        app->add_option("--input-size", input_size, "Input height and width")->capture_default_str();
        app->add_option("--channels", channels, "Conv channel plan")->delimiter(',')->capture_default_str();
        app->add_option("--hidden", hidden, "Hidden FC width")->capture_default_str();
        app->add_option("--classes", classes, "Number of classes")->capture_default_str();
        app->add_option("--exit-after", exit_after, "Blocks the auxiliary exits tap")->delimiter(',')->capture_default_str();
        app->add_option("--exit-channels", exit_channels, "Exit-head conv channels")->capture_default_str();
        app->add_option("--exit-padding", exit_padding, "valid or same")->capture_default_str();
        app->add_option("--odd-pooling", odd_pooling, "error or pad")->capture_default_str();
        app->add_option("--loss-weights", loss_weights, "Per-exit loss weights")->delimiter(',')->expected(3)->capture_default_str();
    }

    ModelConfig build(std::uint64_t seed) const {
        ModelConfig c;
        c.input_size = input_size;
        c.channels = channels;
        c.hidden = hidden;
        c.num_classes = classes;
        c.exit_after = exit_after;
        c.exit_channels = exit_channels;
        if (exit_padding != "valid" && exit_padding != "same") throw ConfigError("--exit-padding must be valid or same");
        c.exit_padding = exit_padding == "valid" ? Padding::valid : Padding::same;
        if (odd_pooling != "error" && odd_pooling != "pad") throw ConfigError("--odd-pooling must be error or pad");
        c.odd_pooling = odd_pooling == "error" ? OddPooling::error : OddPooling::pad;
        if (loss_weights.size() != 3) throw ConfigError("--loss-weights needs three values");
        for (std::size_t i = 0; i < 3; ++i) c.loss_weights[i] = loss_weights[i];
        c.seed = seed;
        c.validate();
        return c;
    }
};

Dataset load_inputs(const std::string& manifest, const std::string& idx_images, const std::string& idx_labels,
                    const std::string& split, Index size, std::optional<Index> num_classes) {
    if (!idx_images.empty() || !idx_labels.empty()) {
        require_file(idx_images, "IDX image file");
        require_file(idx_labels, "IDX label file");
        Dataset data = load_idx(idx_images, idx_labels);
        for (auto& s : data) s.image = resize_bilinear(s.image, size, size);
        return data;
    }
    if (manifest.empty()) throw InputError("either --manifest or --idx-images/--idx-labels is required");
    require_file(manifest, "manifest");
    const auto m = DatasetManifest::read(manifest);
    std::optional<Split> which;
    if (!split.empty() && split != "all") which = parse_split(split);
    Dataset data = load_dataset(m, size, which, num_classes);
    if (data.empty()) throw DataError("manifest '" + manifest + "' has no rows in split '" + split + "'");
    return data;
}

void write_lock_record(const fs::path& dir, const std::string& command, const KeyValueFile& resolved) {
    KeyValueFile kv;
    kv.set("command", command);
    for (const auto& e : resolved.entries) kv.set(e.key, e.value, e.section);
    kv.write(dir / "run.lock");
}

// ---- synth ------------------------------------------------------------------

struct SynthCommand {
    std::string kind = "blobs";
    Index classes = 3;
    Index train_per_class = 40;
    Index calibrate_per_class = 10;
    Index test_per_class = 10;
    Index count = 30;
    Index size = 32;
    std::string out;

    void add(CLI::App* app) {
        app->add_option("--kind", kind, "blobs or uniform-noise")->capture_default_str();
        app->add_option("--classes", classes)->capture_default_str();
        app->add_option("--train-per-class", train_per_class)->capture_default_str();
        app->add_option("--calibrate-per-class", calibrate_per_class)->capture_default_str();
        app->add_option("--test-per-class", test_per_class)->capture_default_str();
        app->add_option("--count", count, "Number of uniform-noise images")->capture_default_str();
        app->add_option("--size", size)->capture_default_str();
        app->add_option("--out", out, "Output directory")->required();
    }

    void run(std::uint64_t seed, std::ostream& os) const {
        DirLock lock(out);
        DatasetManifest all;
        auto append = [&](const Dataset& data, Split split) {
            const std::string sub = to_string(split);
            const auto m = write_dataset(data, fs::path(out) / sub, split);
            for (auto row : m.rows) {
                row.path = sub + "/" + row.path;
                all.rows.push_back(row);
            }
        };
        if (kind == "blobs") {
            append(make_synthetic(classes, train_per_class, mix_seed(seed, 1), size), Split::train);
            if (calibrate_per_class > 0)
                append(make_synthetic(classes, calibrate_per_class, mix_seed(seed, 2), size), Split::calibrate);
            if (test_per_class > 0) append(make_synthetic(classes, test_per_class, mix_seed(seed, 3), size), Split::test);
        } else if (kind == "uniform-noise") {
            append(make_uniform_noise(count, seed, size), Split::test);
        } else {
            throw InputError("--kind must be blobs or uniform-noise");
        }
        all.write(fs::path(out) / "manifest.csv");
        os << "wrote " << all.rows.size() << " images to " << out << '\n';
    }
};

// ---- train ------------------------------------------------------------------

struct TrainCommand {
    std::string manifest, idx_images, idx_labels, split = "train", out;
    ModelOptions model;
    int epochs = 30;
    int batch_size = 16;
    std::string optimizer = "adam";
    double learning_rate = 1e-3;

    void add(CLI::App* app) {
        app->add_option("--manifest", manifest, "Dataset manifest (path,label,split)");
        app->add_option("--idx-images", idx_images);
        app->add_option("--idx-labels", idx_labels);
        app->add_option("--split", split, "Manifest split to train on")->capture_default_str();
        app->add_option("--out", out, "Output directory")->required();
        app->add_option("--epochs", epochs)->capture_default_str();
        app->add_option("--batch-size", batch_size)->capture_default_str();
        app->add_option("--optimizer", optimizer, "adam or rmsprop")->capture_default_str();
        app->add_option("--lr", learning_rate)->capture_default_str();
        model.add(app);
    }

    void run(std::uint64_t seed, std::ostream& os) const {
        const ModelConfig config = model.build(seed);
        const Dataset data = load_inputs(manifest, idx_images, idx_labels, split, config.input_size, config.num_classes);
        DirLock lock(out);
        MultiExitModel net(config);
        TrainOptions opts;
        opts.epochs = epochs;
        opts.batch_size = batch_size;
        opts.optimizer = parse_optimizer(optimizer);
        opts.learning_rate = learning_rate;
        opts.seed = mix_seed(seed, 0x7A1);
        const TrainHistory history = train(net, data, opts);
        save(net, fs::path(out) / "checkpoint");

        std::ostringstream hist;
        hist << "epoch,loss\n";
        for (std::size_t e = 0; e < history.epoch_loss.size(); ++e)
            hist << e + 1 << ',' << format_double(history.epoch_loss[e]) << '\n';
        write_file(fs::path(out) / "history.csv", hist.str());

        KeyValueFile kv;
        kv.set("seed", std::to_string(seed));
        kv.set("train_seed", std::to_string(opts.seed));
        kv.set("epochs", std::to_string(epochs));
        kv.set("batch_size", std::to_string(batch_size));
        kv.set("optimizer", optimizer);
        kv.set("learning_rate", format_double(learning_rate));
        kv.set("data_fingerprint", data_fingerprint(data));
        kv.set("samples", std::to_string(data.size()));
        kv.set("model_fingerprint", net.fingerprint());
        for (const auto& e : KeyValueFile::parse(config_to_text(config)).entries) kv.set(e.key, e.value, "model");
        write_lock_record(out, "train", kv);
        os << "trained " << data.size() << " samples, final loss " << format_double(history.epoch_loss.back())
           << ", accuracy " << format_double(accuracy(net, data)) << ", model " << net.fingerprint() << '\n';
    }
};

struct TrainEnsembleCommand {
    std::string manifest, idx_images, idx_labels, split = "train", out;
    ModelOptions model;
    int members = 20;
    int epochs_min = 25, epochs_max = 85;
    std::vector<int> batch_sizes{8, 16, 32, 64, 128};
    unsigned threads = 0;

    void add(CLI::App* app) {
        app->add_option("--manifest", manifest);
        app->add_option("--idx-images", idx_images);
        app->add_option("--idx-labels", idx_labels);
        app->add_option("--split", split)->capture_default_str();
        app->add_option("--out", out, "Ensemble directory")->required();
        app->add_option("--members", members)->capture_default_str();
        app->add_option("--epochs-min", epochs_min)->capture_default_str();
        app->add_option("--epochs-max", epochs_max)->capture_default_str();
        app->add_option("--batch-sizes", batch_sizes)->delimiter(',')->capture_default_str();
        app->add_option("--threads", threads, "Worker threads (0 = all cores)")->capture_default_str();
        model.add(app);
    }

    void run(std::uint64_t seed, std::ostream& os) const {
        const ModelConfig config = model.build(seed);
        const Dataset data = load_inputs(manifest, idx_images, idx_labels, split, config.input_size, config.num_classes);
        EnsembleSpec spec;
        spec.members = members;
        spec.epochs_min = epochs_min;
        spec.epochs_max = epochs_max;
        spec.batch_sizes = batch_sizes;
        spec.master_seed = seed;
        spec.validate();
        DirLock lock(out);
        const Ensemble ensemble = train_ensemble(spec, config, data, threads);
        save_ensemble(ensemble, out);

        KeyValueFile kv;
        kv.set("master_seed", std::to_string(seed));
        kv.set("members", std::to_string(members));
        kv.set("epoch_range", std::to_string(epochs_min) + "," + std::to_string(epochs_max));
        kv.set("data_fingerprint", data_fingerprint(data));
        kv.set("ensemble_fingerprint", ensemble_fingerprint(ensemble));
        for (const auto& m : ensemble.members)
            kv.set("member_" + std::to_string(m.config.index), m.model.fingerprint());
        for (const auto& e : KeyValueFile::parse(config_to_text(config)).entries) kv.set(e.key, e.value, "model");
        write_lock_record(out, "train-ensemble", kv);
        os << "trained " << ensemble.members.size() << " members, ensemble " << ensemble_fingerprint(ensemble) << '\n';
    }
};

// ---- score ------------------------------------------------------------------

fs::path meta_path(const fs::path& scores) {
    auto p = scores;
    p += ".meta";
    return p;
}

struct ScoresMeta {
    std::string method;
    std::string model_fingerprint;
};

std::optional<ScoresMeta> read_meta(const fs::path& scores) {
    if (!fs::exists(meta_path(scores))) return std::nullopt;
    const auto kv = KeyValueFile::read(meta_path(scores));
    return ScoresMeta{kv.get("method"), kv.get("model_fingerprint")};
}

void check_thresholds(const ThresholdSet& t, Method method, const std::string& model_fp) {
    if (t.method != method)
        throw FingerprintMismatchError("thresholds were calibrated for method '" + to_string(t.method) +
                                       "', refusing to apply them to '" + to_string(method) + "' scores");
    if (!t.model_fingerprint.empty() && !model_fp.empty() && t.model_fingerprint != model_fp)
        throw FingerprintMismatchError("thresholds belong to model " + t.model_fingerprint + ", scores come from " +
                                       model_fp);
}

struct ScoreCommand {
    std::string model_path, ensemble_dir, manifest, idx_images, idx_labels, split = "test", origin = "ID";
    std::string method = "energy";
    double temperature = kDefaultTemperature;
    std::string thresholds, output, predictions;
    Index malignant = -1;

    void add(CLI::App* app) {
        app->add_option("--model", model_path, "Checkpoint manifest");
        app->add_option("--ensemble", ensemble_dir, "Ensemble directory");
        app->add_option("--manifest", manifest);
        app->add_option("--idx-images", idx_images);
        app->add_option("--idx-labels", idx_labels);
        app->add_option("--split", split, "Manifest split to score (or all)")->capture_default_str();
        app->add_option("--origin", origin, "ID or OOD")->capture_default_str();
        app->add_option("--thresholds", thresholds, "Energy thresholds; combined becomes the gate margin");
        app->add_option("--out", output, "Scores CSV")->required();
        app->add_option("--predictions", predictions, "Optional classification CSV");
        app->add_option("--malignant-class", malignant, "Malignant class index (default: last class)");
    }

    void run(Method method_value, double temp, std::ostream& os) const {
        const Origin org = parse_origin(origin);
        const bool use_ensemble = method_value == Method::ensemble || method_value == Method::ensemble_weighted;
        std::optional<MultiExitModel> model;
        std::optional<Ensemble> ensemble;
        std::string fingerprint;
        Index input_size = 0, classes = 0;
        if (use_ensemble) {
            if (ensemble_dir.empty()) throw InputError("--ensemble is required for method " + to_string(method_value));
            require_file(ensemble_dir, "ensemble directory");
            ensemble = load_ensemble(ensemble_dir);
            fingerprint = ensemble_fingerprint(*ensemble);
            input_size = ensemble->members.front().model.config().input_size;
            classes = ensemble->members.front().model.config().num_classes;
        } else {
            if (model_path.empty()) throw InputError("--model is required for method " + to_string(method_value));
            require_file(model_path, "checkpoint");
            model = load(model_path);
            fingerprint = model->fingerprint();
            input_size = model->config().input_size;
            classes = model->config().num_classes;
        }
        const Index malignant_class = malignant >= 0 ? malignant : classes - 1;
        if (malignant_class >= classes) throw InputError("--malignant-class outside the model's classes");

        std::optional<ThresholdSet> gate_thresholds;
        if (!thresholds.empty()) {
            require_file(thresholds, "thresholds file");
            gate_thresholds = ThresholdSet::load(thresholds);
            check_thresholds(*gate_thresholds, method_value, fingerprint);
            if (method_value != Method::energy) throw InputError("--thresholds only applies to the energy method");
        }

        const Dataset data = load_inputs(manifest, idx_images, idx_labels, split, input_size, std::nullopt);
        std::vector<ScoreRecord> records;
        std::ostringstream pred;
        pred << "sample_id,label,predicted,malignant_score,cancer\n";
        for (const auto& s : data) {
            ScoreRecord r;
            r.sample_id = s.id;
            r.method = method_value;
            r.origin = org;
            Index predicted = 0;
            double malignant_score_value = 0.0;
            if (use_ensemble) {
                const EnsembleOutput o = ensemble_predict(*ensemble, s.image);
                r.combined = method_value == Method::ensemble ? o.id_score() : o.weighted_id_score();
                predicted = o.vote;
                malignant_score_value = o.mean[malignant_class];
            } else {
                const ExitLogits logits = model->forward(s.image);
                if (method_value == Method::softmax) {
                    r.combined = msp_score(logits.final_logits());
                } else {
                    for (const auto& z : logits.exits) r.exit_scores.push_back(energy_id_score(z, temp));
                    r.combined = gate_thresholds ? gate_margin(r.exit_scores, *gate_thresholds) : r.exit_scores.back();
                }
                const Eigen::VectorXd p = softmax(logits.final_logits());
                predicted = argmax(p);
                malignant_score_value = p[malignant_class];
            }
            records.push_back(std::move(r));
            pred << s.id << ',' << s.label << ',' << predicted << ',' << format_double(malignant_score_value) << ','
                 << (s.label == malignant_class ? 1 : 0) << '\n';
        }
        const fs::path out_path(output);
        if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
        write_scores(out_path, records);
        KeyValueFile meta;
        meta.set("method", to_string(method_value));
        meta.set("model_fingerprint", fingerprint);
        meta.set("temperature", format_double(temp));
        meta.set("data_fingerprint", data_fingerprint(data));
        meta.set("gated", gate_thresholds ? "yes" : "no");
        meta.write(meta_path(out_path));
        if (!predictions.empty()) write_file(predictions, pred.str());
        os << "scored " << records.size() << " samples with " << to_string(method_value) << '\n';
    }
};

// ---- calibrate --------------------------------------------------------------

struct CalibrateCommand {
    std::string scores, output;

    void add(CLI::App* app) {
        app->add_option("--scores", scores, "ID calibration scores CSV")->required();
        app->add_option("--out", output, "Thresholds file")->required();
    }

    void run(double quantile, std::ostream& os) const {
        require_file(scores, "scores file");
        const auto records = read_scores(scores);
        if (records.empty()) throw InputError("scores file '" + scores + "' is empty");
        const Method method = records.front().method;
        for (const auto& r : records) {
            if (r.method != method) throw InputError("scores file mixes methods");
            if (r.origin != Origin::id) throw InputError("calibration needs ID scores, '" + r.sample_id + "' is OOD");
        }
        std::vector<std::vector<double>> columns;
        if (method == Method::energy) {
            for (std::size_t e = 0; e < records.front().exit_scores.size(); ++e) columns.push_back(exit_column(records, e));
            if (columns.empty()) throw InputError("energy scores carry no exit columns");
        } else {
            columns.push_back(combined_scores(records));
        }
        ThresholdSet t = calibrate(columns, quantile);
        t.method = method;
        if (auto meta = read_meta(scores)) {
            if (parse_method(meta->method) != method) throw FingerprintMismatchError("scores file and its .meta disagree on the method");
            t.model_fingerprint = meta->model_fingerprint;
        }
        t.save(output);
        os << "calibrated " << columns.size() << " threshold(s) at q=" << format_double(quantile) << '\n';
    }
};

// ---- evaluate ---------------------------------------------------------------

struct EvaluateCommand {
    std::string id_scores, thresholds, predictions, out;
    std::vector<std::string> ood;

    void add(CLI::App* app) {
        app->add_option("--id", id_scores, "ID scores CSV")->required();
        app->add_option("--ood", ood, "OOD scores as name=path (repeatable)")->required();
        app->add_option("--thresholds", thresholds, "Energy thresholds for the all-exit gate");
        app->add_option("--predictions", predictions, "ID predictions CSV from score --predictions");
        app->add_option("--out", out, "Output directory")->required();
    }

    void run(double quantile, std::ostream& os) const {
        require_file(id_scores, "scores file");
        auto id_records = read_scores(id_scores);
        if (id_records.empty()) throw InputError("ID scores file is empty");
        const Method method = id_records.front().method;
        const auto id_meta = read_meta(id_scores);
        const std::string model_fp = id_meta ? id_meta->model_fingerprint : std::string{};

        std::optional<ThresholdSet> gate_set;
        if (!thresholds.empty()) {
            require_file(thresholds, "thresholds file");
            gate_set = ThresholdSet::load(thresholds);
            check_thresholds(*gate_set, method, model_fp);
            if (method != Method::energy) throw InputError("--thresholds only applies to energy scores");
        }
        auto prepare = [&](std::vector<ScoreRecord>& records, const std::string& path) {
            for (auto& r : records) {
                if (r.method != method)
                    throw FingerprintMismatchError("'" + path + "' holds " + to_string(r.method) + " scores, expected " +
                                                   to_string(method));
                if (gate_set) r.combined = gate_margin(r.exit_scores, *gate_set);
            }
            const auto meta = read_meta(path);
            if (meta && !model_fp.empty() && meta->model_fingerprint != model_fp)
                throw FingerprintMismatchError("'" + path + "' was scored by model " + meta->model_fingerprint +
                                               ", the ID scores by " + model_fp);
        };
        prepare(id_records, id_scores);

        MethodScores ms;
        ms.method = to_string(method);
        ms.id = combined_scores(id_records);
        const bool per_exit = method == Method::energy && !id_records.front().exit_scores.empty();
        if (per_exit)
            for (std::size_t e = 0; e < id_records.front().exit_scores.size(); ++e)
                ms.id_exits.push_back(exit_column(id_records, e));

        std::vector<std::string> set_names;
        for (const auto& spec : ood) {
            const auto eq = spec.find('=');
            if (eq == std::string::npos || eq == 0) throw InputError("--ood expects name=path, got '" + spec + "'");
            const std::string name = spec.substr(0, eq), path = spec.substr(eq + 1);
            require_file(path, "scores file");
            auto records = read_scores(path);
            if (records.empty()) throw InputError("OOD scores file '" + path + "' is empty");
            prepare(records, path);
            ms.ood[name] = combined_scores(records);
            if (per_exit) {
                auto& cols = ms.ood_exits[name];
                for (std::size_t e = 0; e < ms.id_exits.size(); ++e) cols.push_back(exit_column(records, e));
            }
            set_names.push_back(name);
        }

        if (!predictions.empty()) {
            require_file(predictions, "predictions file");
            std::map<std::string, double> ood_score;
            for (const auto& r : id_records) ood_score[r.sample_id] = r.combined;
            const auto lines = split(read_file(predictions), '\n');
            if (lines.empty() || trim(lines[0]) != "sample_id,label,predicted,malignant_score,cancer")
                throw FormatError("predictions file has an unexpected header");
            for (std::size_t i = 1; i < lines.size(); ++i) {
                if (trim(lines[i]).empty()) continue;
                const auto f = split(trim(lines[i]), ',');
                if (f.size() != 5) throw FormatError("predictions line " + std::to_string(i + 1) + ": expected 5 fields");
                auto it = ood_score.find(f[0]);
                if (it == ood_score.end())
                    throw InputError("prediction for '" + f[0] + "' has no matching ID score");
                ms.classification.push_back({it->second, parse_double(f[3]), f[4] == "1"});
            }
        }

        (void)quantile;
        const std::vector<MethodScores> methods{ms};
        const MetricsReport report = build_report(methods, set_names);
        write_report(report, out);
        os << format_tables(report);
    }
};

// ---- corrupt ----------------------------------------------------------------

struct CorruptCommand {
    std::string manifest, split = "test", out;
    std::vector<std::string> ops{"dark", "blur", "noise"};
    CorruptionConfig config;
    Index size = 0;

    void add(CLI::App* app) {
        app->add_option("--manifest", manifest, "Input manifest")->required();
        app->add_option("--split", split, "Split to corrupt (or all)")->capture_default_str();
        app->add_option("--out", out, "Output directory")->required();
        app->add_option("--ops", ops, "Subset of dark,blur,noise")->delimiter(',')->capture_default_str();
        app->add_option("--dark-count-min", config.dark_count_min)->capture_default_str();
        app->add_option("--dark-count-max", config.dark_count_max)->capture_default_str();
        app->add_option("--dark-size-min", config.dark_size_min)->capture_default_str();
        app->add_option("--dark-size-max", config.dark_size_max)->capture_default_str();
        app->add_option("--blur-min", config.blur_sigma_min)->capture_default_str();
        app->add_option("--blur-max", config.blur_sigma_max)->capture_default_str();
        app->add_option("--noise-min", config.noise_std_min)->capture_default_str();
        app->add_option("--noise-max", config.noise_std_max)->capture_default_str();
        app->add_option("--size", size, "Resize to size x size first (0 keeps each image's size)");
    }

    void run(std::uint64_t seed, std::ostream& os) const {
        require_file(manifest, "manifest");
        CorruptionConfig c = config;
        c.seed = seed;
        c.dark_region = c.blur = c.noise = false;
        for (const auto& op : ops) {
            if (op == "dark") c.dark_region = true;
            else if (op == "blur") c.blur = true;
            else if (op == "noise") c.noise = true;
            else throw InputError("unknown corruption '" + op + "' (dark, blur, noise)");
        }
        c.validate();
        const auto in = DatasetManifest::read(manifest);
        std::optional<Split> which;
        if (split != "all") which = parse_split(split);
        DirLock lock(out);
        DatasetManifest result;
        int line = 2;
        std::size_t n = 0;
        for (const auto& row : in.rows) {
            if (which && row.split != *which) continue;
            Tensor img = to_tensor(read_image(in.root / row.path));
            if (size > 0) img = resize_bilinear(img, size, size);
            const std::string name = "corrupt_" + std::to_string(n) + ".png";
            write_png(fs::path(out) / name, to_gray(corrupt(img, c, n)));
            result.rows.push_back({name, row.label, Split::test, line++});
            ++n;
        }
        result.write(fs::path(out) / "manifest.csv");
        os << "corrupted " << n << " images into " << out << '\n';
    }
};

// ---- report -----------------------------------------------------------------

struct ReportCommand {
    std::vector<std::string> inputs;
    std::string out;

    void add(CLI::App* app) {
        app->add_option("--eval", inputs, "Evaluation output directories")->required();
        app->add_option("--out", out, "Report directory")->required();
    }

    void run(std::ostream& os) const {
        MetricsReport merged;
        for (const auto& dir : inputs) {
            require_file(fs::path(dir) / "metrics.csv", "metrics file");
            const auto r = read_report(dir);
            merged.ood.insert(merged.ood.end(), r.ood.begin(), r.ood.end());
            merged.exits.insert(merged.exits.end(), r.exits.begin(), r.exits.end());
            merged.classification.insert(merged.classification.end(), r.classification.begin(), r.classification.end());
        }
        fs::create_directories(out);
        write_report(merged, out);
        const std::string tables = format_tables(merged);
        write_file(fs::path(out) / "report.txt", tables);
        os << tables;
    }
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Out-of-distribution detection toolkit: multi-exit energy, max-softmax and deep-ensemble scores", "oodx"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_config("--config", "", "Key-value config file; [section] names match subcommands");
    app.allow_config_extras(CLI::config_extras_mode::error);

    std::uint64_t seed = 0;
    std::string method_text = "energy";
    double temperature = kDefaultTemperature;
    double quantile = kDefaultQuantile;
    app.add_option("--seed", seed, "Run seed")->capture_default_str();
    app.add_option("--method", method_text, "softmax | energy | ensemble | ensemble-weighted")->capture_default_str();
    app.add_option("--temperature", temperature, "Energy temperature")->capture_default_str();
    app.add_option("--quantile", quantile, "Fraction of ID data accepted by each threshold")->capture_default_str();

    SynthCommand synth;
    TrainCommand train_cmd;
    TrainEnsembleCommand ensemble_cmd;
    ScoreCommand score;
    CalibrateCommand calibrate_cmd;
    EvaluateCommand evaluate;
    CorruptCommand corrupt_cmd;
    ReportCommand report;

    std::function<void()> action;
    auto* s = app.add_subcommand("synth", "Generate synthetic blob or uniform-noise image sets");
    synth.add(s);
    s->callback([&] { action = [&] { synth.run(seed, out); }; });
    auto* t = app.add_subcommand("train", "Train a multi-exit classifier");
    train_cmd.add(t);
    t->callback([&] { action = [&] { train_cmd.run(seed, out); }; });
    auto* te = app.add_subcommand("train-ensemble", "Train a diversified deep ensemble");
    ensemble_cmd.add(te);
    te->callback([&] { action = [&] { ensemble_cmd.run(seed, out); }; });
    auto* sc = app.add_subcommand("score", "Compute OOD scores for a dataset");
    score.add(sc);
    sc->callback([&] { action = [&] { score.run(parse_method(method_text), temperature, out); }; });
    auto* ca = app.add_subcommand("calibrate", "Per-exit thresholds from ID scores");
    calibrate_cmd.add(ca);
    ca->callback([&] { action = [&] { calibrate_cmd.run(quantile, out); }; });
    auto* ev = app.add_subcommand("evaluate", "AUC, FPR95, ROC curves and classification AUC");
    evaluate.add(ev);
    ev->callback([&] { action = [&] { evaluate.run(quantile, out); }; });
    auto* co = app.add_subcommand("corrupt", "Write dark-region/blur/noise corrupted copies of a dataset");
    corrupt_cmd.add(co);
    co->callback([&] { action = [&] { corrupt_cmd.run(seed, out); }; });
    auto* re = app.add_subcommand("report", "Merge evaluation outputs into summary tables");
    report.add(re);
    re->callback([&] { action = [&] { report.run(out); }; });
    for (auto* sub : {s, t, te, sc, ca, ev, co, re}) sub->configurable();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    if (!reversed.empty()) reversed.pop_back();
    try {
        app.parse(std::move(reversed));
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    }

    try {
        if (!(temperature > 0.0)) throw InputError("--temperature must be positive");
        if (!(quantile > 0.0 && quantile < 1.0)) throw InputError("--quantile must lie in (0,1)");
        if (action) action();
        return kExitOk;
    } catch (const InputError& e) {
        err << "error: " << e.what() << '\n';
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
    } catch (const DataError& e) {
        err << "error: " << e.what() << '\n';
    } catch (const FormatError& e) {
        err << "error: " << e.what() << '\n';
    } catch (const LoadError& e) {
        err << "error: " << e.what() << '\n';
    } catch (const CalibrationError& e) {
        err << "error: " << e.what() << '\n';
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << '\n';
        return kExitInternal;
    }
    return kExitUsage;
}

}  // namespace oodx::cli
