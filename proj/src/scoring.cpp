#include "oodx/scoring.hpp"

#include "oodx/text.hpp"

#include <algorithm>
#include <limits>
#include <sstream>

namespace oodx {

std::string to_string(Method method) {
    switch (method) {
        case Method::softmax: return "softmax";
        case Method::energy: return "energy";
        case Method::ensemble: return "ensemble";
        case Method::ensemble_weighted: return "ensemble-weighted";
    }
    return "?";
}

Method parse_method(const std::string& text) {
    if (text == "softmax") return Method::softmax;
    if (text == "energy") return Method::energy;
    if (text == "ensemble") return Method::ensemble;
    if (text == "ensemble-weighted" || text == "ensemble_weighted") return Method::ensemble_weighted;
    throw InputError("unknown method '" + text + "' (softmax, energy, ensemble, ensemble-weighted)");
}

std::string to_string(Origin origin) { return origin == Origin::id ? "ID" : "OOD"; }

Origin parse_origin(const std::string& text) {
    if (text == "ID" || text == "id") return Origin::id;
    if (text == "OOD" || text == "ood") return Origin::ood;
    throw InputError("unknown origin '" + text + "' (ID or OOD)");
}

double quantile_threshold(std::span<const double> scores, double q) {
    if (scores.empty()) throw InputError("quantile of an empty score list");
    if (!(q > 0.0 && q < 1.0)) throw InputError("quantile must lie in (0,1)");
    std::vector<double> sorted(scores.begin(), scores.end());
    std::sort(sorted.begin(), sorted.end());
    // The tiny offset keeps e.g. (1 - 0.9) * 10 = 0.99999... from flooring to 0.
    const auto k = static_cast<std::size_t>(std::floor((1.0 - q) * static_cast<double>(sorted.size()) + 1e-9));
    return sorted[std::min(k, sorted.size() - 1)];
}

std::string fingerprint_scores(std::span<const double> scores) {
    std::uint64_t h = fnv1a(std::string_view("scores"));
    for (double s : scores) h = fnv1a(format_double(s) + ";", h);
    return hex64(h);
}

ThresholdSet calibrate(std::span<const std::vector<double>> id_scores, double q) {
    if (id_scores.empty()) throw CalibrationError("calibration needs at least one exit");
    if (!(q > 0.0 && q < 1.0)) throw CalibrationError("calibration quantile must lie in (0,1)");
    ThresholdSet set;
    set.quantile = q;
    std::uint64_t h = fnv1a(std::string_view("calibration"));
    for (std::size_t e = 0; e < id_scores.size(); ++e) {
        const auto& scores = id_scores[e];
        if (scores.size() < kMinCalibrationScores)
            throw CalibrationError("exit " + std::to_string(e + 1) + " has " + std::to_string(scores.size()) +
                                   " ID scores, calibration needs at least " + std::to_string(kMinCalibrationScores));
        for (double s : scores)
            if (!std::isfinite(s)) throw CalibrationError("non-finite calibration score on exit " + std::to_string(e + 1));
        set.thresholds.push_back(quantile_threshold(scores, q));
        h = fnv1a(fingerprint_scores(scores), h);
    }
    set.fingerprint = hex64(h);
    return set;
}

Origin gate(std::span<const double> exit_scores, const ThresholdSet& thresholds) {
    return gate_margin(exit_scores, thresholds) >= 0.0 ? Origin::id : Origin::ood;
}

double gate_margin(std::span<const double> exit_scores, const ThresholdSet& thresholds) {
    if (exit_scores.size() != thresholds.thresholds.size())
        throw InputError("gate needs " + std::to_string(thresholds.thresholds.size()) + " exit scores, got " +
                         std::to_string(exit_scores.size()));
    double margin = std::numeric_limits<double>::infinity();
    for (std::size_t e = 0; e < exit_scores.size(); ++e) {
        if (!std::isfinite(exit_scores[e])) throw InputError("gate: exit " + std::to_string(e + 1) + " score is missing");
        margin = std::min(margin, exit_scores[e] - thresholds.thresholds[e]);
    }
    return margin;
}

void ThresholdSet::save(const std::filesystem::path& path) const {
    KeyValueFile kv;
    kv.set("method", to_string(method));
    kv.set("quantile", format_double(quantile));
    kv.set("exits", std::to_string(thresholds.size()));
    for (std::size_t e = 0; e < thresholds.size(); ++e)
        kv.set("tau" + std::to_string(e + 1), format_double(thresholds[e]));
    kv.set("fingerprint", fingerprint);
    kv.set("model_fingerprint", model_fingerprint.empty() ? "-" : model_fingerprint);
    kv.write(path);
}

ThresholdSet ThresholdSet::load(const std::filesystem::path& path) {
    const auto kv = KeyValueFile::read(path);
    ThresholdSet set;
    set.method = parse_method(kv.get("method"));
    set.quantile = parse_double(kv.get("quantile"));
    if (!(set.quantile > 0.0 && set.quantile < 1.0)) throw FormatError("thresholds quantile must lie in (0,1)");
    const auto exits = parse_int(kv.get("exits"));
    if (exits < 1) throw FormatError("thresholds file needs at least one exit");
    for (long long e = 1; e <= exits; ++e) set.thresholds.push_back(parse_double(kv.get("tau" + std::to_string(e))));
    set.fingerprint = kv.get("fingerprint");
    set.model_fingerprint = kv.get("model_fingerprint");
    if (set.model_fingerprint == "-") set.model_fingerprint.clear();
    return set;
}

namespace {
constexpr const char* kScoresHeader = "sample_id,method,exit1,exit2,exit3,combined,origin";
}

std::string scores_csv(std::span<const ScoreRecord> records) {
    std::ostringstream os;
    os << kScoresHeader << '\n';
    for (const auto& r : records) {
        if (r.sample_id.find_first_of(",\n\"") != std::string::npos)
            throw InputError("sample id '" + r.sample_id + "' contains a comma, quote or newline");
        if (r.exit_scores.size() > 3) throw InputError("at most three exit scores per record");
        os << r.sample_id << ',' << to_string(r.method);
        for (std::size_t e = 0; e < 3; ++e) {
            os << ',';
            if (e < r.exit_scores.size()) os << format_double(r.exit_scores[e]);
        }
        os << ',' << format_double(r.combined) << ',' << to_string(r.origin) << '\n';
    }
    return os.str();
}

void write_scores(const std::filesystem::path& path, std::span<const ScoreRecord> records) {
    write_file(path, scores_csv(records));
}

std::vector<ScoreRecord> read_scores(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    const auto lines = split(text, '\n');
    if (lines.empty() || trim(lines[0]) != kScoresHeader)
        throw FormatError("'" + path.string() + "' does not start with the header " + kScoresHeader);
    std::vector<ScoreRecord> out;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        std::string line = lines[i];
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split(line, ',');
        const std::string where = path.string() + ":" + std::to_string(i + 1);
        if (fields.size() != 7) throw FormatError(where + ": expected 7 fields, got " + std::to_string(fields.size()));
        ScoreRecord r;
        try {
            r.sample_id = fields[0];
            r.method = parse_method(fields[1]);
            for (std::size_t e = 2; e < 5; ++e) {
                if (fields[e].empty()) break;
                r.exit_scores.push_back(parse_double(fields[e]));
            }
            r.combined = parse_double(fields[5]);
            r.origin = parse_origin(fields[6]);
        } catch (const Error& err) {
            throw FormatError(where + ": " + err.what());
        }
        if (!std::isfinite(r.combined)) throw FormatError(where + ": combined score is not finite");
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<double> combined_scores(std::span<const ScoreRecord> records) {
    std::vector<double> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(r.combined);
    return out;
}

std::vector<double> exit_column(std::span<const ScoreRecord> records, std::size_t exit) {
    std::vector<double> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        if (exit >= r.exit_scores.size())
            throw InputError("record '" + r.sample_id + "' has no score for exit " + std::to_string(exit + 1));
        out.push_back(r.exit_scores[exit]);
    }
    return out;
}

}  // namespace oodx
