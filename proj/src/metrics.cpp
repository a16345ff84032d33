#include "oodx/metrics.hpp"

#include "oodx/error.hpp"
#include "oodx/scoring.hpp"
#include "oodx/text.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

namespace oodx {

namespace {

void require_scores(std::span<const double> id, std::span<const double> ood) {
    if (id.empty() || ood.empty()) throw InputError("ROC needs non-empty ID and OOD score lists");
    for (double s : id)
        if (!std::isfinite(s)) throw InputError("non-finite ID score");
    for (double s : ood)
        if (!std::isfinite(s)) throw InputError("non-finite OOD score");
}

std::vector<double> sorted_desc(std::span<const double> v) {
    std::vector<double> out(v.begin(), v.end());
    std::sort(out.begin(), out.end(), std::greater<>());
    return out;
}

}  // namespace

RocCurve roc(std::span<const double> id_scores, std::span<const double> ood_scores) {
    require_scores(id_scores, ood_scores);
    const auto id = sorted_desc(id_scores);
    const auto ood = sorted_desc(ood_scores);
    const double n = static_cast<double>(id.size());
    const double m = static_cast<double>(ood.size());

    RocCurve curve;
    curve.points.push_back({0.0, 0.0});
    std::size_t i = 0, j = 0;
    while (i < id.size() || j < ood.size()) {
        // Next threshold: the largest score not yet passed.
        double tau = -std::numeric_limits<double>::infinity();
        if (i < id.size()) tau = id[i];
        if (j < ood.size()) tau = std::max(tau, ood[j]);
        while (i < id.size() && id[i] >= tau) ++i;
        while (j < ood.size() && ood[j] >= tau) ++j;
        curve.points.push_back({static_cast<double>(j) / m, static_cast<double>(i) / n});
    }
    if (curve.points.back() != RocPoint{1.0, 1.0}) curve.points.push_back({1.0, 1.0});
    return curve;
}

double trapezoid_area(const RocCurve& curve) {
    double area = 0.0;
    for (std::size_t k = 1; k < curve.points.size(); ++k) {
        const auto& a = curve.points[k - 1];
        const auto& b = curve.points[k];
        area += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0;
    }
    return area;
}

double auc(std::span<const double> id_scores, std::span<const double> ood_scores) {
    return trapezoid_area(roc(id_scores, ood_scores));
}

double auc_rank(std::span<const double> id_scores, std::span<const double> ood_scores) {
    require_scores(id_scores, ood_scores);
    std::vector<std::pair<double, bool>> all;
    all.reserve(id_scores.size() + ood_scores.size());
    for (double s : id_scores) all.emplace_back(s, true);
    for (double s : ood_scores) all.emplace_back(s, false);
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

    double id_rank_sum = 0.0;
    for (std::size_t k = 0; k < all.size();) {
        std::size_t end = k;
        while (end < all.size() && all[end].first == all[k].first) ++end;
        const double avg_rank = (static_cast<double>(k + 1) + static_cast<double>(end)) / 2.0;
        for (std::size_t t = k; t < end; ++t)
            if (all[t].second) id_rank_sum += avg_rank;
        k = end;
    }
    const double n = static_cast<double>(id_scores.size());
    const double m = static_cast<double>(ood_scores.size());
    return (id_rank_sum - n * (n + 1.0) / 2.0) / (n * m);
}

double fpr_at_tpr(std::span<const double> id_scores, std::span<const double> ood_scores, double tpr_target) {
    require_scores(id_scores, ood_scores);
    const double tau = quantile_threshold(id_scores, tpr_target);
    const auto accepted = std::count_if(ood_scores.begin(), ood_scores.end(), [tau](double s) { return s >= tau; });
    return static_cast<double>(accepted) / static_cast<double>(ood_scores.size());
}

double classification_auc(std::span<const ClassificationSample> samples) {
    std::vector<double> pos, neg;
    for (const auto& s : samples) (s.cancer ? pos : neg).push_back(s.malignant_score);
    if (pos.empty() || neg.empty())
        throw UndefinedAucError("classification AUC is undefined: " + std::to_string(pos.size()) + " cancer and " +
                                std::to_string(neg.size()) + " non-cancer samples");
    return auc_rank(pos, neg);
}

std::vector<ClassificationSample> drop_flagged(std::span<const ClassificationSample> samples, double fnr) {
    if (samples.empty()) throw InputError("no samples to filter");
    if (!(fnr > 0.0 && fnr < 1.0)) throw InputError("fnr must lie in (0,1)");
    std::vector<double> scores;
    for (const auto& s : samples) scores.push_back(s.ood_score);
    const double tau = quantile_threshold(scores, 1.0 - fnr);
    std::vector<ClassificationSample> kept;
    for (const auto& s : samples)
        if (s.ood_score >= tau) kept.push_back(s);
    return kept;
}

double auc_at_fnr(std::span<const ClassificationSample> samples, double fnr) {
    return classification_auc(drop_flagged(samples, fnr));
}

MetricsReport build_report(std::span<const MethodScores> methods, std::span<const std::string> ood_sets) {
    MetricsReport report;
    for (const auto& m : methods) {
        std::vector<std::string> sets(ood_sets.begin(), ood_sets.end());
        for (const auto& [name, _] : m.ood)
            if (std::find(sets.begin(), sets.end(), name) == sets.end()) sets.push_back(name);
        for (const auto& set : sets) {
            OodRow row{m.method, set, std::nullopt, std::nullopt};
            auto it = m.ood.find(set);
            if (it != m.ood.end() && !m.id.empty() && !it->second.empty()) {
                row.auc_pct = 100.0 * auc(m.id, it->second);
                row.fpr95_pct = 100.0 * fpr_at_tpr(m.id, it->second);
                report.curves[{m.method, set}] = roc(m.id, it->second);
            }
            report.ood.push_back(row);
        }
        for (const auto& [set, columns] : m.ood_exits) {
            if (columns.size() != m.id_exits.size())
                throw InputError(m.method + "/" + set + ": exit count differs between ID and OOD scores");
            for (std::size_t e = 0; e < columns.size(); ++e)
                report.exits.push_back({m.method, set, static_cast<int>(e + 1), 100.0 * auc(m.id_exits[e], columns[e]),
                                        100.0 * fpr_at_tpr(m.id_exits[e], columns[e])});
        }
        if (!m.classification.empty()) {
            ClassificationRow row{m.method, std::nullopt, std::nullopt};
            try {
                row.auc_pct = 100.0 * classification_auc(m.classification);
            } catch (const UndefinedAucError&) {
            }
            try {
                row.auc_fnr5_pct = 100.0 * auc_at_fnr(m.classification);
            } catch (const UndefinedAucError&) {
            }
            report.classification.push_back(row);
        }
    }
    return report;
}

namespace {

std::string opt(const std::optional<double>& v) { return v ? format_double(*v) : std::string{}; }

std::optional<double> parse_opt(const std::string& s) {
    if (s.empty()) return std::nullopt;
    return parse_double(s);
}

// Rows of a CSV with the expected header; throws FormatError otherwise.
std::vector<std::vector<std::string>> csv_rows(const std::string& text, const std::string& header, std::size_t width) {
    const auto lines = split(text, '\n');
    if (lines.empty() || trim(lines[0]) != header) throw FormatError("expected CSV header '" + header + "'");
    std::vector<std::vector<std::string>> rows;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (trim(lines[i]).empty()) continue;
        auto fields = split(trim(lines[i]), ',');
        if (fields.size() != width)
            throw FormatError("line " + std::to_string(i + 1) + ": expected " + std::to_string(width) + " fields");
        rows.push_back(std::move(fields));
    }
    return rows;
}

constexpr const char* kMetricsHeader = "method,ood_set,auc_pct,fpr95_pct";
constexpr const char* kExitsHeader = "method,ood_set,exit,auc_pct,fpr95_pct";
constexpr const char* kClassificationHeader = "method,auc_pct,auc_fnr5_pct";

std::string file_token(const std::string& s) {
    std::string out;
    for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
    return out;
}

}  // namespace

std::string metrics_csv(const MetricsReport& report) {
    std::ostringstream os;
    os << kMetricsHeader << '\n';
    for (const auto& r : report.ood)
        os << r.method << ',' << r.ood_set << ',' << opt(r.auc_pct) << ',' << opt(r.fpr95_pct) << '\n';
    return os.str();
}

std::string exits_csv(const MetricsReport& report) {
    std::ostringstream os;
    os << kExitsHeader << '\n';
    for (const auto& r : report.exits)
        os << r.method << ',' << r.ood_set << ',' << r.exit << ',' << format_double(r.auc_pct) << ','
           << format_double(r.fpr95_pct) << '\n';
    return os.str();
}

std::string classification_csv(const MetricsReport& report) {
    std::ostringstream os;
    os << kClassificationHeader << '\n';
    for (const auto& r : report.classification)
        os << r.method << ',' << opt(r.auc_pct) << ',' << opt(r.auc_fnr5_pct) << '\n';
    return os.str();
}

std::string roc_csv(const RocCurve& curve) {
    std::ostringstream os;
    os << "fpr,tpr\n";
    for (const auto& p : curve.points) os << format_double(p.fpr) << ',' << format_double(p.tpr) << '\n';
    return os.str();
}

std::vector<OodRow> parse_metrics_csv(const std::string& text) {
    std::vector<OodRow> out;
    for (const auto& f : csv_rows(text, kMetricsHeader, 4)) out.push_back({f[0], f[1], parse_opt(f[2]), parse_opt(f[3])});
    return out;
}

std::vector<ExitRow> parse_exits_csv(const std::string& text) {
    std::vector<ExitRow> out;
    for (const auto& f : csv_rows(text, kExitsHeader, 5))
        out.push_back({f[0], f[1], static_cast<int>(parse_int(f[2])), parse_double(f[3]), parse_double(f[4])});
    return out;
}

std::vector<ClassificationRow> parse_classification_csv(const std::string& text) {
    std::vector<ClassificationRow> out;
    for (const auto& f : csv_rows(text, kClassificationHeader, 3)) out.push_back({f[0], parse_opt(f[1]), parse_opt(f[2])});
    return out;
}

void write_report(const MetricsReport& report, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_file(dir / "metrics.csv", metrics_csv(report));
    if (!report.exits.empty()) write_file(dir / "per_exit.csv", exits_csv(report));
    if (!report.classification.empty()) write_file(dir / "classification.csv", classification_csv(report));
    for (const auto& [key, curve] : report.curves)
        write_file(dir / ("roc_" + file_token(key.first) + "_" + file_token(key.second) + ".csv"), roc_csv(curve));
}

MetricsReport read_report(const std::filesystem::path& dir) {
    MetricsReport report;
    report.ood = parse_metrics_csv(read_file(dir / "metrics.csv"));
    if (std::filesystem::exists(dir / "per_exit.csv")) report.exits = parse_exits_csv(read_file(dir / "per_exit.csv"));
    if (std::filesystem::exists(dir / "classification.csv"))
        report.classification = parse_classification_csv(read_file(dir / "classification.csv"));
    return report;
}

std::string format_tables(const MetricsReport& report) {
    std::ostringstream os;
    auto cell = [](const std::optional<double>& v) {
        if (!v) return std::string("-");
        std::ostringstream c;
        c << std::fixed << std::setprecision(1) << *v;
        return c.str();
    };

    os << "OOD detection\n";
    os << std::left << std::setw(20) << "Method" << std::setw(20) << "OOD data" << std::right << std::setw(10)
       << "AUC (%)" << std::setw(12) << "FPR95 (%)" << '\n';
    std::string last;
    for (const auto& r : report.ood) {
        os << std::left << std::setw(20) << (r.method == last ? "" : r.method) << std::setw(20) << r.ood_set
           << std::right << std::setw(10) << cell(r.auc_pct) << std::setw(12) << cell(r.fpr95_pct) << '\n';
        last = r.method;
    }

    if (!report.exits.empty()) {
        // One row per (method, set); AUC columns for every exit, then FPR95 columns.
        std::vector<std::pair<std::string, std::string>> keys;
        int exits = 0;
        for (const auto& r : report.exits) {
            std::pair key{r.method, r.ood_set};
            if (std::find(keys.begin(), keys.end(), key) == keys.end()) keys.push_back(key);
            exits = std::max(exits, r.exit);
        }
        os << "\nPer-exit OOD detection\n";
        os << std::left << std::setw(20) << "Method" << std::setw(20) << "OOD data" << std::right;
        for (int e = 1; e <= exits; ++e) os << std::setw(12) << ("AUC e" + std::to_string(e));
        for (int e = 1; e <= exits; ++e) os << std::setw(12) << ("FPR95 e" + std::to_string(e));
        os << '\n';
        for (const auto& key : keys) {
            std::vector<std::optional<double>> aucs(static_cast<std::size_t>(exits)), fprs(static_cast<std::size_t>(exits));
            for (const auto& r : report.exits)
                if (r.method == key.first && r.ood_set == key.second) {
                    aucs[static_cast<std::size_t>(r.exit - 1)] = r.auc_pct;
                    fprs[static_cast<std::size_t>(r.exit - 1)] = r.fpr95_pct;
                }
            os << std::left << std::setw(20) << key.first << std::setw(20) << key.second << std::right;
            for (const auto& v : aucs) os << std::setw(12) << cell(v);
            for (const auto& v : fprs) os << std::setw(12) << cell(v);
            os << '\n';
        }
    }

    if (!report.classification.empty()) {
        os << "\nClassification (cancer vs non-cancer)\n";
        os << std::left << std::setw(20) << "Method" << std::right << std::setw(10) << "AUC (%)" << std::setw(22)
           << "AUC at FNR5 (%)" << '\n';
        for (const auto& r : report.classification)
            os << std::left << std::setw(20) << r.method << std::right << std::setw(10) << cell(r.auc_pct)
               << std::setw(22) << cell(r.auc_fnr5_pct) << '\n';
    }
    return os.str();
}

}  // namespace oodx
