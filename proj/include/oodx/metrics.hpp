#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace oodx {

// Conventions: ID is the positive class and a sample is accepted as ID when its
// score is >= the threshold. Higher scores therefore mean "more in-distribution".

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
    bool operator==(const RocPoint&) const = default;
};

/// Points from (0,0) to (1,1), one per distinct threshold in the union of scores.
struct RocCurve {
    std::vector<RocPoint> points;
};

RocCurve roc(std::span<const double> id_scores, std::span<const double> ood_scores);

/// Trapezoidal area under a curve.
double trapezoid_area(const RocCurve& curve);

/// Area under the ROC curve (trapezoidal, ties get half credit).
double auc(std::span<const double> id_scores, std::span<const double> ood_scores);

/// Same quantity from average ranks (Mann-Whitney U / (n m)).
double auc_rank(std::span<const double> id_scores, std::span<const double> ood_scores);

/// Fraction of OOD scores accepted at the threshold that keeps `tpr_target` of the ID scores.
double fpr_at_tpr(std::span<const double> id_scores, std::span<const double> ood_scores, double tpr_target = 0.95);

/// An ID test sample seen by both the OOD detector and the cancer classifier.
struct ClassificationSample {
    double ood_score = 0.0;
    double malignant_score = 0.0;
    bool cancer = false;
};

/// Cancer-vs-non-cancer AUC from the malignant score. Throws UndefinedAucError for one class.
double classification_auc(std::span<const ClassificationSample> samples);

/// Samples kept after flagging the lowest-scoring `fnr` fraction of the ID set as OOD.
std::vector<ClassificationSample> drop_flagged(std::span<const ClassificationSample> samples, double fnr = 0.05);

double auc_at_fnr(std::span<const ClassificationSample> samples, double fnr = 0.05);

/// Everything the report needs for one method.
struct MethodScores {
    std::string method;
    std::vector<double> id;
    std::map<std::string, std::vector<double>> ood;
    /// Optional per-exit columns: id_exits[e] and ood_exits[set][e].
    std::vector<std::vector<double>> id_exits;
    std::map<std::string, std::vector<std::vector<double>>> ood_exits;
    std::vector<ClassificationSample> classification;
};

struct OodRow {
    std::string method;
    std::string ood_set;
    std::optional<double> auc_pct;
    std::optional<double> fpr95_pct;
    bool operator==(const OodRow&) const = default;
};

struct ExitRow {
    std::string method;
    std::string ood_set;
    int exit = 1;
    double auc_pct = 0.0;
    double fpr95_pct = 0.0;
    bool operator==(const ExitRow&) const = default;
};

struct ClassificationRow {
    std::string method;
    std::optional<double> auc_pct;
    std::optional<double> auc_fnr5_pct;
    bool operator==(const ClassificationRow&) const = default;
};

struct MetricsReport {
    std::vector<OodRow> ood;
    std::vector<ExitRow> exits;
    std::vector<ClassificationRow> classification;
    /// Keyed by (method, ood_set).
    std::map<std::pair<std::string, std::string>, RocCurve> curves;
};

/// Builds every table. When `ood_sets` is given, each method gets a row for every set
/// and combinations without scores are left empty rather than zero.
MetricsReport build_report(std::span<const MethodScores> methods, std::span<const std::string> ood_sets = {});

std::string metrics_csv(const MetricsReport& report);
std::string exits_csv(const MetricsReport& report);
std::string classification_csv(const MetricsReport& report);
std::string roc_csv(const RocCurve& curve);

std::vector<OodRow> parse_metrics_csv(const std::string& text);
std::vector<ExitRow> parse_exits_csv(const std::string& text);
std::vector<ClassificationRow> parse_classification_csv(const std::string& text);

/// metrics.csv, per_exit.csv, classification.csv (when non-empty) and roc_<method>_<set>.csv.
void write_report(const MetricsReport& report, const std::filesystem::path& dir);
/// Reads back the tables (not the curves) written by write_report.
MetricsReport read_report(const std::filesystem::path& dir);

/// Plain-text tables: OOD detection per method and set, per-exit AUC/FPR95, classification.
std::string format_tables(const MetricsReport& report);

}  // namespace oodx
