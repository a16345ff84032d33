#include <doctest.h>

#include "fixtures.hpp"
#include "oodx/error.hpp"
#include "oodx/metrics.hpp"
#include "oodx/scoring.hpp"
#include "oodx/text.hpp"
#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <random>

using namespace oodx;

namespace {

std::vector<double> range(int lo, int hi) {
    std::vector<double> v;
    for (int i = lo; i <= hi; ++i) v.push_back(i);
    return v;
}

std::vector<double> draws(std::size_t n, std::mt19937_64& rng, bool ties) {
    std::vector<double> v;
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_int_distribution<int> level(0, 6);
    for (std::size_t i = 0; i < n; ++i) v.push_back(ties ? level(rng) * 0.5 : g(rng));
    return v;
}

bool on_curve(const RocCurve& c, double fpr, double tpr) {
    return std::any_of(c.points.begin(), c.points.end(),
                       [&](const RocPoint& p) { return std::abs(p.fpr - fpr) < 1e-12 && std::abs(p.tpr - tpr) < 1e-12; });
}

}  // namespace

TEST_CASE("roc examples") {
    const std::vector<double> id{3, 4, 5}, ood{1, 2};
    const RocCurve c = roc(id, ood);
    CHECK(c.points.front() == RocPoint{0, 0});
    CHECK(c.points.back() == RocPoint{1, 1});
    CHECK(on_curve(c, 0.0, 1.0));
    CHECK(auc(id, ood) == 1.0);

    const std::vector<double> one{0.7};
    CHECK(auc(one, one) == 0.5);

    const std::vector<double> a{1, 3}, b{2, 4};
    CHECK(auc(a, b) == 0.25);
    CHECK(auc_rank(a, b) == 0.25);
    CHECK(oracle::pairwise_auc(a, b) == 0.25);

    const std::vector<double> empty;
    CHECK_THROWS_AS(roc(empty, ood), InputError);
    CHECK_THROWS_AS(auc(id, empty), InputError);
    CHECK_THROWS_AS(fpr_at_tpr(empty, ood), InputError);
}

TEST_CASE("auc agrees with the pairwise oracle, including ties") {
    std::mt19937_64 rng(8);
    std::uniform_int_distribution<std::size_t> size(1, 60);
    for (int t = 0; t < 300; ++t) {
        const bool ties = t % 2 == 0;
        const auto id = draws(size(rng), rng, ties);
        const auto ood = draws(size(rng), rng, ties);
        const double expect = oracle::pairwise_auc(id, ood);
        CHECK(std::abs(auc(id, ood) - expect) <= 1e-9);
        CHECK(std::abs(auc_rank(id, ood) - expect) <= 1e-9);
        CHECK(std::abs(auc(ood, id) - (1.0 - expect)) <= 1e-9);

        const RocCurve c = roc(id, ood);
        for (std::size_t k = 1; k < c.points.size(); ++k) {
            CHECK(c.points[k].fpr >= c.points[k - 1].fpr);
            CHECK(c.points[k].tpr >= c.points[k - 1].tpr);
        }

        const double f = fpr_at_tpr(id, ood);
        // the reported operating point is one of the curve's vertices
        const double tau = quantile_threshold(id, 0.95);
        const double tpr = static_cast<double>(std::count_if(id.begin(), id.end(), [&](double s) { return s >= tau; })) /
                           static_cast<double>(id.size());
        CHECK(tpr >= 0.95 - 1e-12);
        CHECK(on_curve(c, f, tpr));
    }
}

TEST_CASE("auc is invariant under increasing transforms") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.1, 3.0);
    std::vector<double> id, ood;
    for (int i = 0; i < 50; ++i) {
        id.push_back(u(rng) + 0.3);
        ood.push_back(u(rng));
    }
    const double base = auc(id, ood);
    auto map = [](std::vector<double> v, double (*f)(double)) {
        for (auto& x : v) x = f(x);
        return v;
    };
    const auto lin = [](double x) { return 2 * x + 1; };
    const auto cube = [](double x) { return x * x * x; };
    CHECK(std::abs(auc(map(id, +lin), map(ood, +lin)) - base) <= 1e-12);
    CHECK(std::abs(auc(map(id, +cube), map(ood, +cube)) - base) <= 1e-12);
}

TEST_CASE("fpr at 95% tpr") {
    const auto id = range(1, 100);
    const std::vector<double> below{-5, 0, 0.5};
    CHECK(fpr_at_tpr(id, below) == 0.0);
    CHECK(fpr_at_tpr(id, id) == 0.95);
    const std::vector<double> ood{4, 5, 6};
    CHECK(fpr_at_tpr(id, ood) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(quantile_threshold(id, 0.95) == 6.0);
}

TEST_CASE("classification auc and fnr5 filtering") {
    std::vector<ClassificationSample> s;
    for (int i = 0; i < 20; ++i) s.push_back({0.5, i < 10 ? 0.1 * i : 1.0 + 0.1 * i, i >= 10});
    CHECK(classification_auc(s) == 1.0);
    CHECK(auc_at_fnr(s) == 1.0);

    // n = 20 drops exactly one sample: the lowest OOD score
    for (int i = 0; i < 20; ++i) s[static_cast<std::size_t>(i)].ood_score = i;
    const auto kept = drop_flagged(s, 0.05);
    CHECK(kept.size() == 19);
    CHECK(std::none_of(kept.begin(), kept.end(), [](const ClassificationSample& c) { return c.ood_score == 0.0; }));

    std::vector<ClassificationSample> one_class(5, ClassificationSample{1.0, 0.3, true});
    CHECK_THROWS_AS(classification_auc(one_class), UndefinedAucError);
    CHECK_THROWS_AS(drop_flagged({}, 0.05), InputError);
}

TEST_CASE("filtering duplicated malignant scores leaves auc unchanged") {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> u(0, 1);
    for (int t = 0; t < 50; ++t) {
        std::vector<ClassificationSample> s;
        std::vector<double> scores;
        for (int i = 0; i < 10; ++i) scores.push_back(u(rng));
        // every malignant score appears once per class with a high OOD score...
        for (double m : scores) {
            s.push_back({1.0 + u(rng), m, true});
            s.push_back({1.0 + u(rng), m, false});
        }
        // ...and the flagged samples copy the first one in each class
        s.push_back({-1.0, scores[0], true});
        s.push_back({-1.0, scores[0], false});
        const auto kept = drop_flagged(s, 0.1);
        REQUIRE(kept.size() == 20);
        std::vector<double> pos, neg;
        for (const auto& c : kept) (c.cancer ? pos : neg).push_back(c.malignant_score);
        CHECK(std::abs(auc_at_fnr(s, 0.1) - oracle::pairwise_auc(pos, neg)) <= 1e-12);
        CHECK(std::abs(auc_at_fnr(s, 0.1) - classification_auc(s)) <= 1e-12);
    }
}

TEST_CASE("report tables") {
    std::mt19937_64 rng(4);
    MethodScores energy_m, softmax_m;
    energy_m.method = "energy";
    softmax_m.method = "softmax";
    energy_m.id = draws(40, rng, false);
    softmax_m.id = draws(40, rng, true);
    for (int e = 0; e < 3; ++e) energy_m.id_exits.push_back(draws(40, rng, e == 1));
    for (const std::string set : {"noise", "corrupt"}) {
        energy_m.ood[set] = draws(30, rng, false);
        softmax_m.ood[set] = draws(30, rng, true);
        for (int e = 0; e < 3; ++e) energy_m.ood_exits[set].push_back(draws(30, rng, e == 2));
    }
    softmax_m.ood.erase("corrupt");
    for (int i = 0; i < 20; ++i) energy_m.classification.push_back({static_cast<double>(i), 0.05 * i, i % 2 == 0});

    const std::vector<MethodScores> methods{energy_m, softmax_m};
    const std::vector<std::string> sets{"noise", "corrupt", "digits"};
    const MetricsReport r = build_report(methods, sets);

    REQUIRE(r.ood.size() == 6);
    for (const auto& row : r.ood) {
        const auto& m = row.method == "energy" ? energy_m : softmax_m;
        const auto it = m.ood.find(row.ood_set);
        if (it == m.ood.end()) {
            CHECK(!row.auc_pct);
            CHECK(!row.fpr95_pct);
            continue;
        }
        CHECK(*row.auc_pct == 100.0 * auc(m.id, it->second));
        CHECK(*row.fpr95_pct == 100.0 * fpr_at_tpr(m.id, it->second));
        CHECK(*row.auc_pct >= 0.0);
        CHECK(*row.auc_pct <= 100.0);
    }
    REQUIRE(r.exits.size() == 6);
    for (const auto& row : r.exits) {
        const auto& ood = energy_m.ood_exits.at(row.ood_set)[static_cast<std::size_t>(row.exit - 1)];
        const auto& id = energy_m.id_exits[static_cast<std::size_t>(row.exit - 1)];
        CHECK(std::abs(row.auc_pct - 100.0 * oracle::pairwise_auc(id, ood)) <= 1e-9);
        CHECK(std::abs(row.fpr95_pct - 100.0 * fpr_at_tpr(id, ood)) <= 1e-12);
    }
    REQUIRE(r.classification.size() == 1);
    CHECK(r.classification[0].auc_pct);
    CHECK(r.curves.size() == 3);

    // text round trips
    CHECK(parse_metrics_csv(metrics_csv(r)) == r.ood);
    CHECK(parse_exits_csv(exits_csv(r)) == r.exits);
    CHECK(parse_classification_csv(classification_csv(r)) == r.classification);

    const auto dir = fixtures::scratch_dir("report");
    write_report(r, dir);
    CHECK(std::filesystem::exists(dir / "roc_energy_noise.csv"));
    CHECK(read_file(dir / "roc_energy_noise.csv").rfind("fpr,tpr\n0,0\n", 0) == 0);
    const MetricsReport back = read_report(dir);
    CHECK(back.ood == r.ood);
    CHECK(back.exits == r.exits);
    CHECK(back.classification == r.classification);

    const std::string tables = format_tables(r);
    CHECK(tables.find("digits") != std::string::npos);
    CHECK(tables.find("energy") != std::string::npos);

    CHECK_THROWS_AS(parse_metrics_csv("method,auc\n"), FormatError);
    CHECK_THROWS_AS(parse_metrics_csv("method,ood_set,auc_pct,fpr95_pct\na,b,1\n"), FormatError);
}

TEST_CASE("perfect separation reads 100 / 0") {
    MethodScores m;
    m.method = "softmax";
    m.id = range(50, 90);
    m.ood["far"] = range(1, 10);
    const std::vector<MethodScores> methods{m};
    const auto r = build_report(methods);
    CHECK(metrics_csv(r) == "method,ood_set,auc_pct,fpr95_pct\nsoftmax,far,100,0\n");
}

TEST_CASE("undefined classification auc is reported as absent") {
    MethodScores m;
    m.method = "energy";
    m.id = range(1, 20);
    m.ood["x"] = range(1, 5);
    for (int i = 0; i < 20; ++i) m.classification.push_back({static_cast<double>(i), 0.1, i == 0});
    const std::vector<MethodScores> methods{m};
    const auto r = build_report(methods);
    REQUIRE(r.classification.size() == 1);
    CHECK(r.classification[0].auc_pct);
    CHECK(!r.classification[0].auc_fnr5_pct);
    CHECK(classification_csv(r) == "method,auc_pct,auc_fnr5_pct\nenergy,50,\n");
}
