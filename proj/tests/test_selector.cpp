#include <catch2/catch_amalgamated.hpp>

#include "tpige/selector.hpp"

using namespace tpige;

namespace {

MetricVector mv(double gme, double cur, double arc, double motion, double imaging) {
    MetricVector m;
    m.set_core("gme", gme);
    m.set_core("cur", cur);
    m.set_core("arc", arc);
    m.set_core("motion", motion);
    m.set_core("imaging", imaging);
    return m;
}

// The seven published per-method rows used for weight calibration.
std::vector<CalibrationRow> published_rows() {
    return {
        {"hailuo", mv(0.6277, 0.0562, 0.0452, 0.9871, 0.6793), 0.4586},
        {"phantom", mv(0.6399, 0.2999, 0.2847, 0.9820, 0.6364), 0.5517},
        {"baseline", mv(0.6217, 0.3105, 0.2983, 0.9741, 0.6294), 0.5488},
        {"pe", mv(0.6130, 0.4040, 0.3871, 0.9734, 0.6227), 0.5815},
        {"pe_ie", mv(0.6154, 0.3510, 0.3425, 0.9737, 0.6407), 0.5655},
        {"pe_ge", mv(0.5990, 0.4533, 0.4358, 0.9702, 0.6441), 0.5997},
        {"moe", mv(0.6161, 0.5176, 0.5007, 0.9741, 0.6606), 0.6337},
    };
}

MetricTable random_table(Rng& rng, size_t samples, size_t methods) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    MetricTable table;
    for (size_t s = 0; s < samples; ++s) {
        for (size_t m = 0; m < methods; ++m) {
            table["s" + std::to_string(s)]["m" + std::to_string(m)] =
                mv(u01(rng), u01(rng), u01(rng), u01(rng), u01(rng));
        }
    }
    return table;
}

}  // namespace

TEST_CASE("overall_score") {
    WeightVector w = WeightVector::uniform();
    SECTION("zero metrics give zero") {
        REQUIRE(overall_score(mv(0, 0, 0, 0, 0), w) == 0.0);
    }
    SECTION("convexity: equal metrics with unit-sum weights") {
        REQUIRE(overall_score(mv(0.7, 0.7, 0.7, 0.7, 0.7), w) == Catch::Approx(0.7).margin(1e-15));
    }
    SECTION("missing required metric is an error naming it") {
        MetricVector m;
        m.set_core("gme", 0.5);
        try {
            overall_score(m, w);
            FAIL("expected DataError");
        } catch (const DataError& e) {
            REQUIRE(std::string(e.what()).find("arc") != std::string::npos);
        }
    }
    SECTION("extras never contribute") {
        MetricVector a = mv(0.5, 0.5, 0.5, 0.5, 0.5);
        MetricVector b = a;
        b.extras["fid"] = 200.0;
        REQUIRE(overall_score(a, w) == overall_score(b, w));
    }
    SECTION("monotone nondecreasing in each metric") {
        MetricVector base = mv(0.4, 0.4, 0.4, 0.4, 0.4);
        const double s0 = overall_score(base, w);
        for (const auto& name : core_metric_names()) {
            MetricVector bumped = base;
            bumped.set_core(name, 0.6);
            REQUIRE(overall_score(bumped, w) >= s0);
        }
    }
}

TEST_CASE("calibrate_weights recovers synthetic weights") {
    const std::map<std::string, double> truth = {
        {"gme", 0.30}, {"cur", 0.20}, {"arc", 0.20}, {"motion", 0.15}, {"imaging", 0.15}};
    Rng rng(51);
    std::uniform_real_distribution<double> u(0.1, 0.95);
    std::vector<CalibrationRow> rows;
    for (int k = 0; k < 8; ++k) {
        MetricVector m = mv(u(rng), u(rng), u(rng), u(rng), u(rng));
        double target = 0.0;
        for (const auto& [name, w] : truth) target += w * *m.core(name);
        rows.push_back({"r" + std::to_string(k), m, target});
    }
    auto fit = calibrate_weights(rows);
    REQUIRE(fit.max_abs_residual <= 1e-6);
    for (const auto& [name, w] : truth)
        REQUIRE(fit.weights.weights.at(name) == Catch::Approx(w).margin(1e-5));
    REQUIRE_FALSE(fit.degenerate);
}

TEST_CASE("calibrate_weights on the published rows") {
    auto fit = calibrate_weights(published_rows());
    // frozen from an independent NNLS run over the same seven rows
    REQUIRE(fit.max_abs_residual <= 1e-4);
    REQUIRE(fit.weights.weights.at("gme") == Catch::Approx(0.3008).margin(2e-3));
    REQUIRE(fit.weights.weights.at("cur") == Catch::Approx(0.2002).margin(2e-3));
    REQUIRE(fit.weights.weights.at("arc") == Catch::Approx(0.1998).margin(2e-3));
    REQUIRE(fit.weights.weights.at("motion") == Catch::Approx(0.1490).margin(2e-3));
    REQUIRE(fit.weights.weights.at("imaging") == Catch::Approx(0.1508).margin(2e-3));
    for (double r : fit.residuals) REQUIRE(std::abs(r) <= 0.02);
}

TEST_CASE("calibrate_weights preconditions") {
    auto rows = published_rows();
    rows.resize(4);
    REQUIRE_THROWS_AS(calibrate_weights(rows), ParameterError);

    auto bad = published_rows();
    bad[0].target_overall = 1.5;
    REQUIRE_THROWS_AS(calibrate_weights(bad), ParameterError);
}

TEST_CASE("select_per_sample") {
    WeightVector w = WeightVector::uniform();
    SECTION("single method wins everywhere") {
        MetricTable t;
        t["s0"]["only"] = mv(0.5, 0.5, 0.5, 0.5, 0.5);
        t["s1"]["only"] = mv(0.7, 0.7, 0.7, 0.7, 0.7);
        auto report = select_per_sample(t, w);
        REQUIRE(report.per_sample.size() == 2);
        REQUIRE(report.method_usage.at("only") == 2);
        REQUIRE(report.aggregate_overall_mean == Catch::Approx(0.6).margin(1e-12));
    }
    SECTION("dominant method wins every sample") {
        MetricTable t;
        for (int s = 0; s < 10; ++s) {
            t["s" + std::to_string(s)]["worse"] = mv(0.2, 0.2, 0.2, 0.2, 0.2);
            t["s" + std::to_string(s)]["better"] = mv(0.8, 0.8, 0.8, 0.8, 0.8);
        }
        auto report = select_per_sample(t, w);
        REQUIRE(report.method_usage.at("better") == 10);
        REQUIRE(report.method_usage.count("worse") == 0);
    }
    SECTION("tie-break follows the priority list") {
        MetricTable t;
        t["s0"]["zeta"] = mv(0.5, 0.5, 0.5, 0.5, 0.5);
        t["s0"]["alpha"] = mv(0.5, 0.5, 0.5, 0.5, 0.5);
        auto prefer_zeta = select_per_sample(t, w, {"zeta", "alpha"});
        REQUIRE(prefer_zeta.per_sample[0].winning_method == "zeta");
        auto lexical = select_per_sample(t, w);
        REQUIRE(lexical.per_sample[0].winning_method == "alpha");
    }
    SECTION("samples with no valid candidate are excluded, run continues") {
        MetricTable t;
        t["s0"]["good"] = mv(0.5, 0.5, 0.5, 0.5, 0.5);
        MetricVector incomplete;
        incomplete.set_core("gme", 0.9);
        t["s1"]["partial"] = incomplete;
        auto report = select_per_sample(t, w);
        REQUIRE(report.per_sample.size() == 1);
        REQUIRE(report.exclusions == std::vector<std::string>{"s1"});
    }
}

TEST_CASE("MoE dominance on random fixtures") {
    Rng rng(61);
    WeightVector w = WeightVector::uniform();
    for (int trial = 0; trial < 20; ++trial) {
        auto table = random_table(rng, 30, 6);
        auto report = select_per_sample(table, w);
        // brute-force per-method means
        for (size_t m = 0; m < 6; ++m) {
            double sum = 0.0;
            for (const auto& [sample, methods] : table)
                sum += overall_score(methods.at("m" + std::to_string(m)), w);
            REQUIRE(report.aggregate_overall_mean >= sum / 30.0 - 1e-12);
        }
    }
}

TEST_CASE("weight scaling never changes a winner") {
    Rng rng(71);
    auto table = random_table(rng, 40, 5);
    WeightVector w = WeightVector::uniform();
    auto base = select_per_sample(table, w);
    for (double lambda : {0.1, 10.0}) {
        WeightVector scaled_w;
        for (const auto& [k, v] : w.weights) scaled_w.weights[k] = lambda * v;
        auto scaled_report = select_per_sample(table, scaled_w);
        REQUIRE(scaled_report.per_sample.size() == base.per_sample.size());
        for (size_t i = 0; i < base.per_sample.size(); ++i)
            REQUIRE(scaled_report.per_sample[i].winning_method ==
                    base.per_sample[i].winning_method);
    }
}

TEST_CASE("selection determinism") {
    Rng rng(81);
    auto table = random_table(rng, 25, 4);
    WeightVector w = WeightVector::uniform();
    auto a = select_per_sample(table, w, {"m2", "m0"});
    auto b = select_per_sample(table, w, {"m2", "m0"});
    REQUIRE(nlohmann::json(a).dump() == nlohmann::json(b).dump());
}

TEST_CASE("weight vector validation") {
    WeightVector w;
    REQUIRE_THROWS_AS(w.validate(), ParameterError);
    w.weights["gme"] = -0.1;
    REQUIRE_THROWS_AS(w.validate(), ParameterError);
    w.weights["gme"] = 0.0;
    REQUIRE_THROWS_AS(w.validate(), ParameterError);  // no positive weight
    w.weights["bogus"] = 0.5;
    REQUIRE_THROWS_AS(w.validate(), ParameterError);
    w.weights.erase("bogus");
    w.weights["cur"] = 0.5;
    REQUIRE_NOTHROW(w.validate());
}
