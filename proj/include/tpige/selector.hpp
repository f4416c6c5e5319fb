#pragma once

// MoE selection: weighted OverallScore, nonnegative least-squares weight
// calibration against published per-method rows, per-sample argmax selection,
// and aggregate reporting.

#include <algorithm>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tpige/metrics.hpp"

namespace tpige {

struct WeightVector {
    std::map<std::string, double> weights;  // over the core metric set

    void validate() const {
        if (weights.empty()) throw ParameterError("WeightVector: empty");
        double max_w = 0.0;
        const auto& core = core_metric_names();
        for (const auto& [name, w] : weights) {
            if (std::find(core.begin(), core.end(), name) == core.end())
                throw ParameterError("WeightVector: unknown metric " + name);
            if (w < 0.0) throw ParameterError("WeightVector: negative weight for " + name);
            max_w = std::max(max_w, w);
        }
        if (max_w <= 0.0) throw ParameterError("WeightVector: at least one weight must be > 0");
    }

    static WeightVector uniform() {
        WeightVector w;
        for (const auto& name : core_metric_names()) w.weights[name] = 0.2;
        return w;
    }
};

// OverallScore = sum_i w_i * M_i over the core set; extras never contribute.
// A metric with nonzero weight must be present: no silent zero-fill.
inline double overall_score(const MetricVector& m, const WeightVector& w) {
    w.validate();
    double score = 0.0;
    for (const auto& [name, weight] : w.weights) {
        if (weight == 0.0) continue;
        const auto v = m.core(name);
        if (!v) throw DataError("overall_score: required metric missing: " + name);
        score += weight * *v;
    }
    return score;
}

struct CalibrationRow {
    std::string label;
    MetricVector metrics;
    double target_overall = 0.0;
};

struct CalibrationResult {
    WeightVector weights;
    std::vector<double> residuals;  // fitted - target, per row
    double max_abs_residual = 0.0;
    bool degenerate = false;
};

// Nonnegative least squares via cyclic coordinate descent on the normal
// equations. Fixed iteration and tolerance policy keeps the fit deterministic.
inline CalibrationResult calibrate_weights(const std::vector<CalibrationRow>& rows) {
    const auto& names = core_metric_names();
    const size_t n = names.size();
    if (rows.size() < 5)
        throw ParameterError("calibrate_weights: need >= 5 rows, got " +
                             std::to_string(rows.size()));
    for (const auto& row : rows) {
        if (!(row.target_overall > 0.0 && row.target_overall < 1.0))
            throw ParameterError("calibrate_weights: target out of (0,1) for row " + row.label);
        for (const auto& name : names)
            if (!row.metrics.core(name))
                throw DataError("calibrate_weights: row " + row.label + " missing metric " + name);
    }

    // A^T A and A^T b
    std::vector<std::vector<double>> ata(n, std::vector<double>(n, 0.0));
    std::vector<double> atb(n, 0.0);
    for (const auto& row : rows) {
        std::vector<double> a(n);
        for (size_t i = 0; i < n; ++i) a[i] = *row.metrics.core(names[i]);
        for (size_t i = 0; i < n; ++i) {
            atb[i] += a[i] * row.target_overall;
            for (size_t j = 0; j < n; ++j) ata[i][j] += a[i] * a[j];
        }
    }

    CalibrationResult result;
    std::vector<double> w(n, 0.0);
    bool degenerate = false;
    for (size_t i = 0; i < n; ++i)
        if (ata[i][i] < 1e-12) degenerate = true;  // column of zeros; weight pinned at 0

    // Exact normal-equations solve (Gaussian elimination with partial
    // pivoting). If the unconstrained optimum is already nonnegative it is the
    // nonnegative least-squares solution; otherwise polish by projected
    // coordinate descent from the clamped start.
    bool solved = false;
    if (!degenerate) {
        auto m = ata;
        auto rhs = atb;
        solved = true;
        for (size_t col = 0; col < n && solved; ++col) {
            size_t pivot = col;
            for (size_t r = col + 1; r < n; ++r)
                if (std::abs(m[r][col]) > std::abs(m[pivot][col])) pivot = r;
            if (std::abs(m[pivot][col]) < 1e-12) {
                solved = false;
                degenerate = true;
                break;
            }
            std::swap(m[col], m[pivot]);
            std::swap(rhs[col], rhs[pivot]);
            for (size_t r = col + 1; r < n; ++r) {
                const double f = m[r][col] / m[col][col];
                for (size_t c = col; c < n; ++c) m[r][c] -= f * m[col][c];
                rhs[r] -= f * rhs[col];
            }
        }
        if (solved) {
            for (size_t i = n; i-- > 0;) {
                double acc = rhs[i];
                for (size_t j = i + 1; j < n; ++j) acc -= m[i][j] * w[j];
                w[i] = acc / m[i][i];
            }
            for (double& v : w) {
                if (v < -1e-10) solved = false;  // constrained optimum is on the boundary
                v = std::max(0.0, v);
            }
        }
    }
    if (!solved) {
        constexpr int kMaxIter = 200000;
        constexpr double kTol = 1e-15;
        for (int it = 0; it < kMaxIter; ++it) {
            double delta = 0.0;
            for (size_t i = 0; i < n; ++i) {
                if (ata[i][i] < 1e-12) continue;
                double grad = -atb[i];
                for (size_t j = 0; j < n; ++j) grad += ata[i][j] * w[j];
                const double next = std::max(0.0, w[i] - grad / ata[i][i]);
                delta += std::abs(next - w[i]);
                w[i] = next;
            }
            if (delta < kTol) break;
        }
    }

    for (size_t i = 0; i < n; ++i) result.weights.weights[names[i]] = w[i];
    result.degenerate = degenerate;
    result.weights.validate();
    for (const auto& row : rows) {
        const double fitted = overall_score(row.metrics, result.weights);
        const double r = fitted - row.target_overall;
        result.residuals.push_back(r);
        result.max_abs_residual = std::max(result.max_abs_residual, std::abs(r));
    }
    return result;
}

struct SampleSelection {
    std::string sample_id;
    std::string winning_method;
    double winning_score = 0.0;
    std::map<std::string, double> method_scores;
};

struct SelectionReport {
    std::vector<SampleSelection> per_sample;
    std::map<std::string, double> aggregate_metric_means;  // over selected videos
    double aggregate_overall_mean = 0.0;
    std::map<std::string, size_t> method_usage;
    std::vector<std::string> exclusions;  // samples with no valid candidate
};

// Per-sample argmax of OverallScore; ties broken by the configured priority
// list (methods earlier in the list win), then lexicographically.
inline SelectionReport select_per_sample(const MetricTable& candidates, const WeightVector& w,
                                         const std::vector<std::string>& tie_break = {}) {
    w.validate();
    SelectionReport report;
    auto priority = [&tie_break](const std::string& method) {
        const auto it = std::find(tie_break.begin(), tie_break.end(), method);
        return it == tie_break.end() ? tie_break.size() : size_t(it - tie_break.begin());
    };

    std::map<std::string, double> metric_sums;
    double overall_sum = 0.0;
    for (const auto& [sample_id, methods] : candidates) {
        SampleSelection sel;
        sel.sample_id = sample_id;
        bool any = false;
        for (const auto& [method, mv] : methods) {
            double score;
            try {
                score = overall_score(mv, w);
            } catch (const DataError&) {
                continue;  // candidate missing a required metric
            }
            sel.method_scores[method] = score;
            const bool better =
                !any || score > sel.winning_score ||
                (score == sel.winning_score &&
                 (priority(method) < priority(sel.winning_method) ||
                  (priority(method) == priority(sel.winning_method) && method < sel.winning_method)));
            if (better) {
                sel.winning_method = method;
                sel.winning_score = score;
                any = true;
            }
        }
        if (!any) {
            report.exclusions.push_back(sample_id);
            continue;
        }
        const auto& winner = methods.at(sel.winning_method);
        for (const auto& name : core_metric_names())
            if (auto v = winner.core(name)) metric_sums[name] += *v;
        overall_sum += sel.winning_score;
        ++report.method_usage[sel.winning_method];
        report.per_sample.push_back(std::move(sel));
    }
    const size_t n = report.per_sample.size();
    if (n > 0) {
        for (auto& [name, sum] : metric_sums) report.aggregate_metric_means[name] = sum / double(n);
        report.aggregate_overall_mean = overall_sum / double(n);
    }
    return report;
}

// ---- JSON ----

inline void to_json(nlohmann::json& j, const WeightVector& w) {
    j = {{"schema_version", kSchemaVersion}, {"weights", w.weights}};
}
inline void from_json(const nlohmann::json& j, WeightVector& w) {
    if (j.contains("weights")) j.at("weights").get_to(w.weights);
    else j.get_to(w.weights);
    w.validate();
}

inline void to_json(nlohmann::json& j, const SampleSelection& s) {
    j = {{"sample_id", s.sample_id},
         {"winning_method", s.winning_method},
         {"winning_score", s.winning_score},
         {"method_scores", s.method_scores}};
}
inline void to_json(nlohmann::json& j, const SelectionReport& r) {
    j = {{"schema_version", kSchemaVersion},
         {"per_sample", r.per_sample},
         {"aggregate_metric_means", r.aggregate_metric_means},
         {"aggregate_overall_mean", r.aggregate_overall_mean},
         {"method_usage", r.method_usage},
         {"exclusions", r.exclusions}};
}

}  // namespace tpige
