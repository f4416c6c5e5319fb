#pragma once

// Analytic conditional diffusion testbed over Gaussian-mixture data.
// Every epsilon prediction here is the exact noised-mixture score, so guidance
// arithmetic can be audited against closed forms instead of a trained network.

#include <algorithm>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tpige/common.hpp"

namespace tpige {

struct MixtureMode {
    std::string text_class;
    std::string identity;
    Vec mean;
    double std_dev = 1.0;
};

struct MixtureWorld {
    size_t dim = 2;
    std::vector<MixtureMode> modes;
    Vec prior;  // one weight per mode, sums to 1

    void validate() const {
        if (dim == 0) throw ParameterError("MixtureWorld: dim must be positive");
        if (modes.empty()) throw ParameterError("MixtureWorld: at least one mode required");
        if (prior.size() != modes.size())
            throw ParameterError("MixtureWorld: prior size must match mode count");
        double sum = 0.0;
        for (double p : prior) {
            if (p < 0.0) throw ParameterError("MixtureWorld: prior weights must be nonnegative");
            sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-12)
            throw ParameterError("MixtureWorld: prior weights must sum to 1");
        for (size_t i = 0; i < modes.size(); ++i) {
            if (modes[i].mean.size() != dim)
                throw DimensionError("MixtureWorld: mode mean dimension mismatch");
            if (!(modes[i].std_dev > 0.0))
                throw ParameterError("MixtureWorld: mode std must be strictly positive");
            for (size_t j = i + 1; j < modes.size(); ++j) {
                if (modes[i].text_class == modes[j].text_class &&
                    modes[i].identity == modes[j].identity)
                    throw ParameterError("MixtureWorld: duplicate (text_class, identity) pair");
            }
        }
    }

    bool has_text_class(const std::string& label) const {
        return std::any_of(modes.begin(), modes.end(),
                           [&](const MixtureMode& m) { return m.text_class == label; });
    }
    bool has_identity(const std::string& label) const {
        return std::any_of(modes.begin(), modes.end(),
                           [&](const MixtureMode& m) { return m.identity == label; });
    }
};

struct TimestepSchedule {
    Vec alpha_bar;  // strictly decreasing, values in (0, 1]

    size_t steps() const { return alpha_bar.size(); }
    double sigma(size_t t) const { return std::sqrt(1.0 - alpha_bar.at(t)); }

    void validate() const {
        if (alpha_bar.empty()) throw ParameterError("TimestepSchedule: steps must be >= 1");
        for (size_t t = 0; t < alpha_bar.size(); ++t) {
            if (!(alpha_bar[t] > 0.0 && alpha_bar[t] <= 1.0))
                throw ParameterError("TimestepSchedule: alpha_bar out of (0, 1]");
            if (t > 0 && !(alpha_bar[t] < alpha_bar[t - 1]))
                throw ParameterError("TimestepSchedule: alpha_bar must strictly decrease");
        }
    }
};

struct NoisySample {
    Vec x;
    int t = 0;  // -1 marks a fully denoised terminal output
};

// Optional labels; empty optional is the unconditional branch of Eq.-style combiners.
struct ConditionSet {
    std::optional<std::string> text_class;
    std::optional<std::string> identity;

    ConditionSet drop_text() const { return {std::nullopt, identity}; }
    ConditionSet drop_identity() const { return {text_class, std::nullopt}; }
};

// Linear-beta variance-preserving schedule: alpha_bar_t = prod_{s<=t} (1 - beta_s).
inline TimestepSchedule make_schedule(size_t steps, double beta_min, double beta_max) {
    if (steps < 1) throw ParameterError("make_schedule: steps must be >= 1");
    if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0))
        throw ParameterError("make_schedule: require 0 < beta_min <= beta_max < 1");
    TimestepSchedule sched;
    sched.alpha_bar.resize(steps);
    double prod = 1.0;
    for (size_t t = 0; t < steps; ++t) {
        const double frac = steps > 1 ? double(t) / double(steps - 1) : 0.0;
        const double beta = beta_min + (beta_max - beta_min) * frac;
        prod *= (1.0 - beta);
        sched.alpha_bar[t] = prod;
    }
    sched.validate();
    return sched;
}

// x_t = sqrt(alpha_bar_t) * x0 + sigma_t * noise
inline NoisySample forward_noise(const Vec& x0, size_t t, const Vec& noise,
                                 const TimestepSchedule& sched) {
    check_same_dim(x0, noise, "forward_noise");
    if (t >= sched.steps()) throw ParameterError("forward_noise: timestep out of range");
    const double scale = std::sqrt(sched.alpha_bar[t]);
    const double sig = sched.sigma(t);
    Vec x(x0.size());
    for (size_t i = 0; i < x.size(); ++i) x[i] = scale * x0[i] + sig * noise[i];
    return {std::move(x), static_cast<int>(t)};
}

namespace detail {

// Modes matched by the non-empty labels of cond. Unknown labels are condition errors.
inline std::vector<size_t> matching_modes(const MixtureWorld& world, const ConditionSet& cond) {
    if (cond.text_class && !world.has_text_class(*cond.text_class))
        throw ConditionError("unknown text_class label: " + *cond.text_class);
    if (cond.identity && !world.has_identity(*cond.identity))
        throw ConditionError("unknown identity label: " + *cond.identity);
    std::vector<size_t> idx;
    for (size_t k = 0; k < world.modes.size(); ++k) {
        const auto& m = world.modes[k];
        if (cond.text_class && m.text_class != *cond.text_class) continue;
        if (cond.identity && m.identity != *cond.identity) continue;
        idx.push_back(k);
    }
    if (idx.empty()) throw ConditionError("condition matches no mode");
    return idx;
}

}  // namespace detail

// Gradient of log p_t(x | cond) for the noised, condition-restricted mixture.
// Each surviving component k becomes N(sqrt(ab_t) mu_k, ab_t sigma_k^2 tau + sigma_t^2).
inline Vec conditional_score(const Vec& x, size_t t, const ConditionSet& cond,
                             const MixtureWorld& world, const TimestepSchedule& sched,
                             double temperature = 1.0) {
    if (x.size() != world.dim) throw DimensionError("conditional_score: x dimension mismatch");
    if (t >= sched.steps()) throw ParameterError("conditional_score: timestep out of range");
    if (temperature < 1.0) throw ParameterError("conditional_score: temperature must be >= 1");

    const auto idx = detail::matching_modes(world, cond);
    const double ab = sched.alpha_bar[t];
    const double sig2 = 1.0 - ab;
    const size_t d = world.dim;

    // Responsibilities in log space; restriction renormalizes automatically.
    std::vector<double> log_w(idx.size());
    std::vector<double> var(idx.size());
    double max_lw = -std::numeric_limits<double>::infinity();
    for (size_t j = 0; j < idx.size(); ++j) {
        const auto& m = world.modes[idx[j]];
        var[j] = ab * m.std_dev * m.std_dev * temperature + sig2;
        double q = 0.0;
        for (size_t i = 0; i < d; ++i) {
            const double diff = x[i] - std::sqrt(ab) * m.mean[i];
            q += diff * diff;
        }
        log_w[j] = std::log(world.prior[idx[j]]) - 0.5 * q / var[j] -
                   0.5 * double(d) * std::log(2.0 * M_PI * var[j]);
        max_lw = std::max(max_lw, log_w[j]);
    }
    double z = 0.0;
    for (double& lw : log_w) {
        lw = std::exp(lw - max_lw);
        z += lw;
    }

    Vec score(d, 0.0);
    for (size_t j = 0; j < idx.size(); ++j) {
        const auto& m = world.modes[idx[j]];
        const double r = log_w[j] / z;
        for (size_t i = 0; i < d; ++i)
            score[i] += r * (std::sqrt(ab) * m.mean[i] - x[i]) / var[j];
    }
    return score;
}

// Log-density of the same noised restricted mixture; used by finite-difference checks.
inline double conditional_log_density(const Vec& x, size_t t, const ConditionSet& cond,
                                      const MixtureWorld& world, const TimestepSchedule& sched,
                                      double temperature = 1.0) {
    if (x.size() != world.dim) throw DimensionError("conditional_log_density: x dimension mismatch");
    if (temperature < 1.0) throw ParameterError("conditional_log_density: temperature must be >= 1");
    const auto idx = detail::matching_modes(world, cond);
    const double ab = sched.alpha_bar.at(t);
    const double sig2 = 1.0 - ab;
    const size_t d = world.dim;

    double prior_z = 0.0;
    for (size_t k : idx) prior_z += world.prior[k];

    double max_lw = -std::numeric_limits<double>::infinity();
    std::vector<double> lws(idx.size());
    for (size_t j = 0; j < idx.size(); ++j) {
        const auto& m = world.modes[idx[j]];
        const double var = ab * m.std_dev * m.std_dev * temperature + sig2;
        double q = 0.0;
        for (size_t i = 0; i < d; ++i) {
            const double diff = x[i] - std::sqrt(ab) * m.mean[i];
            q += diff * diff;
        }
        lws[j] = std::log(world.prior[idx[j]] / prior_z) - 0.5 * q / var -
                 0.5 * double(d) * std::log(2.0 * M_PI * var);
        max_lw = std::max(max_lw, lws[j]);
    }
    double z = 0.0;
    for (double lw : lws) z += std::exp(lw - max_lw);
    return max_lw + std::log(z);
}

// Exact epsilon predictor: eps*(x_t) = -sigma_t * grad log p_t(x_t | cond).
inline Vec analytic_epsilon(const NoisySample& sample, const ConditionSet& cond,
                            const MixtureWorld& world, const TimestepSchedule& sched,
                            double temperature = 1.0) {
    if (sample.t < 0 || size_t(sample.t) >= sched.steps())
        throw ParameterError("analytic_epsilon: timestep out of range");
    const Vec score = conditional_score(sample.x, size_t(sample.t), cond, world, sched, temperature);
    return scaled(-sched.sigma(size_t(sample.t)), score);
}

// DDPM ancestral update; at t == 0 returns the denoised mean only (noise ignored).
inline NoisySample ancestral_step(const NoisySample& sample, const Vec& eps_hat,
                                  const TimestepSchedule& sched, const Vec& noise) {
    check_same_dim(sample.x, eps_hat, "ancestral_step");
    check_same_dim(sample.x, noise, "ancestral_step");
    if (sample.t < 0 || size_t(sample.t) >= sched.steps())
        throw ParameterError("ancestral_step: timestep out of range");
    const size_t t = size_t(sample.t);
    const double ab_t = sched.alpha_bar[t];
    const double sig_t = sched.sigma(t);

    Vec out(sample.x.size());
    if (t == 0) {
        const double inv = 1.0 / std::sqrt(ab_t);
        for (size_t i = 0; i < out.size(); ++i)
            out[i] = inv * (sample.x[i] - sig_t * eps_hat[i]);
        return {std::move(out), -1};
    }
    const double ab_prev = sched.alpha_bar[t - 1];
    const double alpha_t = ab_t / ab_prev;
    const double beta_t = 1.0 - alpha_t;
    const double post_std = std::sqrt(beta_t * (1.0 - ab_prev) / (1.0 - ab_t));
    const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha_t);
    for (size_t i = 0; i < out.size(); ++i) {
        const double mean = inv_sqrt_alpha * (sample.x[i] - beta_t / sig_t * eps_hat[i]);
        out[i] = mean + post_std * noise[i];
    }
    return {std::move(out), static_cast<int>(t) - 1};
}

// Fraction of finals whose nearest mode mean matches every non-empty target label.
inline double mode_hit_rate(const std::vector<Vec>& finals, const MixtureWorld& world,
                            const ConditionSet& target) {
    if (finals.empty()) throw ParameterError("mode_hit_rate: empty sample set");
    size_t hits = 0;
    for (const Vec& x : finals) {
        size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (size_t k = 0; k < world.modes.size(); ++k) {
            const double d = sq_dist(x, world.modes[k].mean);
            if (d < best_d) {
                best_d = d;
                best = k;
            }
        }
        const auto& m = world.modes[best];
        const bool ok = (!target.text_class || m.text_class == *target.text_class) &&
                        (!target.identity || m.identity == *target.identity);
        if (ok) ++hits;
    }
    return double(hits) / double(finals.size());
}

// ---- JSON config (keys: dim, modes[], prior[], steps, beta_min, beta_max) ----

inline void to_json(nlohmann::json& j, const MixtureMode& m) {
    j = {{"text_class", m.text_class},
         {"identity", m.identity},
         {"mean", m.mean},
         {"std", m.std_dev}};
}
inline void from_json(const nlohmann::json& j, MixtureMode& m) {
    j.at("text_class").get_to(m.text_class);
    j.at("identity").get_to(m.identity);
    j.at("mean").get_to(m.mean);
    j.at("std").get_to(m.std_dev);
}
inline void to_json(nlohmann::json& j, const MixtureWorld& w) {
    j = {{"dim", w.dim}, {"modes", w.modes}, {"prior", w.prior}};
}
inline void from_json(const nlohmann::json& j, MixtureWorld& w) {
    j.at("dim").get_to(w.dim);
    j.at("modes").get_to(w.modes);
    j.at("prior").get_to(w.prior);
    w.validate();
}

}  // namespace tpige
