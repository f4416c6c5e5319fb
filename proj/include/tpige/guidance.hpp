#pragma once

// ID-aware spatiotemporal guidance: the three-branch epsilon combiner, the
// degraded identity-agnostic weak denoiser, decay schedules for the identity
// weight, and the guided ancestral sampling loop.

#include <functional>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tpige/common.hpp"
#include "tpige/testbed.hpp"

namespace tpige {

enum class DecayMode { Constant, LinearToZero, CosineToZero };

inline std::string to_string(DecayMode m) {
    switch (m) {
        case DecayMode::Constant: return "constant";
        case DecayMode::LinearToZero: return "linear-to-zero";
        case DecayMode::CosineToZero: return "cosine-to-zero";
    }
    throw ParameterError("unknown decay mode");
}

inline DecayMode decay_mode_from_string(const std::string& s) {
    if (s == "constant") return DecayMode::Constant;
    if (s == "linear-to-zero") return DecayMode::LinearToZero;
    if (s == "cosine-to-zero") return DecayMode::CosineToZero;
    throw ParameterError("unknown decay mode: " + s);
}

// Multiplier in [0,1] over normalized progress (0 at the noisiest step).
inline double decay_multiplier(DecayMode mode, double progress) {
    switch (mode) {
        case DecayMode::Constant: return 1.0;
        case DecayMode::LinearToZero: return 1.0 - progress;
        case DecayMode::CosineToZero: return 0.5 * (1.0 + std::cos(M_PI * progress));
    }
    throw ParameterError("unknown decay mode");
}

struct DegradationSpec {
    bool drop_identity = true;  // forced true on the weak branch
    std::set<size_t> skip_layers;
    double temperature = 1.0;

    void validate() const {
        if (temperature < 1.0) throw ParameterError("DegradationSpec: temperature must be >= 1");
    }
};

struct GuidanceConfig {
    double w_c = 5.0;
    double w_i = 1.0;
    DecayMode decay = DecayMode::Constant;
    DegradationSpec degradation;

    void validate() const {
        if (!(w_c >= 0.0) || !std::isfinite(w_c))
            throw ParameterError("GuidanceConfig: w_c must be finite and >= 0");
        if (!(w_i >= 0.0) || !std::isfinite(w_i))
            throw ParameterError("GuidanceConfig: w_i must be finite and >= 0");
        degradation.validate();
    }
};

// Abstract denoiser: epsilon prediction plus an enumerable list of skippable
// refinement passes. Implementations must be deterministic for fixed inputs.
class Denoiser {
public:
    virtual ~Denoiser() = default;
    virtual Vec predict(const NoisySample& sample, const ConditionSet& cond) const = 0;
    virtual size_t refinement_passes() const = 0;
};

// The analytic testbed denoiser. Its single refinement pass is a score
// sharpening stage: skipping it leaves the raw high-temperature score, which
// is the testbed's concrete meaning of "skipping selected layers".
class AnalyticDenoiser final : public Denoiser {
public:
    AnalyticDenoiser(MixtureWorld world, TimestepSchedule sched, double temperature = 1.0)
        : world_(std::move(world)), sched_(std::move(sched)), temperature_(temperature) {
        world_.validate();
        sched_.validate();
        if (temperature_ < 1.0) throw ParameterError("AnalyticDenoiser: temperature must be >= 1");
    }

    Vec predict(const NoisySample& sample, const ConditionSet& cond) const override {
        return analytic_epsilon(sample, cond, world_, sched_, temperature_);
    }
    size_t refinement_passes() const override { return 1; }

    const MixtureWorld& world() const { return world_; }
    const TimestepSchedule& schedule() const { return sched_; }
    double temperature() const { return temperature_; }

private:
    MixtureWorld world_;
    TimestepSchedule sched_;
    double temperature_;
};

// Classic CFG: eps_cond + w_c * (eps_cond - eps_uncond_text).
inline Vec combine_cfg(const Vec& eps_cond, const Vec& eps_uncond_text, double w_c) {
    check_same_dim(eps_cond, eps_uncond_text, "combine_cfg");
    Vec out(eps_cond.size());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = eps_cond[i] + w_c * (eps_cond[i] - eps_uncond_text[i]);
    return out;
}

// Final guidance signal:
//   eps_full + W_c (eps_full - eps_no_text) + W_i (eps_full - eps_weak)
// With w_i == 0 the w_i term is skipped entirely, so the result is bitwise
// identical to combine_cfg on the same arithmetic.
inline Vec combine_tpige(const Vec& eps_full, const Vec& eps_no_text, const Vec& eps_weak,
                         double w_c, double w_i_effective) {
    check_same_dim(eps_full, eps_no_text, "combine_tpige");
    check_same_dim(eps_full, eps_weak, "combine_tpige");
    if (w_c < 0.0 || w_i_effective < 0.0)
        throw ParameterError("combine_tpige: negative guidance weights rejected");
    Vec out = combine_cfg(eps_full, eps_no_text, w_c);
    if (w_i_effective != 0.0)
        for (size_t i = 0; i < out.size(); ++i)
            out[i] += w_i_effective * (eps_full[i] - eps_weak[i]);
    return out;
}

// Degraded copy of a denoiser: identity condition forced empty, listed
// refinement passes omitted, temperature raised (the analytic denoiser's one
// degradation knob).
inline std::shared_ptr<Denoiser> make_weak_denoiser(std::shared_ptr<const Denoiser> base,
                                                    const DegradationSpec& spec) {
    spec.validate();
    for (size_t idx : spec.skip_layers)
        if (idx >= base->refinement_passes())
            throw ParameterError("make_weak_denoiser: skip index " + std::to_string(idx) +
                                 " out of range");

    class WeakDenoiser final : public Denoiser {
    public:
        WeakDenoiser(std::shared_ptr<const Denoiser> base, DegradationSpec spec)
            : base_(std::move(base)), spec_(std::move(spec)) {}

        Vec predict(const NoisySample& sample, const ConditionSet& cond) const override {
            ConditionSet weak_cond = cond.drop_identity();
            if (const auto* analytic = dynamic_cast<const AnalyticDenoiser*>(base_.get())) {
                const bool skip_sharpen = spec_.skip_layers.count(0) > 0;
                const double tau = skip_sharpen ? spec_.temperature * 2.0 : spec_.temperature;
                return analytic_epsilon(sample, weak_cond, analytic->world(),
                                        analytic->schedule(), tau);
            }
            return base_->predict(sample, weak_cond);
        }
        size_t refinement_passes() const override { return base_->refinement_passes(); }

    private:
        std::shared_ptr<const Denoiser> base_;
        DegradationSpec spec_;
    };

    return std::make_shared<WeakDenoiser>(std::move(base), spec);
}

// w_i scaled by the decay multiplier; progress runs 0 -> 1 from the noisiest
// step (t = steps-1) to the cleanest (t = 0).
inline double effective_wi(const GuidanceConfig& config, size_t t, size_t steps) {
    if (t >= steps) throw ParameterError("effective_wi: timestep out of range");
    const double progress =
        steps > 1 ? 1.0 - double(t) / double(steps - 1) : 0.0;
    return config.w_i * decay_multiplier(config.decay, progress);
}

struct GuidanceTraceStep {
    int t = 0;
    Vec x;  // state entering the step
    Vec eps_full;
    Vec eps_no_text;
    Vec eps_weak;
    Vec eps_guided;
    double w_i_effective = 0.0;
};

struct GuidedResult {
    Vec final_x;
    std::vector<GuidanceTraceStep> trace;
};

// Full ancestral loop with three-branch guidance at every step.
inline GuidedResult guided_sample(const Denoiser& strong, const Denoiser& weak,
                                  const ConditionSet& cond, const GuidanceConfig& config,
                                  const TimestepSchedule& sched, size_t dim, Rng& rng,
                                  bool record_trace = true) {
    config.validate();
    if (!cond.identity) throw ConditionError("guided_sample: identity condition required");
    const size_t steps = sched.steps();

    NoisySample sample{gaussian_vec(rng, dim), static_cast<int>(steps) - 1};
    GuidedResult result;
    if (record_trace) result.trace.reserve(steps);

    for (size_t k = 0; k < steps; ++k) {
        const size_t t = size_t(sample.t);
        const Vec eps_full = strong.predict(sample, cond);
        const Vec eps_no_text = strong.predict(sample, cond.drop_text());
        const Vec eps_weak = weak.predict(sample, cond);
        const double wi_eff = effective_wi(config, t, steps);
        Vec eps_guided = combine_tpige(eps_full, eps_no_text, eps_weak, config.w_c, wi_eff);

        const Vec noise = t > 0 ? gaussian_vec(rng, dim) : Vec(dim, 0.0);
        if (record_trace)
            result.trace.push_back(
                {sample.t, sample.x, eps_full, eps_no_text, eps_weak, eps_guided, wi_eff});
        sample = ancestral_step(sample, eps_guided, sched, noise);
    }
    result.final_x = std::move(sample.x);
    return result;
}

inline GuidedResult guided_sample(const MixtureWorld& world, const ConditionSet& cond,
                                  const GuidanceConfig& config, const TimestepSchedule& sched,
                                  std::uint64_t seed, bool record_trace = true) {
    auto strong = std::make_shared<AnalyticDenoiser>(world, sched);
    auto weak = make_weak_denoiser(strong, config.degradation);
    Rng rng(seed);
    return guided_sample(*strong, *weak, cond, config, sched, world.dim, rng, record_trace);
}

// ---- JSON ----

inline void to_json(nlohmann::json& j, const DegradationSpec& s) {
    j = {{"drop_identity", s.drop_identity},
         {"skip_layers", s.skip_layers},
         {"temperature", s.temperature}};
}
inline void from_json(const nlohmann::json& j, DegradationSpec& s) {
    s.drop_identity = j.value("drop_identity", true);
    if (j.contains("skip_layers")) j.at("skip_layers").get_to(s.skip_layers);
    s.temperature = j.value("temperature", 1.0);
    s.validate();
}
inline void to_json(nlohmann::json& j, const GuidanceConfig& c) {
    j = {{"w_c", c.w_c},
         {"w_i", c.w_i},
         {"decay", {{"mode", to_string(c.decay)}}},
         {"degradation", c.degradation}};
}
inline void from_json(const nlohmann::json& j, GuidanceConfig& c) {
    c.w_c = j.value("w_c", 5.0);
    c.w_i = j.value("w_i", 1.0);
    if (j.contains("decay")) c.decay = decay_mode_from_string(j.at("decay").at("mode"));
    if (j.contains("degradation")) j.at("degradation").get_to(c.degradation);
    c.validate();
}

}  // namespace tpige
