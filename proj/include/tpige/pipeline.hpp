#pragma once

// Run orchestration shared by the CLI and the acceptance suite: world/run
// configs, multi-method sampling runs, testbed metric proxies computed from
// trajectories, and stage artifact I/O. Every artifact embeds
// {schema_version, seed, config digest}.

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "tpige/enhance.hpp"
#include "tpige/guidance.hpp"
#include "tpige/metrics.hpp"
#include "tpige/selector.hpp"
#include "tpige/testbed.hpp"

namespace tpige {

struct WorldConfig {
    MixtureWorld world;
    size_t steps = 50;
    double beta_min = 1e-4;
    double beta_max = 0.02;

    TimestepSchedule schedule() const { return make_schedule(steps, beta_min, beta_max); }
};

inline void to_json(nlohmann::json& j, const WorldConfig& c) {
    j = nlohmann::json(c.world);
    j["steps"] = c.steps;
    j["beta_min"] = c.beta_min;
    j["beta_max"] = c.beta_max;
}
inline void from_json(const nlohmann::json& j, WorldConfig& c) {
    j.get_to(c.world);
    c.steps = j.value("steps", size_t(50));
    c.beta_min = j.value("beta_min", 1e-4);
    c.beta_max = j.value("beta_max", 0.02);
}

struct MethodSpec {
    std::string name;
    GuidanceConfig guidance;
};

inline void to_json(nlohmann::json& j, const MethodSpec& m) {
    j = {{"name", m.name}, {"guidance", m.guidance}};
}
inline void from_json(const nlohmann::json& j, MethodSpec& m) {
    j.at("name").get_to(m.name);
    if (j.contains("guidance")) j.at("guidance").get_to(m.guidance);
}

inline nlohmann::json load_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read file: " + path.string());
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw DataError("JSON parse error: " + path.string());
    return j;
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw DataError("cannot write file: " + path.string());
        out << text;
    }
    std::filesystem::rename(tmp, path);
}

// Bounded-parallelism map; results land in input order so downstream writes
// stay deterministic.
template <typename Fn>
void parallel_for(size_t count, size_t parallelism, Fn&& fn) {
    if (parallelism <= 1 || count <= 1) {
        for (size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    auto worker = [&] {
        for (size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) fn(i);
    };
    std::vector<std::thread> threads;
    const size_t n = std::min(parallelism, count);
    threads.reserve(n);
    for (size_t k = 0; k < n; ++k) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
}

// ---- sampling stage ----

struct TrajectoryArtifact {
    std::string sample_id;
    std::string method;
    std::uint64_t seed = 0;
    Vec final_x;
    std::vector<Vec> frames;  // x per step, noisiest first
    std::vector<GuidanceTraceStep> trace;
};

struct SampleRunOutput {
    std::vector<MethodSpec> methods;
    // method -> per-sample trajectories, sample order fixed
    std::map<std::string, std::vector<TrajectoryArtifact>> trajectories;
    std::map<std::string, double> hit_rates;
};

inline std::string sample_name(size_t index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "s%03zu", index);
    return buf;
}

inline SampleRunOutput run_sampling(const WorldConfig& wc, const std::vector<MethodSpec>& methods,
                                    const ConditionSet& target, size_t num_samples,
                                    std::uint64_t run_seed, size_t parallelism = 1,
                                    bool record_trace = true) {
    wc.world.validate();
    if (!target.identity) throw ConditionError("run_sampling: target identity required");
    const TimestepSchedule sched = wc.schedule();
    auto strong = std::make_shared<AnalyticDenoiser>(wc.world, sched);

    SampleRunOutput out;
    out.methods = methods;
    for (const auto& method : methods) {
        auto weak = make_weak_denoiser(strong, method.guidance.degradation);
        std::vector<TrajectoryArtifact> trajs(num_samples);
        parallel_for(num_samples, parallelism, [&](size_t i) {
            const std::uint64_t seed = derive_seed(run_seed, i);
            Rng rng(seed);
            GuidedResult r = guided_sample(*strong, *weak, target, method.guidance, sched,
                                           wc.world.dim, rng, record_trace);
            TrajectoryArtifact art;
            art.sample_id = sample_name(i);
            art.method = method.name;
            art.seed = seed;
            art.final_x = r.final_x;
            art.frames.reserve(r.trace.size() + 1);
            for (const auto& step : r.trace) art.frames.push_back(step.x);
            if (!art.frames.empty()) art.frames.push_back(r.final_x);
            art.trace = std::move(r.trace);
            trajs[i] = std::move(art);
        });
        std::vector<Vec> finals;
        finals.reserve(num_samples);
        for (const auto& t : trajs) finals.push_back(t.final_x);
        out.hit_rates[method.name] = mode_hit_rate(finals, wc.world, target);
        out.trajectories[method.name] = std::move(trajs);
    }
    return out;
}

// ---- testbed metric proxies ----
// Deterministic [0,1] proxies computed from a trajectory:
//   gme     — exp(-distance of the final state to the prior-weighted centroid
//             of modes matching the target text class)
//   cur     — identity_score of normalized late-half frames vs the target mode
//             direction
//   arc     — same, over the final quarter of frames
//   motion  — second-difference smoothness of the full trajectory
//   imaging — per-frame (1-clip)(1-noise)*sharpness with clip = out-of-range
//             coordinate fraction, noise = normalized step size, sharpness =
//             exp(-distance to the nearest mode)

namespace detail {

inline Vec target_mode_mean(const MixtureWorld& world, const ConditionSet& target) {
    for (const auto& m : world.modes) {
        if (target.text_class && m.text_class != *target.text_class) continue;
        if (target.identity && m.identity != *target.identity) continue;
        return m.mean;
    }
    throw ConditionError("target matches no mode");
}

inline Vec text_class_centroid(const MixtureWorld& world, const ConditionSet& target) {
    Vec c(world.dim, 0.0);
    double z = 0.0;
    for (size_t k = 0; k < world.modes.size(); ++k) {
        if (target.text_class && world.modes[k].text_class != *target.text_class) continue;
        for (size_t i = 0; i < world.dim; ++i) c[i] += world.prior[k] * world.modes[k].mean[i];
        z += world.prior[k];
    }
    if (z <= 0.0) throw ConditionError("target text class matches no mode");
    for (double& v : c) v /= z;
    return c;
}

inline EmbeddingSet frames_as_embeddings(const std::vector<Vec>& frames, const Vec& ref,
                                         size_t from, const std::string& tag) {
    EmbeddingSet emb;
    emb.space_tag = tag;
    emb.ref = ref;
    for (size_t k = from; k < frames.size(); ++k)
        if (norm(frames[k]) > 1e-9) emb.frames.push_back(frames[k]);
    if (emb.frames.empty()) emb.frames.push_back(ref);
    emb.normalize();
    return emb;
}

}  // namespace detail

inline MetricVector score_trajectory(const TrajectoryArtifact& traj, const MixtureWorld& world,
                                     const ConditionSet& target) {
    if (traj.frames.size() < 3) throw ParameterError("score_trajectory: need >= 3 frames");
    MetricVector mv;
    const Vec ref = detail::target_mode_mean(world, target);
    const size_t n = traj.frames.size();

    mv.set_core("cur", identity_score(detail::frames_as_embeddings(traj.frames, ref, n / 2, "cur")));
    mv.set_core("arc",
                identity_score(detail::frames_as_embeddings(traj.frames, ref, (3 * n) / 4, "arc")));

    const Vec centroid = detail::text_class_centroid(world, target);
    mv.set_core("gme", std::exp(-std::sqrt(sq_dist(traj.final_x, centroid))));

    mv.set_core("motion", motion_smoothness_proxy(traj.frames));

    std::vector<FrameStats> stats;
    stats.reserve(n);
    for (size_t k = 0; k < n; ++k) {
        FrameStats s;
        size_t clipped = 0;
        for (double v : traj.frames[k])
            if (std::abs(v) > 3.0) ++clipped;
        s.exposure_clip = double(clipped) / double(traj.frames[k].size());
        s.noise = k == 0 ? 0.0
                         : std::min(1.0, std::sqrt(sq_dist(traj.frames[k], traj.frames[k - 1])) / 4.0);
        double best = std::numeric_limits<double>::infinity();
        for (const auto& m : world.modes)
            best = std::min(best, std::sqrt(sq_dist(traj.frames[k], m.mean)));
        s.sharpness = std::exp(-best);
        stats.push_back(s);
    }
    mv.set_core("imaging", imaging_quality_proxy(stats));
    return mv;
}

// ---- artifact I/O ----

struct RunStamp {
    std::uint64_t seed = 0;
    std::string config_digest;
};

inline nlohmann::json stamp_json(const RunStamp& stamp) {
    return {{"schema_version", kSchemaVersion},
            {"seed", stamp.seed},
            {"config_digest", stamp.config_digest}};
}

inline void save_run_output(const std::filesystem::path& dir, const SampleRunOutput& run,
                            const RunStamp& stamp, bool write_traces = true) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    for (const auto& method : run.methods) {
        std::string finals;
        const auto& trajs = run.trajectories.at(method.name);
        for (const auto& t : trajs) {
            nlohmann::json j = stamp_json(stamp);
            j["sample_id"] = t.sample_id;
            j["method"] = t.method;
            j["sample_seed"] = t.seed;
            j["final"] = t.final_x;
            finals += j.dump() + "\n";
        }
        write_text_atomic(dir / ("finals__" + method.name + ".jsonl"), finals);

        std::string frames;
        for (const auto& t : trajs) {
            nlohmann::json j = stamp_json(stamp);
            j["sample_id"] = t.sample_id;
            j["method"] = t.method;
            j["frames"] = t.frames;
            frames += j.dump() + "\n";
        }
        write_text_atomic(dir / ("frames__" + method.name + ".jsonl"), frames);

        if (write_traces) {
            std::string trace_out;
            for (const auto& t : trajs) {
                for (const auto& step : t.trace) {
                    nlohmann::json j = stamp_json(stamp);
                    j["sample_id"] = t.sample_id;
                    j["method"] = t.method;
                    j["t"] = step.t;
                    j["x"] = step.x;
                    j["eps_full"] = step.eps_full;
                    j["eps_no_text"] = step.eps_no_text;
                    j["eps_weak"] = step.eps_weak;
                    j["eps_guided"] = step.eps_guided;
                    j["w_i_effective"] = step.w_i_effective;
                    trace_out += j.dump() + "\n";
                }
            }
            write_text_atomic(dir / ("trace__" + method.name + ".jsonl"), trace_out);
        }
    }
    nlohmann::json hits = stamp_json(stamp);
    hits["hit_rates"] = run.hit_rates;
    write_text_atomic(dir / "hit_rates.json", hits.dump(2) + "\n");
}

// Reads frames__<method>.jsonl files back for the scoring stage.
inline std::map<std::string, std::vector<TrajectoryArtifact>> load_run_frames(
    const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::map<std::string, std::vector<TrajectoryArtifact>> out;
    if (!fs::is_directory(dir))
        throw DataError("sample run directory missing: " + dir.string() +
                        " (produce it with the sample command)");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (name.rfind("frames__", 0) == 0 && e.path().extension() == ".jsonl")
            files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty())
        throw DataError("no frames__*.jsonl in " + dir.string() +
                        " (produce them with the sample command)");
    for (const auto& path : files) {
        std::ifstream in(path);
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            nlohmann::json j = nlohmann::json::parse(line);
            TrajectoryArtifact t;
            t.sample_id = j.at("sample_id");
            t.method = j.at("method");
            j.at("frames").get_to(t.frames);
            if (!t.frames.empty()) t.final_x = t.frames.back();
            out[t.method].push_back(std::move(t));
        }
    }
    return out;
}

inline void save_metric_table(const std::filesystem::path& path, const MetricTable& table,
                              const RunStamp& stamp) {
    std::string out;
    for (const auto& [sample, methods] : table) {
        for (const auto& [method, mv] : methods) {
            for (const auto& name : core_metric_names()) {
                if (auto v = mv.core(name)) {
                    nlohmann::json j = stamp_json(stamp);
                    j["sample_id"] = sample;
                    j["method"] = method;
                    j["metric"] = name;
                    j["value"] = *v;
                    out += j.dump() + "\n";
                }
            }
            for (const auto& [k, v] : mv.extras) {
                nlohmann::json j = stamp_json(stamp);
                j["sample_id"] = sample;
                j["method"] = method;
                j["metric"] = k;
                j["value"] = v;
                out += j.dump() + "\n";
            }
        }
    }
    write_text_atomic(path, out);
}

// ---- report rendering ----

inline std::string render_report(const SelectionReport& report, const MetricTable& table,
                                 const WeightVector& weights) {
    std::map<std::string, std::map<std::string, double>> method_sums;
    std::map<std::string, double> method_overall;
    std::map<std::string, size_t> method_counts;
    for (const auto& [sample, methods] : table) {
        for (const auto& [method, mv] : methods) {
            bool complete = true;
            for (const auto& name : core_metric_names())
                if (!mv.core(name)) complete = false;
            if (!complete) continue;
            for (const auto& name : core_metric_names())
                method_sums[method][name] += *mv.core(name);
            method_overall[method] += overall_score(mv, weights);
            ++method_counts[method];
        }
    }

    std::ostringstream os;
    os << std::left;
    auto row = [&os](const std::string& name, const std::map<std::string, double>& vals,
                     double overall) {
        os << "  " << std::setw(16) << name;
        for (const auto& metric : core_metric_names()) {
            const auto it = vals.find(metric);
            os << std::setw(10)
               << (it == vals.end() ? std::string("--")
                                    : (std::ostringstream() << std::fixed << std::setprecision(4)
                                                            << it->second)
                                          .str());
        }
        os << std::fixed << std::setprecision(4) << overall << "\n";
    };

    os << "Per-method means\n  " << std::setw(16) << "method";
    for (const auto& metric : core_metric_names()) os << std::setw(10) << metric;
    os << "overall\n";
    for (const auto& [method, sums] : method_sums) {
        std::map<std::string, double> means;
        for (const auto& [k, v] : sums) means[k] = v / double(method_counts[method]);
        row(method, means, method_overall[method] / double(method_counts[method]));
    }
    os << "\nMoE selection (per-sample best)\n";
    row("moe", report.aggregate_metric_means, report.aggregate_overall_mean);

    os << "\nMethod usage\n";
    for (const auto& [method, count] : report.method_usage)
        os << "  " << std::setw(16) << method << count << "\n";
    if (!report.exclusions.empty()) {
        os << "\nExcluded samples (no valid candidate)\n";
        for (const auto& s : report.exclusions) os << "  " << s << "\n";
    }
    return os.str();
}

}  // namespace tpige
