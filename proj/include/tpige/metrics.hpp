#pragma once

// Per-video metric computation: cosine identity scores from embedding files,
// desk-scale proxies for motion smoothness and imaging quality, and ingestion
// of externally computed metric tables.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tpige/common.hpp"

namespace tpige {

// Core metric names, in reporting order.
inline const std::vector<std::string>& core_metric_names() {
    static const std::vector<std::string> names = {"gme", "cur", "arc", "motion", "imaging"};
    return names;
}

struct MetricVector {
    std::optional<double> gme;
    std::optional<double> cur;
    std::optional<double> arc;
    std::optional<double> motion;
    std::optional<double> imaging;
    std::map<std::string, double> extras;  // e.g. clipscore, fid; never scored

    std::optional<double> core(const std::string& name) const {
        if (name == "gme") return gme;
        if (name == "cur") return cur;
        if (name == "arc") return arc;
        if (name == "motion") return motion;
        if (name == "imaging") return imaging;
        return std::nullopt;
    }

    void set_core(const std::string& name, double value) {
        if (!(value >= 0.0 && value <= 1.0))
            throw DataError("metric " + name + " out of [0,1]: " + std::to_string(value));
        if (name == "gme") gme = value;
        else if (name == "cur") cur = value;
        else if (name == "arc") arc = value;
        else if (name == "motion") motion = value;
        else if (name == "imaging") imaging = value;
        else throw DataError("unknown core metric: " + name);
    }

    void validate() const {
        for (const auto& name : core_metric_names()) {
            const auto v = core(name);
            if (v && !(*v >= 0.0 && *v <= 1.0))
                throw DataError("metric " + name + " out of [0,1]");
        }
    }
};

struct EmbeddingSet {
    Vec ref;
    std::vector<Vec> frames;
    std::string space_tag;

    // Normalizes on load; rejects near-zero vectors.
    void normalize() {
        auto unit = [](Vec& v) {
            const double n = norm(v);
            if (n < 1e-12) throw DataError("EmbeddingSet: zero-norm embedding");
            for (double& x : v) x /= n;
        };
        unit(ref);
        for (auto& f : frames) {
            if (f.size() != ref.size()) throw DimensionError("EmbeddingSet: frame dim mismatch");
            unit(f);
        }
    }
};

// Mean over frames of max(0, cos(frame, ref)); clamping keeps the [0,1] range.
inline double identity_score(const EmbeddingSet& emb) {
    if (emb.frames.empty()) throw ParameterError("identity_score: no frames");
    double sum = 0.0;
    for (const auto& f : emb.frames) {
        const double c = dot(f, emb.ref) / (norm(f) * norm(emb.ref));
        sum += std::max(0.0, c);
    }
    return std::clamp(sum / double(emb.frames.size()), 0.0, 1.0);
}

// 1 - normalized mean second-difference magnitude. Constant trajectories
// resolve the 0/0 case to perfectly smooth.
inline double motion_smoothness_proxy(const std::vector<Vec>& frames) {
    if (frames.size() < 3) throw ParameterError("motion_smoothness_proxy: need >= 3 frames");
    const size_t dim = frames.front().size();
    double second_sum = 0.0, first_sum = 0.0;
    for (size_t k = 1; k < frames.size(); ++k) {
        if (frames[k].size() != dim)
            throw DimensionError("motion_smoothness_proxy: frame dim mismatch");
        double d1 = 0.0;
        for (size_t i = 0; i < dim; ++i) {
            const double d = frames[k][i] - frames[k - 1][i];
            d1 += d * d;
        }
        first_sum += std::sqrt(d1);
    }
    for (size_t k = 1; k + 1 < frames.size(); ++k) {
        double d2 = 0.0;
        for (size_t i = 0; i < dim; ++i) {
            const double d = frames[k + 1][i] - 2.0 * frames[k][i] + frames[k - 1][i];
            d2 += d * d;
        }
        second_sum += std::sqrt(d2);
    }
    const double mean_second = second_sum / double(frames.size() - 2);
    const double mean_first = first_sum / double(frames.size() - 1);
    if (mean_first < 1e-12) return 1.0;  // zero motion counts as smooth
    const double score = 1.0 - mean_second / (mean_first * 2.0 + 1e-12);
    return std::clamp(score, 0.0, 1.0);
}

struct FrameStats {
    double exposure_clip = 0.0;  // fraction of clipped pixels, [0,1]
    double noise = 0.0;          // normalized noise estimate, [0,1]
    double sharpness = 1.0;      // normalized sharpness, [0,1]
};

// Mean over frames of (1 - clip) * (1 - noise) * sharpness.
inline double imaging_quality_proxy(const std::vector<FrameStats>& stats) {
    if (stats.empty()) throw ParameterError("imaging_quality_proxy: no frame stats");
    double sum = 0.0;
    for (const auto& s : stats) {
        for (double v : {s.exposure_clip, s.noise, s.sharpness})
            if (!(v >= 0.0 && v <= 1.0))
                throw DataError("imaging_quality_proxy: stat out of [0,1]");
        sum += (1.0 - s.exposure_clip) * (1.0 - s.noise) * s.sharpness;
    }
    return std::clamp(sum / double(stats.size()), 0.0, 1.0);
}

// sample_id -> method -> metrics
using MetricTable = std::map<std::string, std::map<std::string, MetricVector>>;

// JSONL rows {sample_id, method, metric, value}; core metrics validated to
// [0,1], anything else lands in extras.
inline MetricTable ingest_metrics(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read metrics file: " + path.string());
    MetricTable table;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw DataError("metrics parse error at line " + std::to_string(lineno));
        const std::string sample = j.at("sample_id");
        const std::string method = j.at("method");
        const std::string metric = j.at("metric");
        const double value = j.at("value");
        auto& mv = table[sample][method];
        const auto& core = core_metric_names();
        if (std::find(core.begin(), core.end(), metric) != core.end()) {
            if (!(value >= 0.0 && value <= 1.0))
                throw DataError("metric out of range: sample=" + sample + " method=" + method +
                                " metric=" + metric + " value=" + std::to_string(value));
            mv.set_core(metric, value);
        } else {
            mv.extras[metric] = value;
        }
    }
    return table;
}

// Merge external rows into locally computed ones. Conflicting core values are
// an error unless prefer_local is set.
inline void merge_metrics(MetricTable& local, const MetricTable& external, bool prefer_local) {
    for (const auto& [sample, methods] : external) {
        for (const auto& [method, mv] : methods) {
            auto& dst = local[sample][method];
            for (const auto& name : core_metric_names()) {
                const auto v = mv.core(name);
                if (!v) continue;
                const auto existing = dst.core(name);
                if (existing && std::abs(*existing - *v) > 1e-12) {
                    if (!prefer_local)
                        throw DataError("metric conflict: sample=" + sample + " method=" + method +
                                        " metric=" + name + " (use --prefer-local to override)");
                    continue;
                }
                if (!existing) dst.set_core(name, *v);
            }
            for (const auto& [k, v] : mv.extras)
                if (!dst.extras.count(k)) dst.extras[k] = v;
        }
    }
}

// ---- embedding file formats ----
// JSON: {schema_version, dim, count, space_tag, ref: [...], frames: [[...], ...]}
// Binary: magic "TPEB", u32 schema, u32 dim, u32 count, u32 tag_len, tag bytes,
//         then (count + 1) * dim float32 (ref first).

inline EmbeddingSet load_embedding_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read embedding file: " + path.string());
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw DataError("embedding file parse error: " + path.string());
    EmbeddingSet emb;
    emb.space_tag = j.value("space_tag", "");
    j.at("ref").get_to(emb.ref);
    j.at("frames").get_to(emb.frames);
    const size_t dim = j.value("dim", emb.ref.size());
    const size_t count = j.value("count", emb.frames.size());
    if (dim != emb.ref.size() || count != emb.frames.size())
        throw DataError("embedding header mismatch: " + path.string());
    emb.normalize();
    return emb;
}

inline void save_embedding_json(const std::filesystem::path& path, const EmbeddingSet& emb) {
    nlohmann::json j = {{"schema_version", kSchemaVersion}, {"dim", emb.ref.size()},
                        {"count", emb.frames.size()},       {"space_tag", emb.space_tag},
                        {"ref", emb.ref},                   {"frames", emb.frames}};
    std::ofstream out(path);
    if (!out) throw DataError("cannot write embedding file: " + path.string());
    out << j.dump() << "\n";
}

inline EmbeddingSet load_embedding_binary(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read embedding file: " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != "TPEB")
        throw DataError("bad embedding magic: " + path.string());
    auto read_u32 = [&in, &path]() {
        std::uint32_t v = 0;
        in.read(reinterpret_cast<char*>(&v), sizeof(v));
        if (!in) throw DataError("truncated embedding file: " + path.string());
        return v;
    };
    const std::uint32_t schema = read_u32();
    if (schema != kSchemaVersion) throw DataError("unsupported embedding schema version");
    const std::uint32_t dim = read_u32();
    const std::uint32_t count = read_u32();
    const std::uint32_t tag_len = read_u32();
    EmbeddingSet emb;
    emb.space_tag.resize(tag_len);
    in.read(emb.space_tag.data(), tag_len);
    auto read_vec = [&](Vec& v) {
        v.resize(dim);
        for (std::uint32_t i = 0; i < dim; ++i) {
            float f = 0;
            in.read(reinterpret_cast<char*>(&f), sizeof(f));
            v[i] = f;
        }
        if (!in) throw DataError("truncated embedding file: " + path.string());
    };
    read_vec(emb.ref);
    emb.frames.resize(count);
    for (auto& f : emb.frames) read_vec(f);
    emb.normalize();
    return emb;
}

inline void save_embedding_binary(const std::filesystem::path& path, const EmbeddingSet& emb) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write embedding file: " + path.string());
    out.write("TPEB", 4);
    auto write_u32 = [&out](std::uint32_t v) { out.write(reinterpret_cast<char*>(&v), sizeof(v)); };
    write_u32(kSchemaVersion);
    write_u32(std::uint32_t(emb.ref.size()));
    write_u32(std::uint32_t(emb.frames.size()));
    write_u32(std::uint32_t(emb.space_tag.size()));
    out.write(emb.space_tag.data(), std::streamsize(emb.space_tag.size()));
    auto write_vec = [&](const Vec& v) {
        for (double d : v) {
            const float f = float(d);
            out.write(reinterpret_cast<const char*>(&f), sizeof(f));
        }
    };
    write_vec(emb.ref);
    for (const auto& f : emb.frames) write_vec(f);
}

// ---- JSON for MetricVector ----

inline void to_json(nlohmann::json& j, const MetricVector& m) {
    j = nlohmann::json::object();
    for (const auto& name : core_metric_names())
        if (auto v = m.core(name)) j[name] = *v;
    if (!m.extras.empty()) j["extras"] = m.extras;
}
inline void from_json(const nlohmann::json& j, MetricVector& m) {
    for (const auto& name : core_metric_names())
        if (j.contains(name)) m.set_core(name, j[name].get<double>());
    if (j.contains("extras")) j.at("extras").get_to(m.extras);
    m.validate();
}

}  // namespace tpige
