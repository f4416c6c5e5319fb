#pragma once

// Prompt and reference-image enhancement: instruction templates, provider
// abstraction (deterministic mock + generic HTTP chat client), output
// validators, and a content-addressed response cache.

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "tpige/common.hpp"

namespace tpige {

struct SampleRecord {
    std::string sample_id;
    std::string prompt;                         // raw prompt T, nonempty
    std::string reference_id;                   // opaque handle: path or embedding key
    std::optional<std::string> enhanced_prompt;  // T_c
    std::optional<std::string> ref_image_prompt; // T_ref
    std::optional<std::string> enhanced_reference;  // I_ref_c handle

    void validate() const {
        if (sample_id.empty()) throw DataError("SampleRecord: sample_id required");
        if (prompt.empty()) throw DataError("SampleRecord: prompt must be nonempty");
    }
};

struct ProviderResponse {
    std::string text;
    std::string provider_name;
    long latency_ms = 0;
    bool cached = false;
};

// ---- text normalization helpers ----

inline std::string normalize_ws(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    bool in_space = true;  // leading whitespace dropped
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!in_space) out.push_back(' ');
            in_space = true;
        } else {
            out.push_back(c);
            in_space = false;
        }
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    return out;
}

inline std::string lower(std::string s) {
    for (char& c : s) c = char(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

inline std::string strip_terminal_punct(std::string s) {
    while (!s.empty() && (s.back() == '.' || s.back() == '!' || s.back() == '?')) s.pop_back();
    while (!s.empty() && s.back() == ' ') s.pop_back();
    return s;
}

// ---- instruction templates ----

// The PE instruction embeds the raw prompt and the four revision constraints;
// the reference image travels out-of-band as an attachment.
inline std::string build_pe_instruction(const std::string& raw_prompt) {
    const std::string t = normalize_ws(raw_prompt);
    if (t.empty()) throw ParameterError("build_pe_instruction: prompt must be nonempty");
    std::ostringstream os;
    os << "Inputs\n"
       << "1. Original prompt: " << t << "\n"
       << "2. Image of one person's face (attached)\n"
       << "\n"
       << "Task\n"
       << "Return one revised caption according to the inputs that\n"
       << "- preserve the original caption verbatim;\n"
       << "- insert a short clause including only facial attributes of the image "
          "(approx. age, gender presentation, notable traits);\n"
       << "- omit clothing, accessories and background of the image;\n"
       << "- ensure the result reads as one natural sentence.\n";
    return os.str();
}

inline std::string build_ie_instruction(const std::string& enhanced_prompt) {
    const std::string t = normalize_ws(enhanced_prompt);
    if (t.empty()) throw ParameterError("build_ie_instruction: prompt must be nonempty");
    std::ostringstream os;
    os << "Input\n"
       << "Original prompt: " << t << "\n"
       << "\n"
       << "Task\n"
       << "Return one sentence that\n"
       << "- preserves the subject's identity and keeps the face fully visible "
          "(no occluding items);\n"
       << "- retains only profession/role attire, explicit actions, gender or hairstyle cues "
          "mentioned in the prompt;\n"
       << "- adds nothing not present in the description and focus on the attributes of the "
          "prompt subject;\n"
       << "- reads as natural third-person narration with no hashtags, camera directions, or "
          "meta language.\n";
    return os.str();
}

// ---- validators ----

struct ValidationReport {
    bool ok = true;
    std::vector<std::string> reasons;

    void fail(std::string reason) {
        ok = false;
        reasons.push_back(std::move(reason));
    }
};

// Non-facial categories (clothing, accessories, background) as a default
// lexicon; callers can swap in their own list.
inline const std::vector<std::string>& default_pe_blacklist() {
    static const std::vector<std::string> words = {
        "wearing", "jacket", "shirt", "dress",   "coat",    "suit",     "uniform",
        "jeans",   "sweater", "scarf", "necklace", "earring", "bracelet", "sunglasses",
        "helmet",  "background", "outdoors", "indoors", "scenery", "landscape"};
    return words;
}

inline const std::vector<std::string>& default_meta_blacklist() {
    static const std::vector<std::string> phrases = {"camera", "hashtag", "#", "close-up shot",
                                                     "voiceover"};
    return phrases;
}

inline bool is_single_sentence(const std::string& normalized) {
    if (normalized.empty()) return false;
    if (normalized.find('\n') != std::string::npos) return false;
    if (normalized.back() != '.') return false;
    for (size_t i = 0; i + 1 < normalized.size(); ++i) {
        const char c = normalized[i];
        if (c == '.' || c == '!' || c == '?') return false;
    }
    return true;
}

// Pass iff T survives verbatim inside T_c (whitespace-normalized, trailing
// punctuation of T ignored), T_c is one sentence, and the inserted text stays
// inside the facial-attribute vocabulary.
inline ValidationReport validate_pe(const std::string& raw_prompt, const std::string& enhanced,
                                    const std::vector<std::string>& blacklist = default_pe_blacklist()) {
    ValidationReport report;
    const std::string t = strip_terminal_punct(normalize_ws(raw_prompt));
    const std::string tc = normalize_ws(enhanced);
    if (t.empty() || tc.empty()) {
        report.fail("empty prompt");
        return report;
    }
    const size_t pos = tc.find(t);
    if (pos == std::string::npos) {
        report.fail("verbatim: original prompt not preserved verbatim");
        return report;
    }
    std::string sentence = tc;
    if (sentence.back() != '.') sentence += '.';  // bare echo of a period-free T is legal
    if (!is_single_sentence(sentence))
        report.fail("single-sentence: expected exactly one terminal period and no line breaks");

    std::string inserted = lower(tc.substr(0, pos) + tc.substr(pos + t.size()));
    for (const auto& word : blacklist) {
        if (inserted.find(lower(word)) != std::string::npos) {
            report.fail("non-facial attribute: \"" + word + "\"");
            break;
        }
    }
    return report;
}

// T_ref validation: one sentence, no meta language.
inline ValidationReport validate_ref_prompt(const std::string& ref_prompt,
                                            const std::vector<std::string>& meta_blacklist =
                                                default_meta_blacklist()) {
    ValidationReport report;
    const std::string s = normalize_ws(ref_prompt);
    if (s.empty()) {
        report.fail("empty output");
        return report;
    }
    std::string sentence = s;
    if (sentence.back() != '.') sentence += '.';
    if (!is_single_sentence(sentence))
        report.fail("single-sentence: expected exactly one sentence");
    const std::string low = lower(s);
    for (const auto& phrase : meta_blacklist) {
        if (low.find(lower(phrase)) != std::string::npos) {
            report.fail("meta language: \"" + phrase + "\"");
            break;
        }
    }
    return report;
}

// ---- providers ----

class TextProvider {
public:
    virtual ~TextProvider() = default;
    virtual ProviderResponse complete(const std::string& instruction,
                                      const std::optional<std::string>& image_path) = 0;
    virtual std::string name() const = 0;
};

class ImageGenProvider {
public:
    virtual ~ImageGenProvider() = default;
    // Returns the handle of the regenerated reference image.
    virtual std::string generate(const std::string& ref_handle, const std::string& ref_prompt) = 0;
    virtual std::string name() const = 0;
};

namespace detail {
inline std::optional<std::string> extract_after(const std::string& text, const std::string& marker) {
    const size_t p = text.find(marker);
    if (p == std::string::npos) return std::nullopt;
    const size_t start = p + marker.size();
    const size_t end = text.find('\n', start);
    return text.substr(start, end == std::string::npos ? std::string::npos : end - start);
}
}  // namespace detail

// Deterministic stand-in for the live chat model: parses the embedded prompt
// back out of the instruction and appends a facial-attribute clause chosen by
// input digest. Used for tests, CI, and offline runs.
class MockTextProvider final : public TextProvider {
public:
    ProviderResponse complete(const std::string& instruction,
                              const std::optional<std::string>& image_path) override {
        ++calls_;
        const auto prompt = detail::extract_after(instruction, "Original prompt: ");
        if (!prompt) throw ProviderError("mock provider: no prompt slot in instruction");
        const std::string digest =
            hex_digest(*prompt + "|" + image_path.value_or(""));
        if (instruction.find("revised caption") != std::string::npos)
            return {pe_completion(*prompt, digest), name(), 0, false};
        return {ie_completion(*prompt, digest), name(), 0, false};
    }
    std::string name() const override { return "mock"; }

    long call_count() const { return calls_.load(); }

private:
    static std::string pe_completion(const std::string& prompt, const std::string& digest) {
        static const std::vector<std::string> clauses = {
            "who is a person in their 20s with long black hair",
            "who is a person in their 30s with short curly hair and a light mustache",
            "who is a person in their 40s with gray-streaked hair and deep-set eyes",
            "who is a person in their 50s with a round face and thick eyebrows",
        };
        const std::string base = strip_terminal_punct(normalize_ws(prompt));
        const auto& clause = clauses[fnv1a64(digest) % clauses.size()];
        return base + " " + clause + ".";
    }
    static std::string ie_completion(const std::string& prompt, const std::string& digest) {
        static const std::vector<std::string> roles = {
            "a person shown from the shoulders up with their face fully visible",
            "a person facing forward with an open, unobstructed face",
        };
        (void)prompt;
        return "A portrait of " + std::string(roles[fnv1a64(digest) % roles.size()]) + ".";
    }

    std::atomic<long> calls_{0};
};

// Identity image generator mock: resolvable file handles are copied verbatim
// (output digest equals input digest); opaque keys gain a derived suffix.
class MockImageGenProvider final : public ImageGenProvider {
public:
    explicit MockImageGenProvider(std::filesystem::path out_dir) : out_dir_(std::move(out_dir)) {}

    std::string generate(const std::string& ref_handle, const std::string& ref_prompt) override {
        ++calls_;
        namespace fs = std::filesystem;
        if (fs::exists(ref_handle)) {
            std::ifstream in(ref_handle, std::ios::binary);
            std::string bytes((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
            fs::create_directories(out_dir_);
            const fs::path out = out_dir_ / (hex_digest(bytes) + fs::path(ref_handle).extension().string());
            std::ofstream(out, std::ios::binary).write(bytes.data(), std::streamsize(bytes.size()));
            return out.string();
        }
        if (ref_handle.empty()) throw ProviderError("reference unresolvable: empty handle");
        return ref_handle + "#enh-" + hex_digest(ref_handle + "|" + ref_prompt);
    }
    std::string name() const override { return "mock-imagegen"; }

    long call_count() const { return calls_.load(); }

private:
    std::filesystem::path out_dir_;
    std::atomic<long> calls_{0};
};

// ---- response cache (content-addressed directory) ----

class ResponseCache {
public:
    ResponseCache() = default;
    explicit ResponseCache(std::filesystem::path dir) : dir_(std::move(dir)) {
        if (!dir_.empty()) std::filesystem::create_directories(dir_);
    }

    std::optional<std::string> get(const std::string& key) const {
        if (dir_.empty()) return std::nullopt;
        const auto path = dir_ / (key + ".json");
        std::ifstream in(path);
        if (!in) return std::nullopt;
        nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
        if (j.is_discarded() || !j.contains("text")) return std::nullopt;
        return j["text"].get<std::string>();
    }

    void put(const std::string& key, const std::string& text, const std::string& provider) {
        if (dir_.empty()) return;
        std::scoped_lock lock(mu_);
        nlohmann::json j = {{"schema_version", kSchemaVersion},
                            {"text", text},
                            {"provider", provider}};
        const auto tmp = dir_ / (key + ".tmp");
        const auto path = dir_ / (key + ".json");
        std::ofstream(tmp) << j.dump(2) << "\n";
        std::filesystem::rename(tmp, path);
    }

    bool enabled() const { return !dir_.empty(); }

private:
    std::filesystem::path dir_;
    std::mutex mu_;
};

// ---- enhancement operations ----

struct RetryPolicy {
    int attempts = 3;
    std::chrono::milliseconds base_backoff{100};
};

struct EnhanceResult {
    std::string text;
    ProviderResponse response;
    ValidationReport validation;
    int attempts_used = 1;
};

namespace detail {
template <typename Fn>
ProviderResponse with_retries(const RetryPolicy& policy, Fn&& call) {
    std::string last_error;
    for (int attempt = 1; attempt <= policy.attempts; ++attempt) {
        try {
            return call();
        } catch (const ProviderError& e) {
            last_error = e.what();
            if (attempt < policy.attempts)
                std::this_thread::sleep_for(policy.base_backoff * (1 << (attempt - 1)));
        }
    }
    throw ProviderError("provider failed after " + std::to_string(policy.attempts) +
                        " attempts: " + last_error);
}

inline std::string file_or_handle_digest(const std::string& handle) {
    namespace fs = std::filesystem;
    if (fs::exists(handle)) {
        std::ifstream in(handle, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return hex_digest(bytes);
    }
    return hex_digest(handle);
}
}  // namespace detail

// T -> T_c. Cached by (T, image digest). Validation failures keep the raw T.
inline EnhanceResult enhance_prompt(TextProvider& provider, const std::string& raw_prompt,
                                    const std::string& ref_handle, ResponseCache& cache,
                                    const RetryPolicy& policy = {},
                                    const std::vector<std::string>& blacklist =
                                        default_pe_blacklist()) {
    const std::string instruction = build_pe_instruction(raw_prompt);
    const std::string key =
        "pe-" + hex_digest(normalize_ws(raw_prompt) + "|" + detail::file_or_handle_digest(ref_handle));

    if (auto hit = cache.get(key)) {
        EnhanceResult r{*hit, {*hit, "cache", 0, true}, validate_pe(raw_prompt, *hit, blacklist), 0};
        return r;
    }
    ProviderResponse resp = detail::with_retries(
        policy, [&] { return provider.complete(instruction, ref_handle); });
    if (resp.text.empty()) throw ProviderError("provider returned empty text");
    EnhanceResult r{resp.text, resp, validate_pe(raw_prompt, resp.text, blacklist), 1};
    if (r.validation.ok) cache.put(key, resp.text, resp.provider_name);
    return r;
}

// T_c -> T_ref. Cached by digest of T_c.
inline EnhanceResult derive_ref_prompt(TextProvider& provider, const std::string& enhanced_prompt,
                                       ResponseCache& cache, const RetryPolicy& policy = {},
                                       const std::vector<std::string>& meta_blacklist =
                                           default_meta_blacklist()) {
    const std::string instruction = build_ie_instruction(enhanced_prompt);
    const std::string key = "ie-" + hex_digest(normalize_ws(enhanced_prompt));

    if (auto hit = cache.get(key)) {
        return {*hit, {*hit, "cache", 0, true}, validate_ref_prompt(*hit, meta_blacklist), 0};
    }
    ProviderResponse resp =
        detail::with_retries(policy, [&] { return provider.complete(instruction, std::nullopt); });
    if (resp.text.empty()) throw ProviderError("provider returned empty text");
    EnhanceResult r{resp.text, resp, validate_ref_prompt(resp.text, meta_blacklist), 1};
    if (r.validation.ok) cache.put(key, resp.text, resp.provider_name);
    return r;
}

struct ReferenceProvenance {
    std::string source_digest;
    std::string ref_prompt;
    std::string provider;
    std::string timestamp;
};

// (I_ref, T_ref) -> I_ref_c plus provenance for the run manifest.
inline std::pair<std::string, ReferenceProvenance> enhance_reference(
    ImageGenProvider& provider, const std::string& ref_handle, const std::string& ref_prompt,
    const RetryPolicy& policy = {}) {
    if (ref_handle.empty()) throw DataError("reference unresolvable: empty handle");
    std::string out;
    detail::with_retries(policy, [&] {
        out = provider.generate(ref_handle, ref_prompt);
        return ProviderResponse{out, provider.name(), 0, false};
    });
    const auto now = std::chrono::system_clock::now().time_since_epoch();
    ReferenceProvenance prov{detail::file_or_handle_digest(ref_handle), ref_prompt, provider.name(),
                             std::to_string(std::chrono::duration_cast<std::chrono::seconds>(now).count())};
    return {out, prov};
}

// ---- manifest JSONL ----

inline void to_json(nlohmann::json& j, const SampleRecord& r) {
    j = {{"schema_version", kSchemaVersion},
         {"sample_id", r.sample_id},
         {"prompt", r.prompt},
         {"reference_id", r.reference_id}};
    if (r.enhanced_prompt) j["enhanced_prompt"] = *r.enhanced_prompt;
    if (r.ref_image_prompt) j["ref_image_prompt"] = *r.ref_image_prompt;
    if (r.enhanced_reference) j["enhanced_reference"] = *r.enhanced_reference;
}
inline void from_json(const nlohmann::json& j, SampleRecord& r) {
    j.at("sample_id").get_to(r.sample_id);
    j.at("prompt").get_to(r.prompt);
    r.reference_id = j.value("reference_id", "");
    if (j.contains("enhanced_prompt")) r.enhanced_prompt = j["enhanced_prompt"].get<std::string>();
    if (j.contains("ref_image_prompt")) r.ref_image_prompt = j["ref_image_prompt"].get<std::string>();
    if (j.contains("enhanced_reference"))
        r.enhanced_reference = j["enhanced_reference"].get<std::string>();
    r.validate();
}

inline std::vector<SampleRecord> load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read manifest: " + path.string());
    std::vector<SampleRecord> records;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (normalize_ws(line).empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw DataError("manifest parse error at line " + std::to_string(lineno));
        records.push_back(j.get<SampleRecord>());
    }
    for (size_t i = 0; i < records.size(); ++i)
        for (size_t k = i + 1; k < records.size(); ++k)
            if (records[i].sample_id == records[k].sample_id)
                throw DataError("duplicate sample_id in manifest: " + records[i].sample_id);
    return records;
}

inline void save_manifest(const std::filesystem::path& path,
                          const std::vector<SampleRecord>& records) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw DataError("cannot write manifest: " + path.string());
        for (const auto& r : records) out << nlohmann::json(r).dump() << "\n";
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace tpige
