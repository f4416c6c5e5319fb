// tpige — pipeline driver: enhance -> sample -> score -> select -> report,
// plus weight calibration. All randomness flows from --seed; per-sample seeds
// are seed XOR sample-index. Exit codes: 0 success (warnings allowed),
// 1 usage error, 2 data error, 3 provider error after retries.

#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "tpige/enhance.hpp"
#include "tpige/enhance_http.hpp"
#include "tpige/pipeline.hpp"

namespace fs = std::filesystem;
using namespace tpige;

namespace {

struct CliError {
    int code;
    std::string message;
};

void require_fresh_dir(const fs::path& dir, bool force) {
    if (fs::exists(dir) && !fs::is_empty(dir) && !force)
        throw CliError{1, "output directory not empty: " + dir.string() + " (pass --force)"};
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

int cmd_enhance(const std::string& manifest_path, const std::string& out_path,
                const std::string& cache_dir, const std::string& provider_name,
                const std::string& provider_config_path, const std::string& imagegen_out,
                size_t parallelism, int retry_attempts, int backoff_ms) {
    auto records = load_manifest(manifest_path);
    ResponseCache cache{fs::path(cache_dir)};

    std::unique_ptr<TextProvider> provider;
    if (provider_name == "mock") {
        provider = std::make_unique<MockTextProvider>();
    } else if (provider_name == "http") {
        HttpProviderConfig cfg;
        if (!provider_config_path.empty()) load_json_file(provider_config_path).get_to(cfg);
        provider = std::make_unique<HttpChatProvider>(cfg);
    } else {
        throw CliError{1, "unknown provider: " + provider_name};
    }
    MockImageGenProvider imagegen{fs::path(imagegen_out.empty() ? cache_dir + "/images"
                                                                : imagegen_out)};
    RetryPolicy policy{retry_attempts, std::chrono::milliseconds(backoff_ms)};

    std::atomic<int> warnings{0};
    std::mutex log_mu;
    parallel_for(records.size(), parallelism, [&](size_t i) {
        auto& rec = records[i];
        try {
            auto pe = enhance_prompt(*provider, rec.prompt, rec.reference_id, cache, policy);
            if (pe.validation.ok) {
                rec.enhanced_prompt = pe.text;
            } else {
                rec.enhanced_prompt = rec.prompt;
                std::scoped_lock lock(log_mu);
                ++warnings;
                std::cerr << "warning: " << rec.sample_id
                          << ": prompt enhancement rejected: " << pe.validation.reasons.front()
                          << "\n";
            }
            auto ie = derive_ref_prompt(*provider, *rec.enhanced_prompt, cache, policy);
            if (ie.validation.ok) {
                rec.ref_image_prompt = ie.text;
                auto [handle, prov] =
                    enhance_reference(imagegen, rec.reference_id, ie.text, policy);
                rec.enhanced_reference = handle;
            } else {
                std::scoped_lock lock(log_mu);
                ++warnings;
                std::cerr << "warning: " << rec.sample_id
                          << ": ref prompt rejected: " << ie.validation.reasons.front() << "\n";
            }
        } catch (const ProviderError& e) {
            rec.enhanced_prompt = rec.prompt;  // degrade, don't abort the run
            std::scoped_lock lock(log_mu);
            ++warnings;
            std::cerr << "warning: " << rec.sample_id << ": " << e.what()
                      << "; proceeding with raw prompt\n";
        }
    });

    save_manifest(out_path, records);
    std::cout << "enhanced " << records.size() << " samples, " << warnings.load()
              << " warning(s), manifest: " << out_path << "\n";
    return 0;
}

int cmd_sample(const std::string& world_path, const std::string& methods_path,
               const std::string& guidance_path, size_t num_samples, std::uint64_t seed,
               const std::string& out_dir, const std::string& target_text,
               const std::string& target_identity, const std::string& wi_sweep, bool no_traces,
               size_t parallelism, bool force) {
    WorldConfig wc;
    load_json_file(world_path).get_to(wc);

    std::vector<MethodSpec> methods;
    if (!methods_path.empty()) {
        load_json_file(methods_path).at("methods").get_to(methods);
    } else {
        MethodSpec m;
        m.name = "default";
        if (!guidance_path.empty()) load_json_file(guidance_path).get_to(m.guidance);
        methods.push_back(std::move(m));
    }
    if (!wi_sweep.empty()) {
        std::vector<MethodSpec> swept;
        for (const auto& base : methods) {
            for (const auto& v : split_csv(wi_sweep)) {
                MethodSpec m = base;
                m.guidance.w_i = std::stod(v);
                m.name = base.name + "_wi" + v;
                swept.push_back(std::move(m));
            }
        }
        methods = std::move(swept);
    }

    ConditionSet target;
    if (!target_text.empty()) target.text_class = target_text;
    target.identity = target_identity.empty()
                          ? wc.world.modes.front().identity
                          : target_identity;

    require_fresh_dir(out_dir, force);
    nlohmann::json config_canon = {{"world", wc}, {"methods", methods}, {"samples", num_samples}};
    const RunStamp stamp{seed, hex_digest(config_canon.dump())};

    auto run = run_sampling(wc, methods, target, num_samples, seed, parallelism, true);
    save_run_output(out_dir, run, stamp, !no_traces);

    std::cout << "sampled " << num_samples << " trajectories x " << methods.size()
              << " method(s) -> " << out_dir << "\nhit rates:\n";
    for (const auto& [name, rate] : run.hit_rates)
        std::cout << "  " << std::left << std::setw(20) << name << std::fixed
                  << std::setprecision(4) << rate << "\n";
    return 0;
}

int cmd_score(const std::string& run_dir, const std::string& world_path,
              const std::string& target_text, const std::string& target_identity,
              const std::string& ingest_path, bool prefer_local, const std::string& out_path,
              std::uint64_t seed) {
    MetricTable table;
    std::string digest_src;
    if (!run_dir.empty()) {
        if (world_path.empty())
            throw CliError{1, "--world is required when scoring a sample run"};
        WorldConfig wc;
        load_json_file(world_path).get_to(wc);
        ConditionSet target;
        if (!target_text.empty()) target.text_class = target_text;
        target.identity = target_identity.empty() ? wc.world.modes.front().identity
                                                  : target_identity;
        auto frames = load_run_frames(run_dir);
        for (const auto& [method, trajs] : frames)
            for (const auto& t : trajs)
                table[t.sample_id][method] = score_trajectory(t, wc.world, target);
        digest_src = run_dir + "|" + world_path;
    }
    if (!ingest_path.empty()) {
        auto external = ingest_metrics(ingest_path);
        merge_metrics(table, external, prefer_local);
        digest_src += "|" + ingest_path;
    }
    if (table.empty()) throw CliError{2, "no metrics: provide --run and/or --ingest"};
    save_metric_table(out_path, table, RunStamp{seed, hex_digest(digest_src)});
    std::cout << "scored " << table.size() << " samples -> " << out_path << "\n";
    return 0;
}

int cmd_calibrate(const std::string& rows_path, const std::string& out_path) {
    std::ifstream in(rows_path);
    if (!in) throw CliError{2, "cannot read rows file: " + rows_path};
    std::vector<CalibrationRow> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        CalibrationRow row;
        row.label = j.value("label", "row" + std::to_string(rows.size()));
        j.at("metrics").get_to(row.metrics);
        row.target_overall = j.at("target_overall");
        rows.push_back(std::move(row));
    }
    auto result = calibrate_weights(rows);
    nlohmann::json out = nlohmann::json(result.weights);
    out["residuals"] = nlohmann::json::object();
    for (size_t i = 0; i < rows.size(); ++i) out["residuals"][rows[i].label] = result.residuals[i];
    out["max_abs_residual"] = result.max_abs_residual;
    out["degenerate"] = result.degenerate;
    write_text_atomic(out_path, out.dump(2) + "\n");
    std::cout << "calibrated weights -> " << out_path << " (max |residual| = " << std::scientific
              << result.max_abs_residual << (result.degenerate ? ", DEGENERATE fit" : "") << ")\n";
    if (result.degenerate)
        std::cerr << "warning: rank-deficient system; minimum-norm nonnegative solution reported\n";
    return 0;
}

int cmd_select(const std::string& metrics_path, const std::string& weights_path,
               const std::string& tie_break, bool exclusions_fatal, const std::string& out_path,
               std::uint64_t seed) {
    auto table = ingest_metrics(metrics_path);
    if (table.empty()) throw CliError{2, "empty candidate set in " + metrics_path};
    WeightVector weights = WeightVector::uniform();
    if (!weights_path.empty()) load_json_file(weights_path).get_to(weights);
    auto report = select_per_sample(table, weights, split_csv(tie_break));
    if (exclusions_fatal && !report.exclusions.empty())
        throw CliError{2, "samples without valid candidates: " +
                              std::to_string(report.exclusions.size())};
    nlohmann::json j = report;
    j["seed"] = seed;
    j["config_digest"] = hex_digest(metrics_path + "|" + weights_path + "|" + tie_break);
    write_text_atomic(out_path, j.dump(2) + "\n");
    std::cout << "selected winners for " << report.per_sample.size() << " samples -> " << out_path
              << "\n";
    return 0;
}

int cmd_report(const std::string& selection_path, const std::string& metrics_path,
               const std::string& weights_path, const std::string& out_path) {
    nlohmann::json sel = load_json_file(selection_path);
    SelectionReport report;
    for (const auto& s : sel.at("per_sample")) {
        SampleSelection ss;
        ss.sample_id = s.at("sample_id");
        ss.winning_method = s.at("winning_method");
        ss.winning_score = s.at("winning_score");
        report.per_sample.push_back(std::move(ss));
    }
    sel.at("aggregate_metric_means").get_to(report.aggregate_metric_means);
    report.aggregate_overall_mean = sel.at("aggregate_overall_mean");
    sel.at("method_usage").get_to(report.method_usage);
    sel.at("exclusions").get_to(report.exclusions);

    auto table = ingest_metrics(metrics_path);
    WeightVector weights = WeightVector::uniform();
    if (!weights_path.empty()) load_json_file(weights_path).get_to(weights);
    const std::string rendered = render_report(report, table, weights);
    if (out_path.empty()) {
        std::cout << rendered;
    } else {
        write_text_atomic(out_path, rendered);
        std::cout << "report -> " << out_path << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tpige: identity-preserving generation pipeline"};
    app.require_subcommand(1);

    // enhance
    std::string manifest, enh_out, cache_dir = "cache", provider = "mock", provider_config,
                imagegen_out;
    size_t parallelism = 1;
    int retry_attempts = 3, backoff_ms = 100;
    auto* enhance = app.add_subcommand("enhance", "populate T_c / T_ref / enhanced reference");
    enhance->add_option("--manifest", manifest, "input manifest (JSONL of sample records)")
        ->required();
    enhance->add_option("--out", enh_out, "output manifest path")->required();
    enhance->add_option("--cache-dir", cache_dir, "response cache directory");
    enhance->add_option("--provider", provider, "text provider: mock | http");
    enhance->add_option("--provider-config", provider_config, "provider config JSON");
    enhance->add_option("--imagegen-out", imagegen_out, "directory for regenerated references");
    enhance->add_option("--parallelism", parallelism, "concurrent provider calls");
    enhance->add_option("--retry-attempts", retry_attempts, "provider retry attempts");
    enhance->add_option("--retry-backoff-ms", backoff_ms, "base backoff in ms");

    // sample
    std::string world_path, methods_path, guidance_path, sample_out, target_text, target_identity,
        wi_sweep;
    std::uint64_t seed = 0;
    size_t num_samples = 10;
    bool no_traces = false, force = false;
    auto* sample = app.add_subcommand("sample", "run guided sampling on the analytic testbed");
    sample->add_option("--world", world_path, "world + schedule config JSON")->required();
    sample->add_option("--methods", methods_path, "methods config JSON (list of guidance setups)");
    sample->add_option("--guidance", guidance_path, "single guidance config JSON");
    sample->add_option("--samples", num_samples, "trajectories per method");
    sample->add_option("--seed", seed, "run seed (per-sample seed = seed XOR index)");
    sample->add_option("--out", sample_out, "output directory")->required();
    sample->add_option("--target-text", target_text, "target text class label");
    sample->add_option("--target-identity", target_identity,
                       "target identity label (default: first mode)");
    sample->add_option("--wi-sweep", wi_sweep, "comma-separated W_i values to sweep");
    sample->add_flag("--no-traces", no_traces, "skip per-step trace files");
    sample->add_flag("--force", force, "allow writing into a non-empty directory");
    sample->add_option("--parallelism", parallelism, "parallel trajectories");

    // score
    std::string run_dir, ingest_path, score_out;
    bool prefer_local = false;
    auto* score = app.add_subcommand("score", "compute metric table from a sample run");
    score->add_option("--run", run_dir, "sample run directory");
    score->add_option("--world", world_path, "world config used for the run");
    score->add_option("--target-text", target_text, "target text class label");
    score->add_option("--target-identity", target_identity, "target identity label");
    score->add_option("--ingest", ingest_path, "externally computed metrics JSONL");
    score->add_flag("--prefer-local", prefer_local, "local values win on conflict");
    score->add_option("--out", score_out, "output metrics JSONL")->required();
    score->add_option("--seed", seed, "run seed recorded in the artifact");

    // calibrate
    std::string rows_path, weights_out;
    auto* calibrate = app.add_subcommand("calibrate", "fit metric weights to published rows");
    calibrate->add_option("--rows", rows_path, "calibration rows JSONL")->required();
    calibrate->add_option("--out", weights_out, "output weights JSON")->required();

    // select
    std::string metrics_path, weights_path, tie_break, select_out;
    bool exclusions_fatal = false;
    auto* select = app.add_subcommand("select", "per-sample argmax over candidate methods");
    select->add_option("--metrics", metrics_path, "metric table JSONL")->required();
    select->add_option("--weights", weights_path, "weights JSON (default: uniform 0.2)");
    select->add_option("--tie-break", tie_break, "comma-separated method priority list");
    select->add_flag("--exclusions-fatal", exclusions_fatal,
                     "fail when any sample has no valid candidate");
    select->add_option("--out", select_out, "output selection report JSON")->required();
    select->add_option("--seed", seed, "run seed recorded in the artifact");

    // report
    std::string selection_path, report_out;
    auto* report = app.add_subcommand("report", "render selection tables");
    report->add_option("--selection", selection_path, "selection report JSON")->required();
    report->add_option("--metrics", metrics_path, "metric table JSONL")->required();
    report->add_option("--weights", weights_path, "weights JSON");
    report->add_option("--out", report_out, "output text file (default: stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*enhance)
            return cmd_enhance(manifest, enh_out, cache_dir, provider, provider_config,
                               imagegen_out, parallelism, retry_attempts, backoff_ms);
        if (*sample)
            return cmd_sample(world_path, methods_path, guidance_path, num_samples, seed,
                              sample_out, target_text, target_identity, wi_sweep, no_traces,
                              parallelism, force);
        if (*score)
            return cmd_score(run_dir, world_path, target_text, target_identity, ingest_path,
                             prefer_local, score_out, seed);
        if (*calibrate) return cmd_calibrate(rows_path, weights_out);
        if (*select)
            return cmd_select(metrics_path, weights_path, tie_break, exclusions_fatal, select_out,
                              seed);
        if (*report) return cmd_report(selection_path, metrics_path, weights_path, report_out);
    } catch (const CliError& e) {
        std::cerr << "error: " << e.message << "\n";
        return e.code;
    } catch (const ProviderError& e) {
        std::cerr << "provider error: " << e.what() << "\n";
        return 3;
    } catch (const ParameterError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const Error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
