#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dropgen/diagnostics.hpp"
#include "dropgen/envs.hpp"
#include "dropgen/io.hpp"
#include "dropgen/training.hpp"

namespace dropgen {

constexpr const char* kCodeVersion = "dropgen-lab 0.1.0";

// Full description of one experiment run. Parsed strictly: unknown keys are
// rejected at every level before any compute happens.
struct ExperimentConfig {
    int schema_version = 1;
    EnvironmentSpec spec;

    // data
    int n_train = 512;
    int n_val = 256;
    int n_test = 1024;

    // model
    int hidden = 16;
    int depth = 2;
    int kernel = 1;
    double init_scale = 0.25;
    int extractor_dim = 0;  // 0 = extractor's natural output width
    uint64_t extractor_seed = 42;

    TrainConfig train;

    // diagnostics toggles
    bool risk_report = true;
    bool sensitivity = true;
    bool stable_usage_report = true;
    int alignment_every = 0;  // 0 disables the alignment trace
    std::vector<double> weight_noise_alphas;
    int weight_noise_trials = 5;

    std::string out_dir;

    static ExperimentConfig defaults() {
        ExperimentConfig c;
        c.spec = shortcut_bench();
        c.train.lr0 = 5e-4;
        c.train.steps = 1200;
        c.train.eval_every = 100;
        return c;
    }

    json to_json() const {
        json j;
        j["schema_version"] = schema_version;
        j["spec"] = spec.to_json();
        j["data"] = {{"n_train", n_train}, {"n_val", n_val}, {"n_test", n_test}};
        j["model"] = {{"hidden", hidden},
                      {"depth", depth},
                      {"kernel", kernel},
                      {"init_scale", init_scale},
                      {"extractor_dim", extractor_dim},
                      {"extractor_seed", extractor_seed}};
        j["train"] = {{"steps", train.steps},
                      {"batch_size", train.batch_size},
                      {"lr0", train.lr0},
                      {"weight_decay", train.weight_decay},
                      {"loss", loss_name(train.loss)},
                      {"dropout_p", train.dropout_p},
                      {"mask_mode", mask_mode_name(train.mask_mode)},
                      {"rescale", train.rescale},
                      {"mask_guarantee_nonzero", train.mask_guarantee_nonzero},
                      {"dropout_location", dropout_location_name(train.dropout_location)},
                      {"extractor", extractor_kind_name(train.extractor)},
                      {"input_mode", input_mode_name(train.input_mode)},
                      {"seed", train.seed},
                      {"eval_every", train.eval_every}};
        j["diagnostics"] = {{"risk_report", risk_report},
                            {"sensitivity", sensitivity},
                            {"stable_usage", stable_usage_report},
                            {"alignment_every", alignment_every},
                            {"weight_noise_alphas", weight_noise_alphas},
                            {"weight_noise_trials", weight_noise_trials}};
        if (!out_dir.empty()) j["out_dir"] = out_dir;
        return j;
    }

    uint64_t hash() const { return fnv1a(to_json().dump()); }

    static ExperimentConfig from_json(const json& j) {
        require_keys(j, {"schema_version", "spec", "spec_path", "spec_builtin", "data", "model",
                         "train", "diagnostics", "out_dir"},
                     "config");
        ExperimentConfig c = defaults();
        check(j.contains("schema_version"), "config: missing schema_version");
        c.schema_version = j.at("schema_version").get<int>();
        check(c.schema_version == 1, "config: unsupported schema_version");

        const int spec_sources = static_cast<int>(j.contains("spec")) +
                                 static_cast<int>(j.contains("spec_path")) +
                                 static_cast<int>(j.contains("spec_builtin"));
        check(spec_sources == 1, "config: exactly one of spec | spec_path | spec_builtin");
        if (j.contains("spec")) {
            c.spec = EnvironmentSpec::from_json(j.at("spec"));
        } else if (j.contains("spec_path")) {
            c.spec = EnvironmentSpec::from_json(
                parse_json_file(j.at("spec_path").get<std::string>()));
        } else {
            c.spec = builtin_spec(j.at("spec_builtin").get<std::string>());
        }

        if (j.contains("data")) {
            require_keys(j.at("data"), {"n_train", "n_val", "n_test"}, "config.data");
            c.n_train = j.at("data").value("n_train", c.n_train);
            c.n_val = j.at("data").value("n_val", c.n_val);
            c.n_test = j.at("data").value("n_test", c.n_test);
            check(c.n_train > 0 && c.n_val > 0 && c.n_test > 0,
                  "config.data: sample counts must be positive");
        }
        if (j.contains("model")) {
            require_keys(j.at("model"),
                         {"hidden", "depth", "kernel", "init_scale", "extractor_dim",
                          "extractor_seed"},
                         "config.model");
            c.hidden = j.at("model").value("hidden", c.hidden);
            c.depth = j.at("model").value("depth", c.depth);
            c.kernel = j.at("model").value("kernel", c.kernel);
            c.init_scale = j.at("model").value("init_scale", c.init_scale);
            c.extractor_dim = j.at("model").value("extractor_dim", c.extractor_dim);
            c.extractor_seed = j.at("model").value("extractor_seed", c.extractor_seed);
        }
        if (j.contains("train")) {
            const json& t = j.at("train");
            require_keys(t,
                         {"steps", "batch_size", "lr0", "weight_decay", "loss", "dropout_p",
                          "mask_mode", "rescale", "mask_guarantee_nonzero", "dropout_location",
                          "extractor", "input_mode", "seed", "eval_every"},
                         "config.train");
            c.train.steps = t.value("steps", c.train.steps);
            c.train.batch_size = t.value("batch_size", c.train.batch_size);
            c.train.lr0 = t.value("lr0", c.train.lr0);
            c.train.weight_decay = t.value("weight_decay", c.train.weight_decay);
            if (t.contains("loss")) c.train.loss = loss_from_name(t.at("loss").get<std::string>());
            c.train.dropout_p = t.value("dropout_p", c.train.dropout_p);
            if (t.contains("mask_mode"))
                c.train.mask_mode = mask_mode_from_name(t.at("mask_mode").get<std::string>());
            c.train.rescale = t.value("rescale", c.train.rescale);
            c.train.mask_guarantee_nonzero =
                t.value("mask_guarantee_nonzero", c.train.mask_guarantee_nonzero);
            if (t.contains("dropout_location"))
                c.train.dropout_location = dropout_location_from_name(t.at("dropout_location").get<std::string>());
            if (t.contains("extractor"))
                c.train.extractor = extractor_kind_from_name(t.at("extractor").get<std::string>());
            if (t.contains("input_mode"))
                c.train.input_mode = input_mode_from_name(t.at("input_mode").get<std::string>());
            c.train.seed = t.value("seed", c.train.seed);
            c.train.eval_every = t.value("eval_every", c.train.eval_every);
            c.train.validate();
        }
        if (j.contains("diagnostics")) {
            const json& d = j.at("diagnostics");
            require_keys(d,
                         {"risk_report", "sensitivity", "stable_usage", "alignment_every",
                          "weight_noise_alphas", "weight_noise_trials"},
                         "config.diagnostics");
            c.risk_report = d.value("risk_report", c.risk_report);
            c.sensitivity = d.value("sensitivity", c.sensitivity);
            c.stable_usage_report = d.value("stable_usage", c.stable_usage_report);
            c.alignment_every = d.value("alignment_every", c.alignment_every);
            c.weight_noise_alphas =
                d.value("weight_noise_alphas", c.weight_noise_alphas);
            c.weight_noise_trials = d.value("weight_noise_trials", c.weight_noise_trials);
        }
        c.out_dir = j.value("out_dir", std::string{});
        return c;
    }

    static EnvironmentSpec builtin_spec(const std::string& name) {
        if (name == "shortcut-bench") return shortcut_bench();
        if (name == "shortcut-bench-gaussian") return gaussian_shortcut_bench();
        contract_fail("unknown builtin spec: " + name);
    }
};

// Applies a `key.path=value` override; values parse as JSON when possible and
// fall back to strings.
inline void apply_override(json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    check(eq != std::string::npos && eq > 0, "override must look like key.path=value");
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::parse_error&) {
        value = raw;  // bare strings like per-channel
    }
    json* node = &config;
    size_t start = 0;
    for (;;) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
        check(!key.empty(), "override has an empty path segment");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

struct RunResult {
    fs::path dir;
    ExperimentConfig config;
    TrainState state;
    EvalResult in_domain;
    EvalResult ood;  // valid if has_ood
    bool has_ood = false;
    RiskReport risks;
    std::vector<std::string> warnings;
};

inline Extractor make_extractor(const ExperimentConfig& c) {
    const int n_s = c.spec.n_s();
    switch (c.train.extractor) {
        case ExtractorKind::identity: return Extractor::identity(n_s);
        case ExtractorKind::frozen_random:
            return Extractor::frozen_random(
                n_s, c.extractor_dim > 0 ? c.extractor_dim : n_s, c.extractor_seed);
        case ExtractorKind::learned_frozen:
            return Extractor::learned_frozen(c.spec, c.extractor_seed);
    }
    return Extractor::identity(n_s);
}

inline std::string iso_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%FT%TZ", std::gmtime(&t));
    return buf;
}

// Trains per the config, runs the enabled diagnostics, and writes history
// CSV, reports, checkpoint, and the run manifest into `dir`.
inline RunResult run_experiment(const ExperimentConfig& config, const fs::path& dir) {
    const std::string started = iso_timestamp();
    RunResult result;
    result.config = config;
    result.dir = dir;
    fs::create_directories(dir);

    const EnvironmentSpec& spec = config.spec;
    const uint64_t seed = config.train.seed;
    Dataset train_data = sample_pooled(spec, spec.train_envs, config.n_train, seed);
    Dataset val_data = sample_pooled(spec, spec.train_envs, config.n_val, seed + 1000);
    Dataset ood_data;
    result.has_ood = !spec.test_envs.empty();
    if (result.has_ood)
        ood_data = sample_dataset(spec, spec.test_envs.front(), config.n_test, seed + 2000);

    Extractor extractor = make_extractor(config);
    Model model = Model::random_init(
        make_mlp_spec(train_data.n_u + extractor.out_channels(), train_data.n_u,
                      config.hidden, config.depth, spec.num_classes, config.kernel),
        seed, config.init_scale);

    std::vector<AlignmentRecord> alignment;
    Dataset held = sample_pooled(spec, spec.train_envs, 64, seed + 3000);
    Batch held_batch = full_batch(held);
    TrainObserver observer;
    observer.every = config.alignment_every;
    observer.fn = [&](const Model& m, long step) {
        alignment.push_back(gradient_alignment(m, extractor, held_batch, train_data.n_u, step));
    };

    const EnvironmentSpec* spec_ptr = spec.mode == EmissionMode::discrete ? &spec : nullptr;
    result.state = train(config.train, train_data, val_data,
                         result.has_ood ? &ood_data : nullptr, std::move(model), extractor,
                         spec_ptr, nullptr, config.alignment_every > 0 ? &observer : nullptr);
    result.warnings = result.state.history.warnings;

    std::vector<std::string> files;
    auto emit = [&](const std::string& name, const std::string& content) {
        atomic_write(dir / name, content);
        files.push_back(name);
    };

    emit("config.json", config.to_json().dump(2) + "\n");
    emit("history.csv", result.state.history.to_csv());
    save_checkpoint(result.state, dir / "checkpoint.json");
    files.push_back("checkpoint.json");

    result.in_domain = evaluate(result.state.model, extractor, val_data,
                                config.train.input_mode, config.train.loss);
    if (result.has_ood)
        result.ood = evaluate(result.state.model, extractor, ood_data, config.train.input_mode);

    json metrics;
    metrics["in_domain_loss"] = result.in_domain.loss;
    metrics["in_domain_dice"] = result.in_domain.mean_dice;
    if (result.has_ood) {
        metrics["ood_loss"] = result.ood.loss;
        metrics["ood_dice"] = result.ood.mean_dice;
    }

    if (config.risk_report) {
        MaskDistribution dist;
        dist.mode = MaskMode::two_block;
        dist.p = config.train.dropout_p;
        dist.rescale = false;
        dist.channels = result.state.model.input_channels();
        dist.n_u = train_data.n_u;
        result.risks = decomposed_risk(result.state.model, extractor, val_data, dist.pi(),
                                       spec_ptr);
        emit("risk_report.json", result.risks.to_json().dump(2) + "\n");
    }
    if (config.sensitivity) {
        SensitivityReport rep =
            channel_removal_sensitivity(result.state.model, extractor, val_data);
        emit("sensitivity.json", rep.to_json().dump(2) + "\n");
        CsvWriter csv({"label", "delta_drop_image", "delta_drop_reps"});
        csv.row({"p=" + fmt_double(config.train.dropout_p), fmt_double(rep.delta_drop_image),
                 fmt_double(rep.delta_drop_reps)});
        emit("sensitivity.csv", csv.str());
    }
    if (config.stable_usage_report) {
        StableUsage su = stable_usage(result.state.model, extractor, val_data, spec_ptr);
        json j;
        j["output_variance"] = su.output_variance;
        j["R_01"] = su.r_01;
        if (su.gap_to_bayes) j["gap_to_bayes"] = *su.gap_to_bayes;
        emit("stable_usage.json", j.dump(2) + "\n");
        metrics["stable_usage_variance"] = su.output_variance;
    }
    if (config.alignment_every > 0) emit("alignment.csv", alignment_csv(alignment));
    if (!config.weight_noise_alphas.empty()) {
        auto curve = weight_noise_robustness(result.state.model, extractor, val_data,
                                             config.weight_noise_alphas,
                                             config.weight_noise_trials, seed);
        CsvWriter csv({"alpha", "mean_dice", "mean_loss"});
        for (const auto& pt : curve)
            csv.row({fmt_double(pt.alpha), fmt_double(pt.mean_dice), fmt_double(pt.mean_loss)});
        emit("robustness.csv", csv.str());
    }
    emit("metrics.json", metrics.dump(2) + "\n");

    json manifest;
    manifest["config_hash"] = config.hash();
    manifest["spec_hash"] = spec.hash();
    manifest["seed"] = seed;
    manifest["code_version"] = kCodeVersion;
    manifest["started_at"] = started;
    manifest["finished_at"] = iso_timestamp();
    manifest["warnings"] = result.warnings;
    std::sort(files.begin(), files.end());
    files.push_back("manifest.json");
    std::sort(files.begin(), files.end());
    manifest["files"] = files;
    atomic_write(dir / "manifest.json", manifest.dump(2) + "\n");
    return result;
}

// -- sweep -------------------------------------------------------------------

struct SweepPoint {
    std::string id;
    std::vector<std::string> overrides;
};

// Cartesian product of the grid in deterministic (insertion, then value)
// order.
inline std::vector<SweepPoint> grid_points(
    const std::vector<std::pair<std::string, std::vector<std::string>>>& grid) {
    std::vector<SweepPoint> points{{"", {}}};
    for (const auto& [key, values] : grid) {
        check(!values.empty(), "grid key " + key + " has no values");
        std::vector<SweepPoint> next;
        for (const auto& p : points)
            for (const auto& v : values) {
                SweepPoint q = p;
                q.id += (q.id.empty() ? "" : "|") + key + "=" + v;
                q.overrides.push_back(key + "=" + v);
                next.push_back(q);
            }
        points = std::move(next);
    }
    if (points.size() == 1 && points.front().id.empty()) points.front().id = "baseline";
    return points;
}

struct SweepRow {
    std::string point_id;
    uint64_t seed = 0;
    double p = 0.0;
    std::string input_mode;
    double in_domain_dice = 0.0;
    double ood_dice = 0.0;
    double r_11 = 0.0, r_10 = 0.0, r_01 = 0.0;
    bool failed = false;
    std::string error;
};

inline double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n == 0 ? 0.0 : (n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]));
}

inline double mad_of(const std::vector<double>& v) {
    const double med = median_of(v);
    std::vector<double> dev;
    dev.reserve(v.size());
    for (double x : v) dev.push_back(std::abs(x - med));
    return median_of(dev);
}

struct SweepResult {
    std::vector<SweepRow> rows;
    std::string csv;
    bool any_failed = false;
};

// One run per grid point x seed in a worker pool; aggregated CSV with one
// summary row (median and MAD) per point.
inline SweepResult sweep(const json& base_config,
                         const std::vector<std::pair<std::string, std::vector<std::string>>>& grid,
                         int seeds, const fs::path& out_dir, int jobs = 1) {
    check(seeds > 0, "sweep needs at least one seed");
    check(jobs > 0, "jobs must be positive");
    const auto points = grid_points(grid);
    struct Job {
        size_t point;
        uint64_t seed;
    };
    std::vector<Job> jobs_list;
    for (size_t pi = 0; pi < points.size(); ++pi)
        for (int s = 0; s < seeds; ++s)
            jobs_list.push_back({pi, static_cast<uint64_t>(s)});

    std::vector<SweepRow> rows(jobs_list.size());
    std::atomic<size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= jobs_list.size()) return;
            const Job& job = jobs_list[i];
            SweepRow row;
            row.point_id = points[job.point].id;
            row.seed = job.seed;
            try {
                json cfg_json = base_config;
                for (const auto& ov : points[job.point].overrides) apply_override(cfg_json, ov);
                apply_override(cfg_json, "train.seed=" + std::to_string(job.seed));
                cfg_json.erase("out_dir");
                ExperimentConfig cfg = ExperimentConfig::from_json(cfg_json);
                fs::path run_dir = out_dir / ("point_" + std::to_string(job.point)) /
                                   ("seed_" + std::to_string(job.seed));
                RunResult r = run_experiment(cfg, run_dir);
                row.p = cfg.train.dropout_p;
                row.input_mode = input_mode_name(cfg.train.input_mode);
                row.in_domain_dice = r.in_domain.mean_dice;
                row.ood_dice = r.has_ood ? r.ood.mean_dice
                                         : std::numeric_limits<double>::quiet_NaN();
                row.r_11 = r.risks.r_11;
                row.r_10 = r.risks.r_10;
                row.r_01 = r.risks.r_01;
            } catch (const std::exception& e) {
                row.failed = true;
                row.error = e.what();
            }
            rows[i] = row;
        }
    };
    std::vector<std::thread> pool;
    const int n_workers = std::min<int>(jobs, static_cast<int>(jobs_list.size()));
    pool.reserve(static_cast<size_t>(n_workers));
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();

    SweepResult result;
    result.rows = rows;
    CsvWriter csv({"point_id", "seed", "p", "input_mode", "in_domain_dice", "ood_dice", "R_11",
                   "R_10", "R_01"});
    for (const auto& r : rows) {
        if (r.failed) {
            result.any_failed = true;
            csv.row({r.point_id, std::to_string(r.seed), "", "FAILED: " + r.error, "", "", "", "",
                     ""});
            continue;
        }
        csv.row({r.point_id, std::to_string(r.seed), fmt_double(r.p), r.input_mode,
                 fmt_double(r.in_domain_dice),
                 std::isnan(r.ood_dice) ? "nan" : fmt_double(r.ood_dice), fmt_double(r.r_11),
                 fmt_double(r.r_10), fmt_double(r.r_01)});
    }
    for (size_t pi = 0; pi < points.size(); ++pi) {
        std::vector<double> in_d, ood_d;
        double p = 0.0;
        std::string mode;
        for (const auto& r : rows)
            if (!r.failed && r.point_id == points[pi].id) {
                in_d.push_back(r.in_domain_dice);
                if (!std::isnan(r.ood_dice)) ood_d.push_back(r.ood_dice);
                p = r.p;
                mode = r.input_mode;
            }
        if (in_d.empty()) continue;
        csv.row({points[pi].id, "median", fmt_double(p), mode, fmt_double(median_of(in_d)),
                 ood_d.empty() ? "nan" : fmt_double(median_of(ood_d)), "", "", ""});
        csv.row({points[pi].id, "mad", fmt_double(p), mode, fmt_double(mad_of(in_d)),
                 ood_d.empty() ? "nan" : fmt_double(mad_of(ood_d)), "", "", ""});
    }
    result.csv = csv.str();
    atomic_write(out_dir / "sweep.csv", result.csv);
    return result;
}

}  // namespace dropgen
