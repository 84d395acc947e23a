// Reproducible experiment runner for the channel-dropout feature-combination
// laboratory: dataset export, training, evaluation, diagnostics, sweeps, and
// deterministic SVG plots.

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dropgen/diagnostics.hpp"
#include "dropgen/experiment.hpp"
#include "dropgen/io.hpp"
#include "dropgen/plot.hpp"
#include "dropgen/training.hpp"

using namespace dropgen;

namespace {

fs::path default_out_root() {
    const char* env = std::getenv("DROPGEN_LAB_OUT");
    return env && *env ? fs::path(env) : fs::path("runs");
}

json load_config_json(const std::string& config_path, uint64_t* seed_flag,
                      const std::string& out_flag, const std::vector<std::string>& sets) {
    json cfg = config_path.empty() ? ExperimentConfig::defaults().to_json()
                                   : parse_json_file(config_path);
    // precedence: flag > --set override > config file > default
    for (const auto& s : sets) apply_override(cfg, s);
    if (seed_flag) apply_override(cfg, "train.seed=" + std::to_string(*seed_flag));
    if (!out_flag.empty()) cfg["out_dir"] = out_flag;
    return cfg;
}

EnvironmentSpec resolve_spec(const std::string& spec_path, const std::string& builtin) {
    check(spec_path.empty() != builtin.empty(), "provide exactly one of --spec or --builtin");
    if (!builtin.empty()) return ExperimentConfig::builtin_spec(builtin);
    return EnvironmentSpec::from_json(parse_json_file(spec_path));
}

fs::path run_dir_for(const json& cfg, const std::string& name) {
    const std::string out = cfg.value("out_dir", std::string{});
    return (out.empty() ? default_out_root() : fs::path(out)) / name;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dropgen-lab: channel-dropout feature-combination laboratory"};
    app.require_subcommand(1);

    // ---- gen ----
    auto* gen = app.add_subcommand("gen", "Sample a dataset and export the binary container");
    std::string gen_spec, gen_builtin = "shortcut-bench", gen_env, gen_out;
    int gen_n = 512;
    uint64_t gen_seed = 0;
    gen->add_option("--spec", gen_spec, "Environment spec JSON file");
    gen->add_option("--builtin", gen_builtin, "Builtin spec name")->capture_default_str();
    gen->add_option("--env", gen_env, "Environment id")->required();
    gen->add_option("--n", gen_n, "Sample count")->capture_default_str();
    gen->add_option("--seed", gen_seed, "Sampling seed")->capture_default_str();
    gen->add_option("--out", gen_out, "Output file")->required();

    // ---- train ----
    auto* tr = app.add_subcommand("train", "Run one experiment per the config");
    std::string tr_config, tr_out;
    uint64_t tr_seed = 0;
    bool tr_seed_set = false;
    std::vector<std::string> tr_sets;
    tr->add_option("--config", tr_config, "Experiment config JSON");
    tr->add_option("--seed", tr_seed, "Override train.seed")->each([&](const std::string&) {
        tr_seed_set = true;
    });
    tr->add_option("--out", tr_out, "Output directory");
    tr->add_option("--set", tr_sets, "Override config keys, e.g. train.dropout_p=0.5");

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on freshly sampled data");
    std::string ev_ckpt, ev_spec, ev_builtin = "shortcut-bench", ev_env, ev_mode = "full";
    std::string ev_out;
    int ev_n = 1024;
    uint64_t ev_seed = 9000;
    ev->add_option("--checkpoint", ev_ckpt, "Training checkpoint JSON")->required();
    ev->add_option("--spec", ev_spec, "Environment spec JSON file");
    ev->add_option("--builtin", ev_builtin, "Builtin spec name")->capture_default_str();
    ev->add_option("--env", ev_env, "Environment id")->required();
    ev->add_option("--n", ev_n, "Sample count")->capture_default_str();
    ev->add_option("--seed", ev_seed, "Sampling seed")->capture_default_str();
    ev->add_option("--mode", ev_mode, "full | image-only | reps-only")->capture_default_str();
    ev->add_option("--out", ev_out, "Write metrics JSON here (default: stdout)");

    // ---- diagnose ----
    auto* dg = app.add_subcommand("diagnose", "Run diagnostics for a finished run directory");
    std::string dg_dir;
    dg->add_option("--run", dg_dir, "Run directory containing checkpoint.json + config.json")
        ->required();

    // ---- sweep ----
    auto* sw = app.add_subcommand("sweep", "Grid of runs with an aggregated CSV");
    std::string sw_config, sw_out;
    std::vector<std::string> sw_grid, sw_sets;
    int sw_seeds = 10, sw_jobs = 1;
    sw->add_option("--config", sw_config, "Base experiment config JSON");
    sw->add_option("--grid", sw_grid,
                   "Grid axis as key=v1,v2,... (repeatable); e.g. train.dropout_p=0,0.25,0.5");
    sw->add_option("--seeds", sw_seeds, "Seeds 0..N-1 per grid point")->capture_default_str();
    sw->add_option("--jobs", sw_jobs, "Worker pool size")->capture_default_str();
    sw->add_option("--out", sw_out, "Output directory");
    sw->add_option("--set", sw_sets, "Base-config overrides");

    // ---- plot ----
    auto* pl = app.add_subcommand("plot", "Render a CSV into a deterministic SVG");
    std::string pl_csv, pl_kind, pl_out;
    pl->add_option("--csv", pl_csv, "Input CSV")->required();
    pl->add_option("--kind", pl_kind,
                   "sweep-curve | alignment-histogram | sensitivity-bars | robustness-curve")
        ->required();
    pl->add_option("--out", pl_out, "Output SVG path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            EnvironmentSpec spec = resolve_spec(gen_spec, gen_spec.empty() ? gen_builtin : "");
            Dataset d = sample_dataset(spec, gen_env, gen_n, gen_seed);
            save_dataset(d, gen_out);
            std::cout << "wrote " << gen_out << " (" << d.size() << " samples)\n";
            return 0;
        }
        if (*tr) {
            json cfg_json = load_config_json(tr_config, tr_seed_set ? &tr_seed : nullptr,
                                             tr_out, tr_sets);
            ExperimentConfig cfg = ExperimentConfig::from_json(cfg_json);
            fs::path dir = run_dir_for(cfg_json,
                                       "run_seed" + std::to_string(cfg.train.seed));
            RunResult r = run_experiment(cfg, dir);
            for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
            std::cout << "run complete: " << dir.string() << "\n"
                      << "  in-domain dice " << fmt_double(r.in_domain.mean_dice);
            if (r.has_ood) std::cout << ", ood dice " << fmt_double(r.ood.mean_dice);
            std::cout << "\n";
            return 0;
        }
        if (*ev) {
            TrainState st = load_checkpoint(ev_ckpt);
            EnvironmentSpec spec = resolve_spec(ev_spec, ev_spec.empty() ? ev_builtin : "");
            Dataset data = sample_dataset(spec, ev_env, ev_n, ev_seed);
            Extractor ex = Extractor::identity(spec.n_s());
            EvalResult r = evaluate(st.model, ex, data, input_mode_from_name(ev_mode));
            json out;
            out["env"] = ev_env;
            out["mode"] = ev_mode;
            out["loss"] = r.loss;
            out["mean_dice"] = r.mean_dice;
            out["per_class_dice"] = r.per_class_dice;
            if (ev_out.empty())
                std::cout << out.dump(2) << "\n";
            else
                atomic_write(ev_out, out.dump(2) + "\n");
            return 0;
        }
        if (*dg) {
            fs::path dir(dg_dir);
            ExperimentConfig cfg =
                ExperimentConfig::from_json(parse_json_file(dir / "config.json"));
            TrainState st = load_checkpoint(dir / "checkpoint.json");
            Extractor ex = make_extractor(cfg);
            Dataset val = sample_pooled(cfg.spec, cfg.spec.train_envs, cfg.n_val,
                                        cfg.train.seed + 1000);
            const EnvironmentSpec* spec_ptr =
                cfg.spec.mode == EmissionMode::discrete ? &cfg.spec : nullptr;
            MaskDistribution dist;
            dist.mode = MaskMode::two_block;
            dist.p = cfg.train.dropout_p;
            dist.rescale = false;
            dist.channels = st.model.input_channels();
            dist.n_u = cfg.spec.n_u();
            RiskReport risks = decomposed_risk(st.model, ex, val, dist.pi(), spec_ptr);
            atomic_write(dir / "risk_report.json", risks.to_json().dump(2) + "\n");
            SensitivityReport sens = channel_removal_sensitivity(st.model, ex, val);
            atomic_write(dir / "sensitivity.json", sens.to_json().dump(2) + "\n");
            StableUsage su = stable_usage(st.model, ex, val, spec_ptr);
            json usage = {{"output_variance", su.output_variance}, {"R_01", su.r_01}};
            if (su.gap_to_bayes) usage["gap_to_bayes"] = *su.gap_to_bayes;
            atomic_write(dir / "stable_usage.json", usage.dump(2) + "\n");
            std::cout << "diagnostics written to " << dir.string() << "\n";
            return 0;
        }
        if (*sw) {
            json cfg_json = load_config_json(sw_config, nullptr, sw_out, sw_sets);
            ExperimentConfig::from_json(cfg_json);  // validate before spawning workers
            std::vector<std::pair<std::string, std::vector<std::string>>> grid;
            for (const auto& axis : sw_grid) {
                const auto eq = axis.find('=');
                check(eq != std::string::npos, "--grid expects key=v1,v2,...");
                std::vector<std::string> values;
                std::string v;
                std::istringstream vs(axis.substr(eq + 1));
                while (std::getline(vs, v, ',')) values.push_back(v);
                grid.push_back({axis.substr(0, eq), values});
            }
            fs::path out_dir = run_dir_for(cfg_json, "sweep");
            SweepResult result = sweep(cfg_json, grid, sw_seeds, out_dir, sw_jobs);
            std::cout << "sweep complete: " << (out_dir / "sweep.csv").string() << " ("
                      << result.rows.size() << " runs)\n";
            if (result.any_failed) {
                std::cerr << "some sweep points failed\n";
                return 1;
            }
            return 0;
        }
        if (*pl) {
            CsvTable table = parse_csv(read_text(pl_csv));
            const std::string svg = render_plot(table, plot_kind_from_name(pl_kind));
            atomic_write(pl_out, svg);
            std::cout << "wrote " << pl_out << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
