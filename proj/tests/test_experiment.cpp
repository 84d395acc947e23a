#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <set>

#include "dropgen/experiment.hpp"
#include "dropgen/io.hpp"
#include "dropgen/plot.hpp"

using namespace dropgen;

namespace {

fs::path scratch_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / "dropgen_test" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

json small_config() {
    json cfg = ExperimentConfig::defaults().to_json();
    apply_override(cfg, "train.steps=60");
    apply_override(cfg, "train.eval_every=30");
    apply_override(cfg, "data.n_train=96");
    apply_override(cfg, "data.n_val=64");
    apply_override(cfg, "data.n_test=64");
    return cfg;
}

}  // namespace

TEST(Config, DefaultsRoundTrip) {
    ExperimentConfig c = ExperimentConfig::defaults();
    ExperimentConfig back = ExperimentConfig::from_json(c.to_json());
    EXPECT_EQ(c.hash(), back.hash());
    EXPECT_EQ(back.spec.name, "shortcut-bench");
}

TEST(Config, UnknownKeysRejectedAtEveryLevel) {
    json cfg = small_config();
    cfg["unknown_top"] = 1;
    EXPECT_THROW(ExperimentConfig::from_json(cfg), std::invalid_argument);

    cfg = small_config();
    cfg["train"]["momentum"] = 0.9;
    EXPECT_THROW(ExperimentConfig::from_json(cfg), std::invalid_argument);

    cfg = small_config();
    cfg["diagnostics"]["verbose"] = true;
    EXPECT_THROW(ExperimentConfig::from_json(cfg), std::invalid_argument);
}

TEST(Config, DropoutProbabilityOneIsRejected) {
    json cfg = small_config();
    apply_override(cfg, "train.dropout_p=1.0");
    try {
        ExperimentConfig::from_json(cfg);
        FAIL() << "expected rejection";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("p in [0,1)"), std::string::npos);
    }
}

TEST(Config, ExactlyOneSpecSource) {
    json cfg = small_config();
    cfg["spec_builtin"] = "shortcut-bench";  // now both spec and spec_builtin
    EXPECT_THROW(ExperimentConfig::from_json(cfg), std::invalid_argument);
    cfg.erase("spec");
    EXPECT_NO_THROW(ExperimentConfig::from_json(cfg));
    cfg.erase("spec_builtin");
    EXPECT_THROW(ExperimentConfig::from_json(cfg), std::invalid_argument);
}

TEST(Config, OverridesParseTypedValues) {
    json cfg = small_config();
    apply_override(cfg, "train.dropout_p=0.75");
    apply_override(cfg, "train.mask_mode=two-block");
    apply_override(cfg, "train.rescale=false");
    ExperimentConfig c = ExperimentConfig::from_json(cfg);
    EXPECT_DOUBLE_EQ(c.train.dropout_p, 0.75);
    EXPECT_EQ(c.train.mask_mode, MaskMode::two_block);
    EXPECT_FALSE(c.train.rescale);
}

TEST(RunExperiment, EmitsDocumentedArtifacts) {
    fs::path dir = scratch_dir("artifacts");
    ExperimentConfig cfg = ExperimentConfig::from_json(small_config());
    RunResult r = run_experiment(cfg, dir);
    for (const char* name : {"history.csv", "risk_report.json", "manifest.json", "config.json",
                             "checkpoint.json", "metrics.json", "sensitivity.json",
                             "stable_usage.json"})
        EXPECT_TRUE(fs::exists(dir / name)) << name;
    EXPECT_GT(r.in_domain.mean_dice, 0.0);

    // manifest lists every file in the directory
    json manifest = parse_json_file(dir / "manifest.json");
    std::set<std::string> listed;
    for (const auto& f : manifest.at("files")) listed.insert(f.get<std::string>());
    for (const auto& entry : fs::directory_iterator(dir))
        EXPECT_TRUE(listed.count(entry.path().filename().string()))
            << entry.path().filename();
    EXPECT_EQ(manifest.at("config_hash").get<uint64_t>(), cfg.hash());
}

TEST(RunExperiment, RerunsAreByteIdentical) {
    fs::path dir_a = scratch_dir("rerun_a");
    fs::path dir_b = scratch_dir("rerun_b");
    ExperimentConfig cfg = ExperimentConfig::from_json(small_config());
    run_experiment(cfg, dir_a);
    run_experiment(cfg, dir_b);
    EXPECT_EQ(read_text(dir_a / "history.csv"), read_text(dir_b / "history.csv"));
    EXPECT_EQ(read_text(dir_a / "checkpoint.json"), read_text(dir_b / "checkpoint.json"));
    EXPECT_EQ(read_text(dir_a / "metrics.json"), read_text(dir_b / "metrics.json"));
}

TEST(RunExperiment, AlignmentTraceWhenEnabled) {
    fs::path dir = scratch_dir("alignment");
    json cfg = small_config();
    apply_override(cfg, "diagnostics.alignment_every=20");
    run_experiment(ExperimentConfig::from_json(cfg), dir);
    CsvTable t = parse_csv(read_text(dir / "alignment.csv"));
    EXPECT_EQ(t.rows.size(), 3u);  // steps 20, 40, 60
    std::vector<long> bins = alignment_bins(t);
    long total = 0;
    for (long b : bins) total += b;
    EXPECT_EQ(total, 3);
}

TEST(Sweep, GridTimesSeedsMatchesRowCount) {
    fs::path dir = scratch_dir("sweep");
    json cfg = small_config();
    SweepResult result =
        sweep(cfg, {{"train.dropout_p", {"0", "0.25"}}}, 2, dir, 2);
    EXPECT_FALSE(result.any_failed);
    EXPECT_EQ(result.rows.size(), 4u);  // 2 points x 2 seeds
    CsvTable t = parse_csv(result.csv);
    EXPECT_EQ(t.header.front(), "point_id");
    // 4 data rows + 2 points x (median + mad)
    EXPECT_EQ(t.rows.size(), 8u);
    EXPECT_TRUE(fs::exists(dir / "sweep.csv"));
}

TEST(Sweep, EmptyGridRunsSingleBaseline) {
    fs::path dir = scratch_dir("sweep_empty");
    SweepResult result = sweep(small_config(), {}, 1, dir, 1);
    EXPECT_EQ(result.rows.size(), 1u);
    EXPECT_EQ(result.rows[0].point_id, "baseline");
}

TEST(Sweep, RowCountPropertyOnLargerGrid) {
    auto points = grid_points(
        {{"train.dropout_p", {"0", "0.5", "0.75"}}, {"train.input_mode", {"full", "reps-only"}}});
    EXPECT_EQ(points.size(), 6u);
    EXPECT_EQ(points[0].id, "train.dropout_p=0|train.input_mode=full");
}

TEST(Plots, SweepCurveDeterministicWithCurvePerMode) {
    fs::path dir = scratch_dir("plot_sweep");
    json cfg = small_config();
    SweepResult result = sweep(
        cfg, {{"train.dropout_p", {"0", "0.5"}}, {"train.input_mode", {"full", "reps-only"}}}, 1,
        dir, 2);
    CsvTable t = parse_csv(result.csv);
    const std::string svg_a = render_plot(t, PlotKind::sweep_curve);
    const std::string svg_b = render_plot(t, PlotKind::sweep_curve);
    EXPECT_EQ(svg_a, svg_b);
    // one in-domain curve per input mode
    EXPECT_NE(svg_a.find("full in-domain"), std::string::npos);
    EXPECT_NE(svg_a.find("reps-only in-domain"), std::string::npos);
}

TEST(Plots, MissingColumnsNamedInError) {
    CsvTable t = parse_csv("a,b\n1,2\n");
    try {
        render_plot(t, PlotKind::sweep_curve);
        FAIL() << "expected failure";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("in_domain_dice"), std::string::npos);
    }
}

TEST(Plots, AlignmentHistogramConservesCounts) {
    std::string csv = "step,cosine\n";
    Rng rng(4);
    const int n = 137;
    for (int i = 0; i < n; ++i)
        csv += std::to_string(i) + "," + fmt_double(2.0 * rng.uniform() - 1.0) + "\n";
    CsvTable t = parse_csv(csv);
    std::vector<long> bins = alignment_bins(t);
    long total = 0;
    for (long b : bins) total += b;
    EXPECT_EQ(total, n);
    const std::string svg = render_plot(t, PlotKind::alignment_histogram);
    EXPECT_NE(svg.find("<svg"), std::string::npos);
}

TEST(Plots, SensitivityBarsAndRobustnessCurveRender) {
    CsvTable bars = parse_csv(
        "label,delta_drop_image,delta_drop_reps\np=0,0.45,0.01\np=0.75,0.08,0.03\n");
    const std::string svg = render_plot(bars, PlotKind::sensitivity_bars);
    EXPECT_NE(svg.find("drop image"), std::string::npos);

    CsvTable curve = parse_csv("alpha,mean_dice\n0,0.95\n0.5,0.9\n1,0.7\n");
    const std::string svg2 = render_plot(curve, PlotKind::robustness_curve);
    EXPECT_NE(svg2.find("polyline"), std::string::npos);
}

TEST(DatasetContainer, RoundTripIsBitwise) {
    EnvironmentSpec spec = shortcut_bench();
    Dataset d = sample_dataset(spec, "train_a", 32, 5);
    fs::path path = scratch_dir("container") / "data.dgt";
    save_dataset(d, path);
    Dataset back = load_dataset(path);
    EXPECT_EQ(back.size(), d.size());
    EXPECT_EQ(back.spec_hash, d.spec_hash);
    EXPECT_EQ(back.seed, d.seed);
    for (int i = 0; i < d.size(); ++i) {
        EXPECT_EQ(back.samples[i].env, d.samples[i].env);
        for (long j = 0; j < d.samples[i].x_u.size(); ++j)
            ASSERT_EQ(back.samples[i].x_u[j], d.samples[i].x_u[j]);
        for (long j = 0; j < d.samples[i].x_s.size(); ++j)
            ASSERT_EQ(back.samples[i].x_s[j], d.samples[i].x_s[j]);
        for (long j = 0; j < d.samples[i].y.size(); ++j)
            ASSERT_EQ(back.samples[i].y[j], d.samples[i].y[j]);
    }
}

TEST(DatasetContainer, TruncationAndBadMagicAreErrors) {
    EnvironmentSpec spec = shortcut_bench();
    Dataset d = sample_dataset(spec, "train_a", 4, 6);
    fs::path path = scratch_dir("container_bad") / "data.dgt";
    save_dataset(d, path);
    std::string bytes = read_text(path);
    atomic_write(path, bytes.substr(0, bytes.size() - 10));
    EXPECT_THROW(load_dataset(path), std::runtime_error);
    atomic_write(path, "XXXX" + bytes.substr(4));
    EXPECT_THROW(load_dataset(path), std::runtime_error);
}

TEST(RunExperiment, AssumptionWarningLandsInManifest) {
    fs::path dir = scratch_dir("warning");
    json cfg = small_config();
    // break A4 in the inline spec: stable map no longer reads the template
    cfg["spec"]["stable"]["map"] = {{0.5, 0.5}, {0.5, 0.5}};
    RunResult r = run_experiment(ExperimentConfig::from_json(cfg), dir);
    ASSERT_EQ(r.warnings.size(), 1u);
    json manifest = parse_json_file(dir / "manifest.json");
    EXPECT_EQ(manifest.at("warnings").size(), 1u);
}

#ifdef DROPGEN_LAB_BIN
TEST(Cli, GenTrainPlotEndToEnd) {
    const std::string bin = DROPGEN_LAB_BIN;
    fs::path dir = scratch_dir("cli");
    // gen
    std::string cmd = bin + " gen --env train_a --n 16 --seed 3 --out " +
                      (dir / "data.dgt").string() + " > /dev/null";
    ASSERT_EQ(std::system(cmd.c_str()), 0);
    EXPECT_GT(fs::file_size(dir / "data.dgt"), 100u);
    Dataset d = load_dataset(dir / "data.dgt");
    EXPECT_EQ(d.size(), 16);

    // train twice with identical config: byte-identical history
    json cfg = small_config();
    atomic_write(dir / "config.json", cfg.dump(2));
    for (const char* out : {"a", "b"}) {
        std::string train_cmd = bin + " train --config " + (dir / "config.json").string() +
                                " --out " + (dir / out).string() + " > /dev/null";
        ASSERT_EQ(std::system(train_cmd.c_str()), 0);
    }
    EXPECT_EQ(read_text(dir / "a" / "run_seed0" / "history.csv"),
              read_text(dir / "b" / "run_seed0" / "history.csv"));

    // invalid config fails with nonzero exit
    json bad = cfg;
    bad["train"]["bogus"] = 1;
    atomic_write(dir / "bad.json", bad.dump(2));
    std::string bad_cmd = bin + " train --config " + (dir / "bad.json").string() +
                          " --out " + (dir / "c").string() + " 2> /dev/null";
    EXPECT_NE(std::system(bad_cmd.c_str()), 0);

    // plot a generated sensitivity CSV
    std::string plot_cmd = bin + " plot --csv " +
                           (dir / "a" / "run_seed0" / "sensitivity.csv").string() +
                           " --kind sensitivity-bars --out " + (dir / "plot.svg").string() +
                           " > /dev/null";
    ASSERT_EQ(std::system(plot_cmd.c_str()), 0);
    EXPECT_GT(fs::file_size(dir / "plot.svg"), 200u);
}
#endif
