#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "collapse_lab/io.hpp"

using namespace collapse_lab;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("collapse_lab_test_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

RunConfig small_dirichlet(const fs::path& dir) {
    RunConfig c = preset_config("subcritical-dirichlet");
    c.n = 16;
    c.max_steps = 40;
    c.checkpoint_every = 10;
    c.output_dir = dir.string();
    return c;
}

}  // namespace

TEST(Config, ParsesKeysCommentsAndPiSuffix) {
    const RunConfig c = parse_config(
        "# a comment\n"
        "model = neumann\n"
        "n = 32   # trailing comment\n"
        "lambda = 3.6pi\n"
        "center = 0.4, 0.6\n"
        "t_end = 2.5\n"
        "max_steps = max\n"
        "positivity = reject\n"
        "face_density = upwind\n");
    EXPECT_EQ(c.model, Model::neumann);
    EXPECT_EQ(c.n, 32);
    EXPECT_DOUBLE_EQ(c.lambda, 3.6 * pi);
    EXPECT_EQ(c.center, (Point{0.4, 0.6}));
    EXPECT_EQ(c.t_end, 2.5);
    EXPECT_EQ(c.max_steps, std::numeric_limits<long>::max());
    EXPECT_EQ(c.positivity, PositivityMode::reject);
    EXPECT_EQ(c.face_density, FaceDensity::upwind);
    EXPECT_EQ(stepper_config(c).face_density, FaceDensity::upwind);
}

TEST(Config, PresetThenOverrides) {
    const RunConfig c = parse_config("preset = subcritical-neumann\nn = 48\n");
    EXPECT_EQ(c.model, Model::neumann);
    EXPECT_EQ(c.n, 48);
    EXPECT_DOUBLE_EQ(c.lambda, 0.9 * 4.0 * pi);
    EXPECT_EQ(c.t_end, 10.0);
}

TEST(Config, CanonicalTextRoundTrips) {
    for (const auto& name : preset_names()) {
        const RunConfig c = preset_config(name);
        const RunConfig back = parse_config(to_text(c));
        EXPECT_EQ(back, c) << name;
        EXPECT_EQ(to_text(back), to_text(c));
        EXPECT_EQ(config_hash(back), config_hash(c));
    }
    RunConfig a = preset_config("two-bump"), b = a;
    b.seed = 1;
    EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, FieldLevelErrors) {
    auto message = [](const std::string& text) {
        try {
            parse_config(text);
        } catch (const InvalidArgument& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    EXPECT_NE(message("n = 4\n").find("'n'"), std::string::npos);
    EXPECT_NE(message("lambda = -1\n").find("'lambda'"), std::string::npos);
    EXPECT_NE(message("dt_safety = 1.5\n").find("'dt_safety'"), std::string::npos);
    EXPECT_NE(message("colour = blue\n").find("colour"), std::string::npos);
    EXPECT_NE(message("n = twelve\n").find("'n'"), std::string::npos);
    EXPECT_NE(message("model = neumann\ngeometry = radial\ncenter = 0, 0\n").find("model"), std::string::npos);
    EXPECT_NE(message("preset = nope\n").find("nope"), std::string::npos);
    EXPECT_NE(message("just text\n").find("line 1"), std::string::npos);
    EXPECT_NE(message("center = 2, 0.5\n").find("center"), std::string::npos);
}

TEST(Config, InitialFieldHonoursLambdaAndSeed) {
    RunConfig c;
    c.n = 32;
    c.lambda = 7.0;
    c.perturbation = 0.1;
    c.seed = 5;
    const Field a = initial_field(c), b = initial_field(c);
    EXPECT_EQ(a.values, b.values);
    EXPECT_NEAR(total_mass(a), 7.0, 1e-12);
    c.seed = 6;
    EXPECT_NE(initial_field(c).values, a.values);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    const fs::path dir = scratch("ckpt");
    for (const auto& [preset, n] : {std::pair{"subcritical-dirichlet", 16}, std::pair{"supercritical-radial", 256}}) {
        RunConfig c = preset_config(preset);
        c.n = n;
        Checkpoint ck;
        ck.config = c;
        ck.config_text = to_text(c);
        ck.state = initial_state(c);
        advance(ck.state, c, stepper_config(c));
        ck.density_cap = 123.5;
        ck.next_snapshot = 7.25;
        const fs::path p = dir / (std::string(preset) + ".ckpt");
        write_checkpoint(p, ck);
        const Checkpoint back = read_checkpoint(p);
        EXPECT_EQ(back.config, c);
        EXPECT_EQ(back.state.t(), ck.state.t());
        EXPECT_EQ(back.state.step(), 1);
        EXPECT_EQ(back.state.density().values, ck.state.density().values);
        EXPECT_EQ(back.density_cap, 123.5);
        EXPECT_EQ(back.next_snapshot, 7.25);
        EXPECT_FALSE(back.completed);
    }
    fs::remove_all(dir);
}

TEST(Checkpoint, DetectsTruncationCorruptionAndVersion) {
    const fs::path dir = scratch("ckpt_bad");
    RunConfig c = small_dirichlet(dir);
    Checkpoint ck;
    ck.config = c;
    ck.config_text = to_text(c);
    ck.state = initial_state(c);
    const fs::path p = dir / "a.ckpt";
    write_checkpoint(p, ck);
    const std::string good = slurp(p);

    std::ofstream(p, std::ios::binary | std::ios::trunc) << good.substr(0, good.size() / 2);
    EXPECT_THROW(read_checkpoint(p), CheckpointError);

    std::string flipped = good;
    flipped[good.size() / 2] ^= 0x10;
    std::ofstream(p, std::ios::binary | std::ios::trunc) << flipped;
    try {
        read_checkpoint(p);
        FAIL() << "corruption not detected";
    } catch (const CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
    }

    std::string old = good;
    old[8] = 9;  // version field follows the 8-byte magic
    std::ofstream(p, std::ios::binary | std::ios::trunc) << old;
    try {
        read_checkpoint(p);
        FAIL() << "version mismatch not detected";
    } catch (const CheckpointError& e) {
        const std::string what = e.what();
        EXPECT_NE(what.find("version 9"), std::string::npos);
        EXPECT_NE(what.find("version 1"), std::string::npos);
    }
    fs::remove_all(dir);
}

TEST(Run, ZeroEndTimeGivesEmptySeries) {
    const fs::path dir = scratch("t0");
    RunConfig c = small_dirichlet(dir);
    c.t_end = 0.0;
    const RunSummary s = run(c);
    EXPECT_EQ(s.status, RunStatus::completed);
    EXPECT_EQ(*s.reason, StopReason::reached_t_end);
    EXPECT_TRUE(fs::exists(dir / "manifest.json"));
    EXPECT_TRUE(read_ndjson(dir / "series.ndjson").empty());
    fs::remove_all(dir);
}

TEST(Run, SeriesRecordsAndManifest) {
    const fs::path dir = scratch("series");
    RunConfig c = small_dirichlet(dir);
    c.sample_every = 7;
    const RunSummary s = run(c);
    EXPECT_EQ(*s.reason, StopReason::max_steps);
    const auto recs = read_ndjson(dir / "series.ndjson");
    // Steps 0, 7, ..., 35 and the final step 40.
    ASSERT_EQ(recs.size(), 7u);
    EXPECT_EQ(recs.front()["step"], 0);
    EXPECT_EQ(recs.back()["step"], 40);
    for (const auto& r : recs) {
        for (const char* k : {"t", "mass", "F", "D", "sup", "collapses", "residual"}) EXPECT_TRUE(r.contains(k)) << k;
        EXPECT_NEAR(r["mass"].get<double>(), 4.0, 1e-12);
    }
    std::ifstream is(dir / "manifest.json");
    const auto m = ordered_json::parse(is);
    EXPECT_EQ(m["status"], "completed");
    EXPECT_EQ(m["stop_reason"], "max_steps");
    EXPECT_EQ(parse_config(m["config"].get<std::string>()), c);
    fs::remove_all(dir);
}

TEST(Run, IdenticalConfigsGiveIdenticalSeries) {
    const fs::path a = scratch("det_a"), b = scratch("det_b");
    RunConfig ca = small_dirichlet(a), cb = small_dirichlet(b);
    ca.perturbation = cb.perturbation = 0.05;
    ca.seed = cb.seed = 99;
    run(ca);
    run(cb);
    EXPECT_EQ(slurp(a / "series.ndjson"), slurp(b / "series.ndjson"));
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST(Resume, ContinuationIsByteIdentical) {
    const fs::path ref = scratch("ref"), cut = scratch("cut");
    run(small_dirichlet(ref));
    RunHooks hooks;
    hooks.interrupt_after_step = 20;
    const RunSummary first = run(small_dirichlet(cut), hooks);
    EXPECT_EQ(first.status, RunStatus::interrupted);
    EXPECT_EQ(first.steps, 20);
    const RunSummary rest = resume(cut / "checkpoints" / "step_000000020.ckpt");
    EXPECT_EQ(rest.status, RunStatus::completed);
    EXPECT_EQ(slurp(ref / "series.ndjson"), slurp(cut / "series.ndjson"));
    fs::remove_all(ref);
    fs::remove_all(cut);
}

TEST(Resume, FromAnEarlierCheckpointDiscardsLaterOutput) {
    const fs::path ref = scratch("ref2"), dir = scratch("rewind");
    run(small_dirichlet(ref));
    run(small_dirichlet(dir));
    resume(dir / "checkpoints" / "step_000000010.ckpt");
    EXPECT_EQ(slurp(ref / "series.ndjson"), slurp(dir / "series.ndjson"));
    fs::remove_all(ref);
    fs::remove_all(dir);
}

TEST(Resume, CompletedRunIsANoOp) {
    const fs::path dir = scratch("done");
    run(small_dirichlet(dir));
    const std::string before = slurp(dir / "series.ndjson");
    const RunSummary s = resume(dir / "checkpoints" / "final.ckpt");
    EXPECT_EQ(s.status, RunStatus::already_completed);
    EXPECT_NE(s.message.find("already completed"), std::string::npos);
    EXPECT_EQ(slurp(dir / "series.ndjson"), before);
    fs::remove_all(dir);
}

TEST(Analyze, SubcriticalRunIsGlobalExistence) {
    const fs::path dir = scratch("analyze_sub");
    run(small_dirichlet(dir));
    const auto rep = analyze(dir);
    EXPECT_EQ(rep["kind"], "global-existence run");
    EXPECT_EQ(rep["energy"]["violations"], 0);
    EXPECT_TRUE(fs::exists(dir / "report.json"));
    fs::remove_all(dir);
}

TEST(Analyze, SmallRadialBlowupFindsOneQuantizedCollapse) {
    const fs::path dir = scratch("analyze_radial");
    RunConfig c = preset_config("supercritical-radial");
    c.n = 4096;
    c.density_cap_factor = 1e3;
    c.sample_every = 1;
    c.output_dir = dir.string();
    const RunSummary s = run(c);
    EXPECT_EQ(*s.reason, StopReason::density_cap_hit);
    AnalyzeOptions opt;
    opt.threads = 2;
    const auto rep = analyze(dir, opt);
    EXPECT_EQ(rep["kind"], "blowup run");
    EXPECT_EQ(rep["final"]["collapse_count"], 1);
    EXPECT_NEAR(rep["final"]["collapses"][0]["mass"].get<double>(), eight_pi, 0.1 * eight_pi);
    EXPECT_TRUE(fs::exists(dir / "collapse_report.csv"));
    EXPECT_TRUE(fs::exists(dir / "envelope.ndjson"));
    fs::remove_all(dir);
}

TEST(Analyze, TwoBumpPresetReportsTwoCollapses) {
    const fs::path dir = scratch("analyze_two_bump");
    RunConfig c = preset_config("two-bump");
    c.output_dir = dir.string();
    EXPECT_EQ(*run(c).reason, StopReason::density_cap_hit);
    // The default window centres on one peak and is too narrow to reach the other.
    AnalyzeOptions opt;
    opt.x0 = Point{0.5, 0.5};
    const auto rep = analyze(dir, opt);
    EXPECT_EQ(rep["kind"], "blowup run");
    ASSERT_EQ(rep["final"]["collapse_count"], 2);
    const auto& balls = rep["final"]["collapses"];
    // Mirror-symmetric data: the balls sit at mirrored positions.
    EXPECT_NEAR(balls[0]["x"].get<double>() + balls[1]["x"].get<double>(), 1.0, 1e-9);
    EXPECT_NEAR(balls[0]["mass"].get<double>(), balls[1]["mass"].get<double>(), 1e-9);
    fs::remove_all(dir);
}

TEST(Analyze, ThreadCountFromEnvironment) {
    setenv("COLLAPSE_LAB_THREADS", "3", 1);
    EXPECT_EQ(analysis_threads(), 3);
    EXPECT_EQ(analysis_threads(5), 5);
    unsetenv("COLLAPSE_LAB_THREADS");
    EXPECT_GE(analysis_threads(), 1);
}
