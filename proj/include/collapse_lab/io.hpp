#pragma once

// Experiment runner: flat key = value configuration, presets, run
// directories with NDJSON series, snapshots and checkpoints, resume, and the
// analyze pipeline.
//
// Run directory layout
//     manifest.json        config text and hash, grid, status, stop reason
//     series.ndjson        one record per sample
//     snapshots.ndjson     index of snapshot files with their times
//     snapshots/           field snapshots as CSV
//     checkpoints/         binary checkpoints (step_<k>.ckpt, final.ckpt)
//     collapse_report.csv  written when the density cap fires
//     report.json          written by analyze

#include <algorithm>
#include <atomic>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "collapse_lab/diagnostics.hpp"
#include "collapse_lab/error.hpp"
#include "collapse_lab/grid.hpp"
#include "collapse_lab/poisson.hpp"
#include "collapse_lab/radial_oracle.hpp"
#include "collapse_lab/rescale.hpp"
#include "collapse_lab/stepper.hpp"

namespace collapse_lab {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

inline constexpr std::uint32_t checkpoint_version = 1;
inline constexpr char checkpoint_magic[8] = {'C', 'L', 'A', 'B', 'C', 'K', 'P', 'T'};

// ---------------------------------------------------------------------------
// Configuration

struct RunConfig {
    std::string preset;
    Model model = Model::dirichlet;
    DomainKind geometry = DomainKind::square;
    int n = 64;
    double length = 1.0;  ///< square side or disk radius
    std::string profile = "gaussian";  ///< constant | gaussian | two-bump
    double lambda = 4.0;               ///< total mass
    Point center{0.5, 0.5};
    Point center2{0.7, 0.5};
    double width = 0.05;
    double mass_split = 0.5;    ///< share of lambda in the first bump (two-bump)
    double background = 0.0;    ///< part of lambda spread uniformly (gaussian)
    double background_radius = 0.0;  ///< background only where |x - center| >= this
    double perturbation = 0.0;  ///< relative amplitude of seeded multiplicative noise
    std::uint64_t seed = 0;
    double dt_safety = 0.3;
    double dt_factor = 0.05;  ///< radial step rule dt = dt_factor / sup
    PositivityMode positivity = PositivityMode::clip_and_rebalance;
    FaceDensity face_density = FaceDensity::hybrid;
    double poisson_tol = 1e-10;
    double t_end = std::numeric_limits<double>::infinity();
    long max_steps = std::numeric_limits<long>::max();
    double density_cap = std::numeric_limits<double>::infinity();
    double density_cap_factor = std::numeric_limits<double>::infinity();  ///< cap relative to the initial sup
    long sample_every = 10;
    long snapshot_every = 0;       ///< 0 disables step-based snapshots
    double snapshot_growth = 0.0;  ///< snapshot whenever sup grew by this factor; 0 disables
    long checkpoint_every = 0;
    std::string output_dir = "run";

    bool operator==(const RunConfig&) const = default;
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string_view::npos) return {};
    const auto b = s.find_last_not_of(" \t\r");
    return std::string(s.substr(a, b - a + 1));
}

/// Shortest decimal that round-trips.
inline std::string format_double(double x) {
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

/// Numbers may carry a "pi" suffix: "10pi", "3.6 pi", "pi".
inline double parse_number(const std::string& key, std::string v) {
    v = trim(v);
    double factor = 1.0;
    if (v.size() >= 2 && v.compare(v.size() - 2, 2, "pi") == 0) {
        factor = pi;
        v = trim(v.substr(0, v.size() - 2));
        if (!v.empty() && v.back() == '*') v = trim(v.substr(0, v.size() - 1));
        if (v.empty()) return pi;
    }
    if (v == "inf") return std::numeric_limits<double>::infinity() * factor;
    double x = 0.0;
    auto res = std::from_chars(v.data(), v.data() + v.size(), x);
    if (res.ec != std::errc{} || res.ptr != v.data() + v.size())
        throw InvalidArgument("config key '" + key + "': '" + v + "' is not a number");
    return x * factor;
}

inline long parse_long(const std::string& key, const std::string& v) {
    const std::string t = trim(v);
    if (t == "inf" || t == "max") return std::numeric_limits<long>::max();
    long x = 0;
    auto res = std::from_chars(t.data(), t.data() + t.size(), x);
    if (res.ec != std::errc{} || res.ptr != t.data() + t.size())
        throw InvalidArgument("config key '" + key + "': '" + t + "' is not an integer");
    return x;
}

inline Point parse_point(const std::string& key, const std::string& v) {
    const auto comma = v.find(',');
    if (comma == std::string::npos) throw InvalidArgument("config key '" + key + "': expected 'x, y'");
    return {parse_number(key, v.substr(0, comma)), parse_number(key, v.substr(comma + 1))};
}

inline std::string format_long(long x) { return x == std::numeric_limits<long>::max() ? "max" : std::to_string(x); }

inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t k = 0; k < len; ++k) {
        h ^= p[k];
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace detail

inline RunConfig preset_config(const std::string& name);

namespace detail {

inline void apply_key(RunConfig& c, const std::string& key, const std::string& value) {
    if (key == "preset") c.preset = value;
    else if (key == "model") {
        if (value == "dirichlet") c.model = Model::dirichlet;
        else if (value == "neumann") c.model = Model::neumann;
        else throw InvalidArgument("config key 'model': expected dirichlet or neumann, got '" + value + "'");
    } else if (key == "geometry") {
        if (value == "square") c.geometry = DomainKind::square;
        else if (value == "radial" || value == "radial-disk") c.geometry = DomainKind::radial_disk;
        else throw InvalidArgument("config key 'geometry': expected square or radial, got '" + value + "'");
    } else if (key == "n") c.n = static_cast<int>(parse_long(key, value));
    else if (key == "length") c.length = parse_number(key, value);
    else if (key == "profile") {
        if (value != "constant" && value != "gaussian" && value != "two-bump")
            throw InvalidArgument("config key 'profile': expected constant, gaussian or two-bump");
        c.profile = value;
    } else if (key == "lambda") c.lambda = parse_number(key, value);
    else if (key == "center") c.center = parse_point(key, value);
    else if (key == "center2") c.center2 = parse_point(key, value);
    else if (key == "width") c.width = parse_number(key, value);
    else if (key == "mass_split") c.mass_split = parse_number(key, value);
    else if (key == "background") c.background = parse_number(key, value);
    else if (key == "background_radius") c.background_radius = parse_number(key, value);
    else if (key == "perturbation") c.perturbation = parse_number(key, value);
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_long(key, value));
    else if (key == "dt_safety") c.dt_safety = parse_number(key, value);
    else if (key == "dt_factor") c.dt_factor = parse_number(key, value);
    else if (key == "positivity") {
        if (value == "clip") c.positivity = PositivityMode::clip_and_rebalance;
        else if (value == "reject") c.positivity = PositivityMode::reject;
        else throw InvalidArgument("config key 'positivity': expected clip or reject");
    } else if (key == "face_density") {
        if (value == "hybrid") c.face_density = FaceDensity::hybrid;
        else if (value == "upwind") c.face_density = FaceDensity::upwind;
        else throw InvalidArgument("config key 'face_density': expected hybrid or upwind");
    } else if (key == "poisson_tol") c.poisson_tol = parse_number(key, value);
    else if (key == "t_end") c.t_end = parse_number(key, value);
    else if (key == "max_steps") c.max_steps = parse_long(key, value);
    else if (key == "density_cap") c.density_cap = parse_number(key, value);
    else if (key == "density_cap_factor") c.density_cap_factor = parse_number(key, value);
    else if (key == "sample_every") c.sample_every = parse_long(key, value);
    else if (key == "snapshot_every") c.snapshot_every = parse_long(key, value);
    else if (key == "snapshot_growth") c.snapshot_growth = parse_number(key, value);
    else if (key == "checkpoint_every") c.checkpoint_every = parse_long(key, value);
    else if (key == "output_dir") c.output_dir = value;
    else throw InvalidArgument("unknown config key '" + key + "'");
}

}  // namespace detail

/// Checks every field against the preconditions of the modules it feeds.
inline void validate(const RunConfig& c) {
    auto bad = [](const std::string& key, const std::string& why) {
        throw InvalidArgument("config key '" + key + "': " + why);
    };
    if (c.n < 8) bad("n", "needs at least 8 cells");
    if (!(c.length > 0.0) || !std::isfinite(c.length)) bad("length", "must be positive and finite");
    if (!(c.lambda > 0.0) || !std::isfinite(c.lambda)) bad("lambda", "must be positive and finite");
    if (!(c.width > 0.0)) bad("width", "must be positive");
    if (!(c.background >= 0.0 && c.background < c.lambda)) bad("background", "must lie in [0, lambda)");
    if (c.background > 0.0 && c.profile != "gaussian") bad("background", "only applies to the gaussian profile");
    if (!(c.background_radius >= 0.0)) bad("background_radius", "must be nonnegative");
    if (!(c.mass_split > 0.0 && c.mass_split < 1.0)) bad("mass_split", "must lie in (0, 1)");
    if (!(c.perturbation >= 0.0 && c.perturbation < 1.0)) bad("perturbation", "must lie in [0, 1)");
    if (!(c.dt_safety > 0.0 && c.dt_safety <= 1.0)) bad("dt_safety", "must lie in (0, 1]");
    if (!(c.dt_factor > 0.0) || !std::isfinite(c.dt_factor)) bad("dt_factor", "must be positive");
    if (!(c.poisson_tol > 0.0)) bad("poisson_tol", "must be positive");
    if (!(c.t_end >= 0.0)) bad("t_end", "must be nonnegative");
    if (c.max_steps < 0) bad("max_steps", "must be nonnegative");
    if (!(c.density_cap > 0.0)) bad("density_cap", "must be positive");
    if (!(c.density_cap_factor > 1.0)) bad("density_cap_factor", "must exceed 1");
    if (c.sample_every < 1) bad("sample_every", "must be at least 1");
    if (c.snapshot_every < 0) bad("snapshot_every", "must be nonnegative");
    if (!(c.snapshot_growth == 0.0 || c.snapshot_growth > 1.0)) bad("snapshot_growth", "must be 0 or exceed 1");
    if (c.checkpoint_every < 0) bad("checkpoint_every", "must be nonnegative");
    if (c.output_dir.empty()) bad("output_dir", "must not be empty");
    if (c.geometry == DomainKind::radial_disk) {
        if (c.model != Model::dirichlet) bad("model", "the radial geometry supports dirichlet only");
        if (c.profile == "two-bump") bad("profile", "two-bump data is not radially symmetric");
        if (c.perturbation > 0.0) bad("perturbation", "would break radial symmetry");
    }
    const GridSpec g = c.geometry == DomainKind::square ? GridSpec::square(c.n, c.length)
                                                        : GridSpec::radial_disk(c.n, c.length);
    auto check_center = [&](const std::string& key, Point p) {
        if (g.is_radial() && !(p == Point{0.0, 0.0})) bad(key, "radial profiles must be centred at the origin");
        if (!g.contains(p) || g.distance_to_boundary(p) <= 0.0) bad(key, "bump centre lies outside the domain");
    };
    if (c.profile != "constant") check_center("center", c.center);
    if (c.profile == "two-bump") check_center("center2", c.center2);
}

inline RunConfig parse_config(std::istream& is) {
    std::vector<std::pair<std::string, std::string>> entries;
    std::string line;
    int lineno = 0;
    std::optional<std::string> preset;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw InvalidArgument("config line " + std::to_string(lineno) + ": expected 'key = value'");
        std::string key = detail::trim(line.substr(0, eq));
        std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty()) throw InvalidArgument("config line " + std::to_string(lineno) + ": empty key");
        if (key == "preset") preset = value;
        entries.emplace_back(std::move(key), std::move(value));
    }
    RunConfig c = preset ? preset_config(*preset) : RunConfig{};
    for (const auto& [k, v] : entries) detail::apply_key(c, k, v);
    validate(c);
    return c;
}

inline RunConfig parse_config(const std::string& text) {
    std::istringstream is(text);
    return parse_config(is);
}

inline RunConfig load_config(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw InvalidArgument("cannot open config file " + path.string());
    return parse_config(is);
}

/// Canonical text: every key, one per line, shortest round-trip numbers.
inline std::string to_text(const RunConfig& c) {
    using detail::format_double;
    std::ostringstream os;
    auto pt = [](Point p) { return format_double(p.x) + ", " + format_double(p.y); };
    if (!c.preset.empty()) os << "preset = " << c.preset << '\n';
    os << "model = " << to_string(c.model) << '\n'
       << "geometry = " << (c.geometry == DomainKind::square ? "square" : "radial") << '\n'
       << "n = " << c.n << '\n'
       << "length = " << format_double(c.length) << '\n'
       << "profile = " << c.profile << '\n'
       << "lambda = " << format_double(c.lambda) << '\n'
       << "center = " << pt(c.center) << '\n'
       << "center2 = " << pt(c.center2) << '\n'
       << "width = " << format_double(c.width) << '\n'
       << "mass_split = " << format_double(c.mass_split) << '\n'
       << "background = " << format_double(c.background) << '\n'
       << "background_radius = " << format_double(c.background_radius) << '\n'
       << "perturbation = " << format_double(c.perturbation) << '\n'
       << "seed = " << c.seed << '\n'
       << "dt_safety = " << format_double(c.dt_safety) << '\n'
       << "dt_factor = " << format_double(c.dt_factor) << '\n'
       << "positivity = " << (c.positivity == PositivityMode::reject ? "reject" : "clip") << '\n'
       << "face_density = " << (c.face_density == FaceDensity::upwind ? "upwind" : "hybrid") << '\n'
       << "poisson_tol = " << format_double(c.poisson_tol) << '\n'
       << "t_end = " << format_double(c.t_end) << '\n'
       << "max_steps = " << detail::format_long(c.max_steps) << '\n'
       << "density_cap = " << format_double(c.density_cap) << '\n'
       << "density_cap_factor = " << format_double(c.density_cap_factor) << '\n'
       << "sample_every = " << c.sample_every << '\n'
       << "snapshot_every = " << c.snapshot_every << '\n'
       << "snapshot_growth = " << format_double(c.snapshot_growth) << '\n'
       << "checkpoint_every = " << c.checkpoint_every << '\n'
       << "output_dir = " << c.output_dir << '\n';
    return os.str();
}

inline std::uint64_t config_hash(const RunConfig& c) {
    const std::string t = to_text(c);
    return detail::fnv1a(t.data(), t.size());
}

inline std::vector<std::string> preset_names() {
    return {"subcritical-neumann", "subcritical-dirichlet", "supercritical-radial", "two-bump", "envelope-study"};
}

inline RunConfig preset_config(const std::string& name) {
    RunConfig c;
    c.preset = name;
    if (name == "subcritical-neumann") {
        c.model = Model::neumann;
        c.n = 64;
        c.lambda = 0.9 * 4.0 * pi;
        c.width = 0.1;
        c.t_end = 10.0;
        c.sample_every = 1000;
        c.output_dir = "runs/subcritical-neumann";
    } else if (name == "subcritical-dirichlet") {
        c.model = Model::dirichlet;
        c.n = 64;
        c.lambda = 4.0;
        c.width = 0.1;
        c.dt_safety = 0.15;
        c.max_steps = 1000;
        c.sample_every = 1;
        c.checkpoint_every = 500;
        c.output_dir = "runs/subcritical-dirichlet";
    } else if (name == "supercritical-radial" || name == "envelope-study") {
        c.model = Model::dirichlet;
        c.geometry = DomainKind::radial_disk;
        c.n = 32768;
        c.length = 0.5;
        c.center = {0.0, 0.0};
        c.lambda = 10.0 * pi;
        c.background = 1.7 * pi;
        c.background_radius = 0.4;
        c.width = 0.02;
        c.dt_factor = 0.1;
        c.density_cap_factor = 1e5;
        c.sample_every = 1;
        c.snapshot_growth = name == "envelope-study" ? 1.1 : 1.5;
        c.output_dir = "runs/" + name;
    } else if (name == "two-bump") {
        c.model = Model::dirichlet;
        c.n = 128;
        c.profile = "two-bump";
        c.center = {0.3, 0.5};
        c.center2 = {0.7, 0.5};
        c.width = 0.04;
        c.lambda = 18.0 * pi;
        // n = 128 saturates near 50x once a core fills a few cells.
        c.density_cap_factor = 20.0;
        c.sample_every = 1;
        c.snapshot_growth = 1.25;
        c.output_dir = "runs/two-bump";
    } else {
        std::string known;
        for (const auto& p : preset_names()) known += (known.empty() ? "" : ", ") + p;
        throw InvalidArgument("unknown preset '" + name + "' (known: " + known + ")");
    }
    return c;
}

inline GridSpec grid_of(const RunConfig& c) {
    return c.geometry == DomainKind::square ? GridSpec::square(c.n, c.length) : GridSpec::radial_disk(c.n, c.length);
}

/// Initial field of a configuration, including the seeded perturbation.
inline Field initial_field(const RunConfig& c) {
    validate(c);
    const GridSpec g = grid_of(c);
    InitialProfile prof;
    if (c.profile == "constant") prof = ConstantProfile{c.lambda};
    else if (c.profile == "gaussian") prof = GaussianProfile{c.center, c.width, c.lambda - c.background, c.background,
                                                                   c.background_radius};
    else prof = TwoBumpProfile{c.center, c.center2, c.width, c.mass_split * c.lambda, (1.0 - c.mass_split) * c.lambda};
    Field f = make_initial(g, prof);
    if (c.perturbation > 0.0) {
        std::mt19937_64 rng(c.seed);
        std::uniform_real_distribution<double> dist(-1.0, 1.0);
        for (double& x : f.values) x *= 1.0 + c.perturbation * dist(rng);
        const double m = total_mass(f);
        for (double& x : f.values) x *= c.lambda / m;
    }
    return f;
}

// ---------------------------------------------------------------------------
// Run state shared by both geometries

struct RunState {
    DomainKind kind = DomainKind::square;
    SimState sim;        ///< square runs
    MassProfile radial;  ///< radial runs

    double t() const { return kind == DomainKind::square ? sim.t : radial.t; }
    long step() const { return kind == DomainKind::square ? sim.step_index : radial.step_index; }
    double sup() const { return kind == DomainKind::square ? sim.field.max() : oracle_sup(radial); }
    Field density() const { return kind == DomainKind::square ? sim.field : oracle_density(radial); }

    EnergyRecord energy() const {
        if (kind == DomainKind::square) return free_energy(sim);
        Field u = oracle_density(radial);
        const Potential v = solve_radial_dirichlet(u);
        return free_energy(u, v, Model::dirichlet, radial.t);
    }
};

inline RunState initial_state(const RunConfig& c) {
    RunState s;
    s.kind = c.geometry;
    Field f = initial_field(c);
    if (s.kind == DomainKind::square) {
        PoissonOptions opt;
        opt.tol = c.poisson_tol;
        s.sim = make_state(std::move(f), c.model, opt);
    } else {
        s.radial = profile_from_field(f);
    }
    return s;
}

inline StepperConfig stepper_config(const RunConfig& c) {
    StepperConfig sc;
    sc.dt_safety = c.dt_safety;
    sc.positivity_mode = c.positivity;
    sc.face_density = c.face_density;
    sc.poisson.tol = c.poisson_tol;
    return sc;
}

/// One step toward t_end; the last step lands on t_end exactly.
inline void advance(RunState& s, const RunConfig& c, const StepperConfig& sc) {
    if (s.kind == DomainKind::square) {
        double dt = stable_dt(s.sim, sc);
        const bool last = s.sim.t + dt >= c.t_end;
        if (last) dt = c.t_end - s.sim.t;
        s.sim = step(s.sim, sc, dt);
        if (last) s.sim.t = c.t_end;
    } else {
        OracleConfig oc;
        oc.dt_factor = c.dt_factor;
        double dt = oracle_stable_dt(s.radial, oc);
        const bool last = s.radial.t + dt >= c.t_end;
        if (last) dt = c.t_end - s.radial.t;
        s.radial = oracle_step(s.radial, dt);
        if (last) s.radial.t = c.t_end;
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
    RunConfig config;
    std::string config_text;
    RunState state;
    bool completed = false;
    double density_cap = 0.0;     ///< resolved absolute cap
    double next_snapshot = 0.0;   ///< sup level of the next growth snapshot
    std::uint32_t version = checkpoint_version;
};

namespace detail {

class ByteWriter {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* c = static_cast<const char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    void u8(std::uint8_t x) { buf_.push_back(static_cast<char>(x)); }
    void u32(std::uint32_t x) {
        for (int k = 0; k < 4; ++k) u8(static_cast<std::uint8_t>(x >> (8 * k)));
    }
    void u64(std::uint64_t x) {
        for (int k = 0; k < 8; ++k) u8(static_cast<std::uint8_t>(x >> (8 * k)));
    }
    void f64(double x) { u64(std::bit_cast<std::uint64_t>(x)); }
    void doubles(const std::vector<double>& v) {
        u64(v.size());
        for (double x : v) f64(x);
    }
    const std::string& data() const { return buf_; }

private:
    std::string buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::string_view d) : d_(d) {}
    void need(std::size_t n) const {
        if (pos_ + n > d_.size()) throw CheckpointError("checkpoint truncated");
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(d_[pos_++]);
    }
    std::uint32_t u32() {
        std::uint32_t x = 0;
        for (int k = 0; k < 4; ++k) x |= static_cast<std::uint32_t>(u8()) << (8 * k);
        return x;
    }
    std::uint64_t u64() {
        std::uint64_t x = 0;
        for (int k = 0; k < 8; ++k) x |= static_cast<std::uint64_t>(u8()) << (8 * k);
        return x;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str(std::size_t n) {
        need(n);
        std::string s(d_.substr(pos_, n));
        pos_ += n;
        return s;
    }
    std::vector<double> doubles() {
        const std::uint64_t n = u64();
        need(n * 8);
        std::vector<double> v(n);
        for (auto& x : v) x = f64();
        return v;
    }
    std::size_t pos() const { return pos_; }

private:
    std::string_view d_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline void write_checkpoint(const fs::path& path, const Checkpoint& ck) {
    detail::ByteWriter w;
    w.bytes(checkpoint_magic, sizeof checkpoint_magic);
    w.u32(ck.version);
    const RunState& s = ck.state;
    const GridSpec& g = s.kind == DomainKind::square ? s.sim.field.grid : s.radial.grid;
    w.u8(static_cast<std::uint8_t>(s.kind));
    w.u8(static_cast<std::uint8_t>(ck.config.model));
    w.u32(static_cast<std::uint32_t>(g.n()));
    w.f64(g.length());
    w.f64(s.t());
    w.u64(static_cast<std::uint64_t>(s.step()));
    w.f64(s.kind == DomainKind::square ? s.sim.dt_last : 0.0);
    w.u64(static_cast<std::uint64_t>(s.kind == DomainKind::square ? s.sim.clip_events : 0));
    w.u8(ck.completed ? 1 : 0);
    w.f64(ck.density_cap);
    w.f64(ck.next_snapshot);
    w.u64(ck.config_text.size());
    w.bytes(ck.config_text.data(), ck.config_text.size());
    if (s.kind == DomainKind::square) {
        w.doubles(s.sim.field.values);
        w.doubles(s.sim.potential.values);
    } else {
        w.doubles(s.radial.M);
        w.doubles({});
    }
    const std::string& body = w.data();
    detail::ByteWriter tail;
    tail.u64(detail::fnv1a(body.data(), body.size()));

    fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        os.write(body.data(), static_cast<std::streamsize>(body.size()));
        os.write(tail.data().data(), static_cast<std::streamsize>(tail.data().size()));
        if (!os) throw CheckpointError("cannot write checkpoint " + path.string());
    }
    fs::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
    std::string data((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (data.size() < sizeof checkpoint_magic + 4 + 8) throw CheckpointError("checkpoint truncated: " + path.string());
    if (data.compare(0, sizeof checkpoint_magic, std::string(checkpoint_magic, sizeof checkpoint_magic)) != 0)
        throw CheckpointError("not a checkpoint file: " + path.string());
    detail::ByteReader r(data);
    r.str(sizeof checkpoint_magic);
    Checkpoint ck;
    ck.version = r.u32();
    if (ck.version != checkpoint_version)
        throw CheckpointError("checkpoint version " + std::to_string(ck.version) + " does not match this build (version " +
                              std::to_string(checkpoint_version) + ")");
    const std::string_view body(data.data(), data.size() - 8);
    detail::ByteReader tail(std::string_view(data).substr(data.size() - 8));
    if (tail.u64() != detail::fnv1a(body.data(), body.size()))
        throw CheckpointError("checkpoint checksum mismatch (file corrupted or truncated): " + path.string());

    RunState& s = ck.state;
    s.kind = static_cast<DomainKind>(r.u8());
    const auto model = static_cast<Model>(r.u8());
    const int n = static_cast<int>(r.u32());
    const double length = r.f64();
    const double t = r.f64();
    const long step = static_cast<long>(r.u64());
    const double dt_last = r.f64();
    const long clips = static_cast<long>(r.u64());
    ck.completed = r.u8() != 0;
    ck.density_cap = r.f64();
    ck.next_snapshot = r.f64();
    ck.config_text = r.str(r.u64());
    ck.config = parse_config(ck.config_text);
    auto first = r.doubles();
    auto second = r.doubles();
    if (r.pos() != body.size()) throw CheckpointError("checkpoint has trailing bytes");
    if (ck.config.n != n || ck.config.length != length || ck.config.geometry != s.kind || ck.config.model != model)
        throw CheckpointError("checkpoint header disagrees with its embedded configuration");

    const GridSpec g = grid_of(ck.config);
    if (s.kind == DomainKind::square) {
        if (first.size() != g.cell_count() || second.size() != g.cell_count())
            throw CheckpointError("checkpoint payload size does not match the grid");
        s.sim.field = Field(g, std::move(first));
        s.sim.potential = Potential{g, std::move(second), model, 0.0, 0};
        s.sim.t = t;
        s.sim.step_index = step;
        s.sim.dt_last = dt_last;
        s.sim.model = model;
        s.sim.clip_events = clips;
    } else {
        if (first.size() != static_cast<std::size_t>(n)) throw CheckpointError("checkpoint payload size does not match");
        s.radial = MassProfile{g, std::move(first), t, step};
    }
    return ck;
}

// ---------------------------------------------------------------------------
// Series records

inline ordered_json series_record(const RunState& s) {
    const EnergyRecord e = s.energy();
    ordered_json j;
    j["t"] = s.t();
    j["step"] = s.step();
    j["mass"] = e.mass;
    j["F"] = e.F;
    j["D"] = e.D;
    j["sup"] = s.sup();
    j["collapses"] = ordered_json::array();
    j["residual"] = nullptr;
    return j;
}

inline std::vector<ordered_json> read_ndjson(const fs::path& path) {
    std::vector<ordered_json> out;
    std::ifstream is(path);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto j = ordered_json::parse(line, nullptr, false);
        if (j.is_discarded()) break;  // torn final line from an interrupted write
        out.push_back(std::move(j));
    }
    return out;
}

/// Keeps lines whose "step" is at most `step`; drops everything after the first bad line.
inline void truncate_ndjson(const fs::path& path, long step) {
    if (!fs::exists(path)) return;
    std::ifstream is(path);
    std::string line, kept;
    while (std::getline(is, line)) {
        auto j = ordered_json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("step")) break;
        if (j["step"].get<long>() > step) break;
        kept += line;
        kept += '\n';
    }
    is.close();
    std::ofstream os(path, std::ios::trunc);
    os << kept;
}

// ---------------------------------------------------------------------------
// Running

struct RunHooks {
    /// Stop after this step as if interrupted, leaving a checkpoint behind.
    long interrupt_after_step = -1;
};

enum class RunStatus { completed, interrupted, already_completed };

struct RunSummary {
    fs::path dir;
    RunStatus status = RunStatus::completed;
    std::optional<StopReason> reason;
    long steps = 0;
    double t = 0.0;
    std::string message;
};

/// Raised when a run fails mid-way; a checkpoint of the last good state exists.
class RunFailure : public std::runtime_error {
public:
    RunFailure(const std::string& what, fs::path checkpoint)
        : std::runtime_error(what), checkpoint_(std::move(checkpoint)) {}
    const fs::path& checkpoint() const { return checkpoint_; }

private:
    fs::path checkpoint_;
};

namespace detail {

inline std::string step_name(long step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "step_%09ld", step);
    return buf;
}

struct RunContext {
    RunConfig config;
    std::string config_text;
    fs::path dir;
    double density_cap = 0.0;
    double next_snapshot = 0.0;
    long last_snapshot_step = -1;
};

inline Checkpoint make_checkpoint(const RunContext& ctx, const RunState& s, bool completed) {
    Checkpoint ck;
    ck.config = ctx.config;
    ck.config_text = ctx.config_text;
    ck.state = s;
    ck.completed = completed;
    ck.density_cap = ctx.density_cap;
    ck.next_snapshot = ctx.next_snapshot;
    return ck;
}

inline void write_snapshot(RunContext& ctx, const RunState& s) {
    if (s.step() == ctx.last_snapshot_step) return;
    ctx.last_snapshot_step = s.step();
    const std::string file = "snapshots/" + step_name(s.step()) + ".csv";
    {
        std::ofstream os(ctx.dir / file, std::ios::trunc);
        write_csv(os, s.density());
    }
    ordered_json j;
    j["step"] = s.step();
    j["t"] = s.t();
    j["sup"] = s.sup();
    j["file"] = file;
    std::ofstream idx(ctx.dir / "snapshots.ndjson", std::ios::app);
    idx << j.dump() << '\n';
}

inline void write_manifest(const RunContext& ctx, const RunState& s, const std::string& status,
                           std::optional<StopReason> reason, const std::string& message = {}) {
    ordered_json m;
    m["version"] = checkpoint_version;
    m["status"] = status;
    m["config_hash"] = [&] {
        char buf[24];
        std::snprintf(buf, sizeof buf, "%016llx",
                      static_cast<unsigned long long>(fnv1a(ctx.config_text.data(), ctx.config_text.size())));
        return std::string(buf);
    }();
    m["config"] = ctx.config_text;
    m["grid"] = {{"kind", to_string(grid_of(ctx.config).kind())},
                 {"n", ctx.config.n},
                 {"length", ctx.config.length},
                 {"h", grid_of(ctx.config).h()}};
    m["model"] = to_string(ctx.config.model);
    m["lambda"] = ctx.config.lambda;
    m["density_cap"] = std::isfinite(ctx.density_cap) ? ordered_json(ctx.density_cap) : ordered_json(nullptr);
    m["stop_reason"] = reason ? ordered_json(to_string(*reason)) : ordered_json(nullptr);
    m["t"] = s.t();
    m["steps"] = s.step();
    if (s.kind == DomainKind::square) m["clip_events"] = s.sim.clip_events;
    if (!message.empty()) m["message"] = message;
    std::vector<std::string> ckpts;
    if (fs::exists(ctx.dir / "checkpoints"))
        for (const auto& e : fs::directory_iterator(ctx.dir / "checkpoints"))
            if (e.path().extension() == ".ckpt") ckpts.push_back("checkpoints/" + e.path().filename().string());
    std::sort(ckpts.begin(), ckpts.end());
    m["checkpoints"] = ckpts;
    m["snapshot_count"] = read_ndjson(ctx.dir / "snapshots.ndjson").size();
    std::ofstream os(ctx.dir / "manifest.json", std::ios::trunc);
    os << m.dump(2) << '\n';
}

inline void write_final_collapse_report(const RunContext& ctx, const RunState& s) {
    std::vector<SupSample> sups;
    for (const auto& j : read_ndjson(ctx.dir / "series.ndjson")) sups.push_back({j["t"], j["sup"]});
    std::ofstream os(ctx.dir / "collapse_report.csv", std::ios::trunc);
    try {
        const BlowupEstimate est = estimate_blowup_time(sups);
        const Field u = s.density();
        Point x0 = u.grid.domain_center();
        if (u.grid.is_square()) {
            const auto it = std::max_element(u.values.begin(), u.values.end());
            const auto k = static_cast<int>(it - u.values.begin());
            x0 = u.grid.cell_center(k % u.grid.n(), k / u.grid.n());
        }
        write_collapse_csv(os, detect_collapses(u, s.t(), est, x0, 10.0, 0.5));
    } catch (const NoBlowupTrend& e) {
        os << "# no collapse report: " << e.what() << '\n';
    }
}

inline RunSummary drive(RunContext& ctx, RunState s, const RunHooks& hooks) {
    const RunConfig& c = ctx.config;
    const StepperConfig sc = stepper_config(c);
    StopRule stop{c.t_end, c.max_steps, ctx.density_cap};
    std::ofstream series(ctx.dir / "series.ndjson", std::ios::app);
    auto record = [&](const RunState& st) { series << series_record(st).dump() << '\n'; };
    auto checkpoint = [&](const RunState& st, const std::string& name, bool completed) {
        series.flush();
        write_checkpoint(ctx.dir / "checkpoints" / (name + ".ckpt"), make_checkpoint(ctx, st, completed));
    };

    RunSummary sum;
    sum.dir = ctx.dir;
    write_manifest(ctx, s, "running", std::nullopt);
    while (true) {
        if (auto why = check_stop(s.t(), s.step(), s.sup(), stop)) {
            if (s.step() > 0 && s.step() % c.sample_every != 0) record(s);
            series.close();
            if (*why == StopReason::density_cap_hit) write_final_collapse_report(ctx, s);
            if (s.step() > 0) write_snapshot(ctx, s);
            checkpoint(s, "final", true);
            write_manifest(ctx, s, "completed", why);
            sum.status = RunStatus::completed;
            sum.reason = why;
            break;
        }
        if (s.step() == 0) {
            record(s);
            if (c.snapshot_every > 0 || c.snapshot_growth > 0.0) write_snapshot(ctx, s);
        }
        RunState prev = s;
        try {
            advance(s, c, sc);
        } catch (const std::exception& e) {
            series.flush();
            const fs::path ck = ctx.dir / "checkpoints" / "failure.ckpt";
            write_checkpoint(ck, make_checkpoint(ctx, prev, false));
            write_manifest(ctx, prev, "failed", std::nullopt, e.what());
            throw RunFailure(std::string("run failed at step ") + std::to_string(prev.step() + 1) + ": " + e.what(), ck);
        }
        if (s.step() % c.sample_every == 0) record(s);
        const bool by_step = c.snapshot_every > 0 && s.step() % c.snapshot_every == 0;
        const bool by_growth = c.snapshot_growth > 0.0 && s.sup() >= ctx.next_snapshot;
        if (by_growth)
            while (ctx.next_snapshot <= s.sup()) ctx.next_snapshot *= c.snapshot_growth;
        if (by_step || by_growth) write_snapshot(ctx, s);
        if (c.checkpoint_every > 0 && s.step() % c.checkpoint_every == 0) checkpoint(s, step_name(s.step()), false);
        if (hooks.interrupt_after_step >= 0 && s.step() >= hooks.interrupt_after_step) {
            series.close();
            checkpoint(s, step_name(s.step()), false);
            write_manifest(ctx, s, "interrupted", std::nullopt);
            sum.status = RunStatus::interrupted;
            break;
        }
    }
    sum.steps = s.step();
    sum.t = s.t();
    return sum;
}

}  // namespace detail

/// Executes a configuration into its output directory, replacing earlier contents.
inline RunSummary run(const RunConfig& config, const RunHooks& hooks = {}) {
    validate(config);
    detail::RunContext ctx;
    ctx.config = config;
    ctx.config_text = to_text(config);
    ctx.dir = config.output_dir;
    fs::create_directories(ctx.dir);
    for (const char* sub : {"snapshots", "checkpoints"}) {
        fs::remove_all(ctx.dir / sub);
        fs::create_directories(ctx.dir / sub);
    }
    for (const char* f : {"series.ndjson", "snapshots.ndjson", "collapse_report.csv", "report.json", "envelope.ndjson"})
        fs::remove(ctx.dir / f);
    RunState s = initial_state(config);
    const double sup0 = s.sup();
    ctx.density_cap = std::min(config.density_cap, config.density_cap_factor * sup0);
    ctx.next_snapshot = config.snapshot_growth > 0.0 ? sup0 * config.snapshot_growth : 0.0;
    return detail::drive(ctx, std::move(s), hooks);
}

/// Continues a run from a checkpoint inside its run directory.
inline RunSummary resume(const fs::path& checkpoint_path, const RunHooks& hooks = {}) {
    Checkpoint ck = read_checkpoint(checkpoint_path);
    RunSummary sum;
    sum.dir = checkpoint_path.parent_path().parent_path();
    if (sum.dir.empty()) sum.dir = ".";
    if (ck.completed) {
        sum.status = RunStatus::already_completed;
        sum.steps = ck.state.step();
        sum.t = ck.state.t();
        sum.message = "run already completed at step " + std::to_string(sum.steps) + "; nothing to resume";
        return sum;
    }
    detail::RunContext ctx;
    ctx.config = ck.config;
    ctx.config_text = ck.config_text;
    ctx.dir = sum.dir;
    ctx.density_cap = ck.density_cap;
    ctx.next_snapshot = ck.next_snapshot;
    const long step = ck.state.step();

    truncate_ndjson(ctx.dir / "series.ndjson", step);
    truncate_ndjson(ctx.dir / "snapshots.ndjson", step);
    std::vector<std::string> keep;
    for (const auto& j : read_ndjson(ctx.dir / "snapshots.ndjson")) {
        keep.push_back(j["file"]);
        ctx.last_snapshot_step = j["step"];
    }
    if (fs::exists(ctx.dir / "snapshots"))
        for (const auto& e : fs::directory_iterator(ctx.dir / "snapshots")) {
            const std::string rel = "snapshots/" + e.path().filename().string();
            if (std::find(keep.begin(), keep.end(), rel) == keep.end()) fs::remove(e.path());
        }
    for (const auto& e : fs::directory_iterator(ctx.dir / "checkpoints")) {
        const std::string name = e.path().stem().string();
        if (name == "final" || (name.rfind("step_", 0) == 0 && std::stol(name.substr(5)) > step))
            fs::remove(e.path());
    }
    for (const char* f : {"collapse_report.csv", "report.json", "envelope.ndjson"}) fs::remove(ctx.dir / f);
    return detail::drive(ctx, std::move(ck.state), hooks);
}

// ---------------------------------------------------------------------------
// Analysis

struct AnalyzeOptions {
    std::optional<Point> x0;
    std::vector<double> b_list{5.0, 10.0, 20.0};
    double epsilon = 0.5;
    double y_max = 10.0;
    int n_y = 0;      ///< 0 picks 256 shells (radial) or 96 cells per axis (square)
    int threads = 0;  ///< 0 reads COLLAPSE_LAB_THREADS, else hardware concurrency
    DetectorOptions detector{};
};

/// Worker count from COLLAPSE_LAB_THREADS, falling back to the hardware.
inline int analysis_threads(int requested = 0) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("COLLAPSE_LAB_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v >= 1) return static_cast<int>(v);
        throw InvalidArgument(std::string("COLLAPSE_LAB_THREADS must be a positive integer, got '") + env + "'");
    }
    return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

/// Runs fn(k) for k in [0, count) on up to `threads` workers.
inline void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(1, threads)));
    if (workers <= 1) {
        for (std::size_t k = 0; k < count; ++k) fn(k);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            try {
                for (std::size_t k; (k = next++) < count;) fn(k);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

inline ordered_json collapse_json(const CollapseReport& rep) {
    ordered_json balls = ordered_json::array();
    for (const auto& c : rep.balls)
        balls.push_back({{"x", c.center.x}, {"y", c.center.y}, {"r", c.radius}, {"mass", c.mass}, {"quantized", c.quantized}});
    return balls;
}

/// Reads a completed run directory and writes report.json (plus
/// collapse_report.csv and envelope.ndjson for blowup runs).
inline ordered_json analyze(const fs::path& dir, const AnalyzeOptions& opt = {}) {
    if (!fs::exists(dir / "manifest.json")) throw InvalidArgument("no manifest.json in " + dir.string());
    ordered_json manifest;
    {
        std::ifstream is(dir / "manifest.json");
        manifest = ordered_json::parse(is);
    }
    const RunConfig cfg = parse_config(manifest["config"].get<std::string>());
    const GridSpec grid = grid_of(cfg);
    const auto series = read_ndjson(dir / "series.ndjson");

    ordered_json report;
    report["run"] = dir.string();
    report["config_hash"] = manifest["config_hash"];
    report["stop_reason"] = manifest["stop_reason"];

    std::vector<EnergyRecord> energy;
    std::vector<SupSample> sups;
    for (const auto& j : series) {
        energy.push_back({j["t"], j["F"], j["D"], j["mass"], cfg.model != Model::dirichlet});
        sups.push_back({j["t"], j["sup"]});
    }
    if (energy.size() >= 2) {
        const TrendVerdict v = energy_trend_check(energy);
        report["energy"] = {{"violations", v.violations.size()},
                            {"max_defect", v.max_defect},
                            {"variant_energy", cfg.model != Model::dirichlet}};
    }

    BlowupEstimate est;
    try {
        est = estimate_blowup_time(sups);
    } catch (const NoBlowupTrend& e) {
        report["kind"] = "global-existence run";
        report["note"] = e.what();
        double sup_max = 0.0;
        for (const auto& s : sups) sup_max = std::max(sup_max, s.sup);
        report["sup_max"] = sup_max;
        std::ofstream os(dir / "report.json", std::ios::trunc);
        os << report.dump(2) << '\n';
        return report;
    } catch (const InvalidArgument& e) {
        report["kind"] = "global-existence run";
        report["note"] = e.what();
        std::ofstream os(dir / "report.json", std::ios::trunc);
        os << report.dump(2) << '\n';
        return report;
    }
    report["kind"] = "blowup run";
    report["T_hat"] = est.T_hat;
    report["fit_window"] = {est.t1, est.t2};
    report["fit_residual"] = est.fit_residual;
    try {
        report["T_hat_previous_decade"] = estimate_blowup_time(sups, 1).T_hat;
    } catch (const std::exception&) {
        report["T_hat_previous_decade"] = nullptr;
    }

    // Snapshots strictly before the estimated blowup time.
    std::vector<Snapshot> snaps;
    for (const auto& j : read_ndjson(dir / "snapshots.ndjson")) {
        const double t = j["t"];
        if (!(t < est.T_hat)) continue;
        std::ifstream is(dir / j["file"].get<std::string>());
        snaps.push_back({t, read_csv(is, grid)});
    }
    Point x0 = grid.domain_center();
    if (opt.x0) x0 = *opt.x0;
    else if (grid.is_square() && !snaps.empty()) {
        const Field& last = snaps.back().field;
        const auto k = static_cast<int>(std::max_element(last.values.begin(), last.values.end()) - last.values.begin());
        x0 = grid.cell_center(k % grid.n(), k / grid.n());
    }
    report["x0"] = {x0.x, x0.y};
    report["epsilon"] = opt.epsilon;
    const double b_window = opt.b_list.empty() ? 10.0 : *std::max_element(opt.b_list.begin(), opt.b_list.end());
    report["b_window"] = b_window;
    const int n_y = opt.n_y > 0 ? opt.n_y : (grid.is_radial() ? 256 : 96);

    std::vector<CollapseReport> reps(snaps.size());
    std::vector<std::vector<WindowMass>> sweeps(snaps.size());
    std::vector<std::optional<RescaledFrame>> frames(snaps.size());
    parallel_for(snaps.size(), analysis_threads(opt.threads), [&](std::size_t k) {
        const Snapshot& sn = snaps[k];
        reps[k] = detect_collapses(sn.field, sn.t, est, x0, b_window, opt.epsilon, opt.detector);
        sweeps[k] = mass_window_sweep(sn.field, sn.t, est, x0, opt.b_list);
        if (grid.distance_to_boundary(x0) >= opt.y_max * est.R(sn.t))
            frames[k] = make_frame(sn.field, sn.t, est, x0, opt.y_max, n_y);
    });

    ordered_json snap_json = ordered_json::array();
    std::ofstream csv(dir / "collapse_report.csv", std::ios::trunc);
    for (std::size_t k = 0; k < snaps.size(); ++k) {
        write_collapse_csv(csv, reps[k], k == 0);
        ordered_json sweep = ordered_json::array();
        for (const auto& w : sweeps[k]) sweep.push_back({{"b", w.b}, {"mass", w.mass}});
        snap_json.push_back({{"t", snaps[k].t},
                             {"tau", est.T_hat - snaps[k].t},
                             {"sup", snaps[k].field.max()},
                             {"collapses", collapse_json(reps[k])},
                             {"residual", reps[k].residual_mass},
                             {"window_mass", reps[k].window_mass},
                             {"sweep", sweep}});
    }
    report["snapshots"] = snap_json;

    // Residual behaviour over the last decade of tau.
    if (!snaps.empty()) {
        const double tau_end = est.T_hat - snaps.back().t;
        std::vector<double> tail;
        for (std::size_t k = 0; k < snaps.size(); ++k)
            if (est.T_hat - snaps[k].t <= 10.0 * tau_end) tail.push_back(reps[k].residual_mass);
        bool decreasing = tail.size() >= 2;
        for (std::size_t k = 1; k < tail.size(); ++k)
            if (tail[k] > tail[k - 1] * 1.01 + 1e-12) decreasing = false;
        const CollapseReport& final_rep = reps.back();
        report["final"] = {{"t", final_rep.t},
                           {"collapses", collapse_json(final_rep)},
                           {"collapse_count", final_rep.balls.size()},
                           {"quantized_count", final_rep.quantized_count()},
                           {"residual", final_rep.residual_mass}};
        report["residual_decreasing_last_decade"] = decreasing;
    }

    std::vector<RescaledFrame> usable;
    for (auto& f : frames)
        if (f) usable.push_back(*f);
    if (!usable.empty()) {
        const EnvelopeSeries env = envelope_series(usable);
        std::ofstream os(dir / "envelope.ndjson", std::ios::trunc);
        ordered_json pts = ordered_json::array();
        for (const auto& p : env.points) {
            ordered_json j = {{"s", p.s}, {"frame_mass", p.frame_mass}, {"second_moment", p.second_moment}};
            os << j.dump() << '\n';
            j["flagged"] = p.flagged;
            pts.push_back(j);
        }
        const EnvelopeSensitivity sens = envelope_sensitivity(snaps, est, x0, opt.y_max, n_y);
        report["envelope"] = {{"y_max", opt.y_max},
                              {"median_second_moment", env.median_second_moment},
                              {"any_flagged", env.any_flagged()},
                              {"plateau", sens.plateau_nominal},
                              {"plateau_shift_under_T_perturbation", sens.max_plateau_shift},
                              {"plateau_reported", sens.reported},
                              {"points", pts}};
    }
    std::ofstream os(dir / "report.json", std::ios::trunc);
    os << report.dump(2) << '\n';
    return report;
}

}  // namespace collapse_lab
