// Command-line front end: run, resume and analyze experiment directories.

#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "collapse_lab/io.hpp"

namespace cl = collapse_lab;

namespace {

std::vector<double> split_numbers(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        const double x = std::stod(item, &used);
        if (used != item.size()) throw cl::InvalidArgument("not a number: '" + item + "'");
        out.push_back(x);
    }
    return out;
}

void print_summary(const cl::RunSummary& s) {
    if (s.status == cl::RunStatus::already_completed) {
        std::cout << s.message << '\n';
        return;
    }
    std::cout << "run directory: " << s.dir.string() << '\n'
              << "status: " << (s.status == cl::RunStatus::completed ? "completed" : "interrupted") << '\n'
              << "steps: " << s.steps << "  t = " << s.t << '\n';
    if (s.reason) std::cout << "stop reason: " << cl::to_string(*s.reason) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"collapse_lab: chemotaxis collapse experiments"};
    app.require_subcommand(1);

    std::string config_path, preset, output_dir;
    auto* run = app.add_subcommand("run", "execute a configuration file");
    run->add_option("config", config_path, "flat key = value configuration")->required()->check(CLI::ExistingFile);
    run->add_option("--output-dir", output_dir, "override output_dir from the configuration");

    auto* run_preset = app.add_subcommand("preset", "execute a named preset");
    run_preset->add_option("name", preset, "preset name")->required();
    run_preset->add_option("--output-dir", output_dir, "override the preset's output_dir");

    std::string checkpoint;
    auto* res = app.add_subcommand("resume", "continue a run from a checkpoint");
    res->add_option("checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);

    std::string dir, x0_text, b_text = "5,10,20";
    double epsilon = 0.5, y_max = 10.0;
    int threads = 0;
    auto* ana = app.add_subcommand("analyze", "blowup, collapse and envelope analysis of a run directory");
    ana->add_option("dir", dir, "run directory")->required()->check(CLI::ExistingDirectory);
    ana->add_option("--x0", x0_text, "window centre a,b (default: the peak of the last snapshot)");
    ana->add_option("--b-list", b_text, "comma-separated window factors")->capture_default_str();
    ana->add_option("--epsilon", epsilon, "quantization tolerance")->capture_default_str();
    ana->add_option("--y-max", y_max, "rescaled window half-width")->capture_default_str();
    ana->add_option("--threads", threads, "worker threads (default: COLLAPSE_LAB_THREADS)");

    app.add_subcommand("presets", "list the shipped presets");

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand("presets")) {
            for (const auto& name : cl::preset_names()) std::cout << name << '\n';
            return 0;
        }
        if (app.got_subcommand(run) || app.got_subcommand(run_preset)) {
            cl::RunConfig cfg = app.got_subcommand(run) ? cl::load_config(config_path) : cl::preset_config(preset);
            if (!output_dir.empty()) cfg.output_dir = output_dir;
            print_summary(cl::run(cfg));
            return 0;
        }
        if (app.got_subcommand(res)) {
            print_summary(cl::resume(checkpoint));
            return 0;
        }
        cl::AnalyzeOptions opt;
        if (!x0_text.empty()) {
            const auto xy = split_numbers(x0_text);
            if (xy.size() != 2) throw cl::InvalidArgument("--x0 expects two comma-separated numbers");
            opt.x0 = cl::Point{xy[0], xy[1]};
        }
        opt.b_list = split_numbers(b_text);
        opt.epsilon = epsilon;
        opt.y_max = y_max;
        opt.threads = threads;
        const auto report = cl::analyze(dir, opt);
        std::cout << "wrote " << (std::filesystem::path(dir) / "report.json").string() << " ("
                  << report["kind"].get<std::string>() << ")\n";
        return 0;
    } catch (const cl::RunFailure& e) {
        std::cerr << "run failed: " << e.what() << "\ncheckpoint: " << e.checkpoint().string() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
