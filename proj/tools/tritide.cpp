// tritide: generate synthetic feeds, run the edge/fog/cloud pipeline on them,
// and emit plot-ready tables from finished runs.

#include "tritide/pipeline.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace tritide;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kDataError = 2;

void setup_logging() {
    auto logger = spdlog::stderr_color_mt("tritide");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("%^%l%$: %v");
    spdlog::set_level(spdlog::level::warn);
    if (const char* env = std::getenv("TRITIDE_LOG")) {
        spdlog::set_level(spdlog::level::from_str(env));
    }
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write " + p.string());
    }
    out << text;
}

int generate(const fs::path& config, const fs::path& out) {
    const auto cfg = load_config(config);
    const auto net = pipeline::build_network(cfg);
    const auto feed = pipeline::synthesize(cfg, net);
    fs::create_directories(out);
    {
        std::ofstream f(out / "feed.csv", std::ios::binary);
        ingest::write_feed_csv(f, feed.items);
    }
    write_file(out / "truth.json", ingest::truth_to_json(feed.truth).dump(2) + "\n");
    ingest::write_gtfs(out / "gtfs", net.schedule);
    write_file(out / "network.geojson", ingest::to_geojson(net.geo).dump(2) + "\n");
    spdlog::info("wrote {} feed records to {}", feed.items.size(), (out / "feed.csv").string());
    return kOk;
}

void finish_run(const fs::path& out, const pipeline::RunReport& report, std::chrono::steady_clock::duration wall) {
    pipeline::write_run(out, report);
    const double secs = std::chrono::duration<double>(wall).count();
    write_file(out / "timing.json", nlohmann::json{{"wall_clock_s", secs}}.dump(2) + "\n");
    const auto& e = report.layer("edge");
    const auto& f = report.layer("fog");
    const auto& c = report.layer("cloud");
    spdlog::info("edge {} -> {} tuples, fog {} -> {}, cloud {} in; {} feedback messages; {:.2f}s wall", e.tuples_in,
                 e.tuples_out, f.tuples_in, f.tuples_out, c.tuples_in, report.feedback.size(), secs);
}

pipeline::SimOptions sim_options(const RunConfig& cfg, const fs::path& out) {
    pipeline::SimOptions o;
    if (cfg.fog_store) {
        o.store_dir = out / "fog_store";
    }
    return o;
}

int run_synth(const fs::path& config, const fs::path& out) {
    const auto cfg = load_config(config);
    const auto t0 = std::chrono::steady_clock::now();
    const auto net = pipeline::build_network(cfg);
    const auto feed = pipeline::synthesize(cfg, net);
    pipeline::Simulation sim(cfg, net, sim_options(cfg, out));
    const auto report = sim.run(feed.items);
    finish_run(out, report, std::chrono::steady_clock::now() - t0);
    return kOk;
}

int replay(const fs::path& feed_path, const fs::path& config, const fs::path& out, double speed) {
    const auto cfg = load_config(config);
    const auto t0 = std::chrono::steady_clock::now();
    const auto net = pipeline::build_network(cfg);
    ingest::Pacing pacing = ingest::AsFastAsPossible{};
    if (speed > 0.0) {
        pacing = ingest::Scaled{speed};
    }
    ingest::ReplayStream stream(feed_path, pacing, cfg.edge.cleaning.parse);
    pipeline::Simulation sim(cfg, net, sim_options(cfg, out));
    const auto report = sim.run([&] { return stream.next(); });
    finish_run(out, report, std::chrono::steady_clock::now() - t0);
    return kOk;
}

int report(const fs::path& run_dir, const std::string& what) {
    std::ifstream in(run_dir / "run.json", std::ios::binary);
    if (!in) {
        throw ingest::LoadError("missing file: " + (run_dir / "run.json").string());
    }
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ingest::LoadError("run.json: " + std::string(e.what()));
    }
    std::cout << pipeline::render_table(doc, what);
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    setup_logging();
    CLI::App app{"Edge/fog/cloud analytics pipeline for bus movement feeds", "tritide"};
    app.require_subcommand(1, 1);

    fs::path config;
    fs::path out;
    fs::path feed;
    fs::path run_dir;
    std::string what;
    double speed = 0.0;
    bool synth = false;

    auto* gen = app.add_subcommand("generate", "Write a synthetic feed and its ground truth");
    gen->add_option("--config", config, "Config file")->required();
    gen->add_option("--out", out, "Output directory")->required();

    auto* rep = app.add_subcommand("replay", "Run the pipeline over a recorded feed CSV");
    rep->add_option("--feed", feed, "Feed CSV")->required();
    rep->add_option("--config", config, "Config file")->required();
    rep->add_option("--out", out, "Output directory")->required();
    rep->add_option("--speed", speed, "Pace records at this multiple of real time (0 = as fast as possible)")
        ->check(CLI::NonNegativeNumber);

    auto* run = app.add_subcommand("run", "Run the pipeline over a freshly generated synthetic feed");
    run->add_flag("--synth", synth, "Use the synthetic generator as the feed source")->required();
    run->add_option("--config", config, "Config file")->required();
    run->add_option("--out", out, "Output directory")->required();

    auto* rpt = app.add_subcommand("report", "Print a plot-ready CSV view of a finished run");
    rpt->add_option("--run", run_dir, "Run directory")->required();
    std::vector<std::string> views(pipeline::kReportViews.begin(), pipeline::kReportViews.end());
    rpt->add_option("--what", what, "View")->required()->check(CLI::IsMember(views));

    auto* val = app.add_subcommand("validate-config", "Check a config file against the schema");
    val->add_option("--config", config, "Config file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (gen->parsed()) {
            return generate(config, out);
        }
        if (rep->parsed()) {
            return replay(feed, config, out, speed);
        }
        if (run->parsed()) {
            return run_synth(config, out);
        }
        if (rpt->parsed()) {
            return report(run_dir, what);
        }
        load_config(config);
        std::cout << "ok\n";
        return kOk;
    } catch (const ConfigError& e) {
        spdlog::error("config error at {}", e.what());
        return kDataError;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return kDataError;
    }
}
