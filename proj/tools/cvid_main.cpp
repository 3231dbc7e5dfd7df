#include <CLI11.hpp>
#include <cstdint>
#include <iostream>
#include <string>

#include "cvid/pipeline.hpp"

using namespace cvid;

int main(int argc, char** argv) {
    CLI::App app{"controllable video editing pipeline"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    uint64_t seed = 0;
    std::string out_dir;
    app.add_option("--config", config_path, "pipeline config file")->required();
    auto* seed_opt = app.add_option("--seed", seed, "override the config seed");
    auto* out_opt = app.add_option("--out", out_dir, "override the output directory");

    CLI::App* c_extract = app.add_subcommand("extract", "extract control maps from frames");
    CLI::App* c_editctl = app.add_subcommand("edit-control", "apply an edit spec to control maps");
    CLI::App* c_custom = app.add_subcommand("customize", "tune the model on the source video");
    CLI::App* c_invert = app.add_subcommand("invert", "invert frames and record attention");
    CLI::App* c_edit = app.add_subcommand("edit", "generate edited frames");
    CLI::App* c_metrics = app.add_subcommand("metrics", "report metrics on the output frames");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        PipelineConfig cfg = PipelineConfig::parse_file(config_path);
        if (seed_opt->count() > 0) cfg.seed = seed;
        if (out_opt->count() > 0) cfg.out_dir = out_dir;

        if (c_extract->parsed()) cmd_extract(cfg);
        else if (c_editctl->parsed()) cmd_edit_control(cfg);
        else if (c_custom->parsed()) cmd_customize(cfg);
        else if (c_invert->parsed()) cmd_invert(cfg);
        else if (c_edit->parsed()) cmd_edit(cfg);
        else if (c_metrics->parsed()) cmd_metrics(cfg);
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
