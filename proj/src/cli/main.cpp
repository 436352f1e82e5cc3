// Command-line entry point: reproducible runs over a JSON configuration.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "lab/config.h"
#include "lab/errors.h"
#include "lab/pipeline.h"

namespace fs = std::filesystem;

namespace {

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw lab::ConfigError("cannot write " + path.string());
    out << content;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw lab::ConfigError("cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
    return text;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Deterministic inference laboratory for a toy transformer"};
    app.require_subcommand(0, 1);

    std::string config_path;
    std::optional<uint64_t> seed;
    std::optional<std::string> decoder;
    std::optional<std::string> atlas_flag;
    std::optional<std::string> critic_flag;
    std::string out_dir = "out";
    bool print_cfg = false;

    app.add_option("--config", config_path, "JSON run configuration file");
    app.add_option("--seed", seed, "Override the run seed");
    app.add_option("--decoder", decoder, "Override the decoding strategy");
    app.add_option("--atlas", atlas_flag, "Force the retrieval gate on or off")
        ->check(CLI::IsMember({"on", "off"}));
    app.add_option("--critic", critic_flag, "Force the cache compressor on or off")
        ->check(CLI::IsMember({"on", "off"}));
    app.add_option("--out", out_dir, "Directory for run outputs")->capture_default_str();
    app.add_flag("--print-config", print_cfg,
                 "Print the resolved configuration with provenance tags and exit");

    std::string question, data_path;
    auto* c_gen = app.add_subcommand("generate", "Answer a question with the configured decoder");
    c_gen->add_option("question", question, "Question text")->required();
    auto* c_train =
        app.add_subcommand("train-porag", "Optimize the retrieval-augmented policy by GRPO");
    c_train->add_option("data", data_path, "JSONL training items")->required();
    auto* c_bench = app.add_subcommand("compress-bench",
                                       "Decode with and without cache compression and compare");
    c_bench->add_option("prompt_file", data_path, "File holding the prompt")->required();
    auto* c_eval = app.add_subcommand("eval", "Score the decoder on question/answer pairs");
    c_eval->add_option("data", data_path, "JSONL {question, answer} items")->required();
    auto* c_trace = app.add_subcommand("trace", "Dump one fully introspected generation");
    c_trace->add_option("question", question, "Question text")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        lab::RunConfig cfg =
            config_path.empty() ? lab::RunConfig{} : lab::load_config(config_path);
        if (seed) cfg.seed = *seed;
        if (decoder) cfg.decoder.name = *decoder;
        if (atlas_flag) cfg.atlas.enabled = *atlas_flag == "on";
        if (critic_flag) cfg.critic.enabled = *critic_flag == "on";
        if (const auto err = cfg.validate(); !err.empty())
            throw lab::ConfigError("config: " + err);

        if (print_cfg) {
            std::cout << lab::print_config(cfg);
            return 0;
        }
        if (app.get_subcommands().empty())
            throw lab::ConfigError("no subcommand given (see --help)");

        const fs::path out(out_dir);
        fs::create_directories(out);
        const lab::RunContext ctx = lab::make_run_context(std::move(cfg));

        if (c_gen->parsed()) {
            const lab::GenerateOutcome res = lab::run_generate(ctx, question);
            write_file(out / "trace.json", lab::dump_json(res.trace));
            write_file(out / "metrics.json", lab::dump_json(res.metrics));
            std::cout << res.answer << "\n";
        } else if (c_train->parsed()) {
            const auto report = lab::run_train(ctx, data_path, out.string());
            write_file(out / "report.json", lab::dump_json(report));
            std::cout << lab::dump_json(report);
        } else if (c_bench->parsed()) {
            const auto report = lab::run_compress_bench(ctx, read_file(data_path));
            write_file(out / "report.json", lab::dump_json(report));
            std::cout << lab::dump_json(report);
        } else if (c_eval->parsed()) {
            const auto report = lab::run_eval(ctx, data_path);
            write_file(out / "eval.json", lab::dump_json(report));
            std::cout << lab::dump_json(report.at("aggregate"));
        } else if (c_trace->parsed()) {
            write_file(out / "trace.json", lab::dump_json(lab::run_trace(ctx, question)));
            std::cout << (out / "trace.json").string() << "\n";
        }
        return 0;
    } catch (const lab::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const lab::BackendError& e) {
        std::cerr << "backend error: " << e.what() << "\n";
        return 3;
    } catch (const lab::CapabilityError& e) {
        std::cerr << "capability error: " << e.what() << "\n";
        return 4;
    } catch (const lab::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 5;
    }
}
