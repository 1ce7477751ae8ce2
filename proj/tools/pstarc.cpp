// pstarc command-line driver: synthetic-domain generation, source training,
// pseudo-source bank synthesis, online adaptation, ablations and accounting.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include <nlohmann/json.hpp>

#include "pstarc/harness.hpp"
#include "pstarc/version.hpp"

namespace {

using nlohmann::json;

// --config accepts either a bare config object or a previously emitted
// run.json (detected by its command/config envelope).
json load_config_file(const std::string& path, const std::string& command) {
    std::ifstream in(path);
    if (!in) throw pstarc::ConfigError("cannot open config file " + path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw pstarc::ParseError("invalid JSON in " + path);
    if (j.contains("command") && j.contains("config")) {
        if (j["command"].get<std::string>() != command)
            throw pstarc::ConfigError("config file " + path + " was emitted by '" +
                                      j["command"].get<std::string>() + "', not '" + command +
                                      "'");
        return j["config"];
    }
    return j;
}

// flag > config > PSTARC_SEED > 0
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag_seed,
                           const json& config, const char* key = "seed") {
    if (flag_seed) return *flag_seed;
    if (config.contains(key)) return config[key].get<std::uint64_t>();
    if (const char* env = std::getenv("PSTARC_SEED")) return std::strtoull(env, nullptr, 10);
    return 0;
}

struct CommonFlags {
    std::string config_path;
    std::string out_dir = "out";
    std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
    cmd->add_option("--config", flags.config_path, "JSON config file (or a run.json)");
    cmd->add_option("--out", flags.out_dir, "output directory");
    cmd->add_option_function<std::uint64_t>(
        "--seed", [&flags](std::uint64_t v) { flags.seed = v; }, "seed override");
}

json config_or_empty(const CommonFlags& flags, const std::string& command) {
    if (flags.config_path.empty()) return json::object();
    return load_config_file(flags.config_path, command);
}

void report_error(const pstarc::Error& e, const std::string& out_dir) {
    json err;
    err["error"] = {{"kind", e.kind()}, {"message", e.what()}};
    std::cerr << err.dump() << "\n";
    std::error_code ec;
    if (!out_dir.empty() && std::filesystem::exists(out_dir, ec)) {
        std::ofstream out(std::filesystem::path(out_dir) / "error.json");
        if (out) out << err.dump(2) << "\n";
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fully test-time adaptation with a synthesized pseudo-source feature bank"};
    app.set_version_flag("--version", pstarc::kVersion);
    app.require_subcommand(1);

    CommonFlags synth_flags, train_flags, bank_flags, tta_flags, ctta_flags, abl_flags,
        abb_flags, mem_flags;

    auto* synth = app.add_subcommand("synth", "generate a synthetic domain dataset");
    add_common(synth, synth_flags);

    auto* train = app.add_subcommand("train-source", "train the source model on a dataset");
    add_common(train, train_flags);
    std::string train_data;
    train->add_option("--data", train_data, "source dataset csv");

    auto* genbank = app.add_subcommand("gen-bank", "synthesize the pseudo-source feature bank");
    add_common(genbank, bank_flags);
    std::string bank_model;
    genbank->add_option("--model", bank_model, "model json");

    auto* tta = app.add_subcommand("tta", "adapt online over one test dataset");
    add_common(tta, tta_flags);
    std::string tta_model, tta_bank, tta_data;
    tta->add_option("--model", tta_model, "model json");
    tta->add_option("--bank", tta_bank, "bank json");
    tta->add_option("--data", tta_data, "test dataset csv");

    auto* ctta = app.add_subcommand("ctta", "adapt across an ordered domain sequence");
    add_common(ctta, ctta_flags);
    std::string ctta_model, ctta_bank;
    std::vector<std::string> ctta_data;
    ctta->add_option("--model", ctta_model, "model json");
    ctta->add_option("--bank", ctta_bank, "bank json");
    ctta->add_option("--data", ctta_data, "ordered test dataset csvs");

    auto* ablate_l = app.add_subcommand("ablate-losses", "loss on/off grid over seeds");
    add_common(ablate_l, abl_flags);

    auto* ablate_b = app.add_subcommand("ablate-batch", "batch-size sweep over seeds");
    add_common(ablate_b, abb_flags);
    std::vector<std::size_t> sizes = {8, 16, 32, 64, 128};
    ablate_b->add_option("--sizes", sizes, "batch sizes to sweep");

    auto* mem = app.add_subcommand("mem-report", "buffer accounting and pass counts");
    add_common(mem, mem_flags);
    std::string mem_bank;
    mem->add_option("--bank", mem_bank, "bank json (optional)");

    CLI11_PARSE(app, argc, argv);

    std::string active_out = "out";
    try {
        if (synth->parsed()) {
            active_out = synth_flags.out_dir;
            json config = config_or_empty(synth_flags, "synth");
            pstarc::SynthSpec spec = config.get<pstarc::SynthSpec>();
            spec.seed = resolve_seed(synth_flags.seed, config);
            std::cout << pstarc::run_synth(spec, active_out).dump(2) << "\n";
        } else if (train->parsed()) {
            active_out = train_flags.out_dir;
            json config = config_or_empty(train_flags, "train-source");
            pstarc::TrainSourceConfig cfg = config.get<pstarc::TrainSourceConfig>();
            if (!train_data.empty()) cfg.data = train_data;
            cfg.train.seed = resolve_seed(train_flags.seed, config);
            if (cfg.data.empty()) throw pstarc::ConfigError("train-source: --data is required");
            std::cout << pstarc::run_train_source(cfg, active_out).dump(2) << "\n";
        } else if (genbank->parsed()) {
            active_out = bank_flags.out_dir;
            json config = config_or_empty(bank_flags, "gen-bank");
            pstarc::GenBankConfig cfg = config.get<pstarc::GenBankConfig>();
            if (!bank_model.empty()) cfg.model = bank_model;
            cfg.gen.seed = resolve_seed(bank_flags.seed, config);
            if (cfg.model.empty()) throw pstarc::ConfigError("gen-bank: --model is required");
            std::cout << pstarc::run_gen_bank(cfg, active_out).dump(2) << "\n";
        } else if (tta->parsed()) {
            active_out = tta_flags.out_dir;
            json config = config_or_empty(tta_flags, "tta");
            pstarc::ExperimentConfig cfg = config.get<pstarc::ExperimentConfig>();
            if (!tta_model.empty()) cfg.model = tta_model;
            if (!tta_bank.empty()) cfg.bank = tta_bank;
            if (!tta_data.empty()) cfg.datasets = {tta_data};
            cfg.seed = resolve_seed(tta_flags.seed, config);
            std::cout << pstarc::run_tta_command(cfg, active_out).dump(2) << "\n";
        } else if (ctta->parsed()) {
            active_out = ctta_flags.out_dir;
            json config = config_or_empty(ctta_flags, "ctta");
            pstarc::ExperimentConfig cfg = config.get<pstarc::ExperimentConfig>();
            if (!ctta_model.empty()) cfg.model = ctta_model;
            if (!ctta_bank.empty()) cfg.bank = ctta_bank;
            if (!ctta_data.empty()) cfg.datasets = ctta_data;
            cfg.seed = resolve_seed(ctta_flags.seed, config);
            std::cout << pstarc::run_ctta_command(cfg, active_out).dump(2) << "\n";
        } else if (ablate_l->parsed()) {
            active_out = abl_flags.out_dir;
            json config = config_or_empty(abl_flags, "ablate-losses");
            pstarc::ExperimentConfig cfg = config.get<pstarc::ExperimentConfig>();
            cfg.seed = resolve_seed(abl_flags.seed, config);
            std::cout << pstarc::ablate_losses(cfg, active_out).dump(2) << "\n";
        } else if (ablate_b->parsed()) {
            active_out = abb_flags.out_dir;
            json config = config_or_empty(abb_flags, "ablate-batch");
            pstarc::ExperimentConfig cfg = config.get<pstarc::ExperimentConfig>();
            cfg.seed = resolve_seed(abb_flags.seed, config);
            std::cout << pstarc::ablate_batch_size(cfg, sizes, active_out).dump(2) << "\n";
        } else if (mem->parsed()) {
            active_out = mem_flags.out_dir;
            json config = config_or_empty(mem_flags, "mem-report");
            if (mem_bank.empty() && config.contains("bank"))
                mem_bank = config["bank"].get<std::string>();
            json report;
            if (!mem_bank.empty()) {
                const pstarc::FeatureBank bank = pstarc::load_bank(mem_bank);
                report = pstarc::memory_accounting(&bank);
            } else {
                report = pstarc::memory_accounting(nullptr);
            }
            std::filesystem::create_directories(active_out);
            std::ofstream out(std::filesystem::path(active_out) / "mem_report.json");
            out << report.dump(2) << "\n";
            json run_config;
            run_config["bank"] = mem_bank;
            pstarc::write_run_json(active_out, "mem-report",
                                   resolve_seed(mem_flags.seed, config), run_config);
            std::cout << report.dump(2) << "\n";
        }
    } catch (const pstarc::Error& e) {
        report_error(e, active_out);
        return 1;
    } catch (const std::exception& e) {
        json err;
        err["error"] = {{"kind", "internal"}, {"message", e.what()}};
        std::cerr << err.dump() << "\n";
        return 1;
    }
    return 0;
}
