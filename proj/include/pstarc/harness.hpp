#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pstarc/bank.hpp"
#include "pstarc/data.hpp"
#include "pstarc/metrics.hpp"
#include "pstarc/model.hpp"
#include "pstarc/tta.hpp"

namespace pstarc {

// JSON-facing description of a synthetic domain. Class means are either
// given explicitly or drawn on a sphere of mean_radius from mean_seed, so a
// config file fully determines the dataset. mean_seed defaults to seed;
// shifted domains of the same task keep mean_seed fixed while seed varies
// the drawn samples.
struct SynthSpec {
    std::size_t dim = 24;
    std::size_t classes = 6;
    std::size_t samples_per_class = 500;
    double class_sigma = 1.0;
    double mean_radius = 4.0;
    std::optional<Matrix> means;
    std::uint64_t seed = 0;
    std::optional<std::uint64_t> mean_seed;

    struct Shift {
        // Plane rotations (axis_a, axis_b, degrees), composed in order.
        std::vector<std::array<double, 3>> rotations;
        std::vector<double> translation;  // empty = zero
        double noise_sigma = 0.0;
    };
    std::optional<Shift> shift;
};

DomainSpec to_domain_spec(const SynthSpec& spec);
ShiftSpec to_shift_spec(const SynthSpec& spec);
// make_source_domain / make_shifted_domain depending on the shift block.
Dataset synth_dataset(const SynthSpec& spec);

struct TrainSourceConfig {
    std::string data;  // dataset csv
    std::vector<std::size_t> hidden = {64, 64};
    std::size_t feature_dim = 32;
    bool batch_norm = true;
    TrainConfig train;
};

struct GenBankConfig {
    std::string model;
    BankGenConfig gen;
    std::size_t validate_k = 5;
};

// Shared config for tta / ctta / ablations: paths plus the adaptation
// hyperparameters. `seeds` drives multi-seed ablation cells; single runs use
// `seed`.
struct ExperimentConfig {
    std::string model;
    std::string bank;
    std::vector<std::string> datasets;
    TtaConfig tta;
    std::uint64_t seed = 0;
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
};

void to_json(nlohmann::json& j, const SynthSpec& s);
void from_json(const nlohmann::json& j, SynthSpec& s);
void to_json(nlohmann::json& j, const TrainSourceConfig& c);
void from_json(const nlohmann::json& j, TrainSourceConfig& c);
void to_json(nlohmann::json& j, const GenBankConfig& c);
void from_json(const nlohmann::json& j, GenBankConfig& c);
void to_json(nlohmann::json& j, const TtaConfig& c);
void from_json(const nlohmann::json& j, TtaConfig& c);
void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

// FNV-1a over the canonical dump; stamped into summaries and run.json.
std::string config_digest(const nlohmann::json& config);

// Every command folder gets a run.json capturing {version, command, seed,
// config}; feeding it back through --config reproduces the run bitwise.
void write_run_json(const std::string& out_dir, const std::string& command, std::uint64_t seed,
                    const nlohmann::json& config);

// Stream construction shared by every adaptation entry point: the augment
// stream and the shuffle stream both derive from the run seed.
BatchStream make_stream(const Dataset& ds, const TtaConfig& cfg, std::uint64_t seed);

// Command bodies. Each writes its artifacts under out_dir and returns the
// headline JSON (also written to disk).
nlohmann::json run_synth(const SynthSpec& spec, const std::string& out_dir);
nlohmann::json run_train_source(const TrainSourceConfig& cfg, const std::string& out_dir);
nlohmann::json run_gen_bank(const GenBankConfig& cfg, const std::string& out_dir);
nlohmann::json run_tta_command(const ExperimentConfig& cfg, const std::string& out_dir);
nlohmann::json run_ctta_command(const ExperimentConfig& cfg, const std::string& out_dir);

// All 8 on/off combinations of {aug, attr, disp}; per combination, run_tta
// over cfg.seeds on fresh model copies, reporting mean/std accuracy and the
// distinct-class count diagnostic.
nlohmann::json ablate_losses(const ExperimentConfig& cfg, const std::string& out_dir);

nlohmann::json ablate_batch_size(const ExperimentConfig& cfg,
                                 const std::vector<std::size_t>& sizes,
                                 const std::string& out_dir);

// Buffer accounting: N x (d + C) scalars for a bank, the fixed reference
// constants for the published baseline formulas, and per-batch pass counts.
nlohmann::json memory_accounting(const FeatureBank* bank);

}  // namespace pstarc
