#include "pstarc/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "pstarc/json_util.hpp"
#include "pstarc/kernels.hpp"
#include "pstarc/version.hpp"

namespace pstarc {

namespace {

using nlohmann::json;

void write_json_file(const std::string& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot open " + path + " for writing");
    out << j.dump(2) << "\n";
}

std::string join_path(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw ConfigError("cannot create output directory " + dir + ": " + ec.message());
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

Dataset load_dataset_for(const SourceModel& model, const std::string& path) {
    Dataset ds = load_dataset(path);
    if (ds.dim() != model.input_dim || ds.classes != model.class_count)
        throw ConfigError(path + ": dataset (" + std::to_string(ds.dim()) + "d, " +
                          std::to_string(ds.classes) + " classes) does not match the model (" +
                          std::to_string(model.input_dim) + "d, " +
                          std::to_string(model.class_count) + " classes)");
    return ds;
}

}  // namespace

// ---------------------------------------------------------------------------
// config (de)serialization

void to_json(json& j, const SynthSpec& s) {
    j = json{{"dim", s.dim},
             {"classes", s.classes},
             {"samples_per_class", s.samples_per_class},
             {"class_sigma", s.class_sigma},
             {"mean_radius", s.mean_radius},
             {"seed", s.seed}};
    if (s.mean_seed) j["mean_seed"] = *s.mean_seed;
    if (s.means) j["means"] = matrix_to_json(*s.means);
    if (s.shift) {
        json rot = json::array();
        for (const auto& r : s.shift->rotations) rot.push_back({r[0], r[1], r[2]});
        j["shift"] = json{{"rotations", rot},
                          {"translation", s.shift->translation},
                          {"noise_sigma", s.shift->noise_sigma}};
    }
}

void from_json(const json& j, SynthSpec& s) {
    s = SynthSpec{};
    s.dim = j.value("dim", s.dim);
    s.classes = j.value("classes", s.classes);
    s.samples_per_class = j.value("samples_per_class", s.samples_per_class);
    s.class_sigma = j.value("class_sigma", s.class_sigma);
    s.mean_radius = j.value("mean_radius", s.mean_radius);
    s.seed = j.value("seed", s.seed);
    if (j.contains("mean_seed")) s.mean_seed = j["mean_seed"].get<std::uint64_t>();
    if (j.contains("means")) s.means = matrix_from_json(j["means"], "synth means");
    if (j.contains("shift") && !j["shift"].is_null()) {
        SynthSpec::Shift shift;
        const auto& sj = j["shift"];
        if (sj.contains("rotations"))
            for (const auto& r : sj["rotations"])
                shift.rotations.push_back({r[0].get<double>(), r[1].get<double>(),
                                           r[2].get<double>()});
        shift.translation = sj.value("translation", std::vector<double>{});
        shift.noise_sigma = sj.value("noise_sigma", 0.0);
        s.shift = std::move(shift);
    }
}

void to_json(json& j, const TrainSourceConfig& c) {
    j = json{{"data", c.data},
             {"hidden", c.hidden},
             {"feature_dim", c.feature_dim},
             {"batch_norm", c.batch_norm},
             {"epochs", c.train.epochs},
             {"lr", c.train.lr},
             {"momentum", c.train.momentum},
             {"label_smoothing", c.train.label_smoothing},
             {"batch_size", c.train.batch_size},
             {"seed", c.train.seed}};
}

void from_json(const json& j, TrainSourceConfig& c) {
    c = TrainSourceConfig{};
    c.data = j.value("data", std::string{});
    c.hidden = j.value("hidden", c.hidden);
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.batch_norm = j.value("batch_norm", c.batch_norm);
    c.train.epochs = j.value("epochs", c.train.epochs);
    c.train.lr = j.value("lr", c.train.lr);
    c.train.momentum = j.value("momentum", c.train.momentum);
    c.train.label_smoothing = j.value("label_smoothing", c.train.label_smoothing);
    c.train.batch_size = j.value("batch_size", c.train.batch_size);
    c.train.seed = j.value("seed", c.train.seed);
}

void to_json(json& j, const GenBankConfig& c) {
    j = json{{"model", c.model},
             {"n_c", c.gen.n_c},
             {"steps", c.gen.steps},
             {"lr", c.gen.lr},
             {"beta", c.gen.beta},
             {"seed", c.gen.seed},
             {"eps", c.gen.eps},
             {"validate_k", c.validate_k}};
}

void from_json(const json& j, GenBankConfig& c) {
    c = GenBankConfig{};
    c.model = j.value("model", std::string{});
    c.gen.n_c = j.value("n_c", c.gen.n_c);
    c.gen.steps = j.value("steps", c.gen.steps);
    c.gen.lr = j.value("lr", c.gen.lr);
    c.gen.beta = j.value("beta", c.gen.beta);
    c.gen.seed = j.value("seed", c.gen.seed);
    c.gen.eps = j.value("eps", c.gen.eps);
    c.validate_k = j.value("validate_k", c.validate_k);
}

void to_json(json& j, const TtaConfig& c) {
    j = json{{"K", c.K},
             {"lambda", c.lambda_disp},
             {"w_aug", c.w_aug},
             {"w_attr", c.w_attr},
             {"lr", c.lr},
             {"momentum", c.momentum},
             {"batch_size", c.batch_size},
             {"exclude_nearest", c.exclude_nearest},
             {"eps", c.eps},
             {"aug_noise_sigma", c.aug_noise_sigma},
             {"aug_dropout", c.aug_dropout}};
}

void from_json(const json& j, TtaConfig& c) {
    c = TtaConfig{};
    c.K = j.value("K", c.K);
    c.lambda_disp = j.value("lambda", c.lambda_disp);
    c.w_aug = j.value("w_aug", c.w_aug);
    c.w_attr = j.value("w_attr", c.w_attr);
    c.lr = j.value("lr", c.lr);
    c.momentum = j.value("momentum", c.momentum);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.exclude_nearest = j.value("exclude_nearest", c.exclude_nearest);
    c.eps = j.value("eps", c.eps);
    c.aug_noise_sigma = j.value("aug_noise_sigma", c.aug_noise_sigma);
    c.aug_dropout = j.value("aug_dropout", c.aug_dropout);
}

void to_json(json& j, const ExperimentConfig& c) {
    j = json{{"model", c.model},
             {"bank", c.bank},
             {"datasets", c.datasets},
             {"tta", c.tta},
             {"seed", c.seed},
             {"seeds", c.seeds}};
}

void from_json(const json& j, ExperimentConfig& c) {
    c = ExperimentConfig{};
    c.model = j.value("model", std::string{});
    c.bank = j.value("bank", std::string{});
    c.datasets = j.value("datasets", std::vector<std::string>{});
    if (j.contains("data")) c.datasets.push_back(j["data"].get<std::string>());
    if (j.contains("tta")) c.tta = j["tta"].get<TtaConfig>();
    c.seed = j.value("seed", c.seed);
    c.seeds = j.value("seeds", c.seeds);
}

std::string config_digest(const json& config) {
    const std::string dump = config.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : dump) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void write_run_json(const std::string& out_dir, const std::string& command, std::uint64_t seed,
                    const json& config) {
    json j;
    j["version"] = kVersion;
    j["command"] = command;
    j["seed"] = seed;
    j["config"] = config;
    write_json_file(join_path(out_dir, "run.json"), j);
}

BatchStream make_stream(const Dataset& ds, const TtaConfig& cfg, std::uint64_t seed) {
    return BatchStream(ds, cfg.batch_size,
                       AugmentConfig(cfg.aug_noise_sigma, cfg.aug_dropout, derive_seed(seed, 5)),
                       seed);
}

// ---------------------------------------------------------------------------
// synth

DomainSpec to_domain_spec(const SynthSpec& spec) {
    DomainSpec d;
    d.input_dim = spec.dim;
    d.class_count = spec.classes;
    d.samples_per_class = spec.samples_per_class;
    d.class_sigma = spec.class_sigma;
    d.seed = spec.seed;
    if (spec.means) {
        d.class_means = *spec.means;
    } else {
        // Means drawn on the sphere of mean_radius; the geometry stream is
        // independent of the sampling stream.
        Rng rng(derive_seed(spec.mean_seed.value_or(spec.seed), 4));
        d.class_means = Matrix(spec.classes, spec.dim);
        for (std::size_t c = 0; c < spec.classes; ++c) {
            double norm = 0.0;
            for (std::size_t k = 0; k < spec.dim; ++k) {
                d.class_means(c, k) = rng.normal();
                norm += d.class_means(c, k) * d.class_means(c, k);
            }
            norm = std::sqrt(norm);
            if (norm < 1e-12) norm = 1e-12;
            for (std::size_t k = 0; k < spec.dim; ++k)
                d.class_means(c, k) *= spec.mean_radius / norm;
        }
    }
    return d;
}

ShiftSpec to_shift_spec(const SynthSpec& spec) {
    if (!spec.shift) throw ConfigError("to_shift_spec: spec has no shift block");
    ShiftSpec s;
    s.rotation = Matrix::identity(spec.dim);
    for (const auto& r : spec.shift->rotations) {
        const Matrix plane = plane_rotation(spec.dim, static_cast<std::size_t>(r[0]),
                                            static_cast<std::size_t>(r[1]), r[2]);
        Matrix composed(spec.dim, spec.dim);
        kernels::matmul_nn(composed.data(), plane.data(), s.rotation.data(), spec.dim, spec.dim,
                           spec.dim);
        s.rotation = std::move(composed);
    }
    s.translation = Matrix(1, spec.dim);
    if (!spec.shift->translation.empty()) {
        if (spec.shift->translation.size() != spec.dim)
            throw ConfigError("shift translation length " +
                              std::to_string(spec.shift->translation.size()) + " != dim " +
                              std::to_string(spec.dim));
        for (std::size_t k = 0; k < spec.dim; ++k)
            s.translation(0, k) = spec.shift->translation[k];
    }
    s.noise_sigma = spec.shift->noise_sigma;
    return s;
}

Dataset synth_dataset(const SynthSpec& spec) {
    const DomainSpec d = to_domain_spec(spec);
    if (spec.shift) return make_shifted_domain(d, to_shift_spec(spec));
    return make_source_domain(d);
}

json run_synth(const SynthSpec& spec, const std::string& out_dir) {
    ensure_dir(out_dir);
    const Dataset ds = synth_dataset(spec);
    json config = spec;
    json manifest_extra;
    manifest_extra["seed"] = spec.seed;
    manifest_extra["spec"] = config;
    save_dataset(ds, join_path(out_dir, "dataset.csv"), manifest_extra.dump());
    write_run_json(out_dir, "synth", spec.seed, config);

    json out;
    out["dataset"] = join_path(out_dir, "dataset.csv");
    out["count"] = ds.size();
    out["dim"] = ds.dim();
    out["classes"] = ds.classes;
    out["shifted"] = spec.shift.has_value();
    return out;
}

// ---------------------------------------------------------------------------
// train-source

json run_train_source(const TrainSourceConfig& cfg, const std::string& out_dir) {
    ensure_dir(out_dir);
    const Dataset ds = load_dataset(cfg.data);
    SourceModel model = make_mlp_model(ds.dim(), cfg.hidden, cfg.feature_dim, ds.classes,
                                       cfg.batch_norm, cfg.train.seed);
    const std::vector<double> losses = train_source(model, ds, cfg.train);
    const double train_acc = eval_accuracy(model, ds);
    save_model(model, join_path(out_dir, "model.json"));

    json config = cfg;
    write_run_json(out_dir, "train-source", cfg.train.seed, config);

    json out;
    out["model"] = join_path(out_dir, "model.json");
    out["train_acc"] = train_acc;
    out["epoch_losses"] = losses;
    out["config_digest"] = config_digest(config);
    write_json_file(join_path(out_dir, "train_summary.json"), out);
    return out;
}

// ---------------------------------------------------------------------------
// gen-bank

json run_gen_bank(const GenBankConfig& cfg, const std::string& out_dir) {
    ensure_dir(out_dir);
    SourceModel model = load_model(cfg.model);
    const FeatureBank bank =
        generate_feature_bank(model.classifier, model.class_count, model.feature_dim, cfg.gen);
    save_bank(bank, join_path(out_dir, "bank.json"));
    const json summary = bank_summary(bank);
    write_json_file(join_path(out_dir, "bank_summary.json"), summary);

    json config = cfg;
    write_run_json(out_dir, "gen-bank", cfg.gen.seed, config);

    const BankValidation validation = validate_bank(bank, cfg.validate_k);
    if (!validation.ok)
        throw BankDeficiencyError("gen-bank: " + validation.describe() +
                                  " (bank written to " + join_path(out_dir, "bank.json") + ")");
    json out;
    out["bank"] = join_path(out_dir, "bank.json");
    out["summary"] = summary;
    return out;
}

// ---------------------------------------------------------------------------
// tta / ctta

json run_tta_command(const ExperimentConfig& cfg, const std::string& out_dir) {
    ensure_dir(out_dir);
    if (cfg.datasets.size() != 1)
        throw ConfigError("tta: exactly one dataset expected, got " +
                          std::to_string(cfg.datasets.size()));
    SourceModel model = load_model(cfg.model);
    const FeatureBank bank = load_bank(cfg.bank);
    const Dataset ds = load_dataset_for(model, cfg.datasets[0]);

    const double source_only = eval_accuracy(model, ds);
    TtaSession session(model, bank, cfg.tta);
    BatchStream stream = make_stream(ds, cfg.tta, cfg.seed);
    const MetricsRecord record = session.run_tta(stream);

    json config = cfg;
    const std::string digest = config_digest(config);
    write_metrics_csv(record, join_path(out_dir, "metrics.csv"));
    json summary = metrics_summary_json(record, digest, cfg.seed);
    summary["source_only_acc"] = source_only;
    write_json_file(join_path(out_dir, "summary.json"), summary);
    write_run_json(out_dir, "tta", cfg.seed, config);
    return summary;
}

json run_ctta_command(const ExperimentConfig& cfg, const std::string& out_dir) {
    ensure_dir(out_dir);
    if (cfg.datasets.empty()) throw ConfigError("ctta: need at least one dataset");
    SourceModel model = load_model(cfg.model);
    const FeatureBank bank = load_bank(cfg.bank);

    std::vector<Dataset> domains;
    std::vector<double> source_only;
    domains.reserve(cfg.datasets.size());
    for (const auto& path : cfg.datasets) {
        domains.push_back(load_dataset_for(model, path));
        source_only.push_back(eval_accuracy(model, domains.back()));
    }

    TtaSession session(model, bank, cfg.tta);
    std::vector<BatchStream> streams;
    streams.reserve(domains.size());
    for (std::size_t i = 0; i < domains.size(); ++i)
        streams.push_back(make_stream(domains[i], cfg.tta, derive_seed(cfg.seed, 20 + i)));
    std::vector<BatchStream*> stream_ptrs;
    for (auto& s : streams) stream_ptrs.push_back(&s);
    const std::vector<MetricsRecord> records = session.run_ctta(stream_ptrs);

    json config = cfg;
    const std::string digest = config_digest(config);
    json sequence;
    sequence["domains"] = json::array();
    double acc_sum = 0.0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const std::string tag = "domain" + std::to_string(i);
        write_metrics_csv(records[i], join_path(out_dir, "metrics_" + tag + ".csv"));
        json s = metrics_summary_json(records[i], digest, cfg.seed);
        s["source_only_acc"] = source_only[i];
        s["dataset"] = cfg.datasets[i];
        write_json_file(join_path(out_dir, "summary_" + tag + ".json"), s);
        sequence["domains"].push_back(s);
        acc_sum += records[i].total_acc;
    }
    sequence["sequence_avg_total_acc"] = acc_sum / static_cast<double>(records.size());
    sequence["config_digest"] = digest;
    sequence["seed"] = cfg.seed;
    write_json_file(join_path(out_dir, "sequence_summary.json"), sequence);
    write_run_json(out_dir, "ctta", cfg.seed, config);
    return sequence;
}

// ---------------------------------------------------------------------------
// ablations

namespace {

struct CellResult {
    std::vector<double> total_acc;
    std::vector<double> distinct;
};

CellResult run_cells(const SourceModel& base_model, const FeatureBank& bank, const Dataset& ds,
                     const TtaConfig& tta, const std::vector<std::uint64_t>& seeds) {
    CellResult result;
    for (const std::uint64_t seed : seeds) {
        SourceModel model = base_model;  // fresh copy per cell
        TtaSession session(model, bank, tta);
        BatchStream stream = make_stream(ds, tta, seed);
        const MetricsRecord record = session.run_tta(stream);
        result.total_acc.push_back(record.total_acc);
        result.distinct.push_back(static_cast<double>(record.distinct_predicted_classes));
    }
    return result;
}

}  // namespace

json ablate_losses(const ExperimentConfig& cfg, const std::string& out_dir) {
    ensure_dir(out_dir);
    if (cfg.datasets.size() != 1) throw ConfigError("ablate-losses: exactly one dataset expected");
    SourceModel base_model = load_model(cfg.model);
    const FeatureBank bank = load_bank(cfg.bank);
    const Dataset ds = load_dataset_for(base_model, cfg.datasets[0]);
    const double source_only = eval_accuracy(base_model, ds);

    json rows = json::array();
    for (int mask = 0; mask < 8; ++mask) {
        const bool use_aug = mask & 1, use_attr = mask & 2, use_disp = mask & 4;
        TtaConfig tta = cfg.tta;
        tta.w_aug = use_aug ? cfg.tta.w_aug : 0.0;
        tta.w_attr = use_attr ? cfg.tta.w_attr : 0.0;
        tta.lambda_disp = use_disp ? cfg.tta.lambda_disp : 0.0;
        const CellResult cell = run_cells(base_model, bank, ds, tta, cfg.seeds);
        rows.push_back({{"aug", use_aug},
                        {"attr", use_attr},
                        {"disp", use_disp},
                        {"mean_acc", mean_of(cell.total_acc)},
                        {"std_acc", std_of(cell.total_acc)},
                        {"mean_distinct_classes", mean_of(cell.distinct)},
                        {"acc_per_seed", cell.total_acc}});
    }

    json config = cfg;
    json out;
    out["source_only_acc"] = source_only;
    out["seeds"] = cfg.seeds;
    out["rows"] = rows;
    out["config_digest"] = config_digest(config);
    write_json_file(join_path(out_dir, "ablate_losses.json"), out);
    write_run_json(out_dir, "ablate-losses", cfg.seed, config);
    return out;
}

json ablate_batch_size(const ExperimentConfig& cfg, const std::vector<std::size_t>& sizes,
                       const std::string& out_dir) {
    ensure_dir(out_dir);
    if (cfg.datasets.size() != 1) throw ConfigError("ablate-batch: exactly one dataset expected");
    SourceModel base_model = load_model(cfg.model);
    const FeatureBank bank = load_bank(cfg.bank);
    const Dataset ds = load_dataset_for(base_model, cfg.datasets[0]);

    json rows = json::array();
    std::vector<double> means;
    for (const std::size_t size : sizes) {
        TtaConfig tta = cfg.tta;
        tta.batch_size = size;
        const CellResult cell = run_cells(base_model, bank, ds, tta, cfg.seeds);
        means.push_back(mean_of(cell.total_acc));
        rows.push_back({{"batch_size", size},
                        {"mean_acc", mean_of(cell.total_acc)},
                        {"std_acc", std_of(cell.total_acc)},
                        {"acc_per_seed", cell.total_acc}});
    }

    json config = cfg;
    json out;
    out["sizes"] = sizes;
    out["rows"] = rows;
    // Monotone-trend statistic when both endpoints of the usual grid exist.
    const auto it8 = std::find(sizes.begin(), sizes.end(), std::size_t{8});
    const auto it64 = std::find(sizes.begin(), sizes.end(), std::size_t{64});
    if (it8 != sizes.end() && it64 != sizes.end())
        out["acc64_minus_acc8"] = means[static_cast<std::size_t>(it64 - sizes.begin())] -
                                  means[static_cast<std::size_t>(it8 - sizes.begin())];
    out["config_digest"] = config_digest(config);
    write_json_file(join_path(out_dir, "ablate_batch.json"), out);
    write_run_json(out_dir, "ablate-batch", cfg.seed, config);
    return out;
}

// ---------------------------------------------------------------------------
// memory accounting

json memory_accounting(const FeatureBank* bank) {
    json out;
    if (bank) {
        const std::size_t n = bank->size(), d = bank->feature_dim(), c = bank->class_count();
        out["bank"] = {{"N", n},
                       {"d", d},
                       {"C", c},
                       {"buffer_scalars", n * (d + c)},
                       {"buffer_millions", static_cast<double>(n * (d + c)) / 1e6}};
    }
    // Reference constants for the 12-class / 256-dim benchmark shape.
    out["reference"] = {
        {"pstarc",
         {{"formula", "240*(256+12)"},
          {"buffer_scalars", 240 * (256 + 12)},
          {"note", "published complexity tables quote 0.03M for this buffer; the formula "
                   "gives 64320 scalars (~0.064M) and the counting convention behind the "
                   "smaller figure is unstated"}}},
        {"adacontrast",
         {{"formula", "16384*(256+1)+1024*(256+12)"},
          {"buffer_scalars", 16384 * (256 + 1) + 1024 * (256 + 12)}}},
        {"source_proxy_tta",
         {{"formula", "12*25*112*112"}, {"buffer_scalars", 12 * 25 * 112 * 112}}},
    };
    out["passes_per_batch"] = {
        {"pstarc", {{"forward", 2}, {"backward", 1}}},
        {"adacontrast", {{"forward", 3}, {"backward", 1}}},
        {"source_proxy_tta", {{"forward", 3}, {"backward", 1}}},
        {"c_sfda", {{"forward", 13}, {"backward", 1}}},
    };
    return out;
}

}  // namespace pstarc
