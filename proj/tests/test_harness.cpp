#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "pstarc/harness.hpp"
#include "pstarc/version.hpp"

using namespace pstarc;
using nlohmann::json;

namespace {

std::string temp_dir(const char* name) {
    const auto dir = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir.string();
}

SynthSpec small_spec(std::uint64_t seed) {
    SynthSpec spec;
    spec.dim = 6;
    spec.classes = 3;
    spec.samples_per_class = 40;
    spec.mean_radius = 3.0;
    spec.seed = seed;
    return spec;
}

}  // namespace

TEST_SUITE_BEGIN("harness");

TEST_CASE("memory accounting reproduces the reference constants") {
    const json report = memory_accounting(nullptr);
    CHECK(report["reference"]["pstarc"]["buffer_scalars"].get<long long>() == 64320);
    CHECK(report["reference"]["adacontrast"]["buffer_scalars"].get<long long>() == 4485120);
    CHECK(report["passes_per_batch"]["pstarc"]["forward"].get<int>() == 2);
    CHECK(report["passes_per_batch"]["pstarc"]["backward"].get<int>() == 1);

    // A loaded bank reports N x (d + C); an empty bank reports zero.
    FeatureBank bank;
    bank.features = Matrix(240, 256);
    bank.scores = Matrix(240, 12);
    const json with_bank = memory_accounting(&bank);
    CHECK(with_bank["bank"]["buffer_scalars"].get<long long>() == 64320);

    FeatureBank empty;
    empty.features = Matrix(0, 256);
    empty.scores = Matrix(0, 12);
    CHECK(memory_accounting(&empty)["bank"]["buffer_scalars"].get<long long>() == 0);
}

TEST_CASE("config digest is stable and content-sensitive") {
    json a = {{"x", 1}, {"y", "z"}};
    json b = {{"x", 2}, {"y", "z"}};
    CHECK(config_digest(a) == config_digest(a));
    CHECK(config_digest(a) != config_digest(b));
    CHECK(config_digest(a).size() == 16);
}

TEST_CASE("synth spec round-trips through json") {
    SynthSpec spec = small_spec(5);
    SynthSpec::Shift shift;
    shift.rotations.push_back({0, 1, 30.0});
    shift.translation = {1.0, 0.0, 0.0, 0.0, 0.0, 0.0};
    shift.noise_sigma = 0.2;
    spec.shift = shift;

    const json j = spec;
    const SynthSpec back = j.get<SynthSpec>();
    CHECK(back.dim == spec.dim);
    CHECK(back.classes == spec.classes);
    CHECK(back.seed == spec.seed);
    REQUIRE(back.shift.has_value());
    CHECK(back.shift->rotations.size() == 1);
    CHECK(back.shift->noise_sigma == 0.2);
    CHECK(synth_dataset(back).X == synth_dataset(spec).X);
}

TEST_CASE("experiment config round-trips through json") {
    ExperimentConfig cfg;
    cfg.model = "m.json";
    cfg.bank = "b.json";
    cfg.datasets = {"d1.csv", "d2.csv"};
    cfg.tta.K = 3;
    cfg.tta.lambda_disp = 0.5;
    cfg.tta.batch_size = 32;
    cfg.seed = 9;
    const json j = cfg;
    const ExperimentConfig back = j.get<ExperimentConfig>();
    CHECK(back.model == cfg.model);
    CHECK(back.datasets == cfg.datasets);
    CHECK(back.tta.K == 3);
    CHECK(back.tta.lambda_disp == 0.5);
    CHECK(back.tta.batch_size == 32);
    CHECK(back.seed == 9);
}

TEST_CASE("run_synth writes dataset, manifest and run.json") {
    const std::string dir = temp_dir("pstarc_test_synth");
    const json out = run_synth(small_spec(7), dir);
    CHECK(std::filesystem::exists(dir + "/dataset.csv"));
    CHECK(std::filesystem::exists(dir + "/dataset.json"));
    CHECK(std::filesystem::exists(dir + "/run.json"));
    CHECK(out["count"].get<std::size_t>() == 120);

    std::ifstream run_in(dir + "/run.json");
    const json run = json::parse(run_in);
    CHECK(run["command"] == "synth");
    CHECK(run["version"] == kVersion);
    CHECK(run["config"]["classes"].get<std::size_t>() == 3);

    const Dataset ds = load_dataset(dir + "/dataset.csv");
    CHECK(ds.classes == 3);
    CHECK(ds.size() == 120);
    std::filesystem::remove_all(dir);
}

TEST_CASE("full pipeline: train, bank, tta, rerun from run.json is bitwise identical") {
    const std::string dir = temp_dir("pstarc_test_pipeline");
    run_synth(small_spec(11), dir + "/src");

    SynthSpec target = small_spec(11);
    target.seed = 12;
    SynthSpec::Shift shift;
    shift.rotations.push_back({0, 1, 25.0});
    shift.noise_sigma = 0.3;
    target.shift = shift;
    run_synth(target, dir + "/tgt");

    TrainSourceConfig train;
    train.data = dir + "/src/dataset.csv";
    train.hidden = {16};
    train.feature_dim = 8;
    train.train.epochs = 4;
    train.train.seed = 1;
    const json train_out = run_train_source(train, dir + "/model");
    CHECK(train_out["train_acc"].get<double>() > 0.5);

    GenBankConfig gen;
    gen.model = dir + "/model/model.json";
    gen.gen.n_c = 10;
    gen.gen.seed = 2;
    const json bank_out = run_gen_bank(gen, dir + "/bank");
    CHECK(std::filesystem::exists(dir + "/bank/bank.json"));
    CHECK(std::filesystem::exists(dir + "/bank/bank_summary.json"));

    ExperimentConfig exp;
    exp.model = dir + "/model/model.json";
    exp.bank = dir + "/bank/bank.json";
    exp.datasets = {dir + "/tgt/dataset.csv"};
    exp.tta.batch_size = 16;
    exp.seed = 3;
    const json tta_out = run_tta_command(exp, dir + "/tta1");
    CHECK(std::filesystem::exists(dir + "/tta1/metrics.csv"));

    // Re-run from the emitted run.json into a second directory.
    std::ifstream run_in(dir + "/tta1/run.json");
    const json run = json::parse(run_in);
    ExperimentConfig replay = run["config"].get<ExperimentConfig>();
    replay.seed = run["seed"].get<std::uint64_t>();
    run_tta_command(replay, dir + "/tta2");

    std::ifstream a(dir + "/tta1/metrics.csv"), b(dir + "/tta2/metrics.csv");
    const std::string ca((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    const std::string cb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(ca == cb);
    CHECK(!ca.empty());

    // Summary invariants: csv row count = batches; totals recomputable.
    std::ifstream sin(dir + "/tta1/summary.json");
    const json summary = json::parse(sin);
    std::size_t lines = 0;
    for (char ch : ca)
        if (ch == '\n') ++lines;
    CHECK(lines - 1 == summary["batches"].get<std::size_t>());  // minus header

    // The final cum_acc column equals the summary's total accuracy.
    const double last_cum = std::stod(ca.substr(ca.rfind(',') + 1));
    CHECK(last_cum == doctest::Approx(summary["total_acc"].get<double>()).epsilon(1e-12));
    std::filesystem::remove_all(dir);
}

TEST_CASE("tta command rejects a dataset that does not match the model") {
    const std::string dir = temp_dir("pstarc_test_mismatch");
    run_synth(small_spec(21), dir + "/src");
    SynthSpec wide = small_spec(22);
    wide.dim = 9;  // model below is trained on 6 dims
    run_synth(wide, dir + "/wide");

    TrainSourceConfig train;
    train.data = dir + "/src/dataset.csv";
    train.hidden = {8};
    train.feature_dim = 4;
    train.train.epochs = 1;
    run_train_source(train, dir + "/model");
    GenBankConfig gen;
    gen.model = dir + "/model/model.json";
    gen.gen.n_c = 10;
    run_gen_bank(gen, dir + "/bank");

    ExperimentConfig exp;
    exp.model = dir + "/model/model.json";
    exp.bank = dir + "/bank/bank.json";
    exp.datasets = {dir + "/wide/dataset.csv"};
    exp.tta.batch_size = 8;
    CHECK_THROWS_AS(run_tta_command(exp, dir + "/tta"), ConfigError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("metrics csv header and prefix property") {
    MetricsRecord record;
    BatchRow r1;
    r1.batch_index = 0;
    r1.seen = 4;
    r1.batch_acc = 0.5;
    r1.cum_acc = 0.5;
    BatchRow r2;
    r2.batch_index = 1;
    r2.seen = 6;
    r2.batch_acc = 1.0;
    r2.cum_acc = (0.5 * 4 + 1.0 * 2) / 6.0;
    record.rows = {r1, r2};
    const std::string path =
        (std::filesystem::temp_directory_path() / "pstarc_test_metrics.csv").string();
    write_metrics_csv(record, path);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header ==
          "batch,seen,tau,low_frac,loss_aug,loss_attr,loss_disp,loss_total,batch_acc,cum_acc");
    std::filesystem::remove(path);
}

TEST_SUITE_END();
