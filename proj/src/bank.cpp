#include "pstarc/bank.hpp"

#include <cmath>
#include <fstream>

#include "pstarc/json_util.hpp"
#include "pstarc/kernels.hpp"

namespace pstarc {

namespace {
using nlohmann::json;
constexpr int kBankFormatVersion = 1;

// Derives labels, unit-norm features and partitions from features + scores.
void finalize_bank(FeatureBank& bank) {
    bank.labels = argmax_rows(bank.scores);
    bank.normalized = Matrix(bank.features.rows(), bank.features.cols());
    for (std::size_t i = 0; i < bank.features.rows(); ++i) {
        double norm = std::sqrt(kernels::active_ops().dot(bank.features.row(i),
                                                          bank.features.row(i),
                                                          bank.features.cols()));
        if (norm < 1e-12) norm = 1e-12;
        kernels::active_ops().scale(bank.normalized.row(i), bank.features.row(i), 1.0 / norm,
                                    bank.features.cols());
    }
    bank.partitions.assign(bank.class_count(), {});
    for (std::size_t i = 0; i < bank.labels.size(); ++i)
        bank.partitions[static_cast<std::size_t>(bank.labels[i])].push_back(i);
}

}  // namespace

NodeId loss_ent_node(Tape& tape, const Classifier& classifier, NodeId features, double eps) {
    const HeadGraph head = build_classifier_graph(tape, classifier, features);
    const NodeId plogp = tape.elementwise_mul(head.probs, tape.log_eps(head.probs, eps));
    return tape.scale(tape.mean(tape.row_sum(plogp)), -1.0);
}

NodeId loss_div_node(Tape& tape, const Classifier& classifier, NodeId features, double eps) {
    const HeadGraph head = build_classifier_graph(tape, classifier, features);
    const NodeId marginal = tape.col_mean(head.probs);  // 1 x C
    return tape.row_sum(tape.elementwise_mul(marginal, tape.log_eps(marginal, eps)));
}

double loss_ent(const Matrix& features, const Classifier& classifier, double eps) {
    Tape tape;
    return tape.value(loss_ent_node(tape, classifier, tape.leaf(features), eps))(0, 0);
}

double loss_div(const Matrix& features, const Classifier& classifier, double eps) {
    Tape tape;
    return tape.value(loss_div_node(tape, classifier, tape.leaf(features), eps))(0, 0);
}

FeatureBank generate_feature_bank(const Classifier& classifier, std::size_t class_count,
                                  std::size_t feature_dim, const BankGenConfig& cfg) {
    if (classifier.directions.rows() != class_count ||
        classifier.directions.cols() != feature_dim)
        throw ConfigError("generate_feature_bank: classifier is " +
                          classifier.directions.shape_str() + ", expected " +
                          std::to_string(class_count) + "x" + std::to_string(feature_dim));
    if (cfg.n_c < 1) throw ConfigError("generate_feature_bank: n_c must be >= 1");

    const std::size_t n = class_count * cfg.n_c;
    Rng rng(derive_seed(cfg.seed, 3));
    Matrix features = Matrix::random_normal(n, feature_dim, rng);

    FeatureBank bank;
    bank.provenance.n_c = cfg.n_c;
    bank.provenance.steps = cfg.steps;
    bank.provenance.lr = cfg.lr;
    bank.provenance.beta = cfg.beta;
    bank.provenance.seed = cfg.seed;
    bank.provenance.initial_loss_ent = loss_ent(features, classifier, cfg.eps);
    bank.provenance.initial_loss_div = loss_div(features, classifier, cfg.eps);

    AdamState adam(n, feature_dim, cfg.lr);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        Tape tape;
        const NodeId f = tape.leaf(features);
        const NodeId total = tape.add(loss_ent_node(tape, classifier, f, cfg.eps),
                                      tape.scale(loss_div_node(tape, classifier, f, cfg.eps),
                                                 cfg.beta));
        if (!std::isfinite(tape.value(total)(0, 0)))
            throw NumericError("generate_feature_bank: non-finite loss at step " +
                               std::to_string(step));
        tape.backward(total);
        adam_step(features, tape.grad(f), adam);
    }

    bank.provenance.final_loss_ent = loss_ent(features, classifier, cfg.eps);
    bank.provenance.final_loss_div = loss_div(features, classifier, cfg.eps);

    {
        Tape tape;
        const HeadGraph head = build_classifier_graph(tape, classifier, tape.leaf(features));
        bank.scores = tape.value(head.probs);
    }
    bank.features = std::move(features);
    finalize_bank(bank);
    return bank;
}

std::string BankValidation::describe() const {
    if (ok) return "ok";
    std::string s = "deficient classes (need >= " + std::to_string(required) + "):";
    for (const auto& [cls, count] : deficient)
        s += " class " + std::to_string(cls) + " has " + std::to_string(count) + ";";
    return s;
}

BankValidation validate_bank(const FeatureBank& bank, std::size_t K) {
    BankValidation report;
    report.required = K;
    for (std::size_t c = 0; c < bank.partitions.size(); ++c)
        if (bank.partitions[c].size() < K)
            report.deficient.emplace_back(static_cast<int>(c), bank.partitions[c].size());
    report.ok = report.deficient.empty();
    return report;
}

nlohmann::json bank_summary(const FeatureBank& bank) {
    const std::size_t n = bank.size(), c = bank.class_count();
    json counts = json::array();
    for (const auto& part : bank.partitions) counts.push_back(part.size());

    const Matrix ent = entropy_of(bank.scores);
    double mean_ent = kernels::active_ops().sum(ent.data(), ent.size()) / static_cast<double>(n);

    // KL of the score marginal against uniform.
    double kl = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
        double pj = 0.0;
        for (std::size_t i = 0; i < n; ++i) pj += bank.scores(i, j);
        pj /= static_cast<double>(n);
        if (pj > 0.0) kl += pj * std::log(pj * static_cast<double>(c));
    }

    double intra = 0.0, inter = 0.0;
    std::size_t n_intra = 0, n_inter = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = i + 1; k < n; ++k) {
            const double cos = kernels::active_ops().dot(bank.normalized.row(i),
                                                         bank.normalized.row(k),
                                                         bank.feature_dim());
            if (bank.labels[i] == bank.labels[k]) {
                intra += cos;
                ++n_intra;
            } else {
                inter += cos;
                ++n_inter;
            }
        }

    json j;
    j["size"] = n;
    j["classes"] = c;
    j["feature_dim"] = bank.feature_dim();
    j["per_class_counts"] = counts;
    j["mean_score_entropy"] = mean_ent;
    j["marginal_kl_to_uniform"] = kl;
    j["mean_intra_class_cosine"] = n_intra ? intra / static_cast<double>(n_intra) : 0.0;
    j["mean_inter_class_cosine"] = n_inter ? inter / static_cast<double>(n_inter) : 0.0;
    j["provenance"] = {{"n_c", bank.provenance.n_c},
                       {"steps", bank.provenance.steps},
                       {"lr", bank.provenance.lr},
                       {"beta", bank.provenance.beta},
                       {"seed", bank.provenance.seed},
                       {"initial_loss_ent", bank.provenance.initial_loss_ent},
                       {"initial_loss_div", bank.provenance.initial_loss_div},
                       {"final_loss_ent", bank.provenance.final_loss_ent},
                       {"final_loss_div", bank.provenance.final_loss_div}};
    return j;
}

void save_bank(const FeatureBank& bank, const std::string& path) {
    json j;
    j["version"] = kBankFormatVersion;
    j["C"] = bank.class_count();
    j["n_c"] = bank.provenance.n_c;
    j["d"] = bank.feature_dim();
    j["features"] = matrix_to_json(bank.features);
    j["scores"] = matrix_to_json(bank.scores);
    j["labels"] = bank.labels;
    j["provenance"] = bank_summary(bank)["provenance"];
    std::ofstream out(path);
    if (!out) throw ConfigError("save_bank: cannot open " + path);
    out << j.dump(2) << "\n";
}

FeatureBank load_bank(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("load_bank: cannot open " + path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ParseError("load_bank: invalid JSON in " + path);
    if (!j.contains("version") || j["version"].get<int>() != kBankFormatVersion)
        throw ParseError("load_bank: unsupported or missing version in " + path);

    FeatureBank bank;
    bank.features = matrix_from_json(j["features"], "bank features");
    bank.scores = matrix_from_json(j["scores"], "bank scores");
    if (bank.scores.rows() != bank.features.rows())
        throw ParseError("load_bank: features/scores row mismatch");
    if (bank.scores.cols() != j["C"].get<std::size_t>())
        throw ParseError("load_bank: score width does not match C");
    const auto& prov = j["provenance"];
    bank.provenance.n_c = j["n_c"].get<std::size_t>();
    bank.provenance.steps = prov.value("steps", std::size_t{0});
    bank.provenance.lr = prov.value("lr", 0.0);
    bank.provenance.beta = prov.value("beta", 0.0);
    bank.provenance.seed = prov.value("seed", std::uint64_t{0});
    bank.provenance.initial_loss_ent = prov.value("initial_loss_ent", 0.0);
    bank.provenance.initial_loss_div = prov.value("initial_loss_div", 0.0);
    bank.provenance.final_loss_ent = prov.value("final_loss_ent", 0.0);
    bank.provenance.final_loss_div = prov.value("final_loss_div", 0.0);

    finalize_bank(bank);
    const auto stored = j["labels"].get<std::vector<int>>();
    if (stored != bank.labels)
        throw ParseError("load_bank: stored labels disagree with argmax of scores");
    return bank;
}

}  // namespace pstarc
