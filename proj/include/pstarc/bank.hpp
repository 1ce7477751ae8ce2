#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pstarc/model.hpp"

namespace pstarc {

// Pseudo-source features synthesized against a frozen classifier, with their
// score rows, pseudo-labels, unit-norm copies, and per-class index partitions.
// Generated once per source model and immutable afterwards.
struct FeatureBank {
    Matrix features;    // N x d
    Matrix scores;      // N x C, rows sum to 1
    std::vector<int> labels;
    Matrix normalized;  // N x d, unit row norm
    std::vector<std::vector<std::size_t>> partitions;  // S_c, disjoint, covering

    struct Provenance {
        std::size_t n_c = 0;
        std::size_t steps = 0;
        double lr = 0.0;
        double beta = 0.0;
        std::uint64_t seed = 0;
        double initial_loss_ent = 0.0;
        double initial_loss_div = 0.0;
        double final_loss_ent = 0.0;
        double final_loss_div = 0.0;
    } provenance;

    std::size_t size() const { return features.rows(); }
    std::size_t feature_dim() const { return features.cols(); }
    std::size_t class_count() const { return scores.cols(); }
};

// Graph builders for the two bank-synthesis loss heads. `features` is the
// trainable leaf; the classifier enters as constants.
NodeId loss_ent_node(Tape& tape, const Classifier& classifier, NodeId features,
                     double eps = kLogEps);
NodeId loss_div_node(Tape& tape, const Classifier& classifier, NodeId features,
                     double eps = kLogEps);

// Scalar conveniences over the graph builders.
double loss_ent(const Matrix& features, const Classifier& classifier, double eps = kLogEps);
double loss_div(const Matrix& features, const Classifier& classifier, double eps = kLogEps);

struct BankGenConfig {
    std::size_t n_c = 20;
    std::size_t steps = 50;
    double lr = 0.01;
    double beta = 5.0;
    std::uint64_t seed = 0;
    double eps = kLogEps;
};

// Full-batch Adam on a standard-normal feature bank, minimizing
// loss_ent + beta * loss_div with only the features trainable.
FeatureBank generate_feature_bank(const Classifier& classifier, std::size_t class_count,
                                  std::size_t feature_dim, const BankGenConfig& cfg);

struct BankValidation {
    bool ok = false;
    std::size_t required = 0;
    std::vector<std::pair<int, std::size_t>> deficient;  // (class, count) below K

    std::string describe() const;
};

// Checks every class partition holds at least K features.
BankValidation validate_bank(const FeatureBank& bank, std::size_t K = 5);

// Diagnostic counters: per-class counts, score entropy, marginal KL to
// uniform, and intra/inter-class cosine statistics.
nlohmann::json bank_summary(const FeatureBank& bank);

void save_bank(const FeatureBank& bank, const std::string& path);
FeatureBank load_bank(const std::string& path);

}  // namespace pstarc
