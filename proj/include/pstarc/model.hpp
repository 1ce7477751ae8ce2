#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pstarc/data.hpp"
#include "pstarc/matrix.hpp"
#include "pstarc/optim.hpp"
#include "pstarc/tape.hpp"

namespace pstarc {

struct LinearLayer {
    Matrix W;  // out x in
    Matrix b;  // 1 x out
};

// MLP feature extractor: relu hidden layers, a projection to the feature
// dimension (relu), then an optional batch-norm layer with running stats.
struct FeatureExtractor {
    std::vector<LinearLayer> hidden;
    LinearLayer proj;
    bool use_bn = true;
    Matrix bn_gamma;  // 1 x d
    Matrix bn_beta;   // 1 x d
    BnState bn;
};

// Weight-normalized linear head without bias:
// logits(f)_c = g_c * (v_c / ||v_c||) . f
struct Classifier {
    Matrix directions;  // V: C x d
    Matrix gains;       // g: C x 1
};

struct SourceModel {
    FeatureExtractor extractor;
    Classifier classifier;
    std::size_t input_dim = 0;
    std::size_t feature_dim = 0;
    std::size_t class_count = 0;
    std::uint64_t seed = 0;
    std::string train_config;  // JSON blob stamped by train_source
};

SourceModel make_mlp_model(std::size_t input_dim, const std::vector<std::size_t>& hidden_dims,
                           std::size_t feature_dim, std::size_t class_count, bool use_bn,
                           std::uint64_t seed);

// A tape leaf per parameter, in a stable order, bound back to the owning
// Matrix so gradients can be applied after backward().
struct ParamBinding {
    NodeId node;
    Matrix* param;
};

// Parameter leaves registered once per tape; multiple forwards through the
// same registration share them, so gradients from all passes accumulate.
// With classifier_trainable=false the head enters the graph as constants and
// the classifier binding list stays empty.
struct ModelParams {
    std::vector<ParamBinding> extractor;
    std::vector<ParamBinding> classifier;
};
ModelParams register_model_params(Tape& tape, SourceModel& model, bool classifier_trainable);

struct ForwardNodes {
    NodeId input = 0;
    NodeId features = 0;
    NodeId logits = 0;
    NodeId probs = 0;
};
// One forward pass over a batch. Train mode normalizes with batch statistics
// and advances the BN running stats as a side effect.
ForwardNodes apply_model(Tape& tape, SourceModel& model, const ModelParams& params,
                         const Matrix& X, BnMode mode);

struct ModelGraph {
    NodeId input = 0;
    NodeId features = 0;
    NodeId logits = 0;
    NodeId probs = 0;
    std::vector<ParamBinding> extractor_params;
    std::vector<ParamBinding> classifier_params;
};

// register_model_params + apply_model in one call.
ModelGraph build_model_graph(Tape& tape, SourceModel& model, const Matrix& X, BnMode mode);

// Classifier head on externally supplied features (used for bank synthesis,
// where only the features carry gradient).
struct HeadGraph {
    NodeId logits = 0;
    NodeId probs = 0;
};
HeadGraph build_classifier_graph(Tape& tape, const Classifier& classifier, NodeId features);

// Stable parameter enumeration; order matches build_model_graph bindings.
std::vector<Matrix*> extractor_params(SourceModel& model);
std::vector<Matrix*> all_params(SourceModel& model);

struct ForwardResult {
    Matrix features;  // B x d
    Matrix probs;     // B x C
};
ForwardResult forward(SourceModel& model, const Matrix& X, BnMode mode);

// Smoothed target row: (1 - alpha) * onehot(y) + alpha / C.
Matrix label_smooth(int y, std::size_t class_count, double alpha);

// Per-row prediction entropy e_k = -sum_c p_kc * log(p_kc + eps), as B x 1.
Matrix entropy_of(const Matrix& probs, double eps = kLogEps);

std::vector<int> argmax_rows(const Matrix& m);

struct TrainConfig {
    std::size_t epochs = 25;
    double lr = 0.03;
    double momentum = 0.9;
    double label_smoothing = 0.1;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
};

// Label-smoothing cross-entropy over shuffled minibatches with Nesterov SGD;
// updates extractor and classifier, BN in train mode. Per-epoch mean loss is
// returned for diagnostics.
std::vector<double> train_source(SourceModel& model, const Dataset& ds, const TrainConfig& cfg);

std::vector<int> predict(SourceModel& model, const Matrix& X);
double eval_accuracy(SourceModel& model, const Dataset& ds);

void save_model(const SourceModel& model, const std::string& path);
SourceModel load_model(const std::string& path);

}  // namespace pstarc
