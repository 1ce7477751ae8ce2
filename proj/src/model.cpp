#include "pstarc/model.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "pstarc/json_util.hpp"
#include "pstarc/kernels.hpp"

namespace pstarc {

namespace {
using nlohmann::json;
constexpr int kModelFormatVersion = 1;
}  // namespace

SourceModel make_mlp_model(std::size_t input_dim, const std::vector<std::size_t>& hidden_dims,
                           std::size_t feature_dim, std::size_t class_count, bool use_bn,
                           std::uint64_t seed) {
    if (input_dim < 1 || feature_dim < 2 || class_count < 1)
        throw ConfigError("make_mlp_model: need input_dim >= 1, feature_dim >= 2, classes >= 1");
    SourceModel m;
    m.input_dim = input_dim;
    m.feature_dim = feature_dim;
    m.class_count = class_count;
    m.seed = seed;

    std::uint64_t stream = 0;
    auto he_init = [&](std::size_t out, std::size_t in) {
        Rng rng(derive_seed(seed, 100 + stream++));
        return Matrix::random_normal(out, in, rng, 0.0, std::sqrt(2.0 / static_cast<double>(in)));
    };

    std::size_t prev = input_dim;
    for (std::size_t h : hidden_dims) {
        m.extractor.hidden.push_back({he_init(h, prev), Matrix(1, h)});
        prev = h;
    }
    m.extractor.proj = {he_init(feature_dim, prev), Matrix(1, feature_dim)};
    m.extractor.use_bn = use_bn;
    m.extractor.bn_gamma = Matrix(1, feature_dim, 1.0);
    m.extractor.bn_beta = Matrix(1, feature_dim, 0.0);
    m.extractor.bn.running_mean = Matrix(1, feature_dim, 0.0);
    m.extractor.bn.running_var = Matrix(1, feature_dim, 1.0);

    Rng crng(derive_seed(seed, 500));
    m.classifier.directions = Matrix::random_normal(
        class_count, feature_dim, crng, 0.0, 1.0 / std::sqrt(static_cast<double>(feature_dim)));
    m.classifier.gains = Matrix(class_count, 1, 1.0);
    return m;
}

HeadGraph build_classifier_graph(Tape& tape, const Classifier& classifier, NodeId features) {
    const NodeId v = tape.constant(classifier.directions);
    const NodeId g = tape.constant(classifier.gains);
    const NodeId vhat = tape.row_l2_normalize(v);
    const NodeId w = tape.scale_rows(vhat, g);
    HeadGraph out;
    out.logits = tape.matmul_nt(features, w);
    out.probs = tape.row_softmax(out.logits);
    return out;
}

ModelParams register_model_params(Tape& tape, SourceModel& model, bool classifier_trainable) {
    ModelParams p;
    for (auto& layer : model.extractor.hidden) {
        p.extractor.push_back({tape.leaf(layer.W), &layer.W});
        p.extractor.push_back({tape.leaf(layer.b), &layer.b});
    }
    p.extractor.push_back({tape.leaf(model.extractor.proj.W), &model.extractor.proj.W});
    p.extractor.push_back({tape.leaf(model.extractor.proj.b), &model.extractor.proj.b});
    if (model.extractor.use_bn) {
        p.extractor.push_back({tape.leaf(model.extractor.bn_gamma), &model.extractor.bn_gamma});
        p.extractor.push_back({tape.leaf(model.extractor.bn_beta), &model.extractor.bn_beta});
    }
    const NodeId v = tape.leaf(model.classifier.directions);
    const NodeId g = tape.leaf(model.classifier.gains);
    if (classifier_trainable) {
        p.classifier.push_back({v, &model.classifier.directions});
        p.classifier.push_back({g, &model.classifier.gains});
    } else {
        // Keep the node ids retrievable for apply_model but report no
        // trainable bindings; the head stays frozen.
        p.classifier.push_back({v, nullptr});
        p.classifier.push_back({g, nullptr});
    }
    return p;
}

ForwardNodes apply_model(Tape& tape, SourceModel& model, const ModelParams& params,
                         const Matrix& X, BnMode mode) {
    if (X.cols() != model.input_dim)
        throw DimensionError("forward: input is " + X.shape_str() + ", model expects cols=" +
                             std::to_string(model.input_dim));
    ForwardNodes out;
    out.input = tape.constant(X);

    NodeId h = out.input;
    std::size_t pi = 0;
    for (std::size_t layer = 0; layer < model.extractor.hidden.size(); ++layer) {
        const NodeId w = params.extractor[pi++].node;
        const NodeId b = params.extractor[pi++].node;
        h = tape.relu(tape.add_bias(tape.matmul_nt(h, w), b));
    }
    const NodeId pw = params.extractor[pi++].node;
    const NodeId pb = params.extractor[pi++].node;
    h = tape.relu(tape.add_bias(tape.matmul_nt(h, pw), pb));
    if (model.extractor.use_bn) {
        const NodeId gamma = params.extractor[pi++].node;
        const NodeId beta = params.extractor[pi++].node;
        h = tape.batch_norm(h, gamma, beta, model.extractor.bn, mode);
    }
    out.features = h;

    const NodeId vhat = tape.row_l2_normalize(params.classifier[0].node);
    const NodeId w = tape.scale_rows(vhat, params.classifier[1].node);
    out.logits = tape.matmul_nt(out.features, w);
    out.probs = tape.row_softmax(out.logits);
    return out;
}

ModelGraph build_model_graph(Tape& tape, SourceModel& model, const Matrix& X, BnMode mode) {
    const ModelParams params = register_model_params(tape, model, true);
    const ForwardNodes nodes = apply_model(tape, model, params, X, mode);
    ModelGraph g;
    g.input = nodes.input;
    g.features = nodes.features;
    g.logits = nodes.logits;
    g.probs = nodes.probs;
    g.extractor_params = params.extractor;
    g.classifier_params = params.classifier;
    return g;
}

std::vector<Matrix*> extractor_params(SourceModel& model) {
    std::vector<Matrix*> out;
    for (auto& layer : model.extractor.hidden) {
        out.push_back(&layer.W);
        out.push_back(&layer.b);
    }
    out.push_back(&model.extractor.proj.W);
    out.push_back(&model.extractor.proj.b);
    if (model.extractor.use_bn) {
        out.push_back(&model.extractor.bn_gamma);
        out.push_back(&model.extractor.bn_beta);
    }
    return out;
}

std::vector<Matrix*> all_params(SourceModel& model) {
    auto out = extractor_params(model);
    out.push_back(&model.classifier.directions);
    out.push_back(&model.classifier.gains);
    return out;
}

ForwardResult forward(SourceModel& model, const Matrix& X, BnMode mode) {
    Tape tape;
    const ModelGraph g = build_model_graph(tape, model, X, mode);
    return {tape.value(g.features), tape.value(g.probs)};
}

Matrix label_smooth(int y, std::size_t class_count, double alpha) {
    if (alpha < 0.0 || alpha > 1.0) throw ContractError("label_smooth: alpha must be in [0, 1]");
    if (y < 0 || static_cast<std::size_t>(y) >= class_count)
        throw ContractError("label_smooth: label out of range");
    Matrix row(1, class_count, alpha / static_cast<double>(class_count));
    row(0, static_cast<std::size_t>(y)) += 1.0 - alpha;
    return row;
}

Matrix entropy_of(const Matrix& probs, double eps) {
    Matrix e(probs.rows(), 1);
    for (std::size_t i = 0; i < probs.rows(); ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < probs.cols(); ++j) {
            const double p = probs(i, j);
            acc -= p * std::log(p + eps);
        }
        e(i, 0) = acc;
    }
    return e;
}

std::vector<int> argmax_rows(const Matrix& m) {
    std::vector<int> out(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < m.cols(); ++j)
            if (m(i, j) > m(i, best)) best = j;
        out[i] = static_cast<int>(best);
    }
    return out;
}

std::vector<double> train_source(SourceModel& model, const Dataset& ds, const TrainConfig& cfg) {
    if (ds.size() == 0) throw ConfigError("train_source: empty dataset");
    if (ds.dim() != model.input_dim || ds.classes != model.class_count)
        throw ConfigError("train_source: dataset (" + std::to_string(ds.dim()) + "d, " +
                          std::to_string(ds.classes) + " classes) does not match model");

    auto params = all_params(model);
    std::vector<SgdMomentumState> states;
    states.reserve(params.size());
    for (Matrix* p : params)
        states.emplace_back(p->rows(), p->cols(), cfg.lr, cfg.momentum, true);

    Rng shuffle_rng(derive_seed(cfg.seed, 10));
    std::vector<std::size_t> order(ds.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<double> epoch_losses;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t take = std::min(cfg.batch_size, order.size() - start);
            Matrix X(take, ds.dim());
            Matrix targets(take, ds.classes);
            for (std::size_t i = 0; i < take; ++i) {
                const std::size_t src = order[start + i];
                for (std::size_t j = 0; j < ds.dim(); ++j) X(i, j) = ds.X(src, j);
                const Matrix smooth = label_smooth(ds.y[src], ds.classes, cfg.label_smoothing);
                for (std::size_t j = 0; j < ds.classes; ++j) targets(i, j) = smooth(0, j);
            }

            Tape tape;
            ModelGraph g = build_model_graph(tape, model, X, BnMode::train);
            const NodeId tgt = tape.constant(targets);
            const NodeId ce_rows =
                tape.row_sum(tape.elementwise_mul(tgt, tape.log_eps(g.probs)));
            const NodeId loss = tape.scale(tape.mean(ce_rows), -1.0);

            const double loss_value = tape.value(loss)(0, 0);
            if (!std::isfinite(loss_value))
                throw NumericError("train_source: non-finite loss at epoch " +
                                   std::to_string(epoch) + ", batch " + std::to_string(batches));
            loss_sum += loss_value;
            ++batches;

            tape.backward(loss);
            std::size_t pi = 0;
            for (const auto& binding : g.extractor_params)
                sgd_nesterov_step(*binding.param, tape.grad(binding.node), states[pi++]);
            for (const auto& binding : g.classifier_params)
                sgd_nesterov_step(*binding.param, tape.grad(binding.node), states[pi++]);
        }
        epoch_losses.push_back(loss_sum / static_cast<double>(batches));
    }

    json tc;
    tc["epochs"] = cfg.epochs;
    tc["lr"] = cfg.lr;
    tc["momentum"] = cfg.momentum;
    tc["label_smoothing"] = cfg.label_smoothing;
    tc["batch_size"] = cfg.batch_size;
    tc["seed"] = cfg.seed;
    model.train_config = tc.dump();
    return epoch_losses;
}

std::vector<int> predict(SourceModel& model, const Matrix& X) {
    return argmax_rows(forward(model, X, BnMode::eval).probs);
}

double eval_accuracy(SourceModel& model, const Dataset& ds) {
    const auto pred = predict(model, ds.X);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        if (pred[i] == ds.y[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

void save_model(const SourceModel& model, const std::string& path) {
    json j;
    j["version"] = kModelFormatVersion;
    j["D"] = model.input_dim;
    j["d"] = model.feature_dim;
    j["C"] = model.class_count;
    j["seed"] = model.seed;
    j["train_config"] = model.train_config;
    // The projection is the last entry of the layer list.
    j["layers"] = json::array();
    for (const auto& layer : model.extractor.hidden)
        j["layers"].push_back({{"W", matrix_to_json(layer.W)}, {"b", matrix_to_json(layer.b)}});
    j["layers"].push_back({{"W", matrix_to_json(model.extractor.proj.W)},
                           {"b", matrix_to_json(model.extractor.proj.b)}});
    if (model.extractor.use_bn) {
        j["bn"] = {{"gamma", matrix_to_json(model.extractor.bn_gamma)},
                   {"beta", matrix_to_json(model.extractor.bn_beta)},
                   {"mean", matrix_to_json(model.extractor.bn.running_mean)},
                   {"var", matrix_to_json(model.extractor.bn.running_var)},
                   {"momentum", model.extractor.bn.momentum},
                   {"eps", model.extractor.bn.eps}};
    } else {
        j["bn"] = nullptr;
    }
    j["classifier"] = {{"V", matrix_to_json(model.classifier.directions)},
                       {"g", matrix_to_json(model.classifier.gains)}};
    std::ofstream out(path);
    if (!out) throw ConfigError("save_model: cannot open " + path);
    out << j.dump(2) << "\n";
}

SourceModel load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("load_model: cannot open " + path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ParseError("load_model: invalid JSON in " + path);
    if (!j.contains("version") || j["version"].get<int>() != kModelFormatVersion)
        throw ParseError("load_model: unsupported or missing version in " + path);

    SourceModel m;
    m.input_dim = j["D"].get<std::size_t>();
    m.feature_dim = j["d"].get<std::size_t>();
    m.class_count = j["C"].get<std::size_t>();
    m.seed = j["seed"].get<std::uint64_t>();
    m.train_config = j.value("train_config", std::string{});
    if (!j["layers"].is_array() || j["layers"].empty())
        throw ParseError("load_model: empty layer list in " + path);
    for (const auto& layer : j["layers"])
        m.extractor.hidden.push_back(
            {matrix_from_json(layer["W"], "layer W"), matrix_from_json(layer["b"], "layer b")});
    m.extractor.proj = std::move(m.extractor.hidden.back());
    m.extractor.hidden.pop_back();
    if (!j["bn"].is_null()) {
        m.extractor.use_bn = true;
        m.extractor.bn_gamma = matrix_from_json(j["bn"]["gamma"], "bn gamma");
        m.extractor.bn_beta = matrix_from_json(j["bn"]["beta"], "bn beta");
        m.extractor.bn.running_mean = matrix_from_json(j["bn"]["mean"], "bn mean");
        m.extractor.bn.running_var = matrix_from_json(j["bn"]["var"], "bn var");
        m.extractor.bn.momentum = j["bn"]["momentum"].get<double>();
        m.extractor.bn.eps = j["bn"]["eps"].get<double>();
    } else {
        m.extractor.use_bn = false;
    }
    m.classifier.directions = matrix_from_json(j["classifier"]["V"], "classifier V");
    m.classifier.gains = matrix_from_json(j["classifier"]["g"], "classifier g");
    return m;
}

}  // namespace pstarc
