#include "pstarc/tta.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "pstarc/kernels.hpp"

namespace pstarc {

double threshold(const Matrix& entropies) {
    if (entropies.size() == 0) throw ContractError("threshold: empty entropy vector");
    return kernels::active_ops().sum(entropies.data(), entropies.size()) /
           static_cast<double>(entropies.size());
}

Matrix knn_positives(const Matrix& feature, const FeatureBank& bank, int cls, std::size_t K,
                     bool exclude_nearest) {
    if (feature.size() != bank.feature_dim())
        throw DimensionError("knn_positives: query dim " + std::to_string(feature.size()) +
                             " vs bank dim " + std::to_string(bank.feature_dim()));
    if (cls < 0 || static_cast<std::size_t>(cls) >= bank.class_count())
        throw ContractError("knn_positives: class out of range");
    const auto& members = bank.partitions[static_cast<std::size_t>(cls)];
    const std::size_t need = K + (exclude_nearest ? 1 : 0);
    if (members.size() < need)
        throw BankDeficiencyError("knn_positives: class " + std::to_string(cls) + " has " +
                                  std::to_string(members.size()) + " features, need " +
                                  std::to_string(need));

    const std::size_t d = bank.feature_dim();
    double qnorm = std::sqrt(kernels::active_ops().dot(feature.data(), feature.data(), d));
    if (qnorm < 1e-12) qnorm = 1e-12;

    // (similarity desc, bank index asc); ranked over the class partition.
    std::vector<std::pair<double, std::size_t>> ranked;
    ranked.reserve(members.size());
    for (const std::size_t idx : members) {
        const double sim =
            kernels::active_ops().dot(feature.data(), bank.normalized.row(idx), d) / qnorm;
        ranked.emplace_back(sim, idx);
    }
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(need),
                      ranked.end(), [](const auto& a, const auto& b) {
                          if (a.first != b.first) return a.first > b.first;
                          return a.second < b.second;
                      });

    Matrix out(K, bank.class_count());
    const std::size_t start = exclude_nearest ? 1 : 0;
    for (std::size_t k = 0; k < K; ++k) {
        const std::size_t idx = ranked[start + k].second;
        for (std::size_t j = 0; j < bank.class_count(); ++j) out(k, j) = bank.scores(idx, j);
    }
    return out;
}

TtaSession::TtaSession(SourceModel& model, const FeatureBank& bank, TtaConfig cfg)
    : model_(model), bank_(bank), cfg_(cfg) {
    if (bank.feature_dim() != model.feature_dim || bank.class_count() != model.class_count)
        throw ConfigError("tta: bank (" + std::to_string(bank.feature_dim()) + "d, " +
                          std::to_string(bank.class_count()) +
                          " classes) does not match the model");
    if (cfg.K < 1) throw ConfigError("tta: K must be >= 1");
    if (cfg.batch_size < 1) throw ConfigError("tta: batch size must be >= 1");
    const BankValidation validation = validate_bank(bank, cfg.required_per_class());
    if (!validation.ok)
        throw BankDeficiencyError("tta: bank cannot serve K=" + std::to_string(cfg.K) +
                                  (cfg.exclude_nearest ? " with exclude-nearest" : "") + ": " +
                                  validation.describe());
    for (Matrix* p : extractor_params(model_))
        opt_.emplace_back(p->rows(), p->cols(), cfg.lr, cfg.momentum, true);
}

BatchOutcome TtaSession::adapt_batch(const Batch& batch) {
    const std::size_t B = batch.X.rows();
    if (B == 0) throw ContractError("adapt_batch: empty batch");
    check_same_shape(batch.X, batch.X_aug, "adapt_batch (X vs X_aug)");

    // lr = 0 or an all-zero objective is the null step: no parameter
    // movement and no running-stat drift, so adaptation is a bitwise no-op
    // on the model.
    const bool null_step =
        cfg_.lr == 0.0 || (cfg_.w_aug == 0.0 && cfg_.w_attr == 0.0 && cfg_.lambda_disp == 0.0);
    const BnMode train_mode = null_step ? BnMode::train_frozen_stats : BnMode::train;

    Tape tape;
    const ModelParams params = register_model_params(tape, model_, false);
    const ForwardNodes fwd = apply_model(tape, model_, params, batch.X, train_mode);
    const ForwardNodes fwd_aug = apply_model(tape, model_, params, batch.X_aug, train_mode);

    // Copies: later node creation may reallocate the tape's node storage.
    const Matrix probs = tape.value(fwd.probs);
    const Matrix feats = tape.value(fwd.features);
    const std::vector<int> pseudo_labels = argmax_rows(probs);
    const Matrix entropies = entropy_of(probs, cfg_.eps);
    const double tau = threshold(entropies);

    // Positive score mass per sample, a constant of the step: summed KNN
    // score rows for confident samples, the sample's own detached prediction
    // replicated K times otherwise.
    Matrix positives(B, model_.class_count);
    std::size_t low_count = 0;
    Matrix query(1, model_.feature_dim);
    for (std::size_t k = 0; k < B; ++k) {
        if (entropies(k, 0) < tau) {
            ++low_count;
            for (std::size_t j = 0; j < model_.feature_dim; ++j) query(0, j) = feats(k, j);
            const Matrix rows = knn_positives(query, bank_, pseudo_labels[k], cfg_.K,
                                              cfg_.exclude_nearest);
            for (std::size_t r = 0; r < rows.rows(); ++r)
                kernels::active_ops().axpy(positives.row(k), 1.0, rows.row(r),
                                           model_.class_count);
        } else {
            kernels::active_ops().axpy(positives.row(k), static_cast<double>(cfg_.K),
                                       probs.row(k), model_.class_count);
        }
    }

    Matrix disp_mask(B, B, 1.0);
    for (std::size_t k = 0; k < B; ++k) disp_mask(k, k) = 0.0;

    const NodeId aug_rows = tape.scale(
        tape.row_sum(tape.elementwise_mul(fwd.probs, fwd_aug.probs)), -1.0);
    const NodeId attr_rows = tape.scale(
        tape.row_sum(tape.elementwise_mul(fwd.probs, tape.constant(positives))), -1.0);
    const NodeId disp_rows = tape.row_sum(tape.elementwise_mul(
        tape.matmul_nt(fwd.probs, fwd.probs), tape.constant(disp_mask)));
    const NodeId weighted = tape.add(
        tape.add(tape.scale(aug_rows, cfg_.w_aug), tape.scale(attr_rows, cfg_.w_attr)),
        tape.scale(disp_rows, cfg_.lambda_disp));
    const NodeId total = tape.mean(weighted);

    BatchOutcome out;
    out.tau = tau;
    out.low_fraction = static_cast<double>(low_count) / static_cast<double>(B);
    const auto batch_mean = [&](NodeId rows) {
        return kernels::active_ops().sum(tape.value(rows).data(), B) / static_cast<double>(B);
    };
    out.loss_aug = batch_mean(aug_rows);
    out.loss_attr = batch_mean(attr_rows);
    out.loss_disp = batch_mean(disp_rows);
    out.loss_total = tape.value(total)(0, 0);
    if (!std::isfinite(out.loss_total))
        throw NumericError("adapt_batch: non-finite loss at batch " +
                           std::to_string(batch_counter_));

    tape.backward(total);
    if (!null_step) {
        std::size_t pi = 0;
        for (const auto& binding : params.extractor)
            sgd_nesterov_step(*binding.param, tape.grad(binding.node), opt_[pi++]);
    }

    const auto predictions = predict(model_, batch.X);
    std::size_t correct = 0;
    for (std::size_t k = 0; k < B; ++k)
        if (predictions[k] == batch.y_true[k]) ++correct;
    out.predictions = predictions;
    out.accuracy = static_cast<double>(correct) / static_cast<double>(B);
    ++batch_counter_;
    return out;
}

MetricsRecord TtaSession::run_tta(BatchStream& stream) {
    MetricsRecord record;
    record.per_class_count.assign(model_.class_count, 0);
    record.per_class_correct.assign(model_.class_count, 0);
    std::vector<int> prediction_log;

    std::size_t seen = 0, correct = 0, index = 0;
    while (auto batch = stream.next()) {
        const BatchOutcome outcome = adapt_batch(*batch);
        const std::size_t B = batch->X.rows();
        seen += B;
        for (std::size_t k = 0; k < B; ++k) {
            const int truth = batch->y_true[k];
            record.per_class_count[static_cast<std::size_t>(truth)] += 1;
            if (outcome.predictions[k] == truth) {
                record.per_class_correct[static_cast<std::size_t>(truth)] += 1;
                ++correct;
            }
            prediction_log.push_back(outcome.predictions[k]);
        }
        BatchRow row;
        row.batch_index = index++;
        row.seen = seen;
        row.tau = outcome.tau;
        row.low_fraction = outcome.low_fraction;
        row.loss_aug = outcome.loss_aug;
        row.loss_attr = outcome.loss_attr;
        row.loss_disp = outcome.loss_disp;
        row.loss_total = outcome.loss_total;
        row.batch_acc = outcome.accuracy;
        row.cum_acc = static_cast<double>(correct) / static_cast<double>(seen);
        record.rows.push_back(row);
    }

    record.total_acc = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    record.per_class_recall.assign(model_.class_count, 0.0);
    double recall_sum = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < model_.class_count; ++c) {
        if (record.per_class_count[c] == 0) continue;
        record.per_class_recall[c] = static_cast<double>(record.per_class_correct[c]) /
                                     static_cast<double>(record.per_class_count[c]);
        recall_sum += record.per_class_recall[c];
        ++present;
    }
    record.class_avg_acc = present ? recall_sum / static_cast<double>(present) : 0.0;
    // Tail window: the settled prediction distribution.
    if (!prediction_log.empty()) {
        std::set<int> tail;
        const std::size_t window = (prediction_log.size() + 3) / 4;
        for (std::size_t i = prediction_log.size() - window; i < prediction_log.size(); ++i)
            tail.insert(prediction_log[i]);
        record.distinct_predicted_classes = tail.size();
    }
    return record;
}

std::vector<MetricsRecord> TtaSession::run_ctta(const std::vector<BatchStream*>& streams) {
    if (streams.empty()) throw ConfigError("run_ctta: need at least one domain");
    std::vector<MetricsRecord> records;
    records.reserve(streams.size());
    // No model reset, no bank regeneration, momentum carries across domains.
    for (BatchStream* stream : streams) records.push_back(run_tta(*stream));
    return records;
}

}  // namespace pstarc
