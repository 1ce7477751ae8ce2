#pragma once

#include <cstdint>
#include <vector>

#include "pstarc/bank.hpp"
#include "pstarc/data.hpp"
#include "pstarc/metrics.hpp"
#include "pstarc/model.hpp"

namespace pstarc {

// Adaptation hyperparameters. w_aug / w_attr / lambda_disp double as the
// ablation gates: setting one to zero removes that loss term.
struct TtaConfig {
    std::size_t K = 5;
    double lambda_disp = 1.0;
    double w_aug = 1.0;
    double w_attr = 1.0;
    double lr = 5e-4;
    double momentum = 0.9;
    std::size_t batch_size = 64;
    bool exclude_nearest = true;
    double eps = kLogEps;
    double aug_noise_sigma = 0.1;
    double aug_dropout = 0.1;

    // Positives needed per class: top-(K+1)-then-drop requires one extra.
    std::size_t required_per_class() const { return K + (exclude_nearest ? 1 : 0); }
};

struct BatchOutcome {
    std::vector<int> predictions;  // eval-mode, after the adaptation step
    double loss_aug = 0.0;         // batch means of the per-sample terms
    double loss_attr = 0.0;
    double loss_disp = 0.0;
    double loss_total = 0.0;       // loss_aug + loss_attr + lambda * loss_disp
    double tau = 0.0;
    double low_fraction = 0.0;
    double accuracy = 0.0;
};

// Batch-mean entropy threshold. A sample is LOW iff its entropy is strictly
// below the returned value; ties and the B=1 case route to HIGH.
double threshold(const Matrix& entropies);

// Score rows of the K nearest bank entries (cosine on unit-norm features)
// within partition S_c. With exclude_nearest the single most similar entry
// is dropped from a top-(K+1) ranking. Ties break toward the lower index.
Matrix knn_positives(const Matrix& feature, const FeatureBank& bank, int cls, std::size_t K,
                     bool exclude_nearest);

// One adaptation pass: the model is mutated in place, the classifier and the
// bank stay frozen, optimizer momentum persists across batches (and domains).
class TtaSession {
public:
    TtaSession(SourceModel& model, const FeatureBank& bank, TtaConfig cfg);

    BatchOutcome adapt_batch(const Batch& batch);
    MetricsRecord run_tta(BatchStream& stream);
    std::vector<MetricsRecord> run_ctta(const std::vector<BatchStream*>& streams);

    const TtaConfig& config() const { return cfg_; }
    SourceModel& model() { return model_; }

private:
    SourceModel& model_;
    const FeatureBank& bank_;
    TtaConfig cfg_;
    std::vector<SgdMomentumState> opt_;
    std::size_t batch_counter_ = 0;
};

}  // namespace pstarc
