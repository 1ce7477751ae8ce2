#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace pstarc {

struct BatchRow {
    std::size_t batch_index = 0;  // 0-based position in the stream
    std::size_t seen = 0;         // cumulative samples after this batch
    double tau = 0.0;
    double low_fraction = 0.0;
    double loss_aug = 0.0;
    double loss_attr = 0.0;
    double loss_disp = 0.0;
    double loss_total = 0.0;
    double batch_acc = 0.0;
    double cum_acc = 0.0;
};

// Per-batch adaptation trace plus both accuracy conventions: total accuracy
// and the unweighted mean of per-class recalls.
struct MetricsRecord {
    std::vector<BatchRow> rows;
    double total_acc = 0.0;
    double class_avg_acc = 0.0;
    std::vector<double> per_class_recall;
    std::vector<std::size_t> per_class_count;
    std::vector<std::size_t> per_class_correct;
    // Collapse diagnostic: distinct predicted classes over the last quarter
    // of the stream, where the adapted model's prediction distribution has
    // settled. Early batches cover all classes regardless of later collapse.
    std::size_t distinct_predicted_classes = 0;

    std::size_t seen() const { return rows.empty() ? 0 : rows.back().seen; }
};

// CSV header: batch,seen,tau,low_frac,loss_aug,loss_attr,loss_disp,loss_total,batch_acc,cum_acc
void write_metrics_csv(const MetricsRecord& record, const std::string& path);

nlohmann::json metrics_summary_json(const MetricsRecord& record, const std::string& config_digest,
                                    std::uint64_t seed);

void emit_metrics(const MetricsRecord& record, const std::string& csv_path,
                  const std::string& summary_path, const std::string& config_digest,
                  std::uint64_t seed);

}  // namespace pstarc
