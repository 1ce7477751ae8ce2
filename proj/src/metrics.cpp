#include "pstarc/metrics.hpp"

#include <cstdio>
#include <fstream>

#include "pstarc/errors.hpp"

namespace pstarc {

namespace {
std::string g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}
}  // namespace

void write_metrics_csv(const MetricsRecord& record, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("write_metrics_csv: cannot open " + path);
    out << "batch,seen,tau,low_frac,loss_aug,loss_attr,loss_disp,loss_total,batch_acc,cum_acc\n";
    for (const auto& r : record.rows) {
        out << r.batch_index << "," << r.seen << "," << g17(r.tau) << "," << g17(r.low_fraction)
            << "," << g17(r.loss_aug) << "," << g17(r.loss_attr) << "," << g17(r.loss_disp) << ","
            << g17(r.loss_total) << "," << g17(r.batch_acc) << "," << g17(r.cum_acc) << "\n";
    }
    if (!out) throw ConfigError("write_metrics_csv: write failed for " + path);
}

nlohmann::json metrics_summary_json(const MetricsRecord& record, const std::string& config_digest,
                                    std::uint64_t seed) {
    nlohmann::json j;
    j["total_acc"] = record.total_acc;
    j["class_avg_acc"] = record.class_avg_acc;
    j["per_class_recall"] = record.per_class_recall;
    j["distinct_predicted_classes"] = record.distinct_predicted_classes;
    j["batches"] = record.rows.size();
    j["samples"] = record.seen();
    j["config_digest"] = config_digest;
    j["seed"] = seed;
    return j;
}

void emit_metrics(const MetricsRecord& record, const std::string& csv_path,
                  const std::string& summary_path, const std::string& config_digest,
                  std::uint64_t seed) {
    write_metrics_csv(record, csv_path);
    std::ofstream out(summary_path);
    if (!out) throw ConfigError("emit_metrics: cannot open " + summary_path);
    out << metrics_summary_json(record, config_digest, seed).dump(2) << "\n";
}

}  // namespace pstarc
