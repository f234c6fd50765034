#ifndef SFUDA_REPORT_IO_HPP
#define SFUDA_REPORT_IO_HPP

#include <string>
#include <vector>

#include "sfuda/config.hpp"
#include "sfuda/metrics.hpp"
#include "sfuda/trainer.hpp"

namespace sfuda {

std::string epoch_record_to_json(const EpochRecord& rec);

/// One EpochRecord per line.
void write_records_jsonl(const std::string& path, const std::vector<EpochRecord>& records);
std::vector<EpochRecord> read_records_jsonl(const std::string& path);

void write_report_json(const std::string& path, const StabilityReport& report);

/// CSV export of the per-epoch dice series (epoch,dice).
void write_series_csv(const std::string& path, const std::vector<double>& per_epoch_dice);

/// One-row CSV shaped like the epoch-probe comparison tables:
/// label, epoch columns, best value and best epoch.
void write_probe_table_csv(const std::string& path, const std::string& label,
                           const StabilityReport& report);

/// Ablation grid CSV: one row per cell with Epoch-50 / Epoch-200 / Best
/// columns (cells blank when the run is shorter; FAILED on per-cell errors).
struct AblationCsvRow {
    std::string group;
    std::string method;
    std::string entropy;
    bool wc = false;
    bool failed = false;
    StabilityReport report;
};
void write_ablation_csv(const std::string& path, const std::vector<AblationCsvRow>& rows);

/// Serializes the full adaptation config (for config.json in run dirs).
std::string adaptation_config_to_json(const AdaptationConfig& cfg);
AdaptationConfig adaptation_config_from_json(const std::string& json_text);

/// Minimal SVG line plot of dice vs epoch.
void write_dice_curve_svg(const std::string& path, const std::vector<double>& per_epoch_dice);

}  // namespace sfuda

#endif
