#ifndef SFUDA_METRICS_HPP
#define SFUDA_METRICS_HPP

#include <algorithm>
#include <vector>

#include "sfuda/types.hpp"

namespace sfuda {

/// Dice overlap 2|P∩G| / (|P|+|G|) for one class id. Both-empty counts as
/// a correct prediction (1.0).
inline double dice(const MatXi& pred_mask, const MatXi& gt_mask, int class_id) {
    if (pred_mask.rows() != gt_mask.rows() || pred_mask.cols() != gt_mask.cols())
        throw argument_error("dice: mask shapes differ");
    long inter = 0, p_size = 0, g_size = 0;
    for (Eigen::Index j = 0; j < pred_mask.cols(); ++j)
        for (Eigen::Index i = 0; i < pred_mask.rows(); ++i) {
            const bool in_p = pred_mask(i, j) == class_id;
            const bool in_g = gt_mask(i, j) == class_id;
            p_size += in_p;
            g_size += in_g;
            inter += in_p && in_g;
        }
    if (p_size + g_size == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(p_size + g_size);
}

/// Unweighted mean of per-class dice over the listed (foreground) classes.
inline double mean_dice(const MatXi& pred_mask, const MatXi& gt_mask,
                        const std::vector<int>& foreground_classes) {
    if (foreground_classes.empty()) throw argument_error("mean_dice: no classes listed");
    double sum = 0.0;
    for (int c : foreground_classes) sum += dice(pred_mask, gt_mask, c);
    return sum / static_cast<double>(foreground_classes.size());
}

/// Epoch-wise Dice series with the statistics that expose the
/// "longer training, worse performance" gap.
struct StabilityReport {
    std::vector<double> per_epoch_dice;        // index 0 = epoch 1
    int best_epoch = 0;                        // 1-based; earliest maximum
    double best_dice = 0.0;
    double final_dice = 0.0;
    double degradation_gap = 0.0;              // best - final, >= 0
    std::vector<int> probe_epochs;             // requested probes that exist
    std::vector<int> omitted_probe_epochs;     // requested probes beyond the series
};

inline const std::vector<int>& default_probe_epochs() {
    static const std::vector<int> probes{1, 2, 3, 5, 10, 20, 50};
    return probes;
}

inline StabilityReport stability_report(const std::vector<double>& per_epoch_dice,
                                        const std::vector<int>& probe_epochs = default_probe_epochs()) {
    if (per_epoch_dice.empty()) throw argument_error("stability_report: empty dice series");
    StabilityReport r;
    r.per_epoch_dice = per_epoch_dice;
    auto best_it = std::max_element(per_epoch_dice.begin(), per_epoch_dice.end());
    r.best_epoch = static_cast<int>(best_it - per_epoch_dice.begin()) + 1;
    r.best_dice = *best_it;
    r.final_dice = per_epoch_dice.back();
    r.degradation_gap = r.best_dice - r.final_dice;
    for (int e : probe_epochs) {
        if (e >= 1 && e <= static_cast<int>(per_epoch_dice.size()))
            r.probe_epochs.push_back(e);
        else
            r.omitted_probe_epochs.push_back(e);
    }
    return r;
}

}  // namespace sfuda

#endif
