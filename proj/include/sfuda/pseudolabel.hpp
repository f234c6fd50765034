#ifndef SFUDA_PSEUDOLABEL_HPP
#define SFUDA_PSEUDOLABEL_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "sfuda/config.hpp"
#include "sfuda/types.hpp"

namespace sfuda {

/// Per-class intra-class cutoffs. A class nobody argmax-votes for gets the
/// +inf sentinel and therefore produces no labels.
struct ClassThresholds {
    static constexpr double kEmptySentinel = std::numeric_limits<double>::infinity();
    std::vector<double> delta;
    std::vector<int> support_count;
};

/// The value v such that at least ceil(alpha*N) of `values` are >= v,
/// i.e. the k-th largest with k = ceil(alpha*N). Empty input yields the
/// empty-class sentinel.
inline double top_fraction_value(const std::vector<double>& values, double alpha) {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw argument_error("top_fraction_value: alpha must be in (0,1]");
    if (values.empty()) return ClassThresholds::kEmptySentinel;
    const auto n = values.size();
    const auto k = static_cast<std::size_t>(std::ceil(alpha * static_cast<double>(n)));
    std::vector<double> sorted(values);
    std::sort(sorted.begin(), sorted.end(), std::greater<double>());
    return sorted[std::min(k, n) - 1];
}

/// Intra-class thresholds delta[c]: the top-alpha cutoff over the softmax
/// values of the pixels whose argmax class is c.
template <typename Scalar>
ClassThresholds intra_class_thresholds(const ProbMap<Scalar>& p, double alpha) {
    check_prob_map(p, "intra_class_thresholds");
    const int C = p.num_classes();
    std::vector<std::vector<double>> per_class(C);
    for (Eigen::Index i = 0; i < p.values.rows(); ++i) {
        Eigen::Index c;
        p.values.row(i).maxCoeff(&c);
        per_class[c].push_back(static_cast<double>(p.values(i, c)));
    }
    ClassThresholds out;
    out.delta.resize(C);
    out.support_count.resize(C);
    for (int c = 0; c < C; ++c) {
        out.support_count[c] = static_cast<int>(per_class[c].size());
        out.delta[c] = top_fraction_value(per_class[c], alpha);
    }
    return out;
}

/// Intra-class thresholding only (the single-threshold baseline):
/// label the argmax class where its probability clears delta^(c).
template <typename Scalar>
PseudoLabelMap ld_pseudo_label(const ProbMap<Scalar>& p, double alpha) {
    const ClassThresholds th = intra_class_thresholds(p, alpha);
    PseudoLabelMap y;
    y.height = p.height;
    y.width = p.width;
    y.num_classes = p.num_classes();
    y.labels = Eigen::VectorXi::Constant(p.values.rows(), PseudoLabelMap::kAbstain);
    for (Eigen::Index i = 0; i < p.values.rows(); ++i) {
        Eigen::Index c;
        const double v = static_cast<double>(p.values.row(i).maxCoeff(&c));
        if (v >= th.delta[c]) y.labels[i] = static_cast<int>(c);
    }
    return y;
}

/// Double-threshold pseudo labels: argmax class, intra-class cutoff
/// (>= delta^(c)) and the global floor (> lambda) must all hold.
template <typename Scalar>
PseudoLabelMap dtpl_pseudo_label(const ProbMap<Scalar>& p, const ThresholdConfig& cfg) {
    validate(cfg);
    const ClassThresholds th = intra_class_thresholds(p, cfg.alpha);
    PseudoLabelMap y;
    y.height = p.height;
    y.width = p.width;
    y.num_classes = p.num_classes();
    y.labels = Eigen::VectorXi::Constant(p.values.rows(), PseudoLabelMap::kAbstain);
    for (Eigen::Index i = 0; i < p.values.rows(); ++i) {
        Eigen::Index c;
        const double v = static_cast<double>(p.values.row(i).maxCoeff(&c));
        if (v >= th.delta[c] && v > cfg.lambda) y.labels[i] = static_cast<int>(c);
    }
    return y;
}

/// Per-class labeled-pixel tallies. Fractions are relative to the total
/// pixel count, so they sum to the labeled fraction of the map.
struct LabelCoverage {
    std::vector<long> count;
    std::vector<double> fraction;
    long labeled_total = 0;
    double abstain_fraction = 0.0;
};

inline LabelCoverage label_coverage_stats(const PseudoLabelMap& y) {
    LabelCoverage cov;
    cov.count.assign(y.num_classes, 0);
    cov.fraction.assign(y.num_classes, 0.0);
    for (Eigen::Index i = 0; i < y.labels.size(); ++i)
        if (y.labels[i] != PseudoLabelMap::kAbstain) ++cov.count[y.labels[i]];
    const double n = static_cast<double>(y.labels.size());
    for (int c = 0; c < y.num_classes; ++c) {
        cov.labeled_total += cov.count[c];
        cov.fraction[c] = static_cast<double>(cov.count[c]) / n;
    }
    cov.abstain_fraction = 1.0 - static_cast<double>(cov.labeled_total) / n;
    return cov;
}

}  // namespace sfuda

#endif
