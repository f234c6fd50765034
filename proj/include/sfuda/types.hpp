#ifndef SFUDA_TYPES_HPP
#define SFUDA_TYPES_HPP

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "sfuda/errors.hpp"

namespace sfuda {

template <typename Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VecX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using ArrX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

using MatXi = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic>;

/// Per-pixel class-probability field. `values` is (H*W) x C with pixels in
/// row-major order (pixel index = y*W + x); every row sums to 1.
template <typename Scalar>
struct ProbMap {
    int height = 0;
    int width = 0;
    MatX<Scalar> values;  // (H*W) x C

    int num_classes() const { return static_cast<int>(values.cols()); }
    Eigen::Index num_pixels() const { return values.rows(); }
};

/// One-hot-or-abstain pseudo labels, kept as one class id per pixel with
/// kAbstain for abstaining pixels. Per-pixel exclusivity and the {0,1}
/// range of the one-hot view hold by construction.
struct PseudoLabelMap {
    static constexpr int kAbstain = -1;

    int height = 0;
    int width = 0;
    int num_classes = 0;
    Eigen::VectorXi labels;  // H*W entries, kAbstain or [0, C)

    Eigen::Index num_pixels() const { return labels.size(); }

    Eigen::Index labeled_count() const {
        return (labels.array() != kAbstain).count();
    }

    /// Dense H*W x C binary expansion (the ŷ tensor itself).
    template <typename Scalar>
    MatX<Scalar> onehot() const {
        MatX<Scalar> y = MatX<Scalar>::Zero(labels.size(), num_classes);
        for (Eigen::Index i = 0; i < labels.size(); ++i)
            if (labels[i] != kAbstain) y(i, labels[i]) = Scalar(1);
        return y;
    }
};

template <typename Scalar>
inline void check_prob_map(const ProbMap<Scalar>& p, const char* who, Scalar tol = Scalar(1e-5)) {
    if (p.values.rows() != Eigen::Index(p.height) * p.width)
        throw argument_error(std::string(who) + ": ProbMap pixel count does not match H*W");
    if (!p.values.allFinite())
        throw argument_error(std::string(who) + ": non-finite probability value");
    if ((p.values.array() < Scalar(0)).any() || (p.values.array() > Scalar(1) + tol).any())
        throw argument_error(std::string(who) + ": probability outside [0,1]");
    const ArrX<Scalar> sums = p.values.rowwise().sum().array();
    if (((sums - Scalar(1)).abs() > tol).any())
        throw argument_error(std::string(who) + ": per-pixel probabilities do not sum to 1");
}

template <typename Scalar>
inline void check_same_shape(const ProbMap<Scalar>& p, const PseudoLabelMap& y, const char* who) {
    if (p.height != y.height || p.width != y.width || p.num_classes() != y.num_classes)
        throw argument_error(std::string(who) + ": ProbMap and PseudoLabelMap shapes differ");
}

}  // namespace sfuda

#endif
