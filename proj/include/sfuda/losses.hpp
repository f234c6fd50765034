#ifndef SFUDA_LOSSES_HPP
#define SFUDA_LOSSES_HPP

#include <cmath>
#include <string>
#include <type_traits>

#include "sfuda/config.hpp"
#include "sfuda/params.hpp"
#include "sfuda/types.hpp"

namespace sfuda {

/// Log arguments are clamped to [kLogClampEps, 1] so the losses stay finite
/// at p = 0. Gradients below treat the clamped region as constant.
inline constexpr double kLogClampEps = 1e-8;

/// Scalar components of one adaptation-loss evaluation.
/// `self_entropy` is the signed term as it enters the total (+H for mode
/// min, -H for max, 0 for none), and `wc_penalty` is the anchoring term
/// after optional parameter-count normalization, so that
///   total == adaptation + entropy_coefficient * self_entropy
///            + wc_coefficient * wc_penalty
/// holds exactly in double precision.
struct LossBreakdown {
    double adaptation = 0.0;
    double self_entropy = 0.0;
    double wc_penalty = 0.0;
    double total = 0.0;
    long labeled_pixel_count = 0;
};

namespace detail {

template <typename Scalar>
Scalar clamped_log(Scalar p) {
    const Scalar lo = Scalar(kLogClampEps);
    return std::log(p < lo ? lo : (p > Scalar(1) ? Scalar(1) : p));
}

/// Derivative of clamped_log; zero where the clamp is active.
template <typename Scalar>
Scalar clamped_log_d(Scalar p) {
    return (p >= Scalar(kLogClampEps) && p <= Scalar(1)) ? Scalar(1) / p : Scalar(0);
}

template <typename Scalar>
void check_loss_inputs(const ProbMap<Scalar>& p, const PseudoLabelMap& y, const char* who) {
    check_same_shape(p, y, who);
    check_prob_map(p, who);
}

}  // namespace detail

/// Mean over labeled pixels of -log p at the pseudo-labeled class.
/// Abstaining pixels are excluded; returns 0 when nothing is labeled.
template <typename Scalar>
Scalar cross_entropy_pseudo(const ProbMap<Scalar>& p, const PseudoLabelMap& y) {
    detail::check_loss_inputs(p, y, "cross_entropy_pseudo");
    double sum = 0;  // double accumulation keeps float instantiations exact enough for FD checks
    Eigen::Index labeled = 0;
    for (Eigen::Index i = 0; i < y.labels.size(); ++i) {
        const int c = y.labels[i];
        if (c == PseudoLabelMap::kAbstain) continue;
        sum -= static_cast<double>(detail::clamped_log(p.values(i, c)));
        ++labeled;
    }
    return labeled == 0 ? Scalar(0) : Scalar(sum / static_cast<double>(labeled));
}

/// d cross_entropy_pseudo / d p, same shape as p.values.
template <typename Scalar>
MatX<Scalar> cross_entropy_pseudo_grad(const ProbMap<Scalar>& p, const PseudoLabelMap& y) {
    detail::check_loss_inputs(p, y, "cross_entropy_pseudo_grad");
    MatX<Scalar> g = MatX<Scalar>::Zero(p.values.rows(), p.values.cols());
    const Eigen::Index labeled = y.labeled_count();
    if (labeled == 0) return g;
    const Scalar inv_m = Scalar(1) / Scalar(labeled);
    for (Eigen::Index i = 0; i < y.labels.size(); ++i) {
        const int c = y.labels[i];
        if (c == PseudoLabelMap::kAbstain) continue;
        g(i, c) = -detail::clamped_log_d(p.values(i, c)) * inv_m;
    }
    return g;
}

/// Entropy-increase adaptation loss: mean over labeled pixels of
/// -sum_c (y_c - p_c) log p_c. Decomposes into the pseudo-label cross
/// entropy plus sum_c p_c log p_c on the same pixels, which is what damps
/// already-confident (learned) pixels.
template <typename Scalar>
Scalar entropy_increase_loss(const ProbMap<Scalar>& p, const PseudoLabelMap& y) {
    detail::check_loss_inputs(p, y, "entropy_increase_loss");
    double sum = 0;
    Eigen::Index labeled = 0;
    const int C = p.num_classes();
    for (Eigen::Index i = 0; i < y.labels.size(); ++i) {
        const int yc = y.labels[i];
        if (yc == PseudoLabelMap::kAbstain) continue;
        for (int c = 0; c < C; ++c) {
            const Scalar pv = p.values(i, c);
            const double target = (c == yc) ? 1.0 : 0.0;
            sum += (static_cast<double>(pv) - target) *
                   static_cast<double>(detail::clamped_log(pv));
        }
        ++labeled;
    }
    return labeled == 0 ? Scalar(0) : Scalar(sum / static_cast<double>(labeled));
}

template <typename Scalar>
MatX<Scalar> entropy_increase_grad(const ProbMap<Scalar>& p, const PseudoLabelMap& y) {
    detail::check_loss_inputs(p, y, "entropy_increase_grad");
    MatX<Scalar> g = MatX<Scalar>::Zero(p.values.rows(), p.values.cols());
    const Eigen::Index labeled = y.labeled_count();
    if (labeled == 0) return g;
    const Scalar inv_m = Scalar(1) / Scalar(labeled);
    const int C = p.num_classes();
    for (Eigen::Index i = 0; i < y.labels.size(); ++i) {
        const int yc = y.labels[i];
        if (yc == PseudoLabelMap::kAbstain) continue;
        for (int c = 0; c < C; ++c) {
            const Scalar pv = p.values(i, c);
            const Scalar target = (c == yc) ? Scalar(1) : Scalar(0);
            g(i, c) = (detail::clamped_log(pv) + (pv - target) * detail::clamped_log_d(pv)) * inv_m;
        }
    }
    return g;
}

/// Shannon entropy of the prediction, mean over all pixels; in [0, log C].
template <typename Scalar>
Scalar self_entropy(const ProbMap<Scalar>& p) {
    check_prob_map(p, "self_entropy");
    double sum = 0;
    const int C = p.num_classes();
    for (Eigen::Index i = 0; i < p.values.rows(); ++i)
        for (int c = 0; c < C; ++c)
            sum -= static_cast<double>(p.values(i, c)) *
                   static_cast<double>(detail::clamped_log(p.values(i, c)));
    return Scalar(sum / static_cast<double>(p.values.rows()));
}

template <typename Scalar>
MatX<Scalar> self_entropy_grad(const ProbMap<Scalar>& p) {
    check_prob_map(p, "self_entropy_grad");
    const Scalar inv_n = Scalar(1) / Scalar(p.values.rows());
    return p.values.unaryExpr([inv_n](Scalar pv) {
        return -(detail::clamped_log(pv) + pv * detail::clamped_log_d(pv)) * inv_n;
    });
}

namespace detail {

template <typename A, typename B>
void check_structural_match(const ParamList<A>& theta, const ParameterSnapshot<B>& star) {
    std::size_t si = 0;
    for (const auto& t : theta) {
        if (!t.trainable) continue;
        while (si < star.entries.size() && !star.entries[si].trainable) ++si;
        if (si >= star.entries.size())
            throw argument_error("weight_consolidation: snapshot is missing entry '" + t.name + "'");
        const auto& s = star.entries[si];
        if (s.name != t.name || s.shape != t.shape || s.values.size() != t.size)
            throw argument_error("weight_consolidation: structural mismatch at entry '" + t.name +
                                 "' vs snapshot '" + s.name + "'");
        ++si;
    }
    while (si < star.entries.size() && !star.entries[si].trainable) ++si;
    if (si != star.entries.size())
        throw argument_error("weight_consolidation: snapshot has extra entry '" +
                             star.entries[si].name + "'");
}

}  // namespace detail

/// Sum of |theta_i - theta*_i| over every trainable scalar parameter.
/// `theta` may hold const or mutable views.
template <typename Scalar, typename PS,
          typename = std::enable_if_t<std::is_same_v<std::remove_const_t<PS>, Scalar>>>
Scalar weight_consolidation_penalty(const ParamList<PS>& theta,
                                    const ParameterSnapshot<Scalar>& theta_star) {
    detail::check_structural_match(theta, theta_star);
    double sum = 0;
    std::size_t si = 0;
    for (const auto& t : theta) {
        if (!t.trainable) continue;
        while (!theta_star.entries[si].trainable) ++si;
        const auto& sv = theta_star.entries[si].values;
        auto tv = t.vec();
        for (Eigen::Index k = 0; k < t.size; ++k)
            sum += std::abs(static_cast<double>(tv[k]) - static_cast<double>(sv[k]));
        ++si;
    }
    return Scalar(sum);
}

template <typename Scalar>
Scalar weight_consolidation_penalty(const ParameterSnapshot<Scalar>& a,
                                    const ParameterSnapshot<Scalar>& b) {
    return weight_consolidation_penalty(a.view(), b);
}

/// Adds coef * d(penalty)/d(theta) into `grads` (one flat gradient vector per
/// trainable entry, aligned with the trainable entries of `theta`). The L1
/// subgradient at 0 is taken as 0, so theta == theta* is stationary.
template <typename Scalar, typename PS,
          typename = std::enable_if_t<std::is_same_v<std::remove_const_t<PS>, Scalar>>>
void weight_consolidation_add_grad(const ParamList<PS>& theta,
                                   const ParameterSnapshot<Scalar>& theta_star, Scalar coef,
                                   std::vector<VecX<Scalar>>& grads) {
    detail::check_structural_match(theta, theta_star);
    std::size_t si = 0, gi = 0;
    for (const auto& t : theta) {
        if (!t.trainable) continue;
        while (!theta_star.entries[si].trainable) ++si;
        const auto& sv = theta_star.entries[si].values;
        auto tv = t.vec();
        auto& g = grads.at(gi);
        for (Eigen::Index k = 0; k < t.size; ++k) {
            const Scalar d = tv[k] - sv[k];
            if (d > Scalar(0)) g[k] += coef;
            else if (d < Scalar(0)) g[k] -= coef;
        }
        ++si;
        ++gi;
    }
}

template <typename PS>
Eigen::Index trainable_scalar_count(const ParamList<PS>& theta) {
    Eigen::Index n = 0;
    for (const auto& t : theta)
        if (t.trainable) n += t.size;
    return n;
}

/// Composite objective: adaptation term (cross entropy or entropy increase),
/// the signed self-entropy regularizer, and the weight-consolidation anchor.
template <typename Scalar, typename PS,
          typename = std::enable_if_t<std::is_same_v<std::remove_const_t<PS>, Scalar>>>
LossBreakdown total_adaptation_loss(const ProbMap<Scalar>& p, const PseudoLabelMap& y,
                                    const ParamList<PS>& theta,
                                    const ParameterSnapshot<Scalar>& theta_star,
                                    const AdaptationConfig& cfg) {
    if (cfg.entropy_mode != EntropyMode::none && cfg.entropy_mode != EntropyMode::min &&
        cfg.entropy_mode != EntropyMode::max)
        throw config_error("total_adaptation_loss: invalid entropy mode");
    if (cfg.use_ei && cfg.entropy_mode == EntropyMode::min)
        throw config_error("total_adaptation_loss: use_ei with entropy_mode=min is contradictory");
    if (!(std::isfinite(cfg.wc_coefficient) && cfg.wc_coefficient >= 0.0) ||
        !(std::isfinite(cfg.entropy_coefficient) && cfg.entropy_coefficient >= 0.0))
        throw config_error("total_adaptation_loss: coefficients must be finite and >= 0");

    LossBreakdown out;
    out.labeled_pixel_count = static_cast<long>(y.labeled_count());
    out.adaptation = static_cast<double>(cfg.use_ei ? entropy_increase_loss(p, y)
                                                    : cross_entropy_pseudo(p, y));
    if (cfg.entropy_mode != EntropyMode::none) {
        const double sign = cfg.entropy_mode == EntropyMode::min ? 1.0 : -1.0;
        out.self_entropy = sign * static_cast<double>(self_entropy(p));
    }
    if (cfg.use_wc) {
        double pen = static_cast<double>(weight_consolidation_penalty(theta, theta_star));
        if (cfg.wc_normalized) pen /= static_cast<double>(trainable_scalar_count(theta));
        out.wc_penalty = pen;
    }
    out.total = out.adaptation + cfg.entropy_coefficient * out.self_entropy +
                cfg.wc_coefficient * out.wc_penalty;
    return out;
}

/// Probability-side gradient of total_adaptation_loss (the WC term does not
/// depend on p).
template <typename Scalar>
MatX<Scalar> total_adaptation_loss_grad_prob(const ProbMap<Scalar>& p, const PseudoLabelMap& y,
                                             const AdaptationConfig& cfg) {
    MatX<Scalar> g = cfg.use_ei ? entropy_increase_grad(p, y) : cross_entropy_pseudo_grad(p, y);
    if (cfg.entropy_mode != EntropyMode::none) {
        const Scalar s = Scalar(cfg.entropy_mode == EntropyMode::min ? 1.0 : -1.0) *
                         Scalar(cfg.entropy_coefficient);
        g += s * self_entropy_grad(p);
    }
    return g;
}

/// Row-wise numerically stable softmax turning logits into a ProbMap.
template <typename Scalar>
ProbMap<Scalar> softmax_rows(const MatX<Scalar>& logits, int height, int width) {
    ProbMap<Scalar> p;
    p.height = height;
    p.width = width;
    p.values = (logits.colwise() - logits.rowwise().maxCoeff()).array().exp();
    p.values.array().colwise() /= p.values.rowwise().sum().array();
    return p;
}

/// Pulls a probability-side gradient back through the row-wise softmax:
/// dz_c = p_c * (g_c - sum_k g_k p_k).
template <typename Scalar>
MatX<Scalar> softmax_backward(const ProbMap<Scalar>& p, const MatX<Scalar>& grad_prob) {
    const VecX<Scalar> dot = (grad_prob.array() * p.values.array()).rowwise().sum();
    return (p.values.array() * (grad_prob.colwise() - dot).array()).matrix();
}

}  // namespace sfuda

#endif
