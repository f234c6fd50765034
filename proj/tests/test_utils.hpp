#ifndef SFUDA_TEST_UTILS_HPP
#define SFUDA_TEST_UTILS_HPP

#include <functional>
#include <vector>

#include "sfuda/losses.hpp"
#include "sfuda/rng.hpp"
#include "sfuda/types.hpp"

namespace sfuda::test {

template <typename Scalar>
MatX<Scalar> random_logits(Rng& rng, int pixels, int classes, double span = 2.0) {
    MatX<Scalar> z(pixels, classes);
    for (int i = 0; i < pixels; ++i)
        for (int c = 0; c < classes; ++c) z(i, c) = static_cast<Scalar>(rng.uniform(-span, span));
    return z;
}

template <typename Scalar>
ProbMap<Scalar> random_prob_map(Rng& rng, int h, int w, int classes, double span = 2.0) {
    return softmax_rows(random_logits<Scalar>(rng, h * w, classes, span), h, w);
}

inline PseudoLabelMap random_label_map(Rng& rng, int h, int w, int classes,
                                       double abstain_prob = 0.3) {
    PseudoLabelMap y;
    y.height = h;
    y.width = w;
    y.num_classes = classes;
    y.labels.resize(h * w);
    for (int i = 0; i < h * w; ++i)
        y.labels[i] = rng.bernoulli(abstain_prob)
                          ? PseudoLabelMap::kAbstain
                          : static_cast<int>(rng.uniform_int(0, classes - 1));
    return y;
}

/// Central finite difference of f around *x with step h.
inline double central_diff(const std::function<double()>& f, double* x, double h) {
    const double saved = *x;
    *x = saved + h;
    const double fp = f();
    *x = saved - h;
    const double fm = f();
    *x = saved;
    return (fp - fm) / (2.0 * h);
}

inline double rel_error(double a, double b) {
    const double denom = std::max({std::abs(a), std::abs(b), 1e-8});
    return std::abs(a - b) / denom;
}

}  // namespace sfuda::test

#endif
