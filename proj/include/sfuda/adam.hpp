#ifndef SFUDA_ADAM_HPP
#define SFUDA_ADAM_HPP

#include <vector>

#include "sfuda/params.hpp"

namespace sfuda {

/// Adam with the classic L2-style weight decay folded into the gradient.
/// State vectors are keyed by position in the trainable parameter list,
/// whose order is deterministic for a given model descriptor.
template <typename Scalar>
class Adam {
public:
    Adam(Scalar learning_rate, Scalar weight_decay, Scalar beta1 = Scalar(0.9),
         Scalar beta2 = Scalar(0.999), Scalar eps = Scalar(1e-8))
        : lr_(learning_rate), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    /// One update over the trainable entries of `params`; `grads` must be
    /// aligned with those entries (one flat vector each).
    void step(ParamList<Scalar>& params, const std::vector<VecX<Scalar>>& grads) {
        if (m_.empty()) {
            for (const auto& p : params)
                if (p.trainable) {
                    m_.push_back(VecX<Scalar>::Zero(p.size));
                    v_.push_back(VecX<Scalar>::Zero(p.size));
                }
        }
        ++t_;
        const Scalar bc1 = Scalar(1) - std::pow(beta1_, Scalar(t_));
        const Scalar bc2 = Scalar(1) - std::pow(beta2_, Scalar(t_));
        std::size_t k = 0;
        for (auto& p : params) {
            if (!p.trainable) continue;
            auto theta = p.vec();
            VecX<Scalar> g = grads.at(k);
            if (wd_ != Scalar(0)) g += wd_ * theta;
            m_[k] = beta1_ * m_[k] + (Scalar(1) - beta1_) * g;
            v_[k] = beta2_ * v_[k] + (Scalar(1) - beta2_) * g.cwiseProduct(g);
            theta.array() -=
                lr_ * (m_[k].array() / bc1) / ((v_[k].array() / bc2).sqrt() + eps_);
            ++k;
        }
    }

    void reset() {
        m_.clear();
        v_.clear();
        t_ = 0;
    }

private:
    Scalar lr_, wd_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<VecX<Scalar>> m_, v_;
};

}  // namespace sfuda

#endif
