#ifndef SFUDA_MODEL_HPP
#define SFUDA_MODEL_HPP

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sfuda/adam.hpp"
#include "sfuda/config.hpp"
#include "sfuda/losses.hpp"
#include "sfuda/params.hpp"
#include "sfuda/rng.hpp"
#include "sfuda/types.hpp"

namespace sfuda {

/// Channel plan of the encoder-decoder. Stage i runs at resolution
/// H/2^i x W/2^i; input dims must be divisible by 2^(stages-1).
struct ModelDescriptor {
    int in_channels = 1;
    std::vector<int> stage_channels{16, 32, 64};
    int num_classes = 3;
    double bn_momentum = 0.1;
    double bn_eps = 1e-5;
};

inline void validate(const ModelDescriptor& d) {
    if (d.stage_channels.size() < 2) throw config_error("model descriptor needs >= 2 stages");
    if (d.num_classes < 2) throw config_error("model descriptor needs >= 2 classes");
    if (d.in_channels != 1) throw config_error("model descriptor supports 1 input channel");
    for (int c : d.stage_channels)
        if (c < 1) throw config_error("stage channel widths must be positive");
    if (!(d.bn_momentum > 0.0 && d.bn_momentum <= 1.0))
        throw config_error("bn_momentum must be in (0,1]");
}

/// Hand-computed trainable parameter total for a descriptor.
inline long expected_parameter_count(const ModelDescriptor& d) {
    long total = 0;
    int prev = d.in_channels;
    for (int ch : d.stage_channels) {
        total += long(ch) * 9 * prev + ch;  // 3x3 conv
        total += 2L * ch;                   // gamma, beta
        prev = ch;
    }
    for (std::size_t l = 0; l + 1 < d.stage_channels.size(); ++l) {
        const int ch = d.stage_channels[l], up = d.stage_channels[l + 1];
        total += long(ch) * up + ch;       // 1x1 projection
        total += long(ch) * 9 * ch + ch;   // 3x3 conv
        total += 2L * ch;
    }
    total += long(d.num_classes) * d.stage_channels[0] + d.num_classes;  // head
    return total;
}

enum class ForwardMode { train, eval };

namespace nn {

// Feature maps are C x (N*H*W) with column index n*(H*W) + y*W + x.

template <typename Scalar>
struct Conv {
    int in_ch = 0, out_ch = 0, ksize = 1;
    MatX<Scalar> weight;  // out_ch x (ksize*ksize*in_ch)
    VecX<Scalar> bias;
};

template <typename Scalar>
struct BatchNorm {
    VecX<Scalar> gamma, beta, running_mean, running_var;
    Scalar eps = Scalar(1e-5);
};

/// im2col for a same-padded ksize x ksize convolution; tap t = dy*ksize+dx
/// occupies rows [t*C, (t+1)*C).
template <typename Scalar>
MatX<Scalar> im2col(const MatX<Scalar>& x, int n, int h, int w, int ksize) {
    const int C = static_cast<int>(x.rows());
    const int pad = ksize / 2;
    MatX<Scalar> col = MatX<Scalar>::Zero(Eigen::Index(ksize) * ksize * C, x.cols());
    for (int t = 0; t < ksize * ksize; ++t) {
        const int dy = t / ksize - pad, dx = t % ksize - pad;
        for (int img = 0; img < n; ++img) {
            const Eigen::Index base = Eigen::Index(img) * h * w;
            for (int y = 0; y < h; ++y) {
                const int sy = y + dy;
                if (sy < 0 || sy >= h) continue;
                const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
                if (x0 >= x1) continue;
                col.block(Eigen::Index(t) * C, base + Eigen::Index(y) * w + x0, C, x1 - x0) =
                    x.block(0, base + Eigen::Index(sy) * w + x0 + dx, C, x1 - x0);
            }
        }
    }
    return col;
}

/// Transpose of im2col: scatter-adds column gradients back onto the grid.
template <typename Scalar>
MatX<Scalar> col2im(const MatX<Scalar>& dcol, int C, int n, int h, int w, int ksize) {
    const int pad = ksize / 2;
    MatX<Scalar> dx_img = MatX<Scalar>::Zero(C, dcol.cols());
    for (int t = 0; t < ksize * ksize; ++t) {
        const int dy = t / ksize - pad, dx = t % ksize - pad;
        for (int img = 0; img < n; ++img) {
            const Eigen::Index base = Eigen::Index(img) * h * w;
            for (int y = 0; y < h; ++y) {
                const int sy = y + dy;
                if (sy < 0 || sy >= h) continue;
                const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
                if (x0 >= x1) continue;
                dx_img.block(0, base + Eigen::Index(sy) * w + x0 + dx, C, x1 - x0) +=
                    dcol.block(Eigen::Index(t) * C, base + Eigen::Index(y) * w + x0, C, x1 - x0);
            }
        }
    }
    return dx_img;
}

template <typename Scalar>
struct ConvCache {
    MatX<Scalar> col;    // ksize==3: im2col of the input
    MatX<Scalar> input;  // ksize==1: the raw input
    int n = 0, h = 0, w = 0;
};

template <typename Scalar>
MatX<Scalar> conv_forward(const Conv<Scalar>& conv, const MatX<Scalar>& x, int n, int h, int w,
                          ConvCache<Scalar>* cache) {
    MatX<Scalar> out(conv.out_ch, x.cols());
    if (conv.ksize == 1) {
        out.noalias() = conv.weight * x;
        if (cache) cache->input = x;
    } else {
        MatX<Scalar> col = im2col(x, n, h, w, conv.ksize);
        out.noalias() = conv.weight * col;
        if (cache) cache->col = std::move(col);
    }
    if (cache) {
        cache->n = n;
        cache->h = h;
        cache->w = w;
    }
    out.colwise() += conv.bias;
    return out;
}

template <typename Scalar>
MatX<Scalar> conv_backward(const Conv<Scalar>& conv, const ConvCache<Scalar>& cache,
                           const MatX<Scalar>& dout, MatX<Scalar>& dweight, VecX<Scalar>& dbias) {
    dbias = dout.rowwise().sum();
    MatX<Scalar> dx;
    if (conv.ksize == 1) {
        dweight.noalias() = dout * cache.input.transpose();
        dx.noalias() = conv.weight.transpose() * dout;
    } else {
        dweight.noalias() = dout * cache.col.transpose();
        MatX<Scalar> dcol;
        dcol.noalias() = conv.weight.transpose() * dout;
        dx = col2im(dcol, conv.in_ch, cache.n, cache.h, cache.w, conv.ksize);
    }
    return dx;
}

template <typename Scalar>
struct BnCache {
    MatX<Scalar> xhat;
    VecX<Scalar> inv_std;
    ForwardMode mode = ForwardMode::train;
};

/// Train mode normalizes with batch statistics and EMA-updates the running
/// ones; eval mode uses the running statistics only.
template <typename Scalar>
MatX<Scalar> bn_forward(BatchNorm<Scalar>& bn, const MatX<Scalar>& x, ForwardMode mode,
                        Scalar momentum, BnCache<Scalar>* cache) {
    MatX<Scalar> xhat;
    VecX<Scalar> inv_std;
    if (mode == ForwardMode::train) {
        const VecX<Scalar> mean = x.rowwise().mean();
        MatX<Scalar> xc = x.colwise() - mean;
        const VecX<Scalar> var = xc.array().square().rowwise().mean();
        bn.running_mean = (Scalar(1) - momentum) * bn.running_mean + momentum * mean;
        bn.running_var = (Scalar(1) - momentum) * bn.running_var + momentum * var;
        inv_std = (var.array() + bn.eps).rsqrt();
        xhat = std::move(xc);
        xhat.array().colwise() *= inv_std.array();
    } else {
        inv_std = (bn.running_var.array() + bn.eps).rsqrt();
        xhat = x.colwise() - bn.running_mean;
        xhat.array().colwise() *= inv_std.array();
    }
    MatX<Scalar> out = xhat;
    out.array().colwise() *= bn.gamma.array();
    out.colwise() += bn.beta;
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv_std);
        cache->mode = mode;
    }
    return out;
}

template <typename Scalar>
MatX<Scalar> bn_backward(const BatchNorm<Scalar>& bn, const BnCache<Scalar>& cache,
                         const MatX<Scalar>& dout, VecX<Scalar>& dgamma, VecX<Scalar>& dbeta) {
    dgamma = (dout.array() * cache.xhat.array()).rowwise().sum();
    dbeta = dout.rowwise().sum();
    MatX<Scalar> dxhat = dout;
    dxhat.array().colwise() *= bn.gamma.array();
    if (cache.mode == ForwardMode::eval) {
        // Running statistics are constants; only the affine map differentiates.
        dxhat.array().colwise() *= cache.inv_std.array();
        return dxhat;
    }
    const auto m = static_cast<Scalar>(dout.cols());
    const VecX<Scalar> sum_dxhat = dxhat.rowwise().sum();
    const VecX<Scalar> sum_dxhat_xhat = (dxhat.array() * cache.xhat.array()).rowwise().sum();
    MatX<Scalar> dx = (m * dxhat).colwise() - sum_dxhat;
    dx.array() -= cache.xhat.array().colwise() * sum_dxhat_xhat.array();
    dx.array().colwise() *= cache.inv_std.array() / m;
    return dx;
}

template <typename Scalar>
MatX<Scalar> relu_forward(MatX<Scalar> x) {
    return x.cwiseMax(Scalar(0));
}

template <typename Scalar>
MatX<Scalar> relu_backward(const MatX<Scalar>& out, const MatX<Scalar>& dout) {
    return (out.array() > Scalar(0)).select(dout, MatX<Scalar>::Zero(dout.rows(), dout.cols()));
}

template <typename Scalar>
MatX<Scalar> avgpool2_forward(const MatX<Scalar>& x, int n, int h, int w) {
    const int oh = h / 2, ow = w / 2;
    MatX<Scalar> out(x.rows(), Eigen::Index(n) * oh * ow);
    for (int img = 0; img < n; ++img) {
        const Eigen::Index ibase = Eigen::Index(img) * h * w;
        const Eigen::Index obase = Eigen::Index(img) * oh * ow;
        for (int y = 0; y < oh; ++y)
            for (int x2 = 0; x2 < ow; ++x2) {
                const Eigen::Index i0 = ibase + Eigen::Index(2 * y) * w + 2 * x2;
                out.col(obase + Eigen::Index(y) * ow + x2) =
                    Scalar(0.25) * (x.col(i0) + x.col(i0 + 1) + x.col(i0 + w) + x.col(i0 + w + 1));
            }
    }
    return out;
}

template <typename Scalar>
MatX<Scalar> avgpool2_backward(const MatX<Scalar>& dout, int n, int h, int w) {
    const int oh = h / 2, ow = w / 2;
    MatX<Scalar> dx = MatX<Scalar>::Zero(dout.rows(), Eigen::Index(n) * h * w);
    for (int img = 0; img < n; ++img) {
        const Eigen::Index ibase = Eigen::Index(img) * h * w;
        const Eigen::Index obase = Eigen::Index(img) * oh * ow;
        for (int y = 0; y < oh; ++y)
            for (int x2 = 0; x2 < ow; ++x2) {
                const VecX<Scalar> g = Scalar(0.25) * dout.col(obase + Eigen::Index(y) * ow + x2);
                const Eigen::Index i0 = ibase + Eigen::Index(2 * y) * w + 2 * x2;
                dx.col(i0) += g;
                dx.col(i0 + 1) += g;
                dx.col(i0 + w) += g;
                dx.col(i0 + w + 1) += g;
            }
    }
    return dx;
}

struct BilinearTaps {
    std::vector<int> lo, hi;
    std::vector<double> t;  // weight on hi
};

inline BilinearTaps bilinear_up2_taps(int in_size) {
    BilinearTaps taps;
    const int out_size = 2 * in_size;
    taps.lo.resize(out_size);
    taps.hi.resize(out_size);
    taps.t.resize(out_size);
    for (int i = 0; i < out_size; ++i) {
        const double src = 0.5 * i - 0.25;
        int lo = static_cast<int>(std::floor(src));
        double t = src - lo;
        if (lo < 0) {
            lo = 0;
            t = 0.0;
        }
        int hi = lo + 1;
        if (hi >= in_size) {
            hi = in_size - 1;
            lo = hi;
            t = 0.0;
        }
        taps.lo[i] = lo;
        taps.hi[i] = hi;
        taps.t[i] = t;
    }
    return taps;
}

/// x2 bilinear upsampling (half-pixel centers, edge clamped).
template <typename Scalar>
MatX<Scalar> bilinear_up2_forward(const MatX<Scalar>& x, int n, int h, int w) {
    const BilinearTaps ty = bilinear_up2_taps(h), tx = bilinear_up2_taps(w);
    const int oh = 2 * h, ow = 2 * w;
    MatX<Scalar> out(x.rows(), Eigen::Index(n) * oh * ow);
    for (int img = 0; img < n; ++img) {
        const Eigen::Index ibase = Eigen::Index(img) * h * w;
        const Eigen::Index obase = Eigen::Index(img) * oh * ow;
        for (int y = 0; y < oh; ++y) {
            const Scalar wy1 = Scalar(ty.t[y]), wy0 = Scalar(1) - wy1;
            const Eigen::Index r0 = ibase + Eigen::Index(ty.lo[y]) * w;
            const Eigen::Index r1 = ibase + Eigen::Index(ty.hi[y]) * w;
            for (int x2 = 0; x2 < ow; ++x2) {
                const Scalar wx1 = Scalar(tx.t[x2]), wx0 = Scalar(1) - wx1;
                out.col(obase + Eigen::Index(y) * ow + x2) =
                    wy0 * (wx0 * x.col(r0 + tx.lo[x2]) + wx1 * x.col(r0 + tx.hi[x2])) +
                    wy1 * (wx0 * x.col(r1 + tx.lo[x2]) + wx1 * x.col(r1 + tx.hi[x2]));
            }
        }
    }
    return out;
}

template <typename Scalar>
MatX<Scalar> bilinear_up2_backward(const MatX<Scalar>& dout, int n, int h, int w) {
    const BilinearTaps ty = bilinear_up2_taps(h), tx = bilinear_up2_taps(w);
    const int oh = 2 * h, ow = 2 * w;
    MatX<Scalar> dx = MatX<Scalar>::Zero(dout.rows(), Eigen::Index(n) * h * w);
    for (int img = 0; img < n; ++img) {
        const Eigen::Index ibase = Eigen::Index(img) * h * w;
        const Eigen::Index obase = Eigen::Index(img) * oh * ow;
        for (int y = 0; y < oh; ++y) {
            const Scalar wy1 = Scalar(ty.t[y]), wy0 = Scalar(1) - wy1;
            const Eigen::Index r0 = ibase + Eigen::Index(ty.lo[y]) * w;
            const Eigen::Index r1 = ibase + Eigen::Index(ty.hi[y]) * w;
            for (int x2 = 0; x2 < ow; ++x2) {
                const Scalar wx1 = Scalar(tx.t[x2]), wx0 = Scalar(1) - wx1;
                const auto g = dout.col(obase + Eigen::Index(y) * ow + x2);
                dx.col(r0 + tx.lo[x2]) += wy0 * wx0 * g;
                dx.col(r0 + tx.hi[x2]) += wy0 * wx1 * g;
                dx.col(r1 + tx.lo[x2]) += wy1 * wx0 * g;
                dx.col(r1 + tx.hi[x2]) += wy1 * wx1 * g;
            }
        }
    }
    return dx;
}

}  // namespace nn

template <typename Scalar>
struct ForwardCache {
    int n = 0, h = 0, w = 0;
    std::vector<nn::ConvCache<Scalar>> enc_conv;
    std::vector<nn::BnCache<Scalar>> enc_bn;
    std::vector<MatX<Scalar>> enc_act;  // post-ReLU stage outputs (the skips)
    std::vector<nn::ConvCache<Scalar>> dec_proj;
    std::vector<nn::ConvCache<Scalar>> dec_conv;
    std::vector<nn::BnCache<Scalar>> dec_bn;
    std::vector<MatX<Scalar>> dec_act;
    nn::ConvCache<Scalar> head;
};

/// Small BN-bearing encoder-decoder segmentation network with named,
/// deterministically ordered parameters. Single-writer: train from one
/// thread; share read-only copies across threads for inference.
template <typename Scalar>
class SegModel {
public:
    SegModel() = default;

    const ModelDescriptor& descriptor() const { return desc_; }
    int num_classes() const { return desc_.num_classes; }
    int num_stages() const { return static_cast<int>(desc_.stage_channels.size()); }
    Scalar bn_momentum() const { return Scalar(desc_.bn_momentum); }
    void set_bn_momentum(double m) { desc_.bn_momentum = m; }

    /// Named views over all state: trainable parameters plus running stats.
    ParamList<Scalar> parameters() {
        ParamList<Scalar> out;
        visit_state([&out](const std::string& name, std::vector<int> shape, Scalar* data,
                           Eigen::Index size) {
            out.push_back({name, std::move(shape), data, size, param_name_trainable(name)});
        });
        return out;
    }
    ParamList<const Scalar> parameters() const {
        ParamList<const Scalar> out;
        const_cast<SegModel*>(this)->visit_state(
            [&out](const std::string& name, std::vector<int> shape, Scalar* data,
                   Eigen::Index size) {
                out.push_back({name, std::move(shape), data, size, param_name_trainable(name)});
            });
        return out;
    }

    Eigen::Index trainable_size() const {
        Eigen::Index total = 0;
        for (const auto& p : parameters())
            if (p.trainable) total += p.size;
        return total;
    }

    /// Batched forward. `images` are H x W matrices in [0,1]; logits come
    /// back as num_classes x (N*H*W) with column n*(H*W) + y*W + x.
    MatX<Scalar> forward_logits(const std::vector<MatX<Scalar>>& images, ForwardMode mode,
                                ForwardCache<Scalar>* cache = nullptr) const {
        if (images.empty()) throw argument_error("forward: empty batch");
        const int h = static_cast<int>(images[0].rows());
        const int w = static_cast<int>(images[0].cols());
        const int down = 1 << (num_stages() - 1);
        if (h % down != 0 || w % down != 0 || h == 0)
            throw argument_error("forward: input dims must be divisible by 2^(stages-1)");
        for (const auto& im : images)
            if (im.rows() != h || im.cols() != w) throw argument_error("forward: ragged batch");
        const int n = static_cast<int>(images.size());

        MatX<Scalar> x(1, Eigen::Index(n) * h * w);
        for (int img = 0; img < n; ++img)
            for (int y = 0; y < h; ++y)
                for (int x2 = 0; x2 < w; ++x2)
                    x(0, Eigen::Index(img) * h * w + Eigen::Index(y) * w + x2) = images[img](y, x2);

        // Train-mode forward mutates only the BN running statistics.
        auto* self = const_cast<SegModel*>(this);
        return self->forward_impl(std::move(x), n, h, w, mode, cache);
    }

    /// Softmax probabilities for one image.
    ProbMap<Scalar> forward_softmax(const MatX<Scalar>& image, ForwardMode mode) const {
        const MatX<Scalar> logits = forward_logits({image}, mode);
        return softmax_rows(MatX<Scalar>(logits.transpose()), static_cast<int>(image.rows()),
                            static_cast<int>(image.cols()));
    }

    /// Gradients for every trainable parameter, aligned with the trainable
    /// entries of parameters(). `dlogits` matches forward_logits' layout.
    std::vector<VecX<Scalar>> backward(const MatX<Scalar>& dlogits,
                                       const ForwardCache<Scalar>& cache) const {
        Grads g(*this);
        const int stages = num_stages();
        MatX<Scalar> d = nn::conv_backward(head_, cache.head, dlogits, g.head_w, g.head_b);
        for (int l = 0; l < stages - 1; ++l) {
            d = nn::relu_backward(cache.dec_act[l], d);
            d = nn::bn_backward(dec_bn_[l], cache.dec_bn[l], d, g.dec_bn_g[l], g.dec_bn_b[l]);
            d = nn::conv_backward(dec_conv_[l], cache.dec_conv[l], d, g.dec_conv_w[l],
                                  g.dec_conv_b[l]);
            // d is the gradient at proj(up) + skip_l; both branches receive it.
            g.skip[l] = d;
            d = nn::conv_backward(dec_proj_[l], cache.dec_proj[l], d, g.dec_proj_w[l],
                                  g.dec_proj_b[l]);
            d = nn::bilinear_up2_backward(d, cache.n, cache.h >> (l + 1), cache.w >> (l + 1));
        }
        for (int i = stages - 1; i >= 0; --i) {
            if (i < stages - 1) {
                d = nn::avgpool2_backward(d, cache.n, cache.h >> i, cache.w >> i);
                d += g.skip[i];
            }
            d = nn::relu_backward(cache.enc_act[i], d);
            d = nn::bn_backward(enc_bn_[i], cache.enc_bn[i], d, g.enc_bn_g[i], g.enc_bn_b[i]);
            d = nn::conv_backward(enc_conv_[i], cache.enc_conv[i], d, g.enc_conv_w[i],
                                  g.enc_conv_b[i]);
        }
        return g.flatten();
    }

    template <typename S>
    friend SegModel<S> build_model(const ModelDescriptor&, std::uint64_t);

private:
    struct Grads {
        std::vector<MatX<Scalar>> enc_conv_w, dec_proj_w, dec_conv_w;
        std::vector<VecX<Scalar>> enc_conv_b, dec_proj_b, dec_conv_b;
        std::vector<VecX<Scalar>> enc_bn_g, enc_bn_b, dec_bn_g, dec_bn_b;
        std::vector<MatX<Scalar>> skip;
        MatX<Scalar> head_w;
        VecX<Scalar> head_b;

        explicit Grads(const SegModel& m) {
            const int s = m.num_stages();
            enc_conv_w.resize(s);
            enc_conv_b.resize(s);
            enc_bn_g.resize(s);
            enc_bn_b.resize(s);
            dec_proj_w.resize(s - 1);
            dec_proj_b.resize(s - 1);
            dec_conv_w.resize(s - 1);
            dec_conv_b.resize(s - 1);
            dec_bn_g.resize(s - 1);
            dec_bn_b.resize(s - 1);
            skip.resize(s - 1);
        }

        // Must mirror visit_state()'s trainable entry order exactly.
        std::vector<VecX<Scalar>> flatten() {
            std::vector<VecX<Scalar>> out;
            auto push_mat = [&out](const MatX<Scalar>& m2) {
                out.emplace_back(Eigen::Map<const VecX<Scalar>>(m2.data(), m2.size()));
            };
            for (std::size_t i = 0; i < enc_conv_w.size(); ++i) {
                push_mat(enc_conv_w[i]);
                out.push_back(enc_conv_b[i]);
                out.push_back(enc_bn_g[i]);
                out.push_back(enc_bn_b[i]);
            }
            for (std::size_t l = 0; l < dec_proj_w.size(); ++l) {
                push_mat(dec_proj_w[l]);
                out.push_back(dec_proj_b[l]);
                push_mat(dec_conv_w[l]);
                out.push_back(dec_conv_b[l]);
                out.push_back(dec_bn_g[l]);
                out.push_back(dec_bn_b[l]);
            }
            push_mat(head_w);
            out.push_back(head_b);
            return out;
        }
    };

    MatX<Scalar> forward_impl(MatX<Scalar> x, int n, int h, int w, ForwardMode mode,
                              ForwardCache<Scalar>* cache) {
        const int stages = num_stages();
        ForwardCache<Scalar> local;
        ForwardCache<Scalar>& c = cache ? *cache : local;
        c.n = n;
        c.h = h;
        c.w = w;
        c.enc_conv.resize(stages);
        c.enc_bn.resize(stages);
        c.enc_act.resize(stages);
        c.dec_proj.resize(stages - 1);
        c.dec_conv.resize(stages - 1);
        c.dec_bn.resize(stages - 1);
        c.dec_act.resize(stages - 1);

        const Scalar mom = bn_momentum();
        for (int i = 0; i < stages; ++i) {
            const int hh = h >> i, ww = w >> i;
            if (i > 0) x = nn::avgpool2_forward(c.enc_act[i - 1], n, h >> (i - 1), w >> (i - 1));
            x = nn::conv_forward(enc_conv_[i], x, n, hh, ww, &c.enc_conv[i]);
            x = nn::bn_forward(enc_bn_[i], x, mode, mom, &c.enc_bn[i]);
            c.enc_act[i] = nn::relu_forward(std::move(x));
        }
        x = c.enc_act[stages - 1];
        for (int l = stages - 2; l >= 0; --l) {
            const int hh = h >> l, ww = w >> l;
            x = nn::bilinear_up2_forward(x, n, hh / 2, ww / 2);
            x = nn::conv_forward(dec_proj_[l], x, n, hh, ww, &c.dec_proj[l]);
            x += c.enc_act[l];
            x = nn::conv_forward(dec_conv_[l], x, n, hh, ww, &c.dec_conv[l]);
            x = nn::bn_forward(dec_bn_[l], x, mode, mom, &c.dec_bn[l]);
            c.dec_act[l] = nn::relu_forward(std::move(x));
            x = c.dec_act[l];
        }
        return nn::conv_forward(head_, x, n, h, w, &c.head);
    }

    template <typename Fn>
    void visit_state(Fn&& fn) {
        auto visit_conv = [&fn](const std::string& prefix, nn::Conv<Scalar>& cv) {
            fn(prefix + ".weight", std::vector<int>{cv.out_ch, cv.ksize, cv.ksize, cv.in_ch},
               cv.weight.data(), cv.weight.size());
            fn(prefix + ".bias", std::vector<int>{cv.out_ch}, cv.bias.data(), cv.bias.size());
        };
        auto visit_bn_params = [&fn](const std::string& prefix, nn::BatchNorm<Scalar>& bn) {
            const int ch = static_cast<int>(bn.gamma.size());
            fn(prefix + ".gamma", std::vector<int>{ch}, bn.gamma.data(), bn.gamma.size());
            fn(prefix + ".beta", std::vector<int>{ch}, bn.beta.data(), bn.beta.size());
        };
        auto visit_bn_stats = [&fn](const std::string& prefix, nn::BatchNorm<Scalar>& bn) {
            const int ch = static_cast<int>(bn.gamma.size());
            fn(prefix + ".running_mean", std::vector<int>{ch}, bn.running_mean.data(),
               bn.running_mean.size());
            fn(prefix + ".running_var", std::vector<int>{ch}, bn.running_var.data(),
               bn.running_var.size());
        };
        for (int i = 0; i < num_stages(); ++i) {
            const std::string p = "enc" + std::to_string(i);
            visit_conv(p + ".conv", enc_conv_[i]);
            visit_bn_params(p + ".bn", enc_bn_[i]);
            visit_bn_stats(p + ".bn", enc_bn_[i]);
        }
        for (int l = 0; l < num_stages() - 1; ++l) {
            const std::string p = "dec" + std::to_string(l);
            visit_conv(p + ".proj", dec_proj_[l]);
            visit_conv(p + ".conv", dec_conv_[l]);
            visit_bn_params(p + ".bn", dec_bn_[l]);
            visit_bn_stats(p + ".bn", dec_bn_[l]);
        }
        visit_conv("head", head_);
    }

    ModelDescriptor desc_;
    std::vector<nn::Conv<Scalar>> enc_conv_;
    std::vector<nn::BatchNorm<Scalar>> enc_bn_;
    std::vector<nn::Conv<Scalar>> dec_proj_;
    std::vector<nn::Conv<Scalar>> dec_conv_;
    std::vector<nn::BatchNorm<Scalar>> dec_bn_;
    nn::Conv<Scalar> head_;
};

/// Deterministic He-style initialization given (descriptor, seed).
template <typename Scalar>
SegModel<Scalar> build_model(const ModelDescriptor& desc, std::uint64_t seed) {
    validate(desc);
    SegModel<Scalar> m;
    m.desc_ = desc;
    const int stages = static_cast<int>(desc.stage_channels.size());

    auto make_conv = [seed](const std::string& name, int in_ch, int out_ch, int k) {
        nn::Conv<Scalar> cv;
        cv.in_ch = in_ch;
        cv.out_ch = out_ch;
        cv.ksize = k;
        cv.weight.resize(out_ch, Eigen::Index(k) * k * in_ch);
        cv.bias = VecX<Scalar>::Zero(out_ch);
        Rng rng(derive_seed(seed, "init/" + name));
        const double std_dev = std::sqrt(2.0 / (static_cast<double>(k) * k * in_ch));
        for (Eigen::Index j = 0; j < cv.weight.cols(); ++j)
            for (Eigen::Index i = 0; i < cv.weight.rows(); ++i)
                cv.weight(i, j) = static_cast<Scalar>(rng.normal(0.0, std_dev));
        return cv;
    };
    auto make_bn = [&desc](int channels) {
        nn::BatchNorm<Scalar> bn;
        bn.gamma = VecX<Scalar>::Ones(channels);
        bn.beta = VecX<Scalar>::Zero(channels);
        bn.running_mean = VecX<Scalar>::Zero(channels);
        bn.running_var = VecX<Scalar>::Ones(channels);
        bn.eps = Scalar(desc.bn_eps);
        return bn;
    };

    int prev = desc.in_channels;
    for (int i = 0; i < stages; ++i) {
        const int ch = desc.stage_channels[i];
        m.enc_conv_.push_back(make_conv("enc" + std::to_string(i), prev, ch, 3));
        m.enc_bn_.push_back(make_bn(ch));
        prev = ch;
    }
    m.dec_proj_.resize(stages - 1);
    m.dec_conv_.resize(stages - 1);
    m.dec_bn_.resize(stages - 1);
    for (int l = 0; l < stages - 1; ++l) {
        const int ch = desc.stage_channels[l];
        const int ch_up = desc.stage_channels[l + 1];
        m.dec_proj_[l] = make_conv("dec" + std::to_string(l) + ".proj", ch_up, ch, 1);
        m.dec_conv_[l] = make_conv("dec" + std::to_string(l) + ".conv", ch, ch, 3);
        m.dec_bn_[l] = make_bn(ch);
    }
    m.head_ = make_conv("head", desc.stage_channels[0], desc.num_classes, 1);
    return m;
}

/// Reconstructs the channel plan from a snapshot's entry shapes, so a model
/// can be rebuilt to receive it.
template <typename Scalar>
ModelDescriptor infer_descriptor(const ParameterSnapshot<Scalar>& snap) {
    ModelDescriptor d;
    d.stage_channels.clear();
    for (const auto& e : snap.entries) {
        if (e.name.rfind("enc", 0) == 0 && e.name.find(".conv.weight") != std::string::npos)
            d.stage_channels.push_back(e.shape.at(0));
        if (e.name == "enc0.conv.weight") d.in_channels = e.shape.at(3);
        if (e.name == "head.weight") d.num_classes = e.shape.at(0);
    }
    validate(d);
    return d;
}

/// Deep copy of every named tensor; later model mutation leaves it intact.
template <typename Scalar>
ParameterSnapshot<Scalar> snapshot_parameters(const SegModel<Scalar>& model) {
    ParameterSnapshot<Scalar> snap;
    for (const auto& p : model.parameters()) {
        typename ParameterSnapshot<Scalar>::Entry e;
        e.name = p.name;
        e.shape = p.shape;
        e.values = p.vec();
        e.trainable = p.trainable;
        snap.entries.push_back(std::move(e));
    }
    return snap;
}

/// Writes snapshot values back into the model, matching entries by name.
template <typename Scalar>
void restore_parameters(SegModel<Scalar>& model, const ParameterSnapshot<Scalar>& snap) {
    auto params = model.parameters();
    if (params.size() != snap.entries.size())
        throw argument_error("restore_parameters: entry count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& e = snap.entries[i];
        if (e.name != params[i].name || e.values.size() != params[i].size)
            throw argument_error("restore_parameters: mismatch at entry '" + params[i].name + "'");
        params[i].vec() = e.values;
    }
}

/// Recomputes BN running statistics on target batches by EMA sweeps; with
/// train_gamma_beta, additionally tunes gamma/beta for entropy_steps Adam
/// steps against self-entropy minimization (eval-mode statistics). All
/// non-BN parameters are bit-identical before and after.
template <typename Scalar>
SegModel<Scalar> adapt_bn_statistics(SegModel<Scalar> model,
                                     const std::vector<std::vector<MatX<Scalar>>>& target_batches,
                                     const BnAdaptConfig& cfg) {
    validate(cfg);
    if (target_batches.empty() || target_batches[0].empty())
        throw argument_error("adapt_bn_statistics: need at least one non-empty target batch");

    const double saved_momentum = model.descriptor().bn_momentum;
    model.set_bn_momentum(cfg.momentum);
    for (int pass = 0; pass < cfg.passes; ++pass)
        for (const auto& batch : target_batches) model.forward_logits(batch, ForwardMode::train);
    model.set_bn_momentum(saved_momentum);

    if (cfg.train_gamma_beta && cfg.entropy_steps > 0) {
        Adam<Scalar> opt(Scalar(cfg.gamma_beta_lr), Scalar(0));
        auto params = model.parameters();
        for (int step = 0; step < cfg.entropy_steps; ++step) {
            const auto& batch = target_batches[step % target_batches.size()];
            ForwardCache<Scalar> cache;
            const MatX<Scalar> logits = model.forward_logits(batch, ForwardMode::eval, &cache);
            const int h = static_cast<int>(batch[0].rows());
            const int w = static_cast<int>(batch[0].cols());
            const ProbMap<Scalar> p = softmax_rows(
                MatX<Scalar>(logits.transpose()), static_cast<int>(batch.size()) * h, w);
            const MatX<Scalar> dz = softmax_backward(p, self_entropy_grad(p));
            auto grads = model.backward(MatX<Scalar>(dz.transpose()), cache);
            // Only gamma/beta may move; everything else gets a zero gradient.
            std::size_t k = 0;
            for (const auto& pr : params) {
                if (!pr.trainable) continue;
                const bool is_gb = pr.name.find(".bn.gamma") != std::string::npos ||
                                   pr.name.find(".bn.beta") != std::string::npos;
                if (!is_gb) grads[k].setZero();
                ++k;
            }
            opt.step(params, grads);
        }
    }
    return model;
}

}  // namespace sfuda

#endif
