#ifndef SFUDA_DATA_HPP
#define SFUDA_DATA_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sfuda/config.hpp"
#include "sfuda/rng.hpp"
#include "sfuda/types.hpp"

namespace sfuda {

using ImageF = MatX<float>;  // H x W, values in [0,1]

/// One synthetic scene: grayscale image plus per-pixel class ids.
struct Sample {
    ImageF image;
    MatXi mask;
    std::string id;
    std::uint64_t seed = 0;
};

/// Intensity interval a class renders into.
struct IntensityBand {
    double lo = 0.0;
    double hi = 1.0;
};

/// Scene recipe: organ-like blobs per foreground class over a textured
/// background, each class confined to its own gray-level band.
struct SceneSpec {
    int image_size = 64;
    int num_classes = 3;  // class 0 is background
    int shapes_min = 1;
    int shapes_max = 3;
    std::vector<IntensityBand> intensity_bands{{0.45, 0.65}, {0.10, 0.30}, {0.75, 0.95}};
    double texture_noise_sigma = 0.03;
    double shape_radius_min = 0.10;  // fraction of image size
    double shape_radius_max = 0.22;
};

inline void validate(const SceneSpec& s) {
    if (s.image_size < 8) throw config_error("scene image_size must be >= 8");
    if (s.num_classes < 2) throw config_error("scene needs >= 2 classes");
    if (static_cast<int>(s.intensity_bands.size()) != s.num_classes)
        throw config_error("scene needs one intensity band per class");
    for (const auto& b : s.intensity_bands)
        if (!(0.0 <= b.lo && b.lo <= b.hi && b.hi <= 1.0))
            throw config_error("intensity bands must satisfy 0 <= lo <= hi <= 1");
    if (s.shapes_min < 0 || s.shapes_max < s.shapes_min)
        throw config_error("shapes_per_class range invalid");
    if (!(s.shape_radius_min > 0 && s.shape_radius_max >= s.shape_radius_min))
        throw config_error("shape radius range invalid");
}

enum class ShiftKind { identity, invert, gamma, contrast, bias_field, noise };

inline ShiftKind parse_shift_kind(const std::string& s) {
    if (s == "identity") return ShiftKind::identity;
    if (s == "invert") return ShiftKind::invert;
    if (s == "gamma") return ShiftKind::gamma;
    if (s == "contrast") return ShiftKind::contrast;
    if (s == "bias_field") return ShiftKind::bias_field;
    if (s == "noise") return ShiftKind::noise;
    throw config_error("unknown shift kind '" + s + "'");
}

inline const char* to_string(ShiftKind k) {
    switch (k) {
        case ShiftKind::identity: return "identity";
        case ShiftKind::invert: return "invert";
        case ShiftKind::gamma: return "gamma";
        case ShiftKind::contrast: return "contrast";
        case ShiftKind::bias_field: return "bias_field";
        default: return "noise";
    }
}

/// Intensity-only corruption of target images. Magnitude bounds:
///   identity: ignored   invert: [0,1]      gamma: (0,8]
///   contrast: [0,4]     bias_field: [0,1]  noise: [0,0.5]
struct DomainShiftSpec {
    ShiftKind kind = ShiftKind::identity;
    double magnitude = 0.0;
    std::uint64_t seed = 0;
};

inline void validate(const DomainShiftSpec& s) {
    const double m = s.magnitude;
    bool ok = true;
    switch (s.kind) {
        case ShiftKind::identity: break;
        case ShiftKind::invert: ok = m >= 0.0 && m <= 1.0; break;
        case ShiftKind::gamma: ok = m > 0.0 && m <= 8.0; break;
        case ShiftKind::contrast: ok = m >= 0.0 && m <= 4.0; break;
        case ShiftKind::bias_field: ok = m >= 0.0 && m <= 1.0; break;
        case ShiftKind::noise: ok = m >= 0.0 && m <= 0.5; break;
    }
    if (!ok)
        throw config_error(std::string("shift magnitude out of range for kind ") +
                           to_string(s.kind));
}

inline ImageF apply_domain_shift(const ImageF& image, const DomainShiftSpec& shift) {
    validate(shift);
    if (shift.kind == ShiftKind::identity) return image;
    ImageF out = image;
    const float m = static_cast<float>(shift.magnitude);
    switch (shift.kind) {
        case ShiftKind::invert:
            out = image.array() + m * (1.0f - 2.0f * image.array());
            break;
        case ShiftKind::gamma:
            out = image.array().max(0.0f).pow(m);
            break;
        case ShiftKind::contrast:
            out = 0.5f + (image.array() - 0.5f) * m;
            break;
        case ShiftKind::bias_field: {
            Rng rng(derive_seed(shift.seed, "bias_field"));
            const double fx = rng.uniform(0.5, 1.5), fy = rng.uniform(0.5, 1.5);
            const double px = rng.uniform(0.0, 2.0 * M_PI), py = rng.uniform(0.0, 2.0 * M_PI);
            for (Eigen::Index y = 0; y < out.rows(); ++y)
                for (Eigen::Index x = 0; x < out.cols(); ++x) {
                    const double field =
                        std::sin(2.0 * M_PI * fy * y / double(out.rows()) + py) *
                        std::sin(2.0 * M_PI * fx * x / double(out.cols()) + px);
                    out(y, x) = image(y, x) * static_cast<float>(1.0 + shift.magnitude * field);
                }
            break;
        }
        case ShiftKind::noise: {
            Rng rng(derive_seed(shift.seed, "noise"));
            for (Eigen::Index y = 0; y < out.rows(); ++y)
                for (Eigen::Index x = 0; x < out.cols(); ++x)
                    out(y, x) = image(y, x) + static_cast<float>(rng.normal(0.0, shift.magnitude));
            break;
        }
        default: break;
    }
    return out.cwiseMax(0.0f).cwiseMin(1.0f);
}

inline ImageF apply_shift_pipeline(ImageF image, const std::vector<DomainShiftSpec>& pipeline,
                                   std::uint64_t sample_seed) {
    for (std::size_t i = 0; i < pipeline.size(); ++i) {
        DomainShiftSpec s = pipeline[i];
        // Stochastic kinds draw per sample so no two images share noise.
        s.seed = derive_seed(sample_seed ^ s.seed, "shift/" + std::to_string(i));
        image = apply_domain_shift(image, s);
    }
    return image;
}

namespace detail {

struct Blob {
    double cx, cy, rx, ry, phi;
    bool radial;       // radial blob vs plain ellipse
    double lobe_amp;   // radial modulation amplitude
    int lobes;
    double lobe_phase;

    bool contains(double x, double y) const {
        const double dx = x - cx, dy = y - cy;
        const double u = std::cos(phi) * dx + std::sin(phi) * dy;
        const double v = -std::sin(phi) * dx + std::cos(phi) * dy;
        if (!radial) return (u / rx) * (u / rx) + (v / ry) * (v / ry) <= 1.0;
        const double theta = std::atan2(v / ry, u / rx);
        const double rho = std::sqrt((u / rx) * (u / rx) + (v / ry) * (v / ry));
        return rho <= 1.0 + lobe_amp * std::cos(lobes * theta + lobe_phase);
    }
};

}  // namespace detail

/// Renders one scene deterministically from (spec, seed). Shapes are drawn
/// class by class; later shapes overwrite earlier ones.
inline Sample generate_scene(const SceneSpec& spec, std::uint64_t seed) {
    validate(spec);
    Rng rng(derive_seed(seed, "scene"));
    const int n = spec.image_size;
    Sample s;
    s.seed = seed;
    s.image.resize(n, n);
    s.mask = MatXi::Zero(n, n);

    const auto& bg = spec.intensity_bands[0];
    const double bg_span = bg.hi - bg.lo;
    const double bg_level = bg.lo + bg_span * rng.uniform(0.35, 0.65);
    const double grad_amp = 0.25 * bg_span;
    const double grad_dir = rng.uniform(0.0, 2.0 * M_PI);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            const double t = (std::cos(grad_dir) * (x - n / 2.0) + std::sin(grad_dir) * (y - n / 2.0)) / n;
            s.image(y, x) = static_cast<float>(bg_level + grad_amp * t);
        }

    const double rmin = spec.shape_radius_min * n, rmax = spec.shape_radius_max * n;
    if (2.0 * rmax >= n) throw generation_error("generate_scene: shapes cannot fit the canvas");
    for (int c = 1; c < spec.num_classes; ++c) {
        const int count = static_cast<int>(rng.uniform_int(spec.shapes_min, spec.shapes_max));
        const auto& band = spec.intensity_bands[c];
        for (int k = 0; k < count; ++k) {
            detail::Blob blob{};
            bool placed = false;
            for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
                blob.rx = rng.uniform(rmin, rmax);
                blob.ry = rng.uniform(rmin, rmax);
                const double margin = 1.35 * std::max(blob.rx, blob.ry);
                if (2.0 * margin >= n) continue;
                blob.cx = rng.uniform(margin, n - margin);
                blob.cy = rng.uniform(margin, n - margin);
                blob.phi = rng.uniform(0.0, M_PI);
                blob.radial = rng.bernoulli(0.5);
                blob.lobe_amp = rng.uniform(0.08, 0.25);
                blob.lobes = static_cast<int>(rng.uniform_int(3, 6));
                blob.lobe_phase = rng.uniform(0.0, 2.0 * M_PI);
                placed = true;
            }
            if (!placed) throw generation_error("generate_scene: could not place shape");
            const double span = band.hi - band.lo;
            const double level = band.lo + span * rng.uniform(0.35, 0.65);
            for (int y = 0; y < n; ++y)
                for (int x = 0; x < n; ++x)
                    if (blob.contains(x + 0.5, y + 0.5)) {
                        s.mask(y, x) = c;
                        s.image(y, x) = static_cast<float>(level);
                    }
        }
    }

    if (spec.texture_noise_sigma > 0) {
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x)
                s.image(y, x) += static_cast<float>(rng.normal(0.0, spec.texture_noise_sigma));
    }
    s.image = s.image.cwiseMax(0.0f).cwiseMin(1.0f);
    return s;
}

// ---------------------------------------------------------------------------
// Augmentations

namespace detail {

inline ImageF gaussian_blur(const ImageF& img, double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(2.0 * sigma)));
    std::vector<float> kernel(2 * radius + 1);
    float sum = 0.0f;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = static_cast<float>(std::exp(-0.5 * i * i / (sigma * sigma)));
        sum += kernel[i + radius];
    }
    for (auto& k : kernel) k /= sum;
    const int h = static_cast<int>(img.rows()), w = static_cast<int>(img.cols());
    ImageF tmp(h, w), out(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            float acc = 0.0f;
            for (int i = -radius; i <= radius; ++i)
                acc += kernel[i + radius] * img(y, std::clamp(x + i, 0, w - 1));
            tmp(y, x) = acc;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            float acc = 0.0f;
            for (int i = -radius; i <= radius; ++i)
                acc += kernel[i + radius] * tmp(std::clamp(y + i, 0, h - 1), x);
            out(y, x) = acc;
        }
    return out;
}

/// Inverse-maps output pixels through a rotation+scale+shift about the image
/// center; bilinear for the image, nearest for the label map (which may
/// contain abstain ids).
inline void warp_affine(const ImageF& img, const MatXi& labels, double angle_rad, double scale,
                        double shift_x, double shift_y, ImageF& img_out, MatXi& labels_out) {
    const int h = static_cast<int>(img.rows()), w = static_cast<int>(img.cols());
    img_out.resize(h, w);
    labels_out.resize(h, w);
    const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
    const double cos_a = std::cos(angle_rad) / scale, sin_a = std::sin(angle_rad) / scale;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double ox = x - cx - shift_x, oy = y - cy - shift_y;
            const double sx = cos_a * ox + sin_a * oy + cx;
            const double sy = -sin_a * ox + cos_a * oy + cy;
            const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
            const double tx = sx - x0, ty = sy - y0;
            auto cl_x = [w](int v) { return std::clamp(v, 0, w - 1); };
            auto cl_y = [h](int v) { return std::clamp(v, 0, h - 1); };
            const float v00 = img(cl_y(y0), cl_x(x0)), v01 = img(cl_y(y0), cl_x(x0 + 1));
            const float v10 = img(cl_y(y0 + 1), cl_x(x0)), v11 = img(cl_y(y0 + 1), cl_x(x0 + 1));
            img_out(y, x) = static_cast<float>((1 - ty) * ((1 - tx) * v00 + tx * v01) +
                                               ty * ((1 - tx) * v10 + tx * v11));
            labels_out(y, x) = labels(cl_y(static_cast<int>(std::lround(sy))),
                                      cl_x(static_cast<int>(std::lround(sx))));
        }
}

}  // namespace detail

/// Applies the enabled augmentations to an (image, label map) pair with the
/// labels transformed in lockstep for spatial ops. Label maps may carry any
/// int ids, including an abstain id. grid_shuffle is skipped when the grid
/// does not divide the image.
inline void augment_pair(ImageF& image, MatXi& labels, const AugmentConfig& cfg,
                         std::uint64_t seed) {
    Rng rng(derive_seed(seed, "augment"));
    if (cfg.blur && rng.bernoulli(cfg.apply_prob)) {
        const double sigma = rng.uniform(0.3, std::max(0.31, cfg.blur_sigma_max));
        image = detail::gaussian_blur(image, sigma);
    }
    if (cfg.shift_scale_rotate && rng.bernoulli(cfg.apply_prob)) {
        const double angle = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg) * M_PI / 180.0;
        const double scale = rng.uniform(1.0 - cfg.scale_frac, 1.0 + cfg.scale_frac);
        const double sx = rng.uniform(-cfg.shift_frac, cfg.shift_frac) * image.cols();
        const double sy = rng.uniform(-cfg.shift_frac, cfg.shift_frac) * image.rows();
        ImageF img_out;
        MatXi lab_out;
        detail::warp_affine(image, labels, angle, scale, sx, sy, img_out, lab_out);
        image = std::move(img_out);
        labels = std::move(lab_out);
    }
    if (cfg.brightness_contrast && rng.bernoulli(cfg.apply_prob)) {
        const float bf = static_cast<float>(rng.uniform(-cfg.brightness_delta, cfg.brightness_delta));
        const float cf = static_cast<float>(rng.uniform(1.0 - cfg.contrast_delta, 1.0 + cfg.contrast_delta));
        image = ((image.array() - 0.5f) * cf + 0.5f + bf).cwiseMax(0.0f).cwiseMin(1.0f);
    }
    if (cfg.grid_shuffle && rng.bernoulli(cfg.apply_prob)) {
        const int g = cfg.grid_cells;
        const int h = static_cast<int>(image.rows()), w = static_cast<int>(image.cols());
        if (g >= 2 && h % g == 0 && w % g == 0) {
            std::vector<int> perm(static_cast<std::size_t>(g) * g);
            for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
            rng.shuffle(perm);
            const int ch = h / g, cw = w / g;
            ImageF img_out(h, w);
            MatXi lab_out(h, w);
            for (int cell = 0; cell < g * g; ++cell) {
                const int dst_y = (cell / g) * ch, dst_x = (cell % g) * cw;
                const int src_y = (perm[cell] / g) * ch, src_x = (perm[cell] % g) * cw;
                img_out.block(dst_y, dst_x, ch, cw) = image.block(src_y, src_x, ch, cw);
                lab_out.block(dst_y, dst_x, ch, cw) = labels.block(src_y, src_x, ch, cw);
            }
            image = std::move(img_out);
            labels = std::move(lab_out);
        }
    }
}

inline Sample augment(const Sample& sample, const AugmentConfig& cfg, std::uint64_t seed) {
    Sample out = sample;
    augment_pair(out.image, out.mask, cfg, seed);
    return out;
}

// ---------------------------------------------------------------------------
// Benchmark bundle

/// Seeded source/target splits with the shift applied to target images.
/// Target-train ground truth is kept out of the samples the trainer sees;
/// it lives in `target_train_masks_eval_only` for evaluation code.
struct Benchmark {
    SceneSpec scene;
    std::vector<DomainShiftSpec> shift;
    std::uint64_t master_seed = 0;

    std::vector<Sample> source_train;
    std::vector<Sample> source_val;
    std::vector<Sample> target_val;

    std::vector<ImageF> target_train_images;
    std::vector<std::string> target_train_ids;
    std::vector<MatXi> target_train_masks_eval_only;
};

inline Benchmark make_benchmark(const SceneSpec& source_spec,
                                const std::vector<DomainShiftSpec>& target_shift, int n_train,
                                int n_val, std::uint64_t seed) {
    validate(source_spec);
    for (const auto& s : target_shift) validate(s);
    if (n_train <= 0 || n_val <= 0) throw config_error("make_benchmark: counts must be positive");

    Benchmark b;
    b.scene = source_spec;
    b.shift = target_shift;
    b.master_seed = seed;

    auto gen_split = [&](const char* split, int count, bool shifted,
                         std::vector<Sample>* out_samples) {
        for (int i = 0; i < count; ++i) {
            const std::string id = std::string(split) + "/" + std::to_string(i);
            const std::uint64_t s_seed = derive_seed(seed, id);
            Sample s = generate_scene(source_spec, s_seed);
            s.id = id;
            if (shifted) s.image = apply_shift_pipeline(std::move(s.image), target_shift, s_seed);
            if (out_samples) {
                out_samples->push_back(std::move(s));
            } else {
                b.target_train_images.push_back(std::move(s.image));
                b.target_train_ids.push_back(id);
                b.target_train_masks_eval_only.push_back(std::move(s.mask));
            }
        }
    };
    gen_split("source_train", n_train, false, &b.source_train);
    gen_split("source_val", n_val, false, &b.source_val);
    gen_split("target_train", n_train, true, nullptr);
    gen_split("target_val", n_val, true, &b.target_val);
    return b;
}

/// 4:1 train/val split when counts are unspecified.
inline Benchmark make_benchmark(const SceneSpec& source_spec,
                                const std::vector<DomainShiftSpec>& target_shift,
                                std::uint64_t seed) {
    return make_benchmark(source_spec, target_shift, 200, 50, seed);
}

/// The pinned desk-scale benchmark: 64x64, three classes, gamma+contrast+noise shift.
inline std::vector<DomainShiftSpec> default_shift_pipeline() {
    return {{ShiftKind::gamma, 2.2, 11}, {ShiftKind::contrast, 0.6, 22}, {ShiftKind::noise, 0.05, 33}};
}

inline Benchmark default_benchmark(std::uint64_t seed) {
    return make_benchmark(SceneSpec{}, default_shift_pipeline(), 200, 50, seed);
}

}  // namespace sfuda

#endif
