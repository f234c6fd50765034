#ifndef SFUDA_CONFIG_HPP
#define SFUDA_CONFIG_HPP

#include <cmath>
#include <cstdint>
#include <string>

#include "sfuda/errors.hpp"

namespace sfuda {

enum class Method { fairld, ld, os };
enum class EntropyMode { none, min, max };
enum class LabelRefresh { per_batch, per_epoch };

inline Method parse_method(const std::string& s) {
    if (s == "fairld") return Method::fairld;
    if (s == "ld") return Method::ld;
    if (s == "os") return Method::os;
    throw config_error("unknown method '" + s + "' (expected fairld|ld|os)");
}

inline EntropyMode parse_entropy_mode(const std::string& s) {
    if (s == "none" || s == "-") return EntropyMode::none;
    if (s == "min") return EntropyMode::min;
    if (s == "max") return EntropyMode::max;
    throw config_error("unknown entropy mode '" + s + "' (expected none|min|max)");
}

inline const char* to_string(Method m) {
    switch (m) {
        case Method::fairld: return "fairld";
        case Method::ld: return "ld";
        default: return "os";
    }
}

inline const char* to_string(EntropyMode m) {
    switch (m) {
        case EntropyMode::none: return "none";
        case EntropyMode::min: return "min";
        default: return "max";
    }
}

/// Double-threshold settings: alpha is the per-class top fraction for the
/// intra-class cutoff, lambda the global probability floor.
struct ThresholdConfig {
    double alpha = 0.3;
    double lambda = 0.2;
};

inline void validate(const ThresholdConfig& t) {
    if (!(t.alpha > 0.0 && t.alpha <= 1.0)) throw config_error("threshold alpha must be in (0,1]");
    if (!(t.lambda >= 0.0 && t.lambda < 1.0)) throw config_error("threshold lambda must be in [0,1)");
}

/// Which augmentations to apply and with what strength. Each enabled
/// augmentation fires independently with probability `apply_prob`.
struct AugmentConfig {
    bool blur = false;
    bool shift_scale_rotate = false;
    bool brightness_contrast = false;
    bool grid_shuffle = false;
    double apply_prob = 0.5;

    double blur_sigma_max = 1.0;
    double shift_frac = 0.08;       // max |shift| as a fraction of the image side
    double scale_frac = 0.10;       // scale drawn from [1-s, 1+s]
    double rotate_deg = 15.0;
    double brightness_delta = 0.15;
    double contrast_delta = 0.25;   // contrast factor from [1-c, 1+c]
    int grid_cells = 2;             // grid_shuffle uses an n x n grid

    bool any() const { return blur || shift_scale_rotate || brightness_contrast || grid_shuffle; }

    static AugmentConfig all_enabled() {
        AugmentConfig a;
        a.blur = a.shift_scale_rotate = a.brightness_contrast = a.grid_shuffle = true;
        return a;
    }
};

/// BN-statistics adaptation settings (the OS-style baseline).
struct BnAdaptConfig {
    double momentum = 1.0;
    int passes = 1;
    bool train_gamma_beta = false;
    int entropy_steps = 0;
    double gamma_beta_lr = 3e-5;
};

inline void validate(const BnAdaptConfig& b) {
    if (!(b.momentum > 0.0 && b.momentum <= 1.0)) throw config_error("bn momentum must be in (0,1]");
    if (b.passes < 1) throw config_error("bn passes must be >= 1");
    if (b.entropy_steps < 0) throw config_error("bn entropy_steps must be >= 0");
}

/// Full adaptation-phase configuration. Defaults follow the training setup
/// used throughout: batch 4, Adam 3e-5 / weight decay 3e-5.
struct AdaptationConfig {
    Method method = Method::fairld;

    bool use_wc = false;
    double wc_coefficient = 1.0;
    bool wc_normalized = false;  // divide the L1 sum by the trainable parameter count

    bool use_ei = false;
    EntropyMode entropy_mode = EntropyMode::none;
    double entropy_coefficient = 1.0;

    ThresholdConfig threshold;
    LabelRefresh pseudo_label_refresh = LabelRefresh::per_epoch;

    int epochs = 50;
    int batch_size = 4;
    double learning_rate = 3e-5;
    double weight_decay = 3e-5;
    std::uint64_t seed = 0;

    BnAdaptConfig bn_adapt;  // only used when method == os
    // Augmentations run in the adaptation phase too (configurable off).
    AugmentConfig augment = AugmentConfig::all_enabled();
};

inline void validate(const AdaptationConfig& c) {
    validate(c.threshold);
    if (c.use_ei && c.entropy_mode == EntropyMode::min)
        throw config_error("use_ei with entropy_mode=min is contradictory: the entropy-increase "
                           "loss already carries +p*log(p) on labeled pixels");
    if (c.method == Method::os && c.use_ei)
        throw config_error("use_ei requires a pseudo-label method (fairld or ld), not os");
    if (!(std::isfinite(c.wc_coefficient) && c.wc_coefficient >= 0.0))
        throw config_error("wc_coefficient must be finite and >= 0");
    if (!(std::isfinite(c.entropy_coefficient) && c.entropy_coefficient >= 0.0))
        throw config_error("entropy_coefficient must be finite and >= 0");
    if (c.epochs < 0) throw config_error("epochs must be >= 0");
    if (c.batch_size < 1) throw config_error("batch_size must be >= 1");
    if (!(c.learning_rate > 0.0) || !(c.weight_decay >= 0.0))
        throw config_error("learning_rate must be > 0 and weight_decay >= 0");
    if (c.method == Method::os) validate(c.bn_adapt);
}

}  // namespace sfuda

#endif
