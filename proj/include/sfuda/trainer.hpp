#ifndef SFUDA_TRAINER_HPP
#define SFUDA_TRAINER_HPP

#include <chrono>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "sfuda/adam.hpp"
#include "sfuda/data.hpp"
#include "sfuda/losses.hpp"
#include "sfuda/metrics.hpp"
#include "sfuda/model.hpp"
#include "sfuda/pseudolabel.hpp"

namespace sfuda {

/// One adaptation epoch as logged to records.jsonl. The loss breakdown is
/// the unweighted mean over optimizer steps (labeled count summed), which
/// preserves the breakdown composition invariant.
struct EpochRecord {
    int epoch = 0;  // 1-based
    LossBreakdown train_loss;
    double target_val_dice = 0.0;
    double wall_seconds = 0.0;
    std::string snapshot_path;  // relative to the run dir; empty if not persisted
};

struct SourceTrainConfig {
    int epochs = 30;
    int batch_size = 4;
    double learning_rate = 3e-5;
    double weight_decay = 3e-5;
    std::uint64_t seed = 0;
    AugmentConfig augment = AugmentConfig::all_enabled();
    double early_stop_dice = 0.97;  // stop once source-val mean dice clears this
};

struct SourceEpochRecord {
    int epoch = 0;
    double train_ce = 0.0;
    double source_val_dice = 0.0;
};

namespace detail {

inline std::vector<int> foreground_classes(int num_classes) {
    std::vector<int> fg;
    for (int c = 1; c < num_classes; ++c) fg.push_back(c);
    return fg;
}

template <typename Scalar>
MatXi argmax_mask(const MatX<Scalar>& logits, Eigen::Index col0, int h, int w) {
    MatXi mask(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            Eigen::Index c;
            logits.col(col0 + Eigen::Index(y) * w + x).maxCoeff(&c);
            mask(y, x) = static_cast<int>(c);
        }
    return mask;
}

inline PseudoLabelMap labels_from_mask(const MatXi& mask, int num_classes) {
    PseudoLabelMap y;
    y.height = static_cast<int>(mask.rows());
    y.width = static_cast<int>(mask.cols());
    y.num_classes = num_classes;
    y.labels.resize(y.height * y.width);
    for (int yy = 0; yy < y.height; ++yy)
        for (int xx = 0; xx < y.width; ++xx) y.labels[yy * y.width + xx] = mask(yy, xx);
    return y;
}

inline MatXi mask_from_labels(const PseudoLabelMap& y) {
    MatXi m(y.height, y.width);
    for (int yy = 0; yy < y.height; ++yy)
        for (int xx = 0; xx < y.width; ++xx) m(yy, xx) = y.labels[yy * y.width + xx];
    return m;
}

/// Stacks per-image label maps into one map covering a batch.
inline PseudoLabelMap stack_labels(const std::vector<PseudoLabelMap>& per_image) {
    PseudoLabelMap out;
    out.height = per_image[0].height * static_cast<int>(per_image.size());
    out.width = per_image[0].width;
    out.num_classes = per_image[0].num_classes;
    out.labels.resize(Eigen::Index(out.height) * out.width);
    Eigen::Index at = 0;
    for (const auto& y : per_image) {
        out.labels.segment(at, y.labels.size()) = y.labels;
        at += y.labels.size();
    }
    return out;
}

}  // namespace detail

/// Mean foreground dice of the model's argmax predictions over a labeled set.
template <typename Scalar>
double evaluate_mean_dice(const SegModel<Scalar>& model, const std::vector<Sample>& samples,
                          int eval_batch = 16) {
    if (samples.empty()) throw argument_error("evaluate_mean_dice: empty sample set");
    const auto fg = detail::foreground_classes(model.num_classes());
    double sum = 0.0;
    for (std::size_t at = 0; at < samples.size(); at += eval_batch) {
        const std::size_t n = std::min<std::size_t>(eval_batch, samples.size() - at);
        std::vector<MatX<Scalar>> images;
        for (std::size_t i = 0; i < n; ++i)
            images.push_back(samples[at + i].image.template cast<Scalar>());
        const MatX<Scalar> logits = model.forward_logits(images, ForwardMode::eval);
        const int h = static_cast<int>(images[0].rows()), w = static_cast<int>(images[0].cols());
        for (std::size_t i = 0; i < n; ++i) {
            const MatXi pred = detail::argmax_mask(logits, Eigen::Index(i) * h * w, h, w);
            sum += mean_dice(pred, samples[at + i].mask, fg);
        }
    }
    return sum / static_cast<double>(samples.size());
}

template <typename Scalar>
struct SourceTrainResult {
    SegModel<Scalar> model;              // best-val checkpoint
    ParameterSnapshot<Scalar> theta_star;
    std::vector<SourceEpochRecord> history;
    int best_epoch = 0;
    double best_dice = 0.0;
};

/// Supervised source-phase training with augmentations; keeps the
/// best-source-val checkpoint and returns it as the frozen source snapshot.
template <typename Scalar>
SourceTrainResult<Scalar> train_source(SegModel<Scalar> model,
                                       const std::vector<Sample>& source_train,
                                       const std::vector<Sample>& source_val,
                                       const SourceTrainConfig& cfg) {
    if (source_train.empty() || source_val.empty())
        throw argument_error("train_source: empty source data");

    SourceTrainResult<Scalar> result;
    result.theta_star = snapshot_parameters(model);
    result.best_dice = -1.0;

    Adam<Scalar> opt(Scalar(cfg.learning_rate), Scalar(cfg.weight_decay));
    auto params = model.parameters();
    const int C = model.num_classes();

    std::vector<std::size_t> order(source_train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng rng(derive_seed(cfg.seed, "source_epoch/" + std::to_string(epoch)));
        rng.shuffle(order);
        double ce_sum = 0.0;
        long steps = 0;
        for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
            const std::size_t n = std::min<std::size_t>(cfg.batch_size, order.size() - at);
            std::vector<MatX<Scalar>> images;
            std::vector<PseudoLabelMap> labels;
            for (std::size_t i = 0; i < n; ++i) {
                const Sample& s = source_train[order[at + i]];
                ImageF img = s.image;
                MatXi msk = s.mask;
                if (cfg.augment.any())
                    augment_pair(img, msk, cfg.augment,
                                 derive_seed(cfg.seed, "aug/" + std::to_string(epoch) + "/" +
                                                           std::to_string(at + i)));
                images.push_back(img.template cast<Scalar>());
                labels.push_back(detail::labels_from_mask(msk, C));
            }
            ForwardCache<Scalar> cache;
            const MatX<Scalar> logits = model.forward_logits(images, ForwardMode::train, &cache);
            if (!logits.allFinite())
                throw numerical_error("train_source: diverged (non-finite logits) at epoch " +
                                      std::to_string(epoch) + ", batch " +
                                      std::to_string(at / cfg.batch_size));
            const int h = static_cast<int>(images[0].rows());
            const int w = static_cast<int>(images[0].cols());
            const ProbMap<Scalar> p =
                softmax_rows(MatX<Scalar>(logits.transpose()), static_cast<int>(n) * h, w);
            const PseudoLabelMap y = detail::stack_labels(labels);
            const Scalar ce = cross_entropy_pseudo(p, y);
            if (!std::isfinite(static_cast<double>(ce)))
                throw numerical_error("train_source: non-finite loss at epoch " +
                                      std::to_string(epoch) + ", batch " + std::to_string(at / cfg.batch_size));
            ce_sum += static_cast<double>(ce);
            ++steps;
            const MatX<Scalar> dz = softmax_backward(p, cross_entropy_pseudo_grad(p, y));
            auto grads = model.backward(MatX<Scalar>(dz.transpose()), cache);
            opt.step(params, grads);
        }
        const double val_dice = evaluate_mean_dice(model, source_val);
        result.history.push_back({epoch, steps ? ce_sum / steps : 0.0, val_dice});
        if (val_dice > result.best_dice) {
            result.best_dice = val_dice;
            result.best_epoch = epoch;
            result.theta_star = snapshot_parameters(model);
        }
        if (result.best_dice >= cfg.early_stop_dice) break;
    }

    restore_parameters(model, result.theta_star);
    result.model = std::move(model);
    return result;
}

/// Outcome of one adaptation run. Snapshots are kept at the probe epochs
/// plus the best epoch; target-val dice is recorded for reporting only.
template <typename Scalar>
struct AdaptationRun {
    std::vector<EpochRecord> records;
    StabilityReport report;
    std::map<int, ParameterSnapshot<Scalar>> probe_snapshots;
    ParameterSnapshot<Scalar> best_snapshot;
    int best_epoch = 0;
    SegModel<Scalar> final_model;
    std::vector<std::string> consumed_sample_ids;  // unique ids seen by this run
};

/// Source-free self-training: pseudo labels from the method's labeler, the
/// composite adaptation objective, Adam, and per-epoch target-val scoring.
/// The call takes only the frozen snapshot and unlabeled target images; no
/// source samples are reachable here.
template <typename Scalar>
AdaptationRun<Scalar> self_train_adapt(SegModel<Scalar> model,
                                       const ParameterSnapshot<Scalar>& theta_star,
                                       const std::vector<ImageF>& target_train_images,
                                       const std::vector<std::string>& target_train_ids,
                                       const std::vector<Sample>& target_val,
                                       const AdaptationConfig& cfg,
                                       const std::vector<int>& probe_epochs = default_probe_epochs()) {
    validate(cfg);
    if (target_train_images.empty()) throw argument_error("self_train_adapt: no target images");
    detail::check_structural_match(model.parameters(), theta_star);

    AdaptationRun<Scalar> run;
    if (cfg.epochs == 0) {
        run.final_model = std::move(model);
        run.best_snapshot = snapshot_parameters(run.final_model);
        return run;
    }

    const int C = model.num_classes();
    const int h = static_cast<int>(target_train_images[0].rows());
    const int w = static_cast<int>(target_train_images[0].cols());
    // For os, weight decay is folded into the gamma/beta gradients by hand so
    // the frozen parameters stay bit-identical.
    Adam<Scalar> opt(Scalar(cfg.learning_rate),
                     cfg.method == Method::os ? Scalar(0) : Scalar(cfg.weight_decay));
    auto params = model.parameters();

    std::set<std::string> consumed;
    auto note_consumed = [&](std::size_t idx) {
        if (idx < target_train_ids.size()) consumed.insert(target_train_ids[idx]);
    };

    auto label_one = [&](const ImageF& img) -> PseudoLabelMap {
        const ProbMap<Scalar> p = model.forward_softmax(img.template cast<Scalar>(), ForwardMode::eval);
        return cfg.method == Method::fairld ? dtpl_pseudo_label(p, cfg.threshold)
                                            : ld_pseudo_label(p, cfg.threshold.alpha);
    };
    auto label_all = [&]() {
        std::vector<PseudoLabelMap> out(target_train_images.size());
        const int lb = 16;
        for (std::size_t at = 0; at < target_train_images.size(); at += lb) {
            const std::size_t n = std::min<std::size_t>(lb, target_train_images.size() - at);
            std::vector<MatX<Scalar>> images;
            for (std::size_t i = 0; i < n; ++i)
                images.push_back(target_train_images[at + i].template cast<Scalar>());
            const MatX<Scalar> logits = model.forward_logits(images, ForwardMode::eval);
            for (std::size_t i = 0; i < n; ++i) {
                ProbMap<Scalar> p = softmax_rows(
                    MatX<Scalar>(logits.middleCols(Eigen::Index(i) * h * w, Eigen::Index(h) * w)
                                     .transpose()),
                    h, w);
                out[at + i] = cfg.method == Method::fairld
                                  ? dtpl_pseudo_label(p, cfg.threshold)
                                  : ld_pseudo_label(p, cfg.threshold.alpha);
            }
        }
        return out;
    };

    std::vector<std::size_t> order(target_train_images.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<double> dice_series;
    double best = -1.0;
    const Scalar wc_coef_eff =
        cfg.use_wc ? Scalar(cfg.wc_coefficient) /
                         (cfg.wc_normalized ? Scalar(model.trainable_size()) : Scalar(1))
                   : Scalar(0);

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        LossBreakdown agg;
        long steps = 0;

        if (cfg.method == Method::os) {
            // One statistics pass per epoch, then optional gamma/beta steps
            // against the entropy objective (with WC if enabled).
            std::vector<std::vector<MatX<Scalar>>> batches;
            for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
                const std::size_t n = std::min<std::size_t>(cfg.batch_size, order.size() - at);
                std::vector<MatX<Scalar>> images;
                for (std::size_t i = 0; i < n; ++i) {
                    images.push_back(target_train_images[order[at + i]].template cast<Scalar>());
                    note_consumed(order[at + i]);
                }
                batches.push_back(std::move(images));
            }
            BnAdaptConfig stats_cfg = cfg.bn_adapt;
            stats_cfg.train_gamma_beta = false;
            stats_cfg.entropy_steps = 0;
            model = adapt_bn_statistics(std::move(model), batches, stats_cfg);
            params = model.parameters();

            PseudoLabelMap no_labels;
            no_labels.num_classes = C;
            if (cfg.bn_adapt.train_gamma_beta && cfg.bn_adapt.entropy_steps > 0) {
                for (int step = 0; step < cfg.bn_adapt.entropy_steps; ++step) {
                    const auto& batch = batches[step % batches.size()];
                    no_labels.height = static_cast<int>(batch.size()) * h;
                    no_labels.width = w;
                    no_labels.labels =
                        Eigen::VectorXi::Constant(Eigen::Index(batch.size()) * h * w,
                                                  PseudoLabelMap::kAbstain);
                    ForwardCache<Scalar> cache;
                    const MatX<Scalar> logits =
                        model.forward_logits(batch, ForwardMode::eval, &cache);
                    const ProbMap<Scalar> p = softmax_rows(
                        MatX<Scalar>(logits.transpose()), static_cast<int>(batch.size()) * h, w);
                    const LossBreakdown bd =
                        total_adaptation_loss(p, no_labels, model.parameters(), theta_star, cfg);
                    if (!std::isfinite(bd.total))
                        throw numerical_error("self_train_adapt: non-finite loss at epoch " +
                                              std::to_string(epoch) + ", step " + std::to_string(step));
                    const MatX<Scalar> dz =
                        softmax_backward(p, total_adaptation_loss_grad_prob(p, no_labels, cfg));
                    auto grads = model.backward(MatX<Scalar>(dz.transpose()), cache);
                    if (wc_coef_eff != Scalar(0))
                        weight_consolidation_add_grad(model.parameters(), theta_star, wc_coef_eff,
                                                      grads);
                    // gamma/beta only; the rest of OS stays frozen.
                    std::size_t k = 0;
                    for (const auto& pr : params) {
                        if (!pr.trainable) continue;
                        const bool is_gb = pr.name.find(".bn.gamma") != std::string::npos ||
                                           pr.name.find(".bn.beta") != std::string::npos;
                        if (is_gb)
                            grads[k] += Scalar(cfg.weight_decay) * pr.vec();
                        else
                            grads[k].setZero();
                        ++k;
                    }
                    opt.step(params, grads);
                    agg.adaptation += bd.adaptation;
                    agg.self_entropy += bd.self_entropy;
                    agg.wc_penalty += bd.wc_penalty;
                    agg.total += bd.total;
                    ++steps;
                }
            }
        } else {
            std::vector<PseudoLabelMap> labels;
            if (cfg.pseudo_label_refresh == LabelRefresh::per_epoch) labels = label_all();

            Rng rng(derive_seed(cfg.seed, "adapt_epoch/" + std::to_string(epoch)));
            rng.shuffle(order);
            for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
                const std::size_t n = std::min<std::size_t>(cfg.batch_size, order.size() - at);
                std::vector<MatX<Scalar>> images;
                std::vector<PseudoLabelMap> batch_labels;
                for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t idx = order[at + i];
                    note_consumed(idx);
                    PseudoLabelMap y = cfg.pseudo_label_refresh == LabelRefresh::per_epoch
                                           ? labels[idx]
                                           : label_one(target_train_images[idx]);
                    ImageF img = target_train_images[idx];
                    if (cfg.augment.any()) {
                        MatXi ymap = detail::mask_from_labels(y);
                        augment_pair(img, ymap, cfg.augment,
                                     derive_seed(cfg.seed, "adapt_aug/" + std::to_string(epoch) +
                                                               "/" + std::to_string(at + i)));
                        y = detail::labels_from_mask(ymap, C);
                        for (Eigen::Index k = 0; k < y.labels.size(); ++k)
                            if (y.labels[k] < 0) y.labels[k] = PseudoLabelMap::kAbstain;
                    }
                    images.push_back(img.template cast<Scalar>());
                    batch_labels.push_back(std::move(y));
                }
                ForwardCache<Scalar> cache;
                const MatX<Scalar> logits =
                    model.forward_logits(images, ForwardMode::train, &cache);
                if (!logits.allFinite())
                    throw numerical_error("self_train_adapt: diverged (non-finite logits) at epoch " +
                                          std::to_string(epoch) + ", batch " +
                                          std::to_string(at / cfg.batch_size));
                const ProbMap<Scalar> p = softmax_rows(MatX<Scalar>(logits.transpose()),
                                                       static_cast<int>(n) * h, w);
                const PseudoLabelMap y = detail::stack_labels(batch_labels);
                const LossBreakdown bd =
                    total_adaptation_loss(p, y, model.parameters(), theta_star, cfg);
                if (!std::isfinite(bd.total))
                    throw numerical_error("self_train_adapt: non-finite loss at epoch " +
                                          std::to_string(epoch) + ", batch " +
                                          std::to_string(at / cfg.batch_size));
                const MatX<Scalar> dz =
                    softmax_backward(p, total_adaptation_loss_grad_prob(p, y, cfg));
                auto grads = model.backward(MatX<Scalar>(dz.transpose()), cache);
                if (wc_coef_eff != Scalar(0))
                    weight_consolidation_add_grad(model.parameters(), theta_star, wc_coef_eff,
                                                  grads);
                opt.step(params, grads);
                agg.adaptation += bd.adaptation;
                agg.self_entropy += bd.self_entropy;
                agg.wc_penalty += bd.wc_penalty;
                agg.total += bd.total;
                agg.labeled_pixel_count += bd.labeled_pixel_count;
                ++steps;
            }
        }

        if (steps > 0) {
            agg.adaptation /= steps;
            agg.self_entropy /= steps;
            agg.wc_penalty /= steps;
            agg.total /= steps;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = agg;
        rec.target_val_dice = evaluate_mean_dice(model, target_val);
        rec.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        dice_series.push_back(rec.target_val_dice);

        const bool is_probe =
            std::find(probe_epochs.begin(), probe_epochs.end(), epoch) != probe_epochs.end();
        if (is_probe) run.probe_snapshots[epoch] = snapshot_parameters(model);
        if (rec.target_val_dice > best) {
            best = rec.target_val_dice;
            run.best_epoch = epoch;
            run.best_snapshot = snapshot_parameters(model);
        }
        run.records.push_back(std::move(rec));
    }

    run.report = stability_report(dice_series, probe_epochs);
    run.final_model = std::move(model);
    run.consumed_sample_ids.assign(consumed.begin(), consumed.end());
    return run;
}

/// Convenience wrapper running the adaptation against a benchmark bundle.
template <typename Scalar>
AdaptationRun<Scalar> self_train_adapt(SegModel<Scalar> model,
                                       const ParameterSnapshot<Scalar>& theta_star,
                                       const Benchmark& bench, const AdaptationConfig& cfg,
                                       const std::vector<int>& probe_epochs = default_probe_epochs()) {
    return self_train_adapt(std::move(model), theta_star, bench.target_train_images,
                            bench.target_train_ids, bench.target_val, cfg, probe_epochs);
}

struct AblationCell {
    std::string label;
    AdaptationConfig config;
    bool failed = false;
    std::string error;
    StabilityReport report;
};

/// Runs every config in the grid from the same frozen source snapshot.
/// Individual failures are recorded and the grid continues.
template <typename Scalar>
std::vector<AblationCell> run_ablation_grid(
    const SegModel<Scalar>& source_model, const ParameterSnapshot<Scalar>& theta_star,
    const Benchmark& bench, const std::vector<std::pair<std::string, AdaptationConfig>>& grid,
    const std::vector<int>& probe_epochs = default_probe_epochs()) {
    if (grid.empty()) throw argument_error("run_ablation_grid: empty grid");
    std::vector<AblationCell> cells;
    for (const auto& [label, cfg] : grid) {
        AblationCell cell;
        cell.label = label;
        cell.config = cfg;
        try {
            SegModel<Scalar> m = source_model;
            restore_parameters(m, theta_star);
            auto run = self_train_adapt(std::move(m), theta_star, bench, cfg, probe_epochs);
            cell.report = std::move(run.report);
        } catch (const std::exception& e) {
            cell.failed = true;
            cell.error = e.what();
        }
        cells.push_back(std::move(cell));
    }
    return cells;
}

/// The four ablation groups: no regularizer, entropy-min, WC only, and
/// WC + entropy-increase (the full stabilized configuration).
inline std::vector<std::pair<std::string, AdaptationConfig>> ablation_groups(
    const AdaptationConfig& base, const std::vector<std::string>& groups) {
    std::vector<std::pair<std::string, AdaptationConfig>> grid;
    for (const std::string& g : groups) {
        AdaptationConfig cfg = base;
        if (g == "A") {
            cfg.use_wc = false;
            cfg.use_ei = false;
            cfg.entropy_mode = EntropyMode::none;
        } else if (g == "B") {
            cfg.use_wc = false;
            cfg.use_ei = false;
            cfg.entropy_mode = EntropyMode::min;
        } else if (g == "C") {
            cfg.use_wc = true;
            cfg.use_ei = false;
            cfg.entropy_mode = EntropyMode::none;
        } else if (g == "D") {
            cfg.use_wc = true;
            cfg.use_ei = true;
            cfg.entropy_mode = EntropyMode::none;
        } else {
            throw config_error("unknown ablation group '" + g + "' (expected A|B|C|D)");
        }
        grid.emplace_back(g, cfg);
    }
    return grid;
}

}  // namespace sfuda

#endif
