#include <CLI11.hpp>

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "sfuda/dataset_io.hpp"
#include "sfuda/png_io.hpp"
#include "sfuda/report_io.hpp"
#include "sfuda/run_dir.hpp"
#include "sfuda/trainer.hpp"

namespace fs = std::filesystem;
using namespace sfuda;

namespace {

using Real = float;

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
    if (out.empty()) throw config_error("empty integer list");
    return out;
}

std::vector<DomainShiftSpec> parse_shift_arg(const std::string& s, std::uint64_t seed) {
    std::vector<DomainShiftSpec> out;
    std::stringstream ss(s);
    std::string tok;
    int i = 0;
    while (std::getline(ss, tok, ',')) {
        const auto colon = tok.find(':');
        DomainShiftSpec spec;
        spec.kind = parse_shift_kind(colon == std::string::npos ? tok : tok.substr(0, colon));
        if (colon != std::string::npos) spec.magnitude = std::stod(tok.substr(colon + 1));
        spec.seed = derive_seed(seed, "shift_arg/" + std::to_string(i++));
        validate(spec);
        out.push_back(spec);
    }
    return out;
}

void save_history_csv(const std::string& path, const std::vector<SourceEpochRecord>& hist) {
    std::ofstream os(path);
    if (!os) throw io_error("cannot open " + path);
    os << "epoch,train_ce,source_val_dice\n";
    for (const auto& h : hist) os << h.epoch << ',' << h.train_ce << ',' << h.source_val_dice << '\n';
}

/// Color overlay of pseudo labels on the grayscale image; abstain pixels
/// show the raw image.
void write_overlay(const std::string& path, const ImageF& img, const PseudoLabelMap& y) {
    static const std::uint8_t palette[6][3] = {{230, 60, 60},  {60, 200, 60},  {60, 60, 230},
                                               {230, 200, 60}, {200, 60, 230}, {60, 200, 230}};
    png::Image8 out;
    out.width = static_cast<int>(img.cols());
    out.height = static_cast<int>(img.rows());
    out.channels = 3;
    out.pixels.resize(static_cast<std::size_t>(out.width) * out.height * 3);
    for (int yy = 0; yy < out.height; ++yy)
        for (int xx = 0; xx < out.width; ++xx) {
            const auto g = static_cast<std::uint8_t>(
                std::lround(std::clamp(img(yy, xx), 0.0f, 1.0f) * 255.0f));
            const int label = y.labels[yy * out.width + xx];
            for (int c = 0; c < 3; ++c) {
                const std::uint8_t base = g;
                out.at(yy, xx, c) =
                    label == PseudoLabelMap::kAbstain
                        ? base
                        : static_cast<std::uint8_t>((base + palette[label % 6][c]) / 2);
            }
        }
    png::write_png(path, out);
}

struct AdaptArgs {
    std::string data_dir, snapshot_path, out_dir, config_path;
    AdaptationConfig cfg;
    std::string method_str = "fairld", entropy_str = "none", refresh_str = "per_epoch";
    std::string probe_str = "1,2,3,5,10,20,50";
    bool no_augment = false;
    bool plot = false;
    int dump_overlays = 0;
    bool force = false;
};

void add_adapt_config_flags(CLI::App* cmd, AdaptArgs& a) {
    cmd->add_option("--method", a.method_str, "fairld | ld | os")->capture_default_str();
    cmd->add_flag("--wc", a.cfg.use_wc, "enable the weight-consolidation anchor");
    cmd->add_option("--wc-coef", a.cfg.wc_coefficient, "anchor coefficient")->capture_default_str();
    cmd->add_flag("--wc-normalized", a.cfg.wc_normalized,
                  "divide the L1 sum by the trainable parameter count");
    cmd->add_flag("--ei", a.cfg.use_ei, "use the entropy-increase adaptation loss");
    cmd->add_option("--entropy", a.entropy_str, "none | min | max")->capture_default_str();
    cmd->add_option("--entropy-coef", a.cfg.entropy_coefficient)->capture_default_str();
    cmd->add_option("--alpha", a.cfg.threshold.alpha, "intra-class top fraction")
        ->capture_default_str();
    cmd->add_option("--lambda", a.cfg.threshold.lambda, "global probability floor")
        ->capture_default_str();
    cmd->add_option("--refresh", a.refresh_str, "per_epoch | per_batch")->capture_default_str();
    cmd->add_option("--epochs", a.cfg.epochs)->capture_default_str();
    cmd->add_option("--batch", a.cfg.batch_size)->capture_default_str();
    cmd->add_option("--lr", a.cfg.learning_rate)->capture_default_str();
    cmd->add_option("--wd", a.cfg.weight_decay)->capture_default_str();
    cmd->add_option("--seed", a.cfg.seed)->capture_default_str();
    cmd->add_flag("--no-augment", a.no_augment, "disable adaptation-phase augmentations");
    cmd->add_option("--bn-momentum", a.cfg.bn_adapt.momentum, "os: EMA momentum per pass")
        ->capture_default_str();
    cmd->add_option("--bn-passes", a.cfg.bn_adapt.passes)->capture_default_str();
    cmd->add_flag("--bn-train-gamma-beta", a.cfg.bn_adapt.train_gamma_beta);
    cmd->add_option("--bn-entropy-steps", a.cfg.bn_adapt.entropy_steps)->capture_default_str();
}

void finalize_adapt_config(AdaptArgs& a) {
    a.cfg.method = parse_method(a.method_str);
    a.cfg.entropy_mode = parse_entropy_mode(a.entropy_str);
    if (a.refresh_str == "per_epoch")
        a.cfg.pseudo_label_refresh = LabelRefresh::per_epoch;
    else if (a.refresh_str == "per_batch")
        a.cfg.pseudo_label_refresh = LabelRefresh::per_batch;
    else
        throw config_error("unknown refresh cadence '" + a.refresh_str + "'");
    if (a.no_augment) a.cfg.augment = AugmentConfig{};
    validate(a.cfg);
}

/// Runs one adaptation and writes the full run-dir layout.
void run_adapt_into(const std::string& out_dir, const AdaptArgs& a, const Benchmark& bench,
                    const ParameterSnapshot<Real>& theta_star,
                    const std::vector<int>& probes, bool plot, int dump_overlays) {
    std::ofstream(fs::path(out_dir) / "config.json") << adaptation_config_to_json(a.cfg);

    SegModel<Real> model = build_model<Real>(infer_descriptor(theta_star), a.cfg.seed);
    restore_parameters(model, theta_star);

    if (dump_overlays > 0 && a.cfg.method != Method::os) {
        fs::create_directories(fs::path(out_dir) / "overlays");
        const int n = std::min<int>(dump_overlays, static_cast<int>(bench.target_train_images.size()));
        for (int i = 0; i < n; ++i) {
            const auto p = model.forward_softmax(bench.target_train_images[i], ForwardMode::eval);
            const PseudoLabelMap y = a.cfg.method == Method::fairld
                                         ? dtpl_pseudo_label(p, a.cfg.threshold)
                                         : ld_pseudo_label(p, a.cfg.threshold.alpha);
            char name[32];
            std::snprintf(name, sizeof(name), "%04d.png", i);
            write_overlay((fs::path(out_dir) / "overlays" / name).string(),
                          bench.target_train_images[i], y);
        }
    }

    auto run = self_train_adapt(std::move(model), theta_star, bench, a.cfg, probes);

    fs::create_directories(fs::path(out_dir) / "snapshots");
    for (auto& [epoch, snap] : run.probe_snapshots) {
        char name[32];
        std::snprintf(name, sizeof(name), "epoch%03d.snap", epoch);
        const std::string rel = std::string("snapshots/") + name;
        save_snapshot(snap, (fs::path(out_dir) / rel).string());
        for (auto& rec : run.records)
            if (rec.epoch == epoch) rec.snapshot_path = rel;
    }
    if (run.best_epoch > 0) save_snapshot(run.best_snapshot, (fs::path(out_dir) / "snapshots" / "best.snap").string());

    write_records_jsonl((fs::path(out_dir) / "records.jsonl").string(), run.records);
    write_report_json((fs::path(out_dir) / "report.json").string(), run.report);
    write_series_csv((fs::path(out_dir) / "series.csv").string(), run.report.per_epoch_dice);
    write_probe_table_csv((fs::path(out_dir) / "probe_table.csv").string(),
                          to_string(a.cfg.method), run.report);
    if (plot)
        write_dice_curve_svg((fs::path(out_dir) / "dice_curve.svg").string(),
                             run.report.per_epoch_dice);

    std::cout << "adapt done: best " << run.report.best_dice << " (epoch " << run.report.best_epoch
              << "), final " << run.report.final_dice << ", gap " << run.report.degradation_gap
              << "\n";
}

int run(int argc, char** argv) {
    CLI::App app{"Source-free domain adaptation workbench for synthetic segmentation"};
    app.require_subcommand(1);

    // ---- gen-data ----------------------------------------------------
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic domain-shift dataset");
    std::string gen_out, gen_preset = "default", gen_shift = "gamma:2.2,contrast:0.6,noise:0.05";
    std::string gen_split = "4:1", gen_config;
    std::uint64_t gen_seed = 7;
    int gen_image_size = 64, gen_classes = 3, gen_n_train = 200, gen_n_val = -1;
    bool gen_force = false;
    gen->set_config("--config", "", "config file (INI: key=value)");
    gen->add_option("--out", gen_out, "output dataset directory")->required();
    gen->add_option("--preset", gen_preset, "default")->capture_default_str();
    gen->add_option("--seed", gen_seed)->capture_default_str();
    gen->add_option("--image-size", gen_image_size)->capture_default_str();
    gen->add_option("--classes", gen_classes)->capture_default_str();
    gen->add_option("--n-train", gen_n_train, "training images per domain")->capture_default_str();
    gen->add_option("--n-val", gen_n_val, "validation images per domain (default: per --split)");
    gen->add_option("--split", gen_split, "train:val ratio when --n-val is omitted")
        ->capture_default_str();
    gen->add_option("--shift", gen_shift, "kind:magnitude list applied to target images")
        ->capture_default_str();
    gen->add_flag("--force", gen_force, "allow writing into a non-empty directory");

    // ---- train-source -------------------------------------------------
    auto* ts = app.add_subcommand("train-source", "supervised training on the source split");
    std::string ts_data, ts_out, ts_arch = "16,32,64", ts_config;
    SourceTrainConfig ts_cfg;
    bool ts_no_augment = false, ts_force = false;
    ts->set_config("--config", "", "config file (INI: key=value)");
    ts->add_option("--data", ts_data, "dataset directory")->required();
    ts->add_option("--out", ts_out, "run directory")->required();
    ts->add_option("--epochs", ts_cfg.epochs)->capture_default_str();
    ts->add_option("--batch", ts_cfg.batch_size)->capture_default_str();
    ts->add_option("--lr", ts_cfg.learning_rate)->capture_default_str();
    ts->add_option("--wd", ts_cfg.weight_decay)->capture_default_str();
    ts->add_option("--seed", ts_cfg.seed)->capture_default_str();
    ts->add_option("--arch", ts_arch, "stage channel widths")->capture_default_str();
    ts->add_option("--early-stop", ts_cfg.early_stop_dice)->capture_default_str();
    ts->add_flag("--no-augment", ts_no_augment);
    ts->add_flag("--force", ts_force);

    // ---- adapt ---------------------------------------------------------
    auto* ad = app.add_subcommand("adapt", "source-free self-training on the target split");
    AdaptArgs a;
    ad->set_config("--config", "", "config file (INI: key=value)");
    ad->add_option("--data", a.data_dir, "dataset directory")->required();
    ad->add_option("--snapshot", a.snapshot_path, "frozen source snapshot")->required();
    ad->add_option("--out", a.out_dir, "run directory")->required();
    add_adapt_config_flags(ad, a);
    ad->add_option("--probe", a.probe_str, "probe epochs for the comparison table")
        ->capture_default_str();
    ad->add_flag("--plot", a.plot, "emit dice_curve.svg");
    ad->add_option("--dump-overlays", a.dump_overlays,
                   "write pseudo-label overlays for the first N target images");
    ad->add_flag("--force", a.force);

    // ---- ablation -------------------------------------------------------
    auto* ab = app.add_subcommand("ablation", "run the regularizer-ablation grid");
    AdaptArgs b;
    std::string ab_groups = "A,B,C,D", ab_methods = "fairld";
    int ab_jobs = 1;
    ab->set_config("--config", "", "config file (INI: key=value)");
    ab->add_option("--data", b.data_dir)->required();
    ab->add_option("--snapshot", b.snapshot_path)->required();
    ab->add_option("--out", b.out_dir)->required();
    add_adapt_config_flags(ab, b);
    ab->add_option("--groups", ab_groups, "subset of A,B,C,D")->capture_default_str();
    ab->add_option("--methods", ab_methods, "subset of fairld,ld,os")->capture_default_str();
    ab->add_option("--jobs", ab_jobs, "parallel runs")->capture_default_str();
    ab->add_flag("--force", b.force);

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        if (gen_preset != "default") throw config_error("unknown preset '" + gen_preset + "'");
        SceneSpec scene;
        scene.image_size = gen_image_size;
        scene.num_classes = gen_classes;
        if (gen_classes != static_cast<int>(scene.intensity_bands.size())) {
            // Spread extra foreground bands across [0.1, 0.95].
            scene.intensity_bands.assign(1, {0.45, 0.65});
            for (int c = 1; c < gen_classes; ++c) {
                const double lo = 0.10 + 0.85 * (c - 1) / std::max(1, gen_classes - 1);
                scene.intensity_bands.push_back({lo, std::min(0.95, lo + 0.2)});
            }
        }
        if (gen_n_val < 0) {
            const auto colon = gen_split.find(':');
            if (colon == std::string::npos) throw config_error("--split must look like 4:1");
            const int num = std::stoi(gen_split.substr(0, colon));
            const int den = std::stoi(gen_split.substr(colon + 1));
            if (num <= 0 || den <= 0) throw config_error("--split parts must be positive");
            gen_n_val = std::max(1, gen_n_train * den / num);
        }
        RunManifest man{"gen-data", gen->get_config_ptr()->as<std::string>(), gen_out, gen_seed,
                        kToolVersion};
        init_run_dir(gen_out, man, gen_force);
        const auto bench = make_benchmark(scene, parse_shift_arg(gen_shift, gen_seed), gen_n_train,
                                          gen_n_val, gen_seed);
        write_dataset(gen_out, bench);
        std::cout << "dataset written to " << gen_out << ": " << gen_n_train << "+" << gen_n_val
                  << " images per domain, shift [" << gen_shift << "]\n";
        return 0;
    }

    if (ts->parsed()) {
        RunManifest man{"train-source", ts->get_config_ptr()->as<std::string>(), ts_out,
                        ts_cfg.seed, kToolVersion};
        if (!fs::exists(fs::path(ts_data) / "meta.json"))
            throw io_error("dataset not found at " + ts_data);
        init_run_dir(ts_out, man, ts_force);
        const Benchmark bench = read_dataset(ts_data);
        if (ts_no_augment) ts_cfg.augment = AugmentConfig{};

        ModelDescriptor desc;
        desc.stage_channels = parse_int_list(ts_arch);
        desc.num_classes = bench.scene.num_classes;
        auto model = build_model<Real>(desc, ts_cfg.seed);
        auto result = train_source(std::move(model), bench.source_train, bench.source_val, ts_cfg);

        save_history_csv((fs::path(ts_out) / "history.csv").string(), result.history);
        save_snapshot(result.theta_star, (fs::path(ts_out) / "best.snap").string());
        std::cout << "source model: best source-val dice " << result.best_dice << " at epoch "
                  << result.best_epoch << "; snapshot at " << (fs::path(ts_out) / "best.snap").string()
                  << "\n";
        return 0;
    }

    if (ad->parsed()) {
        finalize_adapt_config(a);
        RunManifest man{"adapt", ad->get_config_ptr()->as<std::string>(), a.out_dir, a.cfg.seed,
                        kToolVersion};
        if (!fs::exists(fs::path(a.data_dir) / "meta.json"))
            throw io_error("dataset not found at " + a.data_dir);
        if (!fs::exists(a.snapshot_path)) throw io_error("snapshot not found at " + a.snapshot_path);
        init_run_dir(a.out_dir, man, a.force);
        const Benchmark bench = read_dataset(a.data_dir);
        const auto theta_star = load_snapshot<Real>(a.snapshot_path);
        run_adapt_into(a.out_dir, a, bench, theta_star, parse_int_list(a.probe_str), a.plot,
                       a.dump_overlays);
        return 0;
    }

    if (ab->parsed()) {
        finalize_adapt_config(b);
        RunManifest man{"ablation", ab->get_config_ptr()->as<std::string>(), b.out_dir, b.cfg.seed,
                        kToolVersion};
        if (!fs::exists(fs::path(b.data_dir) / "meta.json"))
            throw io_error("dataset not found at " + b.data_dir);
        if (!fs::exists(b.snapshot_path)) throw io_error("snapshot not found at " + b.snapshot_path);
        init_run_dir(b.out_dir, man, b.force);
        const Benchmark bench = read_dataset(b.data_dir);
        const auto theta_star = load_snapshot<Real>(b.snapshot_path);

        std::vector<std::string> groups, methods;
        {
            std::stringstream gs(ab_groups), ms(ab_methods);
            std::string tok;
            while (std::getline(gs, tok, ',')) groups.push_back(tok);
            while (std::getline(ms, tok, ',')) methods.push_back(tok);
        }
        struct Cell {
            std::string group, method;
            AdaptationConfig cfg;
            bool failed = false;
            std::string error;
            StabilityReport report;
        };
        std::vector<Cell> cells;
        for (const auto& m : methods) {
            AdaptationConfig base = b.cfg;
            base.method = parse_method(m);
            for (auto& [label, cfg] : ablation_groups(base, groups)) {
                if (base.method == Method::os && cfg.use_ei) {
                    // Group D realizes entropy increase via the image-wide
                    // max term for os, which has no pseudo labels.
                    cfg.use_ei = false;
                    cfg.entropy_mode = EntropyMode::max;
                    cfg.bn_adapt.train_gamma_beta = true;
                    if (cfg.bn_adapt.entropy_steps == 0) cfg.bn_adapt.entropy_steps = 10;
                }
                if (base.method == Method::os && cfg.entropy_mode == EntropyMode::min) {
                    cfg.bn_adapt.train_gamma_beta = true;
                    if (cfg.bn_adapt.entropy_steps == 0) cfg.bn_adapt.entropy_steps = 10;
                }
                cells.push_back({label, m, cfg, false, "", {}});
            }
        }

        std::atomic<std::size_t> next{0};
        auto worker = [&]() {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= cells.size()) return;
                Cell& cell = cells[i];
                try {
                    auto model = build_model<Real>(infer_descriptor(theta_star), cell.cfg.seed);
                    restore_parameters(model, theta_star);
                    auto run = self_train_adapt(std::move(model), theta_star, bench, cell.cfg);
                    cell.report = std::move(run.report);
                    const std::string cell_dir =
                        (fs::path(b.out_dir) / (cell.method + "_" + cell.group)).string();
                    fs::create_directories(cell_dir);
                    write_report_json(cell_dir + "/report.json", cell.report);
                    write_series_csv(cell_dir + "/series.csv", cell.report.per_epoch_dice);
                    write_records_jsonl(cell_dir + "/records.jsonl", run.records);
                } catch (const std::exception& e) {
                    cell.failed = true;
                    cell.error = e.what();
                }
            }
        };
        std::vector<std::thread> pool;
        const int jobs = std::max(1, std::min<int>(ab_jobs, static_cast<int>(cells.size())));
        for (int t = 0; t < jobs - 1; ++t) pool.emplace_back(worker);
        worker();
        for (auto& t : pool) t.join();

        std::vector<AblationCsvRow> rows;
        bool all_failed = true;
        for (const auto& c : cells) {
            AblationCsvRow row;
            row.group = c.group;
            row.method = c.method;
            row.entropy = c.cfg.use_ei ? "Max" : to_string(c.cfg.entropy_mode);
            if (row.entropy == "none") row.entropy = "-";
            if (row.entropy == "min") row.entropy = "Min";
            if (row.entropy == "max") row.entropy = "Max";
            row.wc = c.cfg.use_wc;
            row.failed = c.failed;
            row.report = c.report;
            rows.push_back(std::move(row));
            if (!c.failed) all_failed = false;
            if (c.failed) std::cerr << c.method << "/" << c.group << " FAILED: " << c.error << "\n";
        }
        write_ablation_csv((fs::path(b.out_dir) / "ablation.csv").string(), rows);
        std::cout << "ablation grid: " << rows.size() << " cells -> "
                  << (fs::path(b.out_dir) / "ablation.csv").string() << "\n";
        if (all_failed) throw numerical_error("every ablation cell failed");
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const argument_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const generation_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const io_error& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const numerical_error& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
