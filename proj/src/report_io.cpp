#include "sfuda/report_io.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>

#include "sfuda/errors.hpp"

namespace sfuda {

using nlohmann::json;

namespace {

json breakdown_to_json(const LossBreakdown& b) {
    return json{{"adaptation", b.adaptation},
                {"self_entropy", b.self_entropy},
                {"wc_penalty", b.wc_penalty},
                {"total", b.total},
                {"labeled_pixel_count", b.labeled_pixel_count}};
}

LossBreakdown breakdown_from_json(const json& j) {
    LossBreakdown b;
    b.adaptation = j.at("adaptation").get<double>();
    b.self_entropy = j.at("self_entropy").get<double>();
    b.wc_penalty = j.at("wc_penalty").get<double>();
    b.total = j.at("total").get<double>();
    b.labeled_pixel_count = j.at("labeled_pixel_count").get<long>();
    return b;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot open " + path);
    os << text;
    if (!os) throw io_error("write failed for " + path);
}

}  // namespace

std::string epoch_record_to_json(const EpochRecord& rec) {
    json j{{"epoch", rec.epoch},
           {"train_loss", breakdown_to_json(rec.train_loss)},
           {"target_val_dice", rec.target_val_dice},
           {"wall_seconds", rec.wall_seconds}};
    if (!rec.snapshot_path.empty()) j["snapshot_path"] = rec.snapshot_path;
    return j.dump();
}

void write_records_jsonl(const std::string& path, const std::vector<EpochRecord>& records) {
    std::ostringstream os;
    for (const auto& r : records) os << epoch_record_to_json(r) << '\n';
    write_text(path, os.str());
}

std::vector<EpochRecord> read_records_jsonl(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open " + path);
    std::vector<EpochRecord> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        EpochRecord r;
        r.epoch = j.at("epoch").get<int>();
        r.train_loss = breakdown_from_json(j.at("train_loss"));
        r.target_val_dice = j.at("target_val_dice").get<double>();
        r.wall_seconds = j.at("wall_seconds").get<double>();
        if (j.contains("snapshot_path")) r.snapshot_path = j.at("snapshot_path").get<std::string>();
        out.push_back(std::move(r));
    }
    return out;
}

void write_report_json(const std::string& path, const StabilityReport& report) {
    json j{{"per_epoch_dice", report.per_epoch_dice},
           {"best_epoch", report.best_epoch},
           {"best_dice", report.best_dice},
           {"final_dice", report.final_dice},
           {"degradation_gap", report.degradation_gap},
           {"probe_epochs", report.probe_epochs},
           {"omitted_probe_epochs", report.omitted_probe_epochs}};
    write_text(path, j.dump(2) + "\n");
}

void write_series_csv(const std::string& path, const std::vector<double>& per_epoch_dice) {
    std::ostringstream os;
    os << "epoch,dice\n";
    for (std::size_t i = 0; i < per_epoch_dice.size(); ++i)
        os << (i + 1) << ',' << per_epoch_dice[i] << '\n';
    write_text(path, os.str());
}

void write_probe_table_csv(const std::string& path, const std::string& label,
                           const StabilityReport& report) {
    std::ostringstream head, row;
    head << "label";
    row << label;
    for (int e : report.probe_epochs) {
        head << ",epoch_" << e;
        row << ',' << report.per_epoch_dice[static_cast<std::size_t>(e) - 1];
    }
    for (int e : report.omitted_probe_epochs) {
        head << ",epoch_" << e;
        row << ',';
    }
    head << ",best,best_epoch";
    row << ',' << report.best_dice << ',' << report.best_epoch;
    write_text(path, head.str() + "\n" + row.str() + "\n");
}

void write_ablation_csv(const std::string& path, const std::vector<AblationCsvRow>& rows) {
    std::ostringstream os;
    os << "group,method,entropy,wc,epoch_50,epoch_200,best,best_epoch,status\n";
    for (const auto& r : rows) {
        os << r.group << ',' << r.method << ',' << r.entropy << ',' << (r.wc ? "yes" : "no") << ',';
        auto cell = [&](int e) {
            if (!r.failed && static_cast<int>(r.report.per_epoch_dice.size()) >= e)
                os << r.report.per_epoch_dice[static_cast<std::size_t>(e) - 1];
        };
        cell(50);
        os << ',';
        cell(200);
        os << ',';
        if (!r.failed) os << r.report.best_dice;
        os << ',';
        if (!r.failed) os << r.report.best_epoch;
        os << ',' << (r.failed ? "FAILED" : "ok") << '\n';
    }
    write_text(path, os.str());
}

std::string adaptation_config_to_json(const AdaptationConfig& cfg) {
    json j{{"method", to_string(cfg.method)},
           {"use_wc", cfg.use_wc},
           {"wc_coefficient", cfg.wc_coefficient},
           {"wc_normalized", cfg.wc_normalized},
           {"use_ei", cfg.use_ei},
           {"entropy_mode", to_string(cfg.entropy_mode)},
           {"entropy_coefficient", cfg.entropy_coefficient},
           {"alpha", cfg.threshold.alpha},
           {"lambda", cfg.threshold.lambda},
           {"pseudo_label_refresh",
            cfg.pseudo_label_refresh == LabelRefresh::per_epoch ? "per_epoch" : "per_batch"},
           {"epochs", cfg.epochs},
           {"batch_size", cfg.batch_size},
           {"learning_rate", cfg.learning_rate},
           {"weight_decay", cfg.weight_decay},
           {"seed", cfg.seed},
           {"augment",
            json{{"blur", cfg.augment.blur},
                 {"shift_scale_rotate", cfg.augment.shift_scale_rotate},
                 {"brightness_contrast", cfg.augment.brightness_contrast},
                 {"grid_shuffle", cfg.augment.grid_shuffle},
                 {"apply_prob", cfg.augment.apply_prob}}},
           {"bn_adapt",
            json{{"momentum", cfg.bn_adapt.momentum},
                 {"passes", cfg.bn_adapt.passes},
                 {"train_gamma_beta", cfg.bn_adapt.train_gamma_beta},
                 {"entropy_steps", cfg.bn_adapt.entropy_steps},
                 {"gamma_beta_lr", cfg.bn_adapt.gamma_beta_lr}}}};
    return j.dump(2) + "\n";
}

AdaptationConfig adaptation_config_from_json(const std::string& json_text) {
    const json j = json::parse(json_text);
    AdaptationConfig cfg;
    cfg.method = parse_method(j.at("method").get<std::string>());
    cfg.use_wc = j.at("use_wc").get<bool>();
    cfg.wc_coefficient = j.at("wc_coefficient").get<double>();
    cfg.wc_normalized = j.value("wc_normalized", false);
    cfg.use_ei = j.at("use_ei").get<bool>();
    cfg.entropy_mode = parse_entropy_mode(j.at("entropy_mode").get<std::string>());
    cfg.entropy_coefficient = j.at("entropy_coefficient").get<double>();
    cfg.threshold.alpha = j.at("alpha").get<double>();
    cfg.threshold.lambda = j.at("lambda").get<double>();
    cfg.pseudo_label_refresh = j.value("pseudo_label_refresh", std::string("per_epoch")) == "per_batch"
                                   ? LabelRefresh::per_batch
                                   : LabelRefresh::per_epoch;
    cfg.epochs = j.at("epochs").get<int>();
    cfg.batch_size = j.at("batch_size").get<int>();
    cfg.learning_rate = j.at("learning_rate").get<double>();
    cfg.weight_decay = j.at("weight_decay").get<double>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("augment")) {
        const auto& a = j.at("augment");
        cfg.augment.blur = a.value("blur", false);
        cfg.augment.shift_scale_rotate = a.value("shift_scale_rotate", false);
        cfg.augment.brightness_contrast = a.value("brightness_contrast", false);
        cfg.augment.grid_shuffle = a.value("grid_shuffle", false);
        cfg.augment.apply_prob = a.value("apply_prob", 0.5);
    }
    if (j.contains("bn_adapt")) {
        const auto& b = j.at("bn_adapt");
        cfg.bn_adapt.momentum = b.value("momentum", 1.0);
        cfg.bn_adapt.passes = b.value("passes", 1);
        cfg.bn_adapt.train_gamma_beta = b.value("train_gamma_beta", false);
        cfg.bn_adapt.entropy_steps = b.value("entropy_steps", 0);
        cfg.bn_adapt.gamma_beta_lr = b.value("gamma_beta_lr", 3e-5);
    }
    return cfg;
}

void write_dice_curve_svg(const std::string& path, const std::vector<double>& per_epoch_dice) {
    const int W = 640, H = 400, ml = 50, mb = 30, mt = 15, mr = 15;
    std::ostringstream os;
    os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
    os << "<rect width='" << W << "' height='" << H << "' fill='white'/>\n";
    os << "<line x1='" << ml << "' y1='" << H - mb << "' x2='" << W - mr << "' y2='" << H - mb
       << "' stroke='black'/>\n";
    os << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << H - mb
       << "' stroke='black'/>\n";
    if (!per_epoch_dice.empty()) {
        const double n = static_cast<double>(per_epoch_dice.size());
        os << "<polyline fill='none' stroke='steelblue' stroke-width='2' points='";
        for (std::size_t i = 0; i < per_epoch_dice.size(); ++i) {
            const double x = ml + (W - ml - mr) * (n == 1 ? 0.5 : i / (n - 1));
            const double y = (H - mb) - (H - mb - mt) * std::clamp(per_epoch_dice[i], 0.0, 1.0);
            os << x << ',' << y << ' ';
        }
        os << "'/>\n";
    }
    for (int tick = 0; tick <= 4; ++tick) {
        const double v = tick / 4.0;
        const double y = (H - mb) - (H - mb - mt) * v;
        os << "<text x='8' y='" << y + 4 << "' font-size='12'>" << v << "</text>\n";
    }
    os << "<text x='" << W / 2 << "' y='" << H - 8 << "' font-size='12'>epoch</text>\n";
    os << "</svg>\n";
    write_text(path, os.str());
}

}  // namespace sfuda
