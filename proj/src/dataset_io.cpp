#include "sfuda/dataset_io.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "sfuda/errors.hpp"
#include "sfuda/png_io.hpp"

namespace sfuda {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string pad4(int n) {
    std::ostringstream os;
    os << std::setw(4) << std::setfill('0') << n;
    return os.str();
}

png::Image8 image_to_png(const ImageF& img) {
    png::Image8 out;
    out.width = static_cast<int>(img.cols());
    out.height = static_cast<int>(img.rows());
    out.channels = 1;
    out.pixels.resize(static_cast<std::size_t>(out.width) * out.height);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            out.at(y, x) = static_cast<std::uint8_t>(
                std::lround(std::clamp(img(y, x), 0.0f, 1.0f) * 255.0f));
    return out;
}

png::Image8 mask_to_png(const MatXi& mask) {
    png::Image8 out;
    out.width = static_cast<int>(mask.cols());
    out.height = static_cast<int>(mask.rows());
    out.channels = 1;
    out.pixels.resize(static_cast<std::size_t>(out.width) * out.height);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x) out.at(y, x) = static_cast<std::uint8_t>(mask(y, x));
    return out;
}

ImageF png_to_image(const png::Image8& p) {
    ImageF img(p.height, p.width);
    for (int y = 0; y < p.height; ++y)
        for (int x = 0; x < p.width; ++x) img(y, x) = static_cast<float>(p.at(y, x)) / 255.0f;
    return img;
}

MatXi png_to_mask(const png::Image8& p) {
    MatXi mask(p.height, p.width);
    for (int y = 0; y < p.height; ++y)
        for (int x = 0; x < p.width; ++x) mask(y, x) = p.at(y, x);
    return mask;
}

json scene_to_json(const SceneSpec& s) {
    json bands = json::array();
    for (const auto& b : s.intensity_bands) bands.push_back(json::array({b.lo, b.hi}));
    return json{{"image_size", s.image_size},
                {"num_classes", s.num_classes},
                {"shapes_min", s.shapes_min},
                {"shapes_max", s.shapes_max},
                {"intensity_bands", bands},
                {"texture_noise_sigma", s.texture_noise_sigma},
                {"shape_radius_min", s.shape_radius_min},
                {"shape_radius_max", s.shape_radius_max}};
}

SceneSpec scene_from_json(const json& j) {
    SceneSpec s;
    s.image_size = j.at("image_size").get<int>();
    s.num_classes = j.at("num_classes").get<int>();
    s.shapes_min = j.at("shapes_min").get<int>();
    s.shapes_max = j.at("shapes_max").get<int>();
    s.intensity_bands.clear();
    for (const auto& b : j.at("intensity_bands"))
        s.intensity_bands.push_back({b.at(0).get<double>(), b.at(1).get<double>()});
    s.texture_noise_sigma = j.at("texture_noise_sigma").get<double>();
    s.shape_radius_min = j.at("shape_radius_min").get<double>();
    s.shape_radius_max = j.at("shape_radius_max").get<double>();
    return s;
}

}  // namespace

void write_dataset(const std::string& dir, const Benchmark& bench) {
    const fs::path root(dir);
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");

    json splits;
    json sample_seeds = json::object();
    int counter = 0;

    auto write_one = [&](const std::string& split, const ImageF& img, const MatXi& mask,
                         std::uint64_t seed) {
        const std::string id = pad4(counter++);
        png::write_png((root / "images" / (id + ".png")).string(), image_to_png(img));
        png::write_png((root / "masks" / (id + ".png")).string(), mask_to_png(mask));
        splits[split].push_back(id);
        sample_seeds[id] = seed;
    };

    for (const auto& s : bench.source_train) write_one("source_train", s.image, s.mask, s.seed);
    for (const auto& s : bench.source_val) write_one("source_val", s.image, s.mask, s.seed);
    for (std::size_t i = 0; i < bench.target_train_images.size(); ++i)
        write_one("target_train", bench.target_train_images[i],
                  bench.target_train_masks_eval_only[i], 0);
    for (const auto& s : bench.target_val) write_one("target_val", s.image, s.mask, s.seed);

    json shift = json::array();
    for (const auto& sp : bench.shift)
        shift.push_back(json{{"kind", to_string(sp.kind)}, {"magnitude", sp.magnitude}, {"seed", sp.seed}});

    json meta{{"scene", scene_to_json(bench.scene)},
              {"shift", shift},
              {"master_seed", bench.master_seed},
              {"splits", splits},
              {"sample_seeds", sample_seeds}};
    std::ofstream os(root / "meta.json");
    if (!os) throw io_error("cannot write meta.json in " + dir);
    os << meta.dump(2) << "\n";
    if (!os) throw io_error("meta.json write failed in " + dir);
}

Benchmark read_dataset(const std::string& dir) {
    const fs::path root(dir);
    std::ifstream is(root / "meta.json");
    if (!is) throw io_error("dataset missing meta.json: " + dir);
    json meta;
    try {
        is >> meta;
    } catch (const json::exception& e) {
        throw io_error("bad meta.json in " + dir + ": " + e.what());
    }

    Benchmark b;
    b.scene = scene_from_json(meta.at("scene"));
    b.master_seed = meta.at("master_seed").get<std::uint64_t>();
    for (const auto& sp : meta.at("shift"))
        b.shift.push_back({parse_shift_kind(sp.at("kind").get<std::string>()),
                           sp.at("magnitude").get<double>(), sp.at("seed").get<std::uint64_t>()});

    const auto& seeds = meta.at("sample_seeds");
    auto load_one = [&](const std::string& id) {
        Sample s;
        s.image = png_to_image(png::read_png((root / "images" / (id + ".png")).string()));
        s.mask = png_to_mask(png::read_png((root / "masks" / (id + ".png")).string()));
        s.id = id;
        s.seed = seeds.contains(id) ? seeds.at(id).get<std::uint64_t>() : 0;
        return s;
    };

    const auto& splits = meta.at("splits");
    for (const auto& id : splits.at("source_train"))
        b.source_train.push_back(load_one(id.get<std::string>()));
    for (const auto& id : splits.at("source_val"))
        b.source_val.push_back(load_one(id.get<std::string>()));
    for (const auto& id : splits.at("target_train")) {
        Sample s = load_one(id.get<std::string>());
        b.target_train_images.push_back(std::move(s.image));
        b.target_train_ids.push_back(s.id);
        b.target_train_masks_eval_only.push_back(std::move(s.mask));
    }
    for (const auto& id : splits.at("target_val"))
        b.target_val.push_back(load_one(id.get<std::string>()));
    return b;
}

}  // namespace sfuda
