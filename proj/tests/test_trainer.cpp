#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sfuda/trainer.hpp"

using namespace sfuda;

namespace {

// Tiny benchmark so training steps stay cheap.
Benchmark tiny_benchmark() {
    SceneSpec spec;
    spec.image_size = 16;
    return make_benchmark(spec, default_shift_pipeline(), 8, 4, 51);
}

ModelDescriptor tiny_descriptor() {
    ModelDescriptor d;
    d.stage_channels = {4, 8};
    d.num_classes = 3;
    return d;
}

AdaptationConfig tiny_config() {
    AdaptationConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.seed = 3;
    cfg.augment = AugmentConfig{};
    return cfg;
}

}  // namespace

TEST_CASE("train_source: zero epochs returns the initialized model") {
    auto bench = tiny_benchmark();
    auto model = build_model<float>(tiny_descriptor(), 1);
    const auto before = snapshot_parameters(model);
    SourceTrainConfig cfg;
    cfg.epochs = 0;
    auto result = train_source(std::move(model), bench.source_train, bench.source_val, cfg);
    CHECK(result.history.empty());
    CHECK(weight_consolidation_penalty(result.model.parameters(), before) == 0.0f);
}

TEST_CASE("train_source: deterministic history under a fixed seed") {
    auto bench = tiny_benchmark();
    SourceTrainConfig cfg;
    cfg.epochs = 2;
    cfg.seed = 9;
    auto r1 = train_source(build_model<float>(tiny_descriptor(), 4), bench.source_train,
                           bench.source_val, cfg);
    auto r2 = train_source(build_model<float>(tiny_descriptor(), 4), bench.source_train,
                           bench.source_val, cfg);
    REQUIRE(r1.history.size() == r2.history.size());
    for (std::size_t i = 0; i < r1.history.size(); ++i) {
        CHECK(r1.history[i].train_ce == r2.history[i].train_ce);
        CHECK(r1.history[i].source_val_dice == r2.history[i].source_val_dice);
    }
}

TEST_CASE("train_source: divergence aborts with a diagnostic") {
    auto bench = tiny_benchmark();
    SourceTrainConfig cfg;
    cfg.epochs = 3;
    cfg.learning_rate = 1e12;
    CHECK_THROWS_AS(train_source(build_model<float>(tiny_descriptor(), 4), bench.source_train,
                                 bench.source_val, cfg),
                    numerical_error);
}

TEST_CASE("self_train_adapt: zero epochs is a no-op") {
    auto bench = tiny_benchmark();
    auto model = build_model<float>(tiny_descriptor(), 2);
    const auto star = snapshot_parameters(model);
    auto run = self_train_adapt(SegModel<float>(model), star, bench, [] {
        auto c = tiny_config();
        c.epochs = 0;
        return c;
    }());
    CHECK(run.records.empty());
    CHECK(run.report.per_epoch_dice.empty());
    CHECK(weight_consolidation_penalty(run.final_model.parameters(), star) == 0.0f);
}

TEST_CASE("self_train_adapt: determinism and breakdown invariant") {
    auto bench = tiny_benchmark();
    auto model = build_model<float>(tiny_descriptor(), 2);
    const auto star = snapshot_parameters(model);

    auto cfg = tiny_config();
    cfg.use_wc = true;
    cfg.wc_coefficient = 0.01;
    cfg.use_ei = true;
    cfg.augment = AugmentConfig::all_enabled();

    auto r1 = self_train_adapt(SegModel<float>(model), star, bench, cfg);
    auto r2 = self_train_adapt(SegModel<float>(model), star, bench, cfg);
    REQUIRE(r1.records.size() == 2);
    for (std::size_t i = 0; i < r1.records.size(); ++i) {
        // Bit-level determinism on losses and dice.
        CHECK(r1.records[i].train_loss.total == r2.records[i].train_loss.total);
        CHECK(r1.records[i].target_val_dice == r2.records[i].target_val_dice);

        const auto& b = r1.records[i].train_loss;
        CHECK(std::abs(b.total - (b.adaptation + cfg.entropy_coefficient * b.self_entropy +
                                  cfg.wc_coefficient * b.wc_penalty)) < 1e-6);
        CHECK(b.wc_penalty >= 0.0);
    }
    CHECK(r1.report.degradation_gap >= 0.0);
    CHECK(r1.report.best_dice ==
          *std::max_element(r1.report.per_epoch_dice.begin(), r1.report.per_epoch_dice.end()));
}

TEST_CASE("self_train_adapt: source-free contract") {
    auto bench = tiny_benchmark();
    auto model = build_model<float>(tiny_descriptor(), 2);
    const auto star = snapshot_parameters(model);
    auto run = self_train_adapt(SegModel<float>(model), star, bench, tiny_config());
    CHECK(!run.consumed_sample_ids.empty());
    for (const auto& id : run.consumed_sample_ids) {
        CHECK(id.find("source") == std::string::npos);
        CHECK(id.rfind("target_train", 0) == 0);
    }
}

TEST_CASE("self_train_adapt: structural mismatch and bad config rejected") {
    auto bench = tiny_benchmark();
    auto model = build_model<float>(tiny_descriptor(), 2);

    ModelDescriptor other = tiny_descriptor();
    other.stage_channels = {6, 8};
    const auto wrong_star = snapshot_parameters(build_model<float>(other, 2));
    CHECK_THROWS_AS(
        self_train_adapt(SegModel<float>(model), wrong_star, bench, tiny_config()),
        argument_error);

    auto bad = tiny_config();
    bad.use_ei = true;
    bad.entropy_mode = EntropyMode::min;
    CHECK_THROWS_AS(
        self_train_adapt(SegModel<float>(model), snapshot_parameters(model), bench, bad),
        config_error);

    auto bad2 = tiny_config();
    bad2.method = Method::os;
    bad2.use_ei = true;
    CHECK_THROWS_AS(
        self_train_adapt(SegModel<float>(model), snapshot_parameters(model), bench, bad2),
        config_error);
}

TEST_CASE("self_train_adapt: ld and os methods run") {
    auto bench = tiny_benchmark();
    auto model = build_model<float>(tiny_descriptor(), 2);
    const auto star = snapshot_parameters(model);

    auto ld_cfg = tiny_config();
    ld_cfg.method = Method::ld;
    auto ld_run = self_train_adapt(SegModel<float>(model), star, bench, ld_cfg);
    CHECK(ld_run.records.size() == 2);

    auto os_cfg = tiny_config();
    os_cfg.method = Method::os;
    os_cfg.bn_adapt.momentum = 0.3;
    os_cfg.bn_adapt.train_gamma_beta = true;
    os_cfg.bn_adapt.entropy_steps = 2;
    os_cfg.entropy_mode = EntropyMode::min;
    auto os_run = self_train_adapt(SegModel<float>(model), star, bench, os_cfg);
    CHECK(os_run.records.size() == 2);
    // OS leaves conv weights untouched.
    auto final_params = os_run.final_model.parameters();
    auto star_view = star.view();
    for (std::size_t i = 0; i < final_params.size(); ++i) {
        if (!final_params[i].trainable) continue;
        const bool is_gb = final_params[i].name.find(".bn.gamma") != std::string::npos ||
                           final_params[i].name.find(".bn.beta") != std::string::npos;
        if (!is_gb)
            CHECK(final_params[i].vec() == star_view[i].vec());
    }
}

TEST_CASE("per-batch label refresh runs and differs from per-epoch") {
    auto bench = tiny_benchmark();
    auto model = build_model<float>(tiny_descriptor(), 2);
    const auto star = snapshot_parameters(model);
    auto cfg = tiny_config();
    cfg.pseudo_label_refresh = LabelRefresh::per_batch;
    auto run = self_train_adapt(SegModel<float>(model), star, bench, cfg);
    CHECK(run.records.size() == 2);
}

TEST_CASE("run_ablation_grid: grid executes, failures recorded, duplicates identical") {
    auto bench = tiny_benchmark();
    auto model = build_model<float>(tiny_descriptor(), 6);
    const auto star = snapshot_parameters(model);

    auto base = tiny_config();
    auto grid = ablation_groups(base, {"A", "B", "C", "D"});
    CHECK(grid.size() == 4);
    CHECK(grid[3].second.use_wc);
    CHECK(grid[3].second.use_ei);
    CHECK_THROWS_AS(ablation_groups(base, {"E"}), config_error);

    // Duplicate config -> identical reports under equal seeds.
    std::vector<std::pair<std::string, AdaptationConfig>> dup{{"A1", grid[0].second},
                                                              {"A2", grid[0].second}};
    auto cells = run_ablation_grid(model, star, bench, dup);
    REQUIRE(cells.size() == 2);
    CHECK(!cells[0].failed);
    CHECK(cells[0].report.per_epoch_dice == cells[1].report.per_epoch_dice);

    // A failing cell is recorded and the grid continues.
    auto bad = base;
    bad.learning_rate = 1e12;
    std::vector<std::pair<std::string, AdaptationConfig>> mixed{{"bad", bad}, {"ok", grid[0].second}};
    auto mixed_cells = run_ablation_grid(model, star, bench, mixed);
    CHECK(mixed_cells[0].failed);
    CHECK(!mixed_cells[0].error.empty());
    CHECK(!mixed_cells[1].failed);

    CHECK_THROWS_AS(run_ablation_grid(model, star, bench, {}), argument_error);
}
