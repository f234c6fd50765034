#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sfuda/metrics.hpp"
#include "sfuda/rng.hpp"

using namespace sfuda;

namespace {

MatXi mask_from(std::initializer_list<std::initializer_list<int>> rows) {
    MatXi m(static_cast<Eigen::Index>(rows.size()),
            static_cast<Eigen::Index>(rows.begin()->size()));
    int y = 0;
    for (const auto& row : rows) {
        int x = 0;
        for (int v : row) m(y, x++) = v;
        ++y;
    }
    return m;
}

}  // namespace

TEST_CASE("dice: hand-computed cases") {
    auto a = mask_from({{1, 1, 0}, {1, 0, 0}});
    CHECK(dice(a, a, 1) == doctest::Approx(1.0).epsilon(1e-12));

    auto left = mask_from({{1, 1, 0, 0}});
    auto right = mask_from({{0, 0, 1, 1}});
    CHECK(dice(left, right, 1) == 0.0);

    // |P| = 6, |G| = 4, overlap 3 -> 0.6
    auto pred = mask_from({{1, 1, 1, 1, 1, 1, 0, 0, 0, 0}});
    auto gt = mask_from({{0, 0, 0, 1, 1, 1, 1, 0, 0, 0}});
    CHECK(dice(pred, gt, 1) == doctest::Approx(0.6).epsilon(1e-12));

    // Both empty: convention 1.0.
    auto zeros = mask_from({{0, 0}, {0, 0}});
    CHECK(dice(zeros, zeros, 1) == 1.0);

    CHECK_THROWS_AS(dice(mask_from({{0, 1}}), mask_from({{0}, {1}}), 1), argument_error);
}

TEST_CASE("dice: symmetry and permutation invariance") {
    Rng rng(51);
    for (int rep = 0; rep < 50; ++rep) {
        MatXi p(6, 6), g(6, 6);
        for (int y = 0; y < 6; ++y)
            for (int x = 0; x < 6; ++x) {
                p(y, x) = static_cast<int>(rng.uniform_int(0, 2));
                g(y, x) = static_cast<int>(rng.uniform_int(0, 2));
            }
        CHECK(dice(p, g, 1) == doctest::Approx(dice(g, p, 1)).epsilon(1e-12));

        // Same spatial permutation of both masks leaves dice unchanged.
        MatXi p2 = p, g2 = g;
        p2.row(0).swap(p2.row(3));
        g2.row(0).swap(g2.row(3));
        CHECK(dice(p2, g2, 1) == doctest::Approx(dice(p, g, 1)).epsilon(1e-12));

        // dice == 1 iff masks agree as sets when either side is non-empty.
        if (dice(p, g, 2) == 1.0) {
            for (int y = 0; y < 6; ++y)
                for (int x = 0; x < 6; ++x) CHECK((p(y, x) == 2) == (g(y, x) == 2));
        }
    }
}

TEST_CASE("mean dice") {
    auto pred = mask_from({{1, 1, 2, 0}});
    auto gt = mask_from({{1, 1, 0, 2}});
    // class 1 dice = 1.0; class 2 dice = 0.0 -> mean 0.5
    CHECK(mean_dice(pred, gt, {1, 2}) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(mean_dice(pred, gt, {1}) == doctest::Approx(dice(pred, gt, 1)).epsilon(1e-12));
    CHECK_THROWS_AS(mean_dice(pred, gt, {}), argument_error);

    Rng rng(53);
    MatXi p(5, 5), g(5, 5);
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x) {
            p(y, x) = static_cast<int>(rng.uniform_int(0, 3));
            g(y, x) = static_cast<int>(rng.uniform_int(0, 3));
        }
    const double manual = (dice(p, g, 1) + dice(p, g, 2) + dice(p, g, 3)) / 3.0;
    CHECK(mean_dice(p, g, {1, 2, 3}) == doctest::Approx(manual).epsilon(1e-12));
}

TEST_CASE("stability report") {
    auto monotone = stability_report({0.1, 0.2, 0.3, 0.4});
    CHECK(monotone.best_epoch == 4);
    CHECK(monotone.degradation_gap == doctest::Approx(0.0));
    CHECK(monotone.final_dice == doctest::Approx(0.4));

    std::vector<double> series(50, 0.6);
    series[0] = 0.5;
    series[1] = 0.7;
    auto r = stability_report(series);
    CHECK(r.best_epoch == 2);
    CHECK(r.best_dice == doctest::Approx(0.7));
    CHECK(r.final_dice == doctest::Approx(0.6));
    CHECK(r.degradation_gap == doctest::Approx(0.1));
    CHECK(r.probe_epochs == std::vector<int>{1, 2, 3, 5, 10, 20, 50});
    CHECK(r.omitted_probe_epochs.empty());

    auto constant = stability_report({0.5, 0.5, 0.5});
    CHECK(constant.degradation_gap == doctest::Approx(0.0));
    CHECK(constant.best_epoch == 1);  // earliest maximum

    // Probes beyond the series length are omitted and noted.
    auto short_run = stability_report({0.4, 0.6}, {1, 2, 50});
    CHECK(short_run.probe_epochs == std::vector<int>{1, 2});
    CHECK(short_run.omitted_probe_epochs == std::vector<int>{50});

    CHECK_THROWS_AS(stability_report({}), argument_error);
}

TEST_CASE("stability report: appending non-improving epochs keeps best") {
    std::vector<double> series{0.3, 0.8, 0.5};
    auto r0 = stability_report(series);
    series.push_back(0.55);
    auto r1 = stability_report(series);
    CHECK(r1.best_epoch == r0.best_epoch);
    CHECK(r1.best_dice == doctest::Approx(r0.best_dice));
    CHECK(r1.final_dice == doctest::Approx(0.55));
    CHECK(r1.degradation_gap == doctest::Approx(0.8 - 0.55));
}
