#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <vector>

#include "sfuda/pseudolabel.hpp"
#include "test_utils.hpp"

using namespace sfuda;

namespace {

/// Literal per-pixel double-threshold oracle: per-class sort, then a
/// double loop over pixels applying the argmax/intra/global conditions.
PseudoLabelMap dtpl_oracle(const ProbMap<double>& p, double alpha, double lambda) {
    const int C = p.num_classes();
    std::vector<std::vector<double>> vals(C);
    std::vector<int> argmax(p.num_pixels());
    for (Eigen::Index i = 0; i < p.num_pixels(); ++i) {
        int best = 0;
        for (int c = 1; c < C; ++c)
            if (p.values(i, c) > p.values(i, best)) best = c;
        argmax[i] = best;
        vals[best].push_back(p.values(i, best));
    }
    std::vector<double> delta(C, std::numeric_limits<double>::infinity());
    for (int c = 0; c < C; ++c) {
        if (vals[c].empty()) continue;
        std::sort(vals[c].begin(), vals[c].end(), std::greater<double>());
        const auto k = static_cast<std::size_t>(
            std::ceil(alpha * static_cast<double>(vals[c].size())));
        delta[c] = vals[c][std::min(k, vals[c].size()) - 1];
    }
    PseudoLabelMap y;
    y.height = p.height;
    y.width = p.width;
    y.num_classes = C;
    y.labels = Eigen::VectorXi::Constant(p.num_pixels(), PseudoLabelMap::kAbstain);
    for (Eigen::Index i = 0; i < p.num_pixels(); ++i) {
        const int c = argmax[i];
        const double v = p.values(i, c);
        if (v >= delta[c] && v > lambda) y.labels[i] = c;
    }
    return y;
}

std::vector<bool> label_set(const PseudoLabelMap& y) {
    std::vector<bool> s(y.labels.size());
    for (Eigen::Index i = 0; i < y.labels.size(); ++i) s[i] = y.labels[i] != PseudoLabelMap::kAbstain;
    return s;
}

bool subset_of(const PseudoLabelMap& inner, const PseudoLabelMap& outer) {
    for (Eigen::Index i = 0; i < inner.labels.size(); ++i)
        if (inner.labels[i] != PseudoLabelMap::kAbstain && inner.labels[i] != outer.labels[i])
            return false;
    return true;
}

}  // namespace

TEST_CASE("top_fraction_value against the sort oracle") {
    CHECK(top_fraction_value({0.9, 0.8, 0.7, 0.6}, 0.5) == doctest::Approx(0.8));
    CHECK(top_fraction_value({0.42}, 1.0) == doctest::Approx(0.42));
    CHECK(top_fraction_value({0.5, 0.5, 0.5}, 0.2) == doctest::Approx(0.5));
    CHECK(top_fraction_value({0.5, 0.5, 0.5}, 1.0) == doctest::Approx(0.5));
    CHECK(top_fraction_value({}, 0.3) == ClassThresholds::kEmptySentinel);
    CHECK_THROWS_AS(top_fraction_value({0.1}, 0.0), argument_error);
    CHECK_THROWS_AS(top_fraction_value({0.1}, 1.5), argument_error);

    Rng rng(5);
    for (int rep = 0; rep < 200; ++rep) {
        const int n = static_cast<int>(rng.uniform_int(1, 30));
        std::vector<double> v(n);
        for (auto& x : v) x = rng.uniform();
        const double alpha = rng.uniform(0.01, 1.0);
        const double got = top_fraction_value(v, alpha);
        std::sort(v.begin(), v.end(), std::greater<double>());
        const auto k = static_cast<std::size_t>(std::ceil(alpha * n));
        CHECK(got == v[std::min(k, v.size()) - 1]);
        const long count_ge = std::count_if(v.begin(), v.end(), [got](double x) { return x >= got; });
        CHECK(count_ge >= static_cast<long>(k));
    }
}

TEST_CASE("intra-class thresholds: support and sentinel behavior") {
    // All pixels argmax class 0 -> class 1 has empty support.
    ProbMap<double> p;
    p.height = 2;
    p.width = 2;
    p.values.resize(4, 2);
    p.values << 0.9, 0.1, 0.8, 0.2, 0.7, 0.3, 0.6, 0.4;
    auto th = intra_class_thresholds(p, 0.5);
    CHECK(th.support_count[0] == 4);
    CHECK(th.support_count[1] == 0);
    CHECK(th.delta[1] == ClassThresholds::kEmptySentinel);
    CHECK(th.delta[0] == doctest::Approx(0.8));  // top half of {0.9,0.8,0.7,0.6}

    auto th_full = intra_class_thresholds(p, 1.0);
    CHECK(th_full.delta[0] == doctest::Approx(0.6));  // min over support
}

TEST_CASE("ld labels: singleton, threshold exclusion, oracle equivalence") {
    ProbMap<double> p;
    p.height = 1;
    p.width = 1;
    p.values.resize(1, 2);
    p.values << 0.9, 0.1;
    auto y = ld_pseudo_label(p, 1.0);
    CHECK(y.labels[0] == 0);

    // alpha=0.5 on 4 pixels: bottom-two confidences of the class abstain.
    ProbMap<double> p4;
    p4.height = 4;
    p4.width = 1;
    p4.values.resize(4, 2);
    p4.values << 0.9, 0.1, 0.8, 0.2, 0.7, 0.3, 0.6, 0.4;
    auto y4 = ld_pseudo_label(p4, 0.5);
    CHECK(y4.labels[0] == 0);
    CHECK(y4.labels[1] == 0);
    CHECK(y4.labels[2] == PseudoLabelMap::kAbstain);
    CHECK(y4.labels[3] == PseudoLabelMap::kAbstain);

    Rng rng(23);
    for (int rep = 0; rep < 50; ++rep) {
        auto pm = test::random_prob_map<double>(rng, 8, 8, 4);
        const double alpha = rng.uniform(0.05, 1.0);
        const auto got = ld_pseudo_label(pm, alpha);
        const auto want = dtpl_oracle(pm, alpha, -1.0);  // lambda < 0 disables the floor
        CHECK(got.labels == want.labels);
    }
}

TEST_CASE("dtpl: default config, lambda=0 reduction, exhaustive oracle") {
    ThresholdConfig defaults;
    CHECK(defaults.alpha == doctest::Approx(0.3));
    CHECK(defaults.lambda == doctest::Approx(0.2));
    validate(defaults);

    Rng rng(29);
    for (int rep = 0; rep < 50; ++rep) {
        auto pm = test::random_prob_map<double>(rng, 6, 6, 3);
        // lambda = 0: equals LD wherever probabilities are positive (softmax is).
        auto with_floor = dtpl_pseudo_label(pm, {0.3, 0.0});
        auto ld = ld_pseudo_label(pm, 0.3);
        CHECK(with_floor.labels == ld.labels);
    }

    int checked = 0;
    for (int rep = 0; rep < 200; ++rep) {
        const int h = static_cast<int>(rng.uniform_int(1, 8));
        const int w = static_cast<int>(rng.uniform_int(1, 8));
        const int C = static_cast<int>(rng.uniform_int(2, 4));
        // Mix peaked and flat maps so empty-class cases occur.
        auto pm = test::random_prob_map<double>(rng, h, w, C, rep % 2 ? 4.0 : 1.0);
        for (double alpha : {0.1, 0.3, 1.0})
            for (double lambda : {0.0, 0.2, 0.5}) {
                const auto got = dtpl_pseudo_label(pm, {alpha, lambda});
                const auto want = dtpl_oracle(pm, alpha, lambda);
                REQUIRE(got.labels == want.labels);
                ++checked;
            }
    }
    CHECK(checked >= 200 * 9);
}

TEST_CASE("dtpl hits empty-class cases") {
    // One dominant class everywhere: other classes get zero labels, not a
    // lambda-only fallback.
    ProbMap<double> p;
    p.height = 3;
    p.width = 3;
    p.values.resize(9, 3);
    for (int i = 0; i < 9; ++i) {
        p.values(i, 0) = 0.8;
        p.values(i, 1) = 0.15;
        p.values(i, 2) = 0.05;
    }
    auto y = dtpl_pseudo_label(p, {0.3, 0.2});
    auto cov = label_coverage_stats(y);
    CHECK(cov.count[1] == 0);
    CHECK(cov.count[2] == 0);
    CHECK(cov.count[0] > 0);
}

TEST_CASE("threshold monotonicity and subset properties") {
    Rng rng(31);
    for (int rep = 0; rep < 100; ++rep) {
        const int C = static_cast<int>(rng.uniform_int(2, 4));
        auto pm = test::random_prob_map<double>(rng, 6, 6, C, rep % 2 ? 3.0 : 1.0);

        // Lambda monotonicity: larger floor keeps a subset.
        auto y_l1 = dtpl_pseudo_label(pm, {0.5, 0.1});
        auto y_l2 = dtpl_pseudo_label(pm, {0.5, 0.4});
        CHECK(subset_of(y_l2, y_l1));

        // Alpha monotonicity: smaller top-fraction is stricter.
        auto y_a1 = dtpl_pseudo_label(pm, {0.2, 0.1});
        auto y_a2 = dtpl_pseudo_label(pm, {0.8, 0.1});
        CHECK(subset_of(y_a1, y_a2));

        // DTPL with a floor selects a subset of LD at equal alpha.
        auto y_dtpl = dtpl_pseudo_label(pm, {0.4, 0.3});
        auto y_ld = ld_pseudo_label(pm, 0.4);
        CHECK(subset_of(y_dtpl, y_ld));

        // Per-pixel exclusivity holds by construction of the label encoding;
        // check the one-hot expansion anyway.
        auto onehot = y_dtpl.onehot<double>();
        for (Eigen::Index i = 0; i < onehot.rows(); ++i)
            CHECK(onehot.row(i).sum() <= 1.0);
    }
}

TEST_CASE("permutation equivariance of dtpl") {
    Rng rng(37);
    auto pm = test::random_prob_map<double>(rng, 5, 4, 3);
    std::vector<int> perm(20);
    for (int i = 0; i < 20; ++i) perm[i] = i;
    rng.shuffle(perm);
    ProbMap<double> pm2 = pm;
    for (int i = 0; i < 20; ++i) pm2.values.row(perm[i]) = pm.values.row(i);

    auto y = dtpl_pseudo_label(pm, {0.3, 0.2});
    auto y2 = dtpl_pseudo_label(pm2, {0.3, 0.2});
    for (int i = 0; i < 20; ++i) CHECK(y2.labels[perm[i]] == y.labels[i]);
}

TEST_CASE("label coverage stats") {
    PseudoLabelMap all_abstain;
    all_abstain.height = 2;
    all_abstain.width = 3;
    all_abstain.num_classes = 3;
    all_abstain.labels = Eigen::VectorXi::Constant(6, PseudoLabelMap::kAbstain);
    auto cov = label_coverage_stats(all_abstain);
    CHECK(cov.labeled_total == 0);
    CHECK(cov.abstain_fraction == doctest::Approx(1.0));
    for (int c = 0; c < 3; ++c) CHECK(cov.count[c] == 0);

    PseudoLabelMap full;
    full.height = 2;
    full.width = 3;
    full.num_classes = 2;
    full.labels = Eigen::VectorXi::Constant(6, 1);
    cov = label_coverage_stats(full);
    CHECK(cov.count[1] == 6);
    CHECK(cov.fraction[1] == doctest::Approx(1.0));

    Rng rng(41);
    auto y = test::random_label_map(rng, 7, 7, 4, 0.4);
    cov = label_coverage_stats(y);
    std::vector<long> manual(4, 0);
    long labeled = 0;
    for (Eigen::Index i = 0; i < y.labels.size(); ++i)
        if (y.labels[i] != PseudoLabelMap::kAbstain) {
            ++manual[y.labels[i]];
            ++labeled;
        }
    CHECK(cov.labeled_total == labeled);
    for (int c = 0; c < 4; ++c) CHECK(cov.count[c] == manual[c]);
}
