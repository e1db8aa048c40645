#include "vcpseg/metrics.hpp"
#include "vcpseg/errors.hpp"
#include "vcpseg/util.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cmath>

using namespace vcpseg;
namespace vm = vcpseg::metrics;

namespace {

vm::ScoredSample make_sample(const std::vector<double>& scores,
                             const std::vector<std::uint8_t>& mask, int h, int w,
                             const std::string& product = "p") {
    vm::ScoredSample s;
    s.scores = Eigen::Map<const Eigen::VectorXd>(scores.data(), static_cast<long>(scores.size()));
    s.mask = mask;
    s.h = h;
    s.w = w;
    s.product = product;
    s.image_score = s.scores.maxCoeff();
    return s;
}

struct RandomInstance {
    std::vector<double> scores;
    std::vector<std::uint8_t> mask;
    int h, w;
};

RandomInstance random_instance(Rng& rng, int max_side = 32, bool quantized = false) {
    const int h = static_cast<int>(rng.uniform_int(2, max_side));
    const int w = static_cast<int>(rng.uniform_int(2, max_side));
    RandomInstance inst;
    inst.h = h;
    inst.w = w;
    inst.scores.resize(static_cast<std::size_t>(h) * w);
    inst.mask.resize(static_cast<std::size_t>(h) * w);
    bool any_pos = false, any_neg = false;
    for (std::size_t i = 0; i < inst.scores.size(); ++i) {
        inst.scores[i] = quantized ? std::round(rng.uniform() * 16.0) / 16.0 : rng.uniform();
        inst.mask[i] = rng.uniform() < 0.3 ? 1 : 0;
        any_pos |= inst.mask[i] == 1;
        any_neg |= inst.mask[i] == 0;
    }
    if (!any_pos) inst.mask[0] = 1;
    if (!any_neg) inst.mask[1] = 0;
    return inst;
}

}  // namespace

TEST_CASE("auroc: spot values and the 6-pixel pairwise case") {
    std::vector<double> scores{0.1, 0.4, 0.35, 0.8, 0.8, 0.05};
    std::vector<std::uint8_t> mask{0, 0, 1, 1, 0, 1};
    CHECK(vm::auroc(scores, mask) == doctest::Approx(oracle::auroc(scores, mask)).epsilon(1e-12));

    // scores equal to the mask rank perfectly / inversely
    std::vector<double> as_mask(mask.begin(), mask.end());
    CHECK(vm::auroc(as_mask, mask) == 1.0);
    std::vector<double> inverted;
    for (auto m : mask) inverted.push_back(1.0 - m);
    CHECK(vm::auroc(inverted, mask) == 0.0);

    // constant scores: tie credit gives 0.5
    std::vector<double> flat(mask.size(), 0.7);
    CHECK(vm::auroc(flat, mask) == 0.5);

    CHECK_THROWS_AS(vm::auroc({1.0, 2.0}, {1, 1}), UndefinedMetric);
}

TEST_CASE("average precision: spot values") {
    std::vector<std::uint8_t> mask{0, 0, 1, 1, 0, 1};
    std::vector<double> as_mask(mask.begin(), mask.end());
    CHECK(vm::average_precision(as_mask, mask) == 1.0);

    // constant scores: AP equals the positive fraction
    std::vector<double> flat(mask.size(), 0.2);
    CHECK(vm::average_precision(flat, mask) == doctest::Approx(0.5).epsilon(1e-12));

    CHECK_THROWS_AS(vm::average_precision({1.0, 2.0}, {0, 0}), UndefinedMetric);
}

TEST_CASE("auroc and ap match brute-force oracles on random instances") {
    Rng rng(7);
    for (int trial = 0; trial < 60; ++trial) {
        RandomInstance inst = random_instance(rng, 16, trial % 2 == 0);
        CHECK(std::abs(vm::auroc(inst.scores, inst.mask) - oracle::auroc(inst.scores, inst.mask)) <
              1e-9);
        CHECK(std::abs(vm::average_precision(inst.scores, inst.mask) -
                       oracle::average_precision(inst.scores, inst.mask)) < 1e-9);
    }
}

TEST_CASE("rank invariance: strictly increasing transforms keep all three metrics") {
    Rng rng(8);
    RandomInstance inst = random_instance(rng, 12);
    auto transform = [](double v) { return v * v * v + 2.0 * v + 1.0; };  // strictly increasing
    std::vector<double> mapped;
    for (double v : inst.scores) mapped.push_back(transform(v));

    CHECK(vm::auroc(inst.scores, inst.mask) == vm::auroc(mapped, inst.mask));
    CHECK(vm::average_precision(inst.scores, inst.mask) ==
          vm::average_precision(mapped, inst.mask));

    auto s1 = make_sample(inst.scores, inst.mask, inst.h, inst.w);
    auto s2 = make_sample(mapped, inst.mask, inst.h, inst.w);
    CHECK(vm::pro({s1}, 0.3, 0) == vm::pro({s2}, 0.3, 0));
}

TEST_CASE("connected components agree with the flood-fill oracle") {
    Rng rng(9);
    for (int trial = 0; trial < 40; ++trial) {
        const int h = static_cast<int>(rng.uniform_int(1, 12));
        const int w = static_cast<int>(rng.uniform_int(1, 12));
        std::vector<std::uint8_t> mask(static_cast<std::size_t>(h) * w);
        for (auto& m : mask) m = rng.uniform() < 0.45 ? 1 : 0;

        auto [labels, count] = vm::connected_components(mask, h, w);
        auto [olabels, ocount] = oracle::flood_fill_components(mask, h, w);
        CHECK(count == ocount);
        // same partition up to label names: equal labels iff equal oracle labels
        for (std::size_t i = 0; i < mask.size(); ++i)
            for (std::size_t j = 0; j < mask.size(); ++j)
                if (mask[i] && mask[j])
                    CHECK((labels[i] == labels[j]) == (olabels[i] == olabels[j]));
    }
}

TEST_CASE("pro: perfect and inverted scores; 8x8 ramp against the exhaustive oracle") {
    // perfect: scores equal the mask
    std::vector<std::uint8_t> mask(16, 0);
    mask[5] = mask[6] = mask[9] = 1;
    std::vector<double> scores(mask.begin(), mask.end());
    CHECK(vm::pro({make_sample(scores, mask, 4, 4)}, 0.3, 0) == doctest::Approx(1.0).epsilon(1e-12));

    std::vector<double> inverted;
    for (auto m : mask) inverted.push_back(1.0 - m);
    CHECK(vm::pro({make_sample(inverted, mask, 4, 4)}, 0.3, 0) ==
          doctest::Approx(0.0).epsilon(1e-12));

    // 8x8 grid with two square regions and a linear score ramp
    const int h = 8, w = 8;
    std::vector<std::uint8_t> grid(64, 0);
    for (int y = 1; y <= 2; ++y)
        for (int x = 1; x <= 2; ++x) grid[static_cast<std::size_t>(y * w + x)] = 1;
    for (int y = 5; y <= 6; ++y)
        for (int x = 4; x <= 6; ++x) grid[static_cast<std::size_t>(y * w + x)] = 1;
    std::vector<double> ramp(64);
    for (int i = 0; i < 64; ++i) ramp[static_cast<std::size_t>(i)] = i / 63.0;

    oracle::ProOracleSample osample{ramp, grid, h, w};
    const double expect = oracle::pro({osample}, 0.3);
    CHECK(vm::pro({make_sample(ramp, grid, h, w)}, 0.3, 200) ==
          doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("pro matches the exhaustive oracle on random multi-sample instances") {
    Rng rng(11);
    for (int trial = 0; trial < 25; ++trial) {
        std::vector<vm::ScoredSample> samples;
        std::vector<oracle::ProOracleSample> osamples;
        const int n_samples = static_cast<int>(rng.uniform_int(1, 3));
        for (int s = 0; s < n_samples; ++s) {
            RandomInstance inst = random_instance(rng, 12, trial % 3 == 0);
            samples.push_back(make_sample(inst.scores, inst.mask, inst.h, inst.w));
            osamples.push_back({inst.scores, inst.mask, inst.h, inst.w});
        }
        const double got = vm::pro(samples, 0.3, 200);
        const double expect = oracle::pro(osamples, 0.3);
        CHECK(std::abs(got - expect) < 1e-6);
    }
}

TEST_CASE("pro rejects degenerate inputs") {
    std::vector<std::uint8_t> empty(9, 0);
    std::vector<double> scores(9, 0.5);
    CHECK_THROWS_AS(vm::pro({make_sample(scores, empty, 3, 3)}, 0.3, 0), UndefinedMetric);
    std::vector<std::uint8_t> full(9, 1);
    CHECK_THROWS_AS(vm::pro({make_sample(scores, full, 3, 3)}, 0.3, 0), UndefinedMetric);
}

TEST_CASE("image metrics order anomalous above normal") {
    std::vector<vm::ScoredSample> samples;
    for (int i = 0; i < 6; ++i) {
        std::vector<std::uint8_t> mask(4, 0);
        if (i % 2 == 0) mask[0] = 1;
        std::vector<double> scores(4, i % 2 == 0 ? 0.9 : 0.1);
        samples.push_back(make_sample(scores, mask, 2, 2));
    }
    auto [iroc, iap] = vm::image_metrics(samples);
    CHECK(iroc == 1.0);
    CHECK(iap == 1.0);

    // constant scores against shuffled labels: tie credit gives 0.5
    std::vector<vm::ScoredSample> flat;
    for (int i = 0; i < 6; ++i) {
        std::vector<std::uint8_t> mask(4, 0);
        if (i < 3) mask[0] = 1;
        std::vector<double> scores(4, 0.42);
        flat.push_back(make_sample(scores, mask, 2, 2));
    }
    CHECK(vm::image_metrics(flat).first == 0.5);
}

TEST_CASE("report rendering: one-decimal percentages and the mean row") {
    vm::ProductMetrics a;
    a.product = "widget";
    a.auroc = 0.92;
    a.pro = 0.873;
    a.ap = 0.494;
    a.has_pixel = true;
    vm::ProductMetrics b = a;
    b.product = "gadget";
    b.auroc = 0.80;
    b.pro = 0.6;
    b.ap = 0.3;

    vm::EvalReport rep = vm::build_report({a, b});
    const std::string table = rep.render_table();
    CHECK(table.find("92.0") != std::string::npos);
    CHECK(table.find("87.3") != std::string::npos);
    CHECK(table.find("49.4") != std::string::npos);
    CHECK(rep.mean.auroc == doctest::Approx(0.86).epsilon(1e-12));

    const std::string csv = rep.render_csv();
    CHECK(csv.rfind("product,auroc,pro,ap,image_auroc,image_ap\n", 0) == 0);
    CHECK(csv.find("widget,92.0,87.3,49.4") != std::string::npos);

    CHECK_THROWS_AS(vm::build_report({}), UndefinedMetric);
}
