#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include <nlohmann/json.hpp>

#include "codebrain/metrics.hpp"

using namespace codebrain;
using namespace codebrain::metrics;

namespace {

Tensor random_image(Rng& rng, int h, int w) {
    Tensor t({h, w});
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform();
    return t;
}

}  // namespace

TEST_CASE("psnr identities and the zero-mse cap") {
    Rng rng(1);
    const Tensor x = random_image(rng, 16, 16);
    CHECK(psnr(x, x) == 100.0);

    Tensor y = x;
    for (std::int64_t i = 0; i < y.size(); ++i) y[i] = std::min(1.0, x[i] * 0.5 + 0.1);
    CHECK(psnr(x, y) == doctest::Approx(psnr(y, x)).epsilon(1e-15));

    const Tensor a = Tensor::full({8, 8}, 0.4);
    const Tensor b = Tensor::full({8, 8}, 0.5);
    CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-12));  // 10*log10(1/0.01)

    Tensor wrong({4, 4});
    CHECK_THROWS_AS(static_cast<void>(psnr(x, wrong)), std::invalid_argument);
}

TEST_CASE("psnr strictly decreases as noise grows") {
    Rng rng(2);
    const Tensor x = random_image(rng, 24, 24);
    double prev = 1e9;
    for (double amp : {0.001, 0.003, 0.01, 0.03, 0.1}) {
        Tensor y = x;
        Rng nrng(3);
        for (std::int64_t i = 0; i < y.size(); ++i)
            y[i] = std::min(1.0, std::max(0.0, x[i] + amp * (2.0 * nrng.uniform() - 1.0)));
        const double v = psnr(x, y);
        CHECK(v < prev);
        prev = v;
    }
}

TEST_CASE("ssim identities and the constant-image closed form") {
    Rng rng(4);
    const Tensor x = random_image(rng, 16, 16);
    CHECK(ssim(x, x) == doctest::Approx(1.0).epsilon(1e-12));

    const Tensor zeros({16, 16});
    const Tensor ones = Tensor::full({16, 16}, 1.0);
    // means 0 and 1, zero variances: (2*0*1+C1)(0+C2) / ((0+1+C1)(0+C2)) = C1/(1+C1)
    const double expect = 1e-4 / (1.0 + 1e-4);
    CHECK(ssim(zeros, ones) == doctest::Approx(expect).epsilon(1e-10));
    CHECK(ssim(ones, zeros) == doctest::Approx(expect).epsilon(1e-10));

    const Tensor y = random_image(rng, 16, 16);
    CHECK(ssim(x, y) == doctest::Approx(ssim(y, x)).epsilon(1e-12));
    CHECK(ssim(x, y) < 1.0);
    CHECK(ssim(x, y) >= -1.0);

    Tensor small({8, 8});
    CHECK_THROWS_AS(static_cast<void>(ssim(small, small)), std::invalid_argument);
}

TEST_CASE("mae identities, symmetry and the triangle inequality") {
    Rng rng(5);
    const Tensor x = random_image(rng, 12, 12);
    CHECK(mae(x, x) == 0.0);

    const Tensor a = Tensor::full({8, 8}, 0.30);
    const Tensor b = Tensor::full({8, 8}, 0.35);
    CHECK(mae(a, b) == doctest::Approx(0.05).epsilon(1e-12));  // reported as 50.0 x1000

    for (int trial = 0; trial < 20; ++trial) {
        const Tensor p = random_image(rng, 12, 12);
        const Tensor q = random_image(rng, 12, 12);
        const Tensor r = random_image(rng, 12, 12);
        CHECK(mae(p, q) == doctest::Approx(mae(q, p)).epsilon(1e-15));
        CHECK(mae(p, r) <= mae(p, q) + mae(q, r) + 1e-12);
    }
}

TEST_CASE("code-map coherence on constant and checkerboard grids") {
    quantizer::CodeGrid g;
    g.channels = 2;
    g.height = 4;
    g.width = 4;
    g.levels = 5;
    g.codes.assign(32, 1);
    CHECK(code_map_coherence(g) == 1.0);

    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) g.codes[static_cast<size_t>(y * 4 + x)] = (x + y) % 2 ? 2 : -2;
    // second channel constant; vectors still differ in channel 0
    CHECK(code_map_coherence(g) == 0.0);

    quantizer::CodeGrid tiny = g;
    tiny.height = 1;
    tiny.width = 1;
    tiny.channels = 1;
    tiny.codes = {0};
    CHECK_THROWS_AS(static_cast<void>(code_map_coherence(tiny)), std::invalid_argument);
}

TEST_CASE("spatial permutation destroys coherence of structured maps") {
    // two homogeneous halves: highly coherent until shuffled
    quantizer::CodeGrid g;
    g.channels = 1;
    g.height = 8;
    g.width = 8;
    g.levels = 5;
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) g.codes.push_back(y < 4 ? -1 : 2);
    const double observed = code_map_coherence(g);
    CHECK(observed > 0.9);
    Rng rng(77);
    int wins = 0;
    for (int i = 0; i < 20; ++i) wins += observed > permuted_coherence(g, rng) ? 1 : 0;
    CHECK(wins == 20);
}

TEST_CASE("evaluate covers every scenario cell and the zero baseline") {
    synthdata::PhantomConfig cfg;
    cfg.num_modalities = 3;
    cfg.image_size = 16;
    cfg.num_subjects = 4;
    std::vector<synthdata::ModalityStack> subjects;
    for (int i = 0; i < 4; ++i) subjects.push_back(synthdata::gen_subject(100 + i, cfg));
    std::vector<const synthdata::ModalityStack*> ptrs;
    for (const auto& s : subjects) ptrs.push_back(&s);

    const auto scenarios = synthdata::enumerate_scenarios(3);
    // a deliberately trivial imputer: constant mid-gray
    auto impute_fn = [](const synthdata::ModalityStack& s, const synthdata::ScenarioMask&) {
        return Tensor::full({s.height(), s.width()}, 0.5);
    };
    // a perfect "reconstructor": echoes the truth
    auto recon_fn = [](const synthdata::ModalityStack& s, const synthdata::ScenarioMask& m) {
        return s.channels[static_cast<size_t>(m.anchor)];
    };
    const MetricsReport report = evaluate(ptrs, scenarios, impute_fn, recon_fn);

    CHECK(report.cells.size() == scenarios.size());
    CHECK(report.cells.size() == 9);
    CHECK(report.subject_count == 4);
    for (const auto& cell : report.cells) {
        CHECK(cell.reconstruction.psnr == 100.0);  // truth echo hits the cap
        CHECK(cell.zero_fill.psnr < 40.0);
        CHECK(cell.zero_fill.mae > 0.0);
    }

    // zero-fill PSNR identity: mse against zeros is E[x^2]
    const auto& cell0 = report.cells[0];
    synthdata::ScenarioMask mask = synthdata::mask_for(scenarios[0]);
    double acc = 0;
    for (const auto* s : ptrs) {
        const Tensor& truth = s->channels[static_cast<size_t>(mask.anchor)];
        double ex2 = 0;
        for (std::int64_t i = 0; i < truth.size(); ++i) ex2 += truth[i] * truth[i];
        ex2 /= static_cast<double>(truth.size());
        acc += 10.0 * std::log10(1.0 / ex2);
    }
    CHECK(cell0.zero_fill.psnr == doctest::Approx(acc / 4.0).epsilon(1e-12));

    // O->O and M->O recombine into ALL as the sample-count-weighted mean
    const auto& oo = report.one_to_one;
    const auto& mo = report.many_to_one;
    const auto& all = report.all;
    CHECK(oo.samples + mo.samples == all.samples);
    CHECK(oo.pairs == 6);
    CHECK(mo.pairs == 3);
    const double recombined =
        (oo.zero_fill.psnr * oo.samples + mo.zero_fill.psnr * mo.samples) / all.samples;
    CHECK(all.zero_fill.psnr == doctest::Approx(recombined).epsilon(1e-12));

    CHECK_THROWS_AS(static_cast<void>(evaluate({}, scenarios, impute_fn, recon_fn)),
                    std::invalid_argument);

    // serialization round trips ok and carries every cell
    const nlohmann::json j = report.to_json();
    CHECK(j.at("cells").size() == 9);
    const std::string csv = report.to_csv();
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 10);  // header + 9 rows
}
