#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "codebrain/nets.hpp"
#include "codebrain/quantizer.hpp"
#include "codebrain/rng.hpp"
#include "codebrain/synthdata.hpp"

using namespace codebrain;
using namespace codebrain::nets;

namespace {

NetConfig tiny_config() {
    NetConfig cfg;
    cfg.num_modalities = 2;
    cfg.image_size = 16;
    cfg.code_channels = 2;
    cfg.levels = 5;
    cfg.common_channels = 4;
    cfg.base_width = 4;
    cfg.enc_blocks = 1;
    cfg.dec_blocks = 1;
    return cfg;
}

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

double grad_l2(const Tensor& g) {
    double s = 0;
    for (std::int64_t i = 0; i < g.size(); ++i) s += g[i] * g[i];
    return std::sqrt(s);
}

// full reconstruction objective on a tiny model, as the stage-1 trainer builds it
double stage1_loss(ParamStore& ps, std::map<std::string, Tensor>* grads, const NetConfig& cfg,
                   const Tensor& ms, const Tensor& ma, double gan_weight, bool discrete) {
    Graph g;
    Var msv = g.input(ms);
    Var mav = g.input(ma);
    Var fa = forward_posterior(g, cfg, ps, mav);
    Var z = bound_latent(g, fa, cfg.levels);
    Var zq = discrete ? round_ste(g, z) : z;
    Var fc = forward_source(g, cfg, ps, msv);
    Var recon = forward_decoder(g, cfg, ps, zq, fc);
    Var loss = psnr_loss_op(g, recon, ma);
    if (gan_weight > 0) {
        Var dfake = forward_discriminator(g, cfg, ps, recon, /*frozen=*/true);
        loss = add_weighted(g, loss, mean_sq_to_const(g, dfake, 1.0), gan_weight);
    }
    const double v = g.value(loss)[0];
    if (grads) {
        g.backward(loss);
        *grads = collect_grads(g, ps);
    }
    return v;
}

}  // namespace

TEST_CASE("shape contracts across the stage-1 graph") {
    NetConfig cfg = tiny_config();
    ParamStore ps;
    Rng rng(1);
    init_stage1(cfg, ps, rng);

    Rng drng(2);
    Graph g;
    Var ma = g.input(random_tensor({3, 1, 16, 16}, drng));
    Var ms = g.input(random_tensor({3, cfg.source_channels(), 16, 16}, drng));
    Var fa = forward_posterior(g, cfg, ps, ma);
    CHECK(g.value(fa).shape() == std::vector<int>{3, 2, 2, 2});  // d x size/8
    Var fc = forward_source(g, cfg, ps, ms);
    CHECK(g.value(fc).shape() == std::vector<int>{3, 4, 2, 2});
    Var z = bound_latent(g, fa, cfg.levels);
    Var recon = forward_decoder(g, cfg, ps, round_ste(g, z), fc);
    CHECK(g.value(recon).shape() == std::vector<int>{3, 1, 16, 16});
    CHECK(g.value(recon).min() >= 0.0);  // bounded output activation
    CHECK(g.value(recon).max() <= 1.0);
    Var d = forward_discriminator(g, cfg, ps, recon);
    CHECK(g.value(d).dim(1) == 1);  // patch logit map
    CHECK(g.value(d).dim(2) > 1);
}

TEST_CASE("zero-initialized posterior head emits all-zero codes") {
    NetConfig cfg = tiny_config();
    ParamStore ps;
    Rng rng(1);
    init_stage1(cfg, ps, rng);
    ps.at("e_post.head.w").fill(0.0);
    ps.at("e_post.head.b").fill(0.0);

    Rng drng(3);
    const Tensor img = random_tensor({1, 16, 16}, drng);
    const Tensor f = run_posterior(cfg, ps, img);
    CHECK(f.max() == 0.0);
    CHECK(f.min() == 0.0);
    const auto grid = quantizer::quantize(quantizer::bound(f, {cfg.levels, cfg.code_channels}));
    for (std::int32_t c : grid.codes) CHECK(c == 0);
}

TEST_CASE("input shape mismatches are rejected") {
    NetConfig cfg = tiny_config();
    ParamStore ps;
    Rng rng(1);
    init_stage1(cfg, ps, rng);
    Graph g;
    Var wrong = g.input(Tensor({1, 1, 8, 8}));
    CHECK_THROWS_AS(static_cast<void>(forward_posterior(g, cfg, ps, wrong)),
                    std::invalid_argument);
    Var wrong_ch = g.input(Tensor({1, 3, 16, 16}));
    CHECK_THROWS_AS(static_cast<void>(forward_source(g, cfg, ps, wrong_ch)),
                    std::invalid_argument);
    Var code = g.input(Tensor({1, 2, 2, 2}));
    Var fc_bad = g.input(Tensor({1, 4, 4, 4}));
    CHECK_THROWS_AS(static_cast<void>(forward_decoder(g, cfg, ps, code, fc_bad)),
                    std::invalid_argument);
}

TEST_CASE("source encoder stays finite on an all-zero masked stack") {
    NetConfig cfg = tiny_config();
    ParamStore ps;
    Rng rng(1);
    init_stage1(cfg, ps, rng);
    const Tensor fc = run_source(cfg, ps, Tensor({cfg.source_channels(), 16, 16}));
    CHECK(fc.all_finite());
}

TEST_CASE("different availability patterns give different common features") {
    NetConfig cfg = tiny_config();
    ParamStore ps;
    Rng rng(1);
    init_stage1(cfg, ps, rng);

    synthdata::PhantomConfig pcfg;
    pcfg.num_modalities = 2;
    pcfg.image_size = 16;
    const synthdata::ModalityStack subj = synthdata::gen_subject(9, pcfg);
    synthdata::ScenarioMask m1, m2;
    m1.available = {true, false};
    m1.anchor = 1;
    m2.available = {false, true};
    m2.anchor = 0;
    const Tensor f1 = run_source(cfg, ps, synthdata::apply_mask(subj, m1));
    const Tensor f2 = run_source(cfg, ps, synthdata::apply_mask(subj, m2));
    double dist = 0;
    for (std::int64_t i = 0; i < f1.size(); ++i) dist += std::abs(f1[i] - f2[i]);
    CHECK(dist > 0.0);
}

TEST_CASE("masked channels contribute exactly zero through the first conv") {
    // with indicators disabled, a zero-filled channel cannot influence the stem
    NetConfig cfg = tiny_config();
    cfg.mask_indicators = false;
    ParamStore ps;
    Rng rng(4);
    init_stage1(cfg, ps, rng);

    synthdata::PhantomConfig pcfg;
    pcfg.num_modalities = 2;
    pcfg.image_size = 16;
    const synthdata::ModalityStack subj = synthdata::gen_subject(10, pcfg);
    synthdata::ScenarioMask mask;
    mask.available = {false, true};
    mask.anchor = 0;
    const Tensor masked = synthdata::apply_mask(subj, mask, false);

    const Tensor out_a = run_source(cfg, ps, masked);
    // zeroing the stem weights of the masked channel must change nothing
    Tensor& w = ps.at("e_s.stem.w");  // (width, N, 3, 3)
    for (int o = 0; o < w.dim(0); ++o)
        for (int k = 0; k < 9; ++k) w[(static_cast<std::int64_t>(o) * 2 + 0) * 9 + k] = 0.0;
    const Tensor out_b = run_source(cfg, ps, masked);
    for (std::int64_t i = 0; i < out_a.size(); ++i) CHECK(out_a[i] == out_b[i]);
}

TEST_CASE("parameter registry is modality-agnostic") {
    NetConfig a = tiny_config();
    NetConfig b = tiny_config();
    b.num_modalities = 5;  // more modalities change channel counts, never the layout
    ParamStore pa, pb;
    Rng r1(1), r2(1);
    init_stage1(a, pa, r1);
    init_stage2(a, PriorHead::grading, pa, r1);
    init_stage1(b, pb, r2);
    init_stage2(b, PriorHead::grading, pb, r2);
    CHECK(pa.names() == pb.names());
    for (const std::string& n : pa.names()) CHECK(n.find("mod") == std::string::npos);
}

TEST_CASE("psnr loss analytics") {
    Graph g;
    Rng rng(5);
    Tensor target = random_tensor({1, 1, 8, 8}, rng);

    Var same = g.input(target);
    CHECK(g.value(psnr_loss_op(g, same, target))[0] == doctest::Approx(-80.0).epsilon(1e-12));

    Tensor shifted = target;
    for (std::int64_t i = 0; i < shifted.size(); ++i) shifted[i] += 0.1;
    Var off = g.input(shifted);
    CHECK(g.value(psnr_loss_op(g, off, target))[0] == doctest::Approx(-20.0).epsilon(1e-9));

    // strictly increasing in the error magnitude
    double prev = -80.0;
    for (double amp : {0.01, 0.02, 0.05, 0.1, 0.2}) {
        Tensor p = target;
        for (std::int64_t i = 0; i < p.size(); ++i) p[i] += amp;
        const double v = g.value(psnr_loss_op(g, g.input(p), target))[0];
        CHECK(v > prev);
        prev = v;
    }
}

TEST_CASE("least-squares adversarial terms") {
    Graph g;
    // discriminator emitting 0.5 everywhere: generator term (1-0.5)^2
    Var half = g.input(Tensor::full({2, 1, 4, 4}, 0.5));
    CHECK(g.value(mean_sq_to_const(g, half, 1.0))[0] == doctest::Approx(0.25).epsilon(1e-12));
    // perfect discriminator: 1 on real, 0 on fake
    Var ones = g.input(Tensor::full({2, 1, 4, 4}, 1.0));
    Var zeros = g.input(Tensor::full({2, 1, 4, 4}, 0.0));
    const double d_loss = 0.5 * g.value(mean_sq_to_const(g, ones, 1.0))[0] +
                          0.5 * g.value(mean_sq_to_const(g, zeros, 0.0))[0];
    CHECK(d_loss == 0.0);
}

TEST_CASE("a zero-weight head makes the discriminator output exactly 0.5") {
    NetConfig cfg = tiny_config();
    ParamStore ps;
    Rng rng(1);
    init_stage1(cfg, ps, rng);
    ps.at("disc.out.w").fill(0.0);
    ps.at("disc.out.b").fill(0.0);
    Graph g;
    Rng drng(6);
    Var img = g.input(random_tensor({1, 1, 16, 16}, drng));
    Var d = forward_discriminator(g, cfg, ps, img);
    for (std::int64_t i = 0; i < g.value(d).size(); ++i) CHECK(g.value(d)[i] == 0.5);
    CHECK(g.value(mean_sq_to_const(g, d, 1.0))[0] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("binary cross-entropy with logits matches the reference codec loss") {
    Graph g;
    Rng rng(8);
    quantizer::CodeGrid target;
    target.channels = 2;
    target.height = 3;
    target.width = 3;
    target.levels = 5;
    for (int i = 0; i < 18; ++i)
        target.codes.push_back(static_cast<std::int32_t>(rng.uniform_int(5)) - 2);

    Tensor logits = random_tensor({4, 2, 3, 3}, rng, -3.0, 3.0);
    const double reference = quantizer::grading_loss(logits, target);
    const Tensor bits = quantizer::ordinal_encode(target).bits;
    const double graph_value = g.value(bce_logits_op(g, g.input(logits), bits))[0];
    CHECK(graph_value == doctest::Approx(reference).epsilon(1e-12));

    Var zeros = g.input(Tensor({4, 2, 3, 3}));
    CHECK(g.value(bce_logits_op(g, zeros, bits))[0] ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("softmax cross-entropy at uniform logits is ln L") {
    Graph g;
    const int levels = 5;
    Var logits = g.input(Tensor({2, levels * 3, 2, 2}));
    std::vector<std::int32_t> labels(2 * 3 * 2 * 2, 2);
    CHECK(g.value(softmax_ce_op(g, logits, labels, levels))[0] ==
          doctest::Approx(std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("finite differences confirm single-op gradients") {
    Rng rng(11);
    ParamStore ps;
    Tensor& x = ps.create("x", {1, 3, 6, 6});
    for (std::int64_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(-1.5, 1.5);
    Tensor target = random_tensor({1, 3, 6, 6}, rng);

    SUBCASE("bound") {
        auto loss = [&](ParamStore& p, std::map<std::string, Tensor>* grads) {
            Graph g;
            Var v = bound_latent(g, g.param(p.at("x")), 5);
            Var l = mse_op(g, v, target);
            const double val = g.value(l)[0];
            if (grads) {
                g.backward(l);
                *grads = collect_grads(g, p);
            }
            return val;
        };
        CHECK(grad_check_max_rel_error(loss, ps, {"x"}) < 1e-6);
    }

    SUBCASE("activations and upsampling") {
        auto loss = [&](ParamStore& p, std::map<std::string, Tensor>* grads) {
            Graph g;
            Var v = activate(g, g.param(p.at("x")), Activation::leaky_relu);
            v = upsample_nearest2(g, v);
            v = activate(g, v, Activation::sigmoid);
            Var l = mean_sq_to_const(g, v, 0.3);
            const double val = g.value(l)[0];
            if (grads) {
                g.backward(l);
                *grads = collect_grads(g, p);
            }
            return val;
        };
        CHECK(grad_check_max_rel_error(loss, ps, {"x"}) < 1e-5);
    }

    SUBCASE("convolution weights, bias and input") {
        ParamStore cp;
        Rng crng(12);
        Tensor& w = cp.create("w", {4, 3, 3, 3});
        for (std::int64_t i = 0; i < w.size(); ++i) w[i] = 0.3 * crng.normal();
        Tensor& b = cp.create("b", {4});
        for (std::int64_t i = 0; i < b.size(); ++i) b[i] = 0.1 * crng.normal();
        Tensor& cx = cp.create("x", {2, 3, 6, 6});
        for (std::int64_t i = 0; i < cx.size(); ++i) cx[i] = crng.uniform(-1.0, 1.0);
        auto loss = [&](ParamStore& p, std::map<std::string, Tensor>* grads) {
            Graph g;
            Var v = conv2d(g, g.param(p.at("x")), g.param(p.at("w")), g.param(p.at("b")), 2, 1,
                           Activation::tanh);
            Var l = mean_sq_to_const(g, v, 0.2);
            const double val = g.value(l)[0];
            if (grads) {
                g.backward(l);
                *grads = collect_grads(g, p);
            }
            return val;
        };
        CHECK(grad_check_max_rel_error(loss, cp, {"w", "b", "x"}, {64, 1e-4, 1e-7, 99}) < 1e-5);
    }
}

TEST_CASE("straight-through path against finite differences of the smooth surrogate") {
    // with a linear readout the straight-through gradient equals the gradient
    // of the same readout applied to the un-rounded bounded latent
    Rng rng(13);
    Tensor f = random_tensor({1, 2, 4, 4}, rng, -2.0, 2.0);

    Graph g;
    Var fv = g.param(f);
    Var z = bound_latent(g, fv, 5);
    Var zq = round_ste(g, z);
    Tensor t = random_tensor({1, 2, 4, 4}, rng);
    Var loss = mse_op(g, zq, t);
    g.backward(loss);
    const Tensor ste_grad = g.grad(fv);

    // the straight-through convention: upstream gradient taken at the rounded
    // forward value, chained through bound's derivative (round treated as id)
    const Tensor& zq_val = g.value(zq);
    const double h = 1e-6;
    double worst = 0;
    for (std::int64_t i = 0; i < f.size(); ++i) {
        const double upstream = 2.0 * (zq_val[i] - t[i]) / static_cast<double>(f.size());
        const double fd_bound =
            (2.0 * std::tanh(f[i] + h) - 2.0 * std::tanh(f[i] - h)) / (2.0 * h);
        const double expected = upstream * fd_bound;
        const double tanhv = std::tanh(f[i]);
        const double analytic = upstream * 2.0 * (1.0 - tanhv * tanhv);
        worst = std::max(worst,
                         std::abs(ste_grad[i] - expected) / std::max(std::abs(expected), 1e-8));
        CHECK(ste_grad[i] == doctest::Approx(analytic).epsilon(1e-10));
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("gradient flows through quantization to the posterior features") {
    NetConfig cfg = tiny_config();
    ParamStore ps;
    Rng rng(1);
    init_stage1(cfg, ps, rng);
    Rng drng(14);
    Tensor ma = random_tensor({1, 1, 16, 16}, drng);
    Tensor ms = random_tensor({1, cfg.source_channels(), 16, 16}, drng);

    Graph g;
    Var mav = g.input(ma);
    Var fa = forward_posterior(g, cfg, ps, mav);
    Var z = bound_latent(g, fa, cfg.levels);
    Var zq = round_ste(g, z);
    Var fc = forward_source(g, cfg, ps, g.input(ms));
    Var recon = forward_decoder(g, cfg, ps, zq, fc);
    Var loss = psnr_loss_op(g, recon, ma);
    g.backward(loss);

    CHECK(grad_l2(g.grad(fa)) > 0.0);  // the straight-through path never blocks
    CHECK(grad_l2(g.grad(fc)) > 0.0);  // and the common-feature path is live too
}

TEST_CASE("full stage-1 objective passes the finite-difference gate") {
    NetConfig cfg = tiny_config();
    ParamStore ps;
    Rng rng(21);
    init_stage1(cfg, ps, rng);
    Rng drng(22);
    const Tensor ms = random_tensor({2, cfg.source_channels(), 16, 16}, drng);
    const Tensor ma = random_tensor({2, 1, 16, 16}, drng);

    std::vector<std::string> gen_names;
    for (const std::string& n : ps.names())
        if (n.rfind("disc.", 0) != 0) gen_names.push_back(n);

    auto loss = [&](ParamStore& p, std::map<std::string, Tensor>* grads) {
        return stage1_loss(p, grads, cfg, ms, ma, 1.0, true);
    };
    const double err = grad_check_max_rel_error(loss, ps, gen_names, {32, 1e-4, 1e-7, 7});
    INFO("max relative error ", err);
    CHECK(err < 1e-3);
}

TEST_CASE("stage-2 objectives pass the finite-difference gate") {
    NetConfig cfg = tiny_config();
    Rng drng(23);
    const Tensor ms = random_tensor({2, cfg.source_channels(), 16, 16}, drng);
    const int nd = cfg.num_modalities * cfg.code_channels;
    const int hs = cfg.latent_size();

    quantizer::CodeGrid target;
    target.channels = nd;
    target.height = hs;
    target.width = hs;
    target.levels = cfg.levels;
    for (int i = 0; i < nd * hs * hs; ++i)
        target.codes.push_back(static_cast<std::int32_t>(drng.uniform_int(5)) - 2);

    SUBCASE("grading loss") {
        ParamStore ps;
        Rng rng(24);
        init_stage2(cfg, PriorHead::grading, ps, rng);
        Tensor bits({2, (cfg.levels - 1) * nd, hs, hs});
        const Tensor one = quantizer::ordinal_encode(target).bits;
        std::copy(one.data(), one.data() + one.size(), bits.data());
        std::copy(one.data(), one.data() + one.size(), bits.data() + one.size());
        auto loss = [&](ParamStore& p, std::map<std::string, Tensor>* grads) {
            Graph g;
            Var logits = forward_prior(g, cfg, PriorHead::grading, p, g.input(ms));
            Var l = bce_logits_op(g, logits, bits);
            const double val = g.value(l)[0];
            if (grads) {
                g.backward(l);
                *grads = collect_grads(g, p);
            }
            return val;
        };
        CHECK(grad_check_max_rel_error(loss, ps, ps.names(), {32, 1e-4, 1e-7, 8}) < 1e-3);
    }

    SUBCASE("class and regression heads") {
        ParamStore ps;
        Rng rng(25);
        init_stage2(cfg, PriorHead::classes, ps, rng);
        std::vector<std::int32_t> labels;
        for (int b = 0; b < 2; ++b)
            for (std::int32_t c : target.codes) labels.push_back(c + cfg.levels / 2);
        auto loss = [&](ParamStore& p, std::map<std::string, Tensor>* grads) {
            Graph g;
            Var logits = forward_prior(g, cfg, PriorHead::classes, p, g.input(ms));
            Var l = softmax_ce_op(g, logits, labels, cfg.levels);
            const double val = g.value(l)[0];
            if (grads) {
                g.backward(l);
                *grads = collect_grads(g, p);
            }
            return val;
        };
        CHECK(grad_check_max_rel_error(loss, ps, ps.names(), {24, 1e-4, 1e-7, 9}) < 1e-3);

        ParamStore pr;
        init_stage2(cfg, PriorHead::continuous, pr, rng);
        Tensor target_cont = random_tensor({2, nd, hs, hs}, drng, -2.0, 2.0);
        auto rloss = [&](ParamStore& p, std::map<std::string, Tensor>* grads) {
            Graph g;
            Var out = forward_prior(g, cfg, PriorHead::continuous, p, g.input(ms));
            Var l = mse_op(g, out, target_cont);
            const double val = g.value(l)[0];
            if (grads) {
                g.backward(l);
                *grads = collect_grads(g, p);
            }
            return val;
        };
        CHECK(grad_check_max_rel_error(rloss, pr, pr.names(), {24, 1e-4, 1e-7, 10}) < 1e-3);
    }
}

TEST_CASE("a corrupted gradient is flagged with relative error around one") {
    Rng rng(31);
    ParamStore ps;
    Tensor& x = ps.create("x", {8});
    for (std::int64_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(-1.0, 1.0);
    Tensor target = random_tensor({8}, rng);

    auto corrupted = [&](ParamStore& p, std::map<std::string, Tensor>* grads) {
        Graph g;
        Var l = mse_op(g, g.param(p.at("x")), target);
        const double val = g.value(l)[0];
        if (grads) {
            g.backward(l);
            *grads = collect_grads(g, p);
            for (auto& [name, t] : *grads)
                for (std::int64_t i = 0; i < t.size(); ++i) t[i] *= 2.0;  // sabotage
        }
        return val;
    };
    const double err = grad_check_max_rel_error(corrupted, ps, {"x"});
    CHECK(err == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(err > 1e-3);  // the gate fails, as it must
}

TEST_CASE("non-deterministic losses are rejected") {
    ParamStore ps;
    ps.create("x", {4}).fill(0.5);
    int calls = 0;
    auto flaky = [&](ParamStore& p, std::map<std::string, Tensor>* grads) {
        Graph g;
        Var l = mean_sq_to_const(g, g.param(p.at("x")), 0.0);
        if (grads) {
            g.backward(l);
            *grads = collect_grads(g, p);
        }
        return g.value(l)[0] + 1e-6 * (calls++);
    };
    CHECK_THROWS_AS(static_cast<void>(grad_check_max_rel_error(flaky, ps, {"x"})),
                    std::runtime_error);
}

TEST_CASE("prior head channel counts follow the head type") {
    NetConfig cfg = tiny_config();
    CHECK(prior_head_channels(cfg, PriorHead::grading) == 4 * 2 * 2);
    CHECK(prior_head_channels(cfg, PriorHead::classes) == 5 * 2 * 2);
    CHECK(prior_head_channels(cfg, PriorHead::continuous) == 2 * 2);

    ParamStore ps;
    Rng rng(1);
    init_stage2(cfg, PriorHead::grading, ps, rng);
    Rng drng(2);
    const Tensor masked = random_tensor({cfg.source_channels(), 16, 16}, drng);
    const Tensor logits = run_prior(cfg, PriorHead::grading, ps, masked);
    CHECK(logits.shape() == std::vector<int>{16, 2, 2});

    // continuous head output already sits inside the level bound
    ParamStore pc;
    init_stage2(cfg, PriorHead::continuous, pc, rng);
    const Tensor cont = run_prior(cfg, PriorHead::continuous, pc, masked);
    CHECK(cont.shape() == std::vector<int>{4, 2, 2});
    CHECK(cont.max() < cfg.levels / 2);
    CHECK(cont.min() > -cfg.levels / 2);
}
