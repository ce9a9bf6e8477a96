#include "codebrain/nets.hpp"

#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace codebrain::nets {

void NetConfig::validate() const {
    if (num_modalities < 2)
        throw std::invalid_argument("net: num_modalities must be >= 2, got " +
                                    std::to_string(num_modalities));
    if (image_size < 16 || image_size % 8 != 0)
        throw std::invalid_argument("net: image_size must be a multiple of 8 and >= 16");
    if (code_channels < 1) throw std::invalid_argument("net: code_channels must be >= 1");
    if (levels < 3 || levels % 2 == 0)
        throw std::invalid_argument("net: levels must be odd and >= 3");
    if (common_channels < 1) throw std::invalid_argument("net: common_channels must be >= 1");
    if (base_width < 2) throw std::invalid_argument("net: base_width must be >= 2");
    if (enc_blocks < 0 || dec_blocks < 0)
        throw std::invalid_argument("net: block counts must be non-negative");
}

nlohmann::json NetConfig::to_json() const {
    return nlohmann::json{{"num_modalities", num_modalities},
                          {"image_size", image_size},
                          {"code_channels", code_channels},
                          {"levels", levels},
                          {"common_channels", common_channels},
                          {"base_width", base_width},
                          {"enc_blocks", enc_blocks},
                          {"dec_blocks", dec_blocks},
                          {"mask_indicators", mask_indicators}};
}

NetConfig NetConfig::from_json(const nlohmann::json& j) {
    NetConfig c;
    c.num_modalities = j.value("num_modalities", c.num_modalities);
    c.image_size = j.value("image_size", c.image_size);
    c.code_channels = j.value("code_channels", c.code_channels);
    c.levels = j.value("levels", c.levels);
    c.common_channels = j.value("common_channels", c.common_channels);
    c.base_width = j.value("base_width", c.base_width);
    c.enc_blocks = j.value("enc_blocks", c.enc_blocks);
    c.dec_blocks = j.value("dec_blocks", c.dec_blocks);
    c.mask_indicators = j.value("mask_indicators", c.mask_indicators);
    return c;
}

Tensor& ParamStore::create(const std::string& name, std::vector<int> shape) {
    if (tensors_.count(name)) throw std::invalid_argument("param already exists: " + name);
    order_.push_back(name);
    return tensors_.emplace(name, Tensor(std::move(shape))).first->second;
}

Tensor& ParamStore::at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("no such param: " + name);
    return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("no such param: " + name);
    return it->second;
}

const std::string* ParamStore::find_name(const Tensor* t) const {
    for (const auto& [name, tensor] : tensors_)
        if (&tensor == t) return &name;
    return nullptr;
}

std::int64_t ParamStore::total_size() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : tensors_) n += t.size();
    return n;
}

bool ParamStore::all_finite() const {
    for (const auto& [name, t] : tensors_)
        if (!t.all_finite()) return false;
    return true;
}

int prior_head_channels(const NetConfig& cfg, PriorHead head) {
    const int per_scalar = head == PriorHead::grading      ? cfg.levels - 1
                           : head == PriorHead::classes    ? cfg.levels
                                                           : 1;
    return per_scalar * cfg.num_modalities * cfg.code_channels;
}

namespace {

// one conv parameter pair, He-style init
void init_conv(ParamStore& p, Rng& rng, const std::string& name, int in_c, int out_c, int k,
               bool head = false) {
    Tensor& w = p.create(name + ".w", {out_c, in_c, k, k});
    const double fan_in = static_cast<double>(in_c) * k * k;
    const double std = std::sqrt((head ? 1.0 : 2.0) / fan_in);
    for (std::int64_t i = 0; i < w.size(); ++i) w[i] = std * rng.normal();
    p.create(name + ".b", {out_c});
}

struct Net {
    Graph& g;
    ParamStore& p;
    bool frozen;

    Var leaf(const std::string& name) {
        Tensor& t = p.at(name);
        return frozen ? g.frozen(t) : g.param(t);
    }
    Var conv(const std::string& name, Var x, int stride, Activation act) {
        Var w = leaf(name + ".w");
        const int pad = (g.value(w).dim(2) - 1) / 2;
        return conv2d(g, x, w, leaf(name + ".b"), stride, pad, act);
    }
    Var res(const std::string& name, Var x) {
        Var t = conv(name + ".c1", x, 1, Activation::leaky_relu);
        t = conv(name + ".c2", t, 1, Activation::none);
        return add(g, x, t);
    }
};

// shared topology of the three encoders: stem, three stride-2 stages, head
void init_encoder(ParamStore& p, Rng& rng, const NetConfig& cfg, const std::string& prefix,
                  int in_c, int out_c) {
    const int w = cfg.base_width;
    init_conv(p, rng, prefix + ".stem", in_c, w, 3);
    const int widths[4] = {w, w, 2 * w, 2 * w};
    for (int s = 1; s <= 3; ++s) {
        init_conv(p, rng, prefix + ".down" + std::to_string(s), widths[s - 1], widths[s], 3);
        for (int b = 0; b < cfg.enc_blocks; ++b) {
            const std::string rb = prefix + ".res" + std::to_string(s) + "_" + std::to_string(b);
            init_conv(p, rng, rb + ".c1", widths[s], widths[s], 3);
            init_conv(p, rng, rb + ".c2", widths[s], widths[s], 3);
        }
    }
    init_conv(p, rng, prefix + ".head", 2 * w, out_c, 3, /*head=*/true);
}

Var encoder_forward(Graph& g, ParamStore& p, const NetConfig& cfg, const std::string& prefix,
                    Var x, bool frozen, Activation head_act = Activation::none) {
    Net net{g, p, frozen};
    Var t = net.conv(prefix + ".stem", x, 1, Activation::leaky_relu);
    for (int s = 1; s <= 3; ++s) {
        t = net.conv(prefix + ".down" + std::to_string(s), t, 2, Activation::leaky_relu);
        for (int b = 0; b < cfg.enc_blocks; ++b)
            t = net.res(prefix + ".res" + std::to_string(s) + "_" + std::to_string(b), t);
    }
    return net.conv(prefix + ".head", t, 1, head_act);
}

void check_image(const NetConfig& cfg, const Tensor& v, int channels, const char* what) {
    if (v.ndim() != 4 || v.dim(1) != channels || v.dim(2) != cfg.image_size ||
        v.dim(3) != cfg.image_size)
        throw std::invalid_argument(std::string(what) + ": expected (B," +
                                    std::to_string(channels) + "," +
                                    std::to_string(cfg.image_size) + "," +
                                    std::to_string(cfg.image_size) + "), got " +
                                    shape_str(v.shape()));
}

}  // namespace

void init_stage1(const NetConfig& cfg, ParamStore& p, Rng& rng) {
    cfg.validate();
    const int w = cfg.base_width;
    init_encoder(p, rng, cfg, "e_post", 1, cfg.code_channels);
    init_encoder(p, rng, cfg, "e_s", cfg.source_channels(), cfg.common_channels);

    // decoder: mirror of the encoder with nearest-neighbor upsampling
    init_conv(p, rng, "d_a.head", cfg.code_channels + cfg.common_channels, 2 * w, 3);
    for (int b = 0; b < cfg.dec_blocks; ++b) {
        init_conv(p, rng, "d_a.res0_" + std::to_string(b) + ".c1", 2 * w, 2 * w, 3);
        init_conv(p, rng, "d_a.res0_" + std::to_string(b) + ".c2", 2 * w, 2 * w, 3);
    }
    init_conv(p, rng, "d_a.up1", 2 * w, 2 * w, 3);
    for (int b = 0; b < cfg.dec_blocks; ++b) {
        init_conv(p, rng, "d_a.res1_" + std::to_string(b) + ".c1", 2 * w, 2 * w, 3);
        init_conv(p, rng, "d_a.res1_" + std::to_string(b) + ".c2", 2 * w, 2 * w, 3);
    }
    init_conv(p, rng, "d_a.up2", 2 * w, w, 3);
    for (int b = 0; b < cfg.dec_blocks; ++b) {
        init_conv(p, rng, "d_a.res2_" + std::to_string(b) + ".c1", w, w, 3);
        init_conv(p, rng, "d_a.res2_" + std::to_string(b) + ".c2", w, w, 3);
    }
    init_conv(p, rng, "d_a.up3", w, w, 3);
    init_conv(p, rng, "d_a.out", w, 1, 3, /*head=*/true);

    // patch discriminator
    init_conv(p, rng, "disc.c1", 1, w, 4);
    init_conv(p, rng, "disc.c2", w, 2 * w, 4);
    init_conv(p, rng, "disc.out", 2 * w, 1, 4, /*head=*/true);
}

void init_stage2(const NetConfig& cfg, PriorHead head, ParamStore& p, Rng& rng) {
    cfg.validate();
    init_encoder(p, rng, cfg, "e_prior", cfg.source_channels(), prior_head_channels(cfg, head));
}

Var forward_posterior(Graph& g, const NetConfig& cfg, ParamStore& p, Var image, bool frozen) {
    check_image(cfg, g.value(image), 1, "forward_posterior");
    return encoder_forward(g, p, cfg, "e_post", image, frozen);
}

Var forward_source(Graph& g, const NetConfig& cfg, ParamStore& p, Var masked, bool frozen) {
    check_image(cfg, g.value(masked), cfg.source_channels(), "forward_source");
    return encoder_forward(g, p, cfg, "e_s", masked, frozen);
}

Var forward_decoder(Graph& g, const NetConfig& cfg, ParamStore& p, Var code, Var common,
                    bool frozen) {
    const Tensor& cv = g.value(code);
    const Tensor& fv = g.value(common);
    const int hs = cfg.latent_size();
    if (cv.ndim() != 4 || cv.dim(1) != cfg.code_channels || cv.dim(2) != hs || cv.dim(3) != hs)
        throw std::invalid_argument("forward_decoder: bad code shape " + shape_str(cv.shape()));
    if (fv.ndim() != 4 || fv.dim(1) != cfg.common_channels || fv.dim(2) != hs || fv.dim(3) != hs)
        throw std::invalid_argument("forward_decoder: bad common-feature shape " +
                                    shape_str(fv.shape()));
    if (cv.dim(0) != fv.dim(0))
        throw std::invalid_argument("forward_decoder: batch mismatch between code and features");

    Net net{g, p, frozen};
    Var t = concat_channels(g, code, common);
    t = net.conv("d_a.head", t, 1, Activation::leaky_relu);
    for (int b = 0; b < cfg.dec_blocks; ++b) t = net.res("d_a.res0_" + std::to_string(b), t);
    for (int s = 1; s <= 3; ++s) {
        t = upsample_nearest2(g, t);
        t = net.conv("d_a.up" + std::to_string(s), t, 1, Activation::leaky_relu);
        if (s < 3)
            for (int b = 0; b < cfg.dec_blocks; ++b)
                t = net.res("d_a.res" + std::to_string(s) + "_" + std::to_string(b), t);
    }
    return net.conv("d_a.out", t, 1, Activation::sigmoid);
}

Var forward_discriminator(Graph& g, const NetConfig& cfg, ParamStore& p, Var image, bool frozen) {
    check_image(cfg, g.value(image), 1, "forward_discriminator");
    Net net{g, p, frozen};
    Var t = net.conv("disc.c1", image, 2, Activation::leaky_relu);
    t = net.conv("disc.c2", t, 2, Activation::leaky_relu);
    return net.conv("disc.out", t, 1, Activation::sigmoid);
}

Var forward_prior(Graph& g, const NetConfig& cfg, PriorHead head, ParamStore& p, Var masked,
                  bool frozen) {
    check_image(cfg, g.value(masked), cfg.source_channels(), "forward_prior");
    Var out = encoder_forward(g, p, cfg, "e_prior", masked, frozen);
    if (head == PriorHead::continuous) out = bound_latent(g, out, cfg.levels);
    return out;
}

namespace {

Tensor unbatch(const Tensor& t) {
    std::vector<int> shape(t.shape().begin() + 1, t.shape().end());
    Tensor out(shape);
    std::copy(t.data(), t.data() + t.size(), out.data());
    return out;
}

Tensor batch1(const Tensor& t) {
    std::vector<int> shape{1};
    shape.insert(shape.end(), t.shape().begin(), t.shape().end());
    Tensor out(shape);
    std::copy(t.data(), t.data() + t.size(), out.data());
    return out;
}

}  // namespace

Tensor run_posterior(const NetConfig& cfg, ParamStore& p, const Tensor& image) {
    Graph g;
    return unbatch(g.value(forward_posterior(g, cfg, p, g.input(batch1(image)), true)));
}

Tensor run_source(const NetConfig& cfg, ParamStore& p, const Tensor& masked) {
    Graph g;
    return unbatch(g.value(forward_source(g, cfg, p, g.input(batch1(masked)), true)));
}

Tensor run_decoder(const NetConfig& cfg, ParamStore& p, const Tensor& code, const Tensor& common) {
    Graph g;
    return unbatch(g.value(
        forward_decoder(g, cfg, p, g.input(batch1(code)), g.input(batch1(common)), true)));
}

Tensor run_prior(const NetConfig& cfg, PriorHead head, ParamStore& p, const Tensor& masked) {
    Graph g;
    return unbatch(g.value(forward_prior(g, cfg, head, p, g.input(batch1(masked)), true)));
}

std::map<std::string, Tensor> collect_grads(Graph& g, const ParamStore& params) {
    std::map<std::string, Tensor> out;
    for (const auto& [ptr, grad] : g.param_grads()) {
        const std::string* name = params.find_name(ptr);
        if (name) out.emplace(*name, *grad);
    }
    return out;
}

double grad_check_max_rel_error(const LossFn& loss, ParamStore& params,
                                const std::vector<std::string>& param_names,
                                const GradCheckOptions& opt) {
    if (param_names.empty()) throw std::invalid_argument("grad_check: no parameters given");
    std::map<std::string, Tensor> grads;
    const double base = loss(params, &grads);
    const double again = loss(params, nullptr);
    if (base != again)
        throw std::runtime_error("grad_check: loss is not deterministic (" + std::to_string(base) +
                                 " vs " + std::to_string(again) + ")");

    Rng rng(opt.seed);
    double worst = 0;
    int checked = 0, attempts = 0;
    const int max_attempts = opt.num_coords * 50;
    while (checked < opt.num_coords && attempts < max_attempts) {
        ++attempts;
        const std::string& name =
            param_names[static_cast<size_t>(rng.uniform_int(static_cast<std::int64_t>(param_names.size())))];
        Tensor& t = params.at(name);
        const std::int64_t idx = rng.uniform_int(t.size());
        const double theta = t[idx];
        const double h = opt.step * std::max(1.0, std::abs(theta));

        t[idx] = theta + h;
        const double fp = loss(params, nullptr);
        t[idx] = theta - h;
        const double fm = loss(params, nullptr);
        t[idx] = theta;

        const double fd = (fp - fm) / (2 * h);
        if (std::abs(fd) < opt.min_fd) continue;  // below finite-difference resolution
        auto it = grads.find(name);
        const double analytic = (it != grads.end()) ? it->second[idx] : 0.0;
        const double rel = std::abs(analytic - fd) / std::max(std::abs(fd), 1e-12);
        worst = std::max(worst, rel);
        ++checked;
    }
    if (checked == 0)
        throw std::runtime_error("grad_check: no usable coordinates (all finite differences ~ 0)");
    return worst;
}

}  // namespace codebrain::nets
