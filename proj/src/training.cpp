#include "codebrain/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "codebrain/graph.hpp"
#include "codebrain/metrics.hpp"

namespace fs = std::filesystem;

namespace codebrain::training {

using nets::Graph;
using nets::ParamStore;
using nets::Var;
using quantizer::CodeGrid;
using quantizer::OrdinalBits;
using synthdata::Dataset;
using synthdata::ModalityStack;
using synthdata::ScenarioMask;

const char* quant_mode_name(QuantMode m) {
    return m == QuantMode::discrete ? "discrete" : "continuous";
}

const char* stage2_loss_name(Stage2Loss l) { return l == Stage2Loss::grading ? "grading" : "cls"; }

void TrainConfig::validate() const {
    if (stage != 1 && stage != 2) throw std::invalid_argument("train: stage must be 1 or 2");
    if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (!(lr_init > lr_min) || !(lr_min > 0))
        throw std::invalid_argument("train: need lr_init > lr_min > 0");
    if (gan_weight < 0) throw std::invalid_argument("train: gan weight must be >= 0");
    if (checkpoint_every < 0) throw std::invalid_argument("train: bad checkpoint cadence");
}

nlohmann::json TrainConfig::to_json() const {
    return nlohmann::json{{"stage", stage},
                          {"epochs", epochs},
                          {"batch_size", batch_size},
                          {"lr_init", lr_init},
                          {"lr_min", lr_min},
                          {"gan_weight", gan_weight},
                          {"seed", seed},
                          {"quant_mode", quant_mode_name(quant_mode)},
                          {"stage2_loss", stage2_loss_name(stage2_loss)},
                          {"dataset_path", dataset_path},
                          {"checkpoint_every", checkpoint_every}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.stage = j.value("stage", c.stage);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr_init = j.value("lr_init", c.lr_init);
    c.lr_min = j.value("lr_min", c.lr_min);
    c.gan_weight = j.value("gan_weight", c.gan_weight);
    c.seed = j.value("seed", c.seed);
    const std::string qm = j.value("quant_mode", "discrete");
    if (qm != "discrete" && qm != "continuous")
        throw std::invalid_argument("train: unknown quant_mode '" + qm + "'");
    c.quant_mode = qm == "discrete" ? QuantMode::discrete : QuantMode::continuous;
    const std::string sl = j.value("stage2_loss", "grading");
    if (sl != "grading" && sl != "cls")
        throw std::invalid_argument("train: unknown stage2_loss '" + sl + "'");
    c.stage2_loss = sl == "grading" ? Stage2Loss::grading : Stage2Loss::cls;
    c.dataset_path = j.value("dataset_path", c.dataset_path);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    return c;
}

nets::PriorHead prior_head(const TrainConfig& cfg) {
    if (cfg.quant_mode == QuantMode::continuous) return nets::PriorHead::continuous;
    return cfg.stage2_loss == Stage2Loss::grading ? nets::PriorHead::grading
                                                  : nets::PriorHead::classes;
}

double lr_schedule(std::int64_t step, std::int64_t total_steps, const TrainConfig& cfg) {
    if (total_steps < 1) throw std::invalid_argument("lr_schedule: total_steps must be >= 1");
    if (step < 0 || step > total_steps)
        throw std::invalid_argument("lr_schedule: step " + std::to_string(step) +
                                    " outside [0," + std::to_string(total_steps) + "]");
    const double x = static_cast<double>(step) / static_cast<double>(total_steps);
    return cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + std::cos(3.14159265358979323846 * x));
}

nlohmann::json TrainReport::to_json() const {
    return nlohmann::json{{"stage", stage},
                          {"loss_total", loss_total},
                          {"loss_psnr", loss_psnr},
                          {"loss_gan", loss_gan},
                          {"loss_pred", loss_pred},
                          {"val_metric", val_metric},
                          {"wall_time_sec", wall_time_sec},
                          {"final_checkpoint", final_checkpoint}};
}

std::string TrainReport::to_csv() const {
    std::ostringstream out;
    out.precision(17);
    out << "epoch,loss_total";
    if (!loss_psnr.empty()) out << ",loss_psnr";
    if (!loss_gan.empty()) out << ",loss_gan";
    if (!loss_pred.empty()) out << ",loss_pred";
    if (!val_metric.empty()) out << ",val_metric";
    out << "\n";
    for (size_t e = 0; e < loss_total.size(); ++e) {
        out << e << "," << loss_total[e];
        if (!loss_psnr.empty()) out << "," << loss_psnr[e];
        if (!loss_gan.empty()) out << "," << loss_gan[e];
        if (!loss_pred.empty()) out << "," << loss_pred[e];
        if (!val_metric.empty()) out << "," << val_metric[e];
        out << "\n";
    }
    return out.str();
}

void adam_step(ParamStore& params, const std::vector<std::string>& names,
               const std::map<const Tensor*, const Tensor*>& grads, AdamState& state, double lr,
               double beta1, double beta2, double eps) {
    state.t += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    for (const std::string& name : names) {
        Tensor& p = params.at(name);
        auto it = grads.find(&p);
        if (it == grads.end()) continue;
        const Tensor& g = *it->second;
        Tensor& m = state.m.try_emplace(name, Tensor(p.shape())).first->second;
        Tensor& v = state.v.try_emplace(name, Tensor(p.shape())).first->second;
        for (std::int64_t i = 0; i < p.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
        }
    }
}

std::uint64_t state_config_hash(const TrainerState& state) {
    return fnv1a(state.net.to_json().dump() + state.train.to_json().dump());
}

// ---- checkpoint container ----------------------------------------------------

namespace {

constexpr char kMagic[4] = {'C', 'B', 'C', 'P'};
constexpr std::uint32_t kVersion = 1;

struct NamedTensor {
    std::string name;
    const Tensor* tensor;
};

void gather(std::vector<NamedTensor>& list, const std::string& prefix,
            const std::map<std::string, Tensor>& tensors) {
    for (const auto& [name, t] : tensors) list.push_back({prefix + name, &t});
}

}  // namespace

void save_checkpoint(const std::string& path, const TrainerState& state) {
    std::vector<NamedTensor> tensors;
    for (const std::string& name : state.params.names())
        tensors.push_back({"param." + name, &state.params.at(name)});
    gather(tensors, "adam_gen.m.", state.adam_gen.m);
    gather(tensors, "adam_gen.v.", state.adam_gen.v);
    gather(tensors, "adam_disc.m.", state.adam_disc.m);
    gather(tensors, "adam_disc.v.", state.adam_disc.v);

    nlohmann::json manifest = nlohmann::json::array();
    for (const NamedTensor& nt : tensors)
        manifest.push_back({{"name", nt.name}, {"shape", nt.tensor->shape()}, {"dtype", "f64"}});
    nlohmann::json header{{"format_version", kVersion},
                          {"stage", state.stage},
                          {"net", state.net.to_json()},
                          {"train", state.train.to_json()},
                          {"epochs_done", state.epochs_done},
                          {"global_step", state.global_step},
                          {"rng_state", state.rng_state},
                          {"adam_gen_t", state.adam_gen.t},
                          {"adam_disc_t", state.adam_disc.t},
                          {"tensors", manifest}};
    const std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
    f.write(kMagic, 4);
    const std::uint32_t ver = kVersion;
    f.write(reinterpret_cast<const char*>(&ver), sizeof ver);
    const std::uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const NamedTensor& nt : tensors)
        f.write(reinterpret_cast<const char*>(nt.tensor->data()),
                static_cast<std::streamsize>(nt.tensor->size() * static_cast<std::int64_t>(sizeof(Real))));
    f.flush();
    if (!f) throw std::runtime_error("checkpoint: write failed: " + path);
}

TrainerState load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    std::uint32_t ver = 0;
    f.read(reinterpret_cast<char*>(&ver), sizeof ver);
    if (!f || ver != kVersion)
        throw std::runtime_error("checkpoint: unsupported version in " + path);
    std::uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
    if (!f || hlen == 0 || hlen > (1u << 26))
        throw std::runtime_error("checkpoint: corrupt header length in " + path);
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!f) throw std::runtime_error("checkpoint: truncated header in " + path);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("checkpoint: corrupt header json in " + path + ": " + e.what());
    }

    TrainerState st;
    st.stage = header.at("stage").get<int>();
    st.net = nets::NetConfig::from_json(header.at("net"));
    st.train = TrainConfig::from_json(header.at("train"));
    st.epochs_done = header.at("epochs_done").get<int>();
    st.global_step = header.at("global_step").get<std::int64_t>();
    st.rng_state = header.value("rng_state", "");
    st.adam_gen.t = header.value("adam_gen_t", std::int64_t{0});
    st.adam_disc.t = header.value("adam_disc_t", std::int64_t{0});

    for (const auto& jt : header.at("tensors")) {
        const std::string name = jt.at("name").get<std::string>();
        const auto shape = jt.at("shape").get<std::vector<int>>();
        if (jt.at("dtype").get<std::string>() != "f64")
            throw std::runtime_error("checkpoint: unsupported dtype for " + name + " in " + path);
        Tensor t(shape);
        f.read(reinterpret_cast<char*>(t.data()),
               static_cast<std::streamsize>(t.size() * static_cast<std::int64_t>(sizeof(Real))));
        if (!f) throw std::runtime_error("checkpoint: truncated tensor payload (" + name + ") in " + path);
        if (name.rfind("param.", 0) == 0) {
            st.params.create(name.substr(6), shape) = std::move(t);
        } else if (name.rfind("adam_gen.m.", 0) == 0) {
            st.adam_gen.m.emplace(name.substr(11), std::move(t));
        } else if (name.rfind("adam_gen.v.", 0) == 0) {
            st.adam_gen.v.emplace(name.substr(11), std::move(t));
        } else if (name.rfind("adam_disc.m.", 0) == 0) {
            st.adam_disc.m.emplace(name.substr(12), std::move(t));
        } else if (name.rfind("adam_disc.v.", 0) == 0) {
            st.adam_disc.v.emplace(name.substr(12), std::move(t));
        } else {
            throw std::runtime_error("checkpoint: unknown tensor entry '" + name + "' in " + path);
        }
    }
    // must be at EOF now
    char extra;
    f.read(&extra, 1);
    if (!f.eof()) throw std::runtime_error("checkpoint: trailing bytes in " + path);
    return st;
}

// ---- shared inference pieces -------------------------------------------------

namespace {

Tensor posterior_codes_with(const nets::NetConfig& net, ParamStore& params, QuantMode mode,
                            const ModalityStack& stack) {
    const int hs = net.latent_size();
    Tensor out({net.num_modalities * net.code_channels, hs, hs});
    const quantizer::QuantizerConfig qcfg{net.levels, net.code_channels};
    const std::int64_t per = static_cast<std::int64_t>(net.code_channels) * hs * hs;
    for (int m = 0; m < net.num_modalities; ++m) {
        Tensor img({1, net.image_size, net.image_size});
        std::copy(stack.channels[static_cast<size_t>(m)].data(),
                  stack.channels[static_cast<size_t>(m)].data() +
                      stack.channels[static_cast<size_t>(m)].size(),
                  img.data());
        const Tensor features = nets::run_posterior(net, params, img);
        const quantizer::BoundedLatent z = quantizer::bound(features, qcfg);
        if (mode == QuantMode::discrete) {
            const CodeGrid grid = quantizer::quantize(z);
            for (std::int64_t i = 0; i < per; ++i)
                out[m * per + i] = static_cast<Real>(grid.codes[static_cast<size_t>(i)]);
        } else {
            for (std::int64_t i = 0; i < per; ++i) out[m * per + i] = z.values[i];
        }
    }
    return out;
}

Tensor predict_codes_with(const nets::NetConfig& net, nets::PriorHead head, ParamStore& s2params,
                          const Tensor& masked, quantizer::DecodeRule rule) {
    const Tensor raw = nets::run_prior(net, head, s2params, masked);
    const int hs = net.latent_size();
    const int nd = net.num_modalities * net.code_channels;
    if (head == nets::PriorHead::continuous) return raw;  // already bounded (nd,h,w)
    if (head == nets::PriorHead::grading) {
        OrdinalBits bits;
        bits.levels = net.levels;
        bits.bits = Tensor({net.levels - 1, nd, hs, hs});
        for (std::int64_t i = 0; i < raw.size(); ++i)
            bits.bits[i] = Real(1) / (Real(1) + std::exp(-raw[i]));
        return quantizer::ordinal_decode(bits, rule).to_tensor();
    }
    // classes head: argmax over the L class-major channel groups
    Tensor out({nd, hs, hs});
    const std::int64_t plane = static_cast<std::int64_t>(nd) * hs * hs;
    const int half = net.levels / 2;
    for (std::int64_t i = 0; i < plane; ++i) {
        int best = 0;
        Real bestv = raw[i];
        for (int l = 1; l < net.levels; ++l)
            if (raw[static_cast<std::int64_t>(l) * plane + i] > bestv) {
                bestv = raw[static_cast<std::int64_t>(l) * plane + i];
                best = l;
            }
        out[i] = static_cast<Real>(best - half);
    }
    return out;
}

Tensor reconstruct_with(const nets::NetConfig& net, ParamStore& params, QuantMode mode,
                        const ModalityStack& stack, const ScenarioMask& mask) {
    mask.validate(stack.num_modalities());
    const Tensor masked = synthdata::apply_mask(stack, mask, net.mask_indicators);
    const Tensor fc = nets::run_source(net, params, masked);

    Tensor img({1, net.image_size, net.image_size});
    const Tensor& anchor = stack.channels[static_cast<size_t>(mask.anchor)];
    std::copy(anchor.data(), anchor.data() + anchor.size(), img.data());
    const Tensor features = nets::run_posterior(net, params, img);
    const quantizer::QuantizerConfig qcfg{net.levels, net.code_channels};
    const quantizer::BoundedLatent z = quantizer::bound(features, qcfg);
    const Tensor code = mode == QuantMode::discrete ? quantizer::quantize(z).to_tensor() : z.values;
    const Tensor out = nets::run_decoder(net, params, code, fc);
    Tensor channel({net.image_size, net.image_size});
    std::copy(out.data(), out.data() + out.size(), channel.data());
    return channel;
}

void require_stage(const TrainerState& st, int stage, const char* what) {
    if (st.stage != stage)
        throw std::invalid_argument(std::string(what) + ": expected a stage-" +
                                    std::to_string(stage) + " checkpoint, got stage " +
                                    std::to_string(st.stage));
}

void require_compatible(const TrainerState& s1, const TrainerState& s2) {
    if (!(s1.net == s2.net) || s1.train.quant_mode != s2.train.quant_mode)
        throw std::invalid_argument(
            "incompatible stage-1/stage-2 checkpoints (config hash " +
            hex_u64(state_config_hash(s1)) + " vs " + hex_u64(state_config_hash(s2)) + ")");
}

void check_dataset(const Dataset& ds, const nets::NetConfig& net) {
    if (ds.subjects.empty()) throw std::invalid_argument("training: empty dataset");
    if (ds.config.num_modalities != net.num_modalities)
        throw std::invalid_argument("training: dataset has " +
                                    std::to_string(ds.config.num_modalities) +
                                    " modalities, net expects " +
                                    std::to_string(net.num_modalities));
    if (ds.config.image_size != net.image_size)
        throw std::invalid_argument("training: dataset image size " +
                                    std::to_string(ds.config.image_size) + " != net image size " +
                                    std::to_string(net.image_size));
}

std::vector<std::string> filter_names(const ParamStore& params, const std::string& prefix,
                                      bool invert) {
    std::vector<std::string> out;
    for (const std::string& n : params.names()) {
        const bool match = n.rfind(prefix, 0) == 0;
        if (match != invert) out.push_back(n);
    }
    return out;
}

std::map<const Tensor*, const Tensor*> grad_map(Graph& g) {
    std::map<const Tensor*, const Tensor*> out;
    for (const auto& [ptr, grad] : g.param_grads()) out.emplace(ptr, grad);
    return out;
}

void fill_batch_item(Tensor& batch, int slot, const Tensor& item) {
    std::copy(item.data(), item.data() + item.size(),
              batch.data() + static_cast<std::int64_t>(slot) * item.size());
}

[[noreturn]] void abort_divergence(const TrainerState& st, const std::string& out_dir, int epoch,
                                   int step, double loss) {
    std::string note;
    if (!out_dir.empty()) {
        const std::string p =
            (fs::path(out_dir) / ("stage" + std::to_string(st.stage) + "_diagnostic.ckpt")).string();
        try {
            save_checkpoint(p, st);
            note = "; diagnostic checkpoint written to " + p;
        } catch (const std::exception&) {
            note = "; diagnostic checkpoint could not be written";
        }
    }
    throw std::runtime_error("training diverged (loss=" + std::to_string(loss) + ") at epoch " +
                             std::to_string(epoch) + " step " + std::to_string(step) + note);
}

std::string checkpoint_path(const std::string& out_dir, int stage, const std::string& tag) {
    return (fs::path(out_dir) / ("stage" + std::to_string(stage) + "_" + tag + ".ckpt")).string();
}

void check_resume(const TrainerState& resume, int stage, const nets::NetConfig& net,
                  const TrainConfig& cfg) {
    if (resume.stage != stage)
        throw std::invalid_argument("resume: checkpoint is for a different stage");
    TrainerState requested;
    requested.net = net;
    requested.train = cfg;
    if (!(resume.net == net) || resume.train.to_json() != cfg.to_json())
        throw std::invalid_argument("resume: config mismatch (checkpoint " +
                                    hex_u64(state_config_hash(resume)) + ", requested " +
                                    hex_u64(state_config_hash(requested)) + ")");
    if (resume.epochs_done >= cfg.epochs)
        throw std::invalid_argument("resume: checkpoint already has " +
                                    std::to_string(resume.epochs_done) + " epochs done");
}

}  // namespace

// ---- stage 1 -------------------------------------------------------------------

StageResult train_stage1(const Dataset& ds, const nets::NetConfig& net, const TrainConfig& cfg,
                         const std::string& out_dir, const TrainerState* resume) {
    net.validate();
    cfg.validate();
    if (cfg.stage != 1) throw std::invalid_argument("train_stage1: config stage must be 1");
    check_dataset(ds, net);
    if (!out_dir.empty()) fs::create_directories(out_dir);

    const auto t0 = std::chrono::steady_clock::now();
    TrainerState st;
    if (resume) {
        check_resume(*resume, 1, net, cfg);
        st = *resume;
    } else {
        st.stage = 1;
        st.net = net;
        st.train = cfg;
        Rng init_rng(mix_seed(cfg.seed, 101));
        nets::init_stage1(net, st.params, init_rng);
    }

    const std::vector<std::string> gen_names = filter_names(st.params, "disc.", /*invert=*/true);
    const std::vector<std::string> disc_names = filter_names(st.params, "disc.", /*invert=*/false);

    std::vector<int> train_idx = ds.indices(synthdata::Split::train);
    if (train_idx.empty()) throw std::invalid_argument("train_stage1: empty train split");
    const std::vector<int> val_idx = ds.indices(synthdata::Split::val);
    const int n = net.num_modalities;
    const int batch = std::min<int>(cfg.batch_size, static_cast<int>(train_idx.size()));
    const int steps_per_epoch = static_cast<int>(train_idx.size()) / batch;
    const std::int64_t total_steps = static_cast<std::int64_t>(steps_per_epoch) * cfg.epochs;
    const bool use_gan = cfg.gan_weight > 0;

    TrainReport rep;
    rep.stage = 1;

    for (int epoch = st.epochs_done; epoch < cfg.epochs; ++epoch) {
        Rng erng(mix_seed(mix_seed(cfg.seed, 1000), static_cast<std::uint64_t>(epoch)));
        std::vector<int> order = train_idx;
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<size_t>(erng.uniform_int(static_cast<std::int64_t>(i)))]);

        double sum_total = 0, sum_psnr = 0, sum_gan = 0;
        for (int step = 0; step < steps_per_epoch; ++step) {
            Tensor ms_batch({batch, net.source_channels(), net.image_size, net.image_size});
            Tensor ma_batch({batch, 1, net.image_size, net.image_size});
            for (int b = 0; b < batch; ++b) {
                const ModalityStack& subj =
                    ds.subjects[static_cast<size_t>(order[static_cast<size_t>(step * batch + b)])];
                const ScenarioMask mask = synthdata::sample_scenario(erng, n);
                fill_batch_item(ms_batch, b, synthdata::apply_mask(subj, mask, net.mask_indicators));
                fill_batch_item(ma_batch, b, subj.channels[static_cast<size_t>(mask.anchor)]);
            }
            const double lr = lr_schedule(st.global_step, total_steps, cfg);

            // generator step (posterior + source encoders and decoder)
            Tensor recon_value;
            double loss_psnr_v = 0, loss_gan_v = 0, loss_total_v = 0;
            {
                Graph g;
                Var ms = g.input(ms_batch);
                Var ma = g.input(ma_batch);
                Var fa = nets::forward_posterior(g, net, st.params, ma);
                Var z = nets::bound_latent(g, fa, net.levels);
                Var zq = cfg.quant_mode == QuantMode::discrete ? nets::round_ste(g, z) : z;
                Var fc = nets::forward_source(g, net, st.params, ms);
                Var recon = nets::forward_decoder(g, net, st.params, zq, fc);
                Var lpsnr = nets::psnr_loss_op(g, recon, ma_batch);
                Var total = lpsnr;
                if (use_gan) {
                    Var dfake = nets::forward_discriminator(g, net, st.params, recon, /*frozen=*/true);
                    Var lgan = nets::mean_sq_to_const(g, dfake, 1.0);
                    total = nets::add_weighted(g, lpsnr, lgan, cfg.gan_weight);
                    loss_gan_v = g.value(lgan)[0];
                }
                loss_psnr_v = g.value(lpsnr)[0];
                loss_total_v = g.value(total)[0];
                if (!std::isfinite(loss_total_v)) abort_divergence(st, out_dir, epoch, step, loss_total_v);
                g.backward(total);
                adam_step(st.params, gen_names, grad_map(g), st.adam_gen, lr);
                if (use_gan) recon_value = g.value(recon);
            }

            // discriminator step on the detached reconstruction
            if (use_gan) {
                Graph g;
                Var real = g.input(ma_batch);
                Var fake = g.input(std::move(recon_value));
                Var dr = nets::forward_discriminator(g, net, st.params, real);
                Var df = nets::forward_discriminator(g, net, st.params, fake);
                Var lr_term = nets::mean_sq_to_const(g, dr, 1.0);
                Var lf_term = nets::mean_sq_to_const(g, df, 0.0);
                Var dloss = nets::add_weighted(g, nets::scale(g, lr_term, 0.5), lf_term, 0.5);
                const double dl = g.value(dloss)[0];
                if (!std::isfinite(dl)) abort_divergence(st, out_dir, epoch, step, dl);
                g.backward(dloss);
                adam_step(st.params, disc_names, grad_map(g), st.adam_disc, lr);
            }

            sum_total += loss_total_v;
            sum_psnr += loss_psnr_v;
            sum_gan += loss_gan_v;
            ++st.global_step;
        }

        rep.loss_total.push_back(sum_total / steps_per_epoch);
        rep.loss_psnr.push_back(sum_psnr / steps_per_epoch);
        if (use_gan) rep.loss_gan.push_back(sum_gan / steps_per_epoch);

        // validation: reconstruction PSNR under one fixed mask per subject
        double val_psnr = 0;
        if (!val_idx.empty()) {
            for (size_t i = 0; i < val_idx.size(); ++i) {
                Rng vrng(mix_seed(mix_seed(cfg.seed, 2000), static_cast<std::uint64_t>(i)));
                const ModalityStack& subj = ds.subjects[static_cast<size_t>(val_idx[i])];
                const ScenarioMask mask = synthdata::sample_scenario(vrng, n);
                const Tensor recon = reconstruct_with(net, st.params, cfg.quant_mode, subj, mask);
                val_psnr += metrics::psnr(recon, subj.channels[static_cast<size_t>(mask.anchor)]);
            }
            val_psnr /= static_cast<double>(val_idx.size());
        }
        rep.val_metric.push_back(val_psnr);

        st.epochs_done = epoch + 1;
        st.rng_state =
            Rng(mix_seed(mix_seed(cfg.seed, 1000), static_cast<std::uint64_t>(epoch + 1))).state_string();
        if (!out_dir.empty() && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 &&
            epoch + 1 < cfg.epochs) {
            char tag[16];
            std::snprintf(tag, sizeof tag, "epoch%03d", epoch + 1);
            save_checkpoint(checkpoint_path(out_dir, 1, tag), st);
        }
    }

    if (!out_dir.empty()) {
        rep.final_checkpoint = checkpoint_path(out_dir, 1, "final");
        save_checkpoint(rep.final_checkpoint, st);
    }
    rep.wall_time_sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {std::move(st), std::move(rep)};
}

// ---- stage 2 -------------------------------------------------------------------

StageResult train_stage2(const Dataset& ds, const TrainerState& stage1, const TrainConfig& cfg,
                         const std::string& out_dir, const TrainerState* resume) {
    cfg.validate();
    if (cfg.stage != 2) throw std::invalid_argument("train_stage2: config stage must be 2");
    require_stage(stage1, 1, "train_stage2");
    if (stage1.train.quant_mode != cfg.quant_mode)
        throw std::invalid_argument(
            "train_stage2: quantization mode differs from the stage-1 checkpoint (" +
            std::string(quant_mode_name(stage1.train.quant_mode)) + " vs " +
            quant_mode_name(cfg.quant_mode) + ")");
    const nets::NetConfig net = stage1.net;
    check_dataset(ds, net);
    if (!out_dir.empty()) fs::create_directories(out_dir);

    const auto t0 = std::chrono::steady_clock::now();
    const nets::PriorHead head = prior_head(cfg);

    TrainerState st;
    if (resume) {
        check_resume(*resume, 2, net, cfg);
        st = *resume;
    } else {
        st.stage = 2;
        st.net = net;
        st.train = cfg;
        Rng init_rng(mix_seed(cfg.seed, 202));
        nets::init_stage2(net, head, st.params, init_rng);
    }

    // fixed targets: posterior codes of every modality under the frozen stage 1
    ParamStore& s1params = const_cast<ParamStore&>(stage1.params);
    const int hs = net.latent_size();
    const int nd = net.num_modalities * net.code_channels;
    std::vector<Tensor> target_codes(ds.subjects.size());
#pragma omp parallel for schedule(static)
    for (int i = 0; i < static_cast<int>(ds.subjects.size()); ++i)
        target_codes[static_cast<size_t>(i)] =
            posterior_codes_with(net, s1params, cfg.quant_mode, ds.subjects[static_cast<size_t>(i)]);

    auto grid_of = [&](int subject) {
        CodeGrid grid;
        grid.channels = nd;
        grid.height = hs;
        grid.width = hs;
        grid.levels = net.levels;
        const Tensor& t = target_codes[static_cast<size_t>(subject)];
        grid.codes.resize(static_cast<size_t>(t.size()));
        for (std::int64_t i = 0; i < t.size(); ++i)
            grid.codes[static_cast<size_t>(i)] = static_cast<std::int32_t>(std::lround(t[i]));
        return grid;
    };

    const std::vector<std::string> all_names(st.params.names());
    std::vector<int> train_idx = ds.indices(synthdata::Split::train);
    if (train_idx.empty()) throw std::invalid_argument("train_stage2: empty train split");
    const std::vector<int> val_idx = ds.indices(synthdata::Split::val);
    const int n = net.num_modalities;
    const int batch = std::min<int>(cfg.batch_size, static_cast<int>(train_idx.size()));
    const int steps_per_epoch = static_cast<int>(train_idx.size()) / batch;
    const std::int64_t total_steps = static_cast<std::int64_t>(steps_per_epoch) * cfg.epochs;
    const std::int64_t code_plane = static_cast<std::int64_t>(nd) * hs * hs;

    TrainReport rep;
    rep.stage = 2;

    for (int epoch = st.epochs_done; epoch < cfg.epochs; ++epoch) {
        Rng erng(mix_seed(mix_seed(cfg.seed, 3000), static_cast<std::uint64_t>(epoch)));
        std::vector<int> order = train_idx;
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<size_t>(erng.uniform_int(static_cast<std::int64_t>(i)))]);

        double sum_loss = 0;
        for (int step = 0; step < steps_per_epoch; ++step) {
            Tensor ms_batch({batch, net.source_channels(), net.image_size, net.image_size});
            std::vector<int> items;
            for (int b = 0; b < batch; ++b) {
                const int subject = order[static_cast<size_t>(step * batch + b)];
                const ModalityStack& subj = ds.subjects[static_cast<size_t>(subject)];
                const ScenarioMask mask = synthdata::sample_scenario(erng, n);
                fill_batch_item(ms_batch, b, synthdata::apply_mask(subj, mask, net.mask_indicators));
                items.push_back(subject);
            }
            const double lr = lr_schedule(st.global_step, total_steps, cfg);

            Graph g;
            Var ms = g.input(std::move(ms_batch));
            Var logits = nets::forward_prior(g, net, head, st.params, ms);
            Var loss;
            if (head == nets::PriorHead::grading) {
                Tensor bits({batch, (net.levels - 1) * nd, hs, hs});
                for (int b = 0; b < batch; ++b) {
                    const OrdinalBits ob = quantizer::ordinal_encode(grid_of(items[static_cast<size_t>(b)]));
                    fill_batch_item(bits, b, ob.bits);
                }
                loss = nets::bce_logits_op(g, logits, bits);
            } else if (head == nets::PriorHead::classes) {
                std::vector<std::int32_t> labels;
                labels.reserve(static_cast<size_t>(batch) * code_plane);
                const int half = net.levels / 2;
                for (int b = 0; b < batch; ++b) {
                    const Tensor& t = target_codes[static_cast<size_t>(items[static_cast<size_t>(b)])];
                    for (std::int64_t i = 0; i < code_plane; ++i)
                        labels.push_back(static_cast<std::int32_t>(std::lround(t[i])) + half);
                }
                loss = nets::softmax_ce_op(g, logits, labels, net.levels);
            } else {
                Tensor target({batch, nd, hs, hs});
                for (int b = 0; b < batch; ++b)
                    fill_batch_item(target, b, target_codes[static_cast<size_t>(items[static_cast<size_t>(b)])]);
                loss = nets::mse_op(g, logits, target);
            }
            const double lv = g.value(loss)[0];
            if (!std::isfinite(lv)) abort_divergence(st, out_dir, epoch, step, lv);
            g.backward(loss);
            adam_step(st.params, all_names, grad_map(g), st.adam_gen, lr);
            sum_loss += lv;
            ++st.global_step;
        }

        rep.loss_total.push_back(sum_loss / steps_per_epoch);
        rep.loss_pred.push_back(sum_loss / steps_per_epoch);

        // validation: per-scalar code accuracy on available modalities
        // (mean squared error against the bounded targets in continuous mode)
        double val = 0;
        if (!val_idx.empty()) {
            for (size_t i = 0; i < val_idx.size(); ++i) {
                Rng vrng(mix_seed(mix_seed(cfg.seed, 4000), static_cast<std::uint64_t>(i)));
                const int subject = val_idx[i];
                const ModalityStack& subj = ds.subjects[static_cast<size_t>(subject)];
                const ScenarioMask mask = synthdata::sample_scenario(vrng, n);
                const Tensor masked = synthdata::apply_mask(subj, mask, net.mask_indicators);
                const Tensor pred = predict_codes_with(net, head, st.params, masked,
                                                       quantizer::DecodeRule::threshold);
                const Tensor& target = target_codes[static_cast<size_t>(subject)];
                const std::int64_t per = static_cast<std::int64_t>(net.code_channels) * hs * hs;
                if (head == nets::PriorHead::continuous) {
                    double se = 0;
                    for (std::int64_t j = 0; j < pred.size(); ++j) {
                        const double d = pred[j] - target[j];
                        se += d * d;
                    }
                    val += se / static_cast<double>(pred.size());
                } else {
                    std::int64_t hit = 0, tot = 0;
                    for (int m = 0; m < n; ++m) {
                        if (!mask.available[static_cast<size_t>(m)]) continue;
                        for (std::int64_t j = 0; j < per; ++j) {
                            hit += (std::lround(pred[m * per + j]) == std::lround(target[m * per + j])) ? 1 : 0;
                            ++tot;
                        }
                    }
                    if (tot > 0) val += static_cast<double>(hit) / static_cast<double>(tot);
                }
            }
            val /= static_cast<double>(val_idx.size());
        }
        rep.val_metric.push_back(val);

        st.epochs_done = epoch + 1;
        st.rng_state =
            Rng(mix_seed(mix_seed(cfg.seed, 3000), static_cast<std::uint64_t>(epoch + 1))).state_string();
        if (!out_dir.empty() && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 &&
            epoch + 1 < cfg.epochs) {
            char tag[16];
            std::snprintf(tag, sizeof tag, "epoch%03d", epoch + 1);
            save_checkpoint(checkpoint_path(out_dir, 2, tag), st);
        }
    }

    if (!out_dir.empty()) {
        rep.final_checkpoint = checkpoint_path(out_dir, 2, "final");
        save_checkpoint(rep.final_checkpoint, st);
    }
    rep.wall_time_sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {std::move(st), std::move(rep)};
}

// ---- inference -------------------------------------------------------------------

Tensor posterior_codes(const ModalityStack& stack, const TrainerState& stage1) {
    require_stage(stage1, 1, "posterior_codes");
    return posterior_codes_with(stage1.net, const_cast<ParamStore&>(stage1.params),
                                stage1.train.quant_mode, stack);
}

Tensor predict_codes(const ModalityStack& stack, const ScenarioMask& mask,
                     const TrainerState& stage1, const TrainerState& stage2,
                     quantizer::DecodeRule rule) {
    require_stage(stage1, 1, "predict_codes");
    require_stage(stage2, 2, "predict_codes");
    require_compatible(stage1, stage2);
    mask.validate(stack.num_modalities());
    const Tensor masked = synthdata::apply_mask(stack, mask, stage1.net.mask_indicators);
    return predict_codes_with(stage2.net, prior_head(stage2.train),
                              const_cast<ParamStore&>(stage2.params), masked, rule);
}

synthdata::ModalityStack impute(const ModalityStack& stack, const ScenarioMask& mask,
                                const TrainerState& stage1, const TrainerState& stage2,
                                quantizer::DecodeRule rule) {
    require_stage(stage1, 1, "impute");
    require_stage(stage2, 2, "impute");
    require_compatible(stage1, stage2);
    const nets::NetConfig& net = stage1.net;
    mask.validate(stack.num_modalities());
    if (stack.height() != net.image_size || stack.width() != net.image_size)
        throw std::invalid_argument("impute: stack size does not match the trained model");

    ParamStore& s1params = const_cast<ParamStore&>(stage1.params);
    const Tensor masked = synthdata::apply_mask(stack, mask, net.mask_indicators);
    const Tensor fc = nets::run_source(net, s1params, masked);
    const Tensor codes = predict_codes_with(net, prior_head(stage2.train),
                                            const_cast<ParamStore&>(stage2.params), masked, rule);

    const int hs = net.latent_size();
    const std::int64_t per = static_cast<std::int64_t>(net.code_channels) * hs * hs;
    ModalityStack out = stack;  // available modalities pass through bitwise
    for (int m = 0; m < net.num_modalities; ++m) {
        if (mask.available[static_cast<size_t>(m)]) continue;
        Tensor code({net.code_channels, hs, hs});
        std::copy(codes.data() + m * per, codes.data() + (m + 1) * per, code.data());
        const Tensor img = nets::run_decoder(net, s1params, code, fc);
        Tensor channel({net.image_size, net.image_size});
        std::copy(img.data(), img.data() + img.size(), channel.data());
        out.channels[static_cast<size_t>(m)] = std::move(channel);
    }
    return out;
}

Tensor reconstruct_channel(const ModalityStack& stack, const ScenarioMask& mask,
                           const TrainerState& stage1) {
    require_stage(stage1, 1, "reconstruct_channel");
    return reconstruct_with(stage1.net, const_cast<ParamStore&>(stage1.params),
                            stage1.train.quant_mode, stack, mask);
}

}  // namespace codebrain::training
