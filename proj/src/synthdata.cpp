#include "codebrain/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "codebrain/png_io.hpp"

namespace fs = std::filesystem;

namespace codebrain::synthdata {

void ModalityStack::validate() const {
    if (channels.empty()) throw std::invalid_argument("modality stack: no channels");
    if (modality_names.size() != channels.size())
        throw std::invalid_argument("modality stack: name/channel count mismatch");
    const int h = height(), w = width();
    for (const Tensor& c : channels) {
        if (c.ndim() != 2 || c.dim(0) != h || c.dim(1) != w)
            throw std::invalid_argument("modality stack: channels have differing dimensions");
        if (c.min() < 0.0 || c.max() > 1.0)
            throw std::invalid_argument("modality stack: intensities outside [0,1]");
    }
}

int ScenarioMask::num_available() const {
    int n = 0;
    for (bool a : available) n += a ? 1 : 0;
    return n;
}

void ScenarioMask::validate(int num_modalities) const {
    if (static_cast<int>(available.size()) != num_modalities)
        throw std::invalid_argument("scenario mask: arity " + std::to_string(available.size()) +
                                    " does not match modality count " +
                                    std::to_string(num_modalities));
    const int k = num_masked();
    if (k <= 0 || k >= num_modalities)
        throw std::invalid_argument("scenario mask: need 0 < masked < N, got masked=" +
                                    std::to_string(k));
    if (anchor < 0 || anchor >= num_modalities || available[static_cast<size_t>(anchor)])
        throw std::invalid_argument("scenario mask: anchor must be a missing modality");
}

std::string ScenarioMask::pattern() const {
    std::string s;
    for (bool a : available) s += a ? '1' : '0';
    return s;
}

double ContrastTransfer::apply(double x) const {
    const double base = invert ? 1.0 - x : x;
    return lift + (1.0 - lift) * std::pow(base, gamma);
}

std::vector<ContrastTransfer> default_transfers(int num_modalities) {
    // distinct but structure-preserving looks, cycled beyond four modalities
    static const ContrastTransfer kBank[4] = {
        {false, 1.0, 0.0},
        {true, 1.3, 0.05},
        {false, 2.2, 0.10},
        {true, 0.6, 0.0},
    };
    std::vector<ContrastTransfer> out;
    for (int m = 0; m < num_modalities; ++m) out.push_back(kBank[m % 4]);
    return out;
}

void PhantomConfig::validate() const {
    if (num_modalities < 2)
        throw std::invalid_argument("phantom: need at least 2 modalities for imputation, got " +
                                    std::to_string(num_modalities));
    if (image_size < 16) throw std::invalid_argument("phantom: image_size must be >= 16");
    if (num_subjects < 1) throw std::invalid_argument("phantom: num_subjects must be >= 1");
    if (blob_count_min < 1 || blob_count_max < blob_count_min)
        throw std::invalid_argument("phantom: invalid blob count range");
    if (!transfers.empty() && static_cast<int>(transfers.size()) != num_modalities)
        throw std::invalid_argument("phantom: transfer count must match modality count");
    for (const ContrastTransfer& t : transfers)
        if (t.gamma <= 0.0 || t.lift < 0.0 || t.lift >= 1.0)
            throw std::invalid_argument("phantom: transfer must stay strictly monotone on [0,1]");
    if (gain.lo <= 0.0 || gain.hi < gain.lo) throw std::invalid_argument("phantom: bad gain range");
    if (gamma.lo <= 0.0 || gamma.hi < gamma.lo)
        throw std::invalid_argument("phantom: bad gamma range");
    if (bias_amplitude.lo < 0.0 || bias_amplitude.hi < bias_amplitude.lo)
        throw std::invalid_argument("phantom: bad bias amplitude range");
    if (noise_sigma < 0.0) throw std::invalid_argument("phantom: negative noise level");
}

ContrastTransfer PhantomConfig::transfer_for(int modality) const {
    if (!transfers.empty()) return transfers[static_cast<size_t>(modality)];
    return default_transfers(num_modalities)[static_cast<size_t>(modality)];
}

nlohmann::json PhantomConfig::to_json() const {
    nlohmann::json jt = nlohmann::json::array();
    for (int m = 0; m < num_modalities; ++m) {
        const ContrastTransfer t = transfer_for(m);
        jt.push_back({{"invert", t.invert}, {"gamma", t.gamma}, {"lift", t.lift}});
    }
    return nlohmann::json{{"num_modalities", num_modalities},
                          {"image_size", image_size},
                          {"num_subjects", num_subjects},
                          {"blob_count_min", blob_count_min},
                          {"blob_count_max", blob_count_max},
                          {"transfers", jt},
                          {"gain", {gain.lo, gain.hi}},
                          {"gamma", {gamma.lo, gamma.hi}},
                          {"bias_amplitude", {bias_amplitude.lo, bias_amplitude.hi}},
                          {"noise_sigma", noise_sigma},
                          {"master_seed", master_seed}};
}

PhantomConfig PhantomConfig::from_json(const nlohmann::json& j) {
    PhantomConfig c;
    c.num_modalities = j.value("num_modalities", c.num_modalities);
    c.image_size = j.value("image_size", c.image_size);
    c.num_subjects = j.value("num_subjects", c.num_subjects);
    c.blob_count_min = j.value("blob_count_min", c.blob_count_min);
    c.blob_count_max = j.value("blob_count_max", c.blob_count_max);
    if (j.contains("transfers")) {
        for (const auto& t : j.at("transfers"))
            c.transfers.push_back({t.value("invert", false), t.value("gamma", 1.0),
                                   t.value("lift", 0.0)});
    }
    auto range = [&](const char* key, StyleRange def) {
        if (!j.contains(key)) return def;
        const auto& r = j.at(key);
        return StyleRange{r.at(0).get<double>(), r.at(1).get<double>()};
    };
    c.gain = range("gain", c.gain);
    c.gamma = range("gamma", c.gamma);
    c.bias_amplitude = range("bias_amplitude", c.bias_amplitude);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.master_seed = j.value("master_seed", c.master_seed);
    return c;
}

namespace {

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

struct Blob {
    double cx, cy, ax, ay, theta, tissue, softness;
};

// shared anatomy: soft elliptical tissue blobs painted over a head ellipse
Tensor render_anatomy(Rng& rng, const PhantomConfig& cfg) {
    const int s = cfg.image_size;
    Tensor map({s, s});

    const double head_cx = 0.5 * s, head_cy = 0.5 * s;
    const double head_ax = 0.42 * s, head_ay = 0.46 * s;
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            const double dx = (x - head_cx) / head_ax, dy = (y - head_cy) / head_ay;
            const double r = std::sqrt(dx * dx + dy * dy);
            const double alpha = 1.0 / (1.0 + std::exp(-(1.0 - r) * std::min(head_ax, head_ay) / 1.5));
            map[static_cast<std::int64_t>(y) * s + x] = 0.15 * alpha;
        }

    const int nblobs = cfg.blob_count_min +
                       static_cast<int>(rng.uniform_int(cfg.blob_count_max - cfg.blob_count_min + 1));
    static const double kTissue[4] = {0.35, 0.55, 0.75, 0.95};
    for (int i = 0; i < nblobs; ++i) {
        Blob b;
        b.cx = rng.uniform(0.22, 0.78) * s;
        b.cy = rng.uniform(0.22, 0.78) * s;
        b.ax = rng.uniform(0.05, 0.20) * s;
        b.ay = rng.uniform(0.05, 0.20) * s;
        b.theta = rng.uniform(0.0, 3.14159265358979323846);
        b.tissue = kTissue[rng.uniform_int(4)];
        b.softness = rng.uniform(0.8, 1.8);
        const double ct = std::cos(b.theta), st = std::sin(b.theta);
        const double scale = std::min(b.ax, b.ay) / b.softness;
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                const double dx = x - b.cx, dy = y - b.cy;
                const double u = (dx * ct + dy * st) / b.ax;
                const double v = (-dx * st + dy * ct) / b.ay;
                const double r = std::sqrt(u * u + v * v);
                if (r > 2.5) continue;
                const double alpha = 1.0 / (1.0 + std::exp(-(1.0 - r) * scale));
                Real& m = map[static_cast<std::int64_t>(y) * s + x];
                m = m * (1.0 - alpha) + b.tissue * alpha;
            }
    }
    return map;
}

}  // namespace

ModalityStack gen_subject(std::uint64_t seed, const PhantomConfig& cfg) {
    cfg.validate();
    Rng rng(seed);
    const int s = cfg.image_size;
    const Tensor anatomy = render_anatomy(rng, cfg);

    ModalityStack stack;
    for (int m = 0; m < cfg.num_modalities; ++m) {
        const ContrastTransfer transfer = cfg.transfer_for(m);
        const double gain = rng.uniform(cfg.gain.lo, cfg.gain.hi);
        const double inst_gamma = rng.uniform(cfg.gamma.lo, cfg.gamma.hi);
        const double bias_amp = rng.uniform(cfg.bias_amplitude.lo, cfg.bias_amplitude.hi);
        const double fx = rng.uniform(0.5, 1.5), fy = rng.uniform(0.5, 1.5);
        const double px = rng.uniform(0.0, 6.28318530717958647692);
        const double py = rng.uniform(0.0, 6.28318530717958647692);

        Tensor img({s, s});
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                double v = transfer.apply(anatomy[static_cast<std::int64_t>(y) * s + x]);
                v = gain * std::pow(v, inst_gamma);
                const double bias = bias_amp * std::sin(3.14159265358979323846 * fx * x / s + px) *
                                    std::sin(3.14159265358979323846 * fy * y / s + py);
                v += bias;
                if (cfg.noise_sigma > 0.0) v += cfg.noise_sigma * rng.normal();
                img[static_cast<std::int64_t>(y) * s + x] = clamp01(v);
            }
        stack.channels.push_back(std::move(img));
        stack.modality_names.push_back("mod" + std::to_string(m));
    }
    return stack;
}

ScenarioMask sample_scenario(Rng& rng, int num_modalities) {
    if (num_modalities < 2)
        throw std::invalid_argument("sample_scenario: need at least 2 modalities");
    const int k = 1 + static_cast<int>(rng.uniform_int(num_modalities - 1));
    // partial Fisher-Yates: first k entries form a uniform size-k subset
    std::vector<int> idx(static_cast<size_t>(num_modalities));
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < k; ++i) {
        const int j = i + static_cast<int>(rng.uniform_int(num_modalities - i));
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    ScenarioMask mask;
    mask.available.assign(static_cast<size_t>(num_modalities), true);
    for (int i = 0; i < k; ++i) mask.available[static_cast<size_t>(idx[static_cast<size_t>(i)])] = false;
    mask.anchor = idx[static_cast<size_t>(rng.uniform_int(k))];
    return mask;
}

std::vector<ScenarioPair> enumerate_scenarios(int num_modalities) {
    if (num_modalities < 2)
        throw std::invalid_argument("enumerate_scenarios: need at least 2 modalities");
    std::vector<ScenarioPair> pairs;
    std::vector<unsigned> masks;
    for (unsigned m = 1; m + 1 < (1u << num_modalities); ++m) masks.push_back(m);
    std::stable_sort(masks.begin(), masks.end(), [](unsigned a, unsigned b) {
        const int pa = __builtin_popcount(a), pb = __builtin_popcount(b);
        return pa != pb ? pa < pb : a < b;
    });
    for (unsigned m : masks)
        for (int t = 0; t < num_modalities; ++t)
            if (!(m & (1u << t))) {
                ScenarioPair p;
                for (int i = 0; i < num_modalities; ++i) p.available.push_back((m >> i) & 1u);
                p.target = t;
                pairs.push_back(std::move(p));
            }
    return pairs;
}

ScenarioMask mask_for(const ScenarioPair& pair) {
    ScenarioMask mask;
    mask.available = pair.available;
    mask.anchor = pair.target;
    return mask;
}

Tensor apply_mask(const ModalityStack& stack, const ScenarioMask& mask, bool with_indicators) {
    const int n = stack.num_modalities();
    mask.validate(n);
    const int h = stack.height(), w = stack.width();
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    Tensor out({with_indicators ? 2 * n : n, h, w});
    for (int m = 0; m < n; ++m) {
        if (mask.available[static_cast<size_t>(m)])
            std::copy(stack.channels[static_cast<size_t>(m)].data(),
                      stack.channels[static_cast<size_t>(m)].data() + hw,
                      out.data() + static_cast<std::int64_t>(m) * hw);
        if (with_indicators && mask.available[static_cast<size_t>(m)])
            std::fill(out.data() + static_cast<std::int64_t>(n + m) * hw,
                      out.data() + static_cast<std::int64_t>(n + m + 1) * hw, Real(1));
    }
    return out;
}

const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

std::vector<int> Dataset::indices(Split s) const {
    std::vector<int> out;
    for (size_t i = 0; i < split.size(); ++i)
        if (split[i] == s) out.push_back(static_cast<int>(i));
    return out;
}

void Dataset::validate() const {
    if (subjects.size() != split.size())
        throw std::invalid_argument("dataset: split/subject count mismatch");
    for (const ModalityStack& s : subjects) s.validate();
}

std::vector<Split> compute_split(const std::vector<std::string>& ids) {
    const size_t n = ids.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        const std::uint64_t ha = fnv1a(ids[a]), hb = fnv1a(ids[b]);
        return ha != hb ? ha < hb : ids[a] < ids[b];
    });
    const size_t n_train = n * 8 / 10;
    const size_t n_val = n / 10;
    std::vector<Split> split(n, Split::test);
    for (size_t i = 0; i < n; ++i) {
        if (i < n_train)
            split[order[i]] = Split::train;
        else if (i < n_train + n_val)
            split[order[i]] = Split::val;
    }
    return split;
}

Dataset generate_dataset(const PhantomConfig& cfg) {
    cfg.validate();
    Dataset ds;
    ds.config = cfg;
    ds.subjects.resize(static_cast<size_t>(cfg.num_subjects));
#pragma omp parallel for schedule(static)
    for (int i = 0; i < cfg.num_subjects; ++i) {
        ModalityStack s = gen_subject(mix_seed(cfg.master_seed, static_cast<std::uint64_t>(i)), cfg);
        char buf[16];
        std::snprintf(buf, sizeof buf, "subject_%03d", i);
        s.subject_id = buf;
        ds.subjects[static_cast<size_t>(i)] = std::move(s);
    }
    std::vector<std::string> ids;
    for (const auto& s : ds.subjects) ids.push_back(s.subject_id);
    ds.split = compute_split(ids);
    return ds;
}

std::uint64_t config_hash(const PhantomConfig& cfg) {
    return fnv1a(cfg.to_json().dump());
}

void write_dataset(const Dataset& ds, const std::string& root) {
    ds.validate();
    fs::create_directories(root);

    nlohmann::json subjects = nlohmann::json::array();
    for (size_t i = 0; i < ds.subjects.size(); ++i)
        subjects.push_back({{"id", ds.subjects[i].subject_id},
                            {"split", split_name(ds.split[i])}});
    nlohmann::json manifest{
        {"format_version", 1},
        {"master_seed", ds.config.master_seed},
        {"config", ds.config.to_json()},
        {"config_hash", hex_u64(config_hash(ds.config))},
        {"image_size", ds.config.image_size},
        {"modalities", ds.subjects.empty() ? std::vector<std::string>{}
                                           : ds.subjects[0].modality_names},
        {"normalization", {{"lo", 0.0}, {"hi", 1.0}}},
        {"subjects", subjects}};
    std::ofstream mf(fs::path(root) / "manifest.json");
    if (!mf) throw std::runtime_error("cannot write manifest under " + root);
    mf << manifest.dump(2) << "\n";
    mf.close();

    for (const ModalityStack& s : ds.subjects) {
        const fs::path dir = fs::path(root) / s.subject_id;
        fs::create_directories(dir);
        for (int m = 0; m < s.num_modalities(); ++m)
            io::write_png_gray16((dir / (s.modality_names[static_cast<size_t>(m)] + ".png")).string(),
                                 s.channels[static_cast<size_t>(m)]);
    }
}

Dataset read_dataset(const std::string& root) {
    const fs::path mpath = fs::path(root) / "manifest.json";
    std::ifstream mf(mpath);
    if (!mf) throw std::runtime_error("dataset manifest not found: " + mpath.string());
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("corrupt manifest " + mpath.string() + ": " + e.what());
    }
    if (manifest.value("format_version", 0) != 1)
        throw std::runtime_error("unsupported dataset format version in " + mpath.string());

    Dataset ds;
    ds.config = PhantomConfig::from_json(manifest.at("config"));
    const std::string stored_hash = manifest.value("config_hash", "");
    if (!stored_hash.empty() && stored_hash != hex_u64(config_hash(ds.config)))
        throw std::runtime_error("dataset config hash mismatch in " + mpath.string() +
                                 " (manifest " + stored_hash + ", recomputed " +
                                 hex_u64(config_hash(ds.config)) + ")");
    const auto modalities = manifest.at("modalities").get<std::vector<std::string>>();
    const int size = manifest.at("image_size").get<int>();

    for (const auto& js : manifest.at("subjects")) {
        ModalityStack s;
        s.subject_id = js.at("id").get<std::string>();
        s.modality_names = modalities;
        for (const std::string& m : modalities) {
            const fs::path p = fs::path(root) / s.subject_id / (m + ".png");
            if (!fs::exists(p))
                throw std::runtime_error("dataset: missing modality '" + m + "' for subject '" +
                                         s.subject_id + "' (" + p.string() + ")");
            Tensor img = io::read_png_gray16(p.string());
            if (img.dim(0) != size || img.dim(1) != size)
                throw std::runtime_error("dataset: wrong image size in " + p.string());
            s.channels.push_back(std::move(img));
        }
        ds.subjects.push_back(std::move(s));
        const std::string sp = js.at("split").get<std::string>();
        ds.split.push_back(sp == "train" ? Split::train : sp == "val" ? Split::val : Split::test);
    }
    ds.validate();
    return ds;
}

Tensor edge_map(const Tensor& img, double threshold) {
    if (img.ndim() != 2) throw std::invalid_argument("edge_map expects an (H,W) image");
    const int h = img.dim(0), w = img.dim(1);
    Tensor edges({h, w});
    for (int y = 1; y + 1 < h; ++y)
        for (int x = 1; x + 1 < w; ++x) {
            const double gx = 0.5 * (img[static_cast<std::int64_t>(y) * w + x + 1] -
                                     img[static_cast<std::int64_t>(y) * w + x - 1]);
            const double gy = 0.5 * (img[static_cast<std::int64_t>(y + 1) * w + x] -
                                     img[static_cast<std::int64_t>(y - 1) * w + x]);
            edges[static_cast<std::int64_t>(y) * w + x] =
                std::sqrt(gx * gx + gy * gy) > threshold ? Real(1) : Real(0);
        }
    return edges;
}

double edge_iou(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "edge_iou");
    std::int64_t inter = 0, uni = 0;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        const bool ea = a[i] > 0.5, eb = b[i] > 0.5;
        inter += (ea && eb) ? 1 : 0;
        uni += (ea || eb) ? 1 : 0;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace codebrain::synthdata
