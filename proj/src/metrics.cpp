#include "codebrain/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace codebrain::metrics {

namespace {

constexpr double kPsnrCap = 100.0;

double mse(const Tensor& x, const Tensor& y) {
    double s = 0;
    for (std::int64_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - y[i];
        s += d * d;
    }
    return s / static_cast<double>(x.size());
}

}  // namespace

double psnr(const Tensor& x, const Tensor& y) {
    require_same_shape(x, y, "psnr");
    const double m = mse(x, y);
    if (m <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

double ssim(const Tensor& x, const Tensor& y) {
    require_same_shape(x, y, "ssim");
    if (x.ndim() != 2) throw std::invalid_argument("ssim expects (H,W) images");
    constexpr int kWin = 11;
    constexpr double kSigma = 1.5;
    constexpr double kC1 = 0.01 * 0.01;  // (K1*range)^2, range = 1
    constexpr double kC2 = 0.03 * 0.03;
    const int h = x.dim(0), w = x.dim(1);
    if (h < kWin || w < kWin)
        throw std::invalid_argument("ssim: image smaller than the " + std::to_string(kWin) +
                                    "-pixel window");

    static const std::vector<double> kernel = [] {
        std::vector<double> k(kWin * kWin);
        double sum = 0;
        for (int i = 0; i < kWin; ++i)
            for (int j = 0; j < kWin; ++j) {
                const double di = i - (kWin - 1) / 2.0, dj = j - (kWin - 1) / 2.0;
                k[static_cast<size_t>(i * kWin + j)] =
                    std::exp(-(di * di + dj * dj) / (2 * kSigma * kSigma));
                sum += k[static_cast<size_t>(i * kWin + j)];
            }
        for (double& v : k) v /= sum;
        return k;
    }();

    double acc = 0;
    std::int64_t count = 0;
    for (int cy = 0; cy + kWin <= h; ++cy)
        for (int cx = 0; cx + kWin <= w; ++cx) {
            double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
            for (int i = 0; i < kWin; ++i)
                for (int j = 0; j < kWin; ++j) {
                    const double kv = kernel[static_cast<size_t>(i * kWin + j)];
                    const double xv = x[static_cast<std::int64_t>(cy + i) * w + cx + j];
                    const double yv = y[static_cast<std::int64_t>(cy + i) * w + cx + j];
                    mx += kv * xv;
                    my += kv * yv;
                    mxx += kv * xv * xv;
                    myy += kv * yv * yv;
                    mxy += kv * xv * yv;
                }
            const double vx = mxx - mx * mx;
            const double vy = myy - my * my;
            const double cov = mxy - mx * my;
            acc += ((2 * mx * my + kC1) * (2 * cov + kC2)) /
                   ((mx * mx + my * my + kC1) * (vx + vy + kC2));
            ++count;
        }
    return acc / static_cast<double>(count);
}

double mae(const Tensor& x, const Tensor& y) {
    require_same_shape(x, y, "mae");
    double s = 0;
    for (std::int64_t i = 0; i < x.size(); ++i) s += std::abs(x[i] - y[i]);
    return s / static_cast<double>(x.size());
}

double code_map_coherence(const quantizer::CodeGrid& codes) {
    codes.validate();
    if (codes.height < 2 || codes.width < 2)
        throw std::invalid_argument("code_map_coherence: grid must be at least 2x2");
    const int h = codes.height, w = codes.width, c = codes.channels;
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    auto same_vector = [&](std::int64_t a, std::int64_t b) {
        for (int ch = 0; ch < c; ++ch)
            if (codes.codes[static_cast<size_t>(ch * hw + a)] !=
                codes.codes[static_cast<size_t>(ch * hw + b)])
                return false;
        return true;
    };
    std::int64_t agree = 0, total = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::int64_t i = static_cast<std::int64_t>(y) * w + x;
            if (x + 1 < w) {
                agree += same_vector(i, i + 1) ? 1 : 0;
                ++total;
            }
            if (y + 1 < h) {
                agree += same_vector(i, i + w) ? 1 : 0;
                ++total;
            }
        }
    return static_cast<double>(agree) / static_cast<double>(total);
}

double permuted_coherence(const quantizer::CodeGrid& codes, Rng& rng) {
    codes.validate();
    const std::int64_t hw = static_cast<std::int64_t>(codes.height) * codes.width;
    std::vector<std::int64_t> perm(static_cast<size_t>(hw));
    std::iota(perm.begin(), perm.end(), std::int64_t{0});
    for (std::int64_t i = hw - 1; i > 0; --i)
        std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(rng.uniform_int(i + 1))]);
    quantizer::CodeGrid shuffled = codes;
    for (int c = 0; c < codes.channels; ++c)
        for (std::int64_t i = 0; i < hw; ++i)
            shuffled.codes[static_cast<size_t>(c * hw + i)] =
                codes.codes[static_cast<size_t>(c * hw + perm[static_cast<size_t>(i)])];
    return code_map_coherence(shuffled);
}

namespace {

struct Accum {
    double psnr = 0, ssim = 0, mae = 0;
    std::int64_t n = 0;
    void add(const CellMetrics& m) {
        psnr += m.psnr;
        ssim += m.ssim;
        mae += m.mae;
        ++n;
    }
    CellMetrics mean() const {
        if (n == 0) return {};
        return {psnr / static_cast<double>(n), ssim / static_cast<double>(n),
                mae / static_cast<double>(n)};
    }
};

}  // namespace

MetricsReport evaluate(const std::vector<const synthdata::ModalityStack*>& subjects,
                       const std::vector<synthdata::ScenarioPair>& scenarios,
                       const SynthFn& impute_fn, const SynthFn& reconstruct_fn) {
    if (subjects.empty()) throw std::invalid_argument("evaluate: empty subject split");
    if (scenarios.empty()) throw std::invalid_argument("evaluate: no scenarios given");

    MetricsReport report;
    report.num_modalities = subjects[0]->num_modalities();
    report.subject_count = static_cast<int>(subjects.size());
    report.has_imputation = static_cast<bool>(impute_fn);
    report.has_reconstruction = static_cast<bool>(reconstruct_fn);

    Accum agg_imp[3], agg_rec[3], agg_zero[3];  // 0: O->O, 1: M->O, 2: ALL

    for (const synthdata::ScenarioPair& sc : scenarios) {
        ScenarioCell cell;
        cell.available = sc.available;
        cell.target = sc.target;
        const synthdata::ScenarioMask mask = synthdata::mask_for(sc);
        const int band = mask.num_available() == 1 ? 0 : 1;

        Accum cell_imp, cell_rec, cell_zero;
        for (const synthdata::ModalityStack* subj : subjects) {
            const Tensor& truth = subj->channels[static_cast<size_t>(sc.target)];
            const Tensor zeros(truth.shape());
            CellMetrics zm{psnr(zeros, truth), ssim(zeros, truth), mae(zeros, truth)};
            cell_zero.add(zm);
            agg_zero[band].add(zm);
            agg_zero[2].add(zm);
            if (impute_fn) {
                const Tensor out = impute_fn(*subj, mask);
                CellMetrics m{psnr(out, truth), ssim(out, truth), mae(out, truth)};
                cell_imp.add(m);
                agg_imp[band].add(m);
                agg_imp[2].add(m);
            }
            if (reconstruct_fn) {
                const Tensor out = reconstruct_fn(*subj, mask);
                CellMetrics m{psnr(out, truth), ssim(out, truth), mae(out, truth)};
                cell_rec.add(m);
                agg_rec[band].add(m);
                agg_rec[2].add(m);
            }
        }
        cell.subjects = static_cast<int>(subjects.size());
        cell.imputation = cell_imp.mean();
        cell.reconstruction = cell_rec.mean();
        cell.zero_fill = cell_zero.mean();
        report.cells.push_back(std::move(cell));
    }

    auto fill = [&](Aggregate& a, int band) {
        a.imputation = agg_imp[band].mean();
        a.reconstruction = agg_rec[band].mean();
        a.zero_fill = agg_zero[band].mean();
        a.samples = static_cast<int>(agg_zero[band].n);
        a.pairs = a.samples / report.subject_count;
    };
    fill(report.one_to_one, 0);
    fill(report.many_to_one, 1);
    fill(report.all, 2);
    return report;
}

namespace {

nlohmann::json metrics_json(const CellMetrics& m) {
    return {{"psnr_db", m.psnr}, {"ssim_pct", m.ssim * 100.0}, {"mae_x1000", m.mae * 1000.0}};
}

std::string pattern_of(const std::vector<bool>& avail) {
    std::string s;
    for (bool a : avail) s += a ? '1' : '0';
    return s;
}

}  // namespace

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json cells_j = nlohmann::json::array();
    for (const ScenarioCell& c : cells) {
        nlohmann::json j{{"available", pattern_of(c.available)},
                         {"target", c.target},
                         {"subjects", c.subjects},
                         {"zero_fill", metrics_json(c.zero_fill)}};
        if (has_imputation) j["imputation"] = metrics_json(c.imputation);
        if (has_reconstruction) j["reconstruction"] = metrics_json(c.reconstruction);
        cells_j.push_back(std::move(j));
    }
    auto agg_json = [&](const Aggregate& a) {
        nlohmann::json j{{"pairs", a.pairs},
                         {"samples", a.samples},
                         {"zero_fill", metrics_json(a.zero_fill)}};
        if (has_imputation) j["imputation"] = metrics_json(a.imputation);
        if (has_reconstruction) j["reconstruction"] = metrics_json(a.reconstruction);
        return j;
    };
    return nlohmann::json{{"num_modalities", num_modalities},
                          {"subject_count", subject_count},
                          {"cells", cells_j},
                          {"aggregates",
                           {{"one_to_one", agg_json(one_to_one)},
                            {"many_to_one", agg_json(many_to_one)},
                            {"all", agg_json(all)}}}};
}

std::string MetricsReport::to_csv() const {
    std::ostringstream out;
    out << "available,target";
    auto cols = [&](const char* method) {
        out << "," << method << "_psnr_db," << method << "_ssim_pct," << method << "_mae_x1000";
    };
    if (has_imputation) cols("imputation");
    if (has_reconstruction) cols("reconstruction");
    cols("zero_fill");
    out << "\n";
    auto row = [&](const CellMetrics& m) {
        out << "," << m.psnr << "," << m.ssim * 100.0 << "," << m.mae * 1000.0;
    };
    for (const ScenarioCell& c : cells) {
        out << pattern_of(c.available) << "," << c.target;
        if (has_imputation) row(c.imputation);
        if (has_reconstruction) row(c.reconstruction);
        row(c.zero_fill);
        out << "\n";
    }
    return out.str();
}

}  // namespace codebrain::metrics
