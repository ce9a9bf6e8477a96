// Unified modality-imputation pipeline: phantom data generation, two-stage
// training, evaluation, imputation and code-map export behind one binary.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "codebrain/graph.hpp"
#include "codebrain/metrics.hpp"
#include "codebrain/nets.hpp"
#include "codebrain/png_io.hpp"
#include "codebrain/quantizer.hpp"
#include "codebrain/rng.hpp"
#include "codebrain/synthdata.hpp"
#include "codebrain/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace codebrain;

namespace {

// exit code 1; anything else escaping to main() exits 2
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EvalConfig {
    quantizer::DecodeRule decode_rule = quantizer::DecodeRule::threshold;
    int samples_per_cell = 1;

    json to_json() const {
        return json{{"decode_rule",
                     decode_rule == quantizer::DecodeRule::threshold ? "threshold" : "expectation"},
                    {"samples_per_cell", samples_per_cell}};
    }
    static EvalConfig from_json(const json& j) {
        EvalConfig c;
        const std::string r = j.value("decode_rule", "threshold");
        if (r != "threshold" && r != "expectation")
            throw ValidationError("eval: unknown decode_rule '" + r + "'");
        c.decode_rule = r == "threshold" ? quantizer::DecodeRule::threshold
                                         : quantizer::DecodeRule::expectation;
        c.samples_per_cell = j.value("samples_per_cell", c.samples_per_cell);
        return c;
    }
};

struct AppConfig {
    synthdata::PhantomConfig phantom;
    nets::NetConfig net;
    training::TrainConfig train;
    EvalConfig eval;

    json to_json() const {
        return json{{"phantom", phantom.to_json()},
                    {"net", net.to_json()},
                    {"train", train.to_json()},
                    {"eval", eval.to_json()}};
    }
};

AppConfig load_config(const std::string& path) {
    AppConfig cfg;
    if (path.empty()) return cfg;
    std::ifstream f(path);
    if (!f) throw ValidationError("config file not found: " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw ValidationError("config file " + path + " is not valid JSON: " + e.what());
    }
    if (j.contains("phantom")) cfg.phantom = synthdata::PhantomConfig::from_json(j.at("phantom"));
    if (j.contains("net")) cfg.net = nets::NetConfig::from_json(j.at("net"));
    if (j.contains("train")) cfg.train = training::TrainConfig::from_json(j.at("train"));
    if (j.contains("eval")) cfg.eval = EvalConfig::from_json(j.at("eval"));
    return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
}

void write_snapshot(const std::string& out, const AppConfig& cfg, const std::string& command,
                    std::optional<std::uint64_t> seed) {
    fs::create_directories(out);
    json j = cfg.to_json();
    j["command"] = command;
    if (seed) j["seed_override"] = *seed;
    write_text(fs::path(out) / "config.resolved.json", j.dump(2) + "\n");
}

void prepare_out_dir(const std::string& out, bool force) {
    if (out.empty()) throw ValidationError("--out is required");
    if (fs::exists(out) && !fs::is_empty(out) && !force)
        throw ValidationError("output directory " + out +
                              " exists and is not empty (use --force to write anyway)");
}

Tensor to_channel(const Tensor& img_bchw) {
    Tensor out({img_bchw.dim(img_bchw.ndim() - 2), img_bchw.dim(img_bchw.ndim() - 1)});
    std::copy(img_bchw.data(), img_bchw.data() + img_bchw.size(), out.data());
    return out;
}

void write_gray_png8(const fs::path& path, const Tensor& img) {
    const int h = img.dim(0), w = img.dim(1);
    std::vector<std::uint8_t> rgb(static_cast<size_t>(3) * h * w);
    for (std::int64_t i = 0; i < img.size(); ++i) {
        const double v = std::min(1.0, std::max(0.0, static_cast<double>(img[i])));
        const auto q = static_cast<std::uint8_t>(std::lround(v * 255.0));
        rgb[static_cast<size_t>(i) * 3] = q;
        rgb[static_cast<size_t>(i) * 3 + 1] = q;
        rgb[static_cast<size_t>(i) * 3 + 2] = q;
    }
    io::write_png_rgb8(path.string(), rgb, h, w);
}

// absolute difference on a fixed [0, 0.3] scale for cross-run comparability
void write_error_map(const fs::path& path, const Tensor& a, const Tensor& b) {
    Tensor err(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) err[i] = std::abs(a[i] - b[i]) / 0.3;
    write_gray_png8(path, err);
}

int run_gen_data(const AppConfig& cfg0, const std::string& out, bool force,
                 std::optional<std::uint64_t> seed, bool verbose) {
    AppConfig cfg = cfg0;
    if (seed) cfg.phantom.master_seed = *seed;
    cfg.phantom.validate();
    prepare_out_dir(out, force);
    write_snapshot(out, cfg, "gen-data", seed);

    synthdata::Dataset ds = synthdata::generate_dataset(cfg.phantom);
    synthdata::write_dataset(ds, out);
    const auto tr = ds.indices(synthdata::Split::train).size();
    const auto va = ds.indices(synthdata::Split::val).size();
    const auto te = ds.indices(synthdata::Split::test).size();
    std::printf("wrote %zu subjects to %s (train/val/test = %zu/%zu/%zu)\n", ds.subjects.size(),
                out.c_str(), tr, va, te);
    if (verbose)
        std::printf("config hash %s\n", hex_u64(synthdata::config_hash(cfg.phantom)).c_str());
    return 0;
}

int run_train(const AppConfig& cfg0, const std::string& out, int stage, const std::string& data,
              const std::string& stage1_ckpt, const std::string& resume_path, bool force,
              std::optional<std::uint64_t> seed, bool verbose) {
    AppConfig cfg = cfg0;
    cfg.train.stage = stage;
    if (seed) cfg.train.seed = *seed;
    if (!data.empty()) cfg.train.dataset_path = data;
    if (cfg.train.dataset_path.empty())
        throw ValidationError("no dataset: set --data or train.dataset_path in the config");
    if (stage == 2 && stage1_ckpt.empty())
        throw ValidationError("stage 2 training requires --stage1-checkpoint");
    cfg.train.validate();
    cfg.net.validate();
    prepare_out_dir(out, force || !resume_path.empty());
    write_snapshot(out, cfg, "train", seed);

    const synthdata::Dataset ds = synthdata::read_dataset(cfg.train.dataset_path);
    std::optional<training::TrainerState> resume;
    if (!resume_path.empty()) resume = training::load_checkpoint(resume_path);

    training::StageResult result;
    if (stage == 1) {
        result = training::train_stage1(ds, cfg.net, cfg.train, out,
                                        resume ? &*resume : nullptr);
    } else {
        const training::TrainerState s1 = training::load_checkpoint(stage1_ckpt);
        result = training::train_stage2(ds, s1, cfg.train, out, resume ? &*resume : nullptr);
    }

    write_text(fs::path(out) / "report.json", result.report.to_json().dump(2) + "\n");
    write_text(fs::path(out) / "loss_curves.csv", result.report.to_csv());
    std::printf("stage %d done: %zu epochs, final loss %.4f, wall time %.1fs\n", stage,
                result.report.loss_total.size(),
                result.report.loss_total.empty() ? 0.0 : result.report.loss_total.back(),
                result.report.wall_time_sec);
    if (verbose && !result.report.val_metric.empty())
        std::printf("final val metric %.4f\n", result.report.val_metric.back());
    std::printf("final checkpoint: %s\n", result.report.final_checkpoint.c_str());
    return 0;
}

int run_evaluate(const AppConfig& cfg0, const std::string& out, const std::string& data,
                 const std::string& stage1_ckpt, const std::string& stage2_ckpt, bool force,
                 bool verbose) {
    if (stage1_ckpt.empty()) throw ValidationError("evaluate requires --stage1-checkpoint");
    prepare_out_dir(out, force);
    write_snapshot(out, cfg0, "evaluate", std::nullopt);

    const training::TrainerState s1 = training::load_checkpoint(stage1_ckpt);
    std::optional<training::TrainerState> s2;
    if (!stage2_ckpt.empty()) s2 = training::load_checkpoint(stage2_ckpt);

    const std::string dpath = !data.empty() ? data : cfg0.train.dataset_path;
    if (dpath.empty()) throw ValidationError("no dataset: set --data or train.dataset_path");
    const synthdata::Dataset ds = synthdata::read_dataset(dpath);

    std::vector<const synthdata::ModalityStack*> test;
    for (int i : ds.indices(synthdata::Split::test)) test.push_back(&ds.subjects[static_cast<size_t>(i)]);
    const auto scenarios = synthdata::enumerate_scenarios(s1.net.num_modalities);

    metrics::SynthFn impute_fn, recon_fn;
    if (s2) {
        impute_fn = [&](const synthdata::ModalityStack& subj, const synthdata::ScenarioMask& mask) {
            return training::impute(subj, mask, s1, *s2, cfg0.eval.decode_rule)
                .channels[static_cast<size_t>(mask.anchor)];
        };
    }
    recon_fn = [&](const synthdata::ModalityStack& subj, const synthdata::ScenarioMask& mask) {
        return training::reconstruct_channel(subj, mask, s1);
    };

    const metrics::MetricsReport report = metrics::evaluate(test, scenarios, impute_fn, recon_fn);
    write_text(fs::path(out) / "report.json", report.to_json().dump(2) + "\n");
    write_text(fs::path(out) / "report.csv", report.to_csv());

    // sample syntheses with error maps, one set per (scenario, target) cell
    const fs::path imgdir = fs::path(out) / "samples";
    fs::create_directories(imgdir);
    const int nsamples = std::min<int>(cfg0.eval.samples_per_cell, static_cast<int>(test.size()));
    for (const auto& sc : scenarios) {
        const synthdata::ScenarioMask mask = synthdata::mask_for(sc);
        std::string tag = "av";
        for (bool a : sc.available) tag += a ? '1' : '0';
        tag += "_t" + std::to_string(sc.target);
        for (int i = 0; i < nsamples; ++i) {
            const synthdata::ModalityStack& subj = *test[static_cast<size_t>(i)];
            const Tensor& truth = subj.channels[static_cast<size_t>(sc.target)];
            write_gray_png8(imgdir / (tag + "_s" + std::to_string(i) + "_truth.png"), truth);
            const Tensor recon = training::reconstruct_channel(subj, mask, s1);
            write_gray_png8(imgdir / (tag + "_s" + std::to_string(i) + "_reconstruction.png"), recon);
            write_error_map(imgdir / (tag + "_s" + std::to_string(i) + "_reconstruction_error.png"),
                            recon, truth);
            if (s2) {
                const Tensor imp = training::impute(subj, mask, s1, *s2, cfg0.eval.decode_rule)
                                       .channels[static_cast<size_t>(sc.target)];
                write_gray_png8(imgdir / (tag + "_s" + std::to_string(i) + "_imputation.png"), imp);
                write_error_map(imgdir / (tag + "_s" + std::to_string(i) + "_imputation_error.png"),
                                imp, truth);
            }
        }
    }

    std::printf("evaluated %zu cells x %zu subjects\n", scenarios.size(), test.size());
    auto show = [&](const char* name, const metrics::Aggregate& a) {
        if (report.has_imputation)
            std::printf("%-10s imputation PSNR %.2f dB | SSIM %.2f%% | MAE %.2f\n", name,
                        a.imputation.psnr, a.imputation.ssim * 100, a.imputation.mae * 1000);
        std::printf("%-10s reconstruction PSNR %.2f dB | zero-fill PSNR %.2f dB\n", name,
                    a.reconstruction.psnr, a.zero_fill.psnr);
    };
    show("O->O", report.one_to_one);
    show("M->O", report.many_to_one);
    show("ALL", report.all);
    if (verbose) std::printf("reports under %s\n", out.c_str());
    return 0;
}

int run_impute(const AppConfig& cfg0, const std::string& out, const std::string& input,
               const std::string& available_csv, const std::string& stage1_ckpt,
               const std::string& stage2_ckpt, bool force) {
    if (stage1_ckpt.empty() || stage2_ckpt.empty())
        throw ValidationError("impute requires --stage1-checkpoint and --stage2-checkpoint");
    if (input.empty()) throw ValidationError("impute requires --input <subject dir>");
    prepare_out_dir(out, force);

    const training::TrainerState s1 = training::load_checkpoint(stage1_ckpt);
    const training::TrainerState s2 = training::load_checkpoint(stage2_ckpt);
    const int n = s1.net.num_modalities;

    std::vector<std::string> names;
    for (int m = 0; m < n; ++m) names.push_back("mod" + std::to_string(m));

    std::vector<bool> available(static_cast<size_t>(n), false);
    std::stringstream ss(available_csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto it = std::find(names.begin(), names.end(), item);
        if (it == names.end())
            throw ValidationError("unknown modality '" + item + "' (expected mod0..mod" +
                                  std::to_string(n - 1) + ")");
        available[static_cast<size_t>(it - names.begin())] = true;
    }
    const int k_avail = static_cast<int>(std::count(available.begin(), available.end(), true));
    if (k_avail == 0) throw ValidationError("--available lists no modalities");
    if (k_avail == n) throw ValidationError("all modalities available: nothing to impute");

    synthdata::ModalityStack stack;
    stack.subject_id = fs::path(input).filename().string();
    stack.modality_names = names;
    for (int m = 0; m < n; ++m) {
        const fs::path p = fs::path(input) / (names[static_cast<size_t>(m)] + ".png");
        if (available[static_cast<size_t>(m)]) {
            if (!fs::exists(p))
                throw ValidationError("declared-available file missing: " + p.string());
            stack.channels.push_back(io::read_png_gray16(p.string()));
        } else {
            stack.channels.push_back(Tensor({s1.net.image_size, s1.net.image_size}));
        }
    }

    synthdata::ScenarioMask mask;
    mask.available = available;
    for (int m = 0; m < n; ++m)
        if (!available[static_cast<size_t>(m)]) {
            mask.anchor = m;
            break;
        }

    const synthdata::ModalityStack result =
        training::impute(stack, mask, s1, s2, cfg0.eval.decode_rule);

    fs::create_directories(out);
    write_snapshot(out, cfg0, "impute", std::nullopt);
    int written = 0;
    for (int m = 0; m < n; ++m) {
        const fs::path dst = fs::path(out) / (names[static_cast<size_t>(m)] + ".png");
        if (available[static_cast<size_t>(m)]) {
            fs::copy_file(fs::path(input) / (names[static_cast<size_t>(m)] + ".png"), dst,
                          fs::copy_options::overwrite_existing);
        } else {
            io::write_png_gray16(dst.string(), result.channels[static_cast<size_t>(m)]);
            ++written;
        }
    }
    std::printf("imputed %d missing modalities into %s\n", written, out.c_str());
    return 0;
}

int run_export_codes(const AppConfig& cfg0, const std::string& out, const std::string& data,
                     const std::string& stage1_ckpt, const std::string& stage2_ckpt,
                     const std::string& split_name, int max_subjects, bool force) {
    if (stage1_ckpt.empty()) throw ValidationError("export-codes requires --stage1-checkpoint");
    prepare_out_dir(out, force);
    write_snapshot(out, cfg0, "export-codes", std::nullopt);

    const training::TrainerState s1 = training::load_checkpoint(stage1_ckpt);
    if (s1.train.quant_mode != training::QuantMode::discrete)
        throw ValidationError("export-codes needs a discrete-mode stage-1 checkpoint");
    std::optional<training::TrainerState> s2;
    if (!stage2_ckpt.empty()) s2 = training::load_checkpoint(stage2_ckpt);

    const std::string dpath = !data.empty() ? data : cfg0.train.dataset_path;
    if (dpath.empty()) throw ValidationError("no dataset: set --data or train.dataset_path");
    const synthdata::Dataset ds = synthdata::read_dataset(dpath);

    synthdata::Split split = synthdata::Split::test;
    if (split_name == "train") split = synthdata::Split::train;
    else if (split_name == "val") split = synthdata::Split::val;
    else if (split_name != "test") throw ValidationError("unknown split '" + split_name + "'");

    const int n = s1.net.num_modalities;
    const int d = s1.net.code_channels;
    const int hs = s1.net.latent_size();
    const std::int64_t per = static_cast<std::int64_t>(d) * hs * hs;

    std::vector<int> idx = ds.indices(split);
    if (max_subjects > 0 && static_cast<int>(idx.size()) > max_subjects)
        idx.resize(static_cast<size_t>(max_subjects));
    if (idx.empty()) throw ValidationError("split '" + split_name + "' is empty");

    json summary = json::array();
    int coherent_wins = 0, coherent_total = 0;
    std::int64_t pred_hits = 0, pred_total = 0;
    for (int i : idx) {
        const synthdata::ModalityStack& subj = ds.subjects[static_cast<size_t>(i)];
        const fs::path sdir = fs::path(out) / subj.subject_id;
        fs::create_directories(sdir);
        const Tensor post = training::posterior_codes(subj, s1);
        json jsub{{"id", subj.subject_id}};
        for (int m = 0; m < n; ++m) {
            quantizer::CodeGrid grid;
            grid.channels = d;
            grid.height = hs;
            grid.width = hs;
            grid.levels = s1.net.levels;
            grid.codes.resize(static_cast<size_t>(per));
            for (std::int64_t j = 0; j < per; ++j)
                grid.codes[static_cast<size_t>(j)] =
                    static_cast<std::int32_t>(std::lround(post[m * per + j]));

            const std::string mname = subj.modality_names[static_cast<size_t>(m)];
            write_text(sdir / ("posterior_" + mname + ".json"),
                       quantizer::code_grid_to_json(grid).dump() + "\n");
            quantizer::write_code_heatmaps(grid, (sdir / ("posterior_" + mname)).string());

            const double coh = metrics::code_map_coherence(grid);
            Rng prng(mix_seed(fnv1a(subj.subject_id), static_cast<std::uint64_t>(m)));
            const double coh_perm = metrics::permuted_coherence(grid, prng);
            coherent_wins += coh > coh_perm ? 1 : 0;
            ++coherent_total;
            jsub["coherence"][mname] = {{"observed", coh}, {"permuted", coh_perm}};
            jsub["level_histogram"][mname] = quantizer::level_histogram(grid);

            if (s2) {
                // leave-one-out: everything available except the target modality
                synthdata::ScenarioMask mask;
                mask.available.assign(static_cast<size_t>(n), true);
                mask.available[static_cast<size_t>(m)] = false;
                mask.anchor = m;
                const Tensor pred =
                    training::predict_codes(subj, mask, s1, *s2, cfg0.eval.decode_rule);
                quantizer::CodeGrid pgrid = grid;
                for (std::int64_t j = 0; j < per; ++j)
                    pgrid.codes[static_cast<size_t>(j)] =
                        static_cast<std::int32_t>(std::lround(pred[m * per + j]));
                write_text(sdir / ("predicted_" + mname + ".json"),
                           quantizer::code_grid_to_json(pgrid).dump() + "\n");
                quantizer::write_code_heatmaps(pgrid, (sdir / ("predicted_" + mname)).string());
                std::int64_t hits = 0;
                for (std::int64_t j = 0; j < per; ++j)
                    hits += pgrid.codes[static_cast<size_t>(j)] == grid.codes[static_cast<size_t>(j)] ? 1 : 0;
                jsub["prediction_accuracy"][mname] =
                    static_cast<double>(hits) / static_cast<double>(per);
                pred_hits += hits;
                pred_total += per;
            }
        }
        summary.push_back(std::move(jsub));
    }

    json top{{"subjects", summary},
             {"coherence_wins", coherent_wins},
             {"coherence_total", coherent_total}};
    if (pred_total > 0)
        top["prediction_accuracy_overall"] =
            static_cast<double>(pred_hits) / static_cast<double>(pred_total);
    write_text(fs::path(out) / "codes_summary.json", top.dump(2) + "\n");
    std::printf("exported code maps for %zu subjects; coherence wins %d/%d\n", idx.size(),
                coherent_wins, coherent_total);
    if (pred_total > 0)
        std::printf("code prediction accuracy %.3f\n",
                    static_cast<double>(pred_hits) / static_cast<double>(pred_total));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef _OPENMP
    omp_set_num_threads(nets::thread_count());
#endif
    CLI::App app{"code-based unified modality imputation"};
    app.require_subcommand(1);

    std::string config_path, out_dir, data_path, stage1_ckpt, stage2_ckpt, resume_path;
    std::string input_dir, available_csv, split_name = "test";
    int stage = 1, max_subjects = 0;
    bool force = false, verbose = false;
    std::optional<std::uint64_t> seed;
    std::uint64_t seed_raw = 0;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON config file");
        cmd->add_option("--out", out_dir, "output directory")->required();
        cmd->add_flag("--force", force, "write into a non-empty output directory");
        cmd->add_flag("-v,--verbose", verbose, "verbose output");
    };

    CLI::App* gen = app.add_subcommand("gen-data", "generate a phantom dataset");
    add_common(gen);
    CLI::Option* gen_seed = gen->add_option("--seed", seed_raw, "master seed override");

    CLI::App* train = app.add_subcommand("train", "train stage 1 or stage 2");
    add_common(train);
    train->add_option("--stage", stage, "training stage (1 or 2)")->required();
    train->add_option("--data", data_path, "dataset directory");
    train->add_option("--stage1-checkpoint", stage1_ckpt, "frozen stage-1 checkpoint (stage 2)");
    train->add_option("--resume", resume_path, "checkpoint to resume from");
    CLI::Option* train_seed = train->add_option("--seed", seed_raw, "seed override");

    CLI::App* eval = app.add_subcommand("evaluate", "full scenario sweep on the test split");
    add_common(eval);
    eval->add_option("--data", data_path, "dataset directory");
    eval->add_option("--stage1-checkpoint", stage1_ckpt, "stage-1 checkpoint");
    eval->add_option("--stage2-checkpoint", stage2_ckpt, "stage-2 checkpoint");

    CLI::App* imp = app.add_subcommand("impute", "complete one subject directory");
    add_common(imp);
    imp->add_option("--input", input_dir, "subject directory with available PNGs");
    imp->add_option("--available", available_csv, "comma-separated available modalities");
    imp->add_option("--stage1-checkpoint", stage1_ckpt, "stage-1 checkpoint");
    imp->add_option("--stage2-checkpoint", stage2_ckpt, "stage-2 checkpoint");

    CLI::App* exp = app.add_subcommand("export-codes", "export code maps and statistics");
    add_common(exp);
    exp->add_option("--data", data_path, "dataset directory");
    exp->add_option("--stage1-checkpoint", stage1_ckpt, "stage-1 checkpoint");
    exp->add_option("--stage2-checkpoint", stage2_ckpt, "stage-2 checkpoint");
    exp->add_option("--split", split_name, "dataset split (train/val/test)");
    exp->add_option("--max-subjects", max_subjects, "cap on exported subjects (0 = all)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        const AppConfig cfg = load_config(config_path);
        if (gen->parsed() && *gen_seed) seed = seed_raw;
        if (train->parsed() && *train_seed) seed = seed_raw;

        if (gen->parsed()) return run_gen_data(cfg, out_dir, force, seed, verbose);
        if (train->parsed())
            return run_train(cfg, out_dir, stage, data_path, stage1_ckpt, resume_path, force, seed,
                             verbose);
        if (eval->parsed())
            return run_evaluate(cfg, out_dir, data_path, stage1_ckpt, stage2_ckpt, force, verbose);
        if (imp->parsed())
            return run_impute(cfg, out_dir, input_dir, available_csv, stage1_ckpt, stage2_ckpt,
                              force);
        if (exp->parsed())
            return run_export_codes(cfg, out_dir, data_path, stage1_ckpt, stage2_ckpt, split_name,
                                    max_subjects, force);
        return 1;
    } catch (const ValidationError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "runtime failure: %s\n", e.what());
        return 2;
    }
}
