#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "cb_cli_tests";

int run(const std::string& args, std::string* output = nullptr) {
    const fs::path log = kWork / "last_output.txt";
    const std::string cmd =
        std::string(CODEBRAIN_BIN) + " " + args + " >" + log.string() + " 2>&1";
    const int rc = std::system(cmd.c_str());
    if (output) {
        std::ifstream f(log);
        std::stringstream ss;
        ss << f.rdbuf();
        *output = ss.str();
    }
    return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_tiny_config(const fs::path& p, int epochs = 2) {
    json cfg{{"phantom",
              {{"num_modalities", 2}, {"image_size", 16}, {"num_subjects", 12},
               {"blob_count_min", 3}, {"blob_count_max", 6}}},
             {"net",
              {{"num_modalities", 2}, {"image_size", 16}, {"code_channels", 2},
               {"common_channels", 4}, {"base_width", 4}}},
             {"train", {{"epochs", epochs}, {"batch_size", 4}, {"checkpoint_every", 0}}}};
    std::ofstream(p) << cfg.dump(2);
}

// width/height from the PNG IHDR chunk
std::pair<int, int> png_dims(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::vector<unsigned char> head(24);
    f.read(reinterpret_cast<char*>(head.data()), 24);
    auto be32 = [&](int off) {
        return (head[off] << 24) | (head[off + 1] << 16) | (head[off + 2] << 8) | head[off + 3];
    };
    return {be32(16), be32(20)};
}

struct Setup {
    Setup() {
        fs::remove_all(kWork);
        fs::create_directories(kWork);
    }
};
const Setup setup_once;

}  // namespace

TEST_CASE("default gen-data writes 250 subjects split 200/25/25") {
    std::string out;
    const int rc = run("gen-data --out " + (kWork / "default_data").string(), &out);
    CHECK(rc == 0);
    CHECK(out.find("250 subjects") != std::string::npos);
    CHECK(out.find("200/25/25") != std::string::npos);

    const json manifest = json::parse(slurp(kWork / "default_data" / "manifest.json"));
    CHECK(manifest.at("subjects").size() == 250);
    CHECK(fs::exists(kWork / "default_data" / "config.resolved.json"));
}

TEST_CASE("gen-data with the same seed produces identical manifests") {
    write_tiny_config(kWork / "tiny.json");
    CHECK(run("gen-data --config " + (kWork / "tiny.json").string() + " --seed 7 --out " +
              (kWork / "d7a").string()) == 0);
    CHECK(run("gen-data --config " + (kWork / "tiny.json").string() + " --seed 7 --out " +
              (kWork / "d7b").string()) == 0);
    CHECK(slurp(kWork / "d7a" / "manifest.json") == slurp(kWork / "d7b" / "manifest.json"));
    const json a = json::parse(slurp(kWork / "d7a" / "manifest.json"));
    const json b = json::parse(slurp(kWork / "d7b" / "manifest.json"));
    CHECK(a.at("config_hash") == b.at("config_hash"));
}

TEST_CASE("gen-data validation failures exit with code 1") {
    json bad{{"phantom", {{"num_modalities", 1}, {"image_size", 16}, {"num_subjects", 4}}}};
    std::ofstream(kWork / "bad.json") << bad.dump();
    std::string out;
    CHECK(run("gen-data --config " + (kWork / "bad.json").string() + " --out " +
              (kWork / "bad_out").string(), &out) == 1);

    // existing non-empty output dir without --force
    fs::create_directories(kWork / "occupied");
    std::ofstream(kWork / "occupied" / "file.txt") << "x";
    write_tiny_config(kWork / "tiny2.json");
    CHECK(run("gen-data --config " + (kWork / "tiny2.json").string() + " --out " +
              (kWork / "occupied").string(), &out) == 1);
    CHECK(out.find("--force") != std::string::npos);
    CHECK(run("gen-data --config " + (kWork / "tiny2.json").string() + " --out " +
              (kWork / "occupied").string() + " --force") == 0);
}

TEST_CASE("the full pipeline runs through the binary") {
    write_tiny_config(kWork / "pipeline.json", 4);
    const std::string cfg = " --config " + (kWork / "pipeline.json").string();
    const std::string data = (kWork / "pdata").string();
    REQUIRE(run("gen-data" + cfg + " --out " + data) == 0);

    SUBCASE("stage 2 without a stage-1 checkpoint is a usage error") {
        std::string out;
        CHECK(run("train --stage 2" + cfg + " --data " + data + " --out " +
                  (kWork / "nope").string(), &out) == 1);
        CHECK(out.find("--stage1-checkpoint") != std::string::npos);
    }

    SUBCASE("train, evaluate, impute, export") {
        const std::string s1 = (kWork / "s1").string();
        const std::string s2 = (kWork / "s2").string();
        std::string out;
        REQUIRE(run("train --stage 1" + cfg + " --data " + data + " --out " + s1, &out) == 0);
        CHECK(json::parse(slurp(fs::path(s1) / "report.json")).at("loss_total").size() == 4);
        CHECK(fs::exists(fs::path(s1) / "loss_curves.csv"));

        REQUIRE(run("train --stage 2" + cfg + " --data " + data + " --out " + s2 +
                    " --stage1-checkpoint " + s1 + "/stage1_final.ckpt") == 0);

        const std::string ev = (kWork / "ev").string();
        REQUIRE(run("evaluate" + cfg + " --data " + data + " --out " + ev +
                    " --stage1-checkpoint " + s1 + "/stage1_final.ckpt --stage2-checkpoint " +
                    s2 + "/stage2_final.ckpt") == 0);
        const json report = json::parse(slurp(fs::path(ev) / "report.json"));
        CHECK(report.at("cells").size() == 2);  // N=2 has two (scenario,target) cells
        for (const auto& cell : report.at("cells")) CHECK(cell.contains("zero_fill"));

        // error maps have exactly the image dimensions
        const auto [w, h] = png_dims(fs::path(ev) / "samples" / "av01_t0_s0_imputation_error.png");
        CHECK(w == 16);
        CHECK(h == 16);

        // impute: repeated invocations agree byte for byte
        const std::string ckpts = " --stage1-checkpoint " + s1 +
                                  "/stage1_final.ckpt --stage2-checkpoint " + s2 +
                                  "/stage2_final.ckpt";
        const std::string subj = data + "/subject_000";
        REQUIRE(run("impute" + cfg + " --input " + subj + " --available mod0 --out " +
                    (kWork / "imp1").string() + ckpts) == 0);
        REQUIRE(run("impute" + cfg + " --input " + subj + " --available mod0 --out " +
                    (kWork / "imp2").string() + ckpts) == 0);
        CHECK(slurp(kWork / "imp1" / "mod1.png") == slurp(kWork / "imp2" / "mod1.png"));
        CHECK(slurp(kWork / "imp1" / "mod0.png") == slurp(fs::path(subj) / "mod0.png"));

        CHECK(run("impute" + cfg + " --input " + subj + " --available mod0,mod1 --out " +
                  (kWork / "imp3").string() + ckpts, &out) == 1);
        CHECK(out.find("nothing to impute") != std::string::npos);

        CHECK(run("impute" + cfg + " --input " + (kWork / "no_such_dir").string() +
                  " --available mod0 --out " + (kWork / "imp4").string() + ckpts, &out) == 1);
        CHECK(out.find("mod0.png") != std::string::npos);  // names the missing file

        const std::string codes = (kWork / "codes").string();
        REQUIRE(run("export-codes" + cfg + " --data " + data + " --out " + codes + ckpts) == 0);
        const json summary = json::parse(slurp(fs::path(codes) / "codes_summary.json"));
        CHECK(summary.contains("prediction_accuracy_overall"));
        // exported grids are latent-sized (image 16 -> 2x2 maps)
        bool found = false;
        for (const auto& entry : fs::recursive_directory_iterator(codes))
            if (entry.path().filename() == "posterior_mod0_c0.png") {
                const auto [cw, ch] = png_dims(entry.path());
                CHECK(cw == 2);
                CHECK(ch == 2);
                found = true;
            }
        CHECK(found);
    }

    SUBCASE("resume continues from a periodic checkpoint") {
        json cfgj = json::parse(slurp(kWork / "pipeline.json"));
        cfgj["train"]["checkpoint_every"] = 2;
        std::ofstream(kWork / "resume.json") << cfgj.dump();
        const std::string rcfg = " --config " + (kWork / "resume.json").string();
        const std::string full = (kWork / "full").string();
        REQUIRE(run("train --stage 1" + rcfg + " --data " + data + " --out " + full) == 0);

        const std::string resumed = (kWork / "resumed").string();
        REQUIRE(run("train --stage 1" + rcfg + " --data " + data + " --out " + resumed +
                    " --resume " + full + "/stage1_epoch002.ckpt") == 0);
        const json fullr = json::parse(slurp(fs::path(full) / "report.json"));
        const json resr = json::parse(slurp(fs::path(resumed) / "report.json"));
        REQUIRE(resr.at("loss_total").size() == 2);
        CHECK(resr.at("loss_total")[0].get<double>() == fullr.at("loss_total")[2].get<double>());
        CHECK(resr.at("loss_total")[1].get<double>() == fullr.at("loss_total")[3].get<double>());
    }
}

TEST_CASE("evaluate without checkpoints is a usage error") {
    std::string out;
    CHECK(run("evaluate --out " + (kWork / "ev_bad").string(), &out) == 1);
    CHECK(out.find("stage1-checkpoint") != std::string::npos);
}

TEST_CASE("unknown flags are parse errors") {
    std::string out;
    CHECK(run("gen-data --out /tmp/x --definitely-not-a-flag", &out) == 1);
}
