#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "codebrain/synthdata.hpp"

using namespace codebrain;
using namespace codebrain::synthdata;
namespace fs = std::filesystem;

namespace {

PhantomConfig small_config() {
    PhantomConfig cfg;
    cfg.num_modalities = 3;
    cfg.image_size = 32;
    cfg.num_subjects = 8;
    return cfg;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("cb_synth_" + tag);
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("subject generation is deterministic") {
    const PhantomConfig cfg = small_config();
    const ModalityStack a = gen_subject(99, cfg);
    const ModalityStack b = gen_subject(99, cfg);
    const ModalityStack c = gen_subject(100, cfg);
    for (int m = 0; m < 3; ++m) {
        bool equal = true, equal_other = true;
        for (std::int64_t i = 0; i < a.channels[0].size(); ++i) {
            equal = equal && a.channels[m][i] == b.channels[m][i];
            equal_other = equal_other && a.channels[m][i] == c.channels[m][i];
        }
        CHECK(equal);
        CHECK_FALSE(equal_other);
    }
}

TEST_CASE("channels are valid images") {
    const PhantomConfig cfg = small_config();
    const ModalityStack s = gen_subject(1, cfg);
    CHECK(s.num_modalities() == 3);
    CHECK(s.height() == 32);
    CHECK(s.width() == 32);
    for (const Tensor& c : s.channels) {
        CHECK(c.min() >= 0.0);
        CHECK(c.max() <= 1.0);
        CHECK(c.max() > c.min());  // not constant
    }
}

TEST_CASE("identity transfers with styles disabled give identical channels") {
    PhantomConfig cfg = small_config();
    cfg.noise_sigma = 0.0;
    cfg.gain = {1.0, 1.0};
    cfg.gamma = {1.0, 1.0};
    cfg.bias_amplitude = {0.0, 0.0};
    cfg.transfers = {{false, 1.0, 0.0}, {false, 1.0, 0.0}, {false, 2.0, 0.1}};
    const ModalityStack s = gen_subject(5, cfg);
    bool first_two_equal = true, third_differs = false;
    for (std::int64_t i = 0; i < s.channels[0].size(); ++i) {
        first_two_equal = first_two_equal && s.channels[0][i] == s.channels[1][i];
        third_differs = third_differs || s.channels[0][i] != s.channels[2][i];
    }
    CHECK(first_two_equal);
    CHECK(third_differs);
}

TEST_CASE("degenerate configs are rejected") {
    PhantomConfig cfg = small_config();
    cfg.blob_count_min = 0;
    cfg.blob_count_max = 0;
    CHECK_THROWS_AS(static_cast<void>(gen_subject(1, cfg)), std::invalid_argument);
    cfg = small_config();
    cfg.image_size = 0;
    CHECK_THROWS_AS(static_cast<void>(gen_subject(1, cfg)), std::invalid_argument);
    cfg = small_config();
    cfg.num_modalities = 1;
    CHECK_THROWS_AS(static_cast<void>(gen_subject(1, cfg)), std::invalid_argument);
    cfg = small_config();
    cfg.transfers = {{false, -1.0, 0.0}, {false, 1.0, 0.0}, {false, 1.0, 0.0}};
    CHECK_THROWS_AS(static_cast<void>(gen_subject(1, cfg)), std::invalid_argument);
}

TEST_CASE("contrast transfers are strictly monotone") {
    for (const ContrastTransfer& t : default_transfers(4)) {
        double prev = t.apply(0.0);
        double direction = 0;
        for (int i = 1; i <= 100; ++i) {
            const double cur = t.apply(i / 100.0);
            const double step = cur - prev;
            CHECK(step != 0.0);
            if (direction == 0)
                direction = step;
            else
                CHECK(step * direction > 0);  // never changes direction
            prev = cur;
        }
    }
}

TEST_CASE("shared anatomy: edge maps overlap within a subject") {
    PhantomConfig cfg;
    cfg.num_modalities = 3;
    cfg.image_size = 48;
    cfg.num_subjects = 100;
    const Dataset ds = generate_dataset(cfg);

    double within = 0, across = 0;
    int n = 0;
    for (size_t i = 0; i < ds.subjects.size(); ++i) {
        const auto& s = ds.subjects[i];
        const auto& next = ds.subjects[(i + 1) % ds.subjects.size()];
        const Tensor e0 = edge_map(s.channels[0], 0.05);
        const Tensor e1 = edge_map(s.channels[1], 0.05);
        const Tensor e2 = edge_map(s.channels[2], 0.05);
        const Tensor f1 = edge_map(next.channels[1], 0.05);
        within += (edge_iou(e0, e1) + edge_iou(e0, e2) + edge_iou(e1, e2)) / 3.0;
        across += edge_iou(e0, f1);
        ++n;
    }
    within /= n;
    across /= n;
    INFO("within-subject IoU ", within, " across-subject IoU ", across);
    CHECK(within > across);
    CHECK(within > 0.2);  // shared structure is substantial, not incidental
}

TEST_CASE("scenario sampling: N=2 has a single legal shape") {
    Rng rng(11);
    for (int i = 0; i < 200; ++i) {
        const ScenarioMask m = sample_scenario(rng, 2);
        CHECK(m.num_available() == 1);
        CHECK(m.num_masked() == 1);
        CHECK_FALSE(m.available[static_cast<size_t>(m.anchor)]);
    }
    CHECK_THROWS_AS(static_cast<void>(sample_scenario(rng, 1)), std::invalid_argument);
}

TEST_CASE("scenario sampling: availability patterns are uniform for N=3") {
    Rng rng(1234);
    std::map<std::string, int> counts;
    const int trials = 60000;
    for (int i = 0; i < trials; ++i) {
        const ScenarioMask m = sample_scenario(rng, 3);
        m.validate(3);
        counts[m.pattern()]++;
    }
    CHECK(counts.size() == 6);
    for (const auto& [pattern, count] : counts) {
        const double freq = static_cast<double>(count) / trials;
        INFO("pattern ", pattern, " freq ", freq);
        CHECK(freq == doctest::Approx(1.0 / 6.0).epsilon(0.12));  // 1/6 +- 0.02 absolute
        CHECK(std::abs(freq - 1.0 / 6.0) < 0.02);
    }
}

TEST_CASE("scenario sampling: anchors are uniform among masked") {
    Rng rng(5);
    std::map<int, int> anchor_counts;
    for (int i = 0; i < 30000; ++i) {
        const ScenarioMask m = sample_scenario(rng, 4);
        CHECK_FALSE(m.available[static_cast<size_t>(m.anchor)]);
        anchor_counts[m.anchor]++;
    }
    for (const auto& [anchor, count] : anchor_counts)
        CHECK(std::abs(count / 30000.0 - 0.25) < 0.02);  // symmetric across modalities
}

TEST_CASE("scenario enumeration counts") {
    CHECK(enumerate_scenarios(2).size() == 2);

    const auto n3 = enumerate_scenarios(3);
    CHECK(n3.size() == 9);
    std::map<std::string, int> patterns;
    for (const auto& p : n3) {
        std::string s;
        for (bool a : p.available) s += a ? '1' : '0';
        patterns[s]++;
        CHECK_FALSE(p.available[static_cast<size_t>(p.target)]);
    }
    CHECK(patterns.size() == 6);

    const auto n4 = enumerate_scenarios(4);
    CHECK(n4.size() == 28);
    int one_to_one = 0;
    for (const auto& p : n4) {
        int avail = 0;
        for (bool a : p.available) avail += a ? 1 : 0;
        one_to_one += avail == 1 ? 1 : 0;
    }
    CHECK(one_to_one == 12);

    // 2^N - 2 availability patterns in general
    for (int n : {2, 3, 4, 5}) {
        std::map<std::string, int> pat;
        size_t expect_pairs = 0;
        for (const auto& p : enumerate_scenarios(n)) {
            std::string s;
            for (bool a : p.available) s += a ? '1' : '0';
            pat[s]++;
            ++expect_pairs;
        }
        CHECK(pat.size() == (1u << n) - 2);
        CHECK(enumerate_scenarios(n).size() == expect_pairs);
    }
}

TEST_CASE("apply_mask zero-fills and appends indicators") {
    const PhantomConfig cfg = small_config();
    const ModalityStack s = gen_subject(3, cfg);

    ScenarioMask mask;
    mask.available = {false, true, false};
    mask.anchor = 2;
    const Tensor out = apply_mask(s, mask, true);
    REQUIRE(out.shape() == std::vector<int>{6, 32, 32});
    const std::int64_t hw = 32 * 32;
    for (std::int64_t i = 0; i < hw; ++i) {
        CHECK(out[0 * hw + i] == 0.0);
        CHECK(out[1 * hw + i] == s.channels[1][i]);
        CHECK(out[2 * hw + i] == 0.0);
        CHECK(out[3 * hw + i] == 0.0);  // indicator planes
        CHECK(out[4 * hw + i] == 1.0);
        CHECK(out[5 * hw + i] == 0.0);
    }
    const Tensor bare = apply_mask(s, mask, false);
    CHECK(bare.shape() == std::vector<int>{3, 32, 32});

    ScenarioMask all;
    all.available = {true, true, true};
    all.anchor = 0;
    CHECK_THROWS_AS(static_cast<void>(apply_mask(s, all, true)), std::invalid_argument);

    ScenarioMask wrong;
    wrong.available = {true, false};
    wrong.anchor = 1;
    CHECK_THROWS_AS(static_cast<void>(apply_mask(s, wrong, true)), std::invalid_argument);
}

TEST_CASE("split is hash-based with exact counts") {
    PhantomConfig cfg;
    cfg.num_subjects = 250;
    cfg.image_size = 16;
    cfg.num_modalities = 2;
    std::vector<std::string> ids;
    for (int i = 0; i < 250; ++i) ids.push_back("subject_" + std::to_string(i));
    const auto split = compute_split(ids);
    int train = 0, val = 0, test = 0;
    for (Split s : split) {
        train += s == Split::train ? 1 : 0;
        val += s == Split::val ? 1 : 0;
        test += s == Split::test ? 1 : 0;
    }
    CHECK(train == 200);
    CHECK(val == 25);
    CHECK(test == 25);
    CHECK(compute_split(ids) == split);  // deterministic
}

TEST_CASE("dataset round trip is lossless at 16-bit precision") {
    TempDir tmp("roundtrip");
    PhantomConfig cfg = small_config();
    const Dataset ds = generate_dataset(cfg);
    write_dataset(ds, tmp.path.string());
    const Dataset back = read_dataset(tmp.path.string());

    REQUIRE(back.subjects.size() == ds.subjects.size());
    CHECK(back.split == ds.split);
    double max_err = 0;
    for (size_t i = 0; i < ds.subjects.size(); ++i) {
        CHECK(back.subjects[i].subject_id == ds.subjects[i].subject_id);
        for (int m = 0; m < 3; ++m)
            for (std::int64_t j = 0; j < ds.subjects[i].channels[m].size(); ++j)
                max_err = std::max(max_err, std::abs(back.subjects[i].channels[m][j] -
                                                     ds.subjects[i].channels[m][j]));
    }
    CHECK(max_err <= std::pow(2.0, -16.0));

    // reading a second time from the files is bit-stable
    const Dataset again = read_dataset(tmp.path.string());
    bool stable = true;
    for (size_t i = 0; i < back.subjects.size(); ++i)
        for (int m = 0; m < 3; ++m)
            for (std::int64_t j = 0; j < back.subjects[i].channels[m].size(); ++j)
                stable = stable && again.subjects[i].channels[m][j] == back.subjects[i].channels[m][j];
    CHECK(stable);
}

TEST_CASE("missing modality file is reported with subject and modality") {
    TempDir tmp("missing");
    const Dataset ds = generate_dataset(small_config());
    write_dataset(ds, tmp.path.string());
    fs::remove(tmp.path / ds.subjects[2].subject_id / "mod1.png");
    CHECK_THROWS_WITH_AS(static_cast<void>(read_dataset(tmp.path.string())),
                         doctest::Contains(ds.subjects[2].subject_id.c_str()),
                         std::runtime_error);
    try {
        static_cast<void>(read_dataset(tmp.path.string()));
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("mod1") != std::string::npos);
    }
}

TEST_CASE("corrupt files and manifests are rejected") {
    TempDir tmp("corrupt");
    const Dataset ds = generate_dataset(small_config());
    write_dataset(ds, tmp.path.string());

    std::ofstream((tmp.path / ds.subjects[0].subject_id / "mod0.png").string(),
                  std::ios::trunc)
        << "not a png";
    CHECK_THROWS_AS(static_cast<void>(read_dataset(tmp.path.string())), std::runtime_error);

    std::ofstream((tmp.path / "manifest.json").string(), std::ios::trunc) << "{broken";
    CHECK_THROWS_AS(static_cast<void>(read_dataset(tmp.path.string())), std::runtime_error);

    CHECK_THROWS_AS(static_cast<void>(read_dataset((tmp.path / "nowhere").string())),
                    std::runtime_error);
}

TEST_CASE("manifest subject count matches files on disk") {
    TempDir tmp("counts");
    const Dataset ds = generate_dataset(small_config());
    write_dataset(ds, tmp.path.string());
    size_t pngs = 0;
    for (const auto& entry : fs::recursive_directory_iterator(tmp.path))
        if (entry.path().extension() == ".png") ++pngs;
    CHECK(pngs == ds.subjects.size() * 3);
    const Dataset back = read_dataset(tmp.path.string());
    CHECK(back.subjects.size() == pngs / 3);
}

TEST_CASE("whole dataset is a pure function of seed and config") {
    PhantomConfig cfg = small_config();
    const Dataset a = generate_dataset(cfg);
    const Dataset b = generate_dataset(cfg);
    bool equal = true;
    for (size_t i = 0; i < a.subjects.size(); ++i)
        for (int m = 0; m < 3; ++m)
            for (std::int64_t j = 0; j < a.subjects[i].channels[m].size(); ++j)
                equal = equal && a.subjects[i].channels[m][j] == b.subjects[i].channels[m][j];
    CHECK(equal);
    CHECK(config_hash(a.config) == config_hash(b.config));

    cfg.master_seed = 777;
    CHECK(config_hash(cfg) != config_hash(a.config));
}
