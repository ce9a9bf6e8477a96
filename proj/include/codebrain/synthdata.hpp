#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "codebrain/rng.hpp"
#include "codebrain/tensor.hpp"

namespace codebrain::synthdata {

// One subject: N co-registered single-channel images, intensities in [0,1].
struct ModalityStack {
    std::string subject_id;
    std::vector<std::string> modality_names;
    std::vector<Tensor> channels;  // each (H,W)

    int num_modalities() const { return static_cast<int>(channels.size()); }
    int height() const { return channels.empty() ? 0 : channels[0].dim(0); }
    int width() const { return channels.empty() ? 0 : channels[0].dim(1); }
    void validate() const;
};

// Availability pattern plus the designated anchor (a missing modality).
struct ScenarioMask {
    std::vector<bool> available;
    int anchor = -1;

    int num_available() const;
    int num_masked() const { return static_cast<int>(available.size()) - num_available(); }
    void validate(int num_modalities) const;
    std::string pattern() const;  // e.g. "011"
};

// Strictly monotone intensity map on [0,1]; decreasing when inverted.
struct ContrastTransfer {
    bool invert = false;
    double gamma = 1.0;
    double lift = 0.0;

    double apply(double x) const;
};

struct StyleRange {
    double lo = 1.0;
    double hi = 1.0;
};

struct PhantomConfig {
    int num_modalities = 3;
    int image_size = 64;
    int num_subjects = 250;
    int blob_count_min = 6;
    int blob_count_max = 14;
    std::vector<ContrastTransfer> transfers;  // per modality; defaults fill in when empty
    StyleRange gain{0.9, 1.1};
    StyleRange gamma{0.85, 1.2};
    StyleRange bias_amplitude{0.0, 0.06};
    double noise_sigma = 0.01;
    std::uint64_t master_seed = 1234;

    void validate() const;
    ContrastTransfer transfer_for(int modality) const;
    nlohmann::json to_json() const;
    static PhantomConfig from_json(const nlohmann::json& j);
};

std::vector<ContrastTransfer> default_transfers(int num_modalities);

// Deterministic phantom: all channels derive from one shared anatomy map
// through per-modality monotone transfers plus instance-specific gain/gamma/
// bias-field perturbations and additive noise, clamped to [0,1].
ModalityStack gen_subject(std::uint64_t seed, const PhantomConfig& cfg);

// k masked channels, k uniform on {1,...,N-1}, masked set uniform among
// size-k subsets, anchor uniform among the masked ones.
ScenarioMask sample_scenario(Rng& rng, int num_modalities);

struct ScenarioPair {
    std::vector<bool> available;
    int target = -1;
};

// every non-empty proper availability subset crossed with every missing
// modality, in canonical order (by available count, then bitmask, then target)
std::vector<ScenarioPair> enumerate_scenarios(int num_modalities);

ScenarioMask mask_for(const ScenarioPair& pair);

// N-channel tensor with unavailable channels zero-filled; when
// `with_indicators`, N binary availability planes are appended.
Tensor apply_mask(const ModalityStack& stack, const ScenarioMask& mask,
                  bool with_indicators = true);

enum class Split { train, val, test };
const char* split_name(Split s);

struct Dataset {
    PhantomConfig config;
    std::vector<ModalityStack> subjects;
    std::vector<Split> split;  // parallel to subjects

    std::vector<int> indices(Split s) const;
    void validate() const;
};

Dataset generate_dataset(const PhantomConfig& cfg);

// subject-id-hash split, 80/10/10 with exact counts
std::vector<Split> compute_split(const std::vector<std::string>& subject_ids);

std::uint64_t config_hash(const PhantomConfig& cfg);

// Layout: <root>/manifest.json, <root>/<subject_id>/<modality>.png (16-bit gray).
void write_dataset(const Dataset& ds, const std::string& root);
Dataset read_dataset(const std::string& root);

// gradient-magnitude edge map (central differences); used to verify that the
// modalities of one subject share structure
Tensor edge_map(const Tensor& img, double threshold);
double edge_iou(const Tensor& edges_a, const Tensor& edges_b);

}  // namespace codebrain::synthdata
