#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "codebrain/nets.hpp"
#include "codebrain/quantizer.hpp"
#include "codebrain/synthdata.hpp"

namespace codebrain::training {

enum class QuantMode { discrete, continuous };
enum class Stage2Loss { grading, cls };

const char* quant_mode_name(QuantMode m);
const char* stage2_loss_name(Stage2Loss l);

struct TrainConfig {
    int stage = 1;
    int epochs = 40;
    int batch_size = 16;
    double lr_init = 1e-3;
    double lr_min = 1e-5;
    double gan_weight = 1.0;  // weight of the adversarial term
    std::uint64_t seed = 1234;
    QuantMode quant_mode = QuantMode::discrete;
    Stage2Loss stage2_loss = Stage2Loss::grading;
    std::string dataset_path;
    int checkpoint_every = 10;  // epochs; 0 disables periodic checkpoints

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

nets::PriorHead prior_head(const TrainConfig& cfg);

// cosine decay from lr_init at step 0 to lr_min at total_steps
double lr_schedule(std::int64_t step, std::int64_t total_steps, const TrainConfig& cfg);

struct TrainReport {
    int stage = 1;
    std::vector<double> loss_total;
    std::vector<double> loss_psnr;  // stage 1
    std::vector<double> loss_gan;   // stage 1, empty when the GAN term is off
    std::vector<double> loss_pred;  // stage 2
    std::vector<double> val_metric; // stage 1: recon PSNR; stage 2: code accuracy
    double wall_time_sec = 0;
    std::string final_checkpoint;

    nlohmann::json to_json() const;
    std::string to_csv() const;
};

struct AdamState {
    std::map<std::string, Tensor> m, v;
    std::int64_t t = 0;
};

// one update on `names`; gradients keyed by parameter tensor address
void adam_step(nets::ParamStore& params, const std::vector<std::string>& names,
               const std::map<const Tensor*, const Tensor*>& grads, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

// Everything needed to resume or run inference.
struct TrainerState {
    int stage = 1;
    nets::NetConfig net;
    TrainConfig train;
    int epochs_done = 0;
    std::int64_t global_step = 0;
    std::string rng_state;
    nets::ParamStore params;
    AdamState adam_gen;   // stage 2 keeps its optimizer here
    AdamState adam_disc;  // stage 1 only
};

// Binary container: magic, version, JSON header (configs, tensor manifest,
// step, RNG state), then raw little-endian tensor payload in header order.
void save_checkpoint(const std::string& path, const TrainerState& state);
TrainerState load_checkpoint(const std::string& path);

std::uint64_t state_config_hash(const TrainerState& state);

struct StageResult {
    TrainerState state;
    TrainReport report;
};

// Reconstruction stage: posterior codes + common features -> anchor image,
// PSNR loss plus an optional least-squares patch-adversarial term.
// `out_dir` may be empty to skip checkpoint files.
StageResult train_stage1(const synthdata::Dataset& ds, const nets::NetConfig& net,
                         const TrainConfig& cfg, const std::string& out_dir,
                         const TrainerState* resume = nullptr);

// Code-prediction stage against frozen stage-1 targets.
StageResult train_stage2(const synthdata::Dataset& ds, const TrainerState& stage1,
                         const TrainConfig& cfg, const std::string& out_dir,
                         const TrainerState* resume = nullptr);

// Fills every missing modality from the predicted codes; available modalities
// pass through bitwise.
synthdata::ModalityStack impute(const synthdata::ModalityStack& stack,
                                const synthdata::ScenarioMask& mask, const TrainerState& stage1,
                                const TrainerState& stage2,
                                quantizer::DecodeRule rule = quantizer::DecodeRule::threshold);

// Oracle-code path: the anchor's own posterior code plus common features from
// the masked stack (the reconstruction task stage 1 was trained on).
Tensor reconstruct_channel(const synthdata::ModalityStack& stack,
                           const synthdata::ScenarioMask& mask, const TrainerState& stage1);

// Predicted codes for one subject under a mask, stacked over modalities
// (channels = N*d). Continuous mode yields real-valued codes.
Tensor predict_codes(const synthdata::ModalityStack& stack, const synthdata::ScenarioMask& mask,
                     const TrainerState& stage1, const TrainerState& stage2,
                     quantizer::DecodeRule rule = quantizer::DecodeRule::threshold);

// Posterior codes of every modality (frozen stage 1), stacked (channels = N*d).
Tensor posterior_codes(const synthdata::ModalityStack& stack, const TrainerState& stage1);

}  // namespace codebrain::training
