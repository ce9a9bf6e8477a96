#pragma once

#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "codebrain/quantizer.hpp"
#include "codebrain/rng.hpp"
#include "codebrain/synthdata.hpp"
#include "codebrain/tensor.hpp"

namespace codebrain::metrics {

// data range fixed to [0,1]; identical images return the 100 dB cap
double psnr(const Tensor& x, const Tensor& y);
// Gaussian window 11, sigma 1.5, K1=0.01, K2=0.03, valid-region mean
double ssim(const Tensor& x, const Tensor& y);
double mae(const Tensor& x, const Tensor& y);

// fraction of 4-neighbor site pairs whose full code vectors are equal
double code_map_coherence(const quantizer::CodeGrid& codes);
// same statistic after a uniform random spatial permutation of sites
double permuted_coherence(const quantizer::CodeGrid& codes, Rng& rng);

struct CellMetrics {
    double psnr = 0;
    double ssim = 0;
    double mae = 0;
};

struct ScenarioCell {
    std::vector<bool> available;
    int target = -1;
    int subjects = 0;
    CellMetrics imputation, reconstruction, zero_fill;
};

struct Aggregate {
    CellMetrics imputation, reconstruction, zero_fill;
    int pairs = 0;
    int samples = 0;
};

struct MetricsReport {
    int num_modalities = 0;
    int subject_count = 0;
    bool has_imputation = false;
    bool has_reconstruction = false;
    std::vector<ScenarioCell> cells;
    Aggregate one_to_one, many_to_one, all;

    nlohmann::json to_json() const;
    std::string to_csv() const;  // rows = scenarios, per-target metric columns
};

// Synthesizes the target channel of `stack` under `mask`; must only look at
// available channels (plus the true anchor for the reconstruction path).
using SynthFn =
    std::function<Tensor(const synthdata::ModalityStack&, const synthdata::ScenarioMask&)>;

// Runs every (scenario, target) cell over `subjects`; the zero-filled baseline
// is always included. Null functions skip the corresponding method.
MetricsReport evaluate(const std::vector<const synthdata::ModalityStack*>& subjects,
                       const std::vector<synthdata::ScenarioPair>& scenarios,
                       const SynthFn& impute_fn, const SynthFn& reconstruct_fn);

}  // namespace codebrain::metrics
