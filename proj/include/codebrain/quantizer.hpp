#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "codebrain/rng.hpp"
#include "codebrain/tensor.hpp"

namespace codebrain::quantizer {

struct QuantizerConfig {
    int levels = 5;         // L, odd, >= 3
    int code_channels = 4;  // d

    int half_levels() const { return levels / 2; }
    void validate() const;
};

// Output of bound(): every entry strictly inside (-L/2, +L/2).
struct BoundedLatent {
    Tensor values;  // (d,h,w)
    int levels = 0;
};

// Integer code map; entries in [-L/2, +L/2]. Channel count is d for a single
// modality and N*d for a full-modality stack.
struct CodeGrid {
    std::vector<std::int32_t> codes;  // row-major (c,y,x)
    int channels = 0;
    int height = 0;
    int width = 0;
    int levels = 0;

    std::int64_t size() const { return static_cast<std::int64_t>(codes.size()); }
    std::int32_t at(int c, int y, int x) const {
        return codes[(static_cast<std::int64_t>(c) * height + y) * width + x];
    }
    void validate() const;
    Tensor to_tensor() const;  // (C,h,w) real copy for decoding
};

// Threshold decomposition of a code grid: (L-1, C, h, w). Exact {0,1} for
// targets, probabilities for predictions.
struct OrdinalBits {
    Tensor bits;
    int levels = 0;
};

Real bound_scalar(Real f, int levels);
std::int32_t round_half_away(Real z);

BoundedLatent bound(const Tensor& features, const QuantizerConfig& cfg);
CodeGrid quantize(const BoundedLatent& z);

// code -> class label y = code + L/2 in {0,...,L-1}; bit j is 1 iff j < y.
OrdinalBits ordinal_encode(const CodeGrid& codes);

enum class DecodeRule {
    threshold,   // y = number of bits > 0.5
    expectation  // y = round(sum of bit probabilities)
};

CodeGrid ordinal_decode(const OrdinalBits& bits, DecodeRule rule = DecodeRule::threshold);

// Mean binary cross-entropy between sigmoid(logits) and the threshold
// decomposition of `target`. `logits` has shape (L-1, C, h, w).
double grading_loss(const Tensor& logits, const CodeGrid& target);

CodeGrid concat_channels(const std::vector<CodeGrid>& grids);
CodeGrid slice_channels(const CodeGrid& grid, int from, int count);

struct CodeSpaceSize {
    std::optional<std::uint64_t> exact;  // unset when L^d exceeds uint64
    double log10_size = 0;
};
CodeSpaceSize code_space_size(const QuantizerConfig& cfg);

nlohmann::json code_grid_to_json(const CodeGrid& grid);
CodeGrid code_grid_from_json(const nlohmann::json& j);

// One PNG per code channel; levels mapped onto a fixed discrete palette.
// Returns the written file paths ("<prefix>_c<k>.png").
std::vector<std::string> write_code_heatmaps(const CodeGrid& grid, const std::string& prefix);

// Per-channel histogram of level usage: result[c][y] counts label y in channel c.
std::vector<std::vector<std::int64_t>> level_histogram(const CodeGrid& grid);

}  // namespace codebrain::quantizer
