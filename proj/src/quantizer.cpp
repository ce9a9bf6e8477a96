#include "codebrain/quantizer.hpp"

#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "codebrain/png_io.hpp"

namespace codebrain::quantizer {

void QuantizerConfig::validate() const {
    if (levels < 3 || levels % 2 == 0)
        throw std::invalid_argument("quantizer: levels must be odd and >= 3, got " +
                                    std::to_string(levels));
    if (code_channels < 1)
        throw std::invalid_argument("quantizer: code_channels must be >= 1, got " +
                                    std::to_string(code_channels));
}

void CodeGrid::validate() const {
    if (channels < 1 || height < 1 || width < 1)
        throw std::invalid_argument("code grid: empty dimensions");
    if (levels < 3 || levels % 2 == 0)
        throw std::invalid_argument("code grid: invalid level count");
    if (size() != static_cast<std::int64_t>(channels) * height * width)
        throw std::invalid_argument("code grid: data size does not match dimensions");
    const int half = levels / 2;
    for (std::int32_t c : codes)
        if (c < -half || c > half)
            throw std::invalid_argument("code grid: entry " + std::to_string(c) +
                                        " outside level range +-" + std::to_string(half));
}

Tensor CodeGrid::to_tensor() const {
    Tensor t({channels, height, width});
    for (std::int64_t i = 0; i < size(); ++i) t[i] = static_cast<Real>(codes[static_cast<size_t>(i)]);
    return t;
}

Real bound_scalar(Real f, int levels) {
    return static_cast<Real>(levels / 2) * std::tanh(f);
}

std::int32_t round_half_away(Real z) {
    // ties away from zero, keeping the level set symmetric
    return static_cast<std::int32_t>(std::copysign(std::floor(std::abs(z) + 0.5), z));
}

BoundedLatent bound(const Tensor& features, const QuantizerConfig& cfg) {
    cfg.validate();
    if (!features.all_finite())
        throw std::invalid_argument("bound: non-finite entries in input features");
    BoundedLatent out;
    out.levels = cfg.levels;
    out.values = Tensor(features.shape());
    for (std::int64_t i = 0; i < features.size(); ++i)
        out.values[i] = bound_scalar(features[i], cfg.levels);
    return out;
}

CodeGrid quantize(const BoundedLatent& z) {
    if (z.values.ndim() != 3)
        throw std::invalid_argument("quantize: expected a (d,h,w) latent, got " +
                                    shape_str(z.values.shape()));
    CodeGrid grid;
    grid.channels = z.values.dim(0);
    grid.height = z.values.dim(1);
    grid.width = z.values.dim(2);
    grid.levels = z.levels;
    grid.codes.resize(static_cast<size_t>(z.values.size()));
    for (std::int64_t i = 0; i < z.values.size(); ++i)
        grid.codes[static_cast<size_t>(i)] = round_half_away(z.values[i]);
    return grid;
}

OrdinalBits ordinal_encode(const CodeGrid& grid) {
    grid.validate();
    const int half = grid.levels / 2;
    const int nbits = grid.levels - 1;
    OrdinalBits out;
    out.levels = grid.levels;
    out.bits = Tensor({nbits, grid.channels, grid.height, grid.width});
    const std::int64_t plane = grid.size();
    for (std::int64_t i = 0; i < plane; ++i) {
        const int y = grid.codes[static_cast<size_t>(i)] + half;  // class label in {0,...,L-1}
        for (int j = 0; j < nbits; ++j)
            out.bits[static_cast<std::int64_t>(j) * plane + i] = (j < y) ? Real(1) : Real(0);
    }
    return out;
}

CodeGrid ordinal_decode(const OrdinalBits& bits, DecodeRule rule) {
    if (bits.bits.ndim() != 4)
        throw std::invalid_argument("ordinal_decode: expected (L-1,C,h,w) bits, got " +
                                    shape_str(bits.bits.shape()));
    const int nbits = bits.bits.dim(0);
    if (bits.levels != nbits + 1)
        throw std::invalid_argument("ordinal_decode: bit count does not match level count");
    CodeGrid grid;
    grid.channels = bits.bits.dim(1);
    grid.height = bits.bits.dim(2);
    grid.width = bits.bits.dim(3);
    grid.levels = bits.levels;
    const int half = bits.levels / 2;
    const std::int64_t plane = static_cast<std::int64_t>(grid.channels) * grid.height * grid.width;
    grid.codes.resize(static_cast<size_t>(plane));
    for (std::int64_t i = 0; i < plane; ++i) {
        int y;
        if (rule == DecodeRule::threshold) {
            y = 0;
            for (int j = 0; j < nbits; ++j)
                if (bits.bits[static_cast<std::int64_t>(j) * plane + i] > Real(0.5)) ++y;
        } else {
            Real s = 0;
            for (int j = 0; j < nbits; ++j) s += bits.bits[static_cast<std::int64_t>(j) * plane + i];
            y = static_cast<int>(round_half_away(s));
            y = std::max(0, std::min(nbits, y));
        }
        grid.codes[static_cast<size_t>(i)] = y - half;
    }
    return grid;
}

double grading_loss(const Tensor& logits, const CodeGrid& target) {
    OrdinalBits tb = ordinal_encode(target);
    require_same_shape(logits, tb.bits, "grading_loss");
    double acc = 0;
    for (std::int64_t i = 0; i < logits.size(); ++i) {
        const double z = logits[i];
        const double b = tb.bits[i];
        // softplus(z) - b*z, numerically stable BCE-with-logits
        const double sp = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
        acc += sp - b * z;
    }
    return acc / static_cast<double>(logits.size());
}

CodeGrid concat_channels(const std::vector<CodeGrid>& grids) {
    if (grids.empty()) throw std::invalid_argument("concat_channels: empty grid list");
    CodeGrid out;
    out.height = grids[0].height;
    out.width = grids[0].width;
    out.levels = grids[0].levels;
    for (const CodeGrid& g : grids) {
        if (g.height != out.height || g.width != out.width || g.levels != out.levels)
            throw std::invalid_argument("concat_channels: incompatible grids");
        out.channels += g.channels;
        out.codes.insert(out.codes.end(), g.codes.begin(), g.codes.end());
    }
    return out;
}

CodeGrid slice_channels(const CodeGrid& grid, int from, int count) {
    if (from < 0 || count < 1 || from + count > grid.channels)
        throw std::invalid_argument("slice_channels: range out of bounds");
    CodeGrid out;
    out.channels = count;
    out.height = grid.height;
    out.width = grid.width;
    out.levels = grid.levels;
    const std::int64_t hw = static_cast<std::int64_t>(grid.height) * grid.width;
    out.codes.assign(grid.codes.begin() + from * hw, grid.codes.begin() + (from + count) * hw);
    return out;
}

CodeSpaceSize code_space_size(const QuantizerConfig& cfg) {
    cfg.validate();
    CodeSpaceSize out;
    out.log10_size = static_cast<double>(cfg.code_channels) * std::log10(static_cast<double>(cfg.levels));
    const std::uint64_t base = static_cast<std::uint64_t>(cfg.levels);
    std::uint64_t v = 1;
    bool overflow = false;
    for (int i = 0; i < cfg.code_channels; ++i) {
        if (v > UINT64_MAX / base) {
            overflow = true;
            break;
        }
        v *= base;
    }
    if (!overflow) out.exact = v;
    return out;
}

nlohmann::json code_grid_to_json(const CodeGrid& grid) {
    grid.validate();
    return nlohmann::json{{"levels", grid.levels},
                          {"shape", {grid.channels, grid.height, grid.width}},
                          {"codes", grid.codes}};
}

CodeGrid code_grid_from_json(const nlohmann::json& j) {
    CodeGrid grid;
    grid.levels = j.at("levels").get<int>();
    const auto& shape = j.at("shape");
    if (shape.size() != 3) throw std::invalid_argument("code grid json: shape must have 3 entries");
    grid.channels = shape[0].get<int>();
    grid.height = shape[1].get<int>();
    grid.width = shape[2].get<int>();
    grid.codes = j.at("codes").get<std::vector<std::int32_t>>();
    grid.validate();
    return grid;
}

namespace {

// fixed palette for up to 9 levels, low to high
constexpr std::uint8_t kPalette[][3] = {
    {40, 12, 84},   {70, 50, 127},  {85, 91, 165},  {96, 131, 186}, {113, 170, 193},
    {146, 204, 190}, {198, 229, 181}, {243, 240, 180}, {254, 252, 210},
};

}  // namespace

std::vector<std::string> write_code_heatmaps(const CodeGrid& grid, const std::string& prefix) {
    grid.validate();
    if (grid.levels > 9)
        throw std::invalid_argument("write_code_heatmaps: palette supports at most 9 levels");
    const int half = grid.levels / 2;
    std::vector<std::string> paths;
    const std::int64_t hw = static_cast<std::int64_t>(grid.height) * grid.width;
    for (int c = 0; c < grid.channels; ++c) {
        std::vector<std::uint8_t> rgb(static_cast<size_t>(hw) * 3);
        for (std::int64_t i = 0; i < hw; ++i) {
            // spread levels across the palette ends
            const int y = grid.codes[static_cast<size_t>(c * hw + i)] + half;
            const int p = grid.levels == 1 ? 0 : y * 8 / (grid.levels - 1);
            rgb[static_cast<size_t>(i) * 3] = kPalette[p][0];
            rgb[static_cast<size_t>(i) * 3 + 1] = kPalette[p][1];
            rgb[static_cast<size_t>(i) * 3 + 2] = kPalette[p][2];
        }
        std::string path = prefix + "_c" + std::to_string(c) + ".png";
        io::write_png_rgb8(path, rgb, grid.height, grid.width);
        paths.push_back(std::move(path));
    }
    return paths;
}

std::vector<std::vector<std::int64_t>> level_histogram(const CodeGrid& grid) {
    grid.validate();
    const int half = grid.levels / 2;
    std::vector<std::vector<std::int64_t>> hist(
        static_cast<size_t>(grid.channels), std::vector<std::int64_t>(static_cast<size_t>(grid.levels), 0));
    const std::int64_t hw = static_cast<std::int64_t>(grid.height) * grid.width;
    for (int c = 0; c < grid.channels; ++c)
        for (std::int64_t i = 0; i < hw; ++i)
            ++hist[static_cast<size_t>(c)][static_cast<size_t>(grid.codes[static_cast<size_t>(c * hw + i)] + half)];
    return hist;
}

}  // namespace codebrain::quantizer
