#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "codebrain/graph.hpp"
#include "codebrain/rng.hpp"
#include "codebrain/tensor.hpp"

namespace codebrain::nets {

struct NetConfig {
    int num_modalities = 3;   // N
    int image_size = 64;
    int code_channels = 4;    // d
    int levels = 5;           // L
    int common_channels = 32; // shared-feature channels
    int base_width = 16;
    int enc_blocks = 1;       // residual blocks per encoder scale
    int dec_blocks = 1;
    bool mask_indicators = true;  // append availability-indicator channels to masked stacks

    int latent_size() const { return image_size / 8; }
    int source_channels() const { return num_modalities * (mask_indicators ? 2 : 1); }
    void validate() const;

    nlohmann::json to_json() const;
    static NetConfig from_json(const nlohmann::json& j);
    bool operator==(const NetConfig&) const = default;
};

// Ordered named parameter tensors. Order is the checkpoint payload order.
class ParamStore {
public:
    Tensor& create(const std::string& name, std::vector<int> shape);
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool has(const std::string& name) const { return tensors_.count(name) > 0; }
    const std::vector<std::string>& names() const { return order_; }
    const std::string* find_name(const Tensor* t) const;

    std::int64_t total_size() const;
    bool all_finite() const;

private:
    std::vector<std::string> order_;
    std::map<std::string, Tensor> tensors_;
};

// Head emitted by the code-prediction encoder.
enum class PriorHead {
    grading,    // (L-1) ordinal logits per code scalar
    classes,    // L softmax logits per code scalar
    continuous  // one bounded real value per code scalar
};

int prior_head_channels(const NetConfig& cfg, PriorHead head);

// Parameter groups share one store; names are prefixed e_post.*, e_s.*, d_a.*, disc.*
void init_stage1(const NetConfig& cfg, ParamStore& params, Rng& rng);
void init_stage2(const NetConfig& cfg, PriorHead head, ParamStore& params, Rng& rng);

// Forward graphs. `frozen` fetches weights as constants so no gradient is
// computed for (or through to) them.
Var forward_posterior(Graph& g, const NetConfig& cfg, ParamStore& params, Var image,
                      bool frozen = false);
Var forward_source(Graph& g, const NetConfig& cfg, ParamStore& params, Var masked,
                   bool frozen = false);
Var forward_decoder(Graph& g, const NetConfig& cfg, ParamStore& params, Var code, Var common,
                    bool frozen = false);
Var forward_discriminator(Graph& g, const NetConfig& cfg, ParamStore& params, Var image,
                          bool frozen = false);
Var forward_prior(Graph& g, const NetConfig& cfg, PriorHead head, ParamStore& params, Var masked,
                  bool frozen = false);

// Convenience single-image wrappers (no gradient), used by inference and tools.
Tensor run_posterior(const NetConfig& cfg, ParamStore& params, const Tensor& image);
Tensor run_source(const NetConfig& cfg, ParamStore& params, const Tensor& masked);
Tensor run_decoder(const NetConfig& cfg, ParamStore& params, const Tensor& code,
                   const Tensor& common);
Tensor run_prior(const NetConfig& cfg, PriorHead head, ParamStore& params, const Tensor& masked);

// ---- gradient verification --------------------------------------------------

struct GradCheckOptions {
    int num_coords = 32;
    double step = 1e-4;        // scaled by max(1,|theta|) per coordinate
    double min_fd = 1e-7;      // coordinates with smaller finite differences are redrawn
    std::uint64_t seed = 1234;
};

// Evaluates a scalar loss of the parameters; when `grads` is non-null the
// analytic gradients must be filled in (one tensor per parameter name).
using LossFn = std::function<double(ParamStore&, std::map<std::string, Tensor>* grads)>;

// Compares analytic gradients against central finite differences at randomly
// sampled parameter coordinates; returns the worst relative error.
// Throws if the loss is not deterministic under repeated evaluation.
double grad_check_max_rel_error(const LossFn& loss, ParamStore& params,
                                const std::vector<std::string>& param_names,
                                const GradCheckOptions& opt = {});

// Runs `loss` once and returns analytic gradients keyed by parameter name.
std::map<std::string, Tensor> collect_grads(Graph& g, const ParamStore& params);

}  // namespace codebrain::nets
