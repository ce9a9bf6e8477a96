#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "codebrain/tensor.hpp"

namespace codebrain::nets {

enum class Activation { none, leaky_relu, tanh, sigmoid };

Real activation_forward(Activation act, Real x);
// derivative expressed through the activation output
Real activation_deriv(Activation act, Real y);

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape. A graph is built per step, `backward` walks the nodes in
// reverse creation order. Leaves created through `param` are bound to external
// tensors so the optimizer can collect their gradients afterwards.
class Graph {
public:
    struct Node {
        Tensor value;
        Tensor grad;
        std::vector<int> parents;
        std::function<void(Graph&, int)> backward;
        Tensor* bound = nullptr;
        bool requires_grad = false;
    };

    Var input(Tensor value);            // constant, no gradient
    Var constant(const Tensor& value) { return input(value); }
    Var param(Tensor& t);               // trainable leaf; repeated calls share one node
    Var frozen(Tensor& t);              // leaf without gradient (shared weights held fixed)

    Var emplace(Tensor value, std::vector<int> parents,
                std::function<void(Graph&, int)> backward);

    const Tensor& value(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }
    Tensor& value(Var v) { return nodes_[static_cast<size_t>(v.id)].value; }
    const Tensor& grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].grad; }
    bool requires_grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].requires_grad; }
    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }

    // zero-initialized gradient buffer, allocated on first use
    Tensor& grad_buffer(int id);

    void backward(Var loss);

    // (parameter tensor, accumulated gradient) pairs for every `param` leaf
    std::vector<std::pair<Tensor*, const Tensor*>> param_grads() const;

    size_t num_nodes() const { return nodes_.size(); }

private:
    std::vector<Node> nodes_;
    std::vector<std::pair<Tensor*, int>> param_nodes_;
};

// ---- operations ------------------------------------------------------------

// 2-D convolution over (B,C,H,W) with fused activation.
// weight (Co,Ci,k,k), bias (Co).
Var conv2d(Graph& g, Var x, Var weight, Var bias, int stride, int pad,
           Activation act = Activation::none);

Var add(Graph& g, Var a, Var b);
// a + wb * b, elementwise; shortcut for loss composition
Var add_weighted(Graph& g, Var a, Var b, Real wb);
Var activate(Graph& g, Var x, Activation act);
Var scale(Graph& g, Var x, Real s);
Var concat_channels(Graph& g, Var a, Var b);
Var slice_channels(Graph& g, Var x, int from, int count);
Var upsample_nearest2(Graph& g, Var x);

// (L/2)*tanh(x) — bounds latent features strictly inside the level range
Var bound_latent(Graph& g, Var x, int levels);
// round-half-away-from-zero forward, identity backward (straight-through)
Var round_ste(Graph& g, Var x);

// ---- losses (scalar outputs, shape {1}) ------------------------------------

// 10*log10(max(mse, eps)) — monotone in the reconstruction error
Var psnr_loss_op(Graph& g, Var pred, const Tensor& target, Real eps = 1e-8);
Var mse_op(Graph& g, Var pred, const Tensor& target);
// mean((x - c)^2), the least-squares adversarial building block
Var mean_sq_to_const(Graph& g, Var x, Real c);
// mean binary cross-entropy with logits against fixed target bits
Var bce_logits_op(Graph& g, Var logits, const Tensor& target_bits);
// mean multi-class cross-entropy; logits (B, L*C, h, w) class-major,
// labels flat (B*C*h*w) in {0,...,L-1}
Var softmax_ce_op(Graph& g, Var logits, const std::vector<std::int32_t>& labels, int num_classes);

int thread_count();

}  // namespace codebrain::nets
