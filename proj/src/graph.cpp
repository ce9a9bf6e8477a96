#include "codebrain/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

namespace codebrain::nets {

namespace {

using MatMap = Eigen::Map<Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

constexpr Real kLeakySlope = 0.2;

int conv_out_dim(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

// gather one item's receptive fields: col is (Ci*k*k) x (Ho*Wo)
void im2col(const Real* x, int ci, int h, int w, int k, int stride, int pad, int ho, int wo,
            Real* col) {
    const std::int64_t owo = static_cast<std::int64_t>(ho) * wo;
    for (int c = 0; c < ci; ++c) {
        const Real* xc = x + static_cast<std::int64_t>(c) * h * w;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                Real* dst = col + ((static_cast<std::int64_t>(c) * k + ky) * k + kx) * owo;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) {
                        std::fill(dst + static_cast<std::int64_t>(oy) * wo,
                                  dst + static_cast<std::int64_t>(oy + 1) * wo, Real(0));
                        continue;
                    }
                    const Real* src = xc + static_cast<std::int64_t>(iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        dst[static_cast<std::int64_t>(oy) * wo + ox] =
                            (ix >= 0 && ix < w) ? src[ix] : Real(0);
                    }
                }
            }
        }
    }
}

void col2im_accum(const Real* col, int ci, int h, int w, int k, int stride, int pad, int ho,
                  int wo, Real* x) {
    const std::int64_t owo = static_cast<std::int64_t>(ho) * wo;
    for (int c = 0; c < ci; ++c) {
        Real* xc = x + static_cast<std::int64_t>(c) * h * w;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const Real* src = col + ((static_cast<std::int64_t>(c) * k + ky) * k + kx) * owo;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    Real* dst = xc + static_cast<std::int64_t>(iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) dst[ix] += src[static_cast<std::int64_t>(oy) * wo + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Real activation_forward(Activation act, Real x) {
    switch (act) {
        case Activation::none: return x;
        case Activation::leaky_relu: return x > 0 ? x : kLeakySlope * x;
        case Activation::tanh: return std::tanh(x);
        case Activation::sigmoid: return Real(1) / (Real(1) + std::exp(-x));
    }
    return x;
}

Real activation_deriv(Activation act, Real y) {
    switch (act) {
        case Activation::none: return Real(1);
        case Activation::leaky_relu: return y > 0 ? Real(1) : kLeakySlope;
        case Activation::tanh: return Real(1) - y * y;
        case Activation::sigmoid: return y * (Real(1) - y);
    }
    return Real(1);
}

int thread_count() {
#ifdef _OPENMP
    int n = omp_get_max_threads();
    if (const char* cap = std::getenv("CODEBRAIN_THREADS")) {
        const int c = std::atoi(cap);
        if (c > 0) n = std::min(n, c);
    }
    return std::max(1, n);
#else
    return 1;
#endif
}

Var Graph::input(Tensor value) {
    nodes_.push_back(Node{std::move(value), Tensor(), {}, nullptr, nullptr, false});
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::param(Tensor& t) {
    for (const auto& [ptr, id] : param_nodes_)
        if (ptr == &t) return Var{id};
    nodes_.push_back(Node{t, Tensor(), {}, nullptr, &t, true});
    const int id = static_cast<int>(nodes_.size()) - 1;
    param_nodes_.emplace_back(&t, id);
    return Var{id};
}

Var Graph::frozen(Tensor& t) {
    nodes_.push_back(Node{t, Tensor(), {}, nullptr, nullptr, false});
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::emplace(Tensor value, std::vector<int> parents,
                   std::function<void(Graph&, int)> backward) {
    bool req = false;
    for (int p : parents) req = req || nodes_[static_cast<size_t>(p)].requires_grad;
    nodes_.push_back(Node{std::move(value), Tensor(), std::move(parents), std::move(backward),
                          nullptr, req});
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Tensor& Graph::grad_buffer(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
}

void Graph::backward(Var loss) {
    if (!loss.valid()) throw std::invalid_argument("backward: invalid loss var");
    Node& ln = nodes_[static_cast<size_t>(loss.id)];
    if (ln.value.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
    grad_buffer(loss.id)[0] = Real(1);
    for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
        n.backward(*this, i);
    }
}

std::vector<std::pair<Tensor*, const Tensor*>> Graph::param_grads() const {
    std::vector<std::pair<Tensor*, const Tensor*>> out;
    out.reserve(param_nodes_.size());
    for (const auto& [ptr, id] : param_nodes_) {
        const Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.grad.empty()) out.emplace_back(ptr, &n.grad);
    }
    return out;
}

Var conv2d(Graph& g, Var x, Var weight, Var bias, int stride, int pad, Activation act) {
    const Tensor& xv = g.value(x);
    const Tensor& wv = g.value(weight);
    const Tensor& bv = g.value(bias);
    if (xv.ndim() != 4) throw std::invalid_argument("conv2d: input must be (B,C,H,W)");
    if (wv.ndim() != 4) throw std::invalid_argument("conv2d: weight must be (Co,Ci,k,k)");
    const int batch = xv.dim(0), ci = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    const int co = wv.dim(0), k = wv.dim(2);
    if (wv.dim(1) != ci)
        throw std::invalid_argument("conv2d: input has " + std::to_string(ci) +
                                    " channels, weight expects " + std::to_string(wv.dim(1)));
    if (wv.dim(3) != k) throw std::invalid_argument("conv2d: non-square kernel");
    if (bv.size() != co) throw std::invalid_argument("conv2d: bias size mismatch");
    const int ho = conv_out_dim(h, k, stride, pad);
    const int wo = conv_out_dim(w, k, stride, pad);
    if (ho <= 0 || wo <= 0) throw std::invalid_argument("conv2d: output would be empty");

    const std::int64_t colsz = static_cast<std::int64_t>(ci) * k * k;
    const std::int64_t owo = static_cast<std::int64_t>(ho) * wo;
    Tensor out({batch, co, ho, wo});

    {
        const Real* xp = xv.data();
        const Real* wp = wv.data();
        const Real* bp = bv.data();
        Real* op = out.data();
#pragma omp parallel for schedule(static)
        for (int b = 0; b < batch; ++b) {
            std::vector<Real> col(static_cast<size_t>(colsz * owo));
            im2col(xp + static_cast<std::int64_t>(b) * ci * h * w, ci, h, w, k, stride, pad, ho, wo,
                   col.data());
            ConstMatMap wm(wp, co, colsz);
            ConstMatMap cm(col.data(), colsz, owo);
            MatMap om(op + static_cast<std::int64_t>(b) * co * owo, co, owo);
            om.noalias() = wm * cm;
            for (int c = 0; c < co; ++c) {
                Real* row = op + (static_cast<std::int64_t>(b) * co + c) * owo;
                const Real bias_c = bp[c];
                for (std::int64_t i = 0; i < owo; ++i)
                    row[i] = activation_forward(act, row[i] + bias_c);
            }
        }
    }

    auto bwd = [x, weight, bias, stride, pad, act, batch, ci, h, w, co, k, ho, wo, colsz,
                owo](Graph& gg, int self) {
        const Tensor& y = gg.node(self).value;
        const Tensor& gy = gg.node(self).grad;
        // pre-activation gradient
        Tensor dpre(y.shape());
        for (std::int64_t i = 0; i < y.size(); ++i)
            dpre[i] = gy[i] * activation_deriv(act, y[i]);

        const bool need_dx = gg.requires_grad(x);
        const bool need_dw = gg.requires_grad(weight);
        const Real* xp = gg.value(x).data();
        const Real* wp = gg.value(weight).data();

        std::vector<Tensor> dw_part;
        if (need_dw) dw_part.assign(static_cast<size_t>(batch), Tensor({co, static_cast<int>(colsz)}));
        Tensor* dxt = need_dx ? &gg.grad_buffer(x.id) : nullptr;

#pragma omp parallel for schedule(static)
        for (int b = 0; b < batch; ++b) {
            std::vector<Real> col(static_cast<size_t>(colsz * owo));
            im2col(xp + static_cast<std::int64_t>(b) * ci * h * w, ci, h, w, k, stride, pad, ho, wo,
                   col.data());
            ConstMatMap dym(dpre.data() + static_cast<std::int64_t>(b) * co * owo, co, owo);
            if (need_dw) {
                ConstMatMap cm(col.data(), colsz, owo);
                MatMap dwm(dw_part[static_cast<size_t>(b)].data(), co, colsz);
                dwm.noalias() = dym * cm.transpose();
            }
            if (need_dx) {
                std::vector<Real> dcol(static_cast<size_t>(colsz * owo));
                ConstMatMap wm(wp, co, colsz);
                MatMap dcm(dcol.data(), colsz, owo);
                dcm.noalias() = wm.transpose() * dym;
                col2im_accum(dcol.data(), ci, h, w, k, stride, pad, ho, wo,
                             dxt->data() + static_cast<std::int64_t>(b) * ci * h * w);
            }
        }

        if (need_dw) {
            Tensor& dw = gg.grad_buffer(weight.id);
            for (int b = 0; b < batch; ++b) {  // fixed order, thread-count independent
                const Tensor& part = dw_part[static_cast<size_t>(b)];
                for (std::int64_t i = 0; i < dw.size(); ++i) dw[i] += part[i];
            }
        }
        if (gg.requires_grad(bias)) {
            Tensor& db = gg.grad_buffer(bias.id);
            for (int b = 0; b < batch; ++b)
                for (int c = 0; c < co; ++c) {
                    const Real* row = dpre.data() + (static_cast<std::int64_t>(b) * co + c) * owo;
                    Real s = 0;
                    for (std::int64_t i = 0; i < owo; ++i) s += row[i];
                    db[c] += s;
                }
        }
    };
    return g.emplace(std::move(out), {x.id, weight.id, bias.id}, std::move(bwd));
}

Var add(Graph& g, Var a, Var b) {
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    require_same_shape(av, bv, "add");
    Tensor out(av.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    auto bwd = [a, b](Graph& gg, int self) {
        const Tensor& gy = gg.node(self).grad;
        for (Var v : {a, b}) {
            if (!gg.requires_grad(v)) continue;
            Tensor& gv = gg.grad_buffer(v.id);
            for (std::int64_t i = 0; i < gy.size(); ++i) gv[i] += gy[i];
        }
    };
    return g.emplace(std::move(out), {a.id, b.id}, std::move(bwd));
}

Var add_weighted(Graph& g, Var a, Var b, Real wb) {
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    require_same_shape(av, bv, "add_weighted");
    Tensor out(av.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = av[i] + wb * bv[i];
    auto bwd = [a, b, wb](Graph& gg, int self) {
        const Tensor& gy = gg.node(self).grad;
        if (gg.requires_grad(a)) {
            Tensor& ga = gg.grad_buffer(a.id);
            for (std::int64_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
        }
        if (gg.requires_grad(b)) {
            Tensor& gb = gg.grad_buffer(b.id);
            for (std::int64_t i = 0; i < gy.size(); ++i) gb[i] += wb * gy[i];
        }
    };
    return g.emplace(std::move(out), {a.id, b.id}, std::move(bwd));
}

Var activate(Graph& g, Var x, Activation act) {
    const Tensor& xv = g.value(x);
    Tensor out(xv.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = activation_forward(act, xv[i]);
    auto bwd = [x, act](Graph& gg, int self) {
        if (!gg.requires_grad(x)) return;
        const Tensor& y = gg.node(self).value;
        const Tensor& gy = gg.node(self).grad;
        Tensor& gx = gg.grad_buffer(x.id);
        for (std::int64_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * activation_deriv(act, y[i]);
    };
    return g.emplace(std::move(out), {x.id}, std::move(bwd));
}

Var scale(Graph& g, Var x, Real s) {
    const Tensor& xv = g.value(x);
    Tensor out(xv.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = s * xv[i];
    auto bwd = [x, s](Graph& gg, int self) {
        if (!gg.requires_grad(x)) return;
        const Tensor& gy = gg.node(self).grad;
        Tensor& gx = gg.grad_buffer(x.id);
        for (std::int64_t i = 0; i < gy.size(); ++i) gx[i] += s * gy[i];
    };
    return g.emplace(std::move(out), {x.id}, std::move(bwd));
}

Var concat_channels(Graph& g, Var a, Var b) {
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    if (av.ndim() != 4 || bv.ndim() != 4)
        throw std::invalid_argument("concat_channels: expected (B,C,H,W) inputs");
    if (av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) || av.dim(3) != bv.dim(3))
        throw std::invalid_argument("concat_channels: spatial/batch dims differ: " +
                                    shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    const int batch = av.dim(0), ca = av.dim(1), cb = bv.dim(1), h = av.dim(2), w = av.dim(3);
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    Tensor out({batch, ca + cb, h, w});
    for (int bt = 0; bt < batch; ++bt) {
        std::copy(av.data() + static_cast<std::int64_t>(bt) * ca * hw,
                  av.data() + static_cast<std::int64_t>(bt + 1) * ca * hw,
                  out.data() + static_cast<std::int64_t>(bt) * (ca + cb) * hw);
        std::copy(bv.data() + static_cast<std::int64_t>(bt) * cb * hw,
                  bv.data() + static_cast<std::int64_t>(bt + 1) * cb * hw,
                  out.data() + static_cast<std::int64_t>(bt) * (ca + cb) * hw + ca * hw);
    }
    auto bwd = [a, b, batch, ca, cb, hw](Graph& gg, int self) {
        const Tensor& gy = gg.node(self).grad;
        if (gg.requires_grad(a)) {
            Tensor& ga = gg.grad_buffer(a.id);
            for (int bt = 0; bt < batch; ++bt)
                for (std::int64_t i = 0; i < ca * hw; ++i)
                    ga[static_cast<std::int64_t>(bt) * ca * hw + i] +=
                        gy[static_cast<std::int64_t>(bt) * (ca + cb) * hw + i];
        }
        if (gg.requires_grad(b)) {
            Tensor& gb = gg.grad_buffer(b.id);
            for (int bt = 0; bt < batch; ++bt)
                for (std::int64_t i = 0; i < cb * hw; ++i)
                    gb[static_cast<std::int64_t>(bt) * cb * hw + i] +=
                        gy[static_cast<std::int64_t>(bt) * (ca + cb) * hw + ca * hw + i];
        }
    };
    return g.emplace(std::move(out), {a.id, b.id}, std::move(bwd));
}

Var slice_channels(Graph& g, Var x, int from, int count) {
    const Tensor& xv = g.value(x);
    if (xv.ndim() != 4) throw std::invalid_argument("slice_channels: expected (B,C,H,W)");
    const int batch = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    if (from < 0 || count < 1 || from + count > c)
        throw std::invalid_argument("slice_channels: range out of bounds");
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    Tensor out({batch, count, h, w});
    for (int bt = 0; bt < batch; ++bt)
        std::copy(xv.data() + (static_cast<std::int64_t>(bt) * c + from) * hw,
                  xv.data() + (static_cast<std::int64_t>(bt) * c + from + count) * hw,
                  out.data() + static_cast<std::int64_t>(bt) * count * hw);
    auto bwd = [x, from, count, batch, c, hw](Graph& gg, int self) {
        if (!gg.requires_grad(x)) return;
        const Tensor& gy = gg.node(self).grad;
        Tensor& gx = gg.grad_buffer(x.id);
        for (int bt = 0; bt < batch; ++bt)
            for (std::int64_t i = 0; i < count * hw; ++i)
                gx[(static_cast<std::int64_t>(bt) * c + from) * hw + i] +=
                    gy[static_cast<std::int64_t>(bt) * count * hw + i];
    };
    return g.emplace(std::move(out), {x.id}, std::move(bwd));
}

Var upsample_nearest2(Graph& g, Var x) {
    const Tensor& xv = g.value(x);
    if (xv.ndim() != 4) throw std::invalid_argument("upsample_nearest2: expected (B,C,H,W)");
    const int batch = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    Tensor out({batch, c, 2 * h, 2 * w});
    for (int bc = 0; bc < batch * c; ++bc) {
        const Real* src = xv.data() + static_cast<std::int64_t>(bc) * h * w;
        Real* dst = out.data() + static_cast<std::int64_t>(bc) * 4 * h * w;
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                const Real v = src[static_cast<std::int64_t>(y) * w + xx];
                Real* d = dst + (static_cast<std::int64_t>(2 * y) * 2 * w + 2 * xx);
                d[0] = v;
                d[1] = v;
                d[2 * w] = v;
                d[2 * w + 1] = v;
            }
    }
    auto bwd = [x, batch, c, h, w](Graph& gg, int self) {
        if (!gg.requires_grad(x)) return;
        const Tensor& gy = gg.node(self).grad;
        Tensor& gx = gg.grad_buffer(x.id);
        for (int bc = 0; bc < batch * c; ++bc) {
            const Real* src = gy.data() + static_cast<std::int64_t>(bc) * 4 * h * w;
            Real* dst = gx.data() + static_cast<std::int64_t>(bc) * h * w;
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    const Real* s = src + (static_cast<std::int64_t>(2 * y) * 2 * w + 2 * xx);
                    dst[static_cast<std::int64_t>(y) * w + xx] += s[0] + s[1] + s[2 * w] + s[2 * w + 1];
                }
        }
    };
    return g.emplace(std::move(out), {x.id}, std::move(bwd));
}

Var bound_latent(Graph& g, Var x, int levels) {
    const Real half = static_cast<Real>(levels / 2);
    const Tensor& xv = g.value(x);
    Tensor out(xv.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = half * std::tanh(xv[i]);
    auto bwd = [x, half](Graph& gg, int self) {
        if (!gg.requires_grad(x)) return;
        const Tensor& y = gg.node(self).value;
        const Tensor& gy = gg.node(self).grad;
        Tensor& gx = gg.grad_buffer(x.id);
        for (std::int64_t i = 0; i < gy.size(); ++i) {
            const Real t = y[i] / half;
            gx[i] += gy[i] * half * (Real(1) - t * t);
        }
    };
    return g.emplace(std::move(out), {x.id}, std::move(bwd));
}

Var round_ste(Graph& g, Var x) {
    const Tensor& xv = g.value(x);
    Tensor out(xv.shape());
    for (std::int64_t i = 0; i < out.size(); ++i)
        out[i] = std::copysign(std::floor(std::abs(xv[i]) + Real(0.5)), xv[i]);
    auto bwd = [x](Graph& gg, int self) {
        if (!gg.requires_grad(x)) return;
        const Tensor& gy = gg.node(self).grad;
        Tensor& gx = gg.grad_buffer(x.id);
        for (std::int64_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    };
    return g.emplace(std::move(out), {x.id}, std::move(bwd));
}

Var psnr_loss_op(Graph& g, Var pred, const Tensor& target, Real eps) {
    const Tensor& pv = g.value(pred);
    require_same_shape(pv, target, "psnr_loss");
    const std::int64_t n = pv.size();
    Real mse = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const Real d = pv[i] - target[i];
        mse += d * d;
    }
    mse /= static_cast<Real>(n);
    const Real loss = Real(10) * std::log10(std::max(mse, eps));
    Tensor tgt = target;
    auto bwd = [pred, tgt = std::move(tgt), mse, eps, n](Graph& gg, int self) {
        if (!gg.requires_grad(pred) || mse <= eps) return;
        const Real gl = gg.node(self).grad[0];
        const Tensor& pv = gg.value(pred);
        Tensor& gp = gg.grad_buffer(pred.id);
        const Real c = gl * Real(10) / (std::log(Real(10)) * mse) * Real(2) / static_cast<Real>(n);
        for (std::int64_t i = 0; i < n; ++i) gp[i] += c * (pv[i] - tgt[i]);
    };
    return g.emplace(Tensor::scalar(loss), {pred.id}, std::move(bwd));
}

Var mse_op(Graph& g, Var pred, const Tensor& target) {
    const Tensor& pv = g.value(pred);
    require_same_shape(pv, target, "mse");
    const std::int64_t n = pv.size();
    Real mse = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const Real d = pv[i] - target[i];
        mse += d * d;
    }
    mse /= static_cast<Real>(n);
    Tensor tgt = target;
    auto bwd = [pred, tgt = std::move(tgt), n](Graph& gg, int self) {
        if (!gg.requires_grad(pred)) return;
        const Real gl = gg.node(self).grad[0];
        const Tensor& pv = gg.value(pred);
        Tensor& gp = gg.grad_buffer(pred.id);
        const Real c = gl * Real(2) / static_cast<Real>(n);
        for (std::int64_t i = 0; i < n; ++i) gp[i] += c * (pv[i] - tgt[i]);
    };
    return g.emplace(Tensor::scalar(mse), {pred.id}, std::move(bwd));
}

Var mean_sq_to_const(Graph& g, Var x, Real c) {
    const Tensor& xv = g.value(x);
    const std::int64_t n = xv.size();
    Real s = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const Real d = xv[i] - c;
        s += d * d;
    }
    s /= static_cast<Real>(n);
    auto bwd = [x, c, n](Graph& gg, int self) {
        if (!gg.requires_grad(x)) return;
        const Real gl = gg.node(self).grad[0];
        const Tensor& xv = gg.value(x);
        Tensor& gx = gg.grad_buffer(x.id);
        const Real f = gl * Real(2) / static_cast<Real>(n);
        for (std::int64_t i = 0; i < n; ++i) gx[i] += f * (xv[i] - c);
    };
    return g.emplace(Tensor::scalar(s), {x.id}, std::move(bwd));
}

Var bce_logits_op(Graph& g, Var logits, const Tensor& target_bits) {
    const Tensor& zv = g.value(logits);
    require_same_shape(zv, target_bits, "bce_logits");
    const std::int64_t n = zv.size();
    Real acc = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const Real z = zv[i];
        const Real b = target_bits[i];
        const Real sp = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
        acc += sp - b * z;
    }
    acc /= static_cast<Real>(n);
    Tensor tgt = target_bits;
    auto bwd = [logits, tgt = std::move(tgt), n](Graph& gg, int self) {
        if (!gg.requires_grad(logits)) return;
        const Real gl = gg.node(self).grad[0];
        const Tensor& zv = gg.value(logits);
        Tensor& gz = gg.grad_buffer(logits.id);
        const Real f = gl / static_cast<Real>(n);
        for (std::int64_t i = 0; i < n; ++i) {
            const Real s = Real(1) / (Real(1) + std::exp(-zv[i]));
            gz[i] += f * (s - tgt[i]);
        }
    };
    return g.emplace(Tensor::scalar(acc), {logits.id}, std::move(bwd));
}

Var softmax_ce_op(Graph& g, Var logits, const std::vector<std::int32_t>& labels, int num_classes) {
    const Tensor& zv = g.value(logits);
    if (zv.ndim() != 4) throw std::invalid_argument("softmax_ce: logits must be (B,L*C,h,w)");
    const int batch = zv.dim(0), ch = zv.dim(1), h = zv.dim(2), w = zv.dim(3);
    if (ch % num_classes != 0)
        throw std::invalid_argument("softmax_ce: channel count not divisible by class count");
    const int c = ch / num_classes;
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    const std::int64_t sites = static_cast<std::int64_t>(batch) * c * hw;
    if (static_cast<std::int64_t>(labels.size()) != sites)
        throw std::invalid_argument("softmax_ce: label count does not match logit sites");

    Real acc = 0;
    for (std::int64_t s = 0; s < sites; ++s) {
        const std::int64_t b = s / (c * hw);
        const std::int64_t rem = s % (c * hw);
        const std::int64_t cc = rem / hw;
        const std::int64_t i = rem % hw;
        Real zmax = -1e300;
        for (int l = 0; l < num_classes; ++l)
            zmax = std::max(zmax, zv[((b * num_classes + l) * c + cc) * hw + i]);
        Real denom = 0;
        for (int l = 0; l < num_classes; ++l)
            denom += std::exp(zv[((b * num_classes + l) * c + cc) * hw + i] - zmax);
        const Real zy = zv[((b * num_classes + labels[static_cast<size_t>(s)]) * c + cc) * hw + i];
        acc += -(zy - zmax) + std::log(denom);
    }
    acc /= static_cast<Real>(sites);

    auto bwd = [logits, labels, num_classes, batch, c, hw, sites](Graph& gg, int self) {
        if (!gg.requires_grad(logits)) return;
        const Real gl = gg.node(self).grad[0];
        const Tensor& zv = gg.value(logits);
        Tensor& gz = gg.grad_buffer(logits.id);
        const Real f = gl / static_cast<Real>(sites);
        for (std::int64_t s = 0; s < sites; ++s) {
            const std::int64_t b = s / (c * hw);
            const std::int64_t rem = s % (c * hw);
            const std::int64_t cc = rem / hw;
            const std::int64_t i = rem % hw;
            Real zmax = -1e300;
            for (int l = 0; l < num_classes; ++l)
                zmax = std::max(zmax, zv[((b * num_classes + l) * c + cc) * hw + i]);
            Real denom = 0;
            for (int l = 0; l < num_classes; ++l)
                denom += std::exp(zv[((b * num_classes + l) * c + cc) * hw + i] - zmax);
            for (int l = 0; l < num_classes; ++l) {
                const std::int64_t idx = ((b * num_classes + l) * c + cc) * hw + i;
                const Real p = std::exp(zv[idx] - zmax) / denom;
                gz[idx] += f * (p - (l == labels[static_cast<size_t>(s)] ? Real(1) : Real(0)));
            }
        }
    };
    return g.emplace(Tensor::scalar(acc), {logits.id}, std::move(bwd));
}

}  // namespace codebrain::nets
