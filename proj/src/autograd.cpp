// SPDX-License-Identifier: Apache-2.0
#include "flowcd/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace flowcd {

namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<Node>;

// Builds the output node; drops the tape when no parent needs gradients.
Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool need = false;
    if (g_grad_enabled) {
        for (const auto& p : parents)
            if (p.requires_grad()) need = true;
    }
    if (need) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (const auto& p : parents) n->parents.push_back(p.node());
        n->backward_fn = std::move(backward_fn);
    }
    return Var::from_node(std::move(n));
}

bool wants(const NodePtr& n) { return n && n->requires_grad; }

double clampd(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

} // namespace

Var::Var(Tensor value, bool requires_grad) {
    node_ = std::make_shared<Node>();
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void backward(const Var& root) {
    if (!root.defined()) throw ValidationError("backward: undefined var");
    // Iterative post-order topological sort.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root.node()->ensure_grad().fill(1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Var operator+(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    const long n = out.numel();
    for (long i = 0; i < n; ++i) out[i] += b.value()[i];
    auto an = a.node(), bn = b.node();
    return make_op(std::move(out), {a, b}, [an, bn, n](Node& o) {
        if (wants(an)) {
            Tensor& g = an->ensure_grad();
            for (long i = 0; i < n; ++i) g[i] += o.grad[i];
        }
        if (wants(bn)) {
            Tensor& g = bn->ensure_grad();
            for (long i = 0; i < n; ++i) g[i] += o.grad[i];
        }
    });
}

Var operator-(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    const long n = out.numel();
    for (long i = 0; i < n; ++i) out[i] -= b.value()[i];
    auto an = a.node(), bn = b.node();
    return make_op(std::move(out), {a, b}, [an, bn, n](Node& o) {
        if (wants(an)) {
            Tensor& g = an->ensure_grad();
            for (long i = 0; i < n; ++i) g[i] += o.grad[i];
        }
        if (wants(bn)) {
            Tensor& g = bn->ensure_grad();
            for (long i = 0; i < n; ++i) g[i] -= o.grad[i];
        }
    });
}

Var operator*(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    const long n = out.numel();
    for (long i = 0; i < n; ++i) out[i] *= b.value()[i];
    auto an = a.node(), bn = b.node();
    return make_op(std::move(out), {a, b}, [an, bn, n](Node& o) {
        if (wants(an)) {
            Tensor& g = an->ensure_grad();
            for (long i = 0; i < n; ++i) g[i] += o.grad[i] * bn->value[i];
        }
        if (wants(bn)) {
            Tensor& g = bn->ensure_grad();
            for (long i = 0; i < n; ++i) g[i] += o.grad[i] * an->value[i];
        }
    });
}

Var div(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "div");
    Tensor out = a.value();
    const long n = out.numel();
    for (long i = 0; i < n; ++i) out[i] /= b.value()[i];
    auto an = a.node(), bn = b.node();
    return make_op(std::move(out), {a, b}, [an, bn, n](Node& o) {
        if (wants(an)) {
            Tensor& g = an->ensure_grad();
            for (long i = 0; i < n; ++i) g[i] += o.grad[i] / bn->value[i];
        }
        if (wants(bn)) {
            Tensor& g = bn->ensure_grad();
            for (long i = 0; i < n; ++i) {
                const double bv = bn->value[i];
                g[i] -= o.grad[i] * an->value[i] / (bv * bv);
            }
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor out = a.value();
    const long n = out.numel();
    for (long i = 0; i < n; ++i) out[i] *= s;
    auto an = a.node();
    return make_op(std::move(out), {a}, [an, s, n](Node& o) {
        if (!wants(an)) return;
        Tensor& g = an->ensure_grad();
        for (long i = 0; i < n; ++i) g[i] += o.grad[i] * s;
    });
}

Var add_scalar(const Var& a, double c) {
    Tensor out = a.value();
    const long n = out.numel();
    for (long i = 0; i < n; ++i) out[i] += c;
    auto an = a.node();
    return make_op(std::move(out), {a}, [an, n](Node& o) {
        if (!wants(an)) return;
        Tensor& g = an->ensure_grad();
        for (long i = 0; i < n; ++i) g[i] += o.grad[i];
    });
}

Var rsub_scalar(double c, const Var& a) {
    Tensor out = a.value();
    const long n = out.numel();
    for (long i = 0; i < n; ++i) out[i] = c - out[i];
    auto an = a.node();
    return make_op(std::move(out), {a}, [an, n](Node& o) {
        if (!wants(an)) return;
        Tensor& g = an->ensure_grad();
        for (long i = 0; i < n; ++i) g[i] -= o.grad[i];
    });
}

Var neg(const Var& a) { return rsub_scalar(0.0, a); }

Var relu(const Var& a) {
    Tensor out = a.value();
    const long n = out.numel();
    for (long i = 0; i < n; ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
    auto an = a.node();
    return make_op(std::move(out), {a}, [an, n](Node& o) {
        if (!wants(an)) return;
        Tensor& g = an->ensure_grad();
        for (long i = 0; i < n; ++i)
            if (an->value[i] > 0.0) g[i] += o.grad[i];
    });
}

Var sigmoid(const Var& a) {
    Tensor out = a.value();
    const long n = out.numel();
    for (long i = 0; i < n; ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
    auto an = a.node();
    return make_op(std::move(out), {a}, [an, n](Node& o) {
        if (!wants(an)) return;
        Tensor& g = an->ensure_grad();
        for (long i = 0; i < n; ++i) {
            const double s = o.value[i];
            g[i] += o.grad[i] * s * (1.0 - s);
        }
    });
}

Var tanh_(const Var& a) {
    Tensor out = a.value();
    const long n = out.numel();
    for (long i = 0; i < n; ++i) out[i] = std::tanh(out[i]);
    auto an = a.node();
    return make_op(std::move(out), {a}, [an, n](Node& o) {
        if (!wants(an)) return;
        Tensor& g = an->ensure_grad();
        for (long i = 0; i < n; ++i) {
            const double t = o.value[i];
            g[i] += o.grad[i] * (1.0 - t * t);
        }
    });
}

Var abs_(const Var& a) {
    Tensor out = a.value();
    const long n = out.numel();
    for (long i = 0; i < n; ++i) out[i] = std::fabs(out[i]);
    auto an = a.node();
    return make_op(std::move(out), {a}, [an, n](Node& o) {
        if (!wants(an)) return;
        Tensor& g = an->ensure_grad();
        for (long i = 0; i < n; ++i) {
            const double v = an->value[i];
            if (v > 0.0)
                g[i] += o.grad[i];
            else if (v < 0.0)
                g[i] -= o.grad[i];
        }
    });
}

Var detach(const Var& a) { return Var(a.value(), false); }

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Var sum_all(const Var& a) {
    Tensor out = Tensor::scalar(a.value().sum());
    auto an = a.node();
    const long n = a.value().numel();
    return make_op(std::move(out), {a}, [an, n](Node& o) {
        if (!wants(an)) return;
        Tensor& g = an->ensure_grad();
        const double gu = o.grad[0];
        for (long i = 0; i < n; ++i) g[i] += gu;
    });
}

Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.value().numel())); }

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

Var concat_channels(const std::vector<Var>& xs) {
    if (xs.empty()) throw ValidationError("concat: empty input list");
    const int h = xs[0].value().size(1), w = xs[0].value().size(2);
    int ctot = 0;
    for (const auto& x : xs) {
        if (x.value().dim() != 3 || x.value().size(1) != h || x.value().size(2) != w)
            throw ValidationError("concat: spatial shape mismatch");
        ctot += x.value().size(0);
    }
    Tensor out({ctot, h, w});
    const long plane = static_cast<long>(h) * w;
    long off = 0;
    for (const auto& x : xs) {
        const long cnt = x.value().numel();
        std::copy(x.value().data(), x.value().data() + cnt, out.data() + off);
        off += cnt;
    }
    std::vector<NodePtr> pn;
    for (const auto& x : xs) pn.push_back(x.node());
    return make_op(std::move(out), xs, [pn, plane](Node& o) {
        long off2 = 0;
        for (const auto& p : pn) {
            const long cnt = p->value.numel();
            if (wants(p)) {
                Tensor& g = p->ensure_grad();
                for (long i = 0; i < cnt; ++i) g[i] += o.grad[off2 + i];
            }
            off2 += cnt;
        }
        (void)plane;
    });
}

Var slice_channels(const Var& x, int c0, int count) {
    const Tensor& v = x.value();
    if (v.dim() != 3 || c0 < 0 || count <= 0 || c0 + count > v.size(0))
        throw ValidationError("slice_channels: bad range");
    const long plane = static_cast<long>(v.size(1)) * v.size(2);
    Tensor out({count, v.size(1), v.size(2)});
    std::copy(v.data() + c0 * plane, v.data() + (c0 + count) * plane, out.data());
    auto xn = x.node();
    return make_op(std::move(out), {x}, [xn, c0, plane](Node& o) {
        if (!wants(xn)) return;
        Tensor& g = xn->ensure_grad();
        const long cnt = o.value.numel();
        for (long i = 0; i < cnt; ++i) g[c0 * plane + i] += o.grad[i];
    });
}

// ---------------------------------------------------------------------------
// conv / norm / pooling / resampling
// ---------------------------------------------------------------------------

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad, int dilation) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    if (xv.dim() != 3 || wv.dim() != 4) throw ValidationError("conv2d: expects (C,H,W) input and (O,C,kh,kw) weight");
    const int ci = xv.size(0), hh = xv.size(1), ww = xv.size(2);
    const int co = wv.size(0), kh = wv.size(2), kw = wv.size(3);
    if (wv.size(1) != ci) throw ValidationError("conv2d: channel mismatch");
    if (b.value().numel() != co) throw ValidationError("conv2d: bias size mismatch");
    const int oh = (hh + 2 * pad - dilation * (kh - 1) - 1) / stride + 1;
    const int ow = (ww + 2 * pad - dilation * (kw - 1) - 1) / stride + 1;
    if (oh <= 0 || ow <= 0) throw ValidationError("conv2d: output collapsed to zero size");

    Tensor out({co, oh, ow});
    {
        double* op = out.data();
        const double* bp = b.value().data();
        for (int c = 0; c < co; ++c)
            for (long i = 0; i < static_cast<long>(oh) * ow; ++i) op[c * static_cast<long>(oh) * ow + i] = bp[c];
        const double* xp = xv.data();
        const double* wp = wv.data();
        for (int c = 0; c < co; ++c) {
            double* oplane = op + static_cast<long>(c) * oh * ow;
            for (int ic = 0; ic < ci; ++ic) {
                const double* xplane = xp + static_cast<long>(ic) * hh * ww;
                const double* wrow = wp + ((static_cast<long>(c) * ci + ic) * kh) * kw;
                for (int ky = 0; ky < kh; ++ky) {
                    for (int kx = 0; kx < kw; ++kx) {
                        const double wvv = wrow[ky * kw + kx];
                        if (wvv == 0.0) continue;
                        for (int oy = 0; oy < oh; ++oy) {
                            const int y = oy * stride - pad + ky * dilation;
                            if (y < 0 || y >= hh) continue;
                            const double* xr = xplane + static_cast<long>(y) * ww;
                            double* orow = oplane + static_cast<long>(oy) * ow;
                            for (int ox = 0; ox < ow; ++ox) {
                                const int xx = ox * stride - pad + kx * dilation;
                                if (xx < 0 || xx >= ww) continue;
                                orow[ox] += wvv * xr[xx];
                            }
                        }
                    }
                }
            }
        }
    }

    auto xn = x.node(), wn = w.node(), bn = b.node();
    return make_op(std::move(out), {x, w, b},
                   [xn, wn, bn, ci, hh, ww, co, kh, kw, oh, ow, stride, pad, dilation](Node& o) {
                       const double* gp = o.grad.data();
                       if (wants(bn)) {
                           Tensor& gb = bn->ensure_grad();
                           for (int c = 0; c < co; ++c) {
                               double s = 0.0;
                               const double* gr = gp + static_cast<long>(c) * oh * ow;
                               for (long i = 0; i < static_cast<long>(oh) * ow; ++i) s += gr[i];
                               gb[c] += s;
                           }
                       }
                       const bool wx = wants(xn), wwt = wants(wn);
                       if (!wx && !wwt) return;
                       const double* xp = xn->value.data();
                       const double* wp = wn->value.data();
                       double* gxp = wx ? xn->ensure_grad().data() : nullptr;
                       double* gwp = wwt ? wn->ensure_grad().data() : nullptr;
                       for (int c = 0; c < co; ++c) {
                           const double* gplane = gp + static_cast<long>(c) * oh * ow;
                           for (int ic = 0; ic < ci; ++ic) {
                               const double* xplane = xp + static_cast<long>(ic) * hh * ww;
                               double* gxplane = wx ? gxp + static_cast<long>(ic) * hh * ww : nullptr;
                               for (int ky = 0; ky < kh; ++ky) {
                                   for (int kx = 0; kx < kw; ++kx) {
                                       const long widx = ((static_cast<long>(c) * ci + ic) * kh + ky) * kw + kx;
                                       const double wvv = wp[widx];
                                       double wacc = 0.0;
                                       for (int oy = 0; oy < oh; ++oy) {
                                           const int y = oy * stride - pad + ky * dilation;
                                           if (y < 0 || y >= hh) continue;
                                           const double* gr = gplane + static_cast<long>(oy) * ow;
                                           const double* xr = xplane + static_cast<long>(y) * ww;
                                           double* gxr = wx ? gxplane + static_cast<long>(y) * ww : nullptr;
                                           for (int ox = 0; ox < ow; ++ox) {
                                               const int xx = ox * stride - pad + kx * dilation;
                                               if (xx < 0 || xx >= ww) continue;
                                               const double g = gr[ox];
                                               if (wx) gxr[xx] += wvv * g;
                                               if (wwt) wacc += g * xr[xx];
                                           }
                                       }
                                       if (wwt) gwp[widx] += wacc;
                                   }
                               }
                           }
                       }
                   });
}

Var channel_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
    const Tensor& xv = x.value();
    if (xv.dim() != 3) throw ValidationError("channel_norm: expects (C,H,W)");
    const int c = xv.size(0), h = xv.size(1), w = xv.size(2);
    if (gain.value().numel() != c || bias.value().numel() != c)
        throw ValidationError("channel_norm: affine size mismatch");
    const long plane = static_cast<long>(h) * w;
    Tensor out(xv.shape());
    {
        const double* xp = xv.data();
        const double* gp = gain.value().data();
        const double* bp = bias.value().data();
        double* op = out.data();
        for (long p = 0; p < plane; ++p) {
            double mu = 0.0;
            for (int k = 0; k < c; ++k) mu += xp[k * plane + p];
            mu /= c;
            double var = 0.0;
            for (int k = 0; k < c; ++k) {
                const double d = xp[k * plane + p] - mu;
                var += d * d;
            }
            var /= c;
            const double istd = 1.0 / std::sqrt(var + eps);
            for (int k = 0; k < c; ++k)
                op[k * plane + p] = gp[k] * (xp[k * plane + p] - mu) * istd + bp[k];
        }
    }
    auto xn = x.node(), gn = gain.node(), bn = bias.node();
    return make_op(std::move(out), {x, gain, bias}, [xn, gn, bn, c, plane, eps](Node& o) {
        const double* xp = xn->value.data();
        const double* gp = gn->value.data();
        const double* og = o.grad.data();
        const bool wx = wants(xn), wg = wants(gn), wb = wants(bn);
        double* gx = wx ? xn->ensure_grad().data() : nullptr;
        double* gg = wg ? gn->ensure_grad().data() : nullptr;
        double* gb = wb ? bn->ensure_grad().data() : nullptr;
        std::vector<double> xhat(static_cast<std::size_t>(c));
        for (long p = 0; p < plane; ++p) {
            double mu = 0.0;
            for (int k = 0; k < c; ++k) mu += xp[k * plane + p];
            mu /= c;
            double var = 0.0;
            for (int k = 0; k < c; ++k) {
                const double d = xp[k * plane + p] - mu;
                var += d * d;
            }
            var /= c;
            const double istd = 1.0 / std::sqrt(var + eps);
            double mean_u = 0.0, mean_ux = 0.0;
            for (int k = 0; k < c; ++k) {
                xhat[k] = (xp[k * plane + p] - mu) * istd;
                const double u = og[k * plane + p] * gp[k];
                mean_u += u;
                mean_ux += u * xhat[k];
            }
            mean_u /= c;
            mean_ux /= c;
            for (int k = 0; k < c; ++k) {
                const double g = og[k * plane + p];
                if (wg) gg[k] += g * xhat[k];
                if (wb) gb[k] += g;
                if (wx) gx[k * plane + p] += istd * (g * gp[k] - mean_u - xhat[k] * mean_ux);
            }
        }
    });
}

Var avg_pool(const Var& x, int k) {
    const Tensor& xv = x.value();
    if (xv.dim() != 3) throw ValidationError("avg_pool: expects (C,H,W)");
    const int c = xv.size(0), h = xv.size(1), w = xv.size(2);
    if (k <= 0 || h % k != 0 || w % k != 0)
        throw ValidationError("avg_pool: dimensions not divisible by kernel");
    if (k == 1) return x;
    const int oh = h / k, ow = w / k;
    Tensor out({c, oh, ow});
    const double inv = 1.0 / (static_cast<double>(k) * k);
    for (int ch = 0; ch < c; ++ch)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                double s = 0.0;
                for (int dy = 0; dy < k; ++dy)
                    for (int dx = 0; dx < k; ++dx) s += xv.at(ch, oy * k + dy, ox * k + dx);
                out.at(ch, oy, ox) = s * inv;
            }
    auto xn = x.node();
    return make_op(std::move(out), {x}, [xn, c, oh, ow, k, inv](Node& o) {
        if (!wants(xn)) return;
        Tensor& g = xn->ensure_grad();
        for (int ch = 0; ch < c; ++ch)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    const double gv = o.grad.at(ch, oy, ox) * inv;
                    for (int dy = 0; dy < k; ++dy)
                        for (int dx = 0; dx < k; ++dx) g.at(ch, oy * k + dy, ox * k + dx) += gv;
                }
    });
}

Var adaptive_avg_pool(const Var& x, int oh, int ow) {
    const Tensor& xv = x.value();
    if (xv.dim() != 3) throw ValidationError("adaptive_avg_pool: expects (C,H,W)");
    const int c = xv.size(0), h = xv.size(1), w = xv.size(2);
    if (oh <= 0 || ow <= 0 || oh > h || ow > w) throw ValidationError("adaptive_avg_pool: bad output size");
    Tensor out({c, oh, ow});
    auto bin = [](int i, int in, int on) {
        return std::pair<int, int>{(i * in) / on, ((i + 1) * in + on - 1) / on};
    };
    for (int ch = 0; ch < c; ++ch)
        for (int oy = 0; oy < oh; ++oy) {
            auto [y0, y1] = bin(oy, h, oh);
            for (int ox = 0; ox < ow; ++ox) {
                auto [x0, x1] = bin(ox, w, ow);
                double s = 0.0;
                for (int y = y0; y < y1; ++y)
                    for (int xx = x0; xx < x1; ++xx) s += xv.at(ch, y, xx);
                out.at(ch, oy, ox) = s / (static_cast<double>(y1 - y0) * (x1 - x0));
            }
        }
    auto xn = x.node();
    return make_op(std::move(out), {x}, [xn, c, h, w, oh, ow](Node& o) {
        if (!wants(xn)) return;
        Tensor& g = xn->ensure_grad();
        auto bin = [](int i, int in, int on) {
            return std::pair<int, int>{(i * in) / on, ((i + 1) * in + on - 1) / on};
        };
        for (int ch = 0; ch < c; ++ch)
            for (int oy = 0; oy < oh; ++oy) {
                auto [y0, y1] = bin(oy, h, oh);
                for (int ox = 0; ox < ow; ++ox) {
                    auto [x0, x1] = bin(ox, w, ow);
                    const double gv = o.grad.at(ch, oy, ox) / (static_cast<double>(y1 - y0) * (x1 - x0));
                    for (int y = y0; y < y1; ++y)
                        for (int xx = x0; xx < x1; ++xx) g.at(ch, y, xx) += gv;
                }
            }
    });
}

Var upsample_bilinear(const Var& x, int oh, int ow) {
    const Tensor& xv = x.value();
    if (xv.dim() != 3) throw ValidationError("upsample_bilinear: expects (C,H,W)");
    const int c = xv.size(0), h = xv.size(1), w = xv.size(2);
    if (oh <= 0 || ow <= 0) throw ValidationError("upsample_bilinear: bad output size");
    const double sy = static_cast<double>(h) / oh, sx = static_cast<double>(w) / ow;
    Tensor out({c, oh, ow});
    for (int oy = 0; oy < oh; ++oy) {
        const double fy = clampd((oy + 0.5) * sy - 0.5, 0.0, h - 1.0);
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, h - 1);
        const double ty = fy - y0;
        for (int ox = 0; ox < ow; ++ox) {
            const double fx = clampd((ox + 0.5) * sx - 0.5, 0.0, w - 1.0);
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, w - 1);
            const double tx = fx - x0;
            for (int ch = 0; ch < c; ++ch) {
                out.at(ch, oy, ox) = (1 - ty) * ((1 - tx) * xv.at(ch, y0, x0) + tx * xv.at(ch, y0, x1)) +
                                     ty * ((1 - tx) * xv.at(ch, y1, x0) + tx * xv.at(ch, y1, x1));
            }
        }
    }
    auto xn = x.node();
    return make_op(std::move(out), {x}, [xn, c, h, w, oh, ow, sy, sx](Node& o) {
        if (!wants(xn)) return;
        Tensor& g = xn->ensure_grad();
        for (int oy = 0; oy < oh; ++oy) {
            const double fy = clampd((oy + 0.5) * sy - 0.5, 0.0, h - 1.0);
            const int y0 = static_cast<int>(fy);
            const int y1 = std::min(y0 + 1, h - 1);
            const double ty = fy - y0;
            for (int ox = 0; ox < ow; ++ox) {
                const double fx = clampd((ox + 0.5) * sx - 0.5, 0.0, w - 1.0);
                const int x0 = static_cast<int>(fx);
                const int x1 = std::min(x0 + 1, w - 1);
                const double tx = fx - x0;
                for (int ch = 0; ch < c; ++ch) {
                    const double gv = o.grad.at(ch, oy, ox);
                    g.at(ch, y0, x0) += gv * (1 - ty) * (1 - tx);
                    g.at(ch, y0, x1) += gv * (1 - ty) * tx;
                    g.at(ch, y1, x0) += gv * ty * (1 - tx);
                    g.at(ch, y1, x1) += gv * ty * tx;
                }
            }
        }
    });
}

Var softmax_groups(const Var& x, int group) {
    const Tensor& xv = x.value();
    if (xv.dim() != 3 || group <= 0 || xv.size(0) % group != 0)
        throw ValidationError("softmax_groups: channels not divisible by group");
    const int c = xv.size(0), ng = c / group;
    const long plane = static_cast<long>(xv.size(1)) * xv.size(2);
    Tensor out(xv.shape());
    const double* xp = xv.data();
    double* op = out.data();
    for (long p = 0; p < plane; ++p)
        for (int gi = 0; gi < ng; ++gi) {
            double m = -1e300;
            for (int k = 0; k < group; ++k) m = std::max(m, xp[(gi * group + k) * plane + p]);
            double s = 0.0;
            for (int k = 0; k < group; ++k) {
                const double e = std::exp(xp[(gi * group + k) * plane + p] - m);
                op[(gi * group + k) * plane + p] = e;
                s += e;
            }
            for (int k = 0; k < group; ++k) op[(gi * group + k) * plane + p] /= s;
        }
    auto xn = x.node();
    return make_op(std::move(out), {x}, [xn, ng, group, plane](Node& o) {
        if (!wants(xn)) return;
        Tensor& g = xn->ensure_grad();
        const double* sp = o.value.data();
        const double* gp = o.grad.data();
        for (long p = 0; p < plane; ++p)
            for (int gi = 0; gi < ng; ++gi) {
                double dot = 0.0;
                for (int k = 0; k < group; ++k) {
                    const long idx = (gi * group + k) * plane + p;
                    dot += gp[idx] * sp[idx];
                }
                for (int k = 0; k < group; ++k) {
                    const long idx = (gi * group + k) * plane + p;
                    g[idx] += sp[idx] * (gp[idx] - dot);
                }
            }
    });
}

// ---------------------------------------------------------------------------
// sampling ops
// ---------------------------------------------------------------------------

namespace {

// Border-clamped bilinear read of one channel plane plus the corner geometry
// needed by the backward scatter.
struct BilinearTap {
    int x0, x1, y0, y1;
    double tx, ty;
    bool dx_live, dy_live; // position gradient survives the border clamp
};

BilinearTap make_tap(double sx, double sy, int w, int h) {
    BilinearTap t;
    t.dx_live = sx > 0.0 && sx < w - 1.0;
    t.dy_live = sy > 0.0 && sy < h - 1.0;
    sx = clampd(sx, 0.0, w - 1.0);
    sy = clampd(sy, 0.0, h - 1.0);
    t.x0 = static_cast<int>(sx);
    t.y0 = static_cast<int>(sy);
    t.x1 = std::min(t.x0 + 1, w - 1);
    t.y1 = std::min(t.y0 + 1, h - 1);
    t.tx = sx - t.x0;
    t.ty = sy - t.y0;
    return t;
}

double tap_read(const BilinearTap& t, const double* plane, int w) {
    const double v00 = plane[t.y0 * w + t.x0], v01 = plane[t.y0 * w + t.x1];
    const double v10 = plane[t.y1 * w + t.x0], v11 = plane[t.y1 * w + t.x1];
    return (1 - t.ty) * ((1 - t.tx) * v00 + t.tx * v01) + t.ty * ((1 - t.tx) * v10 + t.tx * v11);
}

double tap_dx(const BilinearTap& t, const double* plane, int w) {
    if (!t.dx_live) return 0.0;
    const double v00 = plane[t.y0 * w + t.x0], v01 = plane[t.y0 * w + t.x1];
    const double v10 = plane[t.y1 * w + t.x0], v11 = plane[t.y1 * w + t.x1];
    return (1 - t.ty) * (v01 - v00) + t.ty * (v11 - v10);
}

double tap_dy(const BilinearTap& t, const double* plane, int w) {
    if (!t.dy_live) return 0.0;
    const double v00 = plane[t.y0 * w + t.x0], v01 = plane[t.y0 * w + t.x1];
    const double v10 = plane[t.y1 * w + t.x0], v11 = plane[t.y1 * w + t.x1];
    return (1 - t.tx) * (v10 - v00) + t.tx * (v11 - v01);
}

void tap_scatter(const BilinearTap& t, double* gplane, int w, double g) {
    gplane[t.y0 * w + t.x0] += g * (1 - t.ty) * (1 - t.tx);
    gplane[t.y0 * w + t.x1] += g * (1 - t.ty) * t.tx;
    gplane[t.y1 * w + t.x0] += g * t.ty * (1 - t.tx);
    gplane[t.y1 * w + t.x1] += g * t.ty * t.tx;
}

} // namespace

Var warp_bilinear(const Var& img, const Var& flow) {
    const Tensor& iv = img.value();
    const Tensor& fv = flow.value();
    if (iv.dim() != 3 || fv.dim() != 3 || fv.size(0) != 2 || iv.size(1) != fv.size(1) || iv.size(2) != fv.size(2))
        throw ValidationError("warp_bilinear: expects (C,H,W) image and matching (2,H,W) flow");
    const int c = iv.size(0), h = iv.size(1), w = iv.size(2);
    const long plane = static_cast<long>(h) * w;
    Tensor out(iv.shape());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double u = fv.at(0, y, x), v = fv.at(1, y, x);
            const BilinearTap t = make_tap(x + u, y + v, w, h);
            for (int ch = 0; ch < c; ++ch) out.at(ch, y, x) = tap_read(t, iv.data() + ch * plane, w);
        }
    auto in = img.node(), fn = flow.node();
    return make_op(std::move(out), {img, flow}, [in, fn, c, h, w, plane](Node& o) {
        const bool wi = wants(in), wf = wants(fn);
        if (!wi && !wf) return;
        double* gi = wi ? in->ensure_grad().data() : nullptr;
        double* gf = wf ? fn->ensure_grad().data() : nullptr;
        const Tensor& iv = in->value;
        const Tensor& fv = fn->value;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double u = fv.at(0, y, x), v = fv.at(1, y, x);
                const BilinearTap t = make_tap(x + u, y + v, w, h);
                double du = 0.0, dv = 0.0;
                for (int ch = 0; ch < c; ++ch) {
                    const double g = o.grad.at(ch, y, x);
                    if (g == 0.0) continue;
                    const double* plane_p = iv.data() + ch * plane;
                    if (wi) tap_scatter(t, gi + ch * plane, w, g);
                    if (wf) {
                        du += g * tap_dx(t, plane_p, w);
                        dv += g * tap_dy(t, plane_p, w);
                    }
                }
                if (wf) {
                    gf[0 * plane + y * static_cast<long>(w) + x] += du;
                    gf[1 * plane + y * static_cast<long>(w) + x] += dv;
                }
            }
    });
}

Var correlation_volume(const Var& f0, const Var& f1, bool scale_by_sqrt_c) {
    const Tensor& a = f0.value();
    const Tensor& b = f1.value();
    if (a.dim() != 3 || !a.same_shape(b)) throw ValidationError("correlation_volume: shape mismatch");
    const int c = a.size(0), h = a.size(1), w = a.size(2);
    const long hw = static_cast<long>(h) * w;
    const double scl = scale_by_sqrt_c ? 1.0 / std::sqrt(static_cast<double>(c)) : 1.0;
    Tensor out({static_cast<int>(hw), h, w});
    {
        double* op = out.data();
        const double* ap = a.data();
        const double* bp = b.data();
        for (int ch = 0; ch < c; ++ch) {
            const double* arow = ap + static_cast<long>(ch) * hw;
            const double* brow = bp + static_cast<long>(ch) * hw;
            for (long p0 = 0; p0 < hw; ++p0) {
                const double av = arow[p0];
                if (av == 0.0) continue;
                double* orow = op + p0 * hw;
                for (long p1 = 0; p1 < hw; ++p1) orow[p1] += av * brow[p1];
            }
        }
        if (scl != 1.0)
            for (long i = 0; i < hw * hw; ++i) op[i] *= scl;
    }
    auto an = f0.node(), bn = f1.node();
    return make_op(std::move(out), {f0, f1}, [an, bn, c, hw, scl](Node& o) {
        const bool wa = wants(an), wb = wants(bn);
        if (!wa && !wb) return;
        const double* gp = o.grad.data();
        const double* ap = an->value.data();
        const double* bp = bn->value.data();
        double* ga = wa ? an->ensure_grad().data() : nullptr;
        double* gb = wb ? bn->ensure_grad().data() : nullptr;
        for (int ch = 0; ch < c; ++ch) {
            const double* arow = ap + static_cast<long>(ch) * hw;
            const double* brow = bp + static_cast<long>(ch) * hw;
            double* garow = wa ? ga + static_cast<long>(ch) * hw : nullptr;
            double* gbrow = wb ? gb + static_cast<long>(ch) * hw : nullptr;
            for (long p0 = 0; p0 < hw; ++p0) {
                const double* grow = gp + p0 * hw;
                if (wa) {
                    double s = 0.0;
                    for (long p1 = 0; p1 < hw; ++p1) s += grow[p1] * brow[p1];
                    garow[p0] += scl * s;
                }
                if (wb) {
                    const double av = scl * arow[p0];
                    if (av == 0.0) continue;
                    for (long p1 = 0; p1 < hw; ++p1) gbrow[p1] += av * grow[p1];
                }
            }
        }
    });
}

Var corr_lookup(const std::vector<Var>& levels, const Var& flow, int radius) {
    if (levels.empty()) throw ValidationError("corr_lookup: no pyramid levels");
    if (radius < 1) throw ValidationError("corr_lookup: radius must be >= 1");
    const Tensor& fv = flow.value();
    if (fv.dim() != 3 || fv.size(0) != 2) throw ValidationError("corr_lookup: flow must be (2,h,w)");
    const int h = fv.size(1), w = fv.size(2);
    const long hw = static_cast<long>(h) * w;
    for (const auto& l : levels)
        if (l.value().size(0) != hw) throw ValidationError("corr_lookup: volume/flow size mismatch");
    const int nl = static_cast<int>(levels.size());
    const int side = 2 * radius + 1;
    const int per_level = side * side;
    Tensor out({nl * per_level, h, w});

    for (int li = 0; li < nl; ++li) {
        const Tensor& vol = levels[static_cast<std::size_t>(li)].value();
        const int hl = vol.size(1), wl = vol.size(2);
        const long lplane = static_cast<long>(hl) * wl;
        const double inv_s = 1.0 / static_cast<double>(1 << li);
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const long q = static_cast<long>(i) * w + j;
                const double cx = (j + fv.at(0, i, j)) * inv_s;
                const double cy = (i + fv.at(1, i, j)) * inv_s;
                const double* plane = vol.data() + q * lplane;
                for (int dy = -radius; dy <= radius; ++dy)
                    for (int dx = -radius; dx <= radius; ++dx) {
                        const BilinearTap t = make_tap(cx + dx, cy + dy, wl, hl);
                        const int ch = li * per_level + (dy + radius) * side + (dx + radius);
                        out.at(ch, i, j) = tap_read(t, plane, wl);
                    }
            }
    }

    std::vector<Var> parents = levels;
    parents.push_back(flow);
    std::vector<NodePtr> lvl_nodes;
    for (const auto& l : levels) lvl_nodes.push_back(l.node());
    auto fn = flow.node();
    return make_op(std::move(out), parents, [lvl_nodes, fn, h, w, radius, side, per_level](Node& o) {
        const Tensor& fv = fn->value;
        const bool wf = wants(fn);
        double* gf = wf ? fn->ensure_grad().data() : nullptr;
        const long hw = static_cast<long>(h) * w;
        for (int li = 0; li < static_cast<int>(lvl_nodes.size()); ++li) {
            const auto& ln = lvl_nodes[static_cast<std::size_t>(li)];
            const bool wl_ = wants(ln);
            if (!wl_ && !wf) continue;
            const Tensor& vol = ln->value;
            const int hl = vol.size(1), wl = vol.size(2);
            const long lplane = static_cast<long>(hl) * wl;
            double* gvol = wl_ ? ln->ensure_grad().data() : nullptr;
            const double inv_s = 1.0 / static_cast<double>(1 << li);
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) {
                    const long q = static_cast<long>(i) * w + j;
                    const double cx = (j + fv.at(0, i, j)) * inv_s;
                    const double cy = (i + fv.at(1, i, j)) * inv_s;
                    const double* plane = vol.data() + q * lplane;
                    double du = 0.0, dv = 0.0;
                    for (int dy = -radius; dy <= radius; ++dy)
                        for (int dx = -radius; dx <= radius; ++dx) {
                            const int ch = li * per_level + (dy + radius) * side + (dx + radius);
                            const double g = o.grad.at(ch, i, j);
                            if (g == 0.0) continue;
                            const BilinearTap t = make_tap(cx + dx, cy + dy, wl, hl);
                            if (wl_) tap_scatter(t, gvol + q * lplane, wl, g);
                            if (wf) {
                                du += g * tap_dx(t, plane, wl) * inv_s;
                                dv += g * tap_dy(t, plane, wl) * inv_s;
                            }
                        }
                    if (wf) {
                        gf[0 * hw + q] += du;
                        gf[1 * hw + q] += dv;
                    }
                }
        }
    });
}

Var convex_upsample(const Var& flow, const Var& weights, int factor) {
    const Tensor& fv = flow.value();
    const Tensor& wv = weights.value();
    if (fv.dim() != 3 || fv.size(0) != 2) throw ValidationError("convex_upsample: flow must be (2,h,w)");
    const int h = fv.size(1), w = fv.size(2);
    if (wv.dim() != 3 || wv.size(0) != factor * factor * 9 || wv.size(1) != h || wv.size(2) != w)
        throw ValidationError("convex_upsample: weights must be (factor^2*9,h,w)");
    Tensor out({2, h * factor, w * factor});
    auto cl = [](int v, int n) { return std::min(std::max(v, 0), n - 1); };
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            for (int di = 0; di < factor; ++di)
                for (int dj = 0; dj < factor; ++dj) {
                    const int wbase = (di * factor + dj) * 9;
                    double acc0 = 0.0, acc1 = 0.0;
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const double wt = wv.at(wbase + ky * 3 + kx, i, j);
                            const int yn = cl(i + ky - 1, h), xn = cl(j + kx - 1, w);
                            acc0 += wt * fv.at(0, yn, xn);
                            acc1 += wt * fv.at(1, yn, xn);
                        }
                    out.at(0, i * factor + di, j * factor + dj) = factor * acc0;
                    out.at(1, i * factor + di, j * factor + dj) = factor * acc1;
                }
    auto fn = flow.node(), wn = weights.node();
    return make_op(std::move(out), {flow, weights}, [fn, wn, h, w, factor](Node& o) {
        const bool wf = wants(fn), ww = wants(wn);
        if (!wf && !ww) return;
        Tensor* gf = wf ? &fn->ensure_grad() : nullptr;
        Tensor* gw = ww ? &wn->ensure_grad() : nullptr;
        const Tensor& fv = fn->value;
        const Tensor& wv = wn->value;
        auto cl = [](int v, int n) { return std::min(std::max(v, 0), n - 1); };
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                for (int di = 0; di < factor; ++di)
                    for (int dj = 0; dj < factor; ++dj) {
                        const int wbase = (di * factor + dj) * 9;
                        const double g0 = o.grad.at(0, i * factor + di, j * factor + dj);
                        const double g1 = o.grad.at(1, i * factor + di, j * factor + dj);
                        if (g0 == 0.0 && g1 == 0.0) continue;
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx) {
                                const int yn = cl(i + ky - 1, h), xn = cl(j + kx - 1, w);
                                const double wt = wv.at(wbase + ky * 3 + kx, i, j);
                                if (wf) {
                                    gf->at(0, yn, xn) += factor * wt * g0;
                                    gf->at(1, yn, xn) += factor * wt * g1;
                                }
                                if (ww)
                                    gw->at(wbase + ky * 3 + kx, i, j) +=
                                        factor * (g0 * fv.at(0, yn, xn) + g1 * fv.at(1, yn, xn));
                            }
                    }
    });
}

Var flow_norm(const Var& flow) {
    const Tensor& fv = flow.value();
    if (fv.dim() != 3 || fv.size(0) != 2) throw ValidationError("flow_norm: expects (2,H,W)");
    const int h = fv.size(1), w = fv.size(2);
    Tensor out({1, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double u = fv.at(0, y, x), v = fv.at(1, y, x);
            out.at(0, y, x) = std::sqrt(u * u + v * v);
        }
    auto fn = flow.node();
    return make_op(std::move(out), {flow}, [fn, h, w](Node& o) {
        if (!wants(fn)) return;
        Tensor& g = fn->ensure_grad();
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double n = o.value.at(0, y, x);
                if (n == 0.0) continue; // subgradient at the apex
                const double gv = o.grad.at(0, y, x) / n;
                g.at(0, y, x) += gv * fn->value.at(0, y, x);
                g.at(1, y, x) += gv * fn->value.at(1, y, x);
            }
    });
}

} // namespace flowcd
