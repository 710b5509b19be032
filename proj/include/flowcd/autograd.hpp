// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "flowcd/tensor.hpp"

namespace flowcd {

// Reverse-mode tape node. Vars own the graph through shared_ptr chains; when
// the last Var referencing a forward pass goes out of scope the tape frees
// itself. Parameter nodes are leaves that persist across steps.
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Tensor& ensure_grad() {
        if (grad.empty()) grad = Tensor::zeros(value.shape());
        return grad;
    }
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    Tensor& grad() { return node_->ensure_grad(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void zero_grad() {
        if (node_ && !node_->grad.empty()) node_->grad.fill(0.0);
    }

    std::shared_ptr<Node> node() const { return node_; }
    static Var from_node(std::shared_ptr<Node> n) {
        Var v;
        v.node_ = std::move(n);
        return v;
    }

private:
    std::shared_ptr<Node> node_;
};

/// Thread-local toggle; forwards built under NoGradGuard record no tape.
bool grad_enabled();
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();

private:
    bool prev_;
};

/// Reverse sweep from a scalar (or any) root; seeds the root grad with ones.
void backward(const Var& root);

// ---- elementwise ----
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b); // Hadamard
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double c);
Var rsub_scalar(double c, const Var& a); // c - a
Var neg(const Var& a);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var tanh_(const Var& a);
Var abs_(const Var& a);
Var detach(const Var& a);

// ---- reductions ----
Var sum_all(const Var& a);
Var mean_all(const Var& a);

// ---- shape (all tensors are (C,H,W)) ----
Var concat_channels(const std::vector<Var>& xs);
Var slice_channels(const Var& x, int c0, int count);

// ---- dense prediction ops ----
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad, int dilation = 1);
/// Per-position normalization across channels with learned per-channel affine.
Var channel_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
Var avg_pool(const Var& x, int k);
Var adaptive_avg_pool(const Var& x, int oh, int ow);
Var upsample_bilinear(const Var& x, int oh, int ow);
/// Softmax over each consecutive `group` channels at every spatial position.
Var softmax_groups(const Var& x, int group);

// ---- sampling ops ----
/// Backward warp: out(c,y,x) samples img at (x+u, y+v), border-clamped bilinear.
Var warp_bilinear(const Var& img, const Var& flow);
/// All-pairs inner products of per-pixel feature vectors; output (h*w, h, w).
Var correlation_volume(const Var& f0, const Var& f1, bool scale_by_sqrt_c = true);
/// Bilinear gather of (2r+1)^2 grids around the flow target at every pyramid level.
Var corr_lookup(const std::vector<Var>& levels, const Var& flow, int radius);
/// Fine flow as convex combinations of the 3x3 coarse neighborhood, values scaled
/// by `factor`; `weights` must already be normalized (see softmax_groups).
Var convex_upsample(const Var& flow, const Var& weights, int factor = 8);
/// Per-pixel Euclidean magnitude of a (2,H,W) field -> (1,H,W); zero-safe backward.
Var flow_norm(const Var& flow);

} // namespace flowcd
