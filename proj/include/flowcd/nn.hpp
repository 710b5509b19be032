// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "flowcd/autograd.hpp"
#include "flowcd/common.hpp"

namespace flowcd::nn {

// Named trainable leaves. std::map keeps iteration order stable, which makes
// init, checkpoints and optimizer sweeps deterministic.
class ParamStore {
public:
    Var add(const std::string& name, Tensor init);
    Var get(const std::string& name) const;
    bool has(const std::string& name) const { return params_.count(name) > 0; }
    std::map<std::string, Var>& all() { return params_; }
    const std::map<std::string, Var>& all() const { return params_; }
    void zero_grads();
    long total_count() const;

private:
    std::map<std::string, Var> params_;
};

Tensor kaiming_conv(Rng& rng, int out_ch, int in_ch, int kh, int kw, double gain = 1.0);

struct Conv {
    Var w, b;
    int stride = 1, pad = 0, dilation = 1;

    Conv() = default;
    Conv(ParamStore& ps, Rng& rng, const std::string& name, int in_ch, int out_ch, int k, int stride_ = 1,
         int dilation_ = 1, double gain = 1.0);
    Var operator()(const Var& x) const { return conv2d(x, w, b, stride, pad, dilation); }
};

/// Learned per-channel affine over channel-normalized activations.
struct Norm {
    Var gain, bias;

    Norm() = default;
    Norm(ParamStore& ps, const std::string& name, int channels);
    Var operator()(const Var& x) const { return channel_norm(x, gain, bias); }
};

/// AdamW with decoupled weight decay, prefix-based parameter groups for the
/// per-branch learning rates, and global-norm gradient clipping.
class AdamW {
public:
    struct Group {
        std::string prefix; // parameter-name prefix, e.g. "of."
        double lr;
    };

    AdamW(ParamStore& ps, std::vector<Group> groups, double default_lr, double weight_decay = 1e-4,
          double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    /// Applies one update from the accumulated gradients. Returns the global
    /// gradient norm before clipping.
    double step(double clip_norm = 0.0);
    /// Multiplier on every group's rate (simple step schedules).
    void set_lr_scale(double s) { lr_scale_ = s; }
    long step_count() const { return t_; }

    // Raw moment access for checkpointing.
    std::map<std::string, Tensor>& m() { return m_; }
    std::map<std::string, Tensor>& v() { return v_; }
    void set_step_count(long t) { t_ = t; }

private:
    double lr_for(const std::string& name) const;

    ParamStore& ps_;
    std::vector<Group> groups_;
    double default_lr_, wd_, b1_, b2_, eps_;
    double lr_scale_ = 1.0;
    long t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

} // namespace flowcd::nn
