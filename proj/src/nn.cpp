// SPDX-License-Identifier: Apache-2.0
#include "flowcd/nn.hpp"

#include <cmath>

namespace flowcd::nn {

Var ParamStore::add(const std::string& name, Tensor init) {
    if (params_.count(name)) throw ValidationError("duplicate parameter: " + name);
    Var v(std::move(init), true);
    params_.emplace(name, v);
    return v;
}

Var ParamStore::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValidationError("unknown parameter: " + name);
    return it->second;
}

void ParamStore::zero_grads() {
    for (auto& [name, p] : params_) p.zero_grad();
}

long ParamStore::total_count() const {
    long n = 0;
    for (const auto& [name, p] : params_) n += p.value().numel();
    return n;
}

Tensor kaiming_conv(Rng& rng, int out_ch, int in_ch, int kh, int kw, double gain) {
    Tensor w({out_ch, in_ch, kh, kw});
    const double fan_in = static_cast<double>(in_ch) * kh * kw;
    const double bound = gain * std::sqrt(6.0 / fan_in);
    for (long i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-bound, bound);
    return w;
}

Conv::Conv(ParamStore& ps, Rng& rng, const std::string& name, int in_ch, int out_ch, int k, int stride_,
           int dilation_, double gain)
    : stride(stride_), pad(dilation_ * (k - 1) / 2), dilation(dilation_) {
    w = ps.add(name + ".w", kaiming_conv(rng, out_ch, in_ch, k, k, gain));
    b = ps.add(name + ".b", Tensor({out_ch}));
}

Norm::Norm(ParamStore& ps, const std::string& name, int channels) {
    gain = ps.add(name + ".gain", Tensor({channels}, 1.0));
    bias = ps.add(name + ".bias", Tensor({channels}));
}

AdamW::AdamW(ParamStore& ps, std::vector<Group> groups, double default_lr, double weight_decay, double beta1,
             double beta2, double eps)
    : ps_(ps), groups_(std::move(groups)), default_lr_(default_lr), wd_(weight_decay), b1_(beta1), b2_(beta2),
      eps_(eps) {
    for (const auto& [name, p] : ps_.all()) {
        m_.emplace(name, Tensor::zeros(p.value().shape()));
        v_.emplace(name, Tensor::zeros(p.value().shape()));
    }
}

double AdamW::lr_for(const std::string& name) const {
    for (const auto& g : groups_)
        if (name.rfind(g.prefix, 0) == 0) return g.lr;
    return default_lr_;
}

double AdamW::step(double clip_norm) {
    double sq = 0.0;
    for (auto& [name, p] : ps_.all()) {
        const Tensor& g = p.grad();
        for (long i = 0; i < g.numel(); ++i) sq += g[i] * g[i];
    }
    const double gnorm = std::sqrt(sq);
    const double clip = (clip_norm > 0.0 && gnorm > clip_norm) ? clip_norm / gnorm : 1.0;

    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (auto& [name, p] : ps_.all()) {
        const double lr = lr_for(name) * lr_scale_;
        Tensor& m = m_.at(name);
        Tensor& v = v_.at(name);
        Tensor& val = p.mutable_value();
        const Tensor& g = p.grad();
        for (long i = 0; i < val.numel(); ++i) {
            const double gi = g[i] * clip;
            m[i] = b1_ * m[i] + (1.0 - b1_) * gi;
            v[i] = b2_ * v[i] + (1.0 - b2_) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            val[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * val[i]);
        }
    }
    return gnorm;
}

} // namespace flowcd::nn
