// SPDX-License-Identifier: Apache-2.0
#include "flowcd/cd_branch.hpp"

#include <cmath>

namespace flowcd::cd {

Image warp(const Image& img, const FlowField& flow) {
    img.validate();
    flow.validate();
    if (img.height() != flow.height() || img.width() != flow.width())
        throw ValidationError("warp: image/flow shape mismatch");
    NoGradGuard ng;
    Var out = warp_bilinear(Var(img.data), Var(flow.data));
    Image r;
    r.data = out.value();
    return r;
}

Tensor abs_difference(const Image& t0, const Image& warped) {
    require_same_shape(t0.data, warped.data, "abs_difference");
    Tensor out = t0.data;
    for (long i = 0; i < out.numel(); ++i) out[i] = std::fabs(out[i] - warped.data[i]);
    return out;
}

Tensor slow_change_mask(const FlowField& flow, double tau) {
    if (tau < 0.0) throw ValidationError("slow_change_mask: tau must be >= 0");
    const Tensor mag = flow_magnitude(flow);
    Tensor out({1, flow.height(), flow.width()});
    for (long i = 0; i < out.numel(); ++i) out[i] = mag[i] > tau ? 0.0 : 1.0;
    return out;
}

Var Backbone::Block::operator()(const Var& x) const {
    Var y = relu(n1(c1(x)));
    y = n2(c2(y));
    Var s = has_skip ? ns(skip(x)) : x;
    return relu(y + s);
}

Backbone::Backbone(nn::ParamStore& ps, Rng& rng, const std::string& prefix, const CdConfig& cfg) {
    const bool toy = cfg.depth == CdConfig::Depth::toy;
    const int cout = cfg.f0_channels;
    const int c1 = toy ? 16 : 64;
    const int c2 = toy ? 24 : 128;
    const int c3 = toy ? 32 : 256;

    stem = nn::Conv(ps, rng, prefix + ".stem", 3, c1, 3, 2);
    stem_norm = nn::Norm(ps, prefix + ".stem_norm", c1);

    auto add_block = [&](const std::string& name, int ci, int co, int stride, int dilation) {
        Block b;
        b.c1 = nn::Conv(ps, rng, name + ".c1", ci, co, 3, stride, dilation);
        b.n1 = nn::Norm(ps, name + ".n1", co);
        b.c2 = nn::Conv(ps, rng, name + ".c2", co, co, 3, 1, dilation);
        b.n2 = nn::Norm(ps, name + ".n2", co);
        b.has_skip = (ci != co) || stride != 1;
        if (b.has_skip) {
            b.skip = nn::Conv(ps, rng, name + ".skip", ci, co, 1, stride);
            b.ns = nn::Norm(ps, name + ".ns", co);
        }
        blocks.push_back(std::move(b));
    };

    // Four stages, stride 8 overall; final stage dilated instead of strided.
    add_block(prefix + ".s1", c1, c2, 2, 1);
    add_block(prefix + ".s2", c2, c3, 2, 1);
    if (!toy) add_block(prefix + ".s2b", c3, c3, 1, 1);
    add_block(prefix + ".s3", c3, cout, 1, 2);
    if (!toy) add_block(prefix + ".s3b", cout, cout, 1, 2);
}

Var Backbone::operator()(const Var& masked_diff) const {
    const Tensor& v = masked_diff.value();
    if (v.dim() != 3 || v.size(0) != 3) throw ValidationError("backbone: expects (3,H,W)");
    if (v.size(1) % 8 != 0 || v.size(2) % 8 != 0 || v.size(1) < 8 || v.size(2) < 8)
        throw ValidationError("backbone: dims must be >= 8 and divisible by 8");
    Var x = relu(stem_norm(stem(masked_diff)));
    for (const auto& b : blocks) x = b(x);
    return x;
}

PyramidHead::PyramidHead(nn::ParamStore& ps, Rng& rng, const std::string& prefix, const CdConfig& cfg)
    : bins(cfg.pool_bins) {
    fuse = nn::Conv(ps, rng, prefix + ".fuse", cfg.f0_channels * 5, cfg.fusion_channels, 3, 1);
    fuse_norm = nn::Norm(ps, prefix + ".fuse_norm", cfg.fusion_channels);
    // Zero init: the head starts at probability 0.5 everywhere, away from the
    // saturated-sigmoid region where Tversky gradients vanish.
    out = nn::Conv(ps, rng, prefix + ".out", cfg.fusion_channels, 1, 3, 1, 1, 0.0);
}

Var PyramidHead::operator()(const Var& f0) const {
    const int h = f0.value().size(1), w = f0.value().size(2);
    std::vector<Var> stack{f0};
    for (int b : bins) {
        const int bh = std::min(b, h), bw = std::min(b, w);
        stack.push_back(upsample_bilinear(adaptive_avg_pool(f0, bh, bw), h, w));
    }
    Var f5 = relu(fuse_norm(fuse(concat_channels(stack))));
    Var f6 = sigmoid(out(f5));
    return upsample_bilinear(f6, h * 8, w * 8);
}

CdBranch::CdBranch(nn::ParamStore& ps, Rng& rng, const CdConfig& config) : cfg(config) {
    cfg.validate();
    backbone = Backbone(ps, rng, "cd.backbone", cfg);
    head = PyramidHead(ps, rng, "cd.head", cfg);
}

Var CdBranch::forward(const Var& t0, const Var& t1, const Var& flow) const {
    require_same_shape(t0.value(), t1.value(), "cd_forward");
    Var warped = warp_bilinear(t1, flow);
    Var diff = abs_(t0 - warped);

    // Hard suppression mask from the flow values; stop-gradient by design.
    FlowField f;
    f.data = flow.value();
    Tensor mask1 = slow_change_mask(f, cfg.mask_tau);
    Tensor mask3({3, mask1.size(1), mask1.size(2)});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < mask1.size(1); ++y)
            for (int x = 0; x < mask1.size(2); ++x) mask3.at(c, y, x) = mask1.at(0, y, x);

    Var masked = diff * Var(std::move(mask3));
    Var f0 = backbone(masked);
    return head(f0);
}

ChangeMask CdBranch::cd_forward(const Image& t0, const Image& t1, const FlowField& flow) const {
    t0.validate();
    t1.validate();
    flow.validate();
    NoGradGuard ng;
    Var out = forward(Var(t0.data), Var(t1.data), Var(flow.data));
    return ChangeMask(out.value(), ChangeMask::Kind::prediction);
}

} // namespace flowcd::cd
