// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>

#include "flowcd/core.hpp"
#include "flowcd/nn.hpp"

namespace flowcd::cd {

struct CdConfig {
    enum class Depth { toy, resnet50_style };

    Depth depth = Depth::resnet50_style;
    int f0_channels = 512;               // backbone output width
    int fusion_channels = 512;           // F5 width
    std::array<int, 4> pool_bins{1, 2, 3, 6};
    double mask_tau = 1.0;               // slow-change suppression threshold, pixels
    double sigmoid_threshold = 0.5;      // reporting threshold for binary masks

    static CdConfig toy() {
        CdConfig c;
        c.depth = Depth::toy;
        c.f0_channels = 64;
        c.fusion_channels = 64;
        return c;
    }
    static CdConfig full() { return CdConfig{}; }

    void validate() const {
        if (mask_tau < 0.0) throw ValidationError("cd config: mask tau must be >= 0");
        if (!(sigmoid_threshold > 0.0 && sigmoid_threshold < 1.0))
            throw ValidationError("cd config: sigmoid threshold must lie in (0,1)");
        for (int b : pool_bins)
            if (b < 1) throw ValidationError("cd config: pool bins must be >= 1");
    }
};

/// Backward warp of `img` along `flow`; border samples clamp.
Image warp(const Image& img, const FlowField& flow);

/// Elementwise |t0 - warped| (3 channels, nonnegative).
Tensor abs_difference(const Image& t0, const Image& warped);

/// Binary multiplier: 0 where the flow magnitude exceeds tau, 1 elsewhere.
Tensor slow_change_mask(const FlowField& flow, double tau);

// Residual stride-8 backbone; the final stage is dilated so resolution holds.
struct Backbone {
    struct Block {
        nn::Conv c1, c2, skip;
        nn::Norm n1, n2, ns;
        bool has_skip = false;
        Var operator()(const Var& x) const;
    };
    nn::Conv stem;
    nn::Norm stem_norm;
    std::vector<Block> blocks;

    Backbone() = default;
    Backbone(nn::ParamStore& ps, Rng& rng, const std::string& prefix, const CdConfig& cfg);
    Var operator()(const Var& masked_diff) const;
};

// Four-scale pooling, fusion to F5, then the single-channel sigmoid output F6.
struct PyramidHead {
    std::array<int, 4> bins;
    nn::Conv fuse, out;
    nn::Norm fuse_norm;

    PyramidHead() = default;
    PyramidHead(nn::ParamStore& ps, Rng& rng, const std::string& prefix, const CdConfig& cfg);
    /// F0 (C,h,w) -> change probabilities (1, h*8, w*8), strictly inside (0,1).
    Var operator()(const Var& f0) const;
};

struct CdBranch {
    CdConfig cfg;
    Backbone backbone;
    PyramidHead head;

    CdBranch() = default;
    CdBranch(nn::ParamStore& ps, Rng& rng, const CdConfig& config);

    /// Tensor-level pipeline. The suppression mask is computed from the flow
    /// values and applied as a constant, so no gradient crosses it; gradient
    /// does reach `flow` through the warp.
    Var forward(const Var& t0, const Var& t1, const Var& flow) const;

    /// Domain-type wrapper producing a prediction-kind mask.
    ChangeMask cd_forward(const Image& t0, const Image& t1, const FlowField& flow) const;
};

} // namespace flowcd::cd
