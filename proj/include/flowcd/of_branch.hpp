// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "flowcd/core.hpp"
#include "flowcd/nn.hpp"

namespace flowcd::of {

struct OfConfig {
    int feature_channels = 256;
    int hidden_channels = 128;
    int context_channels = 128;
    int iterations = 12;
    int lookup_radius = 4;
    int corr_enc_channels = 96; // motion-encoder width for correlation features
    int flow_enc_channels = 32; // motion-encoder width for flow features
    bool scale_correlation = true;

    static OfConfig toy() {
        OfConfig c;
        c.feature_channels = 32;
        c.hidden_channels = 48;
        c.context_channels = 48;
        c.iterations = 6;
        c.lookup_radius = 3;
        c.corr_enc_channels = 48;
        c.flow_enc_channels = 16;
        return c;
    }
    static OfConfig full() { return OfConfig{}; }

    void validate() const {
        if (iterations < 1) throw ValidationError("of config: iterations must be >= 1");
        if (lookup_radius < 1) throw ValidationError("of config: lookup radius must be >= 1");
        if (feature_channels < 1 || hidden_channels < 1 || context_channels < 1)
            throw ValidationError("of config: channel counts must be positive");
    }
};

// Residual stride-8 encoder: stem s2, two residual stages s2, 1x1 projection.
struct Encoder {
    nn::Conv stem, proj;
    nn::Norm stem_norm;
    struct Block {
        nn::Conv c1, c2, skip;
        nn::Norm n1, n2, ns;
        bool has_skip = false;
        Var operator()(const Var& x) const;
    };
    Block b1, b2, b3;

    Encoder() = default;
    Encoder(nn::ParamStore& ps, Rng& rng, const std::string& prefix, int in_ch, int out_ch);
    Var operator()(const Var& img) const;
};

struct GruState {
    Var hidden;  // (Ch, h, w), values in (-1,1)
    Var context; // (Cc, h, w), fixed across iterations
};

/// Conv-GRU gates over [hidden, input] concatenation plus the flow-delta head.
struct UpdateBlock {
    nn::Conv corr_enc, flow_enc;          // motion encoder
    nn::Conv wz, wr, wh;                  // the three gates
    nn::Conv head1, head2;                // delta-flow head
    nn::Conv mask1, mask2;                // convex-upsample weight head

    UpdateBlock() = default;
    UpdateBlock(nn::ParamStore& ps, Rng& rng, const std::string& prefix, const OfConfig& cfg);

    /// One Eq.-style GRU step on pre-encoded features; returns new state and delta.
    std::pair<GruState, Var> gru_update(const GruState& state, const Var& corr_feats,
                                        const Var& flow_feats) const;
    Var upsample_weights(const Var& hidden) const; // softmax-normalized (576,h,w)
};

struct CorrelationPyramid {
    std::vector<Var> levels; // 4 levels, kernel {1,2,4,8} average pooling
    int h = 0, w = 0;
};

/// All-pairs correlation then the 4-level pooled pyramid. Requires the last
/// two dims (h, w at 1/8 scale) to be at least 8 and divisible by 8.
CorrelationPyramid build_pyramid(const Var& corr_volume, int h, int w);

struct OfResult {
    std::vector<Var> lr_flows;   // one per iteration, at 1/8 resolution
    std::vector<Var> full_flows; // populated only when requested
    Var final_flow;              // (2,H,W), full resolution
    GruState final_state;
};

struct OfBranch {
    OfConfig cfg;
    Encoder fnet; // feature encoder g, shared across both frames
    Encoder cnet; // context encoder h, first frame only
    UpdateBlock update;

    OfBranch() = default;
    OfBranch(nn::ParamStore& ps, Rng& rng, const OfConfig& config);

    /// (3,H,W) -> (C,H/8,W/8); validates divisibility.
    Var encode_features(const Var& img) const;

    /// Full refinement loop on raw tensors; spatial dims divisible by 8.
    /// `keep_all_upsampled` additionally upsamples every iterate (used by the
    /// optional per-iteration supervision mode).
    OfResult forward(const Var& t0, const Var& t1, bool keep_all_upsampled = false) const;

    /// Convenience wrappers on domain types.
    std::vector<FlowField> iterate_flow(const Image& t0, const Image& t1) const;
    FlowField of_forward(const Image& t0, const Image& t1) const;
};

} // namespace flowcd::of
