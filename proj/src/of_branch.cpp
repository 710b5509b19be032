// SPDX-License-Identifier: Apache-2.0
#include "flowcd/of_branch.hpp"

namespace flowcd::of {

namespace {

void require_div8(const Tensor& t, const char* what) {
    if (t.dim() != 3) throw ValidationError(std::string(what) + ": expects (C,H,W)");
    if (t.size(1) % 8 != 0 || t.size(2) % 8 != 0 || t.size(1) < 8 || t.size(2) < 8)
        throw ValidationError(std::string(what) + ": spatial dims must be >= 8 and divisible by 8");
}

} // namespace

Var Encoder::Block::operator()(const Var& x) const {
    Var y = relu(n1(c1(x)));
    y = n2(c2(y));
    Var s = has_skip ? ns(skip(x)) : x;
    return relu(y + s);
}

Encoder::Encoder(nn::ParamStore& ps, Rng& rng, const std::string& prefix, int in_ch, int out_ch) {
    const int c1 = std::max(out_ch / 2, 8);
    const int c2 = std::max(3 * out_ch / 4, 8);
    stem = nn::Conv(ps, rng, prefix + ".stem", in_ch, c1, 3, 2);
    stem_norm = nn::Norm(ps, prefix + ".stem_norm", c1);

    auto make_block = [&](const std::string& name, int ci, int co, int stride) {
        Block b;
        b.c1 = nn::Conv(ps, rng, name + ".c1", ci, co, 3, stride);
        b.n1 = nn::Norm(ps, name + ".n1", co);
        b.c2 = nn::Conv(ps, rng, name + ".c2", co, co, 3, 1);
        b.n2 = nn::Norm(ps, name + ".n2", co);
        b.has_skip = (ci != co) || stride != 1;
        if (b.has_skip) {
            b.skip = nn::Conv(ps, rng, name + ".skip", ci, co, 1, stride);
            b.ns = nn::Norm(ps, name + ".ns", co);
        }
        return b;
    };
    b1 = make_block(prefix + ".b1", c1, c1, 1);
    b2 = make_block(prefix + ".b2", c1, c2, 2);
    b3 = make_block(prefix + ".b3", c2, out_ch, 2);
    proj = nn::Conv(ps, rng, prefix + ".proj", out_ch, out_ch, 1, 1);
}

Var Encoder::operator()(const Var& img) const {
    Var x = relu(stem_norm(stem(img)));
    x = b1(x);
    x = b2(x);
    x = b3(x);
    return proj(x);
}

UpdateBlock::UpdateBlock(nn::ParamStore& ps, Rng& rng, const std::string& prefix, const OfConfig& cfg) {
    const int corr_in = 4 * (2 * cfg.lookup_radius + 1) * (2 * cfg.lookup_radius + 1);
    corr_enc = nn::Conv(ps, rng, prefix + ".corr_enc", corr_in, cfg.corr_enc_channels, 1, 1);
    flow_enc = nn::Conv(ps, rng, prefix + ".flow_enc", 2, cfg.flow_enc_channels, 3, 1);
    const int xin = cfg.corr_enc_channels + cfg.flow_enc_channels + cfg.context_channels;
    const int gin = cfg.hidden_channels + xin;
    wz = nn::Conv(ps, rng, prefix + ".wz", gin, cfg.hidden_channels, 3, 1);
    wr = nn::Conv(ps, rng, prefix + ".wr", gin, cfg.hidden_channels, 3, 1);
    wh = nn::Conv(ps, rng, prefix + ".wh", gin, cfg.hidden_channels, 3, 1);
    head1 = nn::Conv(ps, rng, prefix + ".head1", cfg.hidden_channels, cfg.hidden_channels, 3, 1);
    // Zero-initialized final layers: iteration 0 starts at exactly zero flow
    // with uniform upsample weights, and the first gradients shape both heads.
    head2 = nn::Conv(ps, rng, prefix + ".head2", cfg.hidden_channels, 2, 3, 1, 1, 0.0);
    mask1 = nn::Conv(ps, rng, prefix + ".mask1", cfg.hidden_channels, cfg.hidden_channels, 3, 1);
    mask2 = nn::Conv(ps, rng, prefix + ".mask2", cfg.hidden_channels, 8 * 8 * 9, 1, 1, 1, 0.0);
}

std::pair<GruState, Var> UpdateBlock::gru_update(const GruState& state, const Var& corr_feats,
                                                 const Var& flow_feats) const {
    // Fused input, fixed order: correlation, flow, context.
    Var x = concat_channels({corr_feats, flow_feats, state.context});
    Var hx = concat_channels({state.hidden, x});
    Var z = sigmoid(wz(hx));
    Var r = sigmoid(wr(hx));
    Var h_tilde = tanh_(wh(concat_channels({r * state.hidden, x})));
    Var h = (rsub_scalar(1.0, z) * state.hidden) + (z * h_tilde);
    Var delta = head2(relu(head1(h)));
    return {GruState{h, state.context}, delta};
}

Var UpdateBlock::upsample_weights(const Var& hidden) const {
    return softmax_groups(mask2(relu(mask1(hidden))), 9);
}

CorrelationPyramid build_pyramid(const Var& corr_volume, int h, int w) {
    const Tensor& v = corr_volume.value();
    if (v.dim() != 3 || v.size(0) != h * w) throw ValidationError("build_pyramid: volume/shape mismatch");
    if (v.size(1) < 8 || v.size(2) < 8 || v.size(1) % 8 != 0 || v.size(2) % 8 != 0)
        throw ValidationError("build_pyramid: last two dims must be >= 8 and divisible by 8");
    CorrelationPyramid pyr;
    pyr.h = h;
    pyr.w = w;
    pyr.levels.push_back(corr_volume); // kernel 1: identity
    Var cur = corr_volume;
    for (int k = 1; k < 4; ++k) {
        const int lh = cur.value().size(1), lw = cur.value().size(2);
        // Equals exact 2x2 average pooling on divisible dims; uneven tails
        // fall back to ceil-mode bins.
        cur = adaptive_avg_pool(cur, (lh + 1) / 2, (lw + 1) / 2);
        pyr.levels.push_back(cur);
    }
    return pyr;
}

OfBranch::OfBranch(nn::ParamStore& ps, Rng& rng, const OfConfig& config) : cfg(config) {
    cfg.validate();
    fnet = Encoder(ps, rng, "of.fnet", 3, cfg.feature_channels);
    cnet = Encoder(ps, rng, "of.cnet", 3, cfg.hidden_channels + cfg.context_channels);
    update = UpdateBlock(ps, rng, "of.update", cfg);
}

Var OfBranch::encode_features(const Var& img) const {
    require_div8(img.value(), "encode_features");
    return fnet(img);
}

OfResult OfBranch::forward(const Var& t0, const Var& t1, bool keep_all_upsampled) const {
    require_div8(t0.value(), "of_forward");
    require_same_shape(t0.value(), t1.value(), "of_forward");

    Var f0 = fnet(t0);
    Var f1 = fnet(t1);
    const int h = f0.value().size(1), w = f0.value().size(2);

    Var corr = correlation_volume(f0, f1, cfg.scale_correlation);
    CorrelationPyramid pyr = build_pyramid(corr, h, w);

    Var ctx_raw = cnet(t0);
    GruState state;
    state.hidden = tanh_(slice_channels(ctx_raw, 0, cfg.hidden_channels));
    state.context = relu(slice_channels(ctx_raw, cfg.hidden_channels, cfg.context_channels));

    OfResult res;
    Var flow(Tensor({2, h, w}));
    for (int it = 0; it < cfg.iterations; ++it) {
        // The lookup position and the flow-feature input are treated as
        // constants per iteration; the additive delta chain stays
        // differentiable, so each iteration's delta sees the flow loss
        // directly while the noisy position-derivative feedback is cut.
        Var flow_in = detach(flow);
        Var corr_raw = corr_lookup(pyr.levels, flow_in, cfg.lookup_radius);
        Var corr_feats = relu(update.corr_enc(corr_raw));
        Var flow_feats = relu(update.flow_enc(flow_in));
        auto [next_state, delta] = update.gru_update(state, corr_feats, flow_feats);
        state = next_state;
        flow = flow + delta;
        res.lr_flows.push_back(flow);
        if (keep_all_upsampled)
            res.full_flows.push_back(convex_upsample(flow, update.upsample_weights(state.hidden), 8));
    }
    res.final_flow = keep_all_upsampled
                         ? res.full_flows.back()
                         : convex_upsample(flow, update.upsample_weights(state.hidden), 8);
    res.final_state = state;
    return res;
}

std::vector<FlowField> OfBranch::iterate_flow(const Image& t0, const Image& t1) const {
    t0.validate();
    t1.validate();
    OfResult r = forward(Var(t0.data), Var(t1.data));
    std::vector<FlowField> out;
    out.reserve(r.lr_flows.size());
    for (const auto& f : r.lr_flows) out.push_back(FlowField(f.value()));
    return out;
}

FlowField OfBranch::of_forward(const Image& t0, const Image& t1) const {
    t0.validate();
    t1.validate();
    OfResult r = forward(Var(t0.data), Var(t1.data));
    return FlowField(r.final_flow.value());
}

} // namespace flowcd::of
