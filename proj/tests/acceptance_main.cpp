// SPDX-License-Identifier: Apache-2.0
// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Criterion 9's directional comparison is reported, not gated.
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "flowcd/harness.hpp"
#include "flowcd/image_io.hpp"
#include "testutil.hpp"

using namespace flowcd;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;
std::chrono::steady_clock::time_point g_t0;

void begin(const char* name) {
    std::printf("=== %s\n", name);
    std::fflush(stdout);
    g_t0 = std::chrono::steady_clock::now();
}

void verdict(const char* name, bool ok, const std::string& detail) {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - g_t0).count();
    std::printf("[%s] %s (%.1fs) %s\n", ok ? "PASS" : "FAIL", name, secs, detail.c_str());
    std::fflush(stdout);
    if (!ok) ++g_failures;
}

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof(buf), f, ap);
    va_end(ap);
    return buf;
}

fs::path work_dir() {
    fs::path p = fs::temp_directory_path() / "flowcd_acceptance";
    return p;
}

// ---------------------------------------------------------------------------
// criterion 1: FEPE arithmetic reproduction
// ---------------------------------------------------------------------------
void criterion_1() {
    begin("criterion 1: FEPE arithmetic reproduction");
    const double row_full = objectives::fepe(0.892, 1.027, 1e-6);
    const double row_s = objectives::fepe(0.860, 2.798, 1e-6);
    // Quotients of the printed inputs: 0.86855 and 0.30736. The first rounds
    // to the table's 0.869; the second sits 6.4e-4 from the table's 0.308
    // because the table's own FEPE was computed before display rounding, so
    // the comparison against the table carries one unit of its last decimal.
    const bool ok1 = std::fabs(row_full - 0.86855) <= 5e-5 && std::fabs(row_full - 0.869) <= 5e-4;
    const bool ok2 = std::fabs(row_s - 0.30736) <= 5e-5 && std::fabs(row_s - 0.308) <= 1e-3;
    verdict("criterion 1", ok1 && ok2,
            fmt("fepe(0.892,1.027)=%.4f vs 0.869; fepe(0.860,2.798)=%.4f vs 0.308", row_full, row_s));
}

// ---------------------------------------------------------------------------
// criterion 2: correlation volume vs quadruple-loop oracle
// ---------------------------------------------------------------------------
void criterion_2() {
    begin("criterion 2: correlation-volume oracle, 50 random instances");
    Rng rng(2024);
    double max_err = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const int h = 1 + static_cast<int>(rng.below(6));
        const int w = 1 + static_cast<int>(rng.below(6));
        const int c = 1 + static_cast<int>(rng.below(8));
        Tensor f0 = testutil::random_tensor(rng, {c, h, w});
        Tensor f1 = testutil::random_tensor(rng, {c, h, w});
        Var out = correlation_volume(Var(f0), Var(f1), true);
        const double scl = 1.0 / std::sqrt(static_cast<double>(c));
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                for (int k = 0; k < h; ++k)
                    for (int l = 0; l < w; ++l) {
                        double s = 0.0;
                        for (int ch = 0; ch < c; ++ch) s += f0.at(ch, i, j) * f1.at(ch, k, l);
                        max_err = std::max(max_err,
                                           std::fabs(out.value().at(i * w + j, k, l) - s * scl));
                    }
    }
    verdict("criterion 2", max_err <= 1e-5, fmt("max abs err %.2e (tol 1e-5)", max_err));
}

// ---------------------------------------------------------------------------
// criterion 3: warp identity and scalar-oracle agreement
// ---------------------------------------------------------------------------
void criterion_3() {
    begin("criterion 3: warp identity + bilinear oracle");
    Rng rng(3033);
    bool identity_ok = true;
    for (int trial = 0; trial < 20; ++trial) {
        const int h = 16 + 8 * static_cast<int>(rng.below(3));
        const int w = 16 + 8 * static_cast<int>(rng.below(3));
        Image img(testutil::random_image_tensor(rng, h, w));
        Image out = cd::warp(img, FlowField::zero(h, w));
        for (long i = 0; i < img.data.numel(); ++i)
            if (out.data[i] != img.data[i]) identity_ok = false;
    }
    double max_err = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const int h = 16, w = 24;
        Image img(testutil::random_image_tensor(rng, h, w));
        FlowField flow = FlowField::zero(h, w);
        for (long i = 0; i < flow.data.numel(); ++i) flow.data[i] = rng.uniform(-4.0, 4.0);
        Image out = cd::warp(img, flow);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double sx = std::min(std::max(x + flow.u(y, x), 0.0), w - 1.0);
                double sy = std::min(std::max(y + flow.v(y, x), 0.0), h - 1.0);
                const int x0 = static_cast<int>(sx), y0 = static_cast<int>(sy);
                const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
                const double fxw = sx - x0, fyw = sy - y0;
                for (int ch = 0; ch < 3; ++ch) {
                    const double expect =
                        (1 - fyw) * ((1 - fxw) * img.data.at(ch, y0, x0) + fxw * img.data.at(ch, y0, x1)) +
                        fyw * ((1 - fxw) * img.data.at(ch, y1, x0) + fxw * img.data.at(ch, y1, x1));
                    max_err = std::max(max_err, std::fabs(out.data.at(ch, y, x) - expect));
                }
            }
    }
    verdict("criterion 3", identity_ok && max_err <= 1e-6,
            fmt("identity %s, oracle max err %.2e (tol 1e-6)", identity_ok ? "bit-exact" : "BROKEN",
                max_err));
}

// ---------------------------------------------------------------------------
// criterion 4: loss correctness
// ---------------------------------------------------------------------------
void criterion_4() {
    begin("criterion 4: loss correctness");
    Rng rng(4044);
    objectives::LossWeights w;

    // perfect binary prediction -> 0
    Tensor label({1, 8, 8});
    for (long i = 0; i < label.numel(); ++i) label[i] = rng.uniform() < 0.3 ? 1.0 : 0.0;
    const double perfect = objectives::tversky_loss(Var(label), label, w).value()[0];
    bool ok = std::fabs(perfect) < 1e-9;

    // Dice equivalence at alpha=beta=0.5 over 100 random pairs
    objectives::LossWeights dheavy = w;
    dheavy.alpha = dheavy.beta = 0.5;
    double max_dice_err = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        Tensor pred({1, 6, 6}), gt({1, 6, 6});
        for (long i = 0; i < pred.numel(); ++i) {
            pred[i] = rng.uniform();
            gt[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
        }
        const double tv = objectives::tversky_loss(Var(pred), gt, dheavy).value()[0];
        double inter = 0.0, sp = 0.0, sl = 0.0;
        for (long i = 0; i < pred.numel(); ++i) {
            inter += pred[i] * gt[i];
            sp += pred[i];
            sl += gt[i];
        }
        const double dice = 1.0 - (2 * inter + 2 * dheavy.smoothing) / (sp + sl + 2 * dheavy.smoothing);
        max_dice_err = std::max(max_dice_err, std::fabs(tv - dice));
    }
    ok = ok && max_dice_err <= 1e-9;

    // l2 invariance to label values inside masked regions (exact)
    Tensor f = testutil::random_tensor(rng, {2, 8, 8}, -2.0, 2.0);
    Tensor g = testutil::random_tensor(rng, {2, 8, 8}, -2.0, 2.0);
    Tensor mask({1, 8, 8});
    for (long i = 0; i < mask.numel(); ++i) mask[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
    const double base = objectives::l2_flow_loss(Var(f), g, mask).value()[0];
    Tensor g2 = g;
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
            if (mask.at(0, y, x) == 1.0) {
                g2.at(0, y, x) = rng.uniform(-1e6, 1e6);
                g2.at(1, y, x) = rng.uniform(-1e6, 1e6);
            }
    const double perturbed = objectives::l2_flow_loss(Var(f), g2, mask).value()[0];
    ok = ok && perturbed == base;

    verdict("criterion 4", ok,
            fmt("perfect=%.1e, dice max err=%.1e, l2 invariance %s", perfect, max_dice_err,
                perturbed == base ? "exact" : "BROKEN"));
}

// ---------------------------------------------------------------------------
// criterion 5: finite-difference gradient checks
// ---------------------------------------------------------------------------
void criterion_5() {
    begin("criterion 5: gradient checks vs central finite differences");
    Rng rng(5055);
    std::vector<std::string> details;
    bool ok = true;

    of::OfConfig ofc = of::OfConfig::toy();
    cd::CdConfig cdc = cd::CdConfig::toy();
    nn::ParamStore ps;
    Rng init(55);
    of::OfBranch ofb(ps, init, ofc);
    cd::CdBranch cdb(ps, init, cdc);
    // zero-initialized heads would hide gradient defects; perturb them
    for (const char* name : {"of.update.head2.w", "of.update.mask2.w", "cd.head.out.w"}) {
        Var v = ps.get(name);
        for (long i = 0; i < v.value().numel(); ++i) v.mutable_value()[i] = rng.uniform(-0.05, 0.05);
    }

    auto run_check = [&](const char* tag, auto&& fn, std::vector<Tensor> inputs, double tol) {
        auto res = testutil::grad_check(fn, std::move(inputs), rng, 20);
        details.push_back(fmt("%s=%.1e", tag, res.max_rel_err));
        if (!res.ok(tol)) {
            ok = false;
            details.back() += " FAIL(" + res.worst + ")";
        }
    };

    Tensor img8 = testutil::random_tensor(rng, {3, 8, 8}, 0.0, 1.0);
    Tensor proj_f(std::vector<int>{ofc.feature_channels, 1, 1});
    for (long i = 0; i < proj_f.numel(); ++i) proj_f[i] = rng.uniform(-1.0, 1.0);
    run_check(
        "encoder",
        [&](const std::vector<Var>& v) { return sum_all(ofb.fnet(v[0]) * Var(proj_f)); }, {img8}, 1e-3);

    const int gh = 4, gw = 4;
    Tensor hidden = testutil::random_tensor(rng, {ofc.hidden_channels, gh, gw}, -0.9, 0.9);
    Tensor context = testutil::random_tensor(rng, {ofc.context_channels, gh, gw}, 0.0, 1.0);
    Tensor corr = testutil::random_tensor(rng, {ofc.corr_enc_channels, gh, gw});
    Tensor flowf = testutil::random_tensor(rng, {ofc.flow_enc_channels, gh, gw});
    run_check(
        "gru",
        [&](const std::vector<Var>& v) {
            of::GruState st{v[0], v[1]};
            auto [ns, delta] = ofb.update.gru_update(st, v[2], v[3]);
            return mean_all(ns.hidden) + mean_all(delta);
        },
        {hidden, context, corr, flowf}, 1e-3);

    Tensor proj_b(std::vector<int>{cdc.f0_channels, 1, 1});
    for (long i = 0; i < proj_b.numel(); ++i) proj_b[i] = rng.uniform(-1.0, 1.0);
    run_check(
        "backbone",
        [&](const std::vector<Var>& v) { return sum_all(cdb.backbone(v[0]) * Var(proj_b)); }, {img8},
        1e-3);

    Tensor f0 = testutil::random_tensor(rng, {cdc.f0_channels, 1, 1});
    run_check(
        "pyramid_head", [&](const std::vector<Var>& v) { return mean_all(cdb.head(v[0])); }, {f0}, 1e-3);

    cd::CdConfig open_mask = cdc;
    open_mask.mask_tau = 50.0; // keep the binary mask constant under FD probes
    nn::ParamStore ps2;
    Rng init2(56);
    cd::CdBranch cdb2(ps2, init2, open_mask);
    {
        Var v = ps2.get("cd.head.out.w");
        for (long i = 0; i < v.value().numel(); ++i) v.mutable_value()[i] = rng.uniform(-0.05, 0.05);
    }
    Tensor t0 = testutil::random_tensor(rng, {3, 8, 8}, 0.0, 1.0);
    Tensor t1 = testutil::random_tensor(rng, {3, 8, 8}, 0.0, 1.0);
    Tensor flow(std::vector<int>{2, 8, 8});
    for (long i = 0; i < flow.numel(); ++i) flow[i] = rng.uniform(-1.2, 1.2) + 0.29;
    run_check(
        "cd_forward_thru_warp",
        [&](const std::vector<Var>& v) { return mean_all(cdb2.forward(v[0], v[1], v[2])); },
        {t0, t1, flow}, 1e-2);

    std::string all;
    for (const auto& d : details) all += d + " ";
    verdict("criterion 5", ok, all);
}

// ---------------------------------------------------------------------------
// criterion 6: GRU gate limits
// ---------------------------------------------------------------------------
void criterion_6() {
    begin("criterion 6: GRU gate limits");
    Rng rng(6066);
    of::OfConfig ofc = of::OfConfig::toy();
    nn::ParamStore ps;
    Rng init(66);
    of::OfBranch ofb(ps, init, ofc);
    const int h = 4, w = 4;
    Tensor hidden = testutil::random_tensor(rng, {ofc.hidden_channels, h, w}, -0.9, 0.9);
    of::GruState st;
    st.hidden = Var(hidden);
    st.context = Var(testutil::random_tensor(rng, {ofc.context_channels, h, w}, 0.0, 1.0));
    Var corr(testutil::random_tensor(rng, {ofc.corr_enc_channels, h, w}));
    Var flowf(testutil::random_tensor(rng, {ofc.flow_enc_channels, h, w}));

    auto set_gate = [&](double bias) {
        ps.get("of.update.wz.w").mutable_value().fill(0.0);
        ps.get("of.update.wz.b").mutable_value().fill(bias);
    };
    set_gate(-20.0); // gate closed: h_t == h_{t-1}
    auto [ns_closed, d_closed] = ofb.update.gru_update(st, corr, flowf);
    (void)d_closed;
    double drift_closed = 0.0;
    for (long i = 0; i < hidden.numel(); ++i)
        drift_closed = std::max(drift_closed, std::fabs(ns_closed.hidden.value()[i] - hidden[i]));

    set_gate(20.0); // gate open: h_t == candidate state
    auto [ns_open, d_open] = ofb.update.gru_update(st, corr, flowf);
    (void)d_open;
    // candidate recomputed from the gate pieces directly
    Var x = concat_channels({corr, flowf, st.context});
    Var hx = concat_channels({st.hidden, x});
    Var r = sigmoid(ofb.update.wr(hx));
    Var h_tilde = tanh_(ofb.update.wh(concat_channels({r * st.hidden, x})));
    double drift_open = 0.0;
    for (long i = 0; i < hidden.numel(); ++i)
        drift_open = std::max(drift_open, std::fabs(ns_open.hidden.value()[i] - h_tilde.value()[i]));

    const bool ok = drift_closed < 1e-6 && drift_open < 1e-6;
    verdict("criterion 6", ok,
            fmt("closed-gate drift %.2e, open-gate drift from candidate %.2e (tol 1e-6)", drift_closed,
                drift_open));
}

// ---------------------------------------------------------------------------
// criterion 7: forge determinism and label exactness
// ---------------------------------------------------------------------------
forge::ForgeConfig toy_forge_config(const fs::path& tiny_json, int samples) {
    std::ifstream f(tiny_json);
    nlohmann::json j;
    f >> j;
    forge::ForgeConfig fc = forge::ForgeConfig::from_json(j.at("forge"));
    fc.background_count = samples;
    fc.sample_count = samples;
    return fc;
}

void criterion_7(const fs::path& tiny_json) {
    begin("criterion 7: forge determinism + label exactness (10 samples)");
    fs::path dir = work_dir() / "c7";
    fs::remove_all(dir);
    forge::ForgeConfig fc = toy_forge_config(tiny_json, 10);
    forge::make_procedural_sources((dir / "src").string(), fc);
    auto sources = forge::load_sources((dir / "src" / "backgrounds.json").string(),
                                       (dir / "src" / "cutouts.json").string());
    auto m1 = forge::forge_dataset(sources, fc, (dir / "d1").string());
    auto m2 = forge::forge_dataset(sources, fc, (dir / "d2").string());

    auto bytes = [](const fs::path& p) {
        std::ifstream f2(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    };
    bool identical = true;
    for (const auto& e : m1.entries)
        for (const char* f2 : {"t0.png", "t1.png", "flow.flo", "change.png"})
            if (bytes(dir / "d1" / e.id / f2) != bytes(dir / "d2" / e.id / f2)) identical = false;

    // label exactness by construction replay
    bool labels_exact = true;
    Rng base(fc.seed);
    for (std::size_t i = 0; i < m1.entries.size(); ++i) {
        Rng replay = base.fork(i);
        const int n_paste =
            fc.paste_min +
            static_cast<int>(replay.below(static_cast<std::uint64_t>(fc.paste_max - fc.paste_min + 1)));
        std::vector<forge::ObjectCutout> cuts;
        for (int k = 0; k < n_paste; ++k) {
            const std::size_t idx = replay.below(sources.cutouts.size());
            forge::ObjectCutout raw;
            raw.rgba = read_png_rgba((fs::path(sources.root) / sources.cutouts[idx]).string());
            cuts.push_back(forge::transform_cutout(raw, fc, replay));
        }
        Tensor expect({1, fc.out_height, fc.out_width});
        for (const auto& t : cuts) {
            const int px =
                static_cast<int>(replay.below(static_cast<std::uint64_t>(fc.out_width - t.width() + 1)));
            const int py =
                static_cast<int>(replay.below(static_cast<std::uint64_t>(fc.out_height - t.height() + 1)));
            for (int y = 0; y < t.height(); ++y)
                for (int x = 0; x < t.width(); ++x)
                    if (t.rgba.at(3, y, x) >= 0.5) expect.at(0, py + y, px + x) = 1.0;
        }
        Tensor stored = read_png_gray((dir / "d1" / m1.entries[i].id / "change.png").string());
        for (long p = 0; p < stored.numel(); ++p)
            if (stored[p] != expect[p]) labels_exact = false;
    }
    verdict("criterion 7", identical && labels_exact,
            fmt("trees byte-identical: %s, labels replay-exact: %s", identical ? "yes" : "NO",
                labels_exact ? "yes" : "NO"));
}

// ---------------------------------------------------------------------------
// criterion 8: toy training gate
// ---------------------------------------------------------------------------
harness::RunConfig tiny_run_config(const fs::path& tiny_json) {
    return harness::RunConfig::load(tiny_json.string());
}

void criterion_8(const fs::path& tiny_json) {
    begin("criterion 8: toy training gate (4 samples, 200 epochs)");
    fs::path dir = work_dir() / "c8";
    fs::remove_all(dir);
    forge::ForgeConfig fc = toy_forge_config(tiny_json, 4);
    forge::make_procedural_sources((dir / "src").string(), fc);
    auto sources = forge::load_sources((dir / "src" / "backgrounds.json").string(),
                                       (dir / "src" / "cutouts.json").string());
    auto data = forge::forge_dataset(sources, fc, (dir / "data").string());

    harness::RunConfig cfg = tiny_run_config(tiny_json);
    cfg.out_dir = (dir / "run").string();
    harness::Model model(cfg.of_cfg, cfg.cd_cfg, cfg.seed);
    auto result = harness::train(cfg, data, model);

    const auto& agg = result.train_metrics.back();
    const double f1 = agg.f1.value_or(0.0);
    const double mepe = agg.mepe.value_or(1e9);
    bool decreasing = true;
    std::string bump;
    for (std::size_t e = 1; e < std::min<std::size_t>(10, result.history.size()); ++e)
        if (!(result.history[e].loss < result.history[e - 1].loss)) {
            decreasing = false;
            bump = fmt(" (bump at epoch %zu: %.5f -> %.5f)", e + 1, result.history[e - 1].loss,
                       result.history[e].loss);
        }
    const bool ok = f1 > 0.95 && mepe < 1.0 && decreasing;
    verdict("criterion 8", ok,
            fmt("train F1=%.4f (>0.95), mEPE=%.4f (<1.0), first-10-epoch loss strictly decreasing: %s%s",
                f1, mepe, decreasing ? "yes" : "NO", bump.c_str()));
}

// ---------------------------------------------------------------------------
// criterion 9: ablation table shape (+ soft directional report)
// ---------------------------------------------------------------------------
void criterion_9(const fs::path& tiny_json) {
    begin("criterion 9: ablation table shape");
    fs::path dir = work_dir() / "c9";
    fs::remove_all(dir);
    forge::ForgeConfig fc = toy_forge_config(tiny_json, 4);
    fc.seed += 1;
    forge::make_procedural_sources((dir / "src").string(), fc);
    auto sources = forge::load_sources((dir / "src" / "backgrounds.json").string(),
                                       (dir / "src" / "cutouts.json").string());
    auto data = forge::forge_dataset(sources, fc, (dir / "data").string());

    harness::RunConfig cfg = tiny_run_config(tiny_json);
    cfg.epochs = 40; // shape check needs a short run, not a converged one
    cfg.lr_decay_epoch = 0;
    cfg.metric_every = 0;
    auto table = harness::ablate(cfg, data, data, (dir / "out").string());

    bool shape_ok = table.rows.size() == 3;
    if (shape_ok) {
        const auto& a = table.rows[0]; // of_only: mEPE only
        const auto& b = table.rows[1]; // cd_only: F1 only
        const auto& c = table.rows[2]; // both: all three
        shape_ok = a.branch == "of_only" && !a.f1 && a.mepe && !a.fepe &&
                   b.branch == "cd_only" && b.f1 && !b.mepe && !b.fepe &&
                   c.branch == "both" && c.f1 && c.mepe && c.fepe;
    }
    verdict("criterion 9", shape_ok, "of_only: mEPE only; cd_only: F1 only; both: F1+mEPE+FEPE");
    if (shape_ok) {
        const bool f1_dir = *table.rows[2].f1 >= *table.rows[1].f1;
        const bool mepe_dir = *table.rows[2].mepe <= *table.rows[0].mepe;
        std::printf("[INFO] criterion 9 soft directional check (reported, not gated): "
                    "both F1 %.4f vs cd_only %.4f (%s); both mEPE %.4f vs of_only %.4f (%s)\n",
                    *table.rows[2].f1, *table.rows[1].f1, f1_dir ? "consistent" : "not at toy scale",
                    *table.rows[2].mepe, *table.rows[0].mepe, mepe_dir ? "consistent" : "not at toy scale");
    }
}

// ---------------------------------------------------------------------------
// criterion 10: checkpoint round trip
// ---------------------------------------------------------------------------
void criterion_10() {
    begin("criterion 10: checkpoint round trip");
    fs::path dir = work_dir() / "c10";
    fs::remove_all(dir);
    fs::create_directories(dir);
    harness::RunConfig cfg; // toy preset
    cfg.of_cfg.iterations = 3;
    harness::Model model(cfg.of_cfg, cfg.cd_cfg, 99);
    Rng rng(1001);
    for (auto& [name, p] : model.params.all())
        for (long i = 0; i < p.value().numel(); ++i) p.mutable_value()[i] += 0.02 * rng.uniform(-1.0, 1.0);

    Tensor t0 = testutil::random_image_tensor(rng, 64, 64);
    Tensor t1 = testutil::random_image_tensor(rng, 64, 64);
    NoGradGuard ng;
    auto ref = model.forward(Var(t0), Var(t1), harness::BranchSelector::both);
    harness::save_checkpoint((dir / "m.fckpt").string(), model, cfg, nullptr, 3, {});
    auto loaded = harness::load_checkpoint((dir / "m.fckpt").string());
    auto out = loaded.model->forward(Var(t0), Var(t1), harness::BranchSelector::both);
    bool ok = true;
    for (long i = 0; i < ref.flow->value().numel(); ++i)
        if (out.flow->value()[i] != ref.flow->value()[i]) ok = false;
    for (long i = 0; i < ref.change->value().numel(); ++i)
        if (out.change->value()[i] != ref.change->value()[i]) ok = false;
    verdict("criterion 10", ok, ok ? "save->load->forward bit-exact" : "outputs differ after reload");
}

} // namespace

int main(int argc, char** argv) {
    fs::path tiny_json = fs::path(PROJECT_SOURCE_DIR) / "configs" / "tiny.json";
    if (argc > 1) tiny_json = argv[1];
    if (!fs::exists(tiny_json)) {
        std::fprintf(stderr, "tiny preset config not found: %s\n", tiny_json.string().c_str());
        return 2;
    }
    fs::create_directories(work_dir());

    criterion_1();
    criterion_2();
    criterion_3();
    criterion_4();
    criterion_5();
    criterion_6();
    criterion_7(tiny_json);
    criterion_8(tiny_json);
    criterion_9(tiny_json);
    criterion_10();

    std::printf("%d/10 criteria passed\n", 10 - g_failures);
    return g_failures == 0 ? 0 : 1;
}
