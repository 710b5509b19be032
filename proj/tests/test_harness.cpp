// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "flowcd/harness.hpp"
#include "flowcd/image_io.hpp"
#include "testutil.hpp"

using namespace flowcd;
using namespace flowcd::harness;
namespace fs = std::filesystem;

namespace {

// A deliberately small net so harness-level tests stay fast.
RunConfig micro_config() {
    RunConfig cfg;
    cfg.of_cfg.feature_channels = 16;
    cfg.of_cfg.hidden_channels = 20;
    cfg.of_cfg.context_channels = 20;
    cfg.of_cfg.iterations = 2;
    cfg.of_cfg.lookup_radius = 2;
    cfg.of_cfg.corr_enc_channels = 24;
    cfg.of_cfg.flow_enc_channels = 8;
    cfg.cd_cfg = cd::CdConfig::toy();
    cfg.cd_cfg.f0_channels = 32;
    cfg.cd_cfg.fusion_channels = 32;
    cfg.of_lr = 1e-3;
    cfg.cd_lr = 1e-3;
    cfg.batch_size = 2;
    cfg.epochs = 2;
    cfg.metric_every = 0;
    cfg.seed = 17;
    return cfg;
}

fs::path fresh_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("flowcd_harness_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

forge::DatasetManifest tiny_dataset(const fs::path& dir, int n, std::uint64_t seed) {
    forge::ForgeConfig fc;
    fc.out_width = 64;
    fc.out_height = 64;
    fc.background_count = n;
    fc.cutout_count = 3;
    fc.sample_count = n;
    fc.paste_min = 1;
    fc.paste_max = 1;
    fc.seed = seed;
    forge::make_procedural_sources((dir / "src").string(), fc);
    auto sources = forge::load_sources((dir / "src" / "backgrounds.json").string(),
                                       (dir / "src" / "cutouts.json").string());
    return forge::forge_dataset(sources, fc, (dir / "data").string());
}

std::map<std::string, Tensor> snapshot_params(const Model& m) {
    std::map<std::string, Tensor> snap;
    for (const auto& [name, p] : m.params.all()) snap.emplace(name, p.value());
    return snap;
}

} // namespace

TEST_CASE("run config json round trip and preset defaults") {
    RunConfig cfg;
    CHECK(cfg.of_lr == 1e-5);
    CHECK(cfg.cd_lr == 1e-4);
    CHECK(cfg.batch_size == 4);
    CHECK(cfg.loss.alpha == 0.7);
    CHECK(cfg.loss.beta == 0.3);
    CHECK(cfg.loss.psi == 10.0);

    RunConfig full = RunConfig::from_json({{"preset", "full"}});
    CHECK(full.of_cfg.feature_channels == 256);
    CHECK(full.cd_cfg.fusion_channels == 512);
    CHECK(full.epochs == 1000);

    RunConfig micro = micro_config();
    RunConfig parsed = RunConfig::from_json(micro.to_json());
    CHECK(parsed.of_cfg.iterations == micro.of_cfg.iterations);
    CHECK(parsed.of_lr == micro.of_lr);
    CHECK(parsed.seed == micro.seed);
    CHECK(parsed.batch_size == micro.batch_size);

    CHECK_THROWS_AS(RunConfig::from_json({{"preset", "huge"}}), ValidationError);
}

TEST_CASE("adamw per-branch learning rates give 10x smaller OF deltas") {
    RunConfig cfg = micro_config();
    Model model(cfg.of_cfg, cfg.cd_cfg, 3);
    std::vector<nn::AdamW::Group> groups{{"of.", 1e-5}, {"cd.", 1e-4}};
    nn::AdamW opt(model.params, groups, 1e-4, /*weight_decay=*/0.0);

    auto before = snapshot_params(model);
    for (auto& [name, p] : model.params.all()) p.grad().fill(0.5);
    opt.step(0.0);

    double of_delta = -1.0, cd_delta = -1.0;
    for (const auto& [name, p] : model.params.all()) {
        const double d = std::fabs(p.value()[0] - before.at(name)[0]);
        if (name.rfind("of.", 0) == 0 && of_delta < 0) of_delta = d;
        if (name.rfind("cd.", 0) == 0 && cd_delta < 0) cd_delta = d;
    }
    REQUIRE(of_delta > 0.0);
    REQUIRE(cd_delta > 0.0);
    CHECK(of_delta / cd_delta == doctest::Approx(0.1).epsilon(1e-9));
}

TEST_CASE("checkpoint round trip is bit-exact on a fixed batch") {
    fs::path dir = fresh_dir("ckpt");
    RunConfig cfg = micro_config();
    Model model(cfg.of_cfg, cfg.cd_cfg, cfg.seed);

    // nudge weights away from init so the test is not vacuous
    Rng rng(91);
    for (auto& [name, p] : model.params.all())
        for (long i = 0; i < p.value().numel(); ++i) p.mutable_value()[i] += 0.01 * rng.uniform(-1.0, 1.0);

    Tensor t0 = testutil::random_image_tensor(rng, 64, 64);
    Tensor t1 = testutil::random_image_tensor(rng, 64, 64);
    Model::Outputs ref;
    {
        NoGradGuard ng;
        ref = model.forward(Var(t0), Var(t1), BranchSelector::both);
    }

    const std::string path = (dir / "m.fckpt").string();
    save_checkpoint(path, model, cfg, nullptr, 5, {});
    auto loaded = load_checkpoint(path);
    CHECK(loaded.epoch == 5);
    CHECK(loaded.config.seed == cfg.seed);

    NoGradGuard ng;
    auto out = loaded.model->forward(Var(t0), Var(t1), BranchSelector::both);
    for (long i = 0; i < ref.flow->value().numel(); ++i)
        CHECK(out.flow->value()[i] == ref.flow->value()[i]); // bitwise
    for (long i = 0; i < ref.change->value().numel(); ++i)
        CHECK(out.change->value()[i] == ref.change->value()[i]);
}

TEST_CASE("checkpoint preserves optimizer state") {
    fs::path dir = fresh_dir("ckpt_opt");
    RunConfig cfg = micro_config();
    Model model(cfg.of_cfg, cfg.cd_cfg, cfg.seed);
    std::vector<nn::AdamW::Group> groups{{"of.", cfg.of_lr}, {"cd.", cfg.cd_lr}};
    nn::AdamW opt(model.params, groups, cfg.cd_lr);
    for (auto& [name, p] : model.params.all()) p.grad().fill(0.25);
    opt.step(1.0);

    const std::string path = (dir / "m.fckpt").string();
    save_checkpoint(path, model, cfg, &opt, 1, {});
    auto loaded = load_checkpoint(path);
    REQUIRE(loaded.has_opt);
    CHECK(loaded.opt_step == 1);
    for (const auto& [name, m] : opt.m()) {
        const Tensor& lm = loaded.opt_m.at(name);
        for (long i = 0; i < m.numel(); ++i) CHECK(lm[i] == m[i]);
    }
}

TEST_CASE("corrupt checkpoint rejected") {
    fs::path dir = fresh_dir("ckpt_bad");
    std::ofstream f(dir / "bad.fckpt", std::ios::binary);
    f << "NOTACKPT garbage";
    f.close();
    CHECK_THROWS_AS(load_checkpoint((dir / "bad.fckpt").string()), IoError);
}

TEST_CASE("train epochs=0 computes metrics and keeps initial weights") {
    fs::path dir = fresh_dir("train0");
    auto data = tiny_dataset(dir, 2, 21);
    RunConfig cfg = micro_config();
    cfg.epochs = 0;
    cfg.out_dir = (dir / "run").string();
    Model model(cfg.of_cfg, cfg.cd_cfg, cfg.seed);
    Model fresh(cfg.of_cfg, cfg.cd_cfg, cfg.seed);
    auto result = train(cfg, data, model);
    for (const auto& [name, p] : model.params.all()) {
        const Tensor& q = fresh.params.get(name).value();
        for (long i = 0; i < q.numel(); ++i) CHECK(p.value()[i] == q[i]);
    }
    REQUIRE_FALSE(result.train_metrics.empty());
    CHECK(result.train_metrics.back().id == "aggregate");
    CHECK(fs::exists(cfg.out_dir + "/model.fckpt"));
}

TEST_CASE("training decreases loss and honors the branch selector") {
    fs::path dir = fresh_dir("train_sel");
    auto data = tiny_dataset(dir, 2, 22);

    SUBCASE("of_only trains only OF parameters, reports l2 only") {
        RunConfig cfg = micro_config();
        cfg.branch = BranchSelector::of_only;
        Model model(cfg.of_cfg, cfg.cd_cfg, cfg.seed);
        auto before = snapshot_params(model);
        auto result = train(cfg, data, model);
        double of_moved = 0.0, cd_moved = 0.0;
        for (const auto& [name, p] : model.params.all()) {
            double d = 0.0;
            const Tensor& b = before.at(name);
            for (long i = 0; i < b.numel(); ++i) d = std::max(d, std::fabs(p.value()[i] - b[i]));
            (name.rfind("of.", 0) == 0 ? of_moved : cd_moved) = std::max(
                name.rfind("of.", 0) == 0 ? of_moved : cd_moved, d);
        }
        CHECK(of_moved > 0.0);
        CHECK(cd_moved == 0.0);
        for (const auto& h : result.history) CHECK(h.tversky == 0.0);
        CHECK(result.train_metrics.back().mepe.has_value());
        CHECK_FALSE(result.train_metrics.back().f1.has_value());
    }

    SUBCASE("cd_only trains only CD parameters, reports tversky only") {
        RunConfig cfg = micro_config();
        cfg.branch = BranchSelector::cd_only;
        Model model(cfg.of_cfg, cfg.cd_cfg, cfg.seed);
        auto before = snapshot_params(model);
        auto result = train(cfg, data, model);
        double of_moved = 0.0, cd_moved = 0.0;
        for (const auto& [name, p] : model.params.all()) {
            double d = 0.0;
            const Tensor& b = before.at(name);
            for (long i = 0; i < b.numel(); ++i) d = std::max(d, std::fabs(p.value()[i] - b[i]));
            (name.rfind("of.", 0) == 0 ? of_moved : cd_moved) = std::max(
                name.rfind("of.", 0) == 0 ? of_moved : cd_moved, d);
        }
        CHECK(cd_moved > 0.0);
        CHECK(of_moved == 0.0);
        for (const auto& h : result.history) CHECK(h.l2 == 0.0);
        CHECK(result.train_metrics.back().f1.has_value());
        CHECK_FALSE(result.train_metrics.back().mepe.has_value());
    }

    SUBCASE("both trains everything with the weighted sum") {
        RunConfig cfg = micro_config();
        Model model(cfg.of_cfg, cfg.cd_cfg, cfg.seed);
        auto result = train(cfg, data, model);
        for (const auto& h : result.history)
            CHECK(h.loss == doctest::Approx(h.l2 + cfg.loss.psi * h.tversky).epsilon(1e-9));
        CHECK(result.train_metrics.back().f1.has_value());
        CHECK(result.train_metrics.back().mepe.has_value());
        CHECK(result.train_metrics.back().fepe.has_value());
    }
}

TEST_CASE("training is deterministic under a fixed seed") {
    fs::path dir = fresh_dir("train_det");
    auto data = tiny_dataset(dir, 2, 23);
    RunConfig cfg = micro_config();
    cfg.epochs = 1;
    Model m1(cfg.of_cfg, cfg.cd_cfg, cfg.seed);
    Model m2(cfg.of_cfg, cfg.cd_cfg, cfg.seed);
    auto r1 = train(cfg, data, m1);
    auto r2 = train(cfg, data, m2);
    CHECK(r1.history[0].loss == r2.history[0].loss); // bitwise reproducible
    for (const auto& [name, p] : m1.params.all()) {
        const Tensor& q = m2.params.get(name).value();
        for (long i = 0; i < q.numel(); ++i) CHECK(p.value()[i] == q[i]);
    }
}

TEST_CASE("evaluate with the perfect predictor and read-only guarantee") {
    fs::path dir = fresh_dir("eval");
    auto data = tiny_dataset(dir, 3, 24);

    SUBCASE("labels as predictions give F1=1, mEPE=0, FEPE=1/eps flagged") {
        auto outcome = evaluate_with(
            [](const BitemporalSample& s) {
                Prediction p;
                p.flow = s.flow_label.data;
                Tensor change = s.change_label.data;
                p.change = change;
                return p;
            },
            data, 0.5, 1e-6, 0.5);
        const auto& agg = outcome.reports.back();
        CHECK(*agg.f1 == doctest::Approx(1.0));
        CHECK(*agg.mepe == doctest::Approx(0.0));
        CHECK(*agg.fepe == doctest::Approx(1e6).epsilon(1e-6));
        CHECK(agg.undefined_motion);
    }

    SUBCASE("evaluate leaves parameters untouched") {
        RunConfig cfg = micro_config();
        Model model(cfg.of_cfg, cfg.cd_cfg, cfg.seed);
        auto before = snapshot_params(model);
        evaluate(model, data, 0.5, 1e-6, 0.5, BranchSelector::both);
        for (const auto& [name, p] : model.params.all()) {
            const Tensor& b = before.at(name);
            for (long i = 0; i < b.numel(); ++i) CHECK(p.value()[i] == b[i]);
        }
    }

    SUBCASE("empty manifest rejected") {
        forge::DatasetManifest empty;
        RunConfig cfg = micro_config();
        Model model(cfg.of_cfg, cfg.cd_cfg, cfg.seed);
        CHECK_THROWS_AS(evaluate(model, empty, 0.5, 1e-6, 0.5, BranchSelector::both), ValidationError);
    }
}

TEST_CASE("evaluate records per-sample failures and skips them") {
    fs::path dir = fresh_dir("eval_err");
    auto data = tiny_dataset(dir, 3, 27);
    int calls = 0;
    auto outcome = evaluate_with(
        [&calls](const BitemporalSample& s) -> Prediction {
            if (++calls == 2) throw ValidationError("deliberate shape mismatch");
            Prediction p;
            p.flow = s.flow_label.data;
            p.change = s.change_label.data;
            return p;
        },
        data, 0.5, 1e-6, 0.5);
    CHECK(outcome.errors.size() == 1);
    CHECK(outcome.reports.size() == 3); // 2 kept + aggregate
}

TEST_CASE("ablate emits exactly the populated/blank pattern") {
    fs::path dir = fresh_dir("ablate");
    auto data = tiny_dataset(dir, 2, 25);
    RunConfig cfg = micro_config();
    cfg.epochs = 1;
    auto table = ablate(cfg, data, data, (dir / "out").string());
    REQUIRE(table.rows.size() == 3);

    CHECK(table.rows[0].branch == "of_only");
    CHECK_FALSE(table.rows[0].f1.has_value());
    CHECK(table.rows[0].mepe.has_value());
    CHECK_FALSE(table.rows[0].fepe.has_value());

    CHECK(table.rows[1].branch == "cd_only");
    CHECK(table.rows[1].f1.has_value());
    CHECK_FALSE(table.rows[1].mepe.has_value());
    CHECK_FALSE(table.rows[1].fepe.has_value());

    CHECK(table.rows[2].branch == "both");
    CHECK(table.rows[2].f1.has_value());
    CHECK(table.rows[2].mepe.has_value());
    CHECK(table.rows[2].fepe.has_value());
}

TEST_CASE("bench definitional invariants") {
    RunConfig cfg = micro_config();
    Model model(cfg.of_cfg, cfg.cd_cfg, cfg.seed);
    auto r = bench(model, 3, 1, 64, 64, 5);
    CHECK(r.pairs == 3);
    CHECK(r.warmup == 1);
    CHECK(r.fps * r.mean_seconds == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(std::isfinite(r.fps));
    auto r2 = bench(model, 3, 0, 64, 64, 5); // warmup variation does not change counts
    CHECK(r2.pairs == r.pairs);
    CHECK_THROWS_AS(bench(model, 0, 0, 64, 64, 5), ValidationError);
}

TEST_CASE("infer_pair writes flow, color png and mask; deterministic") {
    fs::path dir = fresh_dir("infer");
    auto data = tiny_dataset(dir, 1, 26);
    RunConfig cfg = micro_config();
    Model model(cfg.of_cfg, cfg.cd_cfg, cfg.seed);
    const std::string t0 = data.resolve(data.entries[0].t0);
    const std::string t1 = data.resolve(data.entries[0].t1);
    auto p1 = infer_pair(model, t0, t1, (dir / "o1").string(), 0.5);
    auto p2 = infer_pair(model, t0, t1, (dir / "o2").string(), 0.5);
    for (const auto& p : {p1.flow_flo, p1.flow_png, p1.change_png}) CHECK(fs::exists(p));

    auto bytes = [](const std::string& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    };
    CHECK(bytes(p1.flow_flo) == bytes(p2.flow_flo));
    CHECK(bytes(p1.change_png) == bytes(p2.change_png));

    // outputs round-trip through the flow reader
    FlowField f = read_flo(p1.flow_flo);
    CHECK(f.height() == 64);
    CHECK(f.width() == 64);
}
