// SPDX-License-Identifier: Apache-2.0
#include "flowcd/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "flowcd/harness.hpp"
#include "flowcd/image_io.hpp"

namespace fs = std::filesystem;

namespace flowcd::cli {

namespace {

std::string default_out_root() {
    if (const char* env = std::getenv("FLOWCD_OUT")) return env;
    return "out";
}

nlohmann::json load_json(const std::string& path) {
    if (!fs::exists(path)) throw ValidationError("config file missing: " + path);
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed config " + path + ": " + e.what());
    }
    return j;
}

std::string fmt_opt(const std::optional<double>& v) {
    if (!v) return "-";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", *v);
    return buf;
}

void write_metrics_files(const std::vector<objectives::MetricReport>& reports, const std::string& out_dir) {
    fs::create_directories(out_dir);
    std::ofstream csv(fs::path(out_dir) / "metrics.csv");
    csv << objectives::metrics_csv_header() << "\n";
    for (const auto& r : reports) csv << objectives::metrics_csv_row(r) << "\n";
    std::ofstream js(fs::path(out_dir) / "metrics.json");
    js << objectives::metrics_to_json(reports) << "\n";
}

harness::LoadedCheckpoint load_ckpt_arg(const std::string& path) {
    if (!fs::exists(path)) throw ValidationError("checkpoint missing: " + path);
    return harness::load_checkpoint(path);
}

int cmd_forge(const std::string& config_path, std::string out_dir, const std::string& sources_dir,
              std::optional<std::uint64_t> seed, std::optional<int> count) {
    nlohmann::json j = load_json(config_path);
    forge::ForgeConfig fc =
        j.contains("forge") ? forge::ForgeConfig::from_json(j["forge"]) : forge::ForgeConfig::from_json(j);
    if (seed) fc.seed = *seed;
    if (count) fc.sample_count = *count;
    if (out_dir.empty()) out_dir = (fs::path(default_out_root()) / "dataset").string();

    std::string src = sources_dir;
    if (src.empty()) {
        src = (fs::path(out_dir) / "sources").string();
        if (!fs::exists(fs::path(src) / "backgrounds.json")) forge::make_procedural_sources(src, fc);
    }
    auto sources = forge::load_sources((fs::path(src) / "backgrounds.json").string(),
                                       (fs::path(src) / "cutouts.json").string());
    auto manifest = forge::forge_dataset(sources, fc, out_dir);
    std::printf("forged %zu samples (split=%s, seed=%llu) -> %s\n", manifest.entries.size(),
                manifest.split.c_str(), static_cast<unsigned long long>(fc.seed),
                (fs::path(out_dir) / "manifest.json").string().c_str());
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_path, std::string out_dir,
              std::optional<int> epochs, std::optional<std::uint64_t> seed, const std::string& branch) {
    harness::RunConfig cfg = harness::RunConfig::load(config_path);
    if (epochs) cfg.epochs = *epochs;
    if (seed) cfg.seed = *seed;
    if (!branch.empty()) cfg.branch = harness::branch_from_string(branch);
    if (!data_path.empty()) cfg.train_manifest = data_path;
    if (cfg.train_manifest.empty()) throw ValidationError("train: no dataset manifest given");
    cfg.out_dir = out_dir.empty() ? (fs::path(default_out_root()) / "train").string() : out_dir;

    auto data = forge::load_manifest(cfg.train_manifest);
    harness::Model model(cfg.of_cfg, cfg.cd_cfg, cfg.seed);
    auto result = harness::train(cfg, data, model);
    const auto& agg = result.train_metrics.back();
    std::printf("trained %d epochs (branch=%s); checkpoint: %s\n", cfg.epochs,
                harness::to_string(cfg.branch).c_str(), result.checkpoint_path.c_str());
    std::printf("train metrics: F1=%s mEPE=%s FEPE=%s\n", fmt_opt(agg.f1).c_str(), fmt_opt(agg.mepe).c_str(),
                fmt_opt(agg.fepe).c_str());
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path, std::string out_dir,
             std::optional<double> threshold, std::optional<double> delta, std::optional<double> epsilon) {
    auto ck = load_ckpt_arg(ckpt_path);
    auto data = forge::load_manifest(data_path);
    const double th = threshold.value_or(ck.config.eval_threshold);
    const double de = delta.value_or(ck.config.eval_delta);
    const double ep = epsilon.value_or(ck.config.eval_epsilon);
    auto outcome = harness::evaluate(*ck.model, data, de, ep, th, ck.config.branch);
    if (out_dir.empty()) out_dir = (fs::path(default_out_root()) / "eval").string();
    write_metrics_files(outcome.reports, out_dir);

    const auto& agg = outcome.reports.back();
    std::printf("%-12s %-8s %-8s %-8s\n", "samples", "F1", "mEPE", "FEPE");
    std::printf("%-12zu %-8s %-8s %-8s\n", outcome.reports.size() - 1, fmt_opt(agg.f1).c_str(),
                fmt_opt(agg.mepe).c_str(), fmt_opt(agg.fepe).c_str());
    if (agg.undefined_motion) std::printf("note: undefined-motion flag set (aggregate mEPE is zero)\n");
    for (const auto& e : outcome.errors) std::fprintf(stderr, "sample error: %s\n", e.c_str());
    return outcome.errors.empty() ? 0 : 1;
}

int cmd_ablate(const std::string& config_path, const std::string& data_path, const std::string& eval_path,
               std::string out_dir, std::optional<int> epochs, std::optional<std::uint64_t> seed) {
    harness::RunConfig cfg = harness::RunConfig::load(config_path);
    if (epochs) cfg.epochs = *epochs;
    if (seed) cfg.seed = *seed;
    if (!data_path.empty()) cfg.train_manifest = data_path;
    if (cfg.train_manifest.empty()) throw ValidationError("ablate: no dataset manifest given");
    auto train_data = forge::load_manifest(cfg.train_manifest);
    auto eval_data = eval_path.empty() ? train_data : forge::load_manifest(eval_path);
    if (out_dir.empty()) out_dir = (fs::path(default_out_root()) / "ablate").string();

    auto table = harness::ablate(cfg, train_data, eval_data, out_dir);

    std::printf("%-10s %-8s %-8s %-8s\n", "branch", "F1", "mEPE", "FEPE");
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : table.rows) {
        std::printf("%-10s %-8s %-8s %-8s\n", r.branch.c_str(), fmt_opt(r.f1).c_str(),
                    fmt_opt(r.mepe).c_str(), fmt_opt(r.fepe).c_str());
        nlohmann::json row{{"branch", r.branch}};
        if (r.f1) row["f1"] = *r.f1;
        if (r.mepe) row["mepe"] = *r.mepe;
        if (r.fepe) row["fepe"] = *r.fepe;
        rows.push_back(std::move(row));
    }
    fs::create_directories(out_dir);
    std::ofstream js(fs::path(out_dir) / "ablation.json");
    js << rows.dump(2) << "\n";
    return 0;
}

int cmd_bench(const std::string& ckpt_path, int pairs, int warmup, int height, int width,
              std::uint64_t seed) {
    auto ck = load_ckpt_arg(ckpt_path);
    auto report = harness::bench(*ck.model, pairs, warmup, height, width, seed);
    std::printf("pairs=%d warmup=%d mean_inference_s=%.6f fps=%.3f device=%s\n", report.pairs, report.warmup,
                report.mean_seconds, report.fps, report.device.c_str());
    return 0;
}

int cmd_infer(const std::string& ckpt_path, const std::string& t0, const std::string& t1,
              std::string out_dir, std::optional<double> threshold) {
    for (const auto& p : {t0, t1})
        if (!fs::exists(p)) throw ValidationError("input image missing: " + p);
    auto ck = load_ckpt_arg(ckpt_path);
    if (out_dir.empty()) out_dir = (fs::path(default_out_root()) / "infer").string();
    const double th = threshold.value_or(ck.config.cd_cfg.sigmoid_threshold);
    auto paths = harness::infer_pair(*ck.model, t0, t1, out_dir, th);
    std::printf("wrote %s, %s, %s\n", paths.flow_flo.c_str(), paths.flow_png.c_str(),
                paths.change_png.c_str());
    return 0;
}

int cmd_viz(const std::string& sample_dir, std::string out_path) {
    if (!fs::exists(sample_dir)) throw ValidationError("sample directory missing: " + sample_dir);
    BitemporalSample s = forge::read_sample(sample_dir, fs::path(sample_dir).filename().string());
    const int h = s.t0.height(), w = s.t0.width();
    FlowColorCode fc = flow_to_color(s.flow_label);

    Tensor panel({3, h, 4 * w});
    auto blit = [&](const Tensor& src, int slot) {
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    panel.at(c, y, slot * w + x) = src.size(0) == 1 ? src.at(0, y, x) : src.at(c, y, x);
    };
    blit(s.t0.data, 0);
    blit(s.t1.data, 1);
    blit(fc.data, 2);
    blit(s.change_label.data, 3);

    if (out_path.empty()) out_path = (fs::path(default_out_root()) / "panel.png").string();
    fs::create_directories(fs::path(out_path).parent_path().empty() ? "." : fs::path(out_path).parent_path());
    write_png_rgb(out_path, panel);
    std::printf("wrote %s (%dx%d)\n", out_path.c_str(), 4 * w, h);
    return 0;
}

} // namespace

int run(int argc, const char* const* argv) {
    CLI::App app{"Flow-CDNet: joint slow (optical flow) and fast (binary) change detection"};
    app.require_subcommand(1);

    std::string config, data, eval_data, out, sources, ckpt, t0, t1, sample_dir, branch;
    std::optional<std::uint64_t> seed;
    std::optional<int> epochs, count;
    std::optional<double> threshold, delta, epsilon;
    int pairs = 10, warmup = 2, bh = 64, bw = 64;
    std::uint64_t bench_seed = 1;

    auto* cf = app.add_subcommand("forge", "generate a synthetic bitemporal dataset");
    cf->add_option("--config", config, "forge config (json)")->required();
    cf->add_option("--out", out, "output dataset directory");
    cf->add_option("--sources", sources, "directory with backgrounds.json/cutouts.json");
    cf->add_option("--seed", seed, "override config seed");
    cf->add_option("--count", count, "override sample count");

    auto* ct = app.add_subcommand("train", "train the dual-branch detector");
    ct->add_option("--config", config, "run config (json)")->required();
    ct->add_option("--data", data, "training dataset manifest");
    ct->add_option("--out", out, "output directory");
    ct->add_option("--epochs", epochs, "override epoch count");
    ct->add_option("--seed", seed, "override seed");
    ct->add_option("--branch", branch, "branch selector: of_only|cd_only|both");

    auto* ce = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    ce->add_option("--checkpoint", ckpt, "checkpoint path")->required();
    ce->add_option("--data", data, "dataset manifest")->required();
    ce->add_option("--out", out, "output directory");
    ce->add_option("--threshold", threshold, "binarization threshold");
    ce->add_option("--delta", delta, "motion-region threshold (px)");
    ce->add_option("--epsilon", epsilon, "FEPE perturbation");

    auto* ca = app.add_subcommand("ablate", "three-row branch ablation");
    ca->add_option("--config", config, "run config (json)")->required();
    ca->add_option("--data", data, "training dataset manifest");
    ca->add_option("--eval-data", eval_data, "evaluation manifest (defaults to training data)");
    ca->add_option("--out", out, "output directory");
    ca->add_option("--epochs", epochs, "override epoch count");
    ca->add_option("--seed", seed, "override seed");

    auto* cb = app.add_subcommand("bench", "inference timing");
    cb->add_option("--checkpoint", ckpt, "checkpoint path")->required();
    cb->add_option("--pairs", pairs, "timed pairs");
    cb->add_option("--warmup", warmup, "warmup passes (excluded from timing)");
    cb->add_option("--height", bh, "input height");
    cb->add_option("--width", bw, "input width");
    cb->add_option("--seed", bench_seed, "input seed");

    auto* ci = app.add_subcommand("infer", "run on one image pair");
    ci->add_option("--checkpoint", ckpt, "checkpoint path")->required();
    ci->add_option("--t0", t0, "first image (png)")->required();
    ci->add_option("--t1", t1, "second image (png)")->required();
    ci->add_option("--out", out, "output directory");
    ci->add_option("--threshold", threshold, "change mask threshold");

    auto* cv = app.add_subcommand("viz", "sample panel: t0 | t1 | flow | change");
    cv->add_option("--sample", sample_dir, "sample directory")->required();
    cv->add_option("--out", out, "output png path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2; // usage problems are validation failures
    }

    try {
        if (cf->parsed()) return cmd_forge(config, out, sources, seed, count);
        if (ct->parsed()) return cmd_train(config, data, out, epochs, seed, branch);
        if (ce->parsed()) return cmd_eval(ckpt, data, out, threshold, delta, epsilon);
        if (ca->parsed()) return cmd_ablate(config, data, eval_data, out, epochs, seed);
        if (cb->parsed()) return cmd_bench(ckpt, pairs, warmup, bh, bw, bench_seed);
        if (ci->parsed()) return cmd_infer(ckpt, t0, t1, out, threshold);
        if (cv->parsed()) return cmd_viz(sample_dir, out);
    } catch (const ValidationError& e) {
        std::fprintf(stderr, "validation error: %s\n", e.what());
        return 2;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numerical abort: %s\n", e.what());
        return 3;
    } catch (const IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}

} // namespace flowcd::cli
