// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowcd/cd_branch.hpp"
#include "flowcd/forge.hpp"
#include "flowcd/nn.hpp"
#include "flowcd/objectives.hpp"
#include "flowcd/of_branch.hpp"

namespace flowcd::harness {

enum class BranchSelector { of_only, cd_only, both };

std::string to_string(BranchSelector b);
BranchSelector branch_from_string(const std::string& s);

struct RunConfig {
    std::string preset = "toy"; // "toy" | "full"
    of::OfConfig of_cfg = of::OfConfig::toy();
    cd::CdConfig cd_cfg = cd::CdConfig::toy();

    double of_lr = 1e-5;
    double cd_lr = 1e-4;
    double weight_decay = 1e-4;
    int batch_size = 4;
    int epochs = 200; // full preset default: 1000
    objectives::LossWeights loss;
    double grad_clip = 1.0;
    int lr_decay_epoch = 0;       // 0 disables the step decay
    double lr_decay_factor = 0.1; // multiplier applied from lr_decay_epoch on
    int lr_warmup_epochs = 0;     // linear ramp from lr/warmup to lr
    std::uint64_t seed = 7;
    BranchSelector branch = BranchSelector::both;
    bool per_iteration_supervision = false;
    objectives::Reduction l2_reduction = objectives::Reduction::mean;
    int metric_every = 25; // epochs between full train-metric logs

    double eval_delta = 0.5;
    double eval_epsilon = 1e-6;
    double eval_threshold = 0.5;

    std::string train_manifest, test_manifest, out_dir;

    void validate() const;
    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig load(const std::string& path);
};

struct Model {
    of::OfConfig ofc;
    cd::CdConfig cdc;
    nn::ParamStore params;
    of::OfBranch of_branch;
    cd::CdBranch cd_branch;

    Model(const of::OfConfig& oc, const cd::CdConfig& cc, std::uint64_t seed);

    struct Outputs {
        std::optional<Var> flow;   // (2,H,W) full resolution
        std::optional<Var> change; // (1,H,W) probabilities
    };
    /// Differentiable forward; cd_only feeds a zero flow field to the warp.
    Outputs forward(const Var& t0, const Var& t1, BranchSelector branch) const;
};

struct EpochStats {
    int epoch = 0;
    double loss = 0.0, l2 = 0.0, tversky = 0.0;
    std::optional<double> train_f1, train_mepe;
};

// Single-archive checkpoint: magic + JSON header + raw little-endian doubles.
void save_checkpoint(const std::string& path, const Model& model, const RunConfig& cfg, nn::AdamW* opt,
                     long epoch, const std::vector<EpochStats>& history);

struct LoadedCheckpoint {
    RunConfig config;
    long epoch = 0;
    std::vector<EpochStats> history;
    std::unique_ptr<Model> model;
    std::map<std::string, Tensor> opt_m, opt_v;
    long opt_step = 0;
    bool has_opt = false;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

struct TrainResult {
    std::vector<EpochStats> history;
    std::string checkpoint_path;
    std::vector<objectives::MetricReport> train_metrics; // per-sample + aggregate
};

/// Full training loop per the configured branch selector; deterministic given
/// the seed. Aborts with a NumericError on a non-finite loss.
TrainResult train(const RunConfig& cfg, const forge::DatasetManifest& data, Model& model);

struct EvalOutcome {
    std::vector<objectives::MetricReport> reports; // per sample, then "aggregate"
    std::vector<std::string> errors;               // per-sample failures (skipped)
};
EvalOutcome evaluate(const Model& model, const forge::DatasetManifest& data, double delta, double epsilon,
                     double threshold, BranchSelector branch);

struct Prediction {
    std::optional<Tensor> flow;   // (2,H,W)
    std::optional<Tensor> change; // (1,H,W) probabilities
};
using Predictor = std::function<Prediction(const BitemporalSample&)>;
/// Same metric pipeline with an injectable predictor (used by oracle tests
/// and by the model-backed overload above). Thread-safe predictors only.
EvalOutcome evaluate_with(const Predictor& predict, const forge::DatasetManifest& data, double delta,
                          double epsilon, double threshold);

struct AblationRow {
    std::string branch;
    std::optional<double> f1, mepe, fepe;
};
struct AblationTable {
    std::vector<AblationRow> rows; // of_only, cd_only, both
};
AblationTable ablate(const RunConfig& cfg, const forge::DatasetManifest& train_data,
                     const forge::DatasetManifest& eval_data, const std::string& out_dir);

struct BenchReport {
    double mean_seconds = 0.0;
    double fps = 0.0;
    int warmup = 0;
    int pairs = 0;
    std::string device;
};
BenchReport bench(const Model& model, int n_pairs, int warmup, int height, int width, std::uint64_t seed);

struct InferPaths {
    std::string flow_flo, flow_png, change_png;
};
/// Runs the model on an image pair from disk; center-crops to multiples of 8
/// (with a notice) when needed. Writes flow (.flo + color PNG) and the
/// thresholded change mask.
InferPaths infer_pair(const Model& model, const std::string& t0_path, const std::string& t1_path,
                      const std::string& out_dir, double threshold);

} // namespace flowcd::harness
