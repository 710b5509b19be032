// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "flowcd/autograd.hpp"
#include "flowcd/core.hpp"

namespace flowcd::objectives {

struct LossWeights {
    double alpha = 0.7; // false-negative penalty
    double beta = 0.3;  // false-positive penalty
    double psi = 10.0;  // Tversky term weight in the total loss
    double smoothing = 1e-6;

    void validate() const {
        if (alpha <= 0.0 || beta <= 0.0 || psi <= 0.0 || smoothing <= 0.0)
            throw ValidationError("loss weights must be positive");
    }
};

enum class Reduction { mean, sum };

/// Per-pixel Euclidean flow error masked by (1 - change label), reduced over
/// all pixels. A fully masked label yields 0.
Var l2_flow_loss(const Var& flow, const Tensor& flow_label, const Tensor& change_label,
                 Reduction reduction = Reduction::mean);

/// 1 - Tversky index with additive smoothing; in [0,1], 0 for a perfect
/// binary prediction. alpha weighs missed positives, beta false alarms.
Var tversky_loss(const Var& prediction, const Tensor& change_label, const LossWeights& w);

Var total_loss(const Var& l2, const Var& tversky, double psi);

struct PrCounts {
    long tp = 0, fp = 0, fn = 0;
};

struct PrF1 {
    double precision = 0.0, recall = 0.0, f1 = 0.0;
    PrCounts counts;
};

/// Pixelwise counts over two binary masks; zero denominators yield metric 0.
PrF1 precision_recall_f1(const Tensor& pred_binary, const Tensor& gt_binary);
PrF1 f1_from_counts(const PrCounts& c);

/// Per-pixel Euclidean distance between two flow fields.
Tensor epe_map(const Tensor& flow, const Tensor& flow_gt);

struct MepeResult {
    double value = 0.0;
    bool empty_union = false;
    long union_size = 0;
};

/// Mean EPE over the union of pixels whose ground-truth or predicted
/// magnitude exceeds delta; empty union reports 0 with a flag.
MepeResult mepe(const Tensor& flow, const Tensor& flow_gt, double delta);

/// Composite score f1 / (mepe + eps).
double fepe(double f1, double mepe_value, double eps);

struct MetricReport {
    std::string id; // sample id, or "aggregate"
    std::optional<double> precision, recall, f1;
    std::optional<double> mepe, fepe;
    PrCounts counts;
    long union_size = 0;
    bool empty_union = false;
    bool undefined_motion = false; // fepe computed against a zero mepe
    double delta = 0.5;
    double epsilon = 1e-6;
    double threshold = 0.5;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricReport& r);
std::string metrics_to_json(const std::vector<MetricReport>& rows);

} // namespace flowcd::objectives
