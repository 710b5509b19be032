// SPDX-License-Identifier: Apache-2.0
#include "flowcd/objectives.hpp"

#include <cmath>
#include <sstream>

#include <json.hpp>

namespace flowcd::objectives {

namespace {

void require_binary(const Tensor& t, const char* what) {
    for (long i = 0; i < t.numel(); ++i)
        if (t[i] != 0.0 && t[i] != 1.0) throw ValidationError(std::string(what) + ": mask is not binary");
}

} // namespace

Var l2_flow_loss(const Var& flow, const Tensor& flow_label, const Tensor& change_label, Reduction reduction) {
    require_same_shape(flow.value(), flow_label, "l2_flow_loss");
    if (change_label.dim() != 3 || change_label.size(0) != 1 || change_label.size(1) != flow.value().size(1) ||
        change_label.size(2) != flow.value().size(2))
        throw ValidationError("l2_flow_loss: change label shape mismatch");
    require_binary(change_label, "l2_flow_loss");

    Tensor keep = change_label;
    for (long i = 0; i < keep.numel(); ++i) keep[i] = 1.0 - keep[i];

    Var err = flow - Var(flow_label);
    Var norm = flow_norm(err);            // (1,H,W)
    Var masked = norm * Var(std::move(keep));
    return reduction == Reduction::mean ? mean_all(masked) : sum_all(masked);
}

Var tversky_loss(const Var& prediction, const Tensor& change_label, const LossWeights& w) {
    w.validate();
    require_same_shape(prediction.value(), change_label, "tversky_loss");
    require_binary(change_label, "tversky_loss");
    for (long i = 0; i < prediction.value().numel(); ++i) {
        const double v = prediction.value()[i];
        if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("tversky_loss: prediction outside [0,1]");
    }

    Tensor inv_label = change_label;
    for (long i = 0; i < inv_label.numel(); ++i) inv_label[i] = 1.0 - inv_label[i];
    Var label(change_label);
    Var inv(std::move(inv_label));

    Var masked_gt = sum_all(prediction * label);
    Var unmasked_gt = sum_all(prediction * inv);
    Var wrong_classified = sum_all(rsub_scalar(1.0, prediction) * label);

    Var num = add_scalar(masked_gt, w.smoothing);
    Var den = add_scalar(masked_gt + scale(wrong_classified, w.alpha) + scale(unmasked_gt, w.beta), w.smoothing);
    return rsub_scalar(1.0, div(num, den));
}

Var total_loss(const Var& l2, const Var& tversky, double psi) {
    if (psi <= 0.0) throw ValidationError("total_loss: psi must be positive");
    return l2 + scale(tversky, psi);
}

PrF1 f1_from_counts(const PrCounts& c) {
    PrF1 r;
    r.counts = c;
    r.precision = (c.tp + c.fp) > 0 ? static_cast<double>(c.tp) / (c.tp + c.fp) : 0.0;
    r.recall = (c.tp + c.fn) > 0 ? static_cast<double>(c.tp) / (c.tp + c.fn) : 0.0;
    r.f1 = (r.precision > 0.0 && r.recall > 0.0) ? 2.0 / (1.0 / r.precision + 1.0 / r.recall) : 0.0;
    return r;
}

PrF1 precision_recall_f1(const Tensor& pred_binary, const Tensor& gt_binary) {
    require_same_shape(pred_binary, gt_binary, "precision_recall_f1");
    require_binary(pred_binary, "precision_recall_f1 (prediction)");
    require_binary(gt_binary, "precision_recall_f1 (ground truth)");
    PrCounts c;
    for (long i = 0; i < pred_binary.numel(); ++i) {
        const bool p = pred_binary[i] == 1.0, g = gt_binary[i] == 1.0;
        if (p && g)
            ++c.tp;
        else if (p && !g)
            ++c.fp;
        else if (!p && g)
            ++c.fn;
    }
    return f1_from_counts(c);
}

Tensor epe_map(const Tensor& flow, const Tensor& flow_gt) {
    require_same_shape(flow, flow_gt, "epe_map");
    if (flow.dim() != 3 || flow.size(0) != 2) throw ValidationError("epe_map: expects (2,H,W)");
    const int h = flow.size(1), w = flow.size(2);
    Tensor out({1, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            out.at(0, y, x) = std::hypot(flow.at(0, y, x) - flow_gt.at(0, y, x),
                                         flow.at(1, y, x) - flow_gt.at(1, y, x));
    return out;
}

MepeResult mepe(const Tensor& flow, const Tensor& flow_gt, double delta) {
    if (delta < 0.0) throw ValidationError("mepe: delta must be >= 0");
    const Tensor err = epe_map(flow, flow_gt);
    const int h = flow.size(1), w = flow.size(2);
    MepeResult r;
    double acc = 0.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double mg = std::hypot(flow_gt.at(0, y, x), flow_gt.at(1, y, x));
            const double mp = std::hypot(flow.at(0, y, x), flow.at(1, y, x));
            if (mg > delta || mp > delta) {
                acc += err.at(0, y, x);
                ++r.union_size;
            }
        }
    if (r.union_size == 0) {
        r.empty_union = true;
        r.value = 0.0;
    } else {
        r.value = acc / static_cast<double>(r.union_size);
    }
    return r;
}

double fepe(double f1, double mepe_value, double eps) {
    if (!(f1 >= 0.0 && f1 <= 1.0)) throw ValidationError("fepe: f1 must lie in [0,1]");
    if (mepe_value < 0.0) throw ValidationError("fepe: mepe must be >= 0");
    if (eps <= 0.0) throw ValidationError("fepe: eps must be positive");
    return f1 / (mepe_value + eps);
}

std::string metrics_csv_header() {
    return "id,precision,recall,f1,mepe,fepe,tp,fp,fn,union_size,empty_union,undefined_motion";
}

namespace {
std::string opt_str(const std::optional<double>& v) {
    if (!v) return "";
    std::ostringstream os;
    os.precision(9);
    os << *v;
    return os.str();
}
} // namespace

std::string metrics_csv_row(const MetricReport& r) {
    std::ostringstream os;
    os << r.id << ',' << opt_str(r.precision) << ',' << opt_str(r.recall) << ',' << opt_str(r.f1) << ','
       << opt_str(r.mepe) << ',' << opt_str(r.fepe) << ',' << r.counts.tp << ',' << r.counts.fp << ','
       << r.counts.fn << ',' << r.union_size << ',' << (r.empty_union ? 1 : 0) << ','
       << (r.undefined_motion ? 1 : 0);
    return os.str();
}

std::string metrics_to_json(const std::vector<MetricReport>& rows) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json j;
        j["id"] = r.id;
        if (r.precision) j["precision"] = *r.precision;
        if (r.recall) j["recall"] = *r.recall;
        if (r.f1) j["f1"] = *r.f1;
        if (r.mepe) j["mepe"] = *r.mepe;
        if (r.fepe) j["fepe"] = *r.fepe;
        j["tp"] = r.counts.tp;
        j["fp"] = r.counts.fp;
        j["fn"] = r.counts.fn;
        j["union_size"] = r.union_size;
        j["empty_union"] = r.empty_union;
        j["undefined_motion"] = r.undefined_motion;
        j["delta"] = r.delta;
        j["epsilon"] = r.epsilon;
        j["threshold"] = r.threshold;
        arr.push_back(std::move(j));
    }
    return arr.dump(2);
}

} // namespace flowcd::objectives
