// SPDX-License-Identifier: Apache-2.0
#include "flowcd/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "flowcd/image_io.hpp"

namespace fs = std::filesystem;

namespace flowcd::harness {

std::string to_string(BranchSelector b) {
    switch (b) {
    case BranchSelector::of_only: return "of_only";
    case BranchSelector::cd_only: return "cd_only";
    default: return "both";
    }
}

BranchSelector branch_from_string(const std::string& s) {
    if (s == "of_only") return BranchSelector::of_only;
    if (s == "cd_only") return BranchSelector::cd_only;
    if (s == "both") return BranchSelector::both;
    throw ValidationError("unknown branch selector: " + s);
}

void RunConfig::validate() const {
    if (of_lr <= 0.0 || cd_lr <= 0.0) throw ValidationError("config: learning rates must be positive");
    if (batch_size < 1) throw ValidationError("config: batch size must be >= 1");
    if (epochs < 0) throw ValidationError("config: epochs must be >= 0");
    if (weight_decay < 0.0) throw ValidationError("config: weight decay must be >= 0");
    if (eval_delta < 0.0 || eval_epsilon <= 0.0) throw ValidationError("config: bad eval parameters");
    if (!(eval_threshold > 0.0 && eval_threshold < 1.0))
        throw ValidationError("config: eval threshold must lie in (0,1)");
    loss.validate();
    of_cfg.validate();
    cd_cfg.validate();
}

nlohmann::json RunConfig::to_json() const {
    nlohmann::json j;
    j["preset"] = preset;
    j["of"] = {{"feature_channels", of_cfg.feature_channels},
               {"hidden_channels", of_cfg.hidden_channels},
               {"context_channels", of_cfg.context_channels},
               {"iterations", of_cfg.iterations},
               {"lookup_radius", of_cfg.lookup_radius},
               {"corr_enc_channels", of_cfg.corr_enc_channels},
               {"flow_enc_channels", of_cfg.flow_enc_channels},
               {"scale_correlation", of_cfg.scale_correlation}};
    j["cd"] = {{"depth", cd_cfg.depth == cd::CdConfig::Depth::toy ? "toy" : "resnet50_style"},
               {"f0_channels", cd_cfg.f0_channels},
               {"fusion_channels", cd_cfg.fusion_channels},
               {"pool_bins", cd_cfg.pool_bins},
               {"mask_tau", cd_cfg.mask_tau},
               {"sigmoid_threshold", cd_cfg.sigmoid_threshold}};
    j["train"] = {{"of_lr", of_lr},
                  {"cd_lr", cd_lr},
                  {"weight_decay", weight_decay},
                  {"batch_size", batch_size},
                  {"epochs", epochs},
                  {"alpha", loss.alpha},
                  {"beta", loss.beta},
                  {"psi", loss.psi},
                  {"smoothing", loss.smoothing},
                  {"grad_clip", grad_clip},
                  {"lr_decay_epoch", lr_decay_epoch},
                  {"lr_decay_factor", lr_decay_factor},
                  {"lr_warmup_epochs", lr_warmup_epochs},
                  {"seed", seed},
                  {"branch", to_string(branch)},
                  {"per_iteration_supervision", per_iteration_supervision},
                  {"l2_reduction", l2_reduction == objectives::Reduction::mean ? "mean" : "sum"},
                  {"metric_every", metric_every}};
    j["eval"] = {{"delta", eval_delta}, {"epsilon", eval_epsilon}, {"threshold", eval_threshold}};
    j["data"] = {{"train_manifest", train_manifest}, {"test_manifest", test_manifest}};
    j["out_dir"] = out_dir;
    return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    RunConfig c;
    c.preset = j.value("preset", "toy");
    if (c.preset == "toy") {
        c.of_cfg = of::OfConfig::toy();
        c.cd_cfg = cd::CdConfig::toy();
    } else if (c.preset == "full") {
        c.of_cfg = of::OfConfig::full();
        c.cd_cfg = cd::CdConfig::full();
        c.epochs = 1000;
    } else {
        throw ValidationError("config: unknown preset " + c.preset);
    }
    if (j.contains("of")) {
        const auto& o = j["of"];
        c.of_cfg.feature_channels = o.value("feature_channels", c.of_cfg.feature_channels);
        c.of_cfg.hidden_channels = o.value("hidden_channels", c.of_cfg.hidden_channels);
        c.of_cfg.context_channels = o.value("context_channels", c.of_cfg.context_channels);
        c.of_cfg.iterations = o.value("iterations", c.of_cfg.iterations);
        c.of_cfg.lookup_radius = o.value("lookup_radius", c.of_cfg.lookup_radius);
        c.of_cfg.corr_enc_channels = o.value("corr_enc_channels", c.of_cfg.corr_enc_channels);
        c.of_cfg.flow_enc_channels = o.value("flow_enc_channels", c.of_cfg.flow_enc_channels);
        c.of_cfg.scale_correlation = o.value("scale_correlation", c.of_cfg.scale_correlation);
    }
    if (j.contains("cd")) {
        const auto& o = j["cd"];
        if (o.contains("depth"))
            c.cd_cfg.depth = o["depth"] == "toy" ? cd::CdConfig::Depth::toy : cd::CdConfig::Depth::resnet50_style;
        c.cd_cfg.f0_channels = o.value("f0_channels", c.cd_cfg.f0_channels);
        c.cd_cfg.fusion_channels = o.value("fusion_channels", c.cd_cfg.fusion_channels);
        if (o.contains("pool_bins"))
            for (int i = 0; i < 4; ++i) c.cd_cfg.pool_bins[static_cast<std::size_t>(i)] = o["pool_bins"][i];
        c.cd_cfg.mask_tau = o.value("mask_tau", c.cd_cfg.mask_tau);
        c.cd_cfg.sigmoid_threshold = o.value("sigmoid_threshold", c.cd_cfg.sigmoid_threshold);
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        c.of_lr = t.value("of_lr", c.of_lr);
        c.cd_lr = t.value("cd_lr", c.cd_lr);
        c.weight_decay = t.value("weight_decay", c.weight_decay);
        c.batch_size = t.value("batch_size", c.batch_size);
        c.epochs = t.value("epochs", c.epochs);
        c.loss.alpha = t.value("alpha", c.loss.alpha);
        c.loss.beta = t.value("beta", c.loss.beta);
        c.loss.psi = t.value("psi", c.loss.psi);
        c.loss.smoothing = t.value("smoothing", c.loss.smoothing);
        c.grad_clip = t.value("grad_clip", c.grad_clip);
        c.lr_decay_epoch = t.value("lr_decay_epoch", c.lr_decay_epoch);
        c.lr_decay_factor = t.value("lr_decay_factor", c.lr_decay_factor);
        c.lr_warmup_epochs = t.value("lr_warmup_epochs", c.lr_warmup_epochs);
        c.seed = t.value("seed", c.seed);
        if (t.contains("branch")) c.branch = branch_from_string(t["branch"]);
        c.per_iteration_supervision = t.value("per_iteration_supervision", c.per_iteration_supervision);
        if (t.contains("l2_reduction"))
            c.l2_reduction =
                t["l2_reduction"] == "sum" ? objectives::Reduction::sum : objectives::Reduction::mean;
        c.metric_every = t.value("metric_every", c.metric_every);
    }
    if (j.contains("eval")) {
        const auto& e = j["eval"];
        c.eval_delta = e.value("delta", c.eval_delta);
        c.eval_epsilon = e.value("epsilon", c.eval_epsilon);
        c.eval_threshold = e.value("threshold", c.eval_threshold);
    }
    if (j.contains("data")) {
        c.train_manifest = j["data"].value("train_manifest", "");
        c.test_manifest = j["data"].value("test_manifest", "");
    }
    c.out_dir = j.value("out_dir", "");
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::string& path) {
    if (!fs::exists(path)) throw ValidationError("config file missing: " + path);
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed config " + path + ": " + e.what());
    }
    return from_json(j);
}

Model::Model(const of::OfConfig& oc, const cd::CdConfig& cc, std::uint64_t seed) : ofc(oc), cdc(cc) {
    Rng rng(seed);
    of_branch = of::OfBranch(params, rng, ofc);
    cd_branch = cd::CdBranch(params, rng, cdc);
}

Model::Outputs Model::forward(const Var& t0, const Var& t1, BranchSelector branch) const {
    Outputs out;
    if (branch != BranchSelector::cd_only) {
        auto r = of_branch.forward(t0, t1);
        out.flow = r.final_flow;
    }
    if (branch != BranchSelector::of_only) {
        Var flow_in = out.flow ? *out.flow
                               : Var(Tensor({2, t0.value().size(1), t0.value().size(2)}));
        out.change = cd_branch.forward(t0, t1, flow_in);
    }
    return out;
}

// ---------------------------------------------------------------------------
// checkpoint archive
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'F', 'C', 'D', 'C', 'K', 'P', 'T', '\x01'};

nlohmann::json stats_to_json(const std::vector<EpochStats>& hist) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& h : hist) {
        nlohmann::json e{{"epoch", h.epoch}, {"loss", h.loss}, {"l2", h.l2}, {"tversky", h.tversky}};
        if (h.train_f1) e["train_f1"] = *h.train_f1;
        if (h.train_mepe) e["train_mepe"] = *h.train_mepe;
        arr.push_back(std::move(e));
    }
    return arr;
}

std::vector<EpochStats> stats_from_json(const nlohmann::json& arr) {
    std::vector<EpochStats> out;
    for (const auto& e : arr) {
        EpochStats h;
        h.epoch = e.value("epoch", 0);
        h.loss = e.value("loss", 0.0);
        h.l2 = e.value("l2", 0.0);
        h.tversky = e.value("tversky", 0.0);
        if (e.contains("train_f1")) h.train_f1 = e["train_f1"];
        if (e.contains("train_mepe")) h.train_mepe = e["train_mepe"];
        out.push_back(h);
    }
    return out;
}

void write_blob(std::ofstream& f, const Tensor& t) {
    f.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

void read_blob(std::ifstream& f, Tensor& t, const std::string& path) {
    f.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!f) throw IoError("truncated checkpoint: " + path);
}

} // namespace

void save_checkpoint(const std::string& path, const Model& model, const RunConfig& cfg, nn::AdamW* opt,
                     long epoch, const std::vector<EpochStats>& history) {
    nlohmann::json header;
    header["version"] = 1;
    header["config"] = cfg.to_json();
    header["epoch"] = epoch;
    header["history"] = stats_to_json(history);
    nlohmann::json plist = nlohmann::json::array();
    for (const auto& [name, p] : model.params.all())
        plist.push_back({{"name", name}, {"shape", p.value().shape()}});
    header["params"] = std::move(plist);
    header["opt"] = {{"present", opt != nullptr}, {"step", opt ? opt->step_count() : 0}};

    const std::string hs = header.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint: " + path);
    f.write(kMagic, 8);
    const std::uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, p] : model.params.all()) write_blob(f, p.value());
    if (opt) {
        for (const auto& [name, p] : model.params.all()) write_blob(f, opt->m().at(name));
        for (const auto& [name, p] : model.params.all()) write_blob(f, opt->v().at(name));
    }
    if (!f) throw IoError("short checkpoint write: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kMagic, 8) != 0) throw IoError("not a checkpoint file: " + path);
    std::uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 8);
    if (!f || hlen > (1ull << 30)) throw IoError("corrupt checkpoint header: " + path);
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!f) throw IoError("truncated checkpoint header: " + path);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("corrupt checkpoint header json: " + path + " (" + e.what() + ")");
    }

    LoadedCheckpoint out;
    out.config = RunConfig::from_json(header.at("config"));
    out.epoch = header.value("epoch", 0);
    out.history = stats_from_json(header.value("history", nlohmann::json::array()));
    out.model = std::make_unique<Model>(out.config.of_cfg, out.config.cd_cfg, out.config.seed);

    // Archive order must match the rebuilt parameter set exactly.
    const auto& plist = header.at("params");
    auto it = out.model->params.all().begin();
    for (const auto& pj : plist) {
        if (it == out.model->params.all().end()) throw IoError("checkpoint parameter set mismatch: " + path);
        const std::string name = pj.at("name");
        if (name != it->first) throw IoError("checkpoint parameter order mismatch at " + name);
        const std::vector<int> shape = pj.at("shape");
        if (shape != it->second.value().shape()) throw IoError("checkpoint shape mismatch at " + name);
        read_blob(f, it->second.mutable_value(), path);
        ++it;
    }
    if (it != out.model->params.all().end()) throw IoError("checkpoint missing parameters: " + path);

    out.has_opt = header.at("opt").value("present", false);
    out.opt_step = header.at("opt").value("step", 0);
    if (out.has_opt) {
        for (auto& [name, p] : out.model->params.all()) {
            Tensor m = Tensor::zeros(p.value().shape());
            read_blob(f, m, path);
            out.opt_m.emplace(name, std::move(m));
        }
        for (auto& [name, p] : out.model->params.all()) {
            Tensor v = Tensor::zeros(p.value().shape());
            read_blob(f, v, path);
            out.opt_v.emplace(name, std::move(v));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

namespace {

struct SampleLoss {
    Var total;
    double l2 = 0.0, tversky = 0.0;
};

// Flow-loss term; with per-iteration supervision every upsampled iterate is
// supervised with exponentially decaying weights (off by default).
Var flow_loss_term(const of::OfResult& r, const RunConfig& cfg, const BitemporalSample& s) {
    if (!cfg.per_iteration_supervision)
        return objectives::l2_flow_loss(r.final_flow, s.flow_label.data, s.change_label.data, cfg.l2_reduction);
    const int n = static_cast<int>(r.full_flows.size());
    Var acc;
    for (int k = 0; k < n; ++k) {
        const double gamma = std::pow(0.8, static_cast<double>(n - 1 - k));
        Var term = scale(objectives::l2_flow_loss(r.full_flows[static_cast<std::size_t>(k)],
                                                  s.flow_label.data, s.change_label.data, cfg.l2_reduction),
                         gamma);
        acc = k == 0 ? term : acc + term;
    }
    return acc;
}

SampleLoss sample_loss(const Model& model, const RunConfig& cfg, const BitemporalSample& s) {
    SampleLoss out;
    Var t0(s.t0.data), t1(s.t1.data);
    if (cfg.branch == BranchSelector::of_only) {
        auto r = model.of_branch.forward(t0, t1, cfg.per_iteration_supervision);
        Var l2 = flow_loss_term(r, cfg, s);
        out.total = l2;
        out.l2 = l2.value()[0];
        return out;
    }
    if (cfg.branch == BranchSelector::cd_only) {
        Var zero_flow(Tensor({2, s.t0.height(), s.t0.width()}));
        Var change = model.cd_branch.forward(t0, t1, zero_flow);
        Var tv = objectives::tversky_loss(change, s.change_label.data, cfg.loss);
        out.total = tv;
        out.tversky = tv.value()[0];
        return out;
    }
    auto r = model.of_branch.forward(t0, t1, cfg.per_iteration_supervision);
    Var change = model.cd_branch.forward(t0, t1, r.final_flow);
    Var l2 = flow_loss_term(r, cfg, s);
    Var tv = objectives::tversky_loss(change, s.change_label.data, cfg.loss);
    out.total = objectives::total_loss(l2, tv, cfg.loss.psi);
    out.l2 = l2.value()[0];
    out.tversky = tv.value()[0];
    return out;
}

void append_train_metrics(const Model& model, const RunConfig& cfg, const forge::DatasetManifest& data,
                          EpochStats& st) {
    EvalOutcome eo = evaluate(model, data, cfg.eval_delta, cfg.eval_epsilon, cfg.eval_threshold, cfg.branch);
    if (eo.reports.empty()) return;
    const auto& agg = eo.reports.back();
    st.train_f1 = agg.f1;
    st.train_mepe = agg.mepe;
}

} // namespace

TrainResult train(const RunConfig& cfg, const forge::DatasetManifest& data, Model& model) {
    cfg.validate();
    if (data.entries.empty()) throw ValidationError("train: empty dataset manifest");

    std::vector<BitemporalSample> samples;
    samples.reserve(data.entries.size());
    for (const auto& e : data.entries) samples.push_back(forge::read_sample(data, e));

    // Non-selected branches are frozen outright (lr 0 also disables decay).
    const double of_lr = cfg.branch == BranchSelector::cd_only ? 0.0 : cfg.of_lr;
    const double cd_lr = cfg.branch == BranchSelector::of_only ? 0.0 : cfg.cd_lr;
    std::vector<nn::AdamW::Group> groups{{"of.", of_lr}, {"cd.", cd_lr}};
    nn::AdamW opt(model.params, groups, cfg.cd_lr, cfg.weight_decay);

    TrainResult result;
    Rng shuffle_rng(cfg.seed ^ 0x5151515151515151ull);
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double lr_scale = 1.0;
        if (cfg.lr_warmup_epochs > 0 && epoch <= cfg.lr_warmup_epochs)
            lr_scale = static_cast<double>(epoch) / cfg.lr_warmup_epochs;
        if (cfg.lr_decay_epoch > 0 && epoch > cfg.lr_decay_epoch) lr_scale *= cfg.lr_decay_factor;
        opt.set_lr_scale(lr_scale);
        // Seeded Fisher-Yates; library shuffles are implementation-defined.
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = shuffle_rng.below(i);
            std::swap(order[i - 1], order[j]);
        }
        EpochStats st;
        st.epoch = epoch;
        std::size_t cursor = 0;
        int batches = 0;
        while (cursor < order.size()) {
            const std::size_t bsz = std::min<std::size_t>(cfg.batch_size, order.size() - cursor);
            model.params.zero_grads();
            double btotal = 0.0, bl2 = 0.0, btv = 0.0;
            std::string batch_ids;
            for (std::size_t k = 0; k < bsz; ++k) {
                const BitemporalSample& s = samples[order[cursor + k]];
                batch_ids += (k ? "," : "") + s.id;
                SampleLoss sl = sample_loss(model, cfg, s);
                const double lv = sl.total.value()[0];
                if (!std::isfinite(lv))
                    throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch [" +
                                       batch_ids + "]: total=" + std::to_string(lv) +
                                       " l2=" + std::to_string(sl.l2) + " tversky=" + std::to_string(sl.tversky));
                btotal += lv;
                bl2 += sl.l2;
                btv += sl.tversky;
                backward(scale(sl.total, 1.0 / static_cast<double>(bsz)));
            }
            opt.step(cfg.grad_clip);
            st.loss += btotal / static_cast<double>(bsz);
            st.l2 += bl2 / static_cast<double>(bsz);
            st.tversky += btv / static_cast<double>(bsz);
            ++batches;
            cursor += bsz;
        }
        st.loss /= batches;
        st.l2 /= batches;
        st.tversky /= batches;
        if (cfg.metric_every > 0 && (epoch % cfg.metric_every == 0 || epoch == cfg.epochs))
            append_train_metrics(model, cfg, data, st);
        result.history.push_back(st);
    }

    result.train_metrics =
        evaluate(model, data, cfg.eval_delta, cfg.eval_epsilon, cfg.eval_threshold, cfg.branch).reports;
    if (cfg.epochs == 0) {
        EpochStats st;
        st.epoch = 0;
        if (!result.train_metrics.empty()) {
            st.train_f1 = result.train_metrics.back().f1;
            st.train_mepe = result.train_metrics.back().mepe;
        }
        result.history.push_back(st);
    }

    if (!cfg.out_dir.empty()) {
        fs::create_directories(cfg.out_dir);
        result.checkpoint_path = (fs::path(cfg.out_dir) / "model.fckpt").string();
        save_checkpoint(result.checkpoint_path, model, cfg, &opt, cfg.epochs, result.history);
        std::ofstream curve(fs::path(cfg.out_dir) / "training_curve.csv");
        curve << "epoch,loss,l2,tversky,train_f1,train_mepe\n";
        for (const auto& h : result.history) {
            curve << h.epoch << ',' << h.loss << ',' << h.l2 << ',' << h.tversky << ',';
            if (h.train_f1) curve << *h.train_f1;
            curve << ',';
            if (h.train_mepe) curve << *h.train_mepe;
            curve << '\n';
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

EvalOutcome evaluate(const Model& model, const forge::DatasetManifest& data, double delta, double epsilon,
                     double threshold, BranchSelector branch) {
    return evaluate_with(
        [&model, branch](const BitemporalSample& s) {
            NoGradGuard ng;
            Prediction p;
            auto res = model.forward(Var(s.t0.data), Var(s.t1.data), branch);
            if (res.flow) p.flow = res.flow->value();
            if (res.change) p.change = res.change->value();
            return p;
        },
        data, delta, epsilon, threshold);
}

EvalOutcome evaluate_with(const Predictor& predict, const forge::DatasetManifest& data, double delta,
                          double epsilon, double threshold) {
    if (data.entries.empty()) throw ValidationError("evaluate: empty dataset manifest");
    EvalOutcome out;
    out.reports.resize(data.entries.size());
    std::vector<char> failed(data.entries.size(), 0);
    std::vector<std::string> errs(data.entries.size());

    const unsigned hw_threads = std::max(1u, std::thread::hardware_concurrency());
    const unsigned n_workers =
        static_cast<unsigned>(std::min<std::size_t>(hw_threads, data.entries.size()));

    auto work = [&](unsigned wid) {
        NoGradGuard ng; // thread-local
        for (std::size_t i = wid; i < data.entries.size(); i += n_workers) {
            try {
                const BitemporalSample s = forge::read_sample(data, data.entries[i]);
                objectives::MetricReport r;
                r.id = s.id;
                r.delta = delta;
                r.epsilon = epsilon;
                r.threshold = threshold;
                Prediction res = predict(s);
                if (res.change) {
                    ChangeMask pred(*res.change, ChangeMask::Kind::prediction);
                    ChangeMask predb = binarize(pred, threshold);
                    auto pr = objectives::precision_recall_f1(predb.data, s.change_label.data);
                    r.precision = pr.precision;
                    r.recall = pr.recall;
                    r.f1 = pr.f1;
                    r.counts = pr.counts;
                }
                if (res.flow) {
                    auto me = objectives::mepe(*res.flow, s.flow_label.data, delta);
                    r.mepe = me.value;
                    r.empty_union = me.empty_union;
                    r.union_size = me.union_size;
                }
                if (r.f1 && r.mepe) r.fepe = objectives::fepe(*r.f1, *r.mepe, epsilon);
                r.undefined_motion = r.fepe && *r.mepe == 0.0;
                out.reports[i] = std::move(r);
            } catch (const std::exception& e) {
                failed[i] = 1;
                errs[i] = data.entries[i].id + ": " + e.what();
            }
        }
    };
    if (n_workers <= 1) {
        work(0);
    } else {
        std::vector<std::thread> pool;
        for (unsigned wid = 0; wid < n_workers; ++wid) pool.emplace_back(work, wid);
        for (auto& t : pool) t.join();
    }

    std::vector<objectives::MetricReport> kept;
    objectives::MetricReport agg;
    agg.id = "aggregate";
    agg.delta = delta;
    agg.epsilon = epsilon;
    agg.threshold = threshold;
    double mepe_sum = 0.0;
    long mepe_n = 0;
    bool any_cd = false, any_of = false;
    for (std::size_t i = 0; i < out.reports.size(); ++i) {
        if (failed[i]) {
            out.errors.push_back(errs[i]);
            continue;
        }
        const auto& r = out.reports[i];
        if (r.f1) {
            any_cd = true;
            agg.counts.tp += r.counts.tp;
            agg.counts.fp += r.counts.fp;
            agg.counts.fn += r.counts.fn;
        }
        if (r.mepe && !r.empty_union) {
            any_of = true;
            mepe_sum += *r.mepe;
            ++mepe_n;
        }
        kept.push_back(r);
    }
    if (kept.empty()) throw ValidationError("evaluate: every sample failed");
    if (any_cd) {
        auto pr = objectives::f1_from_counts(agg.counts);
        agg.precision = pr.precision;
        agg.recall = pr.recall;
        agg.f1 = pr.f1;
    }
    if (any_of) {
        // Empty-union samples are excluded from the aggregate mean.
        agg.mepe = mepe_n > 0 ? mepe_sum / static_cast<double>(mepe_n) : 0.0;
        agg.empty_union = mepe_n == 0;
    }
    if (agg.f1 && agg.mepe) {
        agg.fepe = objectives::fepe(*agg.f1, *agg.mepe, epsilon);
        agg.undefined_motion = *agg.mepe == 0.0;
    }
    kept.push_back(std::move(agg));
    out.reports = std::move(kept);
    return out;
}

// ---------------------------------------------------------------------------
// ablation / bench / inference
// ---------------------------------------------------------------------------

AblationTable ablate(const RunConfig& cfg, const forge::DatasetManifest& train_data,
                     const forge::DatasetManifest& eval_data, const std::string& out_dir) {
    AblationTable table;
    for (BranchSelector b : {BranchSelector::of_only, BranchSelector::cd_only, BranchSelector::both}) {
        RunConfig rc = cfg;
        rc.branch = b;
        rc.out_dir = out_dir.empty() ? "" : (fs::path(out_dir) / to_string(b)).string();
        Model model(rc.of_cfg, rc.cd_cfg, rc.seed);
        train(rc, train_data, model);
        EvalOutcome eo =
            evaluate(model, eval_data, rc.eval_delta, rc.eval_epsilon, rc.eval_threshold, b);
        const auto& agg = eo.reports.back();
        AblationRow row;
        row.branch = to_string(b);
        if (b != BranchSelector::of_only) row.f1 = agg.f1;
        if (b != BranchSelector::cd_only) row.mepe = agg.mepe;
        if (b == BranchSelector::both && agg.fepe) row.fepe = agg.fepe;
        table.rows.push_back(std::move(row));
    }
    return table;
}

BenchReport bench(const Model& model, int n_pairs, int warmup, int height, int width, std::uint64_t seed) {
    if (n_pairs < 1) throw ValidationError("bench: n_pairs must be >= 1");
    if (warmup < 0) throw ValidationError("bench: warmup must be >= 0");
    Rng rng(seed);
    Tensor t0({3, height, width}), t1({3, height, width});
    for (long i = 0; i < t0.numel(); ++i) t0[i] = rng.uniform();
    for (long i = 0; i < t1.numel(); ++i) t1[i] = rng.uniform();

    NoGradGuard ng;
    auto run_once = [&] {
        auto r = model.forward(Var(t0), Var(t1), BranchSelector::both);
        return r.change->value()[0];
    };
    volatile double sink = 0.0;
    for (int i = 0; i < warmup; ++i) sink = sink + run_once();
    double total = 0.0;
    for (int i = 0; i < n_pairs; ++i) {
        const auto start = std::chrono::steady_clock::now();
        sink = sink + run_once();
        const auto end = std::chrono::steady_clock::now();
        total += std::chrono::duration<double>(end - start).count();
    }
    (void)sink;
    BenchReport r;
    r.pairs = n_pairs;
    r.warmup = warmup;
    r.mean_seconds = total / n_pairs;
    r.fps = 1.0 / r.mean_seconds;
    r.device = "cpu (" + std::to_string(std::thread::hardware_concurrency()) + " hw threads)";
    return r;
}

namespace {

Tensor center_crop_div8(const Tensor& img, bool& cropped) {
    const int h = img.size(1), w = img.size(2);
    const int ch = std::max(16, h / 8 * 8), cw = std::max(16, w / 8 * 8);
    if (ch > h || cw > w) throw ValidationError("infer: image smaller than 16x16");
    cropped = (ch != h || cw != w);
    if (!cropped) return img;
    const int y0 = (h - ch) / 2, x0 = (w - cw) / 2;
    Tensor out({img.size(0), ch, cw});
    for (int c = 0; c < img.size(0); ++c)
        for (int y = 0; y < ch; ++y)
            for (int x = 0; x < cw; ++x) out.at(c, y, x) = img.at(c, y0 + y, x0 + x);
    return out;
}

} // namespace

InferPaths infer_pair(const Model& model, const std::string& t0_path, const std::string& t1_path,
                      const std::string& out_dir, double threshold) {
    Tensor raw0 = read_png_rgb(t0_path);
    Tensor raw1 = read_png_rgb(t1_path);
    if (!raw0.same_shape(raw1)) throw ValidationError("infer: image pair shapes differ");
    bool cropped = false;
    Tensor t0 = center_crop_div8(raw0, cropped);
    Tensor t1 = center_crop_div8(raw1, cropped);
    if (cropped)
        std::fprintf(stderr, "[infer] center-cropped inputs to %dx%d (multiple-of-8 requirement)\n",
                     t0.size(2), t0.size(1));

    NoGradGuard ng;
    auto res = model.forward(Var(t0), Var(t1), BranchSelector::both);
    FlowField flow(res.flow->value());
    ChangeMask prob(res.change->value(), ChangeMask::Kind::prediction);
    ChangeMask mask = binarize(prob, threshold);

    fs::create_directories(out_dir);
    InferPaths p;
    p.flow_flo = (fs::path(out_dir) / "flow.flo").string();
    p.flow_png = (fs::path(out_dir) / "flow_color.png").string();
    p.change_png = (fs::path(out_dir) / "change_mask.png").string();
    write_flo(p.flow_flo, flow);
    write_png_rgb(p.flow_png, flow_to_color(flow).data);
    write_png_gray(p.change_png, mask.data);
    return p;
}

} // namespace flowcd::harness
