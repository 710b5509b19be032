// SPDX-License-Identifier: Apache-2.0
#include "flowcd/forge.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <queue>

#include "flowcd/image_io.hpp"

namespace fs = std::filesystem;

namespace flowcd::forge {

namespace {

double clamp01(double v) { return std::min(std::max(v, 0.0), 1.0); }

std::string pad_id(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06d", i);
    return buf;
}

// Border-clamped bilinear read of one channel of a (C,H,W) tensor.
double sample_ch(const Tensor& t, int c, double y, double x) {
    const int h = t.size(1), w = t.size(2);
    x = std::min(std::max(x, 0.0), w - 1.0);
    y = std::min(std::max(y, 0.0), h - 1.0);
    const int x0 = static_cast<int>(x), y0 = static_cast<int>(y);
    const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    const double fx = x - x0, fy = y - y0;
    return (1 - fy) * ((1 - fx) * t.at(c, y0, x0) + fx * t.at(c, y0, x1)) +
           fy * ((1 - fx) * t.at(c, y1, x0) + fx * t.at(c, y1, x1));
}

const int kPerms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};

} // namespace

void ObjectCutout::validate() const {
    if (rgba.dim() != 3 || rgba.size(0) != 4) throw ValidationError("cutout: expects (4,h,w)");
    double support = 0.0;
    const long plane = static_cast<long>(height()) * width();
    for (long i = 0; i < plane; ++i) support += rgba[3 * plane + i];
    if (support <= 0.0) throw ValidationError("cutout: empty alpha support");
}

void ForgeConfig::validate() const {
    if (scale_lo > scale_hi || scale_lo <= 0.0) throw ValidationError("forge config: bad scale range");
    if (brightness_lo > brightness_hi) throw ValidationError("forge config: bad brightness range");
    if (contrast_lo > contrast_hi || contrast_lo <= 0.0) throw ValidationError("forge config: bad contrast range");
    if (paste_min < 0 || paste_min > paste_max) throw ValidationError("forge config: bad paste count range");
    if (paste_margin < 0) throw ValidationError("forge config: negative paste margin");
    if (rotation_range_deg < 0.0) throw ValidationError("forge config: bad rotation range");
    if (channel_shuffle_prob < 0.0 || channel_shuffle_prob > 1.0)
        throw ValidationError("forge config: bad shuffle probability");
    if (out_width < 16 || out_height < 16 || out_width % 8 != 0 || out_height % 8 != 0)
        throw ValidationError("forge config: output dims must be >= 16 and divisible by 8");
    if (flow_max <= 0.0) throw ValidationError("forge config: flow_max must be positive");
}

nlohmann::json ForgeConfig::to_json() const {
    return nlohmann::json{{"scale_range", {scale_lo, scale_hi}},
                          {"rotation_range_deg", rotation_range_deg},
                          {"channel_shuffle_prob", channel_shuffle_prob},
                          {"brightness_range", {brightness_lo, brightness_hi}},
                          {"contrast_range", {contrast_lo, contrast_hi}},
                          {"paste_count_range", {paste_min, paste_max}},
                          {"paste_margin", paste_margin},
                          {"seed", seed},
                          {"output_size", {out_width, out_height}},
                          {"sample_count", sample_count},
                          {"paste_into_t0", paste_into_t0},
                          {"split", split},
                          {"background_count", background_count},
                          {"cutout_count", cutout_count},
                          {"flow_max", flow_max},
                          {"cutout_sheet_px", cutout_sheet_px},
                          {"rect_cutouts_only", rect_cutouts_only}};
}

ForgeConfig ForgeConfig::from_json(const nlohmann::json& j) {
    ForgeConfig c;
    if (j.contains("scale_range")) {
        c.scale_lo = j["scale_range"][0];
        c.scale_hi = j["scale_range"][1];
    }
    if (j.contains("rotation_range_deg")) c.rotation_range_deg = j["rotation_range_deg"];
    if (j.contains("channel_shuffle_prob")) c.channel_shuffle_prob = j["channel_shuffle_prob"];
    if (j.contains("brightness_range")) {
        c.brightness_lo = j["brightness_range"][0];
        c.brightness_hi = j["brightness_range"][1];
    }
    if (j.contains("contrast_range")) {
        c.contrast_lo = j["contrast_range"][0];
        c.contrast_hi = j["contrast_range"][1];
    }
    if (j.contains("paste_count_range")) {
        c.paste_min = j["paste_count_range"][0];
        c.paste_max = j["paste_count_range"][1];
    }
    if (j.contains("paste_margin")) c.paste_margin = j["paste_margin"];
    if (j.contains("seed")) c.seed = j["seed"];
    if (j.contains("output_size")) {
        c.out_width = j["output_size"][0];
        c.out_height = j["output_size"][1];
    }
    if (j.contains("sample_count")) c.sample_count = j["sample_count"];
    if (j.contains("paste_into_t0")) c.paste_into_t0 = j["paste_into_t0"];
    if (j.contains("split")) c.split = j["split"];
    if (j.contains("background_count")) c.background_count = j["background_count"];
    if (j.contains("cutout_count")) c.cutout_count = j["cutout_count"];
    if (j.contains("flow_max")) c.flow_max = j["flow_max"];
    if (j.contains("cutout_sheet_px")) c.cutout_sheet_px = j["cutout_sheet_px"];
    if (j.contains("rect_cutouts_only")) c.rect_cutouts_only = j["rect_cutouts_only"];
    c.validate();
    return c;
}

std::string DatasetManifest::resolve(const std::string& rel) const {
    return (fs::path(root) / rel).string();
}

void write_manifest(const DatasetManifest& m, const std::string& path) {
    nlohmann::json j;
    j["split"] = m.split;
    j["count"] = m.entries.size();
    j["config"] = m.config_echo;
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : m.entries)
        arr.push_back({{"id", e.id},
                       {"t0", e.t0},
                       {"t1", e.t1},
                       {"flow", e.flow},
                       {"change", e.change},
                       {"paste_count", e.paste_count}});
    j["entries"] = std::move(arr);
    std::ofstream f(path);
    if (!f) throw IoError("cannot write manifest: " + path);
    f << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::string& path) {
    if (!fs::exists(path)) throw ValidationError("manifest missing: " + path);
    std::ifstream f(path);
    if (!f) throw IoError("cannot open manifest: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed manifest " + path + ": " + e.what());
    }
    DatasetManifest m;
    m.root = fs::path(path).parent_path().string();
    m.split = j.value("split", "train");
    if (j.contains("config")) m.config_echo = j["config"];
    std::set<std::string> ids;
    for (const auto& e : j.at("entries")) {
        ManifestEntry me;
        me.id = e.at("id");
        me.t0 = e.at("t0");
        me.t1 = e.at("t1");
        me.flow = e.at("flow");
        me.change = e.at("change");
        me.paste_count = e.value("paste_count", 0);
        if (!ids.insert(me.id).second) throw ValidationError("manifest: duplicate id " + me.id);
        for (const std::string& p : {me.t0, me.t1, me.flow, me.change})
            if (!fs::exists(m.resolve(p)))
                throw ValidationError("manifest references missing file: " + m.resolve(p));
        m.entries.push_back(std::move(me));
    }
    return m;
}

SourceManifests load_sources(const std::string& backgrounds_path, const std::string& cutouts_path) {
    SourceManifests s;
    s.root = fs::path(backgrounds_path).parent_path().string();
    if (!fs::exists(backgrounds_path))
        throw ValidationError("background manifest missing: " + backgrounds_path);
    std::ifstream bf(backgrounds_path);
    if (!bf) throw IoError("cannot open background manifest: " + backgrounds_path);
    nlohmann::json bj;
    bf >> bj;
    for (const auto& e : bj.at("backgrounds")) {
        BackgroundEntry be{e.at("t0"), e.at("t1"), e.at("flow")};
        for (const std::string& p : {be.t0, be.t1, be.flow}) {
            const std::string full = (fs::path(s.root) / p).string();
            if (!fs::exists(full)) throw ValidationError("background source missing: " + full);
        }
        s.backgrounds.push_back(std::move(be));
    }
    if (!fs::exists(cutouts_path)) throw ValidationError("cutout manifest missing: " + cutouts_path);
    std::ifstream cf(cutouts_path);
    if (!cf) throw IoError("cannot open cutout manifest: " + cutouts_path);
    nlohmann::json cj;
    cf >> cj;
    for (const auto& e : cj.at("cutouts")) {
        const std::string p = e.at("rgba");
        const std::string full = (fs::path(s.root) / p).string();
        if (!fs::exists(full)) throw ValidationError("cutout source missing: " + full);
        s.cutouts.push_back(p);
    }
    return s;
}

std::vector<ObjectCutout> extract_cutouts(const Image& image, const std::vector<int>& seg_mask,
                                          const std::set<int>& classes) {
    image.validate();
    const int h = image.height(), w = image.width();
    if (static_cast<long>(seg_mask.size()) != static_cast<long>(h) * w)
        throw ValidationError("extract_cutouts: seg mask not aligned with image");

    std::vector<ObjectCutout> out;
    std::vector<char> seen(seg_mask.size(), 0);
    for (int sy = 0; sy < h; ++sy)
        for (int sx = 0; sx < w; ++sx) {
            const long start = static_cast<long>(sy) * w + sx;
            const int label = seg_mask[start];
            if (seen[start] || classes.count(label) == 0) continue;
            // BFS flood fill, 4-connectivity.
            std::vector<long> pixels;
            std::queue<long> q;
            q.push(start);
            seen[start] = 1;
            int y0 = sy, y1 = sy, x0 = sx, x1 = sx;
            while (!q.empty()) {
                const long p = q.front();
                q.pop();
                pixels.push_back(p);
                const int py = static_cast<int>(p / w), px = static_cast<int>(p % w);
                y0 = std::min(y0, py);
                y1 = std::max(y1, py);
                x0 = std::min(x0, px);
                x1 = std::max(x1, px);
                const int ny[4] = {py - 1, py + 1, py, py};
                const int nx[4] = {px, px, px - 1, px + 1};
                for (int k = 0; k < 4; ++k) {
                    if (ny[k] < 0 || ny[k] >= h || nx[k] < 0 || nx[k] >= w) continue;
                    const long np = static_cast<long>(ny[k]) * w + nx[k];
                    if (!seen[np] && seg_mask[np] == label) {
                        seen[np] = 1;
                        q.push(np);
                    }
                }
            }
            ObjectCutout cut;
            cut.class_tag = "cls" + std::to_string(label);
            cut.rgba = Tensor({4, y1 - y0 + 1, x1 - x0 + 1});
            for (long p : pixels) {
                const int py = static_cast<int>(p / w), px = static_cast<int>(p % w);
                for (int c = 0; c < 3; ++c) cut.rgba.at(c, py - y0, px - x0) = image.at(py, px, c);
                cut.rgba.at(3, py - y0, px - x0) = 1.0;
            }
            out.push_back(std::move(cut));
        }
    return out;
}

ObjectCutout resample_cutout(const ObjectCutout& obj, double s, double rot_deg, int perm_index,
                             int frame_w, int frame_h) {
    obj.validate();
    if (s <= 0.0) throw ValidationError("resample_cutout: scale must be positive");
    const int* perm = kPerms[perm_index % 6];
    const double theta = rot_deg * M_PI / 180.0;

    const int h = obj.height(), w = obj.width();
    const double ct = std::cos(theta), st = std::sin(theta);
    // ceil with a tiny slack so exact 0/90/180 rotations keep tight canvases
    auto out_dims = [&](double sc, int& nw, int& nh) {
        nw = std::max(1, static_cast<int>(std::ceil(sc * (w * std::fabs(ct) + h * std::fabs(st)) - 1e-9)));
        nh = std::max(1, static_cast<int>(std::ceil(sc * (w * std::fabs(st) + h * std::fabs(ct)) - 1e-9)));
    };
    int nw = 0, nh = 0;
    out_dims(s, nw, nh);
    if (nw > frame_w || nh > frame_h) {
        const double fit =
            std::min(static_cast<double>(frame_w) / nw, static_cast<double>(frame_h) / nh);
        s *= fit;
        out_dims(s, nw, nh);
        std::fprintf(stderr, "[forge] cutout rescaled to fit frame (fit factor %.3f)\n", fit);
    }

    ObjectCutout out;
    out.class_tag = obj.class_tag;
    out.rgba = Tensor({4, nh, nw});
    const double cox = (nw - 1) / 2.0, coy = (nh - 1) / 2.0;
    const double cix = (w - 1) / 2.0, ciy = (h - 1) / 2.0;
    for (int y = 0; y < nh; ++y)
        for (int x = 0; x < nw; ++x) {
            const double xr = x - cox, yr = y - coy;
            const double sx = (ct * xr + st * yr) / s + cix;
            const double sy = (-st * xr + ct * yr) / s + ciy;
            if (sx < -1.0 || sx > w || sy < -1.0 || sy > h) continue; // fully outside support
            // Zero-padded bilinear: out-of-range taps contribute nothing.
            const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
            const double fx = sx - x0, fy = sy - y0;
            for (int c = 0; c < 4; ++c) {
                auto tap = [&](int yy, int xx) {
                    if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
                    return obj.rgba.at(c < 3 ? perm[c] : 3, yy, xx);
                };
                out.rgba.at(c, y, x) = (1 - fy) * ((1 - fx) * tap(y0, x0) + fx * tap(y0, x0 + 1)) +
                                       fy * ((1 - fx) * tap(y0 + 1, x0) + fx * tap(y0 + 1, x0 + 1));
            }
        }
    return out;
}

ObjectCutout transform_cutout(const ObjectCutout& obj, const ForgeConfig& cfg, Rng& rng) {
    cfg.validate();
    // Draw order (replayed by tests): scale, rotation, shuffle coin, permutation.
    const double s = rng.uniform(cfg.scale_lo, cfg.scale_hi);
    const double rot = rng.uniform(-cfg.rotation_range_deg, cfg.rotation_range_deg);
    const bool shuffle = rng.uniform() < cfg.channel_shuffle_prob;
    const int perm_index = shuffle ? static_cast<int>(rng.below(6)) : 0;
    return resample_cutout(obj, s, rot, perm_index, cfg.out_width, cfg.out_height);
}

BitemporalSample composite_sample(const Image& background_t0, const Image& background_t1,
                                  const FlowField& flow_gt, const std::vector<ObjectCutout>& cutouts,
                                  const ForgeConfig& cfg, Rng& rng) {
    background_t0.validate();
    background_t1.validate();
    flow_gt.validate();
    const int h = background_t0.height(), w = background_t0.width();
    if (background_t1.height() != h || background_t1.width() != w || flow_gt.height() != h ||
        flow_gt.width() != w)
        throw ValidationError("composite_sample: background/flow shape mismatch");

    BitemporalSample s;
    s.t0 = background_t0;
    s.t1 = background_t1;
    s.flow_label = flow_gt;
    s.change_label = ChangeMask::zeros(h, w, ChangeMask::Kind::ground_truth);

    Image& target = cfg.paste_into_t0 ? s.t0 : s.t1;
    for (const auto& cut : cutouts) {
        const int ch = cut.height(), cw = cut.width();
        if (cw > w || ch > h) throw ValidationError("composite_sample: cutout larger than frame");
        // margin shrinks the position range when it fits, never below empty
        const int mx = std::min(cfg.paste_margin, std::max(0, (w - cw) / 2));
        const int my = std::min(cfg.paste_margin, std::max(0, (h - ch) / 2));
        const int px = mx + static_cast<int>(rng.below(static_cast<std::uint64_t>(w - cw - 2 * mx + 1)));
        const int py = my + static_cast<int>(rng.below(static_cast<std::uint64_t>(h - ch - 2 * my + 1)));
        for (int y = 0; y < ch; ++y)
            for (int x = 0; x < cw; ++x) {
                const double a = cut.rgba.at(3, y, x);
                if (a <= 0.0) continue;
                for (int c = 0; c < 3; ++c) {
                    double& dst = target.at(py + y, px + x, c);
                    dst = clamp01(a * cut.rgba.at(c, y, x) + (1.0 - a) * dst);
                }
                if (a >= 0.5) s.change_label.at(py + y, px + x) = 1.0;
            }
    }

    // Identically-seeded photometric augmentation of the pair; labels untouched.
    const double db = rng.uniform(cfg.brightness_lo, cfg.brightness_hi);
    const double fc = rng.uniform(cfg.contrast_lo, cfg.contrast_hi);
    for (Image* img : {&s.t0, &s.t1})
        for (long i = 0; i < img->data.numel(); ++i)
            img->data[i] = clamp01((img->data[i] - 0.5) * fc + 0.5 + db);
    return s;
}

void write_sample(const std::string& dir, const BitemporalSample& sample) {
    sample.validate();
    fs::create_directories(dir);
    write_png_rgb((fs::path(dir) / "t0.png").string(), sample.t0.data);
    write_png_rgb((fs::path(dir) / "t1.png").string(), sample.t1.data);
    write_flo((fs::path(dir) / "flow.flo").string(), sample.flow_label);
    write_png_gray((fs::path(dir) / "change.png").string(), sample.change_label.data);
}

BitemporalSample read_sample(const std::string& dir, const std::string& id) {
    BitemporalSample s;
    s.id = id;
    s.t0 = Image(read_png_rgb((fs::path(dir) / "t0.png").string()));
    s.t1 = Image(read_png_rgb((fs::path(dir) / "t1.png").string()));
    s.flow_label = read_flo((fs::path(dir) / "flow.flo").string());
    s.change_label = ChangeMask(read_png_gray((fs::path(dir) / "change.png").string()),
                                ChangeMask::Kind::ground_truth);
    s.validate();
    return s;
}

BitemporalSample read_sample(const DatasetManifest& m, const ManifestEntry& e) {
    BitemporalSample s;
    s.id = e.id;
    s.t0 = Image(read_png_rgb(m.resolve(e.t0)));
    s.t1 = Image(read_png_rgb(m.resolve(e.t1)));
    s.flow_label = read_flo(m.resolve(e.flow));
    s.change_label = ChangeMask(read_png_gray(m.resolve(e.change)), ChangeMask::Kind::ground_truth);
    s.validate();
    return s;
}

DatasetManifest forge_dataset(const SourceManifests& sources, const ForgeConfig& cfg,
                              const std::string& out_dir) {
    cfg.validate();
    if (sources.backgrounds.empty()) throw ValidationError("forge: no background pairs");
    if (sources.cutouts.empty() && cfg.paste_max > 0) throw ValidationError("forge: no cutouts");
    const int n = cfg.sample_count > 0 ? cfg.sample_count : static_cast<int>(sources.backgrounds.size());
    if (n > static_cast<int>(sources.backgrounds.size()))
        throw ValidationError("forge: requested more samples than background pairs");

    fs::create_directories(out_dir);
    Rng base(cfg.seed);
    DatasetManifest m;
    m.split = cfg.split;
    m.config_echo = cfg.to_json();
    m.root = out_dir;

    for (int i = 0; i < n; ++i) {
        Rng rng = base.fork(static_cast<std::uint64_t>(i));
        const auto& bg = sources.backgrounds[static_cast<std::size_t>(i)];
        const Image t0(read_png_rgb((fs::path(sources.root) / bg.t0).string()));
        const Image t1(read_png_rgb((fs::path(sources.root) / bg.t1).string()));
        const FlowField flow = read_flo((fs::path(sources.root) / bg.flow).string());
        if (t0.width() != cfg.out_width || t0.height() != cfg.out_height)
            throw ValidationError("forge: background size differs from configured output size");

        const int n_paste =
            cfg.paste_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.paste_max - cfg.paste_min + 1)));
        std::vector<ObjectCutout> cuts;
        for (int k = 0; k < n_paste; ++k) {
            const std::size_t idx = rng.below(sources.cutouts.size());
            ObjectCutout raw;
            raw.rgba = read_png_rgba((fs::path(sources.root) / sources.cutouts[idx]).string());
            raw.class_tag = "pool" + std::to_string(idx);
            cuts.push_back(transform_cutout(raw, cfg, rng));
        }
        BitemporalSample sample = composite_sample(t0, t1, flow, cuts, cfg, rng);
        sample.id = pad_id(i);

        write_sample((fs::path(out_dir) / sample.id).string(), sample);
        ManifestEntry e;
        e.id = sample.id;
        e.t0 = sample.id + "/t0.png";
        e.t1 = sample.id + "/t1.png";
        e.flow = sample.id + "/flow.flo";
        e.change = sample.id + "/change.png";
        e.paste_count = n_paste;
        m.entries.push_back(std::move(e));
    }
    write_manifest(m, (fs::path(out_dir) / "manifest.json").string());
    return m;
}

namespace {

std::vector<double> blurred_noise(Rng& rng, int h, int w, int radius, int passes) {
    std::vector<double> noise(static_cast<std::size_t>(h) * w);
    for (auto& v : noise) v = rng.uniform(-1.0, 1.0);
    for (int pass = 0; pass < passes; ++pass) {
        std::vector<double> tmp = noise;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double s = 0.0;
                int cnt = 0;
                for (int dy = -radius; dy <= radius; ++dy)
                    for (int dx = -radius; dx <= radius; ++dx) {
                        const int yy = y + dy, xx = x + dx;
                        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                        s += tmp[static_cast<std::size_t>(yy) * w + xx];
                        ++cnt;
                    }
                noise[static_cast<std::size_t>(y) * w + x] = s / cnt;
            }
    }
    return noise;
}

Image synth_texture(Rng& rng, int width, int height) {
    Image img = Image::blank(height, width, 0.5);
    const int h = height, w = width;
    // Two noise octaves (fine grain + blob-scale structure) plus a sinusoid.
    // The coarse octave is what gives stride-8 feature patches distinct
    // signatures for correlation matching.
    for (int c = 0; c < 3; ++c) {
        const double base = rng.uniform(0.3, 0.7);
        const double amp = rng.uniform(0.08, 0.15);
        const double fx = rng.uniform(2.0, 6.0), fy = rng.uniform(2.0, 6.0);
        const double ph = rng.uniform(0.0, 2.0 * M_PI);
        const auto fine = blurred_noise(rng, h, w, 1, 1);
        const auto coarse = blurred_noise(rng, h, w, 3, 2);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const std::size_t i = static_cast<std::size_t>(y) * w + x;
                const double sinus = amp * std::sin(2.0 * M_PI * (fx * x / w + fy * y / h) + ph);
                const double v = base + sinus + 0.25 * fine[i] + 0.9 * coarse[i];
                img.at(y, x, c) = clamp01(0.05 + 0.9 * clamp01(v));
            }
    }
    return img;
}

FlowField synth_flow(Rng& rng, int width, int height, double flow_max) {
    FlowField f = FlowField::zero(height, width);
    for (int c = 0; c < 2; ++c) {
        const double a0 = rng.uniform(0.35, 0.6) * flow_max * (rng.uniform() < 0.5 ? -1.0 : 1.0);
        const double a1 = rng.uniform(0.2, 0.4) * flow_max;
        const double px = rng.uniform(0.0, 2.0 * M_PI), py = rng.uniform(0.0, 2.0 * M_PI);
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
                const double v =
                    a0 + a1 * std::sin(2.0 * M_PI * x / width + px) * std::sin(2.0 * M_PI * y / height + py);
                f.data.at(c, y, x) = v;
            }
    }
    return f;
}

// Approximate photometric consistency: t1(x) = t0(x - f(x)). Exact inversion
// is unnecessary for smooth, small fields.
Image synth_second_frame(const Image& t0, const FlowField& flow) {
    Image t1 = Image::blank(t0.height(), t0.width());
    for (int y = 0; y < t0.height(); ++y)
        for (int x = 0; x < t0.width(); ++x)
            for (int c = 0; c < 3; ++c)
                t1.at(y, x, c) = sample_ch(t0.data, c, y - flow.v(y, x), x - flow.u(y, x));
    return t1;
}

// A sheet with one high-contrast striped shape, segments labeled 1. Shapes
// are axis-aligned; orientation comes from the paste-time rotation draw.
std::pair<Image, std::vector<int>> synth_cutout_sheet(Rng& rng, int side, bool rect_only) {
    Image sheet = Image::blank(side, side, 0.5);
    std::vector<int> seg(static_cast<std::size_t>(side) * side, 0);
    const double cx = side / 2.0 + rng.uniform(-2.0, 2.0);
    const double cy = side / 2.0 + rng.uniform(-2.0, 2.0);
    const double ra = rng.uniform(side * 0.26, side * 0.42);
    const double rb = rng.uniform(side * 0.26, side * 0.42);
    const bool rectangle = rect_only || rng.uniform() < 0.5;
    // extreme palette: pasted objects should contrast the mid-range backgrounds
    double col_a[3], col_b[3];
    for (int c = 0; c < 3; ++c) {
        const bool high = rng.uniform() < 0.5;
        col_a[c] = high ? rng.uniform(0.88, 1.0) : rng.uniform(0.0, 0.12);
        col_b[c] = high ? rng.uniform(0.0, 0.12) : rng.uniform(0.88, 1.0);
    }
    const double stripe_w = rng.uniform(3.0, 6.0);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
            const double xr = x - cx, yr = y - cy;
            const bool inside = rectangle ? (std::fabs(xr) <= ra && std::fabs(yr) <= rb)
                                          : (xr * xr / (ra * ra) + yr * yr / (rb * rb) <= 1.0);
            if (!inside) continue;
            seg[static_cast<std::size_t>(y) * side + x] = 1;
            const bool band = static_cast<int>(std::floor((xr + yr) / stripe_w)) % 2 == 0;
            for (int c = 0; c < 3; ++c) sheet.at(y, x, c) = band ? col_a[c] : col_b[c];
        }
    return {sheet, seg};
}

} // namespace

void make_procedural_sources(const std::string& dir, const ForgeConfig& cfg) {
    cfg.validate();
    fs::create_directories(dir);
    Rng base(cfg.seed);

    nlohmann::json bj;
    bj["backgrounds"] = nlohmann::json::array();
    for (int i = 0; i < cfg.background_count; ++i) {
        Rng rng = base.fork(0x10000u + static_cast<std::uint64_t>(i));
        const Image t0 = synth_texture(rng, cfg.out_width, cfg.out_height);
        const FlowField flow = synth_flow(rng, cfg.out_width, cfg.out_height, cfg.flow_max);
        const Image t1 = synth_second_frame(t0, flow);
        const std::string tag = "bg_" + pad_id(i);
        write_png_rgb((fs::path(dir) / (tag + "_t0.png")).string(), t0.data);
        write_png_rgb((fs::path(dir) / (tag + "_t1.png")).string(), t1.data);
        write_flo((fs::path(dir) / (tag + "_flow.flo")).string(), flow);
        bj["backgrounds"].push_back(
            {{"t0", tag + "_t0.png"}, {"t1", tag + "_t1.png"}, {"flow", tag + "_flow.flo"}});
    }
    std::ofstream bf(fs::path(dir) / "backgrounds.json");
    bf << bj.dump(2) << "\n";

    // Cutout pool goes through the production extraction path.
    const int side = cfg.cutout_sheet_px > 0
                         ? std::max(16, (cfg.cutout_sheet_px + 7) / 8 * 8)
                         : std::max(16, std::min(64, (std::min(cfg.out_width, cfg.out_height) / 4 + 7) / 8 * 8));
    nlohmann::json cj;
    cj["cutouts"] = nlohmann::json::array();
    for (int i = 0; i < cfg.cutout_count; ++i) {
        Rng rng = base.fork(0x20000u + static_cast<std::uint64_t>(i));
        auto [sheet, seg] = synth_cutout_sheet(rng, side, cfg.rect_cutouts_only);
        auto cuts = extract_cutouts(sheet, seg, {1});
        if (cuts.empty()) throw NumericError("procedural cutout synthesis produced no region");
        const std::string name = "cut_" + pad_id(i) + ".png";
        write_png_rgba((fs::path(dir) / name).string(), cuts.front().rgba);
        cj["cutouts"].push_back({{"rgba", name}, {"class", cuts.front().class_tag}});
    }
    std::ofstream cf(fs::path(dir) / "cutouts.json");
    cf << cj.dump(2) << "\n";
}

} // namespace flowcd::forge
