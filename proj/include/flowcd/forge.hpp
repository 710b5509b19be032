// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowcd/common.hpp"
#include "flowcd/core.hpp"

namespace flowcd::forge {

/// Segmentation cutout: RGB plus an alpha channel carrying the region mask.
struct ObjectCutout {
    Tensor rgba; // (4,h,w), alpha binary before transformation
    std::string class_tag;

    int height() const { return rgba.size(1); }
    int width() const { return rgba.size(2); }
    void validate() const;
};

struct ForgeConfig {
    double scale_lo = 0.5, scale_hi = 1.5;
    double rotation_range_deg = 180.0;
    double channel_shuffle_prob = 0.5;
    double brightness_lo = -0.2, brightness_hi = 0.2;
    double contrast_lo = 0.8, contrast_hi = 1.2;
    int paste_min = 1, paste_max = 3;
    int paste_margin = 0; // keep pasted boxes this many px away from the frame border
    std::uint64_t seed = 1;
    int out_width = 512, out_height = 384;
    int sample_count = 0;       // 0 = one sample per available background pair
    bool paste_into_t0 = false; // object disappearance instead of appearance
    std::string split = "train";

    // Procedural source generation (the bundled stand-in for real corpora).
    int background_count = 8;
    int cutout_count = 6;
    double flow_max = 2.5;
    int cutout_sheet_px = 0;        // canvas side for synthesized cutouts; 0 = min(W,H)/4
    bool rect_cutouts_only = false; // procedural pool: rectangles only (no ellipses)

    void validate() const;
    nlohmann::json to_json() const;
    static ForgeConfig from_json(const nlohmann::json& j);
};

struct ManifestEntry {
    std::string id;
    std::string t0, t1, flow, change; // paths relative to the manifest file
    int paste_count = 0;
};

struct DatasetManifest {
    std::string split;
    std::vector<ManifestEntry> entries;
    nlohmann::json config_echo;
    std::string root; // directory holding the manifest

    std::string resolve(const std::string& rel) const;
};

void write_manifest(const DatasetManifest& m, const std::string& path);
/// Loads and verifies that every referenced file exists and ids are unique.
DatasetManifest load_manifest(const std::string& path);

// Source manifests consumed by forge_dataset.
struct BackgroundEntry {
    std::string t0, t1, flow;
};
struct SourceManifests {
    std::vector<BackgroundEntry> backgrounds;
    std::vector<std::string> cutouts; // RGBA png paths
    std::string root;
};
SourceManifests load_sources(const std::string& backgrounds_path, const std::string& cutouts_path);

/// One cutout per connected region whose seg label is in `classes`;
/// bounding boxes are tight. No matching regions yields an empty list.
std::vector<ObjectCutout> extract_cutouts(const Image& image, const std::vector<int>& seg_mask,
                                          const std::set<int>& classes);

/// Deterministic geometric/photometric core of transform_cutout: scale,
/// rotate (degrees), optionally permute channels (index into the 6 RGB
/// permutations), resampling into a tight canvas. Rescales to fit the frame.
ObjectCutout resample_cutout(const ObjectCutout& obj, double scale, double rot_deg, int perm_index,
                             int frame_w, int frame_h);

/// Random scale/rotation/channel-shuffle; deterministic under `rng`. A result
/// larger than the output frame is rescaled to fit.
ObjectCutout transform_cutout(const ObjectCutout& obj, const ForgeConfig& cfg, Rng& rng);

/// Alpha-blends cutouts into the second frame (first if configured), builds the
/// change label as the union of alphas binarized at 0.5, then applies the
/// identically-seeded brightness/contrast augmentation to the pair. The flow
/// label passes through untouched.
BitemporalSample composite_sample(const Image& background_t0, const Image& background_t1,
                                  const FlowField& flow_gt, const std::vector<ObjectCutout>& cutouts,
                                  const ForgeConfig& cfg, Rng& rng);

void write_sample(const std::string& dir, const BitemporalSample& sample);
BitemporalSample read_sample(const std::string& dir, const std::string& id);
BitemporalSample read_sample(const DatasetManifest& m, const ManifestEntry& e);

/// Full pipeline: sequential background pairs, per-sample rng streams,
/// cutout transforms, compositing, serialization and the output manifest.
DatasetManifest forge_dataset(const SourceManifests& sources, const ForgeConfig& cfg,
                              const std::string& out_dir);

/// Bundled procedural stand-in for the real corpora: textured backgrounds with
/// smooth flow between frames plus a pool of shaped cutouts, written under
/// `dir` with the two source manifests.
void make_procedural_sources(const std::string& dir, const ForgeConfig& cfg);

} // namespace flowcd::forge
