#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gprxv/box.hpp"
#include "gprxv/volume.hpp"

namespace gprxv {

enum class Label : std::uint8_t { Healthy, Void, Loose, Manhole };

std::string_view to_string(Label l);
/// Throws std::invalid_argument for names outside {healthy, void, loose, manhole}.
Label label_from_string(std::string_view s);

/// One per-view detection. bbox is in slice coordinates; for B and C views
/// its columns are relative to `window`.
struct Detection {
    View view = View::C;
    int slice_index = 0;
    TraceRange window;
    Box2 bbox;
    Label cls = Label::Healthy;
    double score = 0.0;
    std::string source;

    bool operator==(const Detection&) const = default;
};

/// Total order used wherever detections must be merged deterministically.
bool canonical_less(const Detection& a, const Detection& b);
void canonical_sort(std::vector<Detection>& dets);

struct DetectorProfile {
    View view = View::C;
    std::vector<Label> classes;
    double score_threshold = 0.0;

    bool emits(Label l) const;
};

DetectorProfile default_profile(View v);

/// Greedy hard suppression per class. Input must share one view and slice.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh);

struct CRuleParams {
    double quantile = 0.95;        // adaptive threshold on |pixel - median|
    double floor = 0.08;           // absolute lower bound of the threshold
    double refine_level = 0.5;     // patch shape is taken at this fraction of its peak
    int min_area = 4;              // clusters smaller than this are ignored
    int patch_area = 60;           // a component this large is a patch, not speckle
    int min_fragments = 3;
    int group_gap = 4;             // components closer than this (px) form one cluster
    double manhole_fill = 0.85;
    double anomaly_scale = 0.4;    // |pixel - median| at which health confidence reaches 0
};

/// Lateral and temporal sampling needed to build hyperbola templates.
struct SliceGeometry {
    double lateral_spacing_m = 0.05;
    double sample_interval_ns = 180.0 / 511.0;
    double velocity_m_per_ns = 2.0 * 5.0 / 180.0;
    double wavelet_ghz = 0.4;
};

SliceGeometry slice_geometry(const Volume& v, View view, double wavelet_ghz = 0.4);

struct HyperbolaRuleParams {
    int half_aperture = 3;              // template columns on each side of the apex
    double taper_m = 0.15;              // Gaussian lateral weight of template columns
    double response_threshold = 0.4;
    double manhole_response = 1.45;
    int peak_radius = 3;
    double region_level = 0.5;
};

/// Patch/speckle classifier for horizontal sections.
std::vector<Detection> detect_cscan_rule(const SliceImage& img, const CRuleParams& p = {});

/// Hyperbola-template detectors for longitudinal and transverse sections.
std::vector<Detection> detect_bscan_rule(const SliceImage& img, const SliceGeometry& g,
                                         const HyperbolaRuleParams& p = {});
std::vector<Detection> detect_dscan_rule(const SliceImage& img, const SliceGeometry& g,
                                         const HyperbolaRuleParams& p = {});

/// Template-matched response map: entry (k, a) is the weighted mean of the
/// background-removed image along the hyperbola with apex at row k, column a.
Image hyperbola_response(const Image& pixels, const SliceGeometry& g, const HyperbolaRuleParams& p);

/// Subtracts each row's median across columns.
Image remove_background(const Image& pixels);

/// Line-delimited detection records.
std::string detection_to_line(const Detection& d);
Detection detection_from_line(std::string_view line);
std::vector<Detection> import_detections(const std::filesystem::path& path);
void export_detections(std::span<const Detection> dets, const std::filesystem::path& path);

}  // namespace gprxv
