#pragma once

#include <string>
#include <vector>

#include "gprxv/detect.hpp"
#include "gprxv/fuse.hpp"
#include "gprxv/volume.hpp"

namespace gprxv {

/// Everything that determines a pipeline run over one volume.
struct PipelineConfig {
    WindowSpec window;
    int b_stride = 2;   // channels between B slices
    int c_stride = 2;   // samples between C slices
    int d_stride = 4;   // traces between D slices
    double wavelet_ghz = 0.4;
    double nms_iou = 0.45;
    CRuleParams c_rule;
    HyperbolaRuleParams hyperbola;
    Thresholds thresholds;

    void validate() const;
    std::string to_json() const;
    static PipelineConfig from_json(std::string_view text);
};

/// Runs the rule detectors of all three views over every window of `v`.
/// Output is in canonical order.
std::vector<Detection> detect_volume(const Volume& v, const PipelineConfig& cfg);

struct PipelineResult {
    std::vector<Detection> detections;
    FusionTrace trace;
};

PipelineResult run_pipeline(const Volume& v, const PipelineConfig& cfg);

}  // namespace gprxv
