#include "gprxv/pipeline.hpp"

#include <stdexcept>

#include <nlohmann/json.hpp>

namespace gprxv {

void PipelineConfig::validate() const
{
    if (window.length_traces < 1 || window.stride_traces < 1) throw std::invalid_argument("window length and stride must be >= 1");
    if (b_stride < 1 || c_stride < 1 || d_stride < 1) throw std::invalid_argument("slice strides must be >= 1");
    if (!(nms_iou > 0.0 && nms_iou < 1.0)) throw std::invalid_argument("nms IoU must be in (0, 1)");
    if (!(wavelet_ghz > 0.0)) throw std::invalid_argument("wavelet frequency must be positive");
    thresholds.validate();
}

std::string PipelineConfig::to_json() const
{
    const auto& c = c_rule;
    const auto& h = hyperbola;
    const auto& t = thresholds;
    nlohmann::json j = {
        {"window_len", window.length_traces},
        {"window_stride", window.stride_traces},
        {"b_stride", b_stride},
        {"c_stride", c_stride},
        {"d_stride", d_stride},
        {"wavelet_ghz", wavelet_ghz},
        {"nms_iou", nms_iou},
        {"c_rule",
         {{"quantile", c.quantile},
          {"floor", c.floor},
          {"refine_level", c.refine_level},
          {"min_area", c.min_area},
          {"patch_area", c.patch_area},
          {"min_fragments", c.min_fragments},
          {"group_gap", c.group_gap},
          {"manhole_fill", c.manhole_fill},
          {"anomaly_scale", c.anomaly_scale}}},
        {"hyperbola",
         {{"half_aperture", h.half_aperture},
          {"taper_m", h.taper_m},
          {"response_threshold", h.response_threshold},
          {"manhole_response", h.manhole_response},
          {"peak_radius", h.peak_radius},
          {"region_level", h.region_level}}},
        {"tau_h", t.healthy_veto},
        {"tau_m", t.manhole},
        {"tau_assoc", t.assoc},
        {"thickness", {{"b", t.thickness.b_channels}, {"c", t.thickness.c_samples}, {"d", t.thickness.d_traces}}},
    };
    return j.dump();
}

PipelineConfig PipelineConfig::from_json(std::string_view text)
{
    const auto j = nlohmann::json::parse(text);
    PipelineConfig cfg;
    // Missing keys keep their defaults so partial configs can be posted.
    auto get = [](const nlohmann::json& o, const char* key, auto& field) {
        if (o.contains(key)) field = o.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    get(j, "window_len", cfg.window.length_traces);
    get(j, "window_stride", cfg.window.stride_traces);
    get(j, "b_stride", cfg.b_stride);
    get(j, "c_stride", cfg.c_stride);
    get(j, "d_stride", cfg.d_stride);
    get(j, "wavelet_ghz", cfg.wavelet_ghz);
    get(j, "nms_iou", cfg.nms_iou);
    if (j.contains("c_rule")) {
        const auto& c = j.at("c_rule");
        auto& p = cfg.c_rule;
        get(c, "quantile", p.quantile);
        get(c, "floor", p.floor);
        get(c, "refine_level", p.refine_level);
        get(c, "min_area", p.min_area);
        get(c, "patch_area", p.patch_area);
        get(c, "min_fragments", p.min_fragments);
        get(c, "group_gap", p.group_gap);
        get(c, "manhole_fill", p.manhole_fill);
        get(c, "anomaly_scale", p.anomaly_scale);
    }
    if (j.contains("hyperbola")) {
        const auto& h = j.at("hyperbola");
        auto& p = cfg.hyperbola;
        get(h, "half_aperture", p.half_aperture);
        get(h, "taper_m", p.taper_m);
        get(h, "response_threshold", p.response_threshold);
        get(h, "manhole_response", p.manhole_response);
        get(h, "peak_radius", p.peak_radius);
        get(h, "region_level", p.region_level);
    }
    get(j, "tau_h", cfg.thresholds.healthy_veto);
    get(j, "tau_m", cfg.thresholds.manhole);
    get(j, "tau_assoc", cfg.thresholds.assoc);
    if (j.contains("thickness")) {
        const auto& t = j.at("thickness");
        get(t, "b", cfg.thresholds.thickness.b_channels);
        get(t, "c", cfg.thresholds.thickness.c_samples);
        get(t, "d", cfg.thresholds.thickness.d_traces);
    }
    cfg.validate();
    return cfg;
}

std::vector<Detection> detect_volume(const Volume& v, const PipelineConfig& cfg)
{
    cfg.validate();
    std::vector<Detection> out;
    auto keep = [&](std::vector<Detection> dets) {
        if (dets.empty()) return;
        for (auto& d : nms(std::move(dets), cfg.nms_iou)) out.push_back(std::move(d));
    };

    const auto windows = sliding_windows(v, cfg.window.clamped_to(v.n_traces()));
    for (int k = 0; k < v.n_samples(); k += cfg.c_stride) {
        const SliceImage full = c_scan(v, k);
        for (const auto& w : windows) keep(detect_cscan_rule(crop_traces(full, w), cfg.c_rule));
    }
    const SliceGeometry gb = slice_geometry(v, View::B, cfg.wavelet_ghz);
    for (int c = 0; c < v.n_channels(); c += cfg.b_stride) {
        const SliceImage full = b_scan(v, c);
        for (const auto& w : windows) keep(detect_bscan_rule(crop_traces(full, w), gb, cfg.hyperbola));
    }
    const SliceGeometry gd = slice_geometry(v, View::D, cfg.wavelet_ghz);
    for (int x = 0; x < v.n_traces(); x += cfg.d_stride) {
        keep(detect_dscan_rule(d_scan(v, x), gd, cfg.hyperbola));
    }
    canonical_sort(out);
    return out;
}

PipelineResult run_pipeline(const Volume& v, const PipelineConfig& cfg)
{
    PipelineResult r;
    r.detections = detect_volume(v, cfg);
    r.trace = cross_verify_trace(r.detections, cfg.thresholds, v.dims());
    return r;
}

}  // namespace gprxv
