#include "gprxv/detect.hpp"

#include <cerrno>
#include <cstring>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <queue>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "gprxv/synth.hpp"

namespace gprxv {

namespace {

float median_of(std::vector<float> v)
{
    const auto mid = v.begin() + std::ptrdiff_t(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    if (v.size() % 2) return *mid;
    const float hi = *mid;
    const float lo = *std::max_element(v.begin(), mid);
    return 0.5f * (lo + hi);
}

float quantile_of(std::vector<float> v, double q)
{
    const auto pos = std::size_t(std::clamp(q, 0.0, 1.0) * double(v.size() - 1));
    std::nth_element(v.begin(), v.begin() + std::ptrdiff_t(pos), v.end());
    return v[pos];
}

struct Component {
    int area = 0;
    Box2 box{1 << 30, 1 << 30, -1, -1};
    float peak = 0;
    int peak_r = 0, peak_c = 0;
};

// 8-connected flood fill of `mask` from (r, c). Visited cells are set in `seen`.
template <typename Pred>
Component flood(int r, int c, int H, int W, std::vector<char>& seen, Pred&& in, const Eigen::ArrayXXf& val)
{
    Component comp;
    std::vector<std::pair<int, int>> stack{{r, c}};
    seen[std::size_t(c) * H + r] = 1;
    while (!stack.empty()) {
        auto [y, x] = stack.back();
        stack.pop_back();
        ++comp.area;
        comp.box = {std::min(comp.box.r0, y), std::min(comp.box.c0, x), std::max(comp.box.r1, y + 1),
                    std::max(comp.box.c1, x + 1)};
        if (val(y, x) > comp.peak) comp.peak = val(y, x), comp.peak_r = y, comp.peak_c = x;
        for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
                const int ny = y + dy, nx = x + dx;
                if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
                char& s = seen[std::size_t(nx) * H + ny];
                if (s || !in(ny, nx)) continue;
                s = 1;
                stack.emplace_back(ny, nx);
            }
        }
    }
    return comp;
}

int box_gap(const Box2& a, const Box2& b)
{
    const int rg = std::max({a.r0 - b.r1, b.r0 - a.r1, 0});
    const int cg = std::max({a.c0 - b.c1, b.c0 - a.c1, 0});
    return std::max(rg, cg);
}

struct UnionFind {
    std::vector<int> parent;
    explicit UnionFind(int n) : parent(std::size_t(n)) { std::iota(parent.begin(), parent.end(), 0); }
    int find(int i) { return parent[i] == i ? i : parent[i] = find(parent[i]); }
    void unite(int a, int b)
    {
        a = find(a), b = find(b);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
    }
};

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

std::vector<Detection> detect_hyperbolas(const SliceImage& img, const SliceGeometry& g,
                                         const HyperbolaRuleParams& p, View expected, const char* source)
{
    if (img.view != expected) {
        throw std::invalid_argument(std::string("hyperbola rule for view ") + std::string(to_string(expected)) +
                                    " received a " + std::string(to_string(img.view)) + "-scan");
    }
    const Image m = hyperbola_response(img.pixels, g, p);
    const int S = int(m.rows()), W = int(m.cols());
    const int J = p.half_aperture;
    const int hw = int(std::ceil(ricker_half_support_ns(g.wavelet_ghz) / g.sample_interval_ns));

    struct Cell {
        float v;
        int r, c;
    };
    std::vector<Cell> peaks;
    for (int c = 0; c < W; ++c) {
        for (int r = 0; r < S; ++r) {
            const float v = m(r, c);
            if (v < p.response_threshold) continue;
            const int r0 = std::max(0, r - p.peak_radius), r1 = std::min(S - 1, r + p.peak_radius);
            const int c0 = std::max(0, c - p.peak_radius), c1 = std::min(W - 1, c + p.peak_radius);
            if (m.block(r0, c0, r1 - r0 + 1, c1 - c0 + 1).maxCoeff() > v) continue;
            peaks.push_back({v, r, c});
        }
    }
    std::sort(peaks.begin(), peaks.end(), [](const Cell& a, const Cell& b) {
        return a.v != b.v ? a.v > b.v : (a.r != b.r ? a.r < b.r : a.c < b.c);
    });

    std::vector<char> claimed(std::size_t(S) * W, 0);
    std::vector<Detection> out;
    for (const Cell& pk : peaks) {
        if (claimed[std::size_t(pk.c) * S + pk.r]) continue;
        const float level = float(p.region_level) * pk.v;
        // 4-connected region of strong response around the peak
        int rmin = pk.r, rmax = pk.r, cmin = pk.c, cmax = pk.c;
        std::queue<std::pair<int, int>> q;
        q.emplace(pk.r, pk.c);
        claimed[std::size_t(pk.c) * S + pk.r] = 1;
        while (!q.empty()) {
            auto [r, c] = q.front();
            q.pop();
            rmin = std::min(rmin, r), rmax = std::max(rmax, r), cmin = std::min(cmin, c), cmax = std::max(cmax, c);
            const int nb[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
            for (auto& n : nb) {
                if (n[0] < 0 || n[0] >= S || n[1] < 0 || n[1] >= W) continue;
                char& cl = claimed[std::size_t(n[1]) * S + n[0]];
                if (cl || m(n[0], n[1]) < level) continue;
                cl = 1;
                q.emplace(n[0], n[1]);
            }
        }
        const double depth = g.velocity_m_per_ns * rmax * g.sample_interval_ns / 2.0;
        const double offset = J * g.lateral_spacing_m;
        const double t_edge = 2.0 / g.velocity_m_per_ns * std::sqrt(depth * depth + offset * offset);
        const int row_edge = int(std::lround(t_edge / g.sample_interval_ns));

        Detection d;
        d.view = img.view;
        d.slice_index = img.index;
        d.window = img.window;
        d.bbox = {std::max(0, rmin - hw), std::max(0, cmin - J), std::min(S, row_edge + hw + 1),
                  std::min(W, cmax + J + 1)};
        const double ratio = pk.v / p.manhole_response;
        if (pk.v > p.manhole_response) {
            d.cls = Label::Manhole;
            d.score = clamp01(0.5 + 0.5 * (ratio - 1.0));
        } else {
            d.cls = Label::Void;
            d.score = clamp01(ratio);
        }
        d.source = source;
        out.push_back(std::move(d));
    }
    return out;
}

nlohmann::json detection_json(const Detection& d)
{
    return {{"view", std::string(to_string(d.view))},
            {"slice_index", d.slice_index},
            {"window", {d.window.x0, d.window.x1}},
            {"bbox", {d.bbox.r0, d.bbox.c0, d.bbox.r1, d.bbox.c1}},
            {"cls", std::string(to_string(d.cls))},
            {"score", d.score},
            {"source", d.source}};
}

}  // namespace

std::string_view to_string(Label l)
{
    switch (l) {
        case Label::Healthy: return "healthy";
        case Label::Void: return "void";
        case Label::Loose: return "loose";
        case Label::Manhole: return "manhole";
    }
    return "?";
}

Label label_from_string(std::string_view s)
{
    if (s == "healthy") return Label::Healthy;
    if (s == "void") return Label::Void;
    if (s == "loose") return Label::Loose;
    if (s == "manhole") return Label::Manhole;
    throw std::invalid_argument("class '" + std::string(s) + "' is not one of healthy, void, loose, manhole");
}

bool canonical_less(const Detection& a, const Detection& b)
{
    if (a.view != b.view) return a.view < b.view;
    if (a.slice_index != b.slice_index) return a.slice_index < b.slice_index;
    if (a.window != b.window) return a.window < b.window;
    if (a.bbox != b.bbox) return a.bbox < b.bbox;
    if (a.score != b.score) return a.score > b.score;
    if (a.cls != b.cls) return a.cls < b.cls;
    return a.source < b.source;
}

void canonical_sort(std::vector<Detection>& dets) { std::stable_sort(dets.begin(), dets.end(), canonical_less); }

bool DetectorProfile::emits(Label l) const { return std::find(classes.begin(), classes.end(), l) != classes.end(); }

DetectorProfile default_profile(View v)
{
    switch (v) {
        case View::C: return {v, {Label::Healthy, Label::Void, Label::Loose, Label::Manhole}, 0.0};
        case View::B: return {v, {Label::Manhole, Label::Void, Label::Loose}, 0.0};
        case View::D: return {v, {Label::Void, Label::Loose, Label::Manhole}, 0.0};
    }
    return {};
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh)
{
    if (!(iou_thresh > 0.0 && iou_thresh < 1.0)) throw std::invalid_argument("nms threshold must be in (0, 1)");
    for (const auto& d : dets) {
        if (d.view != dets.front().view || d.slice_index != dets.front().slice_index) {
            throw std::invalid_argument("nms input mixes views or slices");
        }
    }
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.bbox < b.bbox;
    });
    std::vector<Detection> kept;
    for (auto& d : dets) {
        bool suppressed = false;
        for (const auto& k : kept) {
            if (k.cls == d.cls && iou(k.bbox, d.bbox) > iou_thresh) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(std::move(d));
    }
    return kept;
}

SliceGeometry slice_geometry(const Volume& v, View view, double wavelet_ghz)
{
    SliceGeometry g;
    g.lateral_spacing_m =
        view == View::D ? v.meta().channel_spacing_m(v.n_channels()) : v.meta().trace_spacing_m;
    g.sample_interval_ns = sample_interval_ns(v.meta(), v.n_samples());
    g.velocity_m_per_ns = v.meta().velocity_m_per_ns;
    g.wavelet_ghz = wavelet_ghz;
    return g;
}

Image remove_background(const Image& pixels)
{
    Image out = pixels;
    std::vector<float> row(std::size_t(pixels.cols()));
    for (Eigen::Index r = 0; r < pixels.rows(); ++r) {
        for (Eigen::Index c = 0; c < pixels.cols(); ++c) row[std::size_t(c)] = pixels(r, c);
        out.row(r).array() -= median_of(row);
    }
    return out;
}

Image hyperbola_response(const Image& pixels, const SliceGeometry& g, const HyperbolaRuleParams& p)
{
    const Image bg = remove_background(pixels);
    const int S = int(bg.rows()), W = int(bg.cols());
    const int J = p.half_aperture;
    std::vector<double> w(std::size_t(2 * J + 1));
    for (int j = -J; j <= J; ++j) {
        const double x = j * g.lateral_spacing_m / p.taper_m;
        w[std::size_t(j + J)] = std::exp(-x * x);
    }
    Image m = Image::Zero(S, W);
    std::vector<int> rows(std::size_t(2 * J + 1));
    for (int k = 0; k < S; ++k) {
        const double depth = g.velocity_m_per_ns * k * g.sample_interval_ns / 2.0;
        for (int j = -J; j <= J; ++j) {
            const double off = j * g.lateral_spacing_m;
            const double t = 2.0 / g.velocity_m_per_ns * std::sqrt(depth * depth + off * off);
            rows[std::size_t(j + J)] = int(std::lround(t / g.sample_interval_ns));
        }
        for (int a = 0; a < W; ++a) {
            double acc = 0, wsum = 0;
            for (int j = -J; j <= J; ++j) {
                const int col = a + j, row = rows[std::size_t(j + J)];
                if (col < 0 || col >= W || row >= S) continue;
                acc += w[std::size_t(j + J)] * bg(row, col);
                wsum += w[std::size_t(j + J)];
            }
            m(k, a) = wsum > 0 ? float(acc / wsum) : 0.0f;
        }
    }
    return m;
}

std::vector<Detection> detect_cscan_rule(const SliceImage& img, const CRuleParams& p)
{
    if (img.view != View::C) {
        throw std::invalid_argument("C-scan rule received a " + std::string(to_string(img.view)) + "-scan");
    }
    const int H = int(img.pixels.rows()), W = int(img.pixels.cols());
    std::vector<Detection> out;
    if (H == 0 || W == 0) return out;

    std::vector<float> flat(img.pixels.data(), img.pixels.data() + img.pixels.size());
    const float med = median_of(flat);
    const Eigen::ArrayXXf d = (img.pixels.array() - med).abs();
    const float dmax = d.maxCoeff();
    std::vector<float> dflat(d.data(), d.data() + d.size());
    const float thr = std::max(float(p.floor), std::min(quantile_of(dflat, p.quantile), float(p.refine_level) * dmax));

    std::vector<char> seen(std::size_t(H) * W, 0);
    std::vector<Component> comps;
    for (int c = 0; c < W; ++c) {
        for (int r = 0; r < H; ++r) {
            if (seen[std::size_t(c) * H + r] || d(r, c) < thr) continue;
            comps.push_back(flood(r, c, H, W, seen, [&](int y, int x) { return d(y, x) >= thr; }, d));
        }
    }

    UnionFind uf(int(comps.size()));
    for (std::size_t i = 0; i < comps.size(); ++i) {
        for (std::size_t j = i + 1; j < comps.size(); ++j) {
            if (box_gap(comps[i].box, comps[j].box) <= p.group_gap) uf.unite(int(i), int(j));
        }
    }
    std::vector<std::vector<int>> clusters(comps.size());
    for (std::size_t i = 0; i < comps.size(); ++i) clusters[std::size_t(uf.find(int(i)))].push_back(int(i));

    auto emit = [&](Box2 box, Label cls, double score) {
        out.push_back({View::C, img.index, img.window, box, cls, clamp01(score), "rule-c"});
    };

    for (const auto& members : clusters) {
        if (members.empty()) continue;
        int total = 0;
        const Component* largest = nullptr;
        Box2 hull_box = comps[std::size_t(members.front())].box;
        for (int i : members) {
            const Component& k = comps[std::size_t(i)];
            total += k.area;
            hull_box = hull(hull_box, k.box);
            if (!largest || k.area > largest->area) largest = &k;
        }
        if (total < p.min_area) continue;

        if (largest->area >= p.patch_area) {
            const float level = float(p.refine_level) * largest->peak;
            std::vector<char> seen2(std::size_t(H) * W, 0);
            const Component shape = flood(largest->peak_r, largest->peak_c, H, W, seen2,
                                          [&](int y, int x) { return d(y, x) >= level; }, d);
            const double fill = double(shape.area) / double(shape.box.area());
            if (fill >= p.manhole_fill) {
                emit(shape.box, Label::Manhole, 0.5 + 0.5 * (fill - p.manhole_fill) / (1.0 - p.manhole_fill));
            } else {
                emit(shape.box, Label::Void, 0.5 + 0.5 * (p.manhole_fill - fill) / p.manhole_fill);
            }
        } else if (int(members.size()) >= p.min_fragments) {
            const double margin = double(int(members.size()) - p.min_fragments + 1) / double(p.min_fragments);
            emit(hull_box, Label::Loose, 0.5 + 0.5 * clamp01(margin));
        }
    }

    if (out.empty()) emit({0, 0, H, W}, Label::Healthy, 1.0 - std::min(1.0, double(dmax) / p.anomaly_scale));
    return out;
}

std::vector<Detection> detect_bscan_rule(const SliceImage& img, const SliceGeometry& g, const HyperbolaRuleParams& p)
{
    return detect_hyperbolas(img, g, p, View::B, "rule-b");
}

std::vector<Detection> detect_dscan_rule(const SliceImage& img, const SliceGeometry& g, const HyperbolaRuleParams& p)
{
    return detect_hyperbolas(img, g, p, View::D, "rule-d");
}

std::string detection_to_line(const Detection& d) { return detection_json(d).dump(); }

Detection detection_from_line(std::string_view line)
{
    const auto j = nlohmann::json::parse(line);  // throws on malformed text
    static const std::set<std::string> keys{"view", "slice_index", "window", "bbox", "cls", "score", "source"};
    if (!j.is_object()) throw std::invalid_argument("record is not an object");
    for (const auto& [k, _] : j.items()) {
        if (!keys.count(k)) throw std::invalid_argument("unknown field '" + k + "'");
    }
    for (const auto& k : keys) {
        if (!j.contains(k)) throw std::invalid_argument("missing field '" + k + "'");
    }
    Detection d;
    d.view = view_from_string(j.at("view").get<std::string>());
    d.slice_index = j.at("slice_index").get<int>();
    const auto w = j.at("window").get<std::vector<int>>();
    const auto b = j.at("bbox").get<std::vector<int>>();
    if (w.size() != 2) throw std::invalid_argument("window must be [x0, x1]");
    if (b.size() != 4) throw std::invalid_argument("bbox must be [r0, c0, r1, c1]");
    d.window = {w[0], w[1]};
    d.bbox = {b[0], b[1], b[2], b[3]};
    d.cls = label_from_string(j.at("cls").get<std::string>());
    d.score = j.at("score").get<double>();
    d.source = j.at("source").get<std::string>();
    if (!(d.score >= 0.0 && d.score <= 1.0)) throw std::invalid_argument("score outside [0, 1]");
    if (d.slice_index < 0) throw std::invalid_argument("negative slice_index");
    if (d.window.x0 < 0 || d.window.x1 <= d.window.x0) throw std::invalid_argument("empty or negative window");
    if (d.bbox.empty() || d.bbox.r0 < 0 || d.bbox.c0 < 0) throw std::invalid_argument("empty or negative bbox");
    return d;
}

std::vector<Detection> import_detections(const std::filesystem::path& path)
{
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path.string() + ": " + std::strerror(errno));
    std::vector<Detection> out;
    std::string line;
    for (int n = 1; std::getline(is, line); ++n) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(detection_from_line(line));
        } catch (const std::exception& e) {
            std::ostringstream os;
            os << path.string() << ":" << n << ": " << e.what();
            throw FormatError(os.str());
        }
    }
    return out;
}

void export_detections(std::span<const Detection> dets, const std::filesystem::path& path)
{
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    for (const auto& d : dets) os << detection_to_line(d) << '\n';
    if (!os) throw std::runtime_error("short write to " + path.string());
}

}  // namespace gprxv
