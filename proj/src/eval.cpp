#include "gprxv/eval.hpp"

#include <cerrno>
#include <cstring>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace gprxv {

std::optional<double> precision(const PrCounts& c)
{
    if (c.tp + c.fp == 0) return std::nullopt;
    return double(c.tp) / double(c.tp + c.fp);
}

std::optional<double> recall(const PrCounts& c)
{
    if (c.tp + c.fn == 0) return std::nullopt;
    return double(c.tp) / double(c.tp + c.fn);
}

namespace {

const std::set<std::string, std::less<>> kGroups{"distress", "non_healthy"};

Label label_of(ObjectKind k)
{
    switch (k) {
        case ObjectKind::Void: return Label::Void;
        case ObjectKind::Loose: return Label::Loose;
        case ObjectKind::Manhole: return Label::Manhole;
    }
    return Label::Healthy;
}

bool is_distress(ObjectKind k) { return k != ObjectKind::Manhole; }

double candidate_score(const Candidate& c, const DetectionSet& set)
{
    double s = 0.0;
    for (int id : c.members) s = std::max(s, set.dets[std::size_t(id)].score);
    return s;
}

// Single-class match of boxes against the objects selected by `keep`.
template <typename Pred>
PrCounts match_group(const std::vector<ScoredBox<VoxelBox>>& preds, const GroundTruth& gt, Pred keep,
                     double thresh)
{
    std::vector<GtBox<VoxelBox>> gts;
    for (const auto& o : gt) {
        if (keep(o.kind)) gts.push_back({o.box, 0});
    }
    auto r = match<VoxelBox>(preds, gts, thresh);
    return r.per_class.count(0) ? r.per_class.at(0) : PrCounts{};
}

std::vector<ScoredBox<VoxelBox>> candidate_preds(std::span<const Candidate> cands, const DetectionSet& set)
{
    std::vector<ScoredBox<VoxelBox>> out;
    for (const auto& c : cands) out.push_back({c.box, 0, candidate_score(c, set)});
    return out;
}

Box2 project(const VoxelBox& b, View v)
{
    switch (v) {
        case View::B: return {b.k0, b.x0, b.k1, b.x1};
        case View::C: return {b.c0, b.x0, b.c1, b.x1};
        case View::D: return {b.k0, b.c0, b.k1, b.c1};
    }
    return {};
}

bool crosses(const VoxelBox& b, View v, int index)
{
    switch (v) {
        case View::B: return b.c0 <= index && index < b.c1;
        case View::C: return b.k0 <= index && index < b.k1;
        case View::D: return b.x0 <= index && index < b.x1;
    }
    return false;
}

std::string fmt_ratio(std::optional<double> v)
{
    if (!v) return "-";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", *v);
    return buf;
}

nlohmann::json ratio_json(std::optional<double> v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

nlohmann::json counts_json(const PrCounts& c)
{
    return {{"tp", c.tp},
            {"fp", c.fp},
            {"fn", c.fn},
            {"precision", ratio_json(precision(c))},
            {"recall", ratio_json(recall(c))}};
}

nlohmann::json box_json(const VoxelBox& b)
{
    return {{"c", {b.c0, b.c1}}, {"x", {b.x0, b.x1}}, {"k", {b.k0, b.k1}}};
}

nlohmann::json view_json(const ViewBox& v)
{
    return {{"slice", v.slice_index}, {"bbox", {v.bbox.r0, v.bbox.c0, v.bbox.r1, v.bbox.c1}}};
}

ViewBox view_from_json(const nlohmann::json& j)
{
    const auto b = j.at("bbox").get<std::vector<int>>();
    if (b.size() != 4) throw std::invalid_argument("bbox must be [r0, c0, r1, c1]");
    ViewBox v{j.at("slice").get<int>(), {b[0], b[1], b[2], b[3]}};
    if (v.bbox.empty()) throw std::invalid_argument("empty view box");
    return v;
}

}  // namespace

const PrCounts* MetricsReport::find(std::string_view cls) const
{
    for (const auto& r : rows) {
        if (r.cls == cls) return &r.counts;
    }
    return nullptr;
}

PrCounts& MetricsReport::at(std::string_view cls)
{
    for (auto& r : rows) {
        if (r.cls == cls) return r.counts;
    }
    rows.push_back({std::string(cls), {}});
    return rows.back().counts;
}

PrCounts MetricsReport::overall() const
{
    PrCounts sum;
    for (const auto& r : rows) {
        if (!kGroups.count(r.cls) && r.cls != "healthy") sum += r.counts;
    }
    return sum;
}

MetricsReport& MetricsReport::operator+=(const MetricsReport& o)
{
    for (const auto& r : o.rows) at(r.cls) += r.counts;
    return *this;
}

MetricsReport evaluate_findings(std::span<const Finding> findings, const GroundTruth& gt, double thresh3d)
{
    MetricsReport rep{"step3", {}};
    std::vector<ScoredBox<VoxelBox>> preds;
    std::vector<GtBox<VoxelBox>> gts;
    std::vector<ScoredBox<VoxelBox>> distress;
    for (const auto& f : findings) {
        if (f.cls != FindingClass::DistressUnspecified) {
            const Label l = f.cls == FindingClass::Void ? Label::Void
                            : f.cls == FindingClass::Loose ? Label::Loose
                                                           : Label::Manhole;
            preds.push_back({f.box, int(l), f.confidence});
        }
        if (is_distress(f.cls)) distress.push_back({f.box, 0, f.confidence});
    }
    for (const auto& o : gt) gts.push_back({o.box, int(label_of(o.kind))});
    const auto r = match<VoxelBox>(preds, gts, thresh3d);
    for (Label l : {Label::Void, Label::Loose, Label::Manhole}) {
        auto it = r.per_class.find(int(l));
        rep.at(to_string(l)) = it == r.per_class.end() ? PrCounts{} : it->second;
    }
    rep.at("distress") = match_group(distress, gt, [](ObjectKind k) { return is_distress(k); }, thresh3d);
    return rep;
}

std::vector<MetricsReport> staged_metrics(const FusionTrace& t, const GroundTruth& gt, double thresh3d)
{
    std::vector<MetricsReport> out;

    MetricsReport s1{"step1", {}};
    const bool pred_healthy = t.kept.empty();
    const bool gt_healthy = gt.empty();
    PrCounts& h = s1.at("healthy");
    if (pred_healthy && gt_healthy) ++h.tp;
    if (pred_healthy && !gt_healthy) ++h.fp;
    if (!pred_healthy && gt_healthy) ++h.fn;
    const auto kept = candidate_preds(t.kept, t.set);
    s1.at("non_healthy") = match_group(kept, gt, [](ObjectKind) { return true; }, thresh3d);
    s1.at("distress") = match_group(kept, gt, [](ObjectKind k) { return is_distress(k); }, thresh3d);
    out.push_back(std::move(s1));

    MetricsReport s2{"step2", {}};
    std::vector<ScoredBox<VoxelBox>> manholes;
    for (const auto& f : t.manholes) manholes.push_back({f.box, 0, f.confidence});
    s2.at("manhole") = match_group(manholes, gt, [](ObjectKind k) { return k == ObjectKind::Manhole; }, thresh3d);
    s2.at("distress") = match_group(candidate_preds(t.distress, t.set), gt,
                                    [](ObjectKind k) { return is_distress(k); }, thresh3d);
    out.push_back(std::move(s2));

    out.push_back(evaluate_findings(t.findings, gt, thresh3d));
    return out;
}

MetricsReport evaluate_view_detections(std::span<const Detection> dets, const GroundTruth& gt, View view,
                                       double thresh)
{
    MetricsReport rep{std::string("model_") + std::string(to_string(view)), {}};
    for (Label l : {Label::Void, Label::Loose, Label::Manhole}) rep.at(to_string(l));

    std::set<int> slices;
    for (const auto& o : gt) slices.insert(o.in_view(view).slice_index);
    for (int s : slices) {
        std::vector<Detection> on_slice;
        for (const auto& d : dets) {
            if (d.view != view || d.slice_index != s || d.cls == Label::Healthy) continue;
            Detection a = d;
            if (view != View::D) a.bbox.c0 += d.window.x0, a.bbox.c1 += d.window.x0;
            a.window = {};
            on_slice.push_back(a);
        }
        // Overlapping windows report the same object more than once.
        on_slice = nms(std::move(on_slice), 0.5);
        std::vector<ScoredBox<Box2>> preds;
        for (const auto& d : on_slice) preds.push_back({d.bbox, int(d.cls), d.score});
        std::vector<GtBox<Box2>> gts;
        for (const auto& o : gt) {
            if (crosses(o.box, view, s)) gts.push_back({project(o.box, view), int(label_of(o.kind))});
        }
        const auto r = match<Box2>(preds, gts, thresh);
        for (const auto& [cls, c] : r.per_class) rep.at(to_string(Label(cls))) += c;
    }
    return rep;
}

void accumulate(std::vector<MetricsReport>& total, const std::vector<MetricsReport>& part)
{
    for (const auto& p : part) {
        auto it = std::find_if(total.begin(), total.end(), [&](const MetricsReport& r) { return r.stage == p.stage; });
        if (it == total.end()) {
            total.push_back(p);
        } else {
            *it += p;
        }
    }
}

std::string report_table(std::span<const MetricsReport> reports)
{
    std::ostringstream os;
    char line[128];
    std::snprintf(line, sizeof line, "%-9s %-12s %6s %6s %6s %10s %8s\n", "stage", "class", "TP", "FP", "FN",
                  "precision", "recall");
    os << line;
    for (const auto& rep : reports) {
        for (const auto& r : rep.rows) {
            std::snprintf(line, sizeof line, "%-9s %-12s %6d %6d %6d %10s %8s\n", rep.stage.c_str(), r.cls.c_str(),
                          r.counts.tp, r.counts.fp, r.counts.fn, fmt_ratio(precision(r.counts)).c_str(),
                          fmt_ratio(recall(r.counts)).c_str());
            os << line;
        }
    }
    return os.str();
}

std::string report_json(std::span<const MetricsReport> reports)
{
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& rep : reports) {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& r : rep.rows) {
            auto j = counts_json(r.counts);
            j["cls"] = r.cls;
            rows.push_back(std::move(j));
        }
        arr.push_back({{"stage", rep.stage}, {"rows", std::move(rows)}, {"overall", counts_json(rep.overall())}});
    }
    return nlohmann::json{{"reports", std::move(arr)}}.dump();
}

std::string truth_to_text(const GroundTruth& gt)
{
    std::string out;
    for (const auto& o : gt) {
        nlohmann::json j = {{"kind", std::string(to_string(o.kind))},
                            {"voxel_box", box_json(o.box)},
                            {"b", view_json(o.b)},
                            {"c", view_json(o.c)},
                            {"d", view_json(o.d)}};
        out += j.dump();
        out += '\n';
    }
    return out;
}

GroundTruth truth_from_text(std::string_view text, const std::string& origin)
{
    GroundTruth gt;
    std::istringstream is{std::string(text)};
    std::string line;
    for (int n = 1; std::getline(is, line); ++n) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            if (!j.is_object() || j.size() != 5) throw std::invalid_argument("expected kind, voxel_box, b, c, d");
            AnnotatedObject o;
            o.kind = object_kind_from_string(j.at("kind").get<std::string>());
            const auto& vb = j.at("voxel_box");
            const auto c = vb.at("c").get<std::vector<int>>();
            const auto x = vb.at("x").get<std::vector<int>>();
            const auto k = vb.at("k").get<std::vector<int>>();
            if (c.size() != 2 || x.size() != 2 || k.size() != 2) throw std::invalid_argument("bad voxel_box");
            o.box = {c[0], c[1], x[0], x[1], k[0], k[1]};
            if (o.box.empty()) throw std::invalid_argument("empty voxel_box");
            o.b = view_from_json(j.at("b"));
            o.c = view_from_json(j.at("c"));
            o.d = view_from_json(j.at("d"));
            gt.push_back(o);
        } catch (const std::exception& e) {
            std::ostringstream os;
            os << origin << ":" << n << ": " << e.what();
            throw FormatError(os.str());
        }
    }
    return gt;
}

void save_truth(const std::filesystem::path& path, const GroundTruth& gt)
{
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << truth_to_text(gt);
    if (!os) throw std::runtime_error("short write to " + path.string());
}

GroundTruth load_truth(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string() + ": " + std::strerror(errno));
    std::ostringstream ss;
    ss << is.rdbuf();
    return truth_from_text(ss.str(), path.string());
}

}  // namespace gprxv
