#include "gprxv/fuse.hpp"

#include <cerrno>
#include <cstring>
#include <algorithm>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace gprxv {

namespace {

void check_view(const DetectionSet& set, std::span<const int> ids, View v, const char* step)
{
    for (int id : ids) {
        if (id < 0 || std::size_t(id) >= set.size()) throw std::out_of_range(std::string(step) + ": bad detection id");
        if (set.dets[std::size_t(id)].view != v) {
            throw std::invalid_argument(std::string(step) + ": expected only " + std::string(to_string(v)) +
                                        "-view detections");
        }
    }
}

// Highest-scoring detection among `ids` with a class in `labels` whose voxel
// box intersects `box`. Ties go to the lower id.
std::optional<int> best_overlapping(const DetectionSet& set, std::span<const int> ids, const VoxelBox& box,
                                    std::initializer_list<Label> labels)
{
    std::optional<int> best;
    for (int id : ids) {
        const Detection& d = set.dets[std::size_t(id)];
        if (std::find(labels.begin(), labels.end(), d.cls) == labels.end()) continue;
        if (!overlaps(set.boxes[std::size_t(id)], box)) continue;
        if (!best || d.score > set.dets[std::size_t(*best)].score) best = id;
    }
    return best;
}

std::vector<int> ids_of_view(const DetectionSet& set, View v)
{
    std::vector<int> out;
    for (std::size_t i = 0; i < set.size(); ++i) {
        if (set.dets[i].view == v) out.push_back(int(i));
    }
    return out;
}

nlohmann::json box_json(const VoxelBox& b)
{
    return {{"c", {b.c0, b.c1}}, {"x", {b.x0, b.x1}}, {"k", {b.k0, b.k1}}};
}

VoxelBox box_from_json(const nlohmann::json& j)
{
    const auto c = j.at("c").get<std::vector<int>>();
    const auto x = j.at("x").get<std::vector<int>>();
    const auto k = j.at("k").get<std::vector<int>>();
    if (c.size() != 2 || x.size() != 2 || k.size() != 2 || j.size() != 3) {
        throw std::invalid_argument("voxel_box must be {c:[c0,c1], x:[x0,x1], k:[k0,k1]}");
    }
    VoxelBox b{c[0], c[1], x[0], x[1], k[0], k[1]};
    if (b.empty() || b.c0 < 0 || b.x0 < 0 || b.k0 < 0) throw std::invalid_argument("empty or negative voxel_box");
    return b;
}

}  // namespace

std::string_view to_string(FindingClass c)
{
    switch (c) {
        case FindingClass::Manhole: return "manhole";
        case FindingClass::Void: return "void";
        case FindingClass::Loose: return "loose";
        case FindingClass::DistressUnspecified: return "distress_unspecified";
    }
    return "?";
}

std::string_view to_string(Stage s) { return s == Stage::Step2 ? "step2" : "step3"; }

std::string_view to_string(ReviewState r)
{
    switch (r) {
        case ReviewState::Pending: return "pending";
        case ReviewState::Confirmed: return "confirmed";
        case ReviewState::Reclassified: return "reclassified";
        case ReviewState::Rejected: return "rejected";
    }
    return "?";
}

FindingClass finding_class_from_string(std::string_view s)
{
    for (auto c : {FindingClass::Manhole, FindingClass::Void, FindingClass::Loose, FindingClass::DistressUnspecified}) {
        if (to_string(c) == s) return c;
    }
    throw std::invalid_argument("unknown finding class '" + std::string(s) + "'");
}

Stage stage_from_string(std::string_view s)
{
    if (s == "step2") return Stage::Step2;
    if (s == "step3") return Stage::Step3;
    throw std::invalid_argument("unknown stage '" + std::string(s) + "'");
}

ReviewState review_state_from_string(std::string_view s)
{
    for (auto r : {ReviewState::Pending, ReviewState::Confirmed, ReviewState::Reclassified, ReviewState::Rejected}) {
        if (to_string(r) == s) return r;
    }
    throw std::invalid_argument("unknown review state '" + std::string(s) + "'");
}

void Thresholds::validate() const
{
    auto unit = [](double v) { return v > 0.0 && v < 1.0; };
    if (!unit(healthy_veto) || !unit(manhole) || !unit(assoc)) {
        throw std::invalid_argument("fusion thresholds must lie in (0, 1)");
    }
    if (thickness.b_channels < 1 || thickness.c_samples < 1 || thickness.d_traces < 1) {
        throw std::invalid_argument("extrusion thickness must be >= 1");
    }
}

DetectionSet::DetectionSet(std::vector<Detection> detections, const Thickness& thickness, std::optional<Dims> d)
    : dets(std::move(detections)), dims(d)
{
    canonical_sort(dets);
    boxes.reserve(dets.size());
    for (const auto& det : dets) {
        boxes.push_back(box_from_view(det.view, det.slice_index, det.bbox, det.window, thickness,
                                      dims ? &*dims : nullptr));
    }
}

std::vector<Candidate> associate(const DetectionSet& set, double tau_assoc)
{
    std::vector<int> ids;
    for (std::size_t i = 0; i < set.size(); ++i) {
        if (set.dets[i].cls != Label::Healthy) ids.push_back(int(i));
    }
    std::vector<int> parent(ids.size());
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](int i) {
        while (parent[std::size_t(i)] != i) i = parent[std::size_t(i)] = parent[std::size_t(parent[std::size_t(i)])];
        return i;
    };
    for (std::size_t a = 0; a < ids.size(); ++a) {
        const VoxelBox& ba = set.boxes[std::size_t(ids[a])];
        for (std::size_t b = a + 1; b < ids.size(); ++b) {
            const VoxelBox& bb = set.boxes[std::size_t(ids[b])];
            if (!overlaps(ba, bb) || overlap3d(ba, bb) <= tau_assoc) continue;
            const int ra = find(int(a)), rb = find(int(b));
            if (ra != rb) parent[std::size_t(std::max(ra, rb))] = std::min(ra, rb);
        }
    }

    // Roots are the smallest index of each cluster, so iterating in index
    // order numbers candidates by their first member.
    std::vector<int> slot(ids.size(), -1);
    std::vector<Candidate> out;
    for (std::size_t a = 0; a < ids.size(); ++a) {
        const int root = find(int(a));
        if (slot[std::size_t(root)] < 0) {
            slot[std::size_t(root)] = int(out.size());
            Candidate c;
            c.id = int(out.size());
            c.box = set.boxes[std::size_t(ids[a])];
            out.push_back(std::move(c));
        }
        Candidate& c = out[std::size_t(slot[std::size_t(root)])];
        const int id = ids[a];
        const Detection& d = set.dets[std::size_t(id)];
        c.box = hull(c.box, set.boxes[std::size_t(id)]);
        c.members.push_back(id);
        c.by_view[std::size_t(d.view)].push_back(id);
        double& best = c.best[std::size_t(d.view)][std::size_t(d.cls)];
        best = std::max(best, d.score);
    }
    return out;
}

SiftResult step1_sift_healthy(std::vector<Candidate> cands, const DetectionSet& set, std::span<const int> c_ids,
                              double tau_h)
{
    check_view(set, c_ids, View::C, "step1");
    SiftResult r;
    for (auto& cand : cands) {
        bool healthy_cover = false;
        bool contrary = false;
        for (int id : c_ids) {
            const Detection& d = set.dets[std::size_t(id)];
            const VoxelBox& b = set.boxes[std::size_t(id)];
            if (d.cls == Label::Healthy) {
                const bool covers = b.c0 <= cand.box.c0 && cand.box.c1 <= b.c1 && b.x0 <= cand.box.x0 &&
                                    cand.box.x1 <= b.x1 && b.k0 < cand.box.k1 && cand.box.k0 < b.k1;
                healthy_cover = healthy_cover || (covers && d.score >= tau_h);
            } else if (overlaps(b, cand.box)) {
                contrary = true;
                break;
            }
        }
        (healthy_cover && !contrary ? r.sifted : r.kept).push_back(std::move(cand));
    }
    return r;
}

ManholeResult step2_filter_manholes(std::vector<Candidate> cands, const DetectionSet& set,
                                    std::span<const int> b_ids, double tau_m)
{
    check_view(set, b_ids, View::B, "step2");
    ManholeResult r;
    for (auto& cand : cands) {
        const auto best = best_overlapping(set, b_ids, cand.box, {Label::Manhole});
        if (best && set.dets[std::size_t(*best)].score >= tau_m) {
            Finding f;
            f.cls = FindingClass::Manhole;
            f.confidence = set.dets[std::size_t(*best)].score;
            f.box = cand.box;
            f.stage = Stage::Step2;
            f.members = cand.members;
            r.manholes.push_back(std::move(f));
        } else {
            r.distress.push_back(std::move(cand));
        }
    }
    return r;
}

std::vector<Finding> step3_classify(std::vector<Candidate> cands, const DetectionSet& set,
                                    std::span<const int> d_ids, std::span<const int> c_ids)
{
    check_view(set, d_ids, View::D, "step3");
    check_view(set, c_ids, View::C, "step3");
    std::vector<Finding> out;
    for (auto& cand : cands) {
        Finding f;
        f.box = cand.box;
        f.stage = Stage::Step3;
        f.members = cand.members;
        auto pick = best_overlapping(set, d_ids, cand.box, {Label::Void, Label::Loose});
        if (!pick) pick = best_overlapping(set, c_ids, cand.box, {Label::Void, Label::Loose});
        if (pick) {
            const Detection& d = set.dets[std::size_t(*pick)];
            f.cls = d.cls == Label::Void ? FindingClass::Void : FindingClass::Loose;
            f.confidence = d.score;
        } else {
            f.cls = FindingClass::DistressUnspecified;
            for (int id : cand.members) f.confidence = std::max(f.confidence, set.dets[std::size_t(id)].score);
        }
        out.push_back(std::move(f));
    }
    return out;
}

FusionTrace cross_verify_trace(std::vector<Detection> dets, const Thresholds& th, std::optional<Dims> dims)
{
    th.validate();
    FusionTrace t;
    t.set = DetectionSet(std::move(dets), th.thickness, dims);
    const auto c_ids = ids_of_view(t.set, View::C);
    const auto b_ids = ids_of_view(t.set, View::B);
    const auto d_ids = ids_of_view(t.set, View::D);

    t.candidates = associate(t.set, th.assoc);
    auto s1 = step1_sift_healthy(t.candidates, t.set, c_ids, th.healthy_veto);
    t.kept = s1.kept;
    t.sifted = std::move(s1.sifted);
    auto s2 = step2_filter_manholes(std::move(s1.kept), t.set, b_ids, th.manhole);
    t.manholes = s2.manholes;
    t.distress = s2.distress;
    auto s3 = step3_classify(std::move(s2.distress), t.set, d_ids, c_ids);

    t.findings = std::move(s2.manholes);
    t.findings.insert(t.findings.end(), std::make_move_iterator(s3.begin()), std::make_move_iterator(s3.end()));
    std::stable_sort(t.findings.begin(), t.findings.end(), [](const Finding& a, const Finding& b) {
        const auto ka = std::tie(a.box.x0, a.box.c0, a.box.k0, a.box.x1, a.box.c1, a.box.k1);
        const auto kb = std::tie(b.box.x0, b.box.c0, b.box.k0, b.box.x1, b.box.c1, b.box.k1);
        if (ka != kb) return ka < kb;
        if (a.cls != b.cls) return a.cls < b.cls;
        return a.members < b.members;
    });
    for (std::size_t i = 0; i < t.findings.size(); ++i) {
        std::ostringstream os;
        os << 'f' << std::setw(4) << std::setfill('0') << i;
        t.findings[i].id = os.str();
    }
    return t;
}

std::vector<Finding> cross_verify(std::vector<Detection> dets, const Thresholds& th, std::optional<Dims> dims)
{
    return cross_verify_trace(std::move(dets), th, dims).findings;
}

std::string finding_to_line(const Finding& f)
{
    nlohmann::json j = {{"id", f.id},
                        {"cls", std::string(to_string(f.cls))},
                        {"confidence", f.confidence},
                        {"voxel_box", box_json(f.box)},
                        {"stage_provenance", std::string(to_string(f.stage))},
                        {"member_ids", f.members},
                        {"review", std::string(to_string(f.review))}};
    if (f.corrected) j["corrected_cls"] = std::string(to_string(*f.corrected));
    return j.dump();
}

Finding finding_from_line(std::string_view line)
{
    const auto j = nlohmann::json::parse(line);
    static const std::set<std::string> required{"id",          "cls",        "confidence", "voxel_box",
                                                "stage_provenance", "member_ids", "review"};
    if (!j.is_object()) throw std::invalid_argument("record is not an object");
    for (const auto& [k, _] : j.items()) {
        if (!required.count(k) && k != "corrected_cls") throw std::invalid_argument("unknown field '" + k + "'");
    }
    for (const auto& k : required) {
        if (!j.contains(k)) throw std::invalid_argument("missing field '" + k + "'");
    }
    Finding f;
    f.id = j.at("id").get<std::string>();
    f.cls = finding_class_from_string(j.at("cls").get<std::string>());
    f.confidence = j.at("confidence").get<double>();
    f.box = box_from_json(j.at("voxel_box"));
    f.stage = stage_from_string(j.at("stage_provenance").get<std::string>());
    f.members = j.at("member_ids").get<std::vector<int>>();
    f.review = review_state_from_string(j.at("review").get<std::string>());
    if (j.contains("corrected_cls")) f.corrected = finding_class_from_string(j.at("corrected_cls").get<std::string>());
    if (!(f.confidence >= 0.0 && f.confidence <= 1.0)) throw std::invalid_argument("confidence outside [0, 1]");
    if ((f.cls == FindingClass::Manhole) != (f.stage == Stage::Step2)) {
        throw std::invalid_argument("manhole findings come from step2, all others from step3");
    }
    return f;
}

std::string findings_to_text(std::span<const Finding> findings)
{
    std::string out;
    for (const auto& f : findings) {
        out += finding_to_line(f);
        out += '\n';
    }
    return out;
}

std::vector<Finding> import_findings(const std::filesystem::path& path)
{
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path.string() + ": " + std::strerror(errno));
    std::vector<Finding> out;
    std::string line;
    for (int n = 1; std::getline(is, line); ++n) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(finding_from_line(line));
        } catch (const std::exception& e) {
            std::ostringstream os;
            os << path.string() << ":" << n << ": " << e.what();
            throw FormatError(os.str());
        }
    }
    return out;
}

void export_findings(std::span<const Finding> findings, const std::filesystem::path& path)
{
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << findings_to_text(findings);
    if (!os) throw std::runtime_error("short write to " + path.string());
}

}  // namespace gprxv
