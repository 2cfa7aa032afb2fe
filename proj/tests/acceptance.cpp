// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails.

#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gprxv/augment.hpp"
#include "gprxv/cli.hpp"
#include "gprxv/eval.hpp"
#include "gprxv/gateway/service.hpp"
#include "gprxv/pipeline.hpp"
#include "gprxv/synth.hpp"
#include "oracles.hpp"
#include "properties.hpp"
#include "store_faults.hpp"

// After the Eigen users: the resolver header it pulls in defines _res.
#include <httplib.h>

using namespace gprxv;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0)
{
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Collects failure reasons for one criterion; empty means pass.
struct Outcome {
    std::vector<std::string> failures;
    std::string detail;

    void expect(bool ok, const std::string& what)
    {
        if (!ok && failures.size() < 5) failures.push_back(what);
    }
};

std::string slurp(const fs::path& p)
{
    std::ifstream is(p, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

std::string fmt(const char* f, double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

fs::path scratch(const std::string& name)
{
    const fs::path p = fs::temp_directory_path() / ("gprxv_acceptance_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

Outcome slice_consistency()
{
    Outcome o;
    const auto t0 = Clock::now();
    std::mt19937_64 rng(11);
    std::normal_distribution<float> amp(0.f, 1.f);
    for (int vol = 0; vol < 20; ++vol) {
        const Dims d{std::uniform_int_distribution<int>(2, 32)(rng), std::uniform_int_distribution<int>(2, 300)(rng),
                     std::uniform_int_distribution<int>(2, 512)(rng)};
        std::vector<float> a(std::size_t(d.size()));
        for (auto& v : a) v = amp(rng);
        const Volume v(d, AcquisitionMeta{}, std::move(a));
        for (int i = 0; i < 100; ++i) {
            const int c = std::uniform_int_distribution<int>(0, d.n_channels - 1)(rng);
            const int x = std::uniform_int_distribution<int>(0, d.n_traces - 1)(rng);
            const int k = std::uniform_int_distribution<int>(0, d.n_samples - 1)(rng);
            const float want = v(c, x, k);
            const bool ok = b_scan(v, c).pixels(k, x) == want && c_scan(v, k).pixels(c, x) == want &&
                            d_scan(v, x).pixels(k, c) == want && a_scan(v, c, x)(k) == want;
            o.expect(ok, "voxel mismatch in volume " + std::to_string(vol));
        }
    }
    const double s = seconds_since(t0);
    o.expect(s < 5.0, "runtime " + fmt("%.2f s", s));
    o.detail = "20 volumes x 100 voxels, " + fmt("%.2f s", s);
    return o;
}

Outcome coordinates()
{
    Outcome o;
    const AcquisitionMeta m;  // 512 samples over 180 ns to 5 m
    const double deepest = depth_of_sample(m, 511, 512);
    o.expect(std::abs(deepest - 5.0) <= 1e-9, "depth_of_sample(511) = " + fmt("%.12f", deepest));
    int round_trips = 0;
    for (int k = 0; k < 512; ++k) round_trips += sample_of_depth(m, depth_of_sample(m, k, 512), 512) == k;
    o.expect(round_trips == 512, std::to_string(512 - round_trips) + " indices fail the round trip");
    o.detail = "depth(511) = " + fmt("%.12f m", deepest) + ", " + std::to_string(round_trips) + "/512 round trips";
    return o;
}

Outcome metric_oracles()
{
    Outcome o;
    const auto t0 = Clock::now();
    std::mt19937_64 rng(21);

    for (int i = 0; i < 1000; ++i) {
        const Box2 p = oracle::random_box(rng, 40, 40), q = oracle::random_box(rng, 40, 40);
        const double v = iou(p, q);
        o.expect(v == oracle::area_iou(p, q), "iou differs from the area oracle");
        o.expect(v == iou(q, p), "iou is not symmetric");
        o.expect(v >= 0.0 && v <= 1.0, "iou out of [0, 1]");
        o.expect(iou(p, p) == 1.0, "iou(a, a) != 1");
        o.expect((v == 0.0) == (intersect(p, q).area() == 0), "iou zero iff disjoint");
    }

    int short_of_max = 0;
    for (int trial = 0; trial < 200; ++trial) {
        std::uniform_int_distribution<int> n(0, 8), cls(0, 1);
        std::vector<ScoredBox<Box2>> preds;
        std::vector<GtBox<Box2>> gts;
        const int np = n(rng), ng = n(rng);
        for (int i = 0; i < ng; ++i) gts.push_back({oracle::random_box(rng, 12, 12, 2), cls(rng)});
        for (int i = 0; i < np; ++i) preds.push_back({oracle::random_box(rng, 12, 12, 2), cls(rng), (i + 1) / 16.0});
        std::shuffle(preds.begin(), preds.end(), rng);
        const auto r = match<Box2>(preds, gts, 0.5);
        const auto [ref, max_tp] = oracle::exhaustive_match<Box2>(preds, gts, 0.5);
        std::vector<int> got(preds.size(), -1);
        for (const auto& pr : r.pairs) got[std::size_t(pr.pred)] = pr.gt;
        o.expect(got == ref.gt_of_pred, "assignment differs from the oracle on instance " + std::to_string(trial));
        PrCounts total;
        for (const auto& [c, counts] : r.per_class) total += counts;
        o.expect(total.tp == ref.tp && total.tp + total.fp == np && total.tp + total.fn == ng,
                 "counts differ from the oracle on instance " + std::to_string(trial));
        short_of_max += total.tp < max_tp;
    }

    for (int trial = 0; trial < 200; ++trial) {
        const int n = std::uniform_int_distribution<int>(0, 64)(rng);
        std::vector<Detection> dets;
        for (int i = 0; i < n; ++i) {
            Detection d;
            d.view = View::B;
            d.slice_index = 0;
            d.window = {0, 64};
            d.bbox = oracle::random_box(rng, 48, 64);
            d.cls = Label(std::uniform_int_distribution<int>(1, 3)(rng));
            d.score = std::uniform_int_distribution<int>(1, 20)(rng) / 20.0;
            d.source = "oracle";
            dets.push_back(d);
        }
        const auto got = nms(dets, 0.45);
        o.expect(got == oracle::nms_reference(dets, 0.45), "nms differs from the reference");
        o.expect(nms(got, 0.45) == got, "nms is not idempotent");
    }

    const double s = seconds_since(t0);
    o.expect(s < 30.0, "runtime " + fmt("%.2f s", s));
    o.detail = "1000 iou pairs, 200 match and 200 nms instances, " + fmt("%.2f s", s) +
               "; greedy below max TP on " + std::to_string(short_of_max) + "/200";
    return o;
}

Outcome augmentation()
{
    Outcome o;
    std::mt19937_64 rng(31);
    const int H = 96, W = 128;
    int checked = 0, worst = 0;
    while (checked < 50) {
        const Box2 b = oracle::random_box(rng, H, W, 4);
        for (double deg : {-15.0, 15.0}) {
            const auto ref = oracle::rotated_mask_bbox(b, deg, H, W);
            if (!ref) continue;
            const Box2 got = rotate_box(b, deg, H, W);
            const int err = std::max({std::abs(got.r0 - ref->r0), std::abs(got.c0 - ref->c0),
                                      std::abs(got.r1 - ref->r1), std::abs(got.c1 - ref->c1)});
            worst = std::max(worst, err);
            o.expect(err <= 1, "rotated box off by " + std::to_string(err) + " px");
        }
        ++checked;
    }

    Matrix<float> img(H, W);
    for (Eigen::Index i = 0; i < img.size(); ++i) img.data()[i] = std::normal_distribution<float>()(rng);
    std::vector<Box2> boxes;
    for (int i = 0; i < 20; ++i) boxes.push_back(oracle::random_box(rng, H, W));
    for (const Transform& t : {Transform::flip_h(), Transform::flip_v()}) {
        const auto [once, once_boxes] = augment<float>(img, boxes, t);
        const auto [twice, twice_boxes] = augment<float>(once, once_boxes, t);
        o.expect(twice == img && twice_boxes == boxes, "flip is not an involution");
        o.expect(once != img, "flip left the image unchanged");
    }
    o.detail = std::to_string(checked) + " boxes at +/-15 deg, worst edge error " + std::to_string(worst) + " px";
    return o;
}

// Shared by the end-to-end and gateway checks.
const std::vector<Scene>& benchmark()
{
    static const std::vector<Scene> scenes = make_benchmark(1, {10, 10, 10, 10});
    return scenes;
}

Outcome synthetic_end_to_end()
{
    Outcome o;
    const auto t0 = Clock::now();
    const PipelineConfig cfg;
    const auto& scenes = benchmark();

    PrCounts distress;
    std::vector<MetricsReport> staged;
    int healthy_volumes = 0, healthy_clean = 0, leaked_manholes = 0;
    for (const auto& sc : scenes) {
        const auto run = run_pipeline(sc.volume, cfg);
        const auto& trace = run.trace;
        distress += *evaluate_findings(trace.findings, sc.truth).find("distress");
        accumulate(staged, staged_metrics(trace, sc.truth));

        if (sc.truth.empty()) {
            ++healthy_volumes;
            healthy_clean += trace.findings.empty();
        }
        // A distress finding must not hold a B manhole call at or above tau_m,
        // nor sit on a ground-truth manhole that such a call covers.
        for (const auto& f : trace.findings) {
            if (!is_distress(f.cls)) continue;
            for (int m : f.members) {
                const auto& d = trace.set.dets[std::size_t(m)];
                leaked_manholes += d.view == View::B && d.cls == Label::Manhole && d.score >= cfg.thresholds.manhole;
            }
            for (const auto& obj : sc.truth) {
                if (obj.kind != ObjectKind::Manhole || iou(f.box, obj.box) < 0.3) continue;
                for (std::size_t i = 0; i < trace.set.size(); ++i) {
                    const auto& d = trace.set.dets[i];
                    if (d.view == View::B && d.cls == Label::Manhole && d.score >= cfg.thresholds.manhole &&
                        !intersect(trace.set.boxes[i], obj.box).empty()) {
                        ++leaked_manholes;
                        break;
                    }
                }
            }
        }
    }

    const auto r = recall(distress);
    o.expect(r && *r >= 0.90, "distress recall " + (r ? fmt("%.3f", *r) : std::string("undefined")));
    o.expect(leaked_manholes == 0, std::to_string(leaked_manholes) + " manholes in the distress list");
    o.expect(healthy_volumes == 10, "benchmark holds " + std::to_string(healthy_volumes) + " healthy volumes");
    o.expect(healthy_clean >= 8, std::to_string(healthy_clean) + "/10 healthy volumes without findings");

    std::vector<double> precisions;
    for (const char* stage : {"step1", "step2", "step3"}) {
        const auto it = std::find_if(staged.begin(), staged.end(), [&](const auto& rep) { return rep.stage == stage; });
        const PrCounts* row = it == staged.end() ? nullptr : it->find("distress");
        const auto p = row ? precision(*row) : std::nullopt;
        o.expect(p.has_value(), std::string(stage) + " distress precision undefined");
        precisions.push_back(p.value_or(0.0));
    }
    o.expect(precisions[0] <= precisions[1] && precisions[1] <= precisions[2], "staged distress precision decreases");

    const double s = seconds_since(t0);
    o.expect(s < 180.0, "runtime " + fmt("%.1f s", s));
    o.detail = "recall " + (r ? fmt("%.3f", *r) : std::string("-")) + ", healthy clean " +
               std::to_string(healthy_clean) + "/10, precision step1/2/3 " + fmt("%.3f", precisions[0]) + "/" +
               fmt("%.3f", precisions[1]) + "/" + fmt("%.3f", precisions[2]) + ", " + fmt("%.1f s", s);
    return o;
}

Outcome fusion_properties()
{
    Outcome o;
    std::mt19937_64 rng(41);
    const Dims dims{32, 96, 512};
    Thresholds th;
    th.thickness = {4, 2, 4};
    for (int trial = 0; trial < 100; ++trial) {
        const auto dets = oracle::random_detection_set(rng, dims, 30);
        for (const auto& msg : {props::permutation_invariance(dets, th, rng), props::partition(dets, th),
                                props::threshold_monotonicity(dets, th)}) {
            o.expect(msg.empty(), "set " + std::to_string(trial) + ": " + msg);
        }
    }

    const fs::path dir = scratch("determinism");
    const Volume& v = benchmark().at(12).volume;
    export_findings(run_pipeline(v, PipelineConfig{}).trace.findings, dir / "a.jsonl");
    export_findings(run_pipeline(v, PipelineConfig{}).trace.findings, dir / "b.jsonl");
    const std::string a = slurp(dir / "a.jsonl");
    o.expect(!a.empty(), "determinism volume produced no findings");
    o.expect(a == slurp(dir / "b.jsonl"), "two pipeline runs differ");
    fs::remove_all(dir);
    o.detail = "100 random sets; two runs byte-identical (" + std::to_string(a.size()) + " bytes)";
    return o;
}

Outcome gateway()
{
    Outcome o;
    const fs::path dir = scratch("gateway");
    const Scene& sc = benchmark().at(30);  // first manhole volume
    save_volume(dir / "vol.gpr", sc.volume);

    std::ostringstream out, err;
    const std::string vol = (dir / "vol.gpr").string();
    const int rc1 = run_cli({"gprxv", "detect", "--volume", vol, "--out", (dir / "dets.jsonl").string()}, out, err);
    const int rc2 = run_cli({"gprxv", "fuse", "--detections", (dir / "dets.jsonl").string(), "--volume", vol, "--out",
                             (dir / "cli.jsonl").string()},
                            out, err);
    o.expect(rc1 == 0 && rc2 == 0, "CLI failed: " + err.str());
    const std::string cli_bytes = slurp(dir / "cli.jsonl");
    const auto cli_findings = import_findings(dir / "cli.jsonl");

    std::string service_bytes;
    json report;
    {
        Service svc({dir / "data", 1});
        const int port = svc.start("127.0.0.1", 0);
        httplib::Client http("127.0.0.1", port);
        http.set_read_timeout(120, 0);
        auto up = http.Post("/api/v1/volumes", encode_volume(sc.volume), "application/octet-stream");
        o.expect(up && up->status == 201, "volume upload failed");
        if (up && up->status == 201) {
            const std::string vid = json::parse(up->body).at("id");
            auto jr = http.Post("/api/v1/jobs", json{{"volume", vid}}.dump(), "application/json");
            o.expect(jr && jr->status == 202, "job submission failed");
            if (jr && jr->status == 202) {
                const std::string job = json::parse(jr->body).at("id");
                svc.wait_idle();
                auto st = http.Get("/api/v1/jobs/" + job);
                o.expect(st && json::parse(st->body).at("state") == "done", "job did not finish");
                service_bytes = slurp(svc.store().findings_path(job));
                auto rep = http.Get("/api/v1/report?volume=" + vid);
                if (rep && rep->status == 200) report = json::parse(rep->body);
            }
        }
        svc.stop();
    }
    o.expect(!cli_bytes.empty(), "manhole volume produced no findings");
    o.expect(cli_bytes == service_bytes, "CLI and service findings differ");
    if (!report.is_null()) {
        o.expect(report.at("findings_total") == cli_findings.size(), "report total differs from the CLI");
        std::map<std::string, int> by_class;
        for (const auto& f : cli_findings) ++by_class[std::string(to_string(f.cls))];
        for (const auto& [cls, n] : by_class) {
            o.expect(report.at("by_class").value(cls, 0) == n, "report count for " + cls + " differs from the CLI");
        }
    } else {
        o.expect(false, "report unavailable");
    }

    // A review whose verdict file write dies before its rename leaves the
    // earlier review intact and no temp files after reopening.
    std::string fid;
    {
        Store s(dir / "data");
        const auto views = collect_findings(s);
        o.expect(!views.empty(), "no findings to review");
        if (!views.empty()) {
            fid = views.front().api_id;
            s.add_verdict({fid, Verdict::Confirm, std::nullopt, "inspector", 1});
        }
    }
    if (!fid.empty()) {
        const std::string before = slurp(dir / "data" / "verdicts.jsonl");
        const int st = faults::crash_before_rename(dir / "data", "verdicts", [&](Store& s) {
            s.add_verdict({fid, Verdict::Reject, std::nullopt, "inspector", 2});
        });
        o.expect(st == faults::kCrashed, "simulated crash did not happen (status " + std::to_string(st) + ")");
        o.expect(slurp(dir / "data" / "verdicts.jsonl") == before, "verdict file changed by the crashed write");
        Store s(dir / "data");
        o.expect(!faults::has_tmp_files(dir / "data"), "temp files survive the reopen");
        o.expect(s.verdicts().size() == 1 && s.verdicts()[0].verdict == Verdict::Confirm,
                 "reopened store lost or gained a verdict");
        s.add_verdict({fid, Verdict::Reject, std::nullopt, "inspector", 3});
        o.expect(Store(dir / "data").verdicts().size() == 2, "write after recovery not durable");
    }
    fs::remove_all(dir);
    o.detail = std::to_string(cli_findings.size()) + " findings identical via CLI and service; crash recovery checked";
    return o;
}

}  // namespace

int main()
{
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"slice consistency", slice_consistency},
        {"coordinate check", coordinates},
        {"metric oracles", metric_oracles},
        {"augmentation oracle", augmentation},
        {"synthetic end-to-end", synthetic_end_to_end},
        {"fusion properties and determinism", fusion_properties},
        {"gateway equivalence and crash persistence", gateway},
    };
    int failed = 0;
    for (const auto& [name, check] : criteria) {
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o.failures.push_back(std::string("exception: ") + e.what());
        }
        const bool pass = o.failures.empty();
        failed += !pass;
        std::printf("%s  %s: %s\n", pass ? "PASS" : "FAIL", name, o.detail.c_str());
        for (const auto& f : o.failures) std::printf("      %s\n", f.c_str());
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
