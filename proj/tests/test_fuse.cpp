#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "gprxv/pipeline.hpp"
#include "gprxv/synth.hpp"
#include "oracles.hpp"
#include "properties.hpp"

using namespace gprxv;

namespace {

const Dims kDims{32, 96, 512};
const Thickness kThick{4, 2, 4};

Detection make(View v, int slice, Box2 bbox, Label cls, double score, TraceRange window = {0, 32})
{
    Detection d;
    d.view = v;
    d.slice_index = slice;
    d.window = v == View::D ? TraceRange{0, kDims.n_traces} : window;
    d.bbox = bbox;
    d.cls = cls;
    d.score = score;
    d.source = "hand";
    return d;
}

// A C detection at sample 100 over channels [4, 8) and traces [10, 18).
Detection c_void(double score = 0.7) { return make(View::C, 100, {4, 10, 8, 18}, Label::Void, score); }

// A whole-window healthy C verdict at sample 100.
Detection c_healthy(double score) { return make(View::C, 100, {0, 0, 32, 32}, Label::Healthy, score); }

Detection b_at(Label cls, double score) { return make(View::B, 6, {96, 12, 104, 20}, cls, score); }

Detection d_at(Label cls, double score) { return make(View::D, 14, {96, 4, 104, 8}, cls, score); }

Thresholds thresholds()
{
    Thresholds th;
    th.thickness = kThick;
    return th;
}

struct Fixture {
    DetectionSet set;
    std::vector<int> b, c, d;

    explicit Fixture(std::vector<Detection> dets) : set(std::move(dets), kThick, kDims)
    {
        for (std::size_t i = 0; i < set.size(); ++i) {
            auto& into = set.dets[i].view == View::B ? b : set.dets[i].view == View::C ? c : d;
            into.push_back(int(i));
        }
    }
};

}  // namespace

TEST_CASE("associate")
{
    CHECK(associate(DetectionSet({}, kThick), 0.1).empty());

    Fixture f({c_void(), b_at(Label::Void, 0.6)});
    CHECK(overlap3d(f.set.boxes[0], f.set.boxes[1]) == doctest::Approx(0.6));
    const auto one = associate(f.set, 0.1);
    REQUIRE(one.size() == 1);
    CHECK(one[0].members == std::vector<int>{0, 1});
    CHECK(one[0].box == hull(f.set.boxes[0], f.set.boxes[1]));
    CHECK(one[0].best_score(View::B, Label::Void) == 0.6);
    // Above the overlap the pair splits.
    CHECK(associate(f.set, 0.6).size() == 2);

    Fixture apart({c_void(), make(View::C, 300, {20, 2, 24, 6}, Label::Loose, 0.5)});
    CHECK(associate(apart.set, 0.1).size() == 2);

    // Healthy detections never seed candidates.
    Fixture healthy({c_healthy(0.9)});
    CHECK(associate(healthy.set, 0.1).empty());
}

TEST_CASE("associate links chains and contains every member")
{
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 30; ++trial) {
        const DetectionSet set(oracle::random_detection_set(rng, kDims, 40), kThick, kDims);
        const auto cands = associate(set, 0.1);
        std::vector<int> seen;
        for (const auto& c : cands) {
            CHECK_FALSE(c.members.empty());
            CHECK(std::is_sorted(c.members.begin(), c.members.end()));
            for (int id : c.members) {
                CHECK(c.box.contains(set.boxes[std::size_t(id)]));
                CHECK(set.dets[std::size_t(id)].cls != Label::Healthy);
                seen.push_back(id);
            }
        }
        std::sort(seen.begin(), seen.end());
        CHECK(std::adjacent_find(seen.begin(), seen.end()) == seen.end());
        std::size_t non_healthy = 0;
        for (const auto& d : set.dets) non_healthy += d.cls != Label::Healthy;
        CHECK(seen.size() == non_healthy);
    }
}

TEST_CASE("step 1 sifts only uncontested healthy regions")
{
    {
        const auto r = step1_sift_healthy({}, DetectionSet({}, kThick), {}, 0.5);
        CHECK(r.kept.empty());
        CHECK(r.sifted.empty());
    }
    {
        Fixture f({b_at(Label::Void, 0.6), c_healthy(0.95)});
        const auto r = step1_sift_healthy(associate(f.set, 0.1), f.set, f.c, 0.5);
        CHECK(r.sifted.size() == 1);
        CHECK(r.kept.empty());
        // Below tau_h the verdict is not trusted.
        const auto low = step1_sift_healthy(associate(f.set, 0.1), f.set, f.c, 0.96);
        CHECK(low.kept.size() == 1);
    }
    {
        Fixture f({b_at(Label::Void, 0.6), c_void(0.2), c_healthy(0.99)});
        const auto r = step1_sift_healthy(associate(f.set, 0.1), f.set, f.c, 0.5);
        CHECK(r.kept.size() == 1);
        CHECK(r.sifted.empty());
    }
    {
        // A healthy verdict on a distant sample does not reach the candidate.
        Fixture f({b_at(Label::Void, 0.6), make(View::C, 300, {0, 0, 32, 32}, Label::Healthy, 0.99)});
        CHECK(step1_sift_healthy(associate(f.set, 0.1), f.set, f.c, 0.5).kept.size() == 1);
    }
    Fixture f({b_at(Label::Void, 0.6), c_healthy(0.95)});
    CHECK_THROWS_AS(step1_sift_healthy(associate(f.set, 0.1), f.set, f.b, 0.5), std::invalid_argument);
}

TEST_CASE("step 2 filters manholes by the B score")
{
    {
        Fixture f({b_at(Label::Manhole, 0.9), c_void()});
        const auto r = step2_filter_manholes(associate(f.set, 0.1), f.set, f.b, 0.5);
        REQUIRE(r.manholes.size() == 1);
        CHECK(r.distress.empty());
        CHECK(r.manholes[0].cls == FindingClass::Manhole);
        CHECK(r.manholes[0].stage == Stage::Step2);
        CHECK(r.manholes[0].confidence == 0.9);
        CHECK(step2_filter_manholes(associate(f.set, 0.1), f.set, f.b, 0.95).distress.size() == 1);
    }
    {
        Fixture f({b_at(Label::Void, 0.9)});
        const auto r = step2_filter_manholes(associate(f.set, 0.1), f.set, f.b, 0.5);
        CHECK(r.manholes.empty());
        CHECK(r.distress.size() == 1);
    }
    {
        const auto r = step2_filter_manholes({}, DetectionSet({}, kThick), {}, 0.5);
        CHECK(r.manholes.empty());
        CHECK(r.distress.empty());
    }
    Fixture f({b_at(Label::Manhole, 0.9), c_void()});
    CHECK_THROWS_AS(step2_filter_manholes(associate(f.set, 0.1), f.set, f.c, 0.5), std::invalid_argument);
}

TEST_CASE("step 3 classifies from D, then C, else unspecified")
{
    {
        Fixture f({b_at(Label::Void, 0.4), d_at(Label::Void, 0.8), d_at(Label::Loose, 0.3)});
        const auto out = step3_classify(associate(f.set, 0.1), f.set, f.d, f.c);
        REQUIRE(out.size() == 1);
        CHECK(out[0].cls == FindingClass::Void);
        CHECK(out[0].confidence == 0.8);
        CHECK(out[0].stage == Stage::Step3);
    }
    {
        Fixture f({b_at(Label::Void, 0.4), make(View::C, 100, {4, 10, 8, 18}, Label::Loose, 0.7)});
        const auto out = step3_classify(associate(f.set, 0.1), f.set, f.d, f.c);
        REQUIRE(out.size() == 1);
        CHECK(out[0].cls == FindingClass::Loose);
        CHECK(out[0].confidence == 0.7);
    }
    {
        Fixture f({b_at(Label::Void, 0.4)});
        const auto out = step3_classify(associate(f.set, 0.1), f.set, f.d, f.c);
        REQUIRE(out.size() == 1);
        CHECK(out[0].cls == FindingClass::DistressUnspecified);
        CHECK(out[0].confidence == 0.4);
    }
}

TEST_CASE("cross_verify on hand-built sets")
{
    CHECK(cross_verify({}, thresholds()).empty());

    const std::vector<Detection> dets{b_at(Label::Void, 0.4), d_at(Label::Loose, 0.6), c_void(0.5),
                                      make(View::B, 20, {300, 20, 310, 30}, Label::Manhole, 0.8, {32, 64}),
                                      make(View::C, 300, {0, 0, 32, 32}, Label::Healthy, 0.9)};
    const auto fs = cross_verify(dets, thresholds(), kDims);
    REQUIRE(fs.size() == 2);
    CHECK(fs[0].cls == FindingClass::Loose);
    CHECK(fs[0].id == "f0000");
    CHECK(fs[1].cls == FindingClass::Manhole);
    CHECK(fs[1].id == "f0001");
    auto rev = dets;
    std::reverse(rev.begin(), rev.end());
    CHECK(cross_verify(rev, thresholds(), kDims) == fs);

    Thresholds bad = thresholds();
    bad.assoc = 1.0;
    CHECK_THROWS_AS(cross_verify(dets, bad), std::invalid_argument);
    bad = thresholds();
    bad.thickness.b_channels = 0;
    CHECK_THROWS_AS(cross_verify(dets, bad), std::invalid_argument);
}

TEST_CASE("fusion properties on random detection sets")
{
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 60; ++trial) {
        const auto dets = oracle::random_detection_set(rng, kDims, 30);
        const Thresholds th = thresholds();
        CHECK(props::permutation_invariance(dets, th, rng) == "");
        CHECK(props::partition(dets, th) == "");
        CHECK(props::threshold_monotonicity(dets, th) == "");
        for (const auto& f : cross_verify(dets, th)) {
            CHECK((f.cls == FindingClass::Manhole) == (f.stage == Stage::Step2));
            CHECK((f.confidence >= 0.0 && f.confidence <= 1.0));
        }
    }
}

TEST_CASE("removing manhole detections from realistic runs")
{
    PipelineConfig cfg;
    for (const auto& sc : make_benchmark(8, {1, 1, 1, 2})) {
        const auto dets = detect_volume(sc.volume, cfg);
        const auto with = cross_verify(dets, cfg.thresholds, sc.volume.dims());
        const auto without = cross_verify(props::without_manholes(dets), cfg.thresholds, sc.volume.dims());
        CHECK(props::distress_count(without) >= props::distress_count(with));
    }
}

TEST_CASE("removing manhole detections can shrink the distress list")
{
    // A candidate built from C and D manhole calls that no B detection backs
    // stays in the distress pool as unspecified; without those calls it is gone.
    const std::vector<Detection> dets{make(View::C, 100, {4, 10, 8, 18}, Label::Manhole, 0.7),
                                      make(View::D, 14, {96, 4, 104, 8}, Label::Manhole, 0.6)};
    const auto with = cross_verify(dets, thresholds(), kDims);
    REQUIRE(with.size() == 1);
    CHECK(with[0].cls == FindingClass::DistressUnspecified);
    CHECK(cross_verify(props::without_manholes(dets), thresholds(), kDims).empty());
}

TEST_CASE("synthetic void and manhole are told apart")
{
    SceneSpec s = default_scene();
    s.rng_seed = 99;
    s.objects.push_back(ObjectSpec::make(ObjectKind::Void, {0.8, 1.2, 1.0}, {0.65, 0.75, 0.3}));
    s.objects.push_back(ObjectSpec::make(ObjectKind::Manhole, {0.8, 3.5, 1.6}, {0.65, 0.75, 0.3}));
    const Scene sc = render_scene(s);
    const PipelineConfig cfg;
    const auto r = run_pipeline(sc.volume, cfg);
    const auto& fs = r.trace.findings;
    REQUIRE(fs.size() == 2);
    int voids = 0, manholes = 0;
    for (const auto& f : fs) {
        const auto& gt = f.cls == FindingClass::Manhole ? sc.truth[1] : sc.truth[0];
        CHECK(iou(f.box, gt.box) >= 0.3);
        voids += f.cls == FindingClass::Void;
        manholes += f.cls == FindingClass::Manhole;
    }
    CHECK(voids == 1);
    CHECK(manholes == 1);
    CHECK(findings_to_text(run_pipeline(sc.volume, cfg).trace.findings) == findings_to_text(fs));
}

TEST_CASE("finding records")
{
    Finding f;
    f.id = "f0003";
    f.cls = FindingClass::Loose;
    f.confidence = 0.625;
    f.box = {1, 5, 10, 20, 100, 140};
    f.stage = Stage::Step3;
    f.members = {2, 7, 9};
    CHECK(finding_from_line(finding_to_line(f)) == f);
    f.review = ReviewState::Reclassified;
    f.corrected = FindingClass::Void;
    CHECK(finding_from_line(finding_to_line(f)) == f);

    const auto p = std::filesystem::temp_directory_path() / "gprxv_test_fuse_findings.jsonl";
    export_findings(std::vector<Finding>{f, f}, p);
    CHECK(import_findings(p) == std::vector<Finding>{f, f});
    export_findings(std::vector<Finding>{}, p);
    CHECK(std::filesystem::file_size(p) == 0);
    CHECK(import_findings(p).empty());
    std::filesystem::remove(p);

    Finding m = f;
    m.cls = FindingClass::Manhole;
    m.review = ReviewState::Pending;
    m.corrected.reset();
    CHECK_THROWS(finding_from_line(finding_to_line(m)));
    CHECK_THROWS(finding_from_line("{}"));
}
