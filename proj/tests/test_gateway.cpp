#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "gprxv/gateway/service.hpp"
#include "gprxv/synth.hpp"
#include "store_faults.hpp"

// After the Eigen users: the resolver header it pulls in defines _res.
#include <httplib.h>
#include <png.h>

using namespace gprxv;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;

    explicit TempDir(const std::string& name)
        : path(fs::temp_directory_path() / ("gprxv_test_gateway_" + name + "_" + std::to_string(::getpid())))
    {
        fs::remove_all(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

const Scene& void_scene()
{
    static const Scene s = make_benchmark(3, {0, 1, 0, 0}).at(0);
    return s;
}

const Scene& manhole_scene()
{
    static const Scene s = make_benchmark(3, {0, 0, 0, 1}).at(0);
    return s;
}

std::string slurp(const fs::path& p)
{
    std::ifstream is(p, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

// Runs a job to completion directly against the store.
std::string finished_job(Store& s, const std::string& volume_id)
{
    const PipelineConfig cfg;
    const auto id = s.add_job(volume_id, cfg.to_json());
    JobRecord j = *s.job(id);
    j.state = JobState::Running;
    s.update_job(j);
    s.complete_job(j, run_pipeline(s.load_volume(volume_id), cfg).trace.findings);
    return id;
}

struct PngInfo {
    int width = 0, height = 0, bit_depth = 0, color = 0;
};

PngInfo png_header(const std::string& bytes)
{
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    REQUIRE(png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()));
    PngInfo info{int(img.width), int(img.height), 8, int(img.format)};
    png_image_free(&img);
    return info;
}

}  // namespace

TEST_CASE("empty data directory starts clean")
{
    TempDir d("empty");
    Store s(d.path);
    CHECK(s.volumes().empty());
    CHECK(s.jobs().empty());
    CHECK(s.verdicts().empty());
    const auto r = export_report(s);
    CHECK(r.at("findings_total") == 0);
    CHECK(r.at("jobs").at("total") == 0);
}

TEST_CASE("store records survive a restart")
{
    TempDir d("durable");
    std::string vol, job;
    std::vector<Finding> fs_before;
    {
        Store s(d.path);
        vol = s.add_volume(void_scene().volume);
        CHECK(vol == "vol-0001");
        job = finished_job(s, vol);
        fs_before = s.findings(job);
        REQUIRE_FALSE(fs_before.empty());
        const std::string fid = job + ":" + fs_before[0].id;
        s.add_verdict({fid, Verdict::Confirm, std::nullopt, "ana", 1});
        s.add_verdict({fid, Verdict::Reclassify, FindingClass::Loose, "ben", 2});
        s.add_verdict({fid, Verdict::Reject, std::nullopt, "cy", 3});
        CHECK_THROWS_AS(s.add_verdict({job + ":f9999", Verdict::Confirm, std::nullopt, "x", 4}), std::out_of_range);
        CHECK_THROWS_AS(s.add_verdict({fid, Verdict::Reclassify, std::nullopt, "x", 4}), std::invalid_argument);
    }
    Store s(d.path);
    REQUIRE(s.volumes().size() == 1);
    CHECK(s.load_volume(vol) == void_scene().volume);
    CHECK(s.job(job)->state == JobState::Done);
    CHECK(s.findings(job) == fs_before);
    REQUIRE(s.verdicts().size() == 3);
    CHECK(s.verdicts()[1].corrected == FindingClass::Loose);
    CHECK(s.verdicts()[2].reviewer == "cy");

    const auto views = collect_findings(s);
    CHECK(views.at(0).finding.review == ReviewState::Rejected);
    const auto r = export_report(s);
    int by_review = 0, by_class = 0;
    for (const auto& [k, v] : r.at("by_review").items()) by_review += v.get<int>();
    for (const auto& [k, v] : r.at("by_class").items()) by_class += v.get<int>();
    CHECK(by_review == r.at("findings_total").get<int>());
    CHECK(by_class == r.at("findings_total").get<int>());
    CHECK(r.at("by_review").at("rejected") == 1);
}

TEST_CASE("job state changes are checked")
{
    TempDir d("states");
    Store s(d.path);
    const auto vol = s.add_volume(void_scene().volume);
    CHECK_THROWS_AS(s.add_job("vol-0009", "{}"), std::out_of_range);
    const auto id = s.add_job(vol, "{}");
    JobRecord j = *s.job(id);
    j.state = JobState::Failed;
    CHECK_THROWS_AS(s.update_job(j), std::logic_error);
    j.state = JobState::Done;
    CHECK_THROWS_AS(s.complete_job(j, {}), std::logic_error);
    j.state = JobState::Running;
    s.update_job(j);
    j.state = JobState::Done;
    CHECK_THROWS_AS(s.update_job(j), std::logic_error);
    s.complete_job(j, {});
    CHECK(s.job(id)->state == JobState::Done);
    CHECK(s.findings(id).empty());
    CHECK(fs::exists(s.findings_path(id)));
}

TEST_CASE("a crash between temp write and rename keeps the prior state")
{
    TempDir d("crash");
    std::string vol, job, fid;
    {
        Store s(d.path);
        vol = s.add_volume(void_scene().volume);
        job = finished_job(s, vol);
        fid = job + ":" + s.findings(job).at(0).id;
        s.add_verdict({fid, Verdict::Confirm, std::nullopt, "a", 1});
    }
    const auto verdicts_before = slurp(d.path / "verdicts.jsonl");
    const auto jobs_before = slurp(d.path / "jobs.jsonl");

    CHECK(faults::crash_before_rename(d.path, "verdicts", [&](Store& s) {
              s.add_verdict({fid, Verdict::Reject, std::nullopt, "b", 2});
          }) == faults::kCrashed);
    CHECK(faults::has_tmp_files(d.path));
    CHECK(slurp(d.path / "verdicts.jsonl") == verdicts_before);

    // A new volume whose container landed but whose index line did not.
    CHECK(faults::crash_before_rename(d.path, "volumes.jsonl",
                                      [&](Store& s) { s.add_volume(manhole_scene().volume); }) == faults::kCrashed);
    CHECK(fs::exists(d.path / "volumes" / "vol-0002.gpr"));

    // A job whose findings file landed but whose done record did not.
    std::string job2;
    {
        Store s(d.path);
        job2 = s.add_job(vol, PipelineConfig{}.to_json());
        JobRecord j = *s.job(job2);
        j.state = JobState::Running;
        s.update_job(j);
    }
    CHECK(faults::crash_before_rename(d.path, "jobs.jsonl", [&](Store& s) {
              JobRecord j = *s.job(job2);
              s.complete_job(j, s.findings(job));
          }) == faults::kCrashed);
    CHECK(fs::exists(d.path / "findings" / (job2 + ".jsonl")));
    CHECK(slurp(d.path / "jobs.jsonl").size() > jobs_before.size());

    Store s(d.path);
    CHECK_FALSE(faults::has_tmp_files(d.path));
    REQUIRE(s.verdicts().size() == 1);
    CHECK(s.verdicts()[0].verdict == Verdict::Confirm);
    CHECK(s.volumes().size() == 1);
    CHECK_FALSE(fs::exists(d.path / "volumes" / "vol-0002.gpr"));
    CHECK(s.job(job2)->state == JobState::Running);
    CHECK_FALSE(fs::exists(d.path / "findings" / (job2 + ".jsonl")));
    CHECK(s.add_volume(manhole_scene().volume) == "vol-0002");
}

TEST_CASE("inconsistent data directories are refused")
{
    auto seeded = [](const fs::path& dir) {
        Store s(dir);
        const auto vol = s.add_volume(void_scene().volume);
        const auto job = finished_job(s, vol);
        s.add_verdict({job + ":f0000", Verdict::Confirm, std::nullopt, "a", 1});
    };
    {
        TempDir d("missing_volume");
        seeded(d.path);
        fs::remove(d.path / "volumes" / "vol-0001.gpr");
        CHECK_THROWS_AS(Store{d.path}, StoreError);
    }
    {
        TempDir d("missing_findings");
        seeded(d.path);
        fs::remove(d.path / "findings" / "job-0001.jsonl");
        CHECK_THROWS_AS(Store{d.path}, StoreError);
    }
    {
        TempDir d("short_findings");
        seeded(d.path);
        std::ofstream(d.path / "findings" / "job-0001.jsonl", std::ios::trunc);
        CHECK_THROWS_AS(Store{d.path}, StoreError);
    }
    {
        TempDir d("stray_verdict");
        seeded(d.path);
        std::ofstream(d.path / "verdicts.jsonl", std::ios::app)
            << R"({"finding":"job-0007:f0000","verdict":"confirm","reviewer":"x","timestamp_ms":5})" << "\n";
        CHECK_THROWS_AS(Store{d.path}, StoreError);
    }
    {
        TempDir d("garbled");
        seeded(d.path);
        std::ofstream(d.path / "jobs.jsonl", std::ios::app) << "{not json\n";
        CHECK_THROWS_AS(Store{d.path}, StoreError);
    }
    {
        TempDir d("unwritable");
        std::ofstream(d.path.string() + "_file") << "x";
        CHECK_THROWS_AS(Store{fs::path(d.path.string() + "_file") / "sub"}, StoreError);
        fs::remove(d.path.string() + "_file");
    }
}

TEST_CASE("slice renders stay inside the image")
{
    const Volume& v = void_scene().volume;
    const std::vector<VoxelBox> boxes{{0, 32, 0, 96, 0, 512}, {3, 9, 10, 40, 100, 180}, {30, 32, 90, 96, 500, 512}};
    for (const auto& b : boxes) {
        for (View view : {View::B, View::C, View::D}) {
            const auto r = render_footprint(v, b, view);
            CHECK((r.box.r0 >= 0 && r.box.c0 >= 0 && r.box.r1 <= r.rows && r.box.c1 <= r.cols));
            const auto info = png_header(r.png);
            CHECK(info.height == r.rows);
            CHECK(info.width == r.cols);
        }
    }
    const auto c = render_footprint(v, boxes[1], View::C);
    CHECK(c.slice_index == 139);
    CHECK(c.box == Box2{3, 10, 9, 40});
    CHECK(c.rows == 32);
    CHECK(c.cols == 96);
    CHECK_THROWS(encode_png_gray(Image(0, 0)));
}

TEST_CASE("HTTP API")
{
    TempDir d("http");
    // A failed job exists before the service starts; reviews on it conflict.
    {
        Store s(d.path);
        const auto vol = s.add_volume(manhole_scene().volume);
        const auto id = s.add_job(vol, PipelineConfig{}.to_json());
        JobRecord j = *s.job(id);
        j.state = JobState::Running;
        s.update_job(j);
        j.state = JobState::Failed;
        j.error = "seeded";
        s.update_job(j);
    }
    Service svc({d.path, 2});
    const int port = svc.start("127.0.0.1", 0);
    REQUIRE(port > 0);
    httplib::Client cli("127.0.0.1", port);
    cli.set_read_timeout(60, 0);

    auto get_json = [&](const std::string& path, int want = 200) {
        auto r = cli.Get(path);
        REQUIRE(r);
        CHECK(r->status == want);
        return json::parse(r->body);
    };

    auto up = cli.Post("/api/v1/volumes", encode_volume(void_scene().volume), "application/octet-stream");
    REQUIRE(up);
    CHECK(up->status == 201);
    const std::string vol = json::parse(up->body).at("id");
    CHECK(vol == "vol-0002");
    CHECK(get_json("/api/v1/volumes").at("volumes").size() == 2);
    CHECK(get_json("/api/v1/volumes/" + vol).at("n_samples") == 512);
    get_json("/api/v1/volumes/vol-0099", 404);

    auto bad = cli.Post("/api/v1/volumes", "GPRVOL1 nonsense", "application/octet-stream");
    REQUIRE(bad);
    CHECK(bad->status == 422);

    auto jr = cli.Post("/api/v1/jobs", json{{"volume", vol}}.dump(), "application/json");
    REQUIRE(jr);
    CHECK(jr->status == 202);
    const std::string job = json::parse(jr->body).at("id");
    CHECK(json::parse(jr->body).at("state") == "queued");
    auto missing = cli.Post("/api/v1/jobs", json{{"volume", "vol-0042"}}.dump(), "application/json");
    REQUIRE(missing);
    CHECK(missing->status == 404);
    auto garbage = cli.Post("/api/v1/jobs", "{\"vol", "application/json");
    REQUIRE(garbage);
    CHECK(garbage->status == 422);
    auto bad_cfg = cli.Post("/api/v1/jobs", json{{"volume", vol}, {"config", {{"tau_h", 2.0}}}}.dump(),
                            "application/json");
    REQUIRE(bad_cfg);
    CHECK(bad_cfg->status == 422);

    svc.wait_idle();
    const auto done = get_json("/api/v1/jobs/" + job);
    CHECK(done.at("state") == "done");
    get_json("/api/v1/jobs/job-0099", 404);
    CHECK(get_json("/api/v1/jobs").at("jobs").size() == 2);

    const auto listed = get_json("/api/v1/findings?volume=" + vol).at("findings");
    REQUIRE(listed.size() == std::size_t(done.at("n_findings").get<int>()));
    REQUIRE_FALSE(listed.empty());
    CHECK(get_json("/api/v1/findings?volume=vol-0001").at("findings").empty());
    get_json("/api/v1/findings?cls=pothole", 422);

    // The service's findings equal a direct pipeline run on the same volume.
    const auto direct = run_pipeline(void_scene().volume, PipelineConfig{}).trace.findings;
    CHECK(slurp(svc.store().findings_path(job)) == findings_to_text(direct));

    const std::string fid = listed[0].at("id");
    CHECK(get_json("/api/v1/findings/" + fid).at("review") == "pending");
    get_json("/api/v1/findings/" + job + ":f9999", 404);
    get_json("/api/v1/findings/nonsense", 404);

    for (const char* view : {"B", "C", "D"}) {
        auto r = cli.Get("/api/v1/findings/" + fid + "/render?view=" + view);
        REQUIRE(r);
        CHECK(r->status == 200);
        CHECK(r->get_header_value("Content-Type") == "image/png");
        CHECK(r->get_header_value("X-View") == view);
        int r0, c0, r1, c1, rows, cols;
        CHECK(std::sscanf(r->get_header_value("X-Box").c_str(), "%d,%d,%d,%d", &r0, &c0, &r1, &c1) == 4);
        CHECK(std::sscanf(r->get_header_value("X-Image-Size").c_str(), "%d,%d", &rows, &cols) == 2);
        CHECK((0 <= r0 && r0 <= r1 && r1 <= rows && 0 <= c0 && c0 <= c1 && c1 <= cols));
        const auto info = png_header(r->body);
        CHECK(info.height == rows);
        CHECK(info.width == cols);
    }
    auto no_view = cli.Get("/api/v1/findings/" + fid + "/render?view=Q");
    REQUIRE(no_view);
    CHECK(no_view->status == 422);

    auto review = [&](const std::string& id, const json& body) {
        httplib::Headers h{{"X-Reviewer", "inspector-7"}};
        auto r = cli.Post("/api/v1/findings/" + id + "/reviews", h, body.dump(), "application/json");
        REQUIRE(r);
        return *r;
    };
    auto ok = review(fid, {{"verdict", "confirm"}});
    CHECK(ok.status == 201);
    CHECK(json::parse(ok.body).at("review") == "confirmed");
    CHECK(get_json("/api/v1/findings/" + fid).at("review") == "confirmed");
    CHECK(get_json("/api/v1/findings?review=confirmed").at("findings").size() == 1);

    CHECK(review(fid, {{"verdict", "reclassify"}}).status == 422);
    CHECK(review(fid, {{"verdict", "confirm"}, {"corrected_cls", "void"}}).status == 422);
    CHECK(review(fid, {{"verdict", "maybe"}}).status == 422);
    CHECK(review(fid, {{"verdict", "reclassify"}, {"corrected_cls", "distress_unspecified"}}).status == 422);
    CHECK(review(fid, {{"verdict", "confirm"}, {"note", "x"}}).status == 422);
    CHECK(review(job + ":f9999", {{"verdict", "confirm"}}).status == 404);
    CHECK(review("job-0001:f0000", {{"verdict", "confirm"}}).status == 409);

    auto re = review(fid, {{"verdict", "reclassify"}, {"corrected_cls", "manhole"}});
    CHECK(re.status == 201);
    const auto after = get_json("/api/v1/findings/" + fid);
    CHECK(after.at("review") == "reclassified");
    CHECK(after.at("effective_cls") == "manhole");
    const auto history = get_json("/api/v1/findings/" + fid + "/reviews").at("reviews");
    REQUIRE(history.size() == 2);
    CHECK(history[0].at("verdict") == "confirm");
    CHECK(history[1].at("reviewer") == "inspector-7");
    CHECK(get_json("/api/v1/findings?cls=manhole&volume=" + vol).at("findings").size() == 1);

    const auto rep = get_json("/api/v1/report?volume=" + vol);
    CHECK(rep.at("findings_total") == listed.size());
    CHECK(rep.at("by_review").at("reclassified") == 1);
    CHECK(rep.at("by_class").at("manhole") == 1);
    CHECK(rep.at("jobs").at("done") == 1);
    int per_state = 0;
    for (const auto& [k, v] : rep.at("by_review").items()) per_state += v.get<int>();
    CHECK(per_state == rep.at("findings_total").get<int>());
    CHECK(get_json("/api/v1/report").at("jobs").at("failed") == 1);
    auto text = cli.Get("/api/v1/report?format=text");
    REQUIRE(text);
    CHECK(text->status == 200);
    CHECK(text->body.find("reclassified") != std::string::npos);
    get_json("/api/v1/report?format=xml", 422);

    svc.stop();

    // Everything posted is visible after a restart.
    Service again({d.path, 1});
    CHECK(collect_findings(again.store(), {std::nullopt, job, std::nullopt, std::nullopt}).size() == listed.size());
    CHECK(again.store().verdicts_for(fid).size() == 2);
}

TEST_CASE("interrupted jobs are rerun at startup")
{
    TempDir d("requeue");
    std::string job;
    {
        Store s(d.path);
        const auto vol = s.add_volume(void_scene().volume);
        job = s.add_job(vol, PipelineConfig{}.to_json());
        JobRecord j = *s.job(job);
        j.state = JobState::Running;
        s.update_job(j);
    }
    Service svc({d.path, 1});
    svc.wait_idle();
    CHECK(svc.store().job(job)->state == JobState::Done);
    CHECK(svc.store().findings(job) == run_pipeline(void_scene().volume, PipelineConfig{}).trace.findings);
    CHECK_THROWS_AS(svc.submit_job("vol-0031", PipelineConfig{}), std::out_of_range);
}
