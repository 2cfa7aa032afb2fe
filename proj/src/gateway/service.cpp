#include "gprxv/gateway/service.hpp"

#include <httplib.h>

#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <mutex>
#include <thread>

namespace gprxv {

using nlohmann::json;

namespace {

struct ApiError : std::runtime_error {
    int status;
    ApiError(int s, const std::string& msg) : std::runtime_error(msg), status(s) {}
};

json box_json(const VoxelBox& b) { return {{"c", {b.c0, b.c1}}, {"x", {b.x0, b.x1}}, {"k", {b.k0, b.k1}}}; }

json job_view_json(const JobRecord& j)
{
    return {{"id", j.id},
            {"volume", j.volume_id},
            {"state", std::string(to_string(j.state))},
            {"config", json::parse(j.config)},
            {"created_ms", j.created_ms},
            {"started_ms", j.started_ms},
            {"finished_ms", j.finished_ms},
            {"elapsed_ms", j.elapsed_ms},
            {"n_findings", j.n_findings},
            {"error", j.error}};
}

json volume_view_json(const VolumeRecord& r)
{
    return {{"id", r.id},
            {"n_channels", r.dims.n_channels},
            {"n_traces", r.dims.n_traces},
            {"n_samples", r.dims.n_samples},
            {"created_ms", r.created_ms}};
}

std::pair<std::string, std::string> split_finding_id(const std::string& api_id)
{
    const auto colon = api_id.find(':');
    if (colon == std::string::npos) throw ApiError(404, "unknown finding " + api_id);
    return {api_id.substr(0, colon), api_id.substr(colon + 1)};
}

void reply_json(httplib::Response& res, const json& body, int status = 200)
{
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

}  // namespace

std::vector<FindingView> collect_findings(const Store& store, const FindingFilter& filter)
{
    std::map<std::string, ReviewVerdict> latest;
    for (const auto& v : store.verdicts()) latest.insert_or_assign(v.finding_id, v);

    std::vector<FindingView> out;
    for (const auto& job : store.jobs()) {
        if (job.state != JobState::Done) continue;
        if (filter.volume && job.volume_id != *filter.volume) continue;
        if (filter.job && job.id != *filter.job) continue;
        for (auto& f : store.findings(job.id)) {
            FindingView fv{job.id + ":" + f.id, job.id, job.volume_id, std::move(f)};
            if (auto it = latest.find(fv.api_id); it != latest.end()) {
                fv.finding.review = review_state_of(it->second.verdict);
                fv.finding.corrected = it->second.corrected;
            }
            if (filter.cls && fv.effective_class() != *filter.cls) continue;
            if (filter.review && fv.finding.review != *filter.review) continue;
            out.push_back(std::move(fv));
        }
    }
    return out;
}

json finding_view_json(const FindingView& fv)
{
    const Finding& f = fv.finding;
    json j = {{"id", fv.api_id},
              {"job", fv.job_id},
              {"volume", fv.volume_id},
              {"cls", std::string(to_string(f.cls))},
              {"effective_cls", std::string(to_string(fv.effective_class()))},
              {"confidence", f.confidence},
              {"voxel_box", box_json(f.box)},
              {"stage_provenance", std::string(to_string(f.stage))},
              {"member_ids", f.members},
              {"review", std::string(to_string(f.review))}};
    if (f.corrected) j["corrected_cls"] = std::string(to_string(*f.corrected));
    return j;
}

json export_report(const Store& store, const std::optional<std::string>& volume)
{
    FindingFilter filter;
    filter.volume = volume;
    const auto findings = collect_findings(store, filter);

    json by_class = json::object(), by_review = json::object();
    for (auto c : {FindingClass::Manhole, FindingClass::Void, FindingClass::Loose, FindingClass::DistressUnspecified}) {
        by_class[std::string(to_string(c))] = 0;
    }
    for (auto r : {ReviewState::Pending, ReviewState::Confirmed, ReviewState::Reclassified, ReviewState::Rejected}) {
        by_review[std::string(to_string(r))] = 0;
    }
    for (const auto& f : findings) {
        by_class[std::string(to_string(f.effective_class()))] = by_class[std::string(to_string(f.effective_class()))].get<int>() + 1;
        by_review[std::string(to_string(f.finding.review))] = by_review[std::string(to_string(f.finding.review))].get<int>() + 1;
    }

    json jobs = {{"total", 0}, {"queued", 0}, {"running", 0}, {"done", 0}, {"failed", 0}};
    json per_job = json::array();
    std::int64_t total_ms = 0;
    int done = 0;
    for (const auto& j : store.jobs()) {
        if (volume && j.volume_id != *volume) continue;
        jobs["total"] = jobs["total"].get<int>() + 1;
        const std::string s(to_string(j.state));
        jobs[s] = jobs[s].get<int>() + 1;
        if (j.state == JobState::Done) {
            total_ms += j.elapsed_ms;
            ++done;
            per_job.push_back({{"job", j.id}, {"volume", j.volume_id}, {"elapsed_ms", j.elapsed_ms},
                               {"n_findings", j.n_findings}});
        }
    }
    json timing = {{"total_elapsed_ms", total_ms},
                   {"mean_elapsed_ms", done ? double(total_ms) / done : 0.0},
                   {"per_job", per_job}};
    return {{"findings_total", findings.size()},
            {"by_class", by_class},
            {"by_review", by_review},
            {"jobs", jobs},
            {"timing", timing}};
}

std::string report_text(const json& r)
{
    std::string out;
    char line[128];
    auto row = [&](const std::string& group, const std::string& key, const std::string& value) {
        std::snprintf(line, sizeof line, "%-10s %-22s %10s\n", group.c_str(), key.c_str(), value.c_str());
        out += line;
    };
    row("group", "key", "value");
    row("findings", "total", std::to_string(r.at("findings_total").get<int>()));
    for (const auto& [k, v] : r.at("by_class").items()) row("class", k, std::to_string(v.get<int>()));
    for (const auto& [k, v] : r.at("by_review").items()) row("review", k, std::to_string(v.get<int>()));
    for (const auto& [k, v] : r.at("jobs").items()) row("jobs", k, std::to_string(v.get<int>()));
    const auto& t = r.at("timing");
    row("timing", "total_elapsed_ms", std::to_string(t.at("total_elapsed_ms").get<std::int64_t>()));
    char mean[32];
    std::snprintf(mean, sizeof mean, "%.1f", t.at("mean_elapsed_ms").get<double>());
    row("timing", "mean_elapsed_ms", mean);
    return out;
}

struct Service::Impl {
    explicit Impl(ServiceOptions o) : opt(std::move(o)), store(opt.data_dir) {}

    ServiceOptions opt;
    Store store;
    httplib::Server http;
    std::thread listener;

    std::mutex mu;
    std::condition_variable cv;
    std::deque<std::string> queue;
    int active = 0;
    bool stopping = false;
    std::vector<std::thread> workers;

    void enqueue(const std::string& id)
    {
        {
            std::lock_guard lock(mu);
            queue.push_back(id);
        }
        cv.notify_all();
    }

    void work()
    {
        for (;;) {
            std::string id;
            {
                std::unique_lock lock(mu);
                cv.wait(lock, [&] { return stopping || !queue.empty(); });
                if (stopping) return;
                id = queue.front();
                queue.pop_front();
                ++active;
            }
            run_job(id);
            {
                std::lock_guard lock(mu);
                --active;
            }
            cv.notify_all();
        }
    }

    void run_job(const std::string& id)
    {
        auto rec = store.job(id);
        if (!rec) return;
        JobRecord job = *rec;
        try {
            // A job found running at startup was interrupted; rerun it as is.
            if (job.state == JobState::Queued) {
                job.state = JobState::Running;
                job.started_ms = now_ms();
                store.update_job(job);
            }
            const auto t0 = std::chrono::steady_clock::now();
            const Volume v = store.load_volume(job.volume_id);
            const PipelineConfig cfg = PipelineConfig::from_json(job.config);
            const auto result = run_pipeline(v, cfg);
            job.elapsed_ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
            job.finished_ms = now_ms();
            store.complete_job(job, result.trace.findings);
        } catch (const std::exception& e) {
            try {
                job.state = JobState::Failed;
                job.error = e.what();
                job.finished_ms = now_ms();
                store.update_job(job);
            } catch (const std::exception&) {
                // The store refused the write; the job stays in its last committed state.
            }
        }
    }

    FindingView find(const std::string& api_id)
    {
        const auto [job_id, fid] = split_finding_id(api_id);
        const auto job = store.job(job_id);
        if (!job) throw ApiError(404, "unknown finding " + api_id);
        if (job->state != JobState::Done) throw ApiError(409, "job " + job_id + " has not finished");
        FindingFilter f;
        f.job = job_id;
        for (auto& fv : collect_findings(store, f)) {
            if (fv.finding.id == fid) return fv;
        }
        throw ApiError(404, "unknown finding " + api_id);
    }

    void routes();
};

void Service::Impl::routes()
{
    auto guard = [](auto fn) {
        return [fn](const httplib::Request& req, httplib::Response& res) {
            try {
                fn(req, res);
            } catch (const ApiError& e) {
                reply_json(res, {{"error", e.what()}}, e.status);
            } catch (const std::exception& e) {
                reply_json(res, {{"error", e.what()}}, 500);
            }
        };
    };

    http.Post("/api/v1/volumes", guard([this](const httplib::Request& req, httplib::Response& res) {
        std::optional<Volume> v;
        try {
            v.emplace(decode_volume(req.body));
        } catch (const std::exception& e) {
            throw ApiError(422, std::string("invalid volume container: ") + e.what());
        }
        const auto id = store.add_volume(*v);
        reply_json(res, volume_view_json(*store.volume(id)), 201);
    }));

    http.Get("/api/v1/volumes", guard([this](const httplib::Request&, httplib::Response& res) {
        json arr = json::array();
        for (const auto& r : store.volumes()) arr.push_back(volume_view_json(r));
        reply_json(res, {{"volumes", arr}});
    }));

    http.Get(R"(/api/v1/volumes/([^/]+))", guard([this](const httplib::Request& req, httplib::Response& res) {
        const auto r = store.volume(req.matches[1]);
        if (!r) throw ApiError(404, "unknown volume " + std::string(req.matches[1]));
        reply_json(res, volume_view_json(*r));
    }));

    http.Post("/api/v1/jobs", guard([this](const httplib::Request& req, httplib::Response& res) {
        json body;
        PipelineConfig cfg;
        std::string volume;
        try {
            body = json::parse(req.body);
            volume = body.at("volume").get<std::string>();
            if (body.contains("config")) cfg = PipelineConfig::from_json(body.at("config").dump());
        } catch (const std::exception& e) {
            throw ApiError(422, std::string("invalid job request: ") + e.what());
        }
        if (!store.volume(volume)) throw ApiError(404, "unknown volume " + volume);
        const auto id = store.add_job(volume, cfg.to_json());
        const auto created = *store.job(id);
        enqueue(id);
        reply_json(res, job_view_json(created), 202);
    }));

    http.Get("/api/v1/jobs", guard([this](const httplib::Request&, httplib::Response& res) {
        json arr = json::array();
        for (const auto& j : store.jobs()) arr.push_back(job_view_json(j));
        reply_json(res, {{"jobs", arr}});
    }));

    http.Get(R"(/api/v1/jobs/([^/]+))", guard([this](const httplib::Request& req, httplib::Response& res) {
        const auto j = store.job(req.matches[1]);
        if (!j) throw ApiError(404, "unknown job " + std::string(req.matches[1]));
        reply_json(res, job_view_json(*j));
    }));

    http.Get("/api/v1/findings", guard([this](const httplib::Request& req, httplib::Response& res) {
        FindingFilter f;
        try {
            if (req.has_param("volume")) f.volume = req.get_param_value("volume");
            if (req.has_param("job")) f.job = req.get_param_value("job");
            if (req.has_param("cls")) f.cls = finding_class_from_string(req.get_param_value("cls"));
            if (req.has_param("review")) f.review = review_state_from_string(req.get_param_value("review"));
        } catch (const std::exception& e) {
            throw ApiError(422, e.what());
        }
        json arr = json::array();
        for (const auto& fv : collect_findings(store, f)) arr.push_back(finding_view_json(fv));
        reply_json(res, {{"findings", arr}});
    }));

    http.Get(R"(/api/v1/findings/([^/]+))", guard([this](const httplib::Request& req, httplib::Response& res) {
        reply_json(res, finding_view_json(find(req.matches[1])));
    }));

    http.Get(R"(/api/v1/findings/([^/]+)/render)", guard([this](const httplib::Request& req, httplib::Response& res) {
        const FindingView fv = find(req.matches[1]);
        View view;
        try {
            view = view_from_string(req.has_param("view") ? req.get_param_value("view") : "");
        } catch (const std::exception& e) {
            throw ApiError(422, "view must be B, C or D");
        }
        const auto r = render_footprint(store.load_volume(fv.volume_id), fv.finding.box, view);
        res.set_header("X-View", std::string(to_string(r.view)));
        res.set_header("X-Slice-Index", std::to_string(r.slice_index));
        res.set_header("X-Box", std::to_string(r.box.r0) + "," + std::to_string(r.box.c0) + "," +
                                    std::to_string(r.box.r1) + "," + std::to_string(r.box.c1));
        res.set_header("X-Image-Size", std::to_string(r.rows) + "," + std::to_string(r.cols));
        res.set_header("Access-Control-Expose-Headers", "X-View, X-Slice-Index, X-Box, X-Image-Size");
        res.set_content(r.png, "image/png");
    }));

    http.Post(R"(/api/v1/findings/([^/]+)/reviews)", guard([this](const httplib::Request& req, httplib::Response& res) {
        const FindingView fv = find(req.matches[1]);
        ReviewVerdict v;
        try {
            const auto body = json::parse(req.body);
            for (const auto& [k, _] : body.items()) {
                if (k != "verdict" && k != "corrected_cls") throw std::invalid_argument("unknown field '" + k + "'");
            }
            v.verdict = verdict_from_string(body.at("verdict").get<std::string>());
            if (body.contains("corrected_cls")) {
                v.corrected = finding_class_from_string(body.at("corrected_cls").get<std::string>());
                if (*v.corrected == FindingClass::DistressUnspecified) {
                    throw std::invalid_argument("corrected class must be manhole, void or loose");
                }
            }
            if ((v.verdict == Verdict::Reclassify) != v.corrected.has_value()) {
                throw std::invalid_argument("corrected_cls is required for reclassify and only for reclassify");
            }
        } catch (const std::exception& e) {
            throw ApiError(422, std::string("invalid verdict: ") + e.what());
        }
        v.finding_id = fv.api_id;
        v.reviewer = req.has_header("X-Reviewer") ? req.get_header_value("X-Reviewer") : "anonymous";
        v.timestamp_ms = now_ms();
        store.add_verdict(v);
        reply_json(res, finding_view_json(find(fv.api_id)), 201);
    }));

    http.Get(R"(/api/v1/findings/([^/]+)/reviews)", guard([this](const httplib::Request& req, httplib::Response& res) {
        const FindingView fv = find(req.matches[1]);
        json arr = json::array();
        for (const auto& v : store.verdicts_for(fv.api_id)) {
            json j = {{"verdict", std::string(to_string(v.verdict))},
                      {"reviewer", v.reviewer},
                      {"timestamp_ms", v.timestamp_ms}};
            if (v.corrected) j["corrected_cls"] = std::string(to_string(*v.corrected));
            arr.push_back(std::move(j));
        }
        reply_json(res, {{"reviews", arr}});
    }));

    http.Get("/api/v1/report", guard([this](const httplib::Request& req, httplib::Response& res) {
        std::optional<std::string> volume;
        if (req.has_param("volume")) volume = req.get_param_value("volume");
        const auto report = export_report(store, volume);
        const std::string format = req.has_param("format") ? req.get_param_value("format") : "json";
        if (format == "json") {
            reply_json(res, report);
        } else if (format == "text") {
            res.set_content(report_text(report), "text/plain");
        } else {
            throw ApiError(422, "format must be json or text");
        }
    }));
}

Service::Service(ServiceOptions opt) : impl_(std::make_unique<Impl>(std::move(opt)))
{
    impl_->routes();
    const int n = std::max(1, impl_->opt.workers);
    for (int i = 0; i < n; ++i) impl_->workers.emplace_back([this] { impl_->work(); });
    for (const auto& j : impl_->store.jobs()) {
        if (j.state == JobState::Queued || j.state == JobState::Running) impl_->enqueue(j.id);
    }
}

Service::~Service()
{
    stop();
    {
        std::lock_guard lock(impl_->mu);
        impl_->stopping = true;
    }
    impl_->cv.notify_all();
    for (auto& t : impl_->workers) t.join();
}

int Service::bind(const std::string& host, int port)
{
    if (port == 0) return impl_->http.bind_to_any_port(host);
    if (!impl_->http.bind_to_port(host, port)) return -1;
    return port;
}

void Service::run() { impl_->http.listen_after_bind(); }

int Service::start(const std::string& host, int port)
{
    const int bound = bind(host, port);
    if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
    impl_->listener = std::thread([this] { run(); });
    impl_->http.wait_until_ready();
    return bound;
}

void Service::stop()
{
    impl_->http.stop();
    if (impl_->listener.joinable()) impl_->listener.join();
}

std::string Service::submit_job(const std::string& volume_id, const PipelineConfig& cfg)
{
    cfg.validate();
    const auto id = impl_->store.add_job(volume_id, cfg.to_json());
    impl_->enqueue(id);
    return id;
}

void Service::wait_idle()
{
    std::unique_lock lock(impl_->mu);
    impl_->cv.wait(lock, [&] { return impl_->queue.empty() && impl_->active == 0; });
}

Store& Service::store() { return impl_->store; }

}  // namespace gprxv
